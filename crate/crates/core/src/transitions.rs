//! Magnetic-dipole transition probabilities between eigenstates and
//! spin-temperature weighted intensities.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constants::PhysicalConstants;
use crate::error::{Error, Result};
use crate::hamiltonian::level_sweep;
use crate::spin_core::{embed, spin_matrices_for, EigenSystem, NvLabel, OperatorMatrix, ProductBasis, Spin};

/// Largest |β| accepted before the exponentials overflow in practice.
pub const MAX_ABS_BETA: f64 = 300.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpinTemperature(f64);

impl SpinTemperature {
    pub fn new(beta: f64) -> Result<Self> {
        if !beta.is_finite() {
            return Err(Error::invalid("spin temperature must be finite"));
        }
        if beta.abs() > MAX_ABS_BETA {
            return Err(Error::Range(format!(
                "|beta| = {} exceeds {MAX_ABS_BETA}",
                beta.abs()
            )));
        }
        Ok(SpinTemperature(beta))
    }

    pub fn unpolarized() -> Self {
        SpinTemperature(0.0)
    }

    pub fn beta(self) -> f64 {
        self.0
    }
}

/// 14N sublevel weights ordered `m_I = +1, 0, -1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Populations {
    /// `exp(-m β) / exp(-β)`: referenced to `m_I = +1`.
    pub raw: [f64; 3],
    /// `raw / sum(raw)`.
    pub normalized: [f64; 3],
}

impl Populations {
    pub fn of(&self, mi: i8) -> f64 {
        self.normalized[(1 - mi) as usize]
    }
}

pub fn populations(beta: f64) -> Result<Populations> {
    let beta = SpinTemperature::new(beta)?.beta();
    let exponents = [0.0, beta, 2.0 * beta];
    let top = exponents.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shifted = exponents.map(|x| (x - top).exp());
    let sum: f64 = shifted.iter().sum();
    Ok(Populations {
        raw: exponents.map(f64::exp),
        normalized: shifted.map(|x| x / sum),
    })
}

/// `Ψ† (S+ + S-) ⊗ 1 Ψ` in the eigenbasis, microwave amplitude set to one.
pub fn dipole_elements(system: &EigenSystem) -> Result<OperatorMatrix> {
    let basis = ProductBasis::for_dim(system.dim())
        .ok_or_else(|| Error::invalid(format!("dimension {} is not 9*2^N", system.dim())))?;
    let s = spin_matrices_for(Spin::One);
    let drive = embed(&(s.s_plus.clone() + s.s_minus.clone()), 0, &basis.dims())?;
    let v = &system.vectors;
    OperatorMatrix::new(v.adjoint() * drive.entries() * v)
}

/// `p'_ij = m'_ij m'_ji` (real part; equals `|m'_ij|²` for Hermitian `m'`).
pub fn transition_probabilities(m: &OperatorMatrix) -> DMatrix<f64> {
    let e = m.entries();
    DMatrix::from_fn(m.dim(), m.dim(), |i, j| (e[(i, j)] * e[(j, i)]).re)
}

/// How level populations enter the intensities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PopulationMode {
    /// Lower state only; its population follows its nominal label.
    #[default]
    NominalLowerState,
    /// Lower state only; population averaged over its basis composition.
    CompositionLowerState,
    /// `sqrt(P(m_I,i) P(m_I,f))` over nominal 14N projections.
    GeometricMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityOptions {
    pub mode: PopulationMode,
    /// Fraction of the lower-state population in `m_S = 0`; the rest is in
    /// `m_S = -1`. `m_S = +1` is always empty.
    pub manifold_split: f64,
    /// Rows with intensity below `floor * max(intensity)` are dropped.
    pub floor: f64,
}

impl Default for IntensityOptions {
    fn default() -> Self {
        IntensityOptions {
            mode: PopulationMode::default(),
            manifold_split: 1.0,
            floor: 1e-6,
        }
    }
}

impl IntensityOptions {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.manifold_split) {
            return Err(Error::invalid(format!(
                "manifold split must be in [0,1], got {}",
                self.manifold_split
            )));
        }
        if !(self.floor >= 0.0 && self.floor < 1.0) {
            return Err(Error::invalid("intensity floor must be in [0,1)"));
        }
        Ok(())
    }
}

/// Which group of lines a table row belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransitionMode {
    /// One endpoint in `m_S = +1` (the 5.6–5.9 GHz lines).
    Hi,
    /// Both endpoints in `m_S ∈ {0,-1}` (the sub-40 MHz lines near the crossing).
    Lo,
    All,
}

impl TransitionMode {
    /// Nominal microwave window (MHz).
    pub fn window_mhz(self) -> (f64, f64) {
        match self {
            TransitionMode::Hi => (5600.0, 5900.0),
            TransitionMode::Lo => (0.0, 40.0),
            TransitionMode::All => (0.0, f64::INFINITY),
        }
    }

    pub fn accepts(self, from: &NvLabel, to: &NvLabel) -> bool {
        let ups = usize::from(from.ms == 1) + usize::from(to.ms == 1);
        match self {
            TransitionMode::Hi => ups == 1,
            TransitionMode::Lo => ups == 0,
            TransitionMode::All => true,
        }
    }
}

impl std::str::FromStr for TransitionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hi" => Ok(TransitionMode::Hi),
            "lo" => Ok(TransitionMode::Lo),
            "all" => Ok(TransitionMode::All),
            _ => Err(Error::invalid(format!("unknown mode '{s}' (hi|lo|all)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRow {
    /// Eigen-index of the populated (initial) state.
    pub i: usize,
    /// Eigen-index of the other state.
    pub j: usize,
    pub freq_mhz: f64,
    pub probability: f64,
    pub intensity: f64,
    pub label_from: NvLabel,
    pub label_to: NvLabel,
}

/// Transitions at one field point, plus every level so that absent rows can
/// still be located.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionTable {
    pub b_mt: f64,
    pub rows: Vec<TransitionRow>,
    pub levels: Vec<(NvLabel, f64)>,
}

impl TransitionTable {
    pub fn select(&self, mode: TransitionMode) -> TransitionTable {
        TransitionTable {
            b_mt: self.b_mt,
            rows: self
                .rows
                .iter()
                .filter(|r| mode.accepts(&r.label_from, &r.label_to))
                .cloned()
                .collect(),
            levels: self.levels.clone(),
        }
    }

    pub fn total_intensity(&self) -> f64 {
        self.rows.iter().map(|r| r.intensity).sum()
    }

    pub fn max_intensity(&self) -> f64 {
        self.rows.iter().map(|r| r.intensity).fold(0.0, f64::max)
    }
}

fn manifold_share(ms: i8, split: f64) -> f64 {
    match ms {
        0 => split,
        -1 => 1.0 - split,
        _ => 0.0,
    }
}

/// Ordering used to pick the initial state of a pair: `m_S = 0` before
/// `m_S = -1` before `m_S = +1`.
fn source_rank(ms: i8) -> u8 {
    match ms {
        0 => 0,
        -1 => 1,
        _ => 2,
    }
}

/// Builds the transition table from `p'` and the level populations.
pub fn intensity_matrix(
    p: &DMatrix<f64>,
    system: &EigenSystem,
    beta: SpinTemperature,
    opts: &IntensityOptions,
) -> Result<TransitionTable> {
    opts.validate()?;
    let n = system.dim();
    if p.nrows() != n || p.ncols() != n {
        return Err(Error::invalid(format!(
            "probability matrix is {}x{}, system has {n} levels",
            p.nrows(),
            p.ncols()
        )));
    }
    let basis = ProductBasis::for_dim(n)
        .ok_or_else(|| Error::invalid(format!("dimension {n} is not 9*2^N")))?;
    if system.labels.len() != n {
        return Err(Error::Internal("eigen-system has no labels".into()));
    }
    let labels: Vec<NvLabel> = system.labels.iter().map(|&k| basis.label(k)).collect();
    let pops = populations(beta.beta())?;
    let spectator = 1.0 / (1u64 << basis.n_c13) as f64;
    let basis_pop: Vec<f64> = (0..n)
        .map(|b| {
            let l = basis.label(b);
            manifold_share(l.ms, opts.manifold_split) * pops.of(l.mi) * spectator
        })
        .collect();
    let level_pop: Vec<f64> = (0..n)
        .map(|k| match opts.mode {
            PopulationMode::CompositionLowerState => (0..n)
                .map(|b| system.vectors[(b, k)].norm_sqr() * basis_pop[b])
                .sum(),
            _ => basis_pop[system.labels[k]],
        })
        .collect();

    let mut rows = Vec::new();
    for a in 0..n {
        for b in (a + 1)..n {
            let prob = p[(a, b)];
            if prob <= 0.0 {
                continue;
            }
            let freq = (system.energies[b] - system.energies[a]).abs();
            if freq <= 0.0 {
                continue;
            }
            let (ra, rb) = (source_rank(labels[a].ms), source_rank(labels[b].ms));
            let (i, j) = if ra < rb || (ra == rb && system.energies[a] <= system.energies[b]) {
                (a, b)
            } else {
                (b, a)
            };
            let weight = match opts.mode {
                PopulationMode::GeometricMean => {
                    (pops.of(labels[i].mi) * pops.of(labels[j].mi)).sqrt() * spectator
                }
                _ => level_pop[i],
            };
            let intensity = prob * weight;
            if intensity > 0.0 {
                rows.push(TransitionRow {
                    i,
                    j,
                    freq_mhz: freq,
                    probability: prob,
                    intensity,
                    label_from: labels[i].clone(),
                    label_to: labels[j].clone(),
                });
            }
        }
    }
    let top = rows.iter().map(|r| r.intensity).fold(0.0, f64::max);
    rows.retain(|r| r.intensity > opts.floor * top);
    Ok(TransitionTable {
        b_mt: f64::NAN,
        rows,
        levels: labels.into_iter().zip(system.energies.iter().copied()).collect(),
    })
}

/// Dipole elements, probabilities and intensities for one eigen-system.
pub fn transition_table(
    system: &EigenSystem,
    b_mt: f64,
    beta: SpinTemperature,
    opts: &IntensityOptions,
) -> Result<TransitionTable> {
    let m = dipole_elements(system)?;
    let p = transition_probabilities(&m);
    let mut table = intensity_matrix(&p, system, beta, opts)?;
    table.b_mt = b_mt;
    Ok(table)
}

/// Transition tables along a field sweep with labels carried by continuity.
pub fn transition_sweep(
    c: &PhysicalConstants,
    fields_mt: &[f64],
    theta_deg: f64,
    beta: SpinTemperature,
    opts: &IntensityOptions,
) -> Result<Vec<TransitionTable>> {
    let systems = level_sweep(c, fields_mt, theta_deg)?;
    systems
        .par_iter()
        .zip(fields_mt.par_iter())
        .map(|(sys, &b)| transition_table(sys, b, beta, opts))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::{build_nv_hamiltonian, FieldConfig};
    use crate::spin_core::{eigensolve, CMatrix};
    use approx::assert_abs_diff_eq;
    use num_complex::Complex64;

    fn system_at(b: f64) -> EigenSystem {
        eigensolve(&build_nv_hamiltonian(&PhysicalConstants::default(), &FieldConfig::axial(b))).unwrap()
    }

    fn basis_system() -> EigenSystem {
        EigenSystem {
            energies: (0..9).map(|k| k as f64).collect(),
            vectors: CMatrix::identity(9, 9),
            labels: (0..9).collect(),
        }
    }

    fn row<'a>(t: &'a TransitionTable, from: (i8, i8), to: (i8, i8)) -> Option<&'a TransitionRow> {
        t.rows
            .iter()
            .find(|r| r.label_from.matches_nv(from.0, from.1) && r.label_to.matches_nv(to.0, to.1))
    }

    #[test]
    fn population_examples() {
        let p = populations(0.0).unwrap();
        assert_eq!(p.raw, [1.0, 1.0, 1.0]);
        for x in p.normalized {
            assert_abs_diff_eq!(x, 1.0 / 3.0, epsilon = 1e-15);
        }
        let p = populations(2f64.ln()).unwrap();
        for (got, want) in p.raw.iter().zip([1.0, 2.0, 4.0]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
        for (got, want) in p.normalized.iter().zip([1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
        let p = populations(-60.0).unwrap();
        assert_abs_diff_eq!(p.normalized[0], 1.0, epsilon = 1e-15);
        assert!(p.normalized[1] < 1e-25 && p.normalized[2] < 1e-50);
    }

    #[test]
    fn population_range_errors() {
        assert!(matches!(populations(301.0), Err(Error::Range(_))));
        assert!(matches!(populations(-301.0), Err(Error::Range(_))));
        assert!(populations(f64::NAN).is_err());
    }

    #[test]
    fn basis_states_obey_selection_rules() {
        let sys = basis_system();
        let m = dipole_elements(&sys).unwrap();
        assert!(m.is_hermitian());
        let basis = ProductBasis::new(0);
        for a in 0..9 {
            for b in 0..9 {
                let (la, lb) = (basis.label(a), basis.label(b));
                let allowed = (la.ms - lb.ms).abs() == 1 && la.mi == lb.mi;
                assert_eq!(m.entries()[(a, b)].norm() > 0.0, allowed, "{la} {lb}");
            }
        }
        let p = transition_probabilities(&m);
        let z = basis.index_of(&NvLabel::new(0, 0)).unwrap();
        let d = basis.index_of(&NvLabel::new(-1, 0)).unwrap();
        assert_abs_diff_eq!(p[(z, d)], 2.0, epsilon = 1e-14);
    }

    #[test]
    fn zero_probabilities_give_empty_table() {
        let sys = basis_system();
        let p = DMatrix::zeros(9, 9);
        let t = intensity_matrix(&p, &sys, SpinTemperature::unpolarized(), &Default::default()).unwrap();
        assert!(t.rows.is_empty());
        assert_eq!(transition_probabilities(&OperatorMatrix::zeros(4)), DMatrix::zeros(4, 4));
    }

    #[test]
    fn probabilities_symmetric_and_nonnegative() {
        let sys = system_at(102.3);
        let p = transition_probabilities(&dipole_elements(&sys).unwrap());
        for i in 0..9 {
            for j in 0..9 {
                assert!(p[(i, j)] >= -1e-15);
                assert_abs_diff_eq!(p[(i, j)], p[(j, i)], epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn probabilities_ignore_eigenvector_phases() {
        let sys = system_at(102.45);
        let p0 = transition_probabilities(&dipole_elements(&sys).unwrap());
        let mut rotated = sys.clone();
        for k in 0..9 {
            let phase = Complex64::from_polar(1.0, 0.7 * k as f64 + 0.3);
            for r in 0..9 {
                rotated.vectors[(r, k)] *= phase;
            }
        }
        let p1 = transition_probabilities(&dipole_elements(&rotated).unwrap());
        assert!((p0 - p1).abs().max() < 1e-12);
    }

    #[test]
    fn far_field_strengths_nearly_equal() {
        // First-order admixtures through the transverse hyperfine term:
        // psi_lo = |0,mI> + a|-1,mI+1>, psi_hi = |1,mI> + b|0,mI+1>, so
        // p' = 2 (1 + ab)^2 / ((1 + a^2)(1 + b^2)).
        let c = PhysicalConstants::default();
        let b = 95.0;
        let e = |ms: i8, mi: i8| {
            let (s, i) = (ms as f64, mi as f64);
            c.d_g * s * s + c.gamma_e * b * s + c.q * i * i - c.gamma_n14 * b * i + c.a_par * s * i
        };
        let amp = |from: (i8, i8), to: (i8, i8)| {
            if to.1.abs() > 1 {
                0.0
            } else {
                c.a_perp / (e(from.0, from.1) - e(to.0, to.1))
            }
        };
        let oracle = |mi: i8| {
            let lo = amp((0, mi), (-1, mi + 1));
            let lo_up = amp((0, mi), (1, mi - 1));
            let hi = amp((1, mi), (0, mi + 1));
            2.0 * (1.0 + lo * hi).powi(2) / ((1.0 + lo * lo + lo_up * lo_up) * (1.0 + hi * hi))
        };
        let sys = system_at(b);
        let t = transition_table(&sys, b, SpinTemperature::unpolarized(), &Default::default())
            .unwrap()
            .select(TransitionMode::Hi);
        let p = |mi| row(&t, (0, mi), (1, mi)).unwrap().probability;
        for mi in [1, 0, -1] {
            assert_abs_diff_eq!(p(mi), oracle(mi), epsilon = 2e-6);
            assert!((p(mi) / p(1) - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn unpolarized_far_field_intensities_equal() {
        let sys = system_at(95.0);
        let t = transition_table(&sys, 95.0, SpinTemperature::unpolarized(), &Default::default())
            .unwrap()
            .select(TransitionMode::Hi);
        let main: Vec<f64> = [1, 0, -1]
            .iter()
            .map(|&mi| row(&t, (0, mi), (1, mi)).unwrap().intensity)
            .collect();
        for x in &main {
            assert!((x / main[0] - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn spin_temperature_ratio() {
        // normalized populations (1,2,4)/7 -> |0,-1> line is 4x the |0,+1> line
        let sys = system_at(95.0);
        let beta = SpinTemperature::new(2f64.ln()).unwrap();
        let t = transition_table(&sys, 95.0, beta, &Default::default()).unwrap();
        let hi = row(&t, (0, -1), (1, -1)).unwrap().intensity;
        let lo = row(&t, (0, 1), (1, 1)).unwrap().intensity;
        assert!((hi / lo / 4.0 - 1.0).abs() < 1e-3, "{}", hi / lo);
    }

    #[test]
    fn geometric_mean_matches_lower_state_for_allowed_lines() {
        let sys = system_at(95.0);
        let beta = SpinTemperature::new(0.4).unwrap();
        let a = transition_table(&sys, 95.0, beta, &Default::default()).unwrap();
        let opts = IntensityOptions {
            mode: PopulationMode::GeometricMean,
            ..Default::default()
        };
        let b = transition_table(&sys, 95.0, beta, &opts).unwrap();
        for mi in [1, 0, -1] {
            let x = row(&a, (0, mi), (1, mi)).unwrap().intensity;
            let y = row(&b, (0, mi), (1, mi)).unwrap().intensity;
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn more_lines_near_crossing() {
        let count = |b: f64| {
            transition_table(&system_at(b), b, SpinTemperature::unpolarized(), &Default::default())
                .unwrap()
                .rows
                .len()
        };
        let (near, far) = (count(102.4), count(95.0));
        assert!(near > far, "near {near} far {far}");
    }

    #[test]
    fn population_scale_does_not_change_relative_intensities() {
        // split 1 vs split 0.5 only rescales m_S = 0 sources far from the crossing
        let sys = system_at(95.0);
        let beta = SpinTemperature::new(-0.3).unwrap();
        let a = transition_table(&sys, 95.0, beta, &Default::default()).unwrap().select(TransitionMode::Hi);
        let opts = IntensityOptions {
            manifold_split: 0.5,
            ..Default::default()
        };
        let b = transition_table(&sys, 95.0, beta, &opts).unwrap().select(TransitionMode::Hi);
        for mi in [1, 0, -1] {
            let x = row(&a, (0, mi), (1, mi)).unwrap().intensity / a.max_intensity();
            let y = row(&b, (0, mi), (1, mi)).unwrap().intensity / b.max_intensity();
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn mode_filters() {
        let sys = system_at(102.4);
        let t = transition_table(&sys, 102.4, SpinTemperature::unpolarized(), &Default::default()).unwrap();
        let hi = t.select(TransitionMode::Hi);
        let lo = t.select(TransitionMode::Lo);
        assert_eq!(hi.rows.len() + lo.rows.len(), t.rows.len());
        assert!(hi.rows.iter().all(|r| r.freq_mhz > 5600.0));
        assert!(lo.rows.iter().all(|r| r.freq_mhz < 40.0));
        assert_eq!("HI".parse::<TransitionMode>().unwrap(), TransitionMode::Hi);
        assert!("mid".parse::<TransitionMode>().is_err());
    }

    #[test]
    fn invalid_options_rejected() {
        let sys = system_at(100.0);
        let opts = IntensityOptions {
            manifold_split: 1.5,
            ..Default::default()
        };
        assert!(transition_table(&sys, 100.0, SpinTemperature::unpolarized(), &opts).is_err());
        let p = DMatrix::zeros(3, 3);
        assert!(intensity_matrix(&p, &sys, SpinTemperature::unpolarized(), &Default::default()).is_err());
    }
}
