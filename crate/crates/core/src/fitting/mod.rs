//! Reduced-χ² fits of measured spectra, field calibration and nuclear
//! polarization.
//!
//! The overall amplitude is a linear parameter and is profiled out
//! analytically at every evaluation: for a model shape `g` the best scale is
//! `Σ w d g / Σ w g²` (clamped at zero). Only β, B, the line width and the
//! electron-manifold split are searched numerically.

pub mod calibration;
pub mod optimizer;
pub mod polarization;

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::constants::PhysicalConstants;
use crate::error::{Error, Result};
use crate::hamiltonian::{build_nv_hamiltonian, gslac_field, FieldConfig};
use crate::spectrum::{evaluate, peaks_from_table, MeasuredSpectrum, SpectrumModel};
use crate::spin_core::{eigensolve, EigenSystem, NvLabel};
use crate::transitions::{
    dipole_elements, intensity_matrix, transition_probabilities, IntensityOptions, PopulationMode, SpinTemperature,
    TransitionMode, TransitionTable,
};

pub use calibration::{calibrate_field, CalibrationModel};
pub use optimizer::{Minimum, NelderMead};
pub use polarization::{alignment, orientation, polarization_sweep, PolarizationPoint, PolarizationReport};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitParams {
    pub beta: f64,
    pub b_mt: f64,
    /// Lorentzian half width at half maximum (MHz).
    pub width_mhz: f64,
    pub theta_deg: f64,
    pub manifold_split: f64,
}

impl FitParams {
    pub fn new(b_mt: f64, width_mhz: f64) -> Self {
        FitParams {
            beta: 0.0,
            b_mt,
            width_mhz,
            theta_deg: 0.0,
            manifold_split: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_mhz > 0.0 && self.width_mhz.is_finite()) {
            return Err(Error::invalid(format!("width must be positive, got {}", self.width_mhz)));
        }
        if !(0.0..=1.0).contains(&self.manifold_split) {
            return Err(Error::invalid(format!(
                "manifold split must be in [0,1], got {}",
                self.manifold_split
            )));
        }
        SpinTemperature::new(self.beta)?;
        FieldConfig::new(self.b_mt, self.theta_deg, 0.0)?;
        Ok(())
    }

    fn get(&self, p: Param) -> f64 {
        match p {
            Param::Beta => self.beta,
            Param::B => self.b_mt,
            Param::Width => self.width_mhz,
            Param::Split => self.manifold_split,
        }
    }

    fn set(&mut self, p: Param, v: f64) {
        match p {
            Param::Beta => self.beta = v,
            Param::B => self.b_mt = v,
            Param::Width => self.width_mhz = v,
            Param::Split => self.manifold_split = v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Param {
    Beta,
    B,
    Width,
    Split,
}

impl Param {
    pub fn name(self) -> &'static str {
        match self {
            Param::Beta => "beta",
            Param::B => "b_mt",
            Param::Width => "width_mhz",
            Param::Split => "manifold_split",
        }
    }

    fn step(self) -> f64 {
        match self {
            Param::Beta => 0.25,
            Param::B => 0.05,
            Param::Width => 0.2,
            Param::Split => 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitBounds {
    pub beta: (f64, f64),
    pub b_mt: (f64, f64),
    pub width_mhz: (f64, f64),
    pub manifold_split: (f64, f64),
}

impl FitBounds {
    /// β in [-5, 5], B within ±1 mT of `b_mt`, width in [0.05, 10] MHz.
    pub fn around(b_mt: f64) -> Self {
        FitBounds {
            beta: (-5.0, 5.0),
            b_mt: ((b_mt - 1.0).max(0.0), b_mt + 1.0),
            width_mhz: (0.05, 10.0),
            manifold_split: (0.0, 1.0),
        }
    }

    fn of(&self, p: Param) -> (f64, f64) {
        match p {
            Param::Beta => self.beta,
            Param::B => self.b_mt,
            Param::Width => self.width_mhz,
            Param::Split => self.manifold_split,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub mode: TransitionMode,
    /// Parameters to optimise; `None` applies the field rule: B free only
    /// farther than `b_free_threshold_mt` from the crossing, the manifold
    /// split free only inside it, β and width always free.
    pub free: Option<Vec<Param>>,
    pub b_free_threshold_mt: f64,
    /// β × width restart grid.
    pub restart_grid: (usize, usize),
    pub optimizer: NelderMead,
    pub population_mode: PopulationMode,
    pub floor: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            mode: TransitionMode::Hi,
            free: None,
            b_free_threshold_mt: 0.5,
            restart_grid: (5, 5),
            optimizer: NelderMead::default(),
            population_mode: PopulationMode::default(),
            floor: 1e-6,
        }
    }
}

impl FitOptions {
    pub fn for_mode(mode: TransitionMode) -> Self {
        FitOptions {
            mode,
            ..Default::default()
        }
    }

    fn intensity(&self, split: f64) -> IntensityOptions {
        IntensityOptions {
            mode: self.population_mode,
            manifold_split: split,
            floor: self.floor,
        }
    }
}

/// Fitted area of all lines sharing one nominal lower state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakArea {
    pub label: NvLabel,
    pub area: f64,
    /// Sum of `p'` over the same lines.
    pub strength: f64,
    /// `area / strength`.
    pub population: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: FitParams,
    pub chi2_red: f64,
    /// Profiled factor converting model intensities to data units.
    pub amplitude_scale: f64,
    pub peak_areas: Vec<PeakArea>,
    pub free: Vec<Param>,
    /// `d²χ²_red/dp²` at the optimum, per free parameter.
    pub curvature: BTreeMap<String, f64>,
    /// `sqrt(2 χ²_red / (N d²χ²_red/dp²))`; absent when the curvature is not positive.
    pub sigma_proxy: BTreeMap<String, Option<f64>>,
    pub flags: Vec<String>,
    pub evaluations: usize,
    pub n_points: usize,
}

fn check_grids(data: &MeasuredSpectrum, grid: &[f64]) -> Result<()> {
    if data.grid.len() != grid.len() {
        return Err(Error::GridMismatch(format!(
            "data has {} points, model has {}",
            data.grid.len(),
            grid.len()
        )));
    }
    for (k, (a, b)) in data.grid.iter().zip(grid).enumerate() {
        if (a - b).abs() > 1e-9 * a.abs().max(1.0) {
            return Err(Error::GridMismatch(format!("grids differ at index {k}: {a} vs {b} MHz")));
        }
    }
    Ok(())
}

/// `(1/N) Σ ((d − f)/σ)²` with `σ = 1` unless the data carry a sigma column.
pub fn reduced_chi2(data: &MeasuredSpectrum, model: &SpectrumModel) -> Result<f64> {
    check_grids(data, &model.grid)?;
    if data.is_empty() {
        return Err(Error::invalid("empty spectrum"));
    }
    let s: f64 = (0..data.len())
        .map(|k| ((data.values[k] - model.values[k]) / data.sigma_at(k)).powi(2))
        .sum();
    Ok(s / data.len() as f64)
}

/// Model evaluator with the eigen-decomposition cached per field value.
struct Evaluator<'a> {
    c: &'a PhysicalConstants,
    data: &'a MeasuredSpectrum,
    opts: &'a FitOptions,
    weights: Vec<f64>,
    cache: Option<(f64, f64, EigenSystem, DMatrix<f64>)>,
}

struct Evaluation {
    chi2: f64,
    scale: f64,
    table: TransitionTable,
}

impl<'a> Evaluator<'a> {
    fn new(c: &'a PhysicalConstants, data: &'a MeasuredSpectrum, opts: &'a FitOptions) -> Self {
        Evaluator {
            c,
            data,
            opts,
            weights: (0..data.len()).map(|k| data.sigma_at(k).powi(-2)).collect(),
            cache: None,
        }
    }

    fn table(&mut self, p: &FitParams) -> Result<TransitionTable> {
        let hit = matches!(&self.cache, Some((b, t, _, _)) if *b == p.b_mt && *t == p.theta_deg);
        if !hit {
            let field = FieldConfig::new(p.b_mt, p.theta_deg, 0.0)?;
            let sys = eigensolve(&build_nv_hamiltonian(self.c, &field))?;
            let prob = transition_probabilities(&dipole_elements(&sys)?);
            self.cache = Some((p.b_mt, p.theta_deg, sys, prob));
        }
        let (_, _, sys, prob) = self.cache.as_ref().expect("filled above");
        let mut t = intensity_matrix(prob, sys, SpinTemperature::new(p.beta)?, &self.opts.intensity(p.manifold_split))?
            .select(self.opts.mode);
        t.b_mt = p.b_mt;
        Ok(t)
    }

    fn evaluate(&mut self, p: &FitParams) -> Result<Evaluation> {
        let table = self.table(p)?;
        let shape = evaluate(&peaks_from_table(&table, p.width_mhz), &self.data.grid);
        let (mut dg, mut gg) = (0.0, 0.0);
        for ((d, g), w) in self.data.values.iter().zip(&shape).zip(&self.weights) {
            dg += w * d * g;
            gg += w * g * g;
        }
        let scale = if gg > 0.0 { (dg / gg).max(0.0) } else { 0.0 };
        let chi: f64 = self
            .data
            .values
            .iter()
            .zip(&shape)
            .zip(&self.weights)
            .map(|((d, g), w)| w * (d - scale * g).powi(2))
            .sum();
        Ok(Evaluation {
            chi2: chi / self.data.len() as f64,
            scale,
            table,
        })
    }

    fn chi2(&mut self, p: &FitParams) -> f64 {
        self.evaluate(p).map_or(f64::INFINITY, |e| e.chi2)
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![0.5 * (lo + hi)],
        _ => (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect(),
    }
}

fn geomspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    linspace(lo.ln(), hi.ln(), n).into_iter().map(f64::exp).collect()
}

/// Free parameters under the automatic field rule.
pub fn default_free_params(c: &PhysicalConstants, b_mt: f64, threshold_mt: f64) -> Vec<Param> {
    if (b_mt - gslac_field(c)).abs() > threshold_mt {
        vec![Param::Beta, Param::B, Param::Width]
    } else {
        vec![Param::Beta, Param::Width, Param::Split]
    }
}

fn check_mode_window(data: &MeasuredSpectrum, mode: TransitionMode) -> Result<()> {
    let (lo, hi) = mode.window_mhz();
    let (first, last) = (data.grid[0], *data.grid.last().expect("validated nonempty"));
    if last < lo || first > hi {
        return Err(Error::GridMismatch(format!(
            "spectrum grid {first}..{last} MHz lies outside the {mode:?} window {lo}..{hi} MHz"
        )));
    }
    Ok(())
}

/// Minimises the reduced χ² over the free parameters, restarting
/// Nelder–Mead from the initial point and the best cells of a coarse
/// β × width grid.
pub fn fit_spectrum(
    c: &PhysicalConstants,
    data: &MeasuredSpectrum,
    initial: &FitParams,
    bounds: &FitBounds,
    opts: &FitOptions,
) -> Result<FitResult> {
    data.validate()?;
    initial.validate()?;
    check_mode_window(data, opts.mode)?;
    let free = match &opts.free {
        Some(f) => {
            let mut f = f.clone();
            f.sort();
            f.dedup();
            f
        }
        None => default_free_params(c, initial.b_mt, opts.b_free_threshold_mt),
    };
    for &p in &free {
        let (lo, hi) = bounds.of(p);
        let v = initial.get(p);
        if !(lo <= v && v <= hi) {
            return Err(Error::invalid(format!("initial {} = {v} outside bounds [{lo}, {hi}]", p.name())));
        }
    }
    if free.contains(&Param::Width) && bounds.width_mhz.0 <= 0.0 {
        return Err(Error::invalid("width lower bound must be positive"));
    }

    let mut ev = Evaluator::new(c, data, opts);
    let pack = |p: &FitParams| free.iter().map(|&q| p.get(q)).collect::<Vec<_>>();
    let unpack = |x: &[f64]| {
        let mut p = *initial;
        for (&q, &v) in free.iter().zip(x) {
            p.set(q, v);
        }
        p
    };
    let lower: Vec<f64> = free.iter().map(|&p| bounds.of(p).0).collect();
    let upper: Vec<f64> = free.iter().map(|&p| bounds.of(p).1).collect();
    let steps: Vec<f64> = free.iter().map(|&p| p.step()).collect();

    let mut evaluations = 0usize;
    let mut starts = vec![pack(initial)];
    let beta_free = free.contains(&Param::Beta);
    let width_free = free.contains(&Param::Width);
    if beta_free || width_free {
        let betas = if beta_free {
            linspace(bounds.beta.0.max(-2.0), bounds.beta.1.min(2.0), opts.restart_grid.0)
        } else {
            vec![initial.beta]
        };
        let widths = if width_free {
            geomspace(bounds.width_mhz.0.max(0.3), bounds.width_mhz.1.min(3.0), opts.restart_grid.1)
        } else {
            vec![initial.width_mhz]
        };
        let mut scored = Vec::new();
        for &b in &betas {
            for &w in &widths {
                let mut p = *initial;
                p.beta = b;
                p.width_mhz = w;
                evaluations += 1;
                scored.push((ev.chi2(&p), pack(&p)));
            }
        }
        scored.sort_by(|a, b| a.0.total_cmp(&b.0));
        starts.extend(scored.into_iter().take(3).map(|(_, x)| x));
    }

    let mut best: Option<Minimum> = None;
    let mut converged = true;
    for x0 in starts {
        let budget = opts.optimizer.max_evaluations.saturating_sub(evaluations);
        let nm = NelderMead {
            max_evaluations: budget,
            ..opts.optimizer
        };
        let m = nm.minimize(|x| ev.chi2(&unpack(x)), &x0, &steps, &lower, &upper);
        evaluations += m.evaluations;
        let better = best.as_ref().is_none_or(|b| m.f < b.f);
        if !m.converged {
            converged = false;
        }
        if better {
            best = Some(m);
        }
        if !converged {
            break;
        }
    }
    let best = best.expect("at least one start");
    let params = unpack(&best.x);
    let mut result = summarize(&mut ev, c, &params, &free, bounds, opts, evaluations)?;
    if !converged {
        result.flags.push("not_converged".into());
        return Err(Error::NonConvergence {
            evaluations,
            best: Box::new(result),
        });
    }
    Ok(result)
}

fn summarize(
    ev: &mut Evaluator<'_>,
    c: &PhysicalConstants,
    params: &FitParams,
    free: &[Param],
    bounds: &FitBounds,
    opts: &FitOptions,
    evaluations: usize,
) -> Result<FitResult> {
    let e = ev.evaluate(params)?;
    let n = ev.data.len() as f64;

    let mut groups: BTreeMap<NvLabel, (f64, f64)> = BTreeMap::new();
    for r in &e.table.rows {
        let g = groups.entry(r.label_from.clone()).or_default();
        g.0 += e.scale * r.intensity;
        g.1 += r.probability;
    }
    let peak_areas = groups
        .into_iter()
        .map(|(label, (area, strength))| PeakArea {
            label,
            area,
            strength,
            population: if strength > 0.0 { area / strength } else { 0.0 },
        })
        .collect();

    let mut curvature = BTreeMap::new();
    let mut sigma_proxy = BTreeMap::new();
    let mut flags = Vec::new();
    for &p in free {
        let (lo, hi) = bounds.of(p);
        let v = params.get(p);
        let h = 0.02 * p.step();
        let center = v.clamp(lo + h, hi - h);
        let at = |ev: &mut Evaluator<'_>, x: f64| {
            let mut q = *params;
            q.set(p, x);
            ev.chi2(&q)
        };
        let d2 = (at(ev, center + h) - 2.0 * at(ev, center) + at(ev, center - h)) / (h * h);
        curvature.insert(p.name().to_string(), d2);
        let proxy = (d2 > 0.0).then(|| (2.0 * e.chi2 / (n * d2)).sqrt());
        sigma_proxy.insert(p.name().to_string(), proxy);
        if (v - lo).abs() <= 1e-6 * p.step() || (hi - v).abs() <= 1e-6 * p.step() {
            flags.push(format!("{}_at_bound", p.name()));
        }
    }
    if !free.contains(&Param::B) {
        flags.push("b_fixed".into());
    }
    if (params.b_mt - gslac_field(c)).abs() <= opts.b_free_threshold_mt {
        flags.push("near_gslac".into());
    }
    if e.scale == 0.0 {
        flags.push("scale_clamped".into());
    }
    Ok(FitResult {
        params: *params,
        chi2_red: e.chi2,
        amplitude_scale: e.scale,
        peak_areas,
        free: free.to_vec(),
        curvature,
        sigma_proxy,
        flags,
        evaluations,
        n_points: ev.data.len(),
    })
}

/// Model spectrum (unit scale) for given parameters, as the fit sees it.
pub fn model_spectrum(
    c: &PhysicalConstants,
    params: &FitParams,
    opts: &FitOptions,
    grid: &[f64],
) -> Result<SpectrumModel> {
    params.validate()?;
    let field = FieldConfig::new(params.b_mt, params.theta_deg, 0.0)?;
    let sys = eigensolve(&build_nv_hamiltonian(c, &field))?;
    let prob = transition_probabilities(&dipole_elements(&sys)?);
    let mut t = intensity_matrix(
        &prob,
        &sys,
        SpinTemperature::new(params.beta)?,
        &opts.intensity(params.manifold_split),
    )?
    .select(opts.mode);
    t.b_mt = params.b_mt;
    crate::spectrum::synthesize(&t, params.width_mhz, grid)
}

/// Noisy synthetic measurement: the model normalised to unit peak plus
/// Gaussian noise of standard deviation `noise` (same units), drawn from
/// `ChaCha8Rng::seed_from_u64(seed)`.
pub fn synthetic_spectrum(
    c: &PhysicalConstants,
    params: &FitParams,
    opts: &FitOptions,
    grid: &[f64],
    noise: f64,
    seed: u64,
) -> Result<MeasuredSpectrum> {
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::invalid("noise level must be nonnegative"));
    }
    let model = model_spectrum(c, params, opts, grid)?.normalize()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, noise).map_err(|e| Error::invalid(e.to_string()))?;
    let values = model.values.iter().map(|v| v + dist.sample(&mut rng)).collect();
    let mut m = MeasuredSpectrum::new(grid.to_vec(), values)?;
    m.meta.b_mt = Some(params.b_mt);
    Ok(m)
}

/// Parameters and options for a low-frequency fit inside the crossing
/// window: B from the calibration, β and width carried over from the
/// high-frequency fit at the same current, only the manifold split free.
pub fn near_gslac_preset(
    hi_fit: &FitResult,
    calibration: &CalibrationModel,
    current_a: f64,
) -> (FitParams, FitOptions) {
    let params = FitParams {
        b_mt: calibration.predict(current_a),
        ..hi_fit.params
    };
    let opts = FitOptions {
        mode: TransitionMode::Lo,
        free: Some(vec![Param::Split]),
        ..Default::default()
    };
    (params, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectrum::uniform_grid;
    use approx::assert_abs_diff_eq;

    fn hi_grid(c: &PhysicalConstants, b: f64) -> Vec<f64> {
        let f0 = c.d_g + c.gamma_e * b;
        uniform_grid(f0 - 12.0, f0 + 12.0, 0.1).unwrap()
    }

    fn measured(grid: Vec<f64>, values: Vec<f64>) -> MeasuredSpectrum {
        MeasuredSpectrum::new(grid, values).unwrap()
    }

    #[test]
    fn chi2_examples() {
        let grid = vec![1.0, 2.0, 3.0];
        let model = SpectrumModel {
            peaks: vec![],
            grid: grid.clone(),
            values: vec![0.1, 0.2, 0.3],
            scale: 1.0,
        };
        assert_eq!(reduced_chi2(&measured(grid.clone(), model.values.clone()), &model).unwrap(), 0.0);
        let shifted = measured(grid.clone(), model.values.iter().map(|v| v + 1.0).collect());
        assert_abs_diff_eq!(reduced_chi2(&shifted, &model).unwrap(), 1.0, epsilon = 1e-15);
        let other = measured(vec![1.0, 2.0, 3.5], vec![0.0; 3]);
        assert!(matches!(reduced_chi2(&other, &model), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn chi2_of_gaussian_noise() {
        let n = 1000;
        let grid: Vec<f64> = (0..n).map(|k| k as f64).collect();
        let model = SpectrumModel {
            peaks: vec![],
            grid: grid.clone(),
            values: grid.iter().map(|f| (f * 0.01).sin()).collect(),
            scale: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let data = measured(grid, model.values.iter().map(|v| v + noise.sample(&mut rng)).collect());
        let chi = reduced_chi2(&data, &model).unwrap();
        assert!((chi - 0.01).abs() < 0.001, "{chi}");
    }

    #[test]
    fn chi2_translation_consistent() {
        let grid = vec![1.0, 2.0, 3.0, 4.0];
        let model_values = vec![0.3, -0.2, 0.9, 0.1];
        let data_values = vec![0.25, -0.1, 1.0, 0.0];
        let model = |shift: f64| SpectrumModel {
            peaks: vec![],
            grid: grid.clone(),
            values: model_values.iter().map(|v| v + shift).collect(),
            scale: 1.0,
        };
        let data = |shift: f64| measured(grid.clone(), data_values.iter().map(|v| v + shift).collect());
        let a = reduced_chi2(&data(0.0), &model(0.0)).unwrap();
        let b = reduced_chi2(&data(3.7), &model(3.7)).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn round_trip_far_field() {
        let c = PhysicalConstants::default();
        let truth = FitParams {
            beta: 0.4,
            ..FitParams::new(101.5, 1.0)
        };
        let opts = FitOptions::default();
        let data = synthetic_spectrum(&c, &truth, &opts, &hi_grid(&c, 101.5), 0.01, 3).unwrap();
        let start = FitParams::new(101.45, 1.3);
        let fit = fit_spectrum(&c, &data, &start, &FitBounds::around(101.5), &opts).unwrap();
        assert!(fit.free.contains(&Param::B));
        assert!((fit.params.beta / 0.4 - 1.0).abs() < 0.05, "{:?}", fit.params);
        assert!((fit.params.b_mt - 101.5).abs() < 0.01, "{:?}", fit.params);
        assert!((fit.params.width_mhz - 1.0).abs() < 0.05, "{:?}", fit.params);
        assert!(fit.chi2_red <= 1.2 * 1e-4, "{}", fit.chi2_red);
        assert!(fit.sigma_proxy["b_mt"].unwrap() < 0.01);
    }

    #[test]
    fn symmetric_input_gives_equal_areas() {
        let c = PhysicalConstants::default();
        let truth = FitParams::new(100.0, 0.8);
        let opts = FitOptions::default();
        let data = synthetic_spectrum(&c, &truth, &opts, &hi_grid(&c, 100.0), 0.0, 0).unwrap();
        let fit = fit_spectrum(&c, &data, &FitParams::new(100.0, 1.0), &FitBounds::around(100.0), &opts).unwrap();
        let areas: Vec<f64> = [1, 0, -1]
            .iter()
            .map(|&mi| fit.peak_areas.iter().find(|a| a.label.matches_nv(0, mi)).unwrap().area)
            .collect();
        for a in &areas {
            assert!((a / areas[0] - 1.0).abs() < 0.02, "{areas:?}");
        }
    }

    #[test]
    fn broadened_lines_near_crossing_fit_wider() {
        let c = PhysicalConstants::default();
        let opts = FitOptions::default();
        let fit_width = |b: f64, w: f64| {
            let truth = FitParams {
                beta: 0.3,
                ..FitParams::new(b, w)
            };
            let data = synthetic_spectrum(&c, &truth, &opts, &hi_grid(&c, b), 0.005, 1).unwrap();
            fit_spectrum(&c, &data, &FitParams::new(b, 1.0), &FitBounds::around(b), &opts)
                .unwrap()
                .params
                .width_mhz
        };
        let near = fit_width(102.3, 1.6);
        let far = fit_width(101.0, 1.0);
        assert!(near > far, "{near} vs {far}");
    }

    #[test]
    fn subsampling_invariance() {
        let c = PhysicalConstants::default();
        let truth = FitParams {
            beta: -0.3,
            ..FitParams::new(103.2, 1.2)
        };
        let opts = FitOptions::default();
        let data = synthetic_spectrum(&c, &truth, &opts, &hi_grid(&c, 103.2), 0.0, 0).unwrap();
        let start = FitParams::new(103.15, 0.9);
        let bounds = FitBounds::around(103.2);
        let a = fit_spectrum(&c, &data, &start, &bounds, &opts).unwrap();
        let b = fit_spectrum(&c, &data.subsample(2).unwrap(), &start, &bounds, &opts).unwrap();
        assert_abs_diff_eq!(a.params.beta, b.params.beta, epsilon = 1e-3);
        assert_abs_diff_eq!(a.params.b_mt, b.params.b_mt, epsilon = 1e-4);
        assert_abs_diff_eq!(a.params.width_mhz, b.params.width_mhz, epsilon = 1e-3);
    }

    #[test]
    fn scaling_data_keeps_argmin() {
        let c = PhysicalConstants::default();
        let truth = FitParams {
            beta: 0.5,
            ..FitParams::new(101.2, 1.0)
        };
        let opts = FitOptions::default();
        let data = synthetic_spectrum(&c, &truth, &opts, &hi_grid(&c, 101.2), 0.01, 8).unwrap();
        let mut scaled = data.clone();
        scaled.values.iter_mut().for_each(|v| *v *= 0.0045);
        let start = FitParams::new(101.2, 1.1);
        let bounds = FitBounds::around(101.2);
        let a = fit_spectrum(&c, &data, &start, &bounds, &opts).unwrap();
        let b = fit_spectrum(&c, &scaled, &start, &bounds, &opts).unwrap();
        assert_abs_diff_eq!(a.params.beta, b.params.beta, epsilon = 1e-3);
        assert_abs_diff_eq!(a.params.b_mt, b.params.b_mt, epsilon = 1e-4);
        assert_abs_diff_eq!(a.params.width_mhz, b.params.width_mhz, epsilon = 1e-3);
        assert_abs_diff_eq!(b.amplitude_scale / a.amplitude_scale, 0.0045, epsilon = 1e-6);
    }

    #[test]
    fn field_rule_and_flags() {
        let c = PhysicalConstants::default();
        let b0 = gslac_field(&c);
        assert_eq!(default_free_params(&c, b0 + 0.3, 0.5), vec![Param::Beta, Param::Width, Param::Split]);
        assert_eq!(default_free_params(&c, b0 - 0.6, 0.5), vec![Param::Beta, Param::B, Param::Width]);
        let truth = FitParams {
            beta: 0.2,
            ..FitParams::new(b0 + 0.2, 1.0)
        };
        let opts = FitOptions::default();
        let data = synthetic_spectrum(&c, &truth, &opts, &hi_grid(&c, b0), 0.0, 0).unwrap();
        let fit = fit_spectrum(&c, &data, &FitParams::new(b0 + 0.2, 1.0), &FitBounds::around(b0), &opts).unwrap();
        assert!(fit.flags.iter().any(|f| f == "b_fixed"));
        assert!(fit.flags.iter().any(|f| f == "near_gslac"));
        assert_eq!(fit.params.b_mt, b0 + 0.2);
        assert!((fit.params.beta - 0.2).abs() < 1e-3);
    }

    #[test]
    fn mode_window_mismatch() {
        let c = PhysicalConstants::default();
        let data = measured(vec![100.0, 101.0, 102.0], vec![0.0, 1.0, 0.0]);
        let err = fit_spectrum(&c, &data, &FitParams::new(101.0, 1.0), &FitBounds::around(101.0), &Default::default())
            .unwrap_err();
        match err {
            Error::GridMismatch(msg) => assert!(msg.contains("5600"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn non_convergence_reports_best() {
        let c = PhysicalConstants::default();
        let truth = FitParams::new(101.0, 1.0);
        let opts = FitOptions {
            optimizer: NelderMead {
                max_evaluations: 30,
                ..Default::default()
            },
            ..Default::default()
        };
        let data = synthetic_spectrum(&c, &truth, &opts, &hi_grid(&c, 101.0), 0.01, 0).unwrap();
        match fit_spectrum(&c, &data, &FitParams::new(101.0, 2.0), &FitBounds::around(101.0), &opts) {
            Err(Error::NonConvergence { evaluations, best }) => {
                assert!(evaluations >= 30);
                assert!(best.chi2_red.is_finite());
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn near_gslac_preset_fixes_b() {
        let c = PhysicalConstants::default();
        let hi = FitResult {
            params: FitParams {
                beta: 0.7,
                ..FitParams::new(102.0, 1.4)
            },
            chi2_red: 0.0,
            amplitude_scale: 1.0,
            peak_areas: vec![],
            free: vec![],
            curvature: BTreeMap::new(),
            sigma_proxy: BTreeMap::new(),
            flags: vec![],
            evaluations: 0,
            n_points: 0,
        };
        let cal = CalibrationModel {
            slope: 2.9,
            intercept: 0.0,
            fit_range: vec![],
        };
        let current = gslac_field(&c) / 2.9;
        let (p, o) = near_gslac_preset(&hi, &cal, current);
        assert_abs_diff_eq!(p.b_mt, gslac_field(&c), epsilon = 1e-12);
        assert_eq!((p.beta, p.width_mhz), (0.7, 1.4));
        assert_eq!(o.free, Some(vec![Param::Split]));
        assert_eq!(o.mode, TransitionMode::Lo);
    }
}
