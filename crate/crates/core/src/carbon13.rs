//! Randomly placed 13C nuclei around the NV centre and the Monte Carlo
//! ensemble average of their spectra.
//!
//! Each iteration draws its own ChaCha8 stream seeded with
//! `seed ^ iteration`, so results do not depend on thread count or order.

use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constants::PhysicalConstants;
use crate::error::{Error, Result};
use crate::hamiltonian::{build_nv_hamiltonian, FieldConfig, HyperfineTensor};
use crate::spectrum::{evaluate, peaks_from_table, validate_grid, Peak, SpectrumModel};
use crate::spin_core::{eigensolve, spin_matrices_for, CMatrix, OperatorMatrix, Spin};
use crate::transitions::{transition_table, IntensityOptions, SpinTemperature, TransitionMode};

pub const DEFAULT_OCCUPANCY: f64 = 0.011;
pub const DEFAULT_MAX_C13: usize = 8;
/// Site count of the nearest-neighbour plus A–H family set.
pub const DEFAULT_SITE_COUNT: usize = 39;

const DEFAULT_FAMILIES: &str = include_str!("../data/families_default.csv");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeFamily {
    pub label: String,
    pub multiplicity: usize,
    pub tensor: HyperfineTensor,
    /// `|cos|` of the angle between the site's principal z axis and the NV axis.
    pub cos_zz: f64,
    pub source: String,
}

#[derive(Debug, Deserialize)]
struct FamilyRow {
    label: String,
    multiplicity: usize,
    axx_mhz: f64,
    ayy_mhz: f64,
    azz_mhz: f64,
    cos_zz: f64,
    source: String,
}

pub fn total_sites(families: &[LatticeFamily]) -> usize {
    families.iter().map(|f| f.multiplicity).sum()
}

pub fn load_families(path: &Path) -> Result<Vec<LatticeFamily>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_families(&text, path)
}

/// The shipped family table.
pub fn default_families() -> Vec<LatticeFamily> {
    parse_families(DEFAULT_FAMILIES, Path::new("families_default.csv")).expect("bundled family table parses")
}

pub fn parse_families(text: &str, origin: &Path) -> Result<Vec<LatticeFamily>> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::parse(origin, 1, e.to_string()))?
        .clone();
    let expected = ["label", "multiplicity", "axx_mhz", "ayy_mhz", "azz_mhz", "cos_zz", "source"];
    if header.iter().ne(expected) {
        return Err(Error::parse(origin, 1, format!("expected header '{}'", expected.join(","))));
    }
    let mut out: Vec<LatticeFamily> = Vec::new();
    for record in reader.deserialize::<FamilyRow>() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::parse(origin, line, e.to_string())
        })?;
        let line = out.len() + 2;
        if record.multiplicity == 0 {
            return Err(Error::parse(origin, line, "multiplicity must be at least 1"));
        }
        if !(0.0..=1.0).contains(&record.cos_zz) {
            return Err(Error::parse(origin, line, format!("cos_zz {} outside [0,1]", record.cos_zz)));
        }
        if [record.axx_mhz, record.ayy_mhz, record.azz_mhz].iter().any(|v| !v.is_finite()) {
            return Err(Error::parse(origin, line, "non-finite tensor value"));
        }
        if out.iter().any(|f| f.label == record.label) {
            return Err(Error::parse(origin, line, format!("duplicate family label '{}'", record.label)));
        }
        out.push(LatticeFamily {
            label: record.label,
            multiplicity: record.multiplicity,
            tensor: HyperfineTensor {
                axx: record.axx_mhz,
                ayy: record.ayy_mhz,
                azz: record.azz_mhz,
            },
            cos_zz: record.cos_zz,
            source: record.source,
        });
    }
    Ok(out)
}

/// `U A Uᵀ` with `U` a rotation about x by `arccos(cos_zz)`.
pub fn rotate_tensor(t: &HyperfineTensor, cos_zz: f64) -> Result<[[f64; 3]; 3]> {
    rotate_tensor_with_azimuth(t, cos_zz, 0.0)
}

/// As [`rotate_tensor`], followed by a rotation about the NV axis by `azimuth`.
pub fn rotate_tensor_with_azimuth(t: &HyperfineTensor, cos_zz: f64, azimuth: f64) -> Result<[[f64; 3]; 3]> {
    if !(0.0..=1.0).contains(&cos_zz) {
        return Err(Error::invalid(format!("cos_zz {cos_zz} outside [0,1]")));
    }
    let (c, s) = (cos_zz, (1.0 - cos_zz * cos_zz).sqrt());
    let (cp, sp) = (azimuth.cos(), azimuth.sin());
    let rx = nalgebra::Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c);
    let rz = nalgebra::Matrix3::new(cp, -sp, 0.0, sp, cp, 0.0, 0.0, 0.0, 1.0);
    let u = rz * rx;
    let a = nalgebra::Matrix3::from_diagonal(&nalgebra::Vector3::new(t.axx, t.ayy, t.azz));
    let r = u * a * u.transpose();
    Ok(std::array::from_fn(|i| std::array::from_fn(|j| 0.5 * (r[(i, j)] + r[(j, i)]))))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub iterations: usize,
    pub occupancy: f64,
    pub seed: u64,
    /// Family table; the bundled default when absent.
    pub family_file: Option<PathBuf>,
    pub max_c13: usize,
    /// Draw each occupied site's azimuth uniformly instead of fixing it at 0.
    pub random_azimuth: bool,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            iterations: 400,
            occupancy: DEFAULT_OCCUPANCY,
            seed: 0,
            family_file: None,
            max_c13: DEFAULT_MAX_C13,
            random_azimuth: false,
        }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("iterations must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.occupancy) {
            return Err(Error::invalid(format!("occupancy {} outside [0,1]", self.occupancy)));
        }
        Ok(())
    }

    pub fn families(&self) -> Result<Vec<LatticeFamily>> {
        match &self.family_file {
            Some(p) => load_families(p),
            None => Ok(default_families()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupiedSite {
    pub family: String,
    pub site: usize,
    pub azimuth: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct C13Placement {
    pub occupied: Vec<OccupiedSite>,
}

impl C13Placement {
    pub fn len(&self) -> usize {
        self.occupied.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occupied.is_empty()
    }

    /// Every site of every family, azimuth 0.
    pub fn all(families: &[LatticeFamily]) -> Self {
        C13Placement {
            occupied: families
                .iter()
                .flat_map(|f| {
                    (0..f.multiplicity).map(|site| OccupiedSite {
                        family: f.label.clone(),
                        site,
                        azimuth: 0.0,
                    })
                })
                .collect(),
        }
    }
}

/// Independent Bernoulli draw per site from the stream of `seed ^ iteration`.
pub fn sample_placement(cfg: &McConfig, families: &[LatticeFamily], iteration: u64) -> C13Placement {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ iteration);
    let mut occupied = Vec::new();
    for f in families {
        for site in 0..f.multiplicity {
            let u: f64 = rng.random();
            if u < cfg.occupancy {
                let azimuth = if cfg.random_azimuth {
                    rng.random::<f64>() * std::f64::consts::TAU
                } else {
                    0.0
                };
                occupied.push(OccupiedSite {
                    family: f.label.clone(),
                    site,
                    azimuth,
                });
            }
        }
    }
    C13Placement { occupied }
}

fn kron_chain(ops: &[&CMatrix]) -> CMatrix {
    let mut out = ops[0].clone();
    for op in &ops[1..] {
        out = out.kronecker(*op);
    }
    out
}

/// Adds `S·A'·J_j + γ_13C B·J_j` for every occupied site to `base ⊗ 1`.
pub fn build_full_hamiltonian(
    base: &OperatorMatrix,
    placement: &C13Placement,
    families: &[LatticeFamily],
    field: &FieldConfig,
    c: &PhysicalConstants,
    max_c13: usize,
) -> Result<OperatorMatrix> {
    let n = placement.len();
    if n > max_c13 {
        return Err(Error::Resource(format!(
            "{n} carbon nuclei exceed the cap of {max_c13} (dimension would be {})",
            9u128 << n.min(120)
        )));
    }
    if base.dim() != 9 {
        return Err(Error::invalid(format!("base Hamiltonian must be 9x9, got {}", base.dim())));
    }
    if n == 0 {
        return Ok(base.clone());
    }
    let mut seen = std::collections::HashSet::new();
    let mut tensors = Vec::with_capacity(n);
    for s in &placement.occupied {
        let fam = families
            .iter()
            .find(|f| f.label == s.family)
            .ok_or_else(|| Error::invalid(format!("unknown family '{}'", s.family)))?;
        if s.site >= fam.multiplicity {
            return Err(Error::invalid(format!(
                "site {} out of range for family '{}' ({} sites)",
                s.site, fam.label, fam.multiplicity
            )));
        }
        if !seen.insert((s.family.as_str(), s.site)) {
            return Err(Error::invalid(format!("site {}#{} occupied twice", s.family, s.site)));
        }
        tensors.push(rotate_tensor_with_azimuth(&fam.tensor, fam.cos_zz, s.azimuth)?);
    }

    let one = spin_matrices_for(Spin::One);
    let half = spin_matrices_for(Spin::Half);
    let s_ops = [one.sx.entries(), one.sy.entries(), one.sz.entries()];
    let j_ops = [half.sx.entries(), half.sy.entries(), half.sz.entries()];
    let id3 = CMatrix::identity(3, 3);
    let id2 = CMatrix::identity(2, 2);
    let spectators = 1usize << n;
    let mut h = base.entries().kronecker(&CMatrix::identity(spectators, spectators));
    let b = field.vector();
    let re = |x: f64| Complex64::new(x, 0.0);
    for (site, a) in tensors.iter().enumerate() {
        let with_j = |s_part: &CMatrix, j_part: &CMatrix| {
            let mut chain: Vec<&CMatrix> = vec![s_part, &id3];
            for k in 0..n {
                chain.push(if k == site { j_part } else { &id2 });
            }
            kron_chain(&chain)
        };
        for (bk, a_row) in a.iter().enumerate() {
            let mut j_combo = CMatrix::zeros(2, 2);
            for (bj, &v) in a_row.iter().enumerate() {
                j_combo += j_ops[bj] * re(v);
            }
            h += with_j(s_ops[bk], &j_combo);
        }
        let mut zeeman = CMatrix::zeros(2, 2);
        for (k, &bk) in b.iter().enumerate() {
            zeeman += j_ops[k] * re(c.gamma_c13 * bk);
        }
        h += with_j(&id3, &zeeman);
    }
    OperatorMatrix::new(h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McResult {
    pub mean: SpectrumModel,
    /// Standard error of the mean per grid point.
    pub stderr: Vec<f64>,
    pub iterations: usize,
    /// Average number of occupied sites per iteration.
    pub mean_c13: f64,
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
struct Compensated {
    sum: f64,
    c: f64,
}

impl Compensated {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.c += (self.sum - t) + x;
        } else {
            self.c += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(self) -> f64 {
        self.sum + self.c
    }
}

struct Draw {
    values: Vec<f64>,
    peaks: Vec<Peak>,
    n_c13: usize,
}

/// Mean spectrum over `cfg.iterations` random 13C placements.
#[allow(clippy::too_many_arguments)]
pub fn mc_average_spectrum(
    cfg: &McConfig,
    families: &[LatticeFamily],
    field: &FieldConfig,
    c: &PhysicalConstants,
    beta: SpinTemperature,
    opts: &IntensityOptions,
    mode: TransitionMode,
    hwhm_mhz: f64,
    grid: &[f64],
) -> Result<McResult> {
    cfg.validate()?;
    validate_grid(grid)?;
    if !(hwhm_mhz > 0.0 && hwhm_mhz.is_finite()) {
        return Err(Error::invalid(format!("line width must be positive, got {hwhm_mhz}")));
    }
    let base = build_nv_hamiltonian(c, field);
    let draw_for = |h: &OperatorMatrix, n_c13: usize| -> Result<Draw> {
        let sys = eigensolve(h)?;
        let table = transition_table(&sys, field.b_mt, beta, opts)?.select(mode);
        let peaks = peaks_from_table(&table, hwhm_mhz);
        Ok(Draw {
            values: evaluate(&peaks, grid),
            peaks,
            n_c13,
        })
    };
    let bare = draw_for(&base, 0)?;
    let draws = (0..cfg.iterations as u64)
        .into_par_iter()
        .map(|it| {
            let placement = sample_placement(cfg, families, it);
            if placement.is_empty() {
                return Ok(None);
            }
            let h = build_full_hamiltonian(&base, &placement, families, field, c, cfg.max_c13)?;
            draw_for(&h, placement.len()).map(Some)
        })
        .collect::<Result<Vec<Option<Draw>>>>()?;

    let n = cfg.iterations as f64;
    let mut sums = vec![Compensated::default(); grid.len()];
    let mut peaks = Vec::new();
    let mut sites = 0usize;
    for d in &draws {
        let d = d.as_ref().unwrap_or(&bare);
        for (s, v) in sums.iter_mut().zip(&d.values) {
            s.add(*v);
        }
        peaks.extend(d.peaks.iter().map(|p| Peak {
            amplitude: p.amplitude / n,
            ..*p
        }));
        sites += d.n_c13;
    }
    let mean: Vec<f64> = sums.iter().map(|s| s.value() / n).collect();
    let stderr = if cfg.iterations < 2 {
        vec![0.0; grid.len()]
    } else {
        let mut sq = vec![Compensated::default(); grid.len()];
        for d in &draws {
            let d = d.as_ref().unwrap_or(&bare);
            for ((s, v), m) in sq.iter_mut().zip(&d.values).zip(&mean) {
                s.add((v - m) * (v - m));
            }
        }
        sq.iter().map(|s| (s.value() / (n - 1.0) / n).sqrt()).collect()
    };
    Ok(McResult {
        mean: SpectrumModel {
            peaks,
            grid: grid.to_vec(),
            values: mean,
            scale: 1.0,
        },
        stderr,
        iterations: cfg.iterations,
        mean_c13: sites as f64 / n,
    })
}
