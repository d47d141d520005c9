//! Ground-state NV⁻ + 14N Hamiltonian for an arbitrary field, and the
//! closed-form axial-field solution of the truncated (`m_S ∈ {0, -1}`) model
//! that serves as an oracle for the numerical path.
//!
//! Closed-form numbering versus product-basis labels:
//!
//! | level | nominal state            |
//! |-------|--------------------------|
//! | E1    | `|0,+1>`                 |
//! | E2    | `|-1,-1>`                |
//! | E3/E4 | `|-1,+1>` ⊕ `|0,0>`      |
//! | E5/E6 | `|-1,0>` ⊕ `|0,-1>`      |
//! | E7    | `|+1,+1>`                |
//! | E8    | `|+1,-1>`                |
//! | E9    | `|+1,0>`                 |
//!
//! This numbering is not energy order; `EigenSystem` values are always sorted
//! ascending and carry product-basis labels instead.

use std::sync::OnceLock;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constants::PhysicalConstants;
use crate::error::{Error, Result};
use crate::spin_core::{
    eigensolve, embed, greedy_assignment, spin_matrices_for, EigenSystem, OperatorMatrix,
    ProductBasis, Spin,
};

/// Magnetic field magnitude and direction relative to the NV axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    /// Magnitude (mT).
    pub b_mt: f64,
    /// Polar angle from the NV axis (degrees).
    pub theta_deg: f64,
    /// Azimuth (degrees).
    pub phi_deg: f64,
}

impl FieldConfig {
    pub fn new(b_mt: f64, theta_deg: f64, phi_deg: f64) -> Result<Self> {
        if !(b_mt.is_finite() && b_mt >= 0.0) {
            return Err(Error::invalid(format!("field magnitude must be >= 0, got {b_mt}")));
        }
        if !(0.0..180.0).contains(&theta_deg) {
            return Err(Error::invalid(format!("theta must be in [0, 180), got {theta_deg}")));
        }
        if !(0.0..360.0).contains(&phi_deg) {
            return Err(Error::invalid(format!("phi must be in [0, 360), got {phi_deg}")));
        }
        Ok(FieldConfig {
            b_mt,
            theta_deg,
            phi_deg,
        })
    }

    pub fn axial(b_mt: f64) -> Self {
        FieldConfig {
            b_mt,
            theta_deg: 0.0,
            phi_deg: 0.0,
        }
    }

    /// Field vector in the NV frame (mT).
    pub fn vector(&self) -> [f64; 3] {
        let (t, p) = (self.theta_deg.to_radians(), self.phi_deg.to_radians());
        [
            self.b_mt * t.sin() * p.cos(),
            self.b_mt * t.sin() * p.sin(),
            self.b_mt * t.cos(),
        ]
    }
}

/// Principal values of a hyperfine tensor (MHz).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperfineTensor {
    pub axx: f64,
    pub ayy: f64,
    pub azz: f64,
}

impl HyperfineTensor {
    pub fn nitrogen(c: &PhysicalConstants) -> Self {
        HyperfineTensor {
            axx: c.a_perp,
            ayy: c.a_perp,
            azz: c.a_par,
        }
    }

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        [
            [self.axx, 0.0, 0.0],
            [0.0, self.ayy, 0.0],
            [0.0, 0.0, self.azz],
        ]
    }
}

/// Which detuning enters the `|-1,0> ⊕ |0,-1>` pair of the closed form.
///
/// `PlusQ` uses `D + Q - γ_e B` under the root, as in the printed energies.
/// `MinusQ` uses `D - Q - γ_e B`, as in the printed mixing parameter; this is
/// the form the Hamiltonian actually diagonalises to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum MixedPairConvention {
    PlusQ,
    #[default]
    MinusQ,
}

struct NvOperators {
    s: [OperatorMatrix; 3],
    i: [OperatorMatrix; 3],
    sz2: OperatorMatrix,
    iz2: OperatorMatrix,
    /// `s[a] * i[b]` at `[a][b]`.
    si: [[OperatorMatrix; 3]; 3],
}

fn nv_operators() -> &'static NvOperators {
    static OPS: OnceLock<NvOperators> = OnceLock::new();
    OPS.get_or_init(|| {
        let m = spin_matrices_for(Spin::One);
        let dims = [3, 3];
        let e = |op: &OperatorMatrix, slot| embed(op, slot, &dims).expect("static dims");
        let s = [e(&m.sx, 0), e(&m.sy, 0), e(&m.sz, 0)];
        let i = [e(&m.sx, 1), e(&m.sy, 1), e(&m.sz, 1)];
        let si = std::array::from_fn(|a| std::array::from_fn(|b| s[a].matmul(&i[b])));
        NvOperators {
            sz2: s[2].matmul(&s[2]),
            iz2: i[2].matmul(&i[2]),
            s,
            i,
            si,
        }
    })
}

/// `D Sz² + γ_e B·S + Q Iz² − γ_14N B·I + S·A·I` on the 9-dimensional
/// electron ⊗ 14N space (MHz).
pub fn build_nv_hamiltonian(c: &PhysicalConstants, field: &FieldConfig) -> OperatorMatrix {
    let ops = nv_operators();
    let b = field.vector();
    let mut h = &ops.sz2 * c.d_g;
    h += &(&ops.iz2 * c.q);
    for k in 0..3 {
        if b[k] != 0.0 {
            h += &(&ops.s[k] * (c.gamma_e * b[k]));
            h += &(&ops.i[k] * (-c.gamma_n14 * b[k]));
        }
    }
    let a = HyperfineTensor::nitrogen(c).matrix();
    for (x, row) in a.iter().enumerate() {
        for (y, &v) in row.iter().enumerate() {
            if v != 0.0 {
                h += &(&ops.si[x][y] * v);
            }
        }
    }
    h
}

/// Removes every coupling between `m_S = +1` states and the rest, leaving
/// the `m_S = +1` levels unmixed. Works for any `9·2^N` product basis.
pub fn truncate_upper_manifold(h: &OperatorMatrix) -> Result<OperatorMatrix> {
    let basis = ProductBasis::for_dim(h.dim())
        .ok_or_else(|| Error::invalid(format!("dimension {} is not 9*2^N", h.dim())))?;
    let upper: Vec<bool> = (0..h.dim()).map(|k| basis.label(k).ms == 1).collect();
    let mut m = h.entries().clone();
    for i in 0..h.dim() {
        for j in 0..h.dim() {
            if upper[i] != upper[j] {
                m[(i, j)] = Complex64::new(0.0, 0.0);
            }
        }
    }
    OperatorMatrix::new(m)
}

/// The 6x6 block of `h` spanned by `m_S ∈ {0, -1}` (no carbons), ordered
/// as the product basis indices 3..9.
pub fn lower_manifold_block(h: &OperatorMatrix) -> Result<OperatorMatrix> {
    if h.dim() != 9 {
        return Err(Error::invalid("lower_manifold_block expects a 9x9 matrix"));
    }
    OperatorMatrix::new(h.entries().view((3, 3), (6, 6)).into_owned())
}

/// `D_g / γ_e` (mT).
pub fn gslac_field(c: &PhysicalConstants) -> f64 {
    c.d_g / c.gamma_e
}

/// Closed-form energies E1..E9 in the numbering of the module table (MHz).
/// The nuclear Zeeman term does not appear in the closed form.
pub fn analytic_energies(c: &PhysicalConstants, b_mt: f64, conv: MixedPairConvention) -> [f64; 9] {
    let (d, q, ap, at) = (c.d_g, c.q, c.a_par, c.a_perp);
    let z = c.gamma_e * b_mt;
    let x1 = d + q - ap - z;
    let r1 = (4.0 * at * at + x1 * x1).sqrt();
    let x2 = d + q - z;
    let root_term = match conv {
        MixedPairConvention::PlusQ => d + q - z,
        MixedPairConvention::MinusQ => d - q - z,
    };
    let r2 = (4.0 * at * at + root_term * root_term).sqrt();
    [
        q,
        d + q + ap - z,
        0.5 * (x1 - r1),
        0.5 * (x1 + r1),
        0.5 * (x2 - r2),
        0.5 * (x2 + r2),
        d + q + ap + z,
        d + q - ap + z,
        d + z,
    ]
}

/// `(κ1, κ2)`; `κ2` follows `conv`.
pub fn mixing_parameters(c: &PhysicalConstants, b_mt: f64, conv: MixedPairConvention) -> (f64, f64) {
    let z = c.gamma_e * b_mt;
    let k1 = (c.d_g + c.q - c.a_par - z) / (2.0 * c.a_perp);
    let k2 = match conv {
        MixedPairConvention::MinusQ => (c.d_g - c.q - z) / (2.0 * c.a_perp),
        MixedPairConvention::PlusQ => (c.d_g + c.q - z) / (2.0 * c.a_perp),
    };
    (k1, k2)
}

/// `κ + s·sqrt(κ² + 1)` without cancellation.
fn kappa_root(k: f64, s: f64) -> f64 {
    let r = k.hypot(1.0);
    if k * s >= 0.0 {
        k + s * r
    } else {
        -1.0 / (k - s * r)
    }
}

/// Two-component closed-form state `(|upper> - x|lower>)/|α|`, returned as
/// `(upper_coeff, lower_coeff)`.
fn mixed_pair(kappa: f64, branch: f64) -> (f64, f64) {
    let x = kappa_root(kappa, branch);
    let alpha = (x * x + 1.0).sqrt();
    (1.0 / alpha, -x / alpha)
}

/// Closed-form eigenvectors ψ1..ψ9 as real coefficient vectors in the 9-state
/// product basis (`ProductBasis::new(0)` order).
///
/// The printed two-component forms assume `A⊥ > 0`; here the branch sign is
/// `sign(A⊥)` so that ψ3/ψ5 always belong to E3/E5. Each vector is
/// normalised with its own `|α|`.
pub fn analytic_eigenstates(
    c: &PhysicalConstants,
    b_mt: f64,
    conv: MixedPairConvention,
) -> [[f64; 9]; 9] {
    let basis = ProductBasis::new(0);
    let idx = |ms, mi| {
        basis
            .index_of(&crate::spin_core::NvLabel::new(ms, mi))
            .expect("valid label")
    };
    let mut out = [[0.0; 9]; 9];
    let unit = |k: usize| {
        let mut v = [0.0; 9];
        v[k] = 1.0;
        v
    };
    out[0] = unit(idx(0, 1));
    out[1] = unit(idx(-1, -1));
    out[6] = unit(idx(1, 1));
    out[7] = unit(idx(1, -1));
    out[8] = unit(idx(1, 0));

    let (k1, k2) = mixing_parameters(c, b_mt, conv);
    let sign = if c.a_perp >= 0.0 { 1.0 } else { -1.0 };
    let pairs = [
        (2, k1, idx(-1, 1), idx(0, 0)),
        (4, k2, idx(-1, 0), idx(0, -1)),
    ];
    for (slot, k, upper, lower) in pairs {
        if c.a_perp == 0.0 || !k.is_finite() {
            // uncoupled pair: fall back to the diagonal ordering
            let e = analytic_energies(c, b_mt, conv);
            let (lo, hi) = if e[slot] <= e[slot + 1] { (lower, upper) } else { (upper, lower) };
            out[slot] = unit(lo);
            out[slot + 1] = unit(hi);
            continue;
        }
        for (n, branch) in [(slot, sign), (slot + 1, -sign)] {
            let (cu, cl) = mixed_pair(k, branch);
            let mut v = [0.0; 9];
            v[upper] = cu;
            v[lower] = cl;
            out[n] = v;
        }
    }
    out
}

/// Largest deviation between sorted numerical eigenvalues and the sorted
/// closed-form energies (MHz).
///
/// With `truncated` the 6x6 `m_S ∈ {0,-1}` block is compared to E1..E6;
/// otherwise the full 9x9 spectrum is compared to E1..E9.
pub fn analytic_deviation(
    c: &PhysicalConstants,
    b_mt: f64,
    conv: MixedPairConvention,
    truncated: bool,
) -> Result<f64> {
    let h = build_nv_hamiltonian(c, &FieldConfig::axial(b_mt));
    let analytic = analytic_energies(c, b_mt, conv);
    let (numeric, mut expected) = if truncated {
        let sys = eigensolve(&lower_manifold_block(&h)?)?;
        (sys.energies, analytic[..6].to_vec())
    } else {
        (eigensolve(&h)?.energies, analytic.to_vec())
    };
    expected.sort_by(f64::total_cmp);
    Ok(numeric
        .iter()
        .zip(&expected)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

/// Eigen-systems along a field sweep with labels carried by eigenvector
/// continuity: the first point is labelled by maximum overlap with the
/// product basis, every later point by maximum overlap with the previous
/// point's eigenvectors.
pub fn level_sweep(
    c: &PhysicalConstants,
    fields_mt: &[f64],
    theta_deg: f64,
) -> Result<Vec<EigenSystem>> {
    if fields_mt.is_empty() {
        return Err(Error::invalid("field sweep is empty"));
    }
    let configs = fields_mt
        .iter()
        .map(|&b| FieldConfig::new(b, theta_deg, 0.0))
        .collect::<Result<Vec<_>>>()?;
    let systems = configs
        .par_iter()
        .map(|f| eigensolve(&build_nv_hamiltonian(c, f)))
        .collect::<Result<Vec<_>>>()?;
    Ok(track_labels(systems))
}

/// Sequential overlap-matching fold over independently solved systems.
pub fn track_labels(mut systems: Vec<EigenSystem>) -> Vec<EigenSystem> {
    for k in 1..systems.len() {
        let (done, rest) = systems.split_at_mut(k);
        let prev = &done[k - 1];
        let cur = &mut rest[0];
        let overlap = prev.vectors.adjoint() * &cur.vectors;
        let matched = greedy_assignment(cur.dim(), |p, c| overlap[(p, c)].norm_sqr());
        cur.labels = matched.iter().map(|&p| prev.labels[p]).collect();
    }
    systems
}
