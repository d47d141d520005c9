//! Spin operator algebra, Kronecker embedding and the dense Hermitian
//! eigensolver shared by the physics modules.
//!
//! Basis convention used everywhere in the crate: each subsystem is ordered
//! by descending projection (`m = +s, ..., -s`) and subsystems are combined
//! in Kronecker order `(NV electron, 14N, 13C_1, 13C_2, ...)`.

use std::fmt;
use std::ops::{Add, AddAssign, Mul, Sub};
use std::str::FromStr;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type CMatrix = DMatrix<Complex64>;

/// Relative Frobenius-norm tolerance for accepting a matrix as Hermitian.
pub const HERMITIAN_TOL: f64 = 1e-9;

/// Supported spin quantum numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Spin {
    Half,
    One,
}

impl Spin {
    pub fn from_value(s: f64) -> Result<Self> {
        if s == 0.5 {
            Ok(Spin::Half)
        } else if s == 1.0 {
            Ok(Spin::One)
        } else {
            Err(Error::invalid(format!(
                "unsupported spin quantum number {s}; expected 1/2 or 1"
            )))
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Spin::Half => 0.5,
            Spin::One => 1.0,
        }
    }

    pub fn dim(self) -> usize {
        match self {
            Spin::Half => 2,
            Spin::One => 3,
        }
    }

    /// Projections in basis order, `+s` first.
    pub fn projections(self) -> Vec<f64> {
        let s = self.value();
        (0..self.dim()).map(|k| s - k as f64).collect()
    }
}

/// Square complex matrix. Units depend on use: MHz for Hamiltonians,
/// dimensionless for spin and dipole operators.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorMatrix(CMatrix);

impl OperatorMatrix {
    pub fn new(entries: CMatrix) -> Result<Self> {
        if entries.nrows() != entries.ncols() || entries.nrows() == 0 {
            return Err(Error::invalid(format!(
                "operator must be a non-empty square matrix, got {}x{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        Ok(OperatorMatrix(entries))
    }

    pub fn zeros(dim: usize) -> Self {
        OperatorMatrix(CMatrix::zeros(dim, dim))
    }

    pub fn identity(dim: usize) -> Self {
        OperatorMatrix(CMatrix::identity(dim, dim))
    }

    pub fn from_real_diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        OperatorMatrix(CMatrix::from_fn(n, n, |i, j| {
            if i == j {
                Complex64::new(diag[i], 0.0)
            } else {
                Complex64::new(0.0, 0.0)
            }
        }))
    }

    pub fn from_real_rows(rows: &[&[f64]]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("rows do not form a square matrix"));
        }
        Self::new(CMatrix::from_fn(n, n, |i, j| Complex64::new(rows[i][j], 0.0)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn entries(&self) -> &CMatrix {
        &self.0
    }

    pub fn into_entries(self) -> CMatrix {
        self.0
    }

    pub fn adjoint(&self) -> Self {
        OperatorMatrix(self.0.adjoint())
    }

    pub fn trace(&self) -> Complex64 {
        self.0.trace()
    }

    pub fn matmul(&self, other: &OperatorMatrix) -> OperatorMatrix {
        OperatorMatrix(&self.0 * &other.0)
    }

    pub fn commutator(&self, other: &OperatorMatrix) -> OperatorMatrix {
        OperatorMatrix(&self.0 * &other.0 - &other.0 * &self.0)
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }

    /// `||H - H^dagger||_F / max(1, ||H||_F)`.
    pub fn hermiticity_error(&self) -> f64 {
        (&self.0 - self.0.adjoint()).norm() / self.0.norm().max(1.0)
    }

    pub fn is_hermitian(&self) -> bool {
        self.hermiticity_error() <= HERMITIAN_TOL
    }

    pub fn max_abs_diff(&self, other: &OperatorMatrix) -> f64 {
        (&self.0 - &other.0).iter().map(|z| z.norm()).fold(0.0, f64::max)
    }
}

impl Add for OperatorMatrix {
    type Output = OperatorMatrix;
    fn add(self, rhs: OperatorMatrix) -> OperatorMatrix {
        OperatorMatrix(self.0 + rhs.0)
    }
}

impl Sub for OperatorMatrix {
    type Output = OperatorMatrix;
    fn sub(self, rhs: OperatorMatrix) -> OperatorMatrix {
        OperatorMatrix(self.0 - rhs.0)
    }
}

impl AddAssign<&OperatorMatrix> for OperatorMatrix {
    fn add_assign(&mut self, rhs: &OperatorMatrix) {
        self.0 += &rhs.0;
    }
}

impl Mul<f64> for &OperatorMatrix {
    type Output = OperatorMatrix;
    fn mul(self, rhs: f64) -> OperatorMatrix {
        OperatorMatrix(&self.0 * Complex64::new(rhs, 0.0))
    }
}

impl Mul<Complex64> for &OperatorMatrix {
    type Output = OperatorMatrix;
    fn mul(self, rhs: Complex64) -> OperatorMatrix {
        OperatorMatrix(&self.0 * rhs)
    }
}

/// Cartesian and ladder matrices for one spin in the `|m>` basis.
#[derive(Debug, Clone)]
pub struct SpinMatrices {
    pub spin: Spin,
    pub sx: OperatorMatrix,
    pub sy: OperatorMatrix,
    pub sz: OperatorMatrix,
    pub s_plus: OperatorMatrix,
    pub s_minus: OperatorMatrix,
}

impl SpinMatrices {
    /// `[sx, sy, sz]`, convenient for dot products with vectors and tensors.
    pub fn cartesian(&self) -> [&OperatorMatrix; 3] {
        [&self.sx, &self.sy, &self.sz]
    }
}

/// Angular-momentum matrices (hbar = 1) for `s` in {1/2, 1}.
pub fn spin_matrices(s: f64) -> Result<SpinMatrices> {
    let spin = Spin::from_value(s)?;
    Ok(spin_matrices_for(spin))
}

pub fn spin_matrices_for(spin: Spin) -> SpinMatrices {
    let s = spin.value();
    let n = spin.dim();
    let m = spin.projections();
    let mut plus = CMatrix::zeros(n, n);
    // <m+1| S+ |m> sits at (k-1, k) because m decreases with index.
    for k in 1..n {
        let mk = m[k];
        plus[(k - 1, k)] = Complex64::new((s * (s + 1.0) - mk * (mk + 1.0)).sqrt(), 0.0);
    }
    let minus = plus.adjoint();
    let half = Complex64::new(0.5, 0.0);
    let half_i = Complex64::new(0.0, -0.5);
    let sx = (&plus + &minus) * half;
    let sy = (&plus - &minus) * half_i;
    let sz = CMatrix::from_fn(n, n, |i, j| {
        if i == j {
            Complex64::new(m[i], 0.0)
        } else {
            Complex64::new(0.0, 0.0)
        }
    });
    SpinMatrices {
        spin,
        sx: OperatorMatrix(sx),
        sy: OperatorMatrix(sy),
        sz: OperatorMatrix(sz),
        s_plus: OperatorMatrix(plus),
        s_minus: OperatorMatrix(minus),
    }
}

/// `1 ⊗ ... ⊗ op ⊗ ... ⊗ 1` with `op` at position `slot`.
pub fn embed(op: &OperatorMatrix, slot: usize, dims: &[usize]) -> Result<OperatorMatrix> {
    if slot >= dims.len() {
        return Err(Error::invalid(format!(
            "slot {slot} out of range for {} subsystems",
            dims.len()
        )));
    }
    if dims[slot] != op.dim() {
        return Err(Error::invalid(format!(
            "operator dimension {} does not match subsystem dimension {} at slot {slot}",
            op.dim(),
            dims[slot]
        )));
    }
    let left: usize = dims[..slot].iter().product();
    let right: usize = dims[slot + 1..].iter().product();
    let mut out = op.0.clone();
    if left > 1 {
        out = CMatrix::identity(left, left).kronecker(&out);
    }
    if right > 1 {
        out = out.kronecker(&CMatrix::identity(right, right));
    }
    Ok(OperatorMatrix(out))
}

/// Nominal `|m_S, m_I; m_J1, m_J2, ...>` label of a product-basis state.
/// Carbon projections are stored doubled (`+1` means `m_J = +1/2`).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct NvLabel {
    pub ms: i8,
    pub mi: i8,
    pub mj2: Vec<i8>,
}

impl NvLabel {
    pub fn new(ms: i8, mi: i8) -> Self {
        NvLabel {
            ms,
            mi,
            mj2: Vec::new(),
        }
    }

    /// Same electron and 14N projections, carbons ignored.
    pub fn matches_nv(&self, ms: i8, mi: i8) -> bool {
        self.ms == ms && self.mi == mi
    }

    /// `m_S + m_I + sum(m_J)`, doubled so it stays integral.
    pub fn total_projection2(&self) -> i32 {
        2 * (self.ms as i32 + self.mi as i32) + self.mj2.iter().map(|&m| m as i32).sum::<i32>()
    }
}

fn signed(m: i8) -> String {
    match m.cmp(&0) {
        std::cmp::Ordering::Greater => format!("+{m}"),
        _ => format!("{m}"),
    }
}

impl fmt::Display for NvLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "|{},{}", signed(self.ms), signed(self.mi))?;
        if !self.mj2.is_empty() {
            let parts: Vec<String> = self
                .mj2
                .iter()
                .map(|&m| if m > 0 { "+1/2".to_string() } else { "-1/2".to_string() })
                .collect();
            write!(f, ";{}", parts.join(","))?;
        }
        write!(f, ">")
    }
}

impl From<NvLabel> for String {
    fn from(l: NvLabel) -> String {
        l.to_string()
    }
}

impl TryFrom<String> for NvLabel {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl FromStr for NvLabel {
    type Err = Error;

    /// Accepts `|0,+1>`, `0,1`, `|0,+1;+1/2,-1/2>` and similar.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("cannot parse state label '{s}'"));
        let body = s.trim().trim_start_matches('|').trim_end_matches('>');
        let (nv, carbons) = match body.split_once(';') {
            Some((a, b)) => (a, Some(b)),
            None => (body, None),
        };
        let mut it = nv.split(',').map(|p| p.trim().parse::<i8>());
        let ms = it.next().ok_or_else(bad)?.map_err(|_| bad())?;
        let mi = it.next().ok_or_else(bad)?.map_err(|_| bad())?;
        if it.next().is_some() || !(-1..=1).contains(&ms) || !(-1..=1).contains(&mi) {
            return Err(bad());
        }
        let mut mj2 = Vec::new();
        if let Some(c) = carbons {
            for p in c.split(',') {
                match p.trim() {
                    "+1/2" | "1/2" => mj2.push(1),
                    "-1/2" => mj2.push(-1),
                    _ => return Err(bad()),
                }
            }
        }
        Ok(NvLabel { ms, mi, mj2 })
    }
}

/// The NV ⊗ 14N ⊗ (13C)^N product basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProductBasis {
    pub n_c13: usize,
}

const SPIN1_ORDER: [i8; 3] = [1, 0, -1];

impl ProductBasis {
    pub fn new(n_c13: usize) -> Self {
        ProductBasis { n_c13 }
    }

    /// Recognises dimensions of the form `9 * 2^N`.
    pub fn for_dim(dim: usize) -> Option<Self> {
        if dim < 9 || !dim.is_multiple_of(9) {
            return None;
        }
        let rest = dim / 9;
        rest.is_power_of_two()
            .then(|| ProductBasis::new(rest.trailing_zeros() as usize))
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![3, 3];
        d.extend(std::iter::repeat_n(2, self.n_c13));
        d
    }

    pub fn len(&self) -> usize {
        9 << self.n_c13
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn label(&self, index: usize) -> NvLabel {
        let carbons = 1usize << self.n_c13;
        let nv = index / carbons;
        let bits = index % carbons;
        let mj2 = (0..self.n_c13)
            .map(|c| {
                let bit = (bits >> (self.n_c13 - 1 - c)) & 1;
                if bit == 0 {
                    1
                } else {
                    -1
                }
            })
            .collect();
        NvLabel {
            ms: SPIN1_ORDER[nv / 3],
            mi: SPIN1_ORDER[nv % 3],
            mj2,
        }
    }

    pub fn labels(&self) -> Vec<NvLabel> {
        (0..self.len()).map(|i| self.label(i)).collect()
    }

    pub fn index_of(&self, label: &NvLabel) -> Option<usize> {
        if label.mj2.len() != self.n_c13 {
            return None;
        }
        let pos = |m: i8| SPIN1_ORDER.iter().position(|&x| x == m);
        let nv = pos(label.ms)? * 3 + pos(label.mi)?;
        let mut bits = 0usize;
        for &m in &label.mj2 {
            bits = (bits << 1) | usize::from(m < 0);
        }
        Some((nv << self.n_c13) | bits)
    }
}

/// Eigen-decomposition of one Hamiltonian.
///
/// `energies` ascend; column `k` of `vectors` belongs to `energies[k]`;
/// `labels[k]` is the product-basis index assigned to that column.
#[derive(Debug, Clone)]
pub struct EigenSystem {
    pub energies: Vec<f64>,
    pub vectors: CMatrix,
    pub labels: Vec<usize>,
}

impl EigenSystem {
    pub fn dim(&self) -> usize {
        self.energies.len()
    }

    /// Basis labels, if the dimension matches an NV product basis.
    pub fn nv_labels(&self) -> Option<Vec<NvLabel>> {
        let basis = ProductBasis::for_dim(self.dim())?;
        Some(self.labels.iter().map(|&i| basis.label(i)).collect())
    }

    /// Column whose nominal label is `basis_index`.
    pub fn column_of(&self, basis_index: usize) -> Option<usize> {
        self.labels.iter().position(|&l| l == basis_index)
    }

    /// `sum_k E_k v_k v_k^dagger`.
    pub fn reconstruct(&self) -> OperatorMatrix {
        let n = self.dim();
        let d = CMatrix::from_fn(n, n, |i, j| {
            if i == j {
                Complex64::new(self.energies[i], 0.0)
            } else {
                Complex64::new(0.0, 0.0)
            }
        });
        OperatorMatrix(&self.vectors * d * self.vectors.adjoint())
    }

    /// `max_k ||H v_k - E_k v_k||`.
    pub fn max_residual(&self, h: &OperatorMatrix) -> f64 {
        (0..self.dim())
            .map(|k| {
                let v = self.vectors.column(k);
                (h.entries() * v - v * Complex64::new(self.energies[k], 0.0)).norm()
            })
            .fold(0.0, f64::max)
    }
}

/// Diagonalises a Hermitian matrix. Eigenvalues ascend; near-degenerate
/// groups are ordered by their assigned basis label.
pub fn eigensolve(h: &OperatorMatrix) -> Result<EigenSystem> {
    let err = h.hermiticity_error();
    if !err.is_finite() || err > HERMITIAN_TOL {
        return Err(Error::invalid(format!(
            "matrix is not Hermitian (relative deviation {err:.3e})"
        )));
    }
    let sym = (h.entries() + h.entries().adjoint()) * Complex64::new(0.5, 0.0);
    let eig = sym.symmetric_eigen();
    let n = h.dim();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let energies: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = CMatrix::from_fn(n, n, |i, j| eig.eigenvectors[(i, order[j])]);
    let system = label_states(EigenSystem {
        energies,
        vectors,
        labels: Vec::new(),
    });
    Ok(order_degenerate_by_label(system))
}

fn order_degenerate_by_label(mut sys: EigenSystem) -> EigenSystem {
    let n = sys.dim();
    let scale = sys
        .energies
        .iter()
        .fold(1.0f64, |acc, e| acc.max(e.abs()));
    let tol = 1e-9 * scale;
    let mut perm: Vec<usize> = (0..n).collect();
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && sys.energies[end] - sys.energies[end - 1] <= tol {
            end += 1;
        }
        perm[start..end].sort_by_key(|&k| sys.labels[k]);
        start = end;
    }
    if perm.iter().enumerate().all(|(i, &p)| i == p) {
        return sys;
    }
    let vectors = CMatrix::from_fn(n, n, |i, j| sys.vectors[(i, perm[j])]);
    sys.energies = perm.iter().map(|&k| sys.energies[k]).collect();
    sys.labels = perm.iter().map(|&k| sys.labels[k]).collect();
    sys.vectors = vectors;
    sys
}

/// Assigns each eigenvector the basis index with the largest squared
/// overlap. Greedy over all (column, basis) pairs by descending overlap,
/// ties to the lower basis index, so the result is always a bijection.
pub fn label_states(mut system: EigenSystem) -> EigenSystem {
    system.labels = greedy_assignment(system.dim(), |basis, col| {
        system.vectors[(basis, col)].norm_sqr()
    });
    system
}

/// Greedy bijection between columns and rows of an `n x n` score matrix.
/// Returns `assigned[col] = row`.
pub(crate) fn greedy_assignment(n: usize, score: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(n * n);
    for col in 0..n {
        for row in 0..n {
            pairs.push((score(row, col), row, col));
        }
    }
    pairs.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut row_used = vec![false; n];
    let mut assigned = vec![usize::MAX; n];
    let mut remaining = n;
    for (_, row, col) in pairs {
        if remaining == 0 {
            break;
        }
        if !row_used[row] && assigned[col] == usize::MAX {
            row_used[row] = true;
            assigned[col] = row;
            remaining -= 1;
        }
    }
    assigned
}
