//! Numerical backbone: symmetric eigendecompositions, fractional operator
//! powers, shifted SPD solves, quadrature grids and seeded RNG streams.
//!
//! Everything here is a pure function of its inputs; values are immutable
//! after construction and safe to share across parallel workers.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative asymmetry tolerated by [`SymMatrix`] constructors.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Eigenvalues below `-NEG_EIG_TOL * lambda_max` are treated as genuinely
/// indefinite; those in `[-NEG_EIG_TOL * lambda_max, 0]` clip to zero.
pub const NEG_EIG_TOL: f64 = 1e-10;

/// A dense real symmetric matrix.
///
/// Construction validates symmetry to [`SYMMETRY_TOL`] (relative) and
/// finiteness, then stores the exactly symmetrized part.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    data: DMatrix<f64>,
}

impl SymMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return Err(Error::Contract(format!(
                "symmetric matrix must be square and nonempty, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        for i in 0..m.nrows() {
            for j in 0..i {
                let (a, b) = (m[(i, j)], m[(j, i)]);
                if !a.is_finite() || !b.is_finite() {
                    return Err(Error::Contract(format!("non-finite entry at ({i},{j})")));
                }
                if (a - b).abs() > SYMMETRY_TOL * a.abs().max(1.0) {
                    return Err(Error::Contract(format!(
                        "asymmetry at ({i},{j}): {a} vs {b}"
                    )));
                }
            }
            if !m[(i, i)].is_finite() {
                return Err(Error::Contract(format!("non-finite entry at ({i},{i})")));
            }
        }
        let sym = (&m + m.transpose()) * 0.5;
        Ok(SymMatrix { data: sym })
    }

    pub fn from_fn(dim: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        Self::new(DMatrix::from_fn(dim, dim, f))
    }

    pub fn identity(dim: usize) -> Self {
        SymMatrix { data: DMatrix::identity(dim, dim) }
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        SymMatrix { data: DMatrix::from_diagonal(&DVector::from_row_slice(d)) }
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn trace(&self) -> f64 {
        self.data.trace()
    }

    pub fn frobenius(&self) -> f64 {
        self.data.norm()
    }

    /// Cheap identifying string for error messages.
    pub fn fingerprint(&self) -> String {
        format!("dim={} trace={:.6e} fro={:.6e}", self.dim(), self.trace(), self.frobenius())
    }
}

/// Eigenvalues (sorted descending) and orthonormal eigenvectors of a
/// [`SymMatrix`].
#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
}

impl SpectralDecomposition {
    /// Eigenvalues in descending order.
    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    /// Orthonormal eigenvectors; column `j` pairs with eigenvalue `j`.
    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn lambda_max(&self) -> f64 {
        self.eigenvalues[0]
    }

    /// `V diag(lambda) V^T`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let scaled = self.eigenvectors.clone() * DMatrix::from_diagonal(&self.eigenvalues);
        scaled * self.eigenvectors.transpose()
    }

    /// Eigenvalues raised to the power `r` with the negative-roundoff
    /// clipping policy of [`frac_power`].
    fn clipped_powers(&self, r: f64) -> Result<DVector<f64>> {
        if r < 0.0 {
            return Err(Error::Domain(format!("fractional power requires r >= 0, got {r}")));
        }
        let lam_max = self.lambda_max().max(0.0);
        let neg_floor = -NEG_EIG_TOL * lam_max;
        let mut out = DVector::zeros(self.dim());
        for (i, &lam) in self.eigenvalues.iter().enumerate() {
            if lam < neg_floor {
                return Err(Error::Domain(format!(
                    "indefinite spectrum: eigenvalue {lam:.6e} below {neg_floor:.6e}"
                )));
            }
            let clipped = lam.max(0.0);
            out[i] = if r == 0.0 { 1.0 } else { clipped.powf(r) };
        }
        Ok(out)
    }

    /// Applies `M^r` to a vector without materializing the matrix.
    pub fn apply_power(&self, r: f64, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.dim() {
            return Err(Error::Contract(format!(
                "vector length {} does not match decomposition dim {}",
                v.len(),
                self.dim()
            )));
        }
        let pows = self.clipped_powers(r)?;
        let mut coords = self.eigenvectors.transpose() * v;
        coords.component_mul_assign(&pows);
        Ok(&self.eigenvectors * coords)
    }
}

/// Symmetric eigendecomposition with eigenvalues sorted descending.
pub fn sym_eig(m: &SymMatrix) -> Result<SpectralDecomposition> {
    let eig = nalgebra::SymmetricEigen::try_new(m.data.clone(), f64::EPSILON, 10_000)
        .ok_or_else(|| Error::EigenFailure { fingerprint: m.fingerprint() })?;
    let n = m.dim();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).expect("finite eigenvalues")
    });
    let eigenvalues = DVector::from_fn(n, |i, _| eig.eigenvalues[order[i]]);
    let mut eigenvectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        eigenvectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok(SpectralDecomposition { eigenvalues, eigenvectors })
}

/// `V diag(max(lambda,0)^r) V^T`; errors on `r < 0` or a genuinely
/// indefinite spectrum (see [`NEG_EIG_TOL`]).
pub fn frac_power(d: &SpectralDecomposition, r: f64) -> Result<SymMatrix> {
    let pows = d.clipped_powers(r)?;
    let scaled = d.eigenvectors.clone() * DMatrix::from_diagonal(&pows);
    let m = scaled * d.eigenvectors.transpose();
    // numerically symmetric by construction up to roundoff
    Ok(SymMatrix { data: (&m + m.transpose()) * 0.5 })
}

/// Solves `(M + shift I) x = rhs` for SPD-up-to-roundoff `M`, `shift > 0`.
///
/// Refines the Cholesky solution until the residual is below
/// `1e-10 * ||rhs||` (a handful of iterations at most).
pub fn spd_solve(m: &SymMatrix, shift: f64, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    if shift <= 0.0 || !shift.is_finite() {
        return Err(Error::Domain(format!("spd_solve requires shift > 0, got {shift}")));
    }
    if rhs.len() != m.dim() {
        return Err(Error::Contract(format!(
            "rhs length {} does not match matrix dim {}",
            rhs.len(),
            m.dim()
        )));
    }
    let shifted = &m.data + DMatrix::from_diagonal_element(m.dim(), m.dim(), shift);
    let chol = shifted
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Domain(format!("matrix not SPD after shift: {}", m.fingerprint())))?;
    let mut x = chol.solve(rhs);
    let rhs_norm = rhs.norm();
    let tol = 1e-10 * rhs_norm;
    for _ in 0..8 {
        let resid = rhs - &shifted * &x;
        if resid.norm() <= tol {
            return Ok(x);
        }
        x += chol.solve(&resid);
    }
    let resid = (rhs - &shifted * &x).norm();
    if resid <= tol || rhs_norm == 0.0 {
        Ok(x)
    } else {
        Err(Error::Domain(format!(
            "spd_solve residual {resid:.3e} exceeds {tol:.3e} ({})",
            m.fingerprint()
        )))
    }
}

/// Quadrature rule on `[0,1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuadratureRule {
    Midpoint,
    Trapezoid,
}

/// Probability quadrature for the design measure: nodes in `[0,1]`, strictly
/// increasing; nonnegative weights summing to one.
#[derive(Debug, Clone)]
pub struct QuadratureGrid {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadratureGrid {
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }

    /// Weighted L2 norm of point values given on the grid nodes.
    pub fn weighted_norm(&self, values: &[f64]) -> f64 {
        assert_eq!(values.len(), self.len());
        values
            .iter()
            .zip(&self.weights)
            .map(|(&v, &w)| w * v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Reweights the grid by a density on `[0,1]` and renormalizes to a
    /// probability measure.
    pub fn reweighted(&self, density: impl Fn(f64) -> f64) -> Result<QuadratureGrid> {
        let mut weights: Vec<f64> = self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * density(x))
            .collect();
        let total: f64 = weights.iter().sum();
        if !(total.is_finite() && total > 0.0) || weights.iter().any(|w| *w < 0.0) {
            return Err(Error::Domain("density must be nonnegative with positive mass".into()));
        }
        for w in &mut weights {
            *w /= total;
        }
        Ok(QuadratureGrid { nodes: self.nodes.clone(), weights })
    }
}

/// Builds a quadrature grid on `[0,1]` with `q` nodes.
///
/// Midpoint is exact for the uniform design measure on piecewise-linear
/// integrands and `O(q^-2)` otherwise; trapezoid needs `q >= 2`.
pub fn quadrature_grid(q: usize, rule: QuadratureRule) -> Result<QuadratureGrid> {
    if q == 0 {
        return Err(Error::Domain("quadrature grid needs q >= 1 nodes".into()));
    }
    match rule {
        QuadratureRule::Midpoint => {
            let w = 1.0 / q as f64;
            let nodes = (0..q).map(|i| (i as f64 + 0.5) * w).collect();
            Ok(QuadratureGrid { nodes, weights: vec![w; q] })
        }
        QuadratureRule::Trapezoid => {
            if q < 2 {
                return Err(Error::Domain("trapezoid rule needs q >= 2 nodes".into()));
            }
            let h = 1.0 / (q - 1) as f64;
            let nodes = (0..q).map(|i| i as f64 * h).collect();
            let mut weights = vec![h; q];
            weights[0] = 0.5 * h;
            weights[q - 1] = 0.5 * h;
            Ok(QuadratureGrid { nodes, weights })
        }
    }
}

/// A reproducible randomness source: identical `(seed, stream)` pairs yield
/// bit-identical draw sequences. All randomness in the crate flows through
/// these; there is no global RNG.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        RngStream { seed, stream }
    }

    /// Instantiates the generator for this stream.
    pub fn rng(&self) -> ChaCha12Rng {
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }

    /// Derives a child stream; distinct `k` give distinct streams.
    pub fn substream(&self, k: u64) -> RngStream {
        RngStream { seed: self.seed, stream: splitmix(self.stream ^ splitmix(k)) }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
