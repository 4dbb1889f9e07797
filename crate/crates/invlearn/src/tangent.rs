//! Tangent-kernel machinery: Gram matrices of `G(x,x') = B_x B_{x'}^*`,
//! empirical and population integral operators, effective dimension and
//! eigenvalue-decay fits.
//!
//! The empirical operator carries the `1/n` weighting, so `T_hat -> T` as
//! `n -> infinity` and the step-size cap `eta < 1/kappa1^2` applies to the
//! implemented iteration unchanged.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::forward::{ForwardModel, ParamVector};
use crate::spectral::{sym_eig, QuadratureGrid, SpectralDecomposition, SymMatrix};

/// Tangent-kernel operators at a linearization point.
#[derive(Debug, Clone)]
pub struct TangentOperators {
    /// Empirical `T_hat = (1/n) Σ_j B_{x_j} B_{x_j}^T` (p x p).
    pub t_hat: SymMatrix,
    /// Gram matrix of `G(x_i, x_j)`, `(n m) x (n m)`.
    pub gram: SymMatrix,
    /// Population `T` from quadrature, when attached.
    pub t_pop: Option<SymMatrix>,
    /// Decomposition of the selected `T` (`t_pop` if present, else `t_hat`).
    pub decomp_t: SpectralDecomposition,
}

impl TangentOperators {
    /// Re-selects the population operator as the decomposed `T`.
    pub fn attach_population(mut self, t_pop: SymMatrix) -> Result<TangentOperators> {
        self.decomp_t = sym_eig(&t_pop)?;
        self.t_pop = Some(t_pop);
        Ok(self)
    }

    pub fn selected_t(&self) -> &SymMatrix {
        self.t_pop.as_ref().unwrap_or(&self.t_hat)
    }
}

/// Builds the empirical tangent operators at `f_dagger` from design points.
pub fn build_tangent(
    model: &ForwardModel,
    f_dagger: &ParamVector,
    points: &[f64],
) -> Result<TangentOperators> {
    if points.is_empty() {
        return Err(Error::Contract("build_tangent needs at least one design point".into()));
    }
    let rows = model.jac_rows(f_dagger, points)?;
    let (n, m, p) = (points.len(), model.m(), model.p());
    let mut t_acc = DMatrix::zeros(p, p);
    for row in &rows {
        t_acc += row * row.transpose();
    }
    t_acc /= n as f64;
    let t_hat = SymMatrix::new(t_acc)?;

    let mut gram = DMatrix::zeros(n * m, n * m);
    for i in 0..n {
        for j in i..n {
            let block = rows[i].transpose() * &rows[j];
            for a in 0..m {
                for b in 0..m {
                    gram[(i * m + a, j * m + b)] = block[(a, b)];
                    gram[(j * m + b, i * m + a)] = block[(a, b)];
                }
            }
        }
    }
    let gram = SymMatrix::new(gram)?;
    let decomp_t = sym_eig(&t_hat)?;
    Ok(TangentOperators { t_hat, gram, t_pop: None, decomp_t })
}

/// Population tangent operator `T = Σ_q w_q B_{x_q} B_{x_q}^T` under the
/// design-measure quadrature.
pub fn population_t(
    model: &ForwardModel,
    f_dagger: &ParamVector,
    grid: &QuadratureGrid,
) -> Result<SymMatrix> {
    let rows = model.jac_rows(f_dagger, grid.nodes())?;
    let p = model.p();
    let mut acc = DMatrix::zeros(p, p);
    for (row, &w) in rows.iter().zip(grid.weights()) {
        acc += (row * row.transpose()) * w;
    }
    SymMatrix::new(acc)
}

/// Effective dimension `N(lambda) = Σ_j sigma_j / (sigma_j + lambda)` over
/// the decomposition's spectrum (negative roundoff clipped at zero).
pub fn effective_dimension(d: &SpectralDecomposition, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::Domain(format!("effective dimension needs lambda > 0, got {lambda}")));
    }
    Ok(d.eigenvalues()
        .iter()
        .map(|&s| {
            let s = s.max(0.0);
            s / (s + lambda)
        })
        .sum())
}

/// Least-squares fit of polynomial eigenvalue decay `sigma_j ~ C j^(-1/nu)`.
#[derive(Debug, Clone, Copy)]
pub struct DecayFit {
    pub nu_hat: f64,
    pub c_nu_hat: f64,
    /// 1-based inclusive index window used for the fit.
    pub fit_window: (usize, usize),
    /// False when `nu_hat` falls outside `(0, 1)`.
    pub in_range: bool,
}

/// Fits `log sigma_j` against `log j` over the 1-based inclusive window
/// `[lo, hi]`; `nu_hat = -1/slope`.
pub fn fit_decay(d: &SpectralDecomposition, lo: usize, hi: usize) -> Result<DecayFit> {
    if lo < 1 || hi < lo || hi > d.dim() {
        return Err(Error::Contract(format!(
            "fit window [{lo},{hi}] invalid for spectrum of size {}",
            d.dim()
        )));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for j in lo..=hi {
        let sigma = d.eigenvalues()[j - 1];
        if sigma > 1e-14 {
            xs.push((j as f64).ln());
            ys.push(sigma.ln());
        }
    }
    if xs.len() < 4 {
        return Err(Error::Contract(format!(
            "insufficient spectrum: only {} usable eigenvalues in [{lo},{hi}]",
            xs.len()
        )));
    }
    let n = xs.len() as f64;
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_y = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mean_x).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mean_x) * (y - mean_y)).sum();
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let nu_hat = -1.0 / slope;
    Ok(DecayFit {
        nu_hat,
        c_nu_hat: intercept.exp(),
        fit_window: (lo, hi),
        in_range: nu_hat > 0.0 && nu_hat < 1.0,
    })
}

/// Default fit window `[4, min(40, rank/2)]`, skipping boundary eigenvalues.
pub fn fit_decay_default(d: &SpectralDecomposition) -> Result<DecayFit> {
    let lam_max = d.lambda_max().max(0.0);
    let rank = d.eigenvalues().iter().filter(|&&s| s > 1e-14 * lam_max.max(1e-300)).count();
    let hi = 40.min(rank / 2);
    fit_decay(d, 4, hi.max(4).min(d.dim()))
}

/// Applies `T^r` to a parameter through the selected decomposition.
pub fn apply_t_power(t_ops: &TangentOperators, r: f64, g: &ParamVector) -> Result<ParamVector> {
    apply_decomp_power(&t_ops.decomp_t, r, g)
}

pub fn apply_decomp_power(
    d: &SpectralDecomposition,
    r: f64,
    g: &ParamVector,
) -> Result<ParamVector> {
    Ok(ParamVector::new(d.apply_power(r, &g.coeffs)?))
}

/// Interpolation norm `||T^u v||` computed through a decomposition.
pub fn t_power_norm(d: &SpectralDecomposition, u: f64, v: &DVector<f64>) -> Result<f64> {
    Ok(d.apply_power(u, v)?.norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::Kernel;
    use crate::spectral::{quadrature_grid, QuadratureRule, RngStream};
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    const PI: f64 = std::f64::consts::PI;

    fn default_grid(q: usize) -> QuadratureGrid {
        quadrature_grid(q, QuadratureRule::Midpoint).unwrap()
    }

    #[test]
    fn single_point_rank_one() {
        let model = ForwardModel::linear_integral(24, 1, Kernel::Min).unwrap();
        let f = model.param_from_fn(|_| 1.0);
        let ops = build_tangent(&model, &f, &[0.7]).unwrap();
        assert_eq!(ops.gram.dim(), 1);
        let row = &model.jac_rows(&f, &[0.7]).unwrap()[0];
        assert_abs_diff_eq!(ops.gram.matrix()[(0, 0)], row.norm_squared(), epsilon = 1e-14);
        // rank <= m = 1
        let eigs = ops.decomp_t.eigenvalues();
        assert!(eigs.iter().skip(1).all(|&l| l.abs() <= 1e-12 * eigs[0].abs().max(1e-300)));
    }

    #[test]
    fn gram_matches_direct_kernel_quadrature() {
        // G(x,y) = ∫ k(x,s) k(y,s) ds against a fine midpoint oracle;
        // p large enough that the cell-projection error sits below 1e-8
        let model = ForwardModel::linear_integral(4096, 1, Kernel::Min).unwrap();
        let f = model.param_from_fn(|_| 1.0);
        let pts = [0.2, 0.51, 0.83, 1.0];
        let ops = build_tangent(&model, &f, &pts).unwrap();
        let fine = default_grid(1 << 17);
        for (i, &x) in pts.iter().enumerate() {
            for (j, &y) in pts.iter().enumerate() {
                let oracle = fine.integrate(|s| x.min(s) * y.min(s));
                assert!(
                    (ops.gram.matrix()[(i, j)] - oracle).abs() <= 1e-8,
                    "G({x},{y}) = {} vs {oracle}",
                    ops.gram.matrix()[(i, j)]
                );
            }
        }
    }

    #[test]
    fn duplicated_points_give_identical_gram_rows() {
        let model = ForwardModel::linear_integral(32, 1, Kernel::Volterra).unwrap();
        let f = model.param_from_fn(|s| s);
        let ops = build_tangent(&model, &f, &[0.4, 0.4, 0.9]).unwrap();
        for c in 0..3 {
            assert_eq!(ops.gram.matrix()[(0, c)], ops.gram.matrix()[(1, c)]);
        }
    }

    #[test]
    fn empirical_equals_population_on_quadrature_nodes() {
        let model = ForwardModel::linear_integral(16, 1, Kernel::Min).unwrap();
        let f = model.param_from_fn(|_| 1.0);
        let grid = default_grid(64);
        let t_pop = population_t(&model, &f, &grid).unwrap();
        let ops = build_tangent(&model, &f, grid.nodes()).unwrap();
        let diff = (t_pop.matrix() - ops.t_hat.matrix()).norm();
        assert!(diff <= 1e-12, "diff {diff}");
    }

    #[test]
    fn empirical_population_gap_shrinks_with_n() {
        let model = ForwardModel::linear_integral(32, 1, Kernel::Volterra).unwrap();
        let f = model.param_from_fn(|_| 1.0);
        let t_pop = population_t(&model, &f, &default_grid(512)).unwrap();
        let mut medians = Vec::new();
        for (k, &n) in [64usize, 256, 1024, 4096].iter().enumerate() {
            let mut gaps: Vec<f64> = (0..20)
                .map(|rep| {
                    let mut rng = RngStream::new(314, (k * 100 + rep) as u64).rng();
                    let pts: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
                    let ops = build_tangent(&model, &f, &pts).unwrap();
                    let diff =
                        SymMatrix::new(ops.t_hat.matrix() - t_pop.matrix()).unwrap();
                    sym_eig(&diff)
                        .unwrap()
                        .eigenvalues()
                        .iter()
                        .map(|l| l.abs())
                        .fold(0.0_f64, f64::max)
                })
                .collect();
            gaps.sort_by(|a, b| a.partial_cmp(b).unwrap());
            medians.push(0.5 * (gaps[9] + gaps[10]));
        }
        assert!(
            medians.windows(2).all(|w| w[1] < w[0]),
            "operator gap medians not decreasing: {medians:?}"
        );
    }

    #[test]
    fn min_kernel_population_spectrum_matches_dense_oracle() {
        // forward kernel min(x,s): T has the spectrum of the iterated min
        // kernel, lambda_j = ((j-1/2) pi)^-4
        let model = ForwardModel::linear_integral(64, 1, Kernel::Min).unwrap();
        let f = model.param_from_fn(|_| 1.0);
        let t_pop = population_t(&model, &f, &default_grid(512)).unwrap();
        let top = sym_eig(&t_pop).unwrap().lambda_max();

        // independent Nystrom oracle on the analytic iterated kernel
        // ∫ min(x,a) min(x,b) dx = a^3/3 + a (b^2-a^2)/2 + a b (1-b), a <= b
        let iterated = |a: f64, b: f64| {
            let (a, b) = if a <= b { (a, b) } else { (b, a) };
            a * a * a / 3.0 + a * (b * b - a * a) / 2.0 + a * b * (1.0 - b)
        };
        let q = 512;
        let oracle_grid = default_grid(q);
        let nystrom = SymMatrix::from_fn(q, |i, j| {
            iterated(oracle_grid.nodes()[i], oracle_grid.nodes()[j]) / q as f64
        })
        .unwrap();
        let oracle_top = sym_eig(&nystrom).unwrap().lambda_max();

        let analytic = 16.0 / PI.powi(4);
        assert!((top - oracle_top).abs() / oracle_top <= 0.02, "{top} vs {oracle_top}");
        assert!((top - analytic).abs() / analytic <= 0.02, "{top} vs analytic {analytic}");
    }

    #[test]
    fn volterra_population_spectrum_is_min_kernel_spectrum() {
        // tangent kernel of the volterra model is min(x,x');
        // lambda_j = 4 / ((2j-1)^2 pi^2)
        let model = ForwardModel::linear_integral(64, 1, Kernel::Volterra).unwrap();
        let f = model.param_from_fn(|_| 1.0);
        let t_pop = population_t(&model, &f, &default_grid(512)).unwrap();
        let d = sym_eig(&t_pop).unwrap();
        for j in 1..=4 {
            let analytic = 4.0 / ((2 * j - 1) as f64 * PI).powi(2);
            let rel = (d.eigenvalues()[j - 1] - analytic).abs() / analytic;
            assert!(rel <= 0.02, "eigenvalue {j}: {} vs {analytic}", d.eigenvalues()[j - 1]);
        }
        // decay fit lands at nu ~ 1/2 on the default window
        let fit = fit_decay(&d, 4, 40).unwrap();
        assert!(
            (0.45..=0.55).contains(&fit.nu_hat),
            "nu_hat = {} outside [0.45, 0.55]",
            fit.nu_hat
        );
        assert!(fit.in_range);
    }

    #[test]
    fn min_forward_kernel_decays_like_j4() {
        // documented contrast: with forward kernel min the tangent spectrum
        // decays ~ j^-4, i.e. nu ~ 1/4
        let model = ForwardModel::linear_integral(96, 1, Kernel::Min).unwrap();
        let f = model.param_from_fn(|_| 1.0);
        let d = sym_eig(&population_t(&model, &f, &default_grid(512)).unwrap()).unwrap();
        let fit = fit_decay(&d, 4, 40).unwrap();
        assert!((0.2..=0.3).contains(&fit.nu_hat), "nu_hat = {}", fit.nu_hat);
    }

    #[test]
    fn effective_dimension_cases() {
        let single = sym_eig(&SymMatrix::from_diagonal(&[1.0, 0.0])).unwrap();
        assert_abs_diff_eq!(effective_dimension(&single, 1.0).unwrap(), 0.5, epsilon = 1e-14);

        // unit-trace spectrum, huge lambda
        let d = sym_eig(&SymMatrix::from_diagonal(&[0.5, 0.3, 0.2])).unwrap();
        assert!(effective_dimension(&d, 1e6).unwrap() <= 1e-6 * 3.0);

        assert!(effective_dimension(&d, 0.0).is_err());
        assert!(effective_dimension(&d, -1.0).is_err());
    }

    #[test]
    fn effective_dimension_matches_brute_force() {
        let sigmas: Vec<f64> = (1..=256).map(|j| (j as f64).powi(-2)).collect();
        let d = sym_eig(&SymMatrix::from_diagonal(&sigmas)).unwrap();
        let lambda = 1e-2;
        let brute: f64 = (1..=256)
            .map(|j| {
                let s = (j as f64).powi(-2);
                s / (s + lambda)
            })
            .sum();
        assert_abs_diff_eq!(effective_dimension(&d, lambda).unwrap(), brute, epsilon = 1e-12);
    }

    #[test]
    fn effective_dimension_monotone_and_bounded_by_rank() {
        let sigmas: Vec<f64> = (1..=64).map(|j| (j as f64).powf(-2.5)).collect();
        let d = sym_eig(&SymMatrix::from_diagonal(&sigmas)).unwrap();
        let lambdas = [1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0];
        let vals: Vec<f64> =
            lambdas.iter().map(|&l| effective_dimension(&d, l).unwrap()).collect();
        assert!(vals.windows(2).all(|w| w[1] <= w[0] + 1e-14));
        assert!(vals.iter().all(|&v| v <= 64.0));
    }

    #[test]
    fn polynomial_decay_bound_constant_from_sweep() {
        let nu = 0.5;
        let sigmas: Vec<f64> = (1..=512).map(|j| (j as f64).powf(-1.0 / nu)).collect();
        let d = sym_eig(&SymMatrix::from_diagonal(&sigmas)).unwrap();
        let sweep = [1e-1, 1e-2, 1e-3, 1e-4];
        let c_sweep = sweep
            .iter()
            .map(|&l| effective_dimension(&d, l).unwrap() * l.powf(nu))
            .fold(0.0_f64, f64::max);
        // the computed constant bounds N(lambda) on a denser grid
        for k in 0..40 {
            let l = 10f64.powf(-1.0 - 3.0 * k as f64 / 39.0);
            assert!(effective_dimension(&d, l).unwrap() <= (c_sweep + 1e-12) * l.powf(-nu));
        }
    }

    #[test]
    fn fit_decay_exact_power_laws() {
        let sig2: Vec<f64> = (1..=64).map(|j| (j as f64).powi(-2)).collect();
        let d2 = sym_eig(&SymMatrix::from_diagonal(&sig2)).unwrap();
        let f2 = fit_decay(&d2, 1, 64).unwrap();
        assert_abs_diff_eq!(f2.nu_hat, 0.5, epsilon = 1e-10);
        assert_abs_diff_eq!(f2.c_nu_hat, 1.0, epsilon = 1e-10);

        let sig4: Vec<f64> = (1..=64).map(|j| (j as f64).powi(-4)).collect();
        let d4 = sym_eig(&SymMatrix::from_diagonal(&sig4)).unwrap();
        let f4 = fit_decay(&d4, 1, 64).unwrap();
        assert_abs_diff_eq!(f4.nu_hat, 0.25, epsilon = 1e-10);
    }

    #[test]
    fn fit_decay_insufficient_spectrum() {
        let d = sym_eig(&SymMatrix::from_diagonal(&[1.0, 0.5, 0.0, 0.0, 0.0, 0.0])).unwrap();
        assert!(matches!(fit_decay(&d, 1, 6), Err(Error::Contract(_))));
        assert!(fit_decay(&d, 0, 3).is_err());
        assert!(fit_decay(&d, 2, 99).is_err());
    }

    #[test]
    fn apply_t_power_cases() {
        let model = ForwardModel::linear_integral(24, 1, Kernel::Volterra).unwrap();
        let f = model.param_from_fn(|_| 1.0);
        let grid = default_grid(256);
        let ops = build_tangent(&model, &f, grid.nodes())
            .unwrap()
            .attach_population(population_t(&model, &f, &grid).unwrap())
            .unwrap();
        let mut rng = RngStream::new(8, 8).rng();
        let g = ParamVector::random_unit(24, &mut rng);

        let same = apply_t_power(&ops, 0.0, &g).unwrap();
        assert!((same.coeffs.clone() - &g.coeffs).norm() <= 1e-12);

        let tg = apply_t_power(&ops, 1.0, &g).unwrap();
        let direct = ops.selected_t().matrix() * &g.coeffs;
        assert!((tg.coeffs.clone() - &direct).norm() <= 1e-9 * direct.norm().max(1e-300));

        let top = ParamVector::new(ops.decomp_t.eigenvectors().column(0).into_owned());
        let t_top = apply_t_power(&ops, 0.5, &top).unwrap();
        let expected = top.scale(ops.decomp_t.lambda_max().sqrt());
        assert!((t_top.coeffs - expected.coeffs).norm() <= 1e-10);
    }

    #[test]
    fn psd_and_trace_sharing_invariants() {
        let model = ForwardModel::linear_integral(20, 1, Kernel::Min).unwrap();
        let f = model.param_from_fn(|s| 1.0 + s);
        let mut rng = RngStream::new(21, 0).rng();
        let pts: Vec<f64> = (0..40).map(|_| rng.gen_range(0.0..1.0)).collect();
        let ops = build_tangent(&model, &f, &pts).unwrap();

        let gram_eigs = sym_eig(&ops.gram).unwrap();
        let lam_max = gram_eigs.lambda_max();
        assert!(gram_eigs.eigenvalues().iter().all(|&l| l >= -1e-10 * lam_max));
        let t_eigs = &ops.decomp_t;
        assert!(t_eigs.eigenvalues().iter().all(|&l| l >= -1e-10 * t_eigs.lambda_max()));

        // shared trace: Tr(gram)/n = Tr(t_hat)
        let rel = (ops.gram.trace() / 40.0 - ops.t_hat.trace()).abs() / ops.t_hat.trace();
        assert!(rel <= 1e-8);

        // shared nonzero spectrum (m = 1): gram/n vs t_hat
        let tol = 1e-12 * lam_max;
        let g_pos: Vec<f64> = gram_eigs
            .eigenvalues()
            .iter()
            .map(|l| l / 40.0)
            .filter(|&l| l > tol / 40.0)
            .collect();
        let t_pos: Vec<f64> =
            t_eigs.eigenvalues().iter().copied().filter(|&l| l > tol / 40.0).collect();
        let shared = g_pos.len().min(t_pos.len());
        for k in 0..shared {
            let rel = (g_pos[k] - t_pos[k]).abs() / t_pos[k];
            assert!(rel <= 1e-8, "eigenvalue {k}: {} vs {}", g_pos[k], t_pos[k]);
        }
    }
}
