//! Nonlinear forward operators with Fréchet derivative and adjoint actions.
//!
//! Three concrete models share one interface:
//!
//! * `linear-integral` — `A(f)(x) = ∫ k(x,s) f(s) ds` for a configurable
//!   kernel `k`; the linear baseline (`A'(f) = A`).
//! * `diffusion-pde` — the parameter-to-solution map of
//!   `-(a u_s)_s = load, u(0)=u(1)=0`, estimating the diffusion
//!   coefficient `a` from point observations of `u`.
//! * `pointwise-nonlinear` — `A(f)(x) = ∫ k(x,s) φ(f(s)) ds` with
//!   `φ(v) = v + β tanh(v)`, a mild smooth nonlinearity.
//!
//! The solution space is a uniform grid on `[0,1]` with the orthonormal
//! indicator/sqrt(mesh) basis, so the H1 inner product is the plain
//! coefficient dot product. For the `min` and `volterra` kernels the cell
//! integrals are evaluated in closed form, making the discrete operator exact
//! on piecewise-constant functions.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{QuadratureGrid, RngStream};

/// Uniform 1-D grid carrying the H1 discretization.
#[derive(Debug, Clone)]
pub struct Grid1d {
    nodes: Vec<f64>,
    mesh: f64,
}

impl Grid1d {
    /// Cell centers `(i + 1/2)/p`, mesh `1/p`; cells tile `[0,1]`.
    pub fn cell_centers(p: usize) -> Self {
        let mesh = 1.0 / p as f64;
        Grid1d { nodes: (0..p).map(|i| (i as f64 + 0.5) * mesh).collect(), mesh }
    }

    /// Interior nodes `i/(p+1)`, `i = 1..=p`, mesh `1/(p+1)`.
    pub fn interior_nodes(p: usize) -> Self {
        let mesh = 1.0 / (p + 1) as f64;
        Grid1d { nodes: (1..=p).map(|i| i as f64 * mesh).collect(), mesh }
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn mesh(&self) -> f64 {
        self.mesh
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Basis scale: function value = coefficient / sqrt(mesh).
    pub fn basis_scale(&self) -> f64 {
        self.mesh.sqrt()
    }
}

/// Coefficient vector in the orthonormal grid basis of discretized H1.
/// The H1 norm is the Euclidean norm of `coeffs`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub coeffs: DVector<f64>,
}

impl ParamVector {
    pub fn new(coeffs: DVector<f64>) -> Self {
        ParamVector { coeffs }
    }

    pub fn zeros(p: usize) -> Self {
        ParamVector { coeffs: DVector::zeros(p) }
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.coeffs.norm()
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.coeffs.dot(&other.coeffs)
    }

    pub fn add_scaled(&self, scale: f64, other: &ParamVector) -> ParamVector {
        ParamVector { coeffs: &self.coeffs + &other.coeffs * scale }
    }

    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        ParamVector { coeffs: &self.coeffs - &other.coeffs }
    }

    pub fn scale(&self, s: f64) -> ParamVector {
        ParamVector { coeffs: &self.coeffs * s }
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|c| c.is_finite())
    }

    /// Random standard-normal direction normalized to unit H1 norm.
    pub fn random_unit(p: usize, rng: &mut impl Rng) -> ParamVector {
        let mut v = DVector::from_fn(p, |_, _| StandardNormal.sample(rng));
        let n = v.norm();
        if n > 0.0 {
            v /= n;
        } else {
            v[0] = 1.0;
        }
        ParamVector { coeffs: v }
    }
}

/// Integral kernel `k(x,s)` of the linear and pointwise-nonlinear models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Kernel {
    /// `k(x,s) = min(x,s)`; tangent kernel is the iterated min kernel.
    Min,
    /// `k(x,s) = exp(-(x-s)^2 / (2 sigma^2))`.
    Gaussian { sigma: f64 },
    /// `k(x,s) = 1_{s <= x}` (cumulative integration); its tangent kernel is
    /// `min(x,x')`, giving eigenvalue decay `~ j^-2`.
    Volterra,
}

impl Kernel {
    /// `(1/|cell|) ∫_cell k(x,s) ds` over `cell = [left,right)` — closed form
    /// for `min`/`volterra`, midpoint for `gaussian`.
    fn cell_average(&self, x: f64, left: f64, right: f64) -> f64 {
        let width = right - left;
        match *self {
            Kernel::Min => {
                if x <= left {
                    x
                } else if x >= right {
                    0.5 * (left + right)
                } else {
                    (0.5 * (x * x - left * left) + (right - x) * x) / width
                }
            }
            Kernel::Gaussian { sigma } => {
                let mid = 0.5 * (left + right);
                let z = (x - mid) / sigma;
                (-0.5 * z * z).exp()
            }
            Kernel::Volterra => ((x.min(right) - left).max(0.0)) / width,
        }
    }

    fn label(&self) -> String {
        match self {
            Kernel::Min => "min".into(),
            Kernel::Gaussian { sigma } => format!("gaussian({sigma})"),
            Kernel::Volterra => "volterra".into(),
        }
    }
}

/// Structural constants of the forward operator: kernel bound, derivative
/// bound, tangential-cone constant, range-invariance constants and the trust
/// ball radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatorConstants {
    pub kappa0: f64,
    pub lip: f64,
    pub alpha: f64,
    pub c_r: f64,
    pub c_r_tilde: f64,
    pub ball_radius: f64,
}

impl OperatorConstants {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa0 > 0.0) || !(self.lip > 0.0) {
            return Err(Error::Contract("kappa0 and lip must be positive".into()));
        }
        if !(0.0..0.5).contains(&self.alpha) {
            return Err(Error::Contract(format!("alpha must lie in [0, 1/2), got {}", self.alpha)));
        }
        if !(self.ball_radius > 0.0) {
            return Err(Error::Contract("ball radius d must be positive".into()));
        }
        Ok(())
    }

    /// `kappa1^2 = (kappa0 * lip)^2`, the step-cap denominator.
    pub fn kappa1_sq(&self) -> f64 {
        (self.kappa0 * self.lip).powi(2)
    }

    /// Hard step-size cap `1/kappa1^2`.
    pub fn step_cap(&self) -> f64 {
        1.0 / self.kappa1_sq()
    }
}

#[derive(Debug, Clone)]
enum ModelKind {
    LinearIntegral { kernel: Kernel },
    DiffusionPde { load: Vec<f64>, a_min: f64 },
    PointwiseNonlinear { kernel: Kernel, beta: f64 },
}

/// A nonlinear forward operator `A` with derivative and adjoint actions.
/// Immutable after construction; all operations are pure.
#[derive(Debug, Clone)]
pub struct ForwardModel {
    kind: ModelKind,
    grid: Grid1d,
    p: usize,
    m: usize,
    constants: OperatorConstants,
}

impl ForwardModel {
    pub fn linear_integral(p: usize, m: usize, kernel: Kernel) -> Result<ForwardModel> {
        check_dims(p, m)?;
        let grid = Grid1d::cell_centers(p);
        let mut model = ForwardModel {
            kind: ModelKind::LinearIntegral { kernel },
            grid,
            p,
            m,
            constants: OperatorConstants {
                kappa0: 1.0,
                lip: 1.0,
                alpha: 0.0,
                c_r: 0.0,
                c_r_tilde: 1.0,
                ball_radius: 0.25,
            },
        };
        model.constants.kappa0 = model.sup_jac_row_norm(&model.flat_reference());
        model.constants.validate()?;
        Ok(model)
    }

    pub fn pointwise_nonlinear(p: usize, m: usize, kernel: Kernel, beta: f64) -> Result<ForwardModel> {
        check_dims(p, m)?;
        if !(beta >= 0.0) {
            return Err(Error::Contract(format!("beta must be nonnegative, got {beta}")));
        }
        let grid = Grid1d::cell_centers(p);
        let mut model = ForwardModel {
            kind: ModelKind::PointwiseNonlinear { kernel, beta },
            grid,
            p,
            m,
            constants: OperatorConstants {
                kappa0: 1.0,
                lip: 1.0 + beta,
                alpha: 0.25,
                c_r: 2.0,
                c_r_tilde: 1.0 + beta,
                ball_radius: 0.25,
            },
        };
        // kappa0 is the sup row norm of the underlying linear part; phi' <= 1 + beta
        // is folded into lip, so kappa0 * lip bounds ||B_x(f)|| uniformly.
        let linear = ForwardModel {
            kind: ModelKind::LinearIntegral { kernel },
            grid: model.grid.clone(),
            p,
            m,
            constants: model.constants,
        };
        model.constants.kappa0 = linear.sup_jac_row_norm(&linear.flat_reference());
        model.constants.validate()?;
        Ok(model)
    }

    /// Diffusion-coefficient identification model with Dirichlet load given
    /// as a function of `s`. Output dimension is fixed to 1.
    pub fn diffusion_pde(p: usize, a_min: f64, load: impl Fn(f64) -> f64) -> Result<ForwardModel> {
        check_dims(p, 1)?;
        if !(a_min > 0.0) {
            return Err(Error::Contract(format!("a_min must be positive, got {a_min}")));
        }
        let grid = Grid1d::interior_nodes(p);
        let load_vals: Vec<f64> = grid.nodes().iter().map(|&s| load(s)).collect();
        let mut model = ForwardModel {
            kind: ModelKind::DiffusionPde { load: load_vals, a_min },
            grid,
            p,
            m: 1,
            constants: OperatorConstants {
                kappa0: 1.0,
                lip: 1.0,
                alpha: 0.25,
                c_r: 2.0,
                c_r_tilde: 2.0,
                ball_radius: 0.1,
            },
        };
        // no closed-form kernel bound; estimate at the reference coefficient
        // a = 1 with a factor-2 margin
        let a_ref = model.param_from_fn(|_| 1.0);
        model.constants.kappa0 = 2.0 * model.sup_jac_row_norm(&a_ref);
        model.constants.validate()?;
        Ok(model)
    }

    /// Overrides the operator constants (validated).
    pub fn with_constants(mut self, constants: OperatorConstants) -> Result<ForwardModel> {
        constants.validate()?;
        self.constants = constants;
        Ok(self)
    }

    pub fn with_ball_radius(mut self, d: f64) -> Result<ForwardModel> {
        self.constants.ball_radius = d;
        self.constants.validate()?;
        Ok(self)
    }

    pub fn with_c_r(mut self, c_r: f64) -> ForwardModel {
        self.constants.c_r = c_r;
        self
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn grid(&self) -> &Grid1d {
        &self.grid
    }

    pub fn constants(&self) -> &OperatorConstants {
        &self.constants
    }

    pub fn kind_label(&self) -> &'static str {
        match self.kind {
            ModelKind::LinearIntegral { .. } => "linear-integral",
            ModelKind::DiffusionPde { .. } => "diffusion-pde",
            ModelKind::PointwiseNonlinear { .. } => "pointwise-nonlinear",
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self.kind, ModelKind::LinearIntegral { .. })
    }

    /// Compact configuration string used in CSV headers.
    pub fn fingerprint(&self) -> String {
        let extra = match &self.kind {
            ModelKind::LinearIntegral { kernel } => format!("kernel={}", kernel.label()),
            ModelKind::DiffusionPde { a_min, .. } => format!("a_min={a_min}"),
            ModelKind::PointwiseNonlinear { kernel, beta } => {
                format!("kernel={} beta={beta}", kernel.label())
            }
        };
        format!("{} p={} m={} {}", self.kind_label(), self.p, self.m, extra)
    }

    /// Builds a parameter from a function of `s` (values, not coefficients).
    pub fn param_from_fn(&self, f: impl Fn(f64) -> f64) -> ParamVector {
        let scale = self.grid.basis_scale();
        ParamVector {
            coeffs: DVector::from_iterator(self.p, self.grid.nodes().iter().map(|&s| scale * f(s))),
        }
    }

    pub fn param_from_values(&self, values: &[f64]) -> Result<ParamVector> {
        if values.len() != self.p {
            return Err(Error::Contract(format!(
                "expected {} values, got {}",
                self.p,
                values.len()
            )));
        }
        let scale = self.grid.basis_scale();
        Ok(ParamVector { coeffs: DVector::from_iterator(self.p, values.iter().map(|v| scale * v)) })
    }

    /// Grid values of a parameter (coefficients / sqrt(mesh)).
    pub fn values(&self, f: &ParamVector) -> Vec<f64> {
        let scale = 1.0 / self.grid.basis_scale();
        f.coeffs.iter().map(|c| c * scale).collect()
    }

    /// Checks membership in the operator domain, naming the violated
    /// constraint.
    pub fn domain_check(&self, f: &ParamVector) -> Result<()> {
        if f.len() != self.p {
            return Err(Error::Contract(format!(
                "parameter length {} does not match p={}",
                f.len(),
                self.p
            )));
        }
        if !f.is_finite() {
            return Err(Error::Domain("domain violation: non-finite coefficients".into()));
        }
        if let ModelKind::DiffusionPde { a_min, .. } = &self.kind {
            let vals = self.values(f);
            for (i, v) in vals.iter().enumerate() {
                if *v < *a_min {
                    return Err(Error::Domain(format!(
                        "domain violation: a({:.4}) = {v:.6} below floor a_min = {a_min}",
                        self.grid.nodes()[i]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn in_domain(&self, f: &ParamVector) -> bool {
        self.domain_check(f).is_ok()
    }

    /// Projects onto the domain (clamps diffusion coefficients at the floor;
    /// identity for the integral models).
    pub fn project_domain(&self, f: &ParamVector) -> ParamVector {
        match &self.kind {
            ModelKind::DiffusionPde { a_min, .. } => {
                let floor_coeff = a_min * self.grid.basis_scale();
                ParamVector {
                    coeffs: DVector::from_iterator(
                        self.p,
                        f.coeffs.iter().map(|c| c.max(floor_coeff)),
                    ),
                }
            }
            _ => f.clone(),
        }
    }

    /// Evaluates `[A(f)](x_j)` for each design point; returns an `n x m`
    /// matrix of outputs.
    pub fn apply(&self, f: &ParamVector, points: &[f64]) -> Result<DMatrix<f64>> {
        self.domain_check(f)?;
        match &self.kind {
            ModelKind::LinearIntegral { kernel } => {
                Ok(self.integral_apply(kernel, &f.coeffs, points, |c| c))
            }
            ModelKind::PointwiseNonlinear { kernel, beta } => {
                let scale = self.grid.basis_scale();
                let beta = *beta;
                Ok(self.integral_apply(kernel, &f.coeffs, points, move |c| {
                    let v = c / scale;
                    scale * (v + beta * v.tanh())
                }))
            }
            ModelKind::DiffusionPde { load, a_min } => {
                let u = pde_solve(&self.values(f), load, *a_min)?;
                let mut out = DMatrix::zeros(points.len(), 1);
                for (j, &x) in points.iter().enumerate() {
                    out[(j, 0)] = interp_dirichlet(&u, self.grid.mesh(), x);
                }
                Ok(out)
            }
        }
    }

    /// Evaluates the Fréchet derivative action `[A'(f) h](x_j)`; linear in `h`.
    pub fn jac_apply(&self, f: &ParamVector, h: &ParamVector, points: &[f64]) -> Result<DMatrix<f64>> {
        self.domain_check(f)?;
        if h.len() != self.p {
            return Err(Error::Contract(format!(
                "direction length {} does not match p={}",
                h.len(),
                self.p
            )));
        }
        match &self.kind {
            ModelKind::LinearIntegral { kernel } => {
                Ok(self.integral_apply(kernel, &h.coeffs, points, |c| c))
            }
            ModelKind::PointwiseNonlinear { kernel, beta } => {
                let scale = self.grid.basis_scale();
                let fv = f.coeffs.clone();
                let beta = *beta;
                let weighted = DVector::from_fn(self.p, |i, _| {
                    let v = fv[i] / scale;
                    h.coeffs[i] * phi_prime(v, beta)
                });
                Ok(self.integral_apply(kernel, &weighted, points, |c| c))
            }
            ModelKind::DiffusionPde { load, a_min } => {
                let a_vals = self.values(f);
                let u = pde_solve(&a_vals, load, *a_min)?;
                let factor = assemble_tridiag(&a_vals, self.grid.mesh()).factor()?;
                let h_vals = self.values(h);
                let rhs = apply_coefficient_form(&h_vals, &u, self.grid.mesh());
                let v = factor.solve(&rhs).scale(-1.0);
                let mut out = DMatrix::zeros(points.len(), 1);
                for (j, &x) in points.iter().enumerate() {
                    out[(j, 0)] = interp_dirichlet(v.as_slice(), self.grid.mesh(), x);
                }
                Ok(out)
            }
        }
    }

    /// Jacobian rows `B_{x_j}` as `p x m` matrices: column `l` is the H1
    /// representer of the `l`-th output component at `x_j`.
    pub fn jac_rows(&self, f: &ParamVector, points: &[f64]) -> Result<Vec<DMatrix<f64>>> {
        self.domain_check(f)?;
        match &self.kind {
            ModelKind::LinearIntegral { kernel } => Ok(points
                .iter()
                .map(|&x| self.integral_row(kernel, x, None))
                .collect()),
            ModelKind::PointwiseNonlinear { kernel, beta } => {
                let scale = self.grid.basis_scale();
                let phi_p: Vec<f64> =
                    f.coeffs.iter().map(|c| phi_prime(c / scale, *beta)).collect();
                Ok(points
                    .iter()
                    .map(|&x| self.integral_row(kernel, x, Some(&phi_p)))
                    .collect())
            }
            ModelKind::DiffusionPde { load, a_min } => {
                let a_vals = self.values(f);
                let u = pde_solve(&a_vals, load, *a_min)?;
                let factor = assemble_tridiag(&a_vals, self.grid.mesh()).factor()?;
                let mesh = self.grid.mesh();
                let scale = self.grid.basis_scale();
                let mut rows = Vec::with_capacity(points.len());
                for &x in points {
                    let e_x = interp_functional(self.p, mesh, x);
                    let z = factor.solve(&e_x);
                    let g_vals = coefficient_form_adjoint(&u, z.as_slice(), mesh);
                    let col = DVector::from_iterator(
                        self.p,
                        g_vals.iter().map(|g| -g / scale),
                    );
                    rows.push(DMatrix::from_columns(&[col]));
                }
                Ok(rows)
            }
        }
    }

    /// Weighted adjoint sum `Σ_j w_j (S_{x_j} ∘ A'(f))^* r_j` in H1
    /// coordinates.
    pub fn jac_adjoint_apply(
        &self,
        f: &ParamVector,
        points: &[f64],
        weights: &[f64],
        residuals: &DMatrix<f64>,
    ) -> Result<ParamVector> {
        if points.len() != weights.len()
            || residuals.nrows() != points.len()
            || residuals.ncols() != self.m
        {
            return Err(Error::Contract(format!(
                "jac_adjoint_apply length mismatch: {} points, {} weights, residuals {}x{}",
                points.len(),
                weights.len(),
                residuals.nrows(),
                residuals.ncols()
            )));
        }
        let rows = self.jac_rows(f, points)?;
        let mut acc = DVector::zeros(self.p);
        for (j, row) in rows.iter().enumerate() {
            let r_j = residuals.row(j).transpose();
            acc += row * r_j * weights[j];
        }
        Ok(ParamVector { coeffs: acc })
    }

    /// Solves the diffusion boundary-value problem for this model's grid
    /// (diffusion-pde only): `-(a u_s)_s = load`, `u(0)=u(1)=0`.
    pub fn pde_solve(&self, a: &ParamVector, load: &[f64]) -> Result<Vec<f64>> {
        match &self.kind {
            ModelKind::DiffusionPde { a_min, .. } => {
                self.domain_check(a)?;
                pde_solve(&self.values(a), load, *a_min)
            }
            _ => Err(Error::Contract(format!(
                "pde_solve is only defined for diffusion-pde models, not {}",
                self.kind_label()
            ))),
        }
    }

    fn flat_reference(&self) -> ParamVector {
        self.param_from_fn(|_| 1.0)
    }

    /// Sup over a fine point grid of the Frobenius norm of `B_x` at `f`.
    fn sup_jac_row_norm(&self, f: &ParamVector) -> f64 {
        let probes: Vec<f64> = (0..=512).map(|i| i as f64 / 512.0).collect();
        let rows = self.jac_rows(f, &probes).expect("reference parameter in domain");
        rows.iter().map(|r| r.norm()).fold(0.0, f64::max)
    }

    /// Shared integral-model evaluation: `out[j,l] = sqrt(mesh) * Σ_i
    /// cellavg_i(x_j) w_l(s_i) transform(c_i)`.
    fn integral_apply(
        &self,
        kernel: &Kernel,
        coeffs: &DVector<f64>,
        points: &[f64],
        transform: impl Fn(f64) -> f64,
    ) -> DMatrix<f64> {
        let mesh = self.grid.mesh();
        let scale = self.grid.basis_scale();
        let mut out = DMatrix::zeros(points.len(), self.m);
        let transformed: Vec<f64> = coeffs.iter().map(|&c| transform(c)).collect();
        for (j, &x) in points.iter().enumerate() {
            for (i, &s) in self.grid.nodes().iter().enumerate() {
                let avg = kernel.cell_average(x, i as f64 * mesh, (i + 1) as f64 * mesh);
                if avg == 0.0 {
                    continue;
                }
                let base = scale * avg * transformed[i];
                for l in 0..self.m {
                    out[(j, l)] += base * channel_weight(l, s);
                }
            }
        }
        out
    }

    fn integral_row(&self, kernel: &Kernel, x: f64, phi_prime: Option<&[f64]>) -> DMatrix<f64> {
        let mesh = self.grid.mesh();
        let scale = self.grid.basis_scale();
        let mut row = DMatrix::zeros(self.p, self.m);
        for (i, &s) in self.grid.nodes().iter().enumerate() {
            let avg = kernel.cell_average(x, i as f64 * mesh, (i + 1) as f64 * mesh);
            if avg == 0.0 {
                continue;
            }
            let chain = phi_prime.map_or(1.0, |pp| pp[i]);
            for l in 0..self.m {
                row[(i, l)] = scale * avg * chain * channel_weight(l, s);
            }
        }
        row
    }
}

fn check_dims(p: usize, m: usize) -> Result<()> {
    if p < 2 {
        return Err(Error::Contract(format!("H1 dimension p must be >= 2, got {p}")));
    }
    if m < 1 {
        return Err(Error::Contract("output dimension m must be >= 1".into()));
    }
    Ok(())
}

/// Output-channel modulation for m > 1; channel 0 recovers the scalar model.
fn channel_weight(l: usize, s: f64) -> f64 {
    if l == 0 {
        1.0
    } else {
        (l as f64 * std::f64::consts::PI * s).cos()
    }
}

fn phi_prime(v: f64, beta: f64) -> f64 {
    let t = v.tanh();
    1.0 + beta * (1.0 - t * t)
}

/// Solves `-(a u_s)_s = load` with `u(0)=u(1)=0` on the uniform grid of
/// `p = a.len()` interior nodes; second-order finite differences with
/// arithmetic-mean interface coefficients.
pub fn pde_solve(a_values: &[f64], load: &[f64], a_min: f64) -> Result<Vec<f64>> {
    let p = a_values.len();
    if load.len() != p {
        return Err(Error::Contract(format!(
            "load length {} does not match coefficient length {p}",
            load.len()
        )));
    }
    for (i, &a) in a_values.iter().enumerate() {
        if a < a_min {
            return Err(Error::Domain(format!(
                "domain violation: a at node {i} is {a:.6}, below floor a_min = {a_min}"
            )));
        }
    }
    let mesh = 1.0 / (p + 1) as f64;
    let factor = assemble_tridiag(a_values, mesh).factor()?;
    Ok(factor.solve(&DVector::from_row_slice(load)).as_slice().to_vec())
}

/// Symmetric tridiagonal system assembled from a coefficient field.
struct Tridiag {
    diag: Vec<f64>,
    off: Vec<f64>,
}

struct TridiagFactor {
    // LDL^T factors: d = pivots, l = subdiagonal multipliers
    d: Vec<f64>,
    l: Vec<f64>,
}

impl Tridiag {
    fn factor(&self) -> Result<TridiagFactor> {
        let n = self.diag.len();
        let mut d = vec![0.0; n];
        let mut l = vec![0.0; n.saturating_sub(1)];
        d[0] = self.diag[0];
        if !(d[0] > 0.0) {
            return Err(Error::Domain("tridiagonal system is not positive definite".into()));
        }
        for i in 0..n - 1 {
            l[i] = self.off[i] / d[i];
            d[i + 1] = self.diag[i + 1] - l[i] * self.off[i];
            if !(d[i + 1] > 0.0) || !d[i + 1].is_finite() {
                return Err(Error::Domain(format!(
                    "tridiagonal factorization broke down at row {}",
                    i + 1
                )));
            }
        }
        Ok(TridiagFactor { d, l })
    }
}

impl TridiagFactor {
    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let n = self.d.len();
        let mut y = rhs.clone();
        for i in 1..n {
            let c = self.l[i - 1] * y[i - 1];
            y[i] -= c;
        }
        for i in 0..n {
            y[i] /= self.d[i];
        }
        for i in (0..n - 1).rev() {
            let c = self.l[i] * y[i + 1];
            y[i] -= c;
        }
        y
    }
}

/// Interface coefficient above node `i` (arithmetic mean; end interfaces use
/// the adjacent cell value, consistent with the piecewise-constant basis).
fn interface(a: &[f64], i: isize) -> f64 {
    let p = a.len() as isize;
    if i < 0 {
        a[0]
    } else if i >= p - 1 {
        a[(p - 1) as usize]
    } else {
        0.5 * (a[i as usize] + a[(i + 1) as usize])
    }
}

fn assemble_tridiag(a: &[f64], mesh: f64) -> Tridiag {
    let p = a.len();
    let inv_h2 = 1.0 / (mesh * mesh);
    let mut diag = vec![0.0; p];
    let mut off = vec![0.0; p.saturating_sub(1)];
    for i in 0..p {
        let lo = interface(a, i as isize - 1);
        let hi = interface(a, i as isize);
        diag[i] = (lo + hi) * inv_h2;
        if i + 1 < p {
            off[i] = -hi * inv_h2;
        }
    }
    Tridiag { diag, off }
}

/// `M(c) u` where `M(c)` is the tridiagonal assembly with coefficient values
/// `c` (linear in `c`; no positivity requirement).
fn apply_coefficient_form(c: &[f64], u: &[f64], mesh: f64) -> DVector<f64> {
    let p = c.len();
    let inv_h2 = 1.0 / (mesh * mesh);
    DVector::from_fn(p, |i, _| {
        let lo = interface(c, i as isize - 1);
        let hi = interface(c, i as isize);
        let u_lo = if i == 0 { 0.0 } else { u[i - 1] };
        let u_hi = if i + 1 == p { 0.0 } else { u[i + 1] };
        (hi * (u[i] - u_hi) + lo * (u[i] - u_lo)) * inv_h2
    })
}

/// Gradient of `c -> <M(c) u, z>` with respect to the coefficient values:
/// the exact transpose of [`apply_coefficient_form`] in `c`.
fn coefficient_form_adjoint(u: &[f64], z: &[f64], mesh: f64) -> Vec<f64> {
    let p = u.len();
    let inv_h2 = 1.0 / (mesh * mesh);
    let mut grad = vec![0.0; p];
    // interior interfaces k | k+1 carry coefficient (c_k + c_{k+1})/2
    for k in 0..p - 1 {
        let flux = (u[k] - u[k + 1]) * (z[k] - z[k + 1]) * inv_h2;
        grad[k] += 0.5 * flux;
        grad[k + 1] += 0.5 * flux;
    }
    // boundary interfaces use the adjacent cell value
    grad[0] += u[0] * z[0] * inv_h2;
    grad[p - 1] += u[p - 1] * z[p - 1] * inv_h2;
    grad
}

/// Linear interpolation of interior-node values with zero Dirichlet ends.
fn interp_dirichlet(u: &[f64], mesh: f64, x: f64) -> f64 {
    let p = u.len();
    let pos = (x / mesh).clamp(0.0, (p + 1) as f64);
    let k = (pos.floor() as usize).min(p);
    let frac = pos - k as f64;
    let left = if k == 0 { 0.0 } else { u[k - 1] };
    let right = if k >= p { 0.0 } else { u[k] };
    left * (1.0 - frac) + right * frac
}

/// The interpolation functional as a (sparse) vector on interior nodes.
fn interp_functional(p: usize, mesh: f64, x: f64) -> DVector<f64> {
    let mut e = DVector::zeros(p);
    let pos = (x / mesh).clamp(0.0, (p + 1) as f64);
    let k = (pos.floor() as usize).min(p);
    let frac = pos - k as f64;
    if k >= 1 {
        e[k - 1] += 1.0 - frac;
    }
    if k < p {
        e[k] += frac;
    }
    e
}

/// Empirical tangential-cone constant: max over sampled pairs in the d-ball
/// of `||A(f)-A(f~)-A'(f~)(f-f~)|| / ||A(f)-A(f~)||` in the quadrature L2
/// norm. Pairs with near-zero denominator are skipped.
pub fn estimate_tangential_cone(
    model: &ForwardModel,
    f_dagger: &ParamVector,
    radius: f64,
    n_pairs: usize,
    grid: &QuadratureGrid,
    rng_stream: RngStream,
) -> Result<f64> {
    if n_pairs == 0 {
        return Err(Error::Contract("n_pairs must be >= 1".into()));
    }
    model.domain_check(f_dagger)?;
    let mut rng = rng_stream.rng();
    let mut alpha_hat: Option<f64> = None;
    for _ in 0..n_pairs {
        let f = sample_in_ball(model, f_dagger, radius, &mut rng)?;
        let f_tilde = sample_in_ball(model, f_dagger, radius, &mut rng)?;
        let af = model.apply(&f, grid.nodes())?;
        let af_tilde = model.apply(&f_tilde, grid.nodes())?;
        let lin = model.jac_apply(&f_tilde, &f.sub(&f_tilde), grid.nodes())?;
        let mut num_sq = 0.0;
        let mut den_sq = 0.0;
        for (j, &w) in grid.weights().iter().enumerate() {
            for l in 0..model.m() {
                let diff = af[(j, l)] - af_tilde[(j, l)];
                let rem = diff - lin[(j, l)];
                num_sq += w * rem * rem;
                den_sq += w * diff * diff;
            }
        }
        let den = den_sq.sqrt();
        if den < 1e-14 {
            continue;
        }
        let ratio = num_sq.sqrt() / den;
        alpha_hat = Some(alpha_hat.map_or(ratio, |a| a.max(ratio)));
    }
    alpha_hat.ok_or_else(|| {
        Error::DegenerateSampling(format!(
            "all {n_pairs} sampled pairs had near-zero forward difference"
        ))
    })
}

/// Draws a domain-feasible point uniformly-in-radius inside the H1 ball.
pub fn sample_in_ball(
    model: &ForwardModel,
    center: &ParamVector,
    radius: f64,
    rng: &mut impl Rng,
) -> Result<ParamVector> {
    for _ in 0..200 {
        let dir = ParamVector::random_unit(model.p(), rng);
        let rho: f64 = rng.gen_range(0.0..=radius);
        let candidate = center.add_scaled(rho, &dir);
        if model.in_domain(&candidate) {
            return Ok(candidate);
        }
    }
    Err(Error::DegenerateSampling(format!(
        "no domain-feasible sample found in ball of radius {radius}"
    )))
}
