//! The linearised-Laplace engine: Jacobian-feature surrogate models (full
//! Taylor and simplified), GGN curvature, the convex linear-model solver,
//! the evidence objectives over the prior precisions, the alternating
//! (theta*, Lambda*) procedure and the Gaussian predictive posterior.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    cholesky, inverse_diagonal, log_det_psd, norm2, norm_inf, solve_vec, CholeskyFactor,
    DenseMatrix,
};
use crate::model::{forward, jacobian, jvp_exact, jvp_fd, vjp, Architecture, GroupedParams, ParamGroup};
use crate::objectives::{nll, nll_grad, nll_out_hessian, softmax, Dataset, Likelihood};

/// Relative cap for the jitter ladder on curvature factorisations.
fn max_jitter_for(m: &DenseMatrix) -> f64 {
    1e-6 * (1.0 + m.max_abs())
}

fn chol_psd(m: &DenseMatrix) -> Result<CholeskyFactor> {
    cholesky(m, max_jitter_for(m))
}

// ---------------------------------------------------------------------------
// Precisions

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tying {
    /// All groups share one lambda.
    Single,
    /// One independent lambda per parameter group.
    PerGroup,
}

/// Per-group positive precision scalars assembling the diagonal Lambda over a
/// fixed group layout.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionSpec {
    pub tying: Tying,
    pub groups: Vec<ParamGroup>,
    pub lambdas: Vec<f64>,
}

impl PrecisionSpec {
    pub fn isotropic(groups: &[ParamGroup], lambda: f64, tying: Tying) -> PrecisionSpec {
        assert!(lambda > 0.0, "precision must be positive");
        PrecisionSpec { tying, groups: groups.to_vec(), lambdas: vec![lambda; groups.len()] }
    }

    pub fn dim(&self) -> usize {
        self.groups.iter().map(|g| g.len).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambdas.len() != self.groups.len() {
            return Err(Error::Config("one lambda per group required".into()));
        }
        if self.lambdas.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(Error::Config("all precisions must be positive and finite".into()));
        }
        if self.tying == Tying::Single {
            let first = self.lambdas[0];
            if self.lambdas.iter().any(|&l| l != first) {
                return Err(Error::Config("single tying requires one shared lambda".into()));
            }
        }
        Ok(())
    }

    /// Expand to the full diagonal of Lambda.
    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.dim()];
        for (g, &l) in self.groups.iter().zip(self.lambdas.iter()) {
            for v in &mut d[g.range()] {
                *v = l;
            }
        }
        d
    }

    /// 0.5 * sum_g lambda_g ||theta_g||^2 over a flat value vector.
    pub fn penalty_values(&self, values: &[f64]) -> f64 {
        assert_eq!(values.len(), self.dim());
        let mut acc = 0.0;
        for (g, &l) in self.groups.iter().zip(self.lambdas.iter()) {
            acc += l * values[g.range()].iter().map(|v| v * v).sum::<f64>();
        }
        0.5 * acc
    }

    pub fn penalty(&self, params: &GroupedParams) -> f64 {
        self.penalty_values(&params.values)
    }

    /// Gradient of the penalty: Lambda * theta.
    pub fn penalty_grad_values(&self, values: &[f64]) -> Vec<f64> {
        let d = self.diagonal();
        values.iter().zip(d.iter()).map(|(v, l)| v * l).collect()
    }

    pub fn penalty_grad(&self, params: &GroupedParams) -> Vec<f64> {
        self.penalty_grad_values(&params.values)
    }

    pub fn with_lambdas(&self, lambdas: Vec<f64>) -> PrecisionSpec {
        assert_eq!(lambdas.len(), self.groups.len());
        PrecisionSpec { tying: self.tying, groups: self.groups.clone(), lambdas }
    }

    /// log det Lambda = sum_g d_g ln lambda_g.
    pub fn log_det(&self) -> f64 {
        self.groups
            .iter()
            .zip(self.lambdas.iter())
            .map(|(g, &l)| g.len as f64 * l.ln())
            .sum()
    }
}

// ---------------------------------------------------------------------------
// Linearisation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// First-order Taylor model f(t,x) + J(x)(theta - t).
    FullTaylor,
    /// Purely linear model J(x) theta; exact for fully normalised
    /// dense-final-layer configurations.
    Simple,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    ExactJvp,
    FiniteDifference,
}

/// A frozen linearisation point: the feature map J, the cached network
/// predictions over the training set, and the active (possibly
/// bias-excluded) coordinate subspace.
#[derive(Debug, Clone)]
pub struct Linearisation {
    pub arch: Architecture,
    pub theta_tilde: GroupedParams,
    pub variant: Variant,
    pub include_biases: bool,
    /// Full-theta indices of the active columns, ascending.
    pub active_indices: Vec<usize>,
    /// Group layout remapped to the active coordinates.
    pub active_groups: Vec<ParamGroup>,
    /// f(theta_tilde, x_i) over the training set.
    pub f_cache: Vec<Vec<f64>>,
    /// J(x_i) restricted to active columns.
    pub jac_cache: Vec<DenseMatrix>,
}

fn restrict_columns(j: &DenseMatrix, indices: &[usize]) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(j.rows, indices.len());
    for r in 0..j.rows {
        for (c, &idx) in indices.iter().enumerate() {
            out.set(r, c, j.get(r, idx));
        }
    }
    out
}

impl Linearisation {
    pub fn new(
        arch: &Architecture,
        theta_tilde: &GroupedParams,
        variant: Variant,
        include_biases: bool,
        data: &Dataset,
    ) -> Result<Linearisation> {
        arch.validate()?;
        theta_tilde.check_partition()?;
        let mut active_indices = Vec::new();
        let mut active_groups = Vec::new();
        let mut cursor = 0usize;
        for g in &theta_tilde.groups {
            if !include_biases && g.bias {
                continue;
            }
            active_indices.extend(g.range());
            active_groups.push(ParamGroup {
                name: g.name.clone(),
                start: cursor,
                len: g.len,
                normalised: g.normalised,
                bias: g.bias,
            });
            cursor += g.len;
        }
        let mut f_cache = Vec::with_capacity(data.len());
        let mut jac_cache = Vec::with_capacity(data.len());
        for x in &data.inputs {
            f_cache.push(forward(arch, theta_tilde, x)?);
            let j = jacobian(arch, theta_tilde, x)?;
            jac_cache.push(restrict_columns(&j, &active_indices));
        }
        Ok(Linearisation {
            arch: arch.clone(),
            theta_tilde: theta_tilde.clone(),
            variant,
            include_biases,
            active_indices,
            active_groups,
            f_cache,
            jac_cache,
        })
    }

    pub fn active_dim(&self) -> usize {
        self.active_indices.len()
    }

    /// theta_tilde restricted to active coordinates.
    pub fn theta_tilde_active(&self) -> Vec<f64> {
        self.active_indices.iter().map(|&i| self.theta_tilde.values[i]).collect()
    }

    /// Embed an active-coordinate vector into the full parameter space.
    pub fn embed(&self, active: &[f64]) -> Vec<f64> {
        let mut full = vec![0.0; self.theta_tilde.dim()];
        for (&idx, &v) in self.active_indices.iter().zip(active.iter()) {
            full[idx] = v;
        }
        full
    }

    /// Zero initial weights for the simple variant, theta_tilde for the full
    /// variant.
    pub fn default_init(&self) -> Vec<f64> {
        match self.variant {
            Variant::Simple => vec![0.0; self.active_dim()],
            Variant::FullTaylor => self.theta_tilde_active(),
        }
    }

    /// The direction J is applied to: theta for the simple variant,
    /// theta - theta_tilde for the full Taylor variant.
    fn jvp_direction(&self, theta: &[f64]) -> Vec<f64> {
        match self.variant {
            Variant::Simple => theta.to_vec(),
            Variant::FullTaylor => self
                .theta_tilde_active()
                .iter()
                .zip(theta.iter())
                .map(|(t, v)| v - t)
                .collect(),
        }
    }

    fn offset(&self, f_tilde: &[f64]) -> Vec<f64> {
        match self.variant {
            Variant::Simple => vec![0.0; f_tilde.len()],
            Variant::FullTaylor => f_tilde.to_vec(),
        }
    }

    /// Surrogate outputs at training example `i` using the cached Jacobian.
    pub fn predict_train(&self, i: usize, theta: &[f64]) -> Vec<f64> {
        let dir = self.jvp_direction(theta);
        let mut out = self.offset(&self.f_cache[i]);
        let jv = self.jac_cache[i].matvec(&dir);
        for (o, v) in out.iter_mut().zip(jv.iter()) {
            *o += v;
        }
        out
    }

    /// Surrogate outputs at an arbitrary input, via an exact JVP.
    pub fn predict(&self, theta: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        let f_tilde = forward(&self.arch, &self.theta_tilde, x)?;
        let dir_full = self.embed(&self.jvp_direction(theta));
        let mut out = self.offset(&f_tilde);
        if dir_full.iter().any(|&v| v != 0.0) {
            let jv = jvp_exact(&self.arch, &self.theta_tilde, x, &dir_full)?;
            for (o, v) in out.iter_mut().zip(jv.iter()) {
                *o += v;
            }
        }
        Ok(out)
    }

    /// J(x) restricted to the active columns.
    pub fn features(&self, x: &[f64]) -> Result<DenseMatrix> {
        let j = jacobian(&self.arch, &self.theta_tilde, x)?;
        Ok(restrict_columns(&j, &self.active_indices))
    }
}

/// Surrogate prediction h(theta, x); `theta` lives in active coordinates.
pub fn linear_predict(lin: &Linearisation, theta: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    if theta.len() != lin.active_dim() {
        return Err(Error::DimensionMismatch { expected: lin.active_dim(), got: theta.len() });
    }
    lin.predict(theta, x)
}

// ---------------------------------------------------------------------------
// Curvature

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalPoint {
    AtLinearisation,
    AtStar,
}

/// Positive-semidefinite GGN matrix with provenance metadata.
#[derive(Debug, Clone)]
pub struct Curvature {
    pub h: DenseMatrix,
    pub eval_point: EvalPoint,
    pub include_biases: bool,
}

fn ggn_from_outputs(
    lin: &Linearisation,
    lik: &Likelihood,
    outputs: &[Vec<f64>],
    eval_point: EvalPoint,
) -> Curvature {
    let d = lin.active_dim();
    let mut h = DenseMatrix::zeros(d, d);
    for (j, yhat) in lin.jac_cache.iter().zip(outputs.iter()) {
        let hl = nll_out_hessian(lik, yhat);
        // J^T Hl J, accumulated
        let hlj = hl.matmul(j);
        let jt = j.transpose();
        let contrib = jt.matmul(&hlj);
        h.add_scaled(&contrib, 1.0);
    }
    // symmetrise roundoff
    for i in 0..d {
        for jc in (i + 1)..d {
            let m = 0.5 * (h.get(i, jc) + h.get(jc, i));
            h.set(i, jc, m);
            h.set(jc, i, m);
        }
    }
    Curvature { h, eval_point, include_biases: lin.include_biases }
}

/// GGN curvature H = sum_i J_i^T d2l_i J_i with the output Hessian evaluated
/// at the network predictions f(theta_tilde, .).
pub fn ggn(lin: &Linearisation, lik: &Likelihood, data: &Dataset) -> Result<Curvature> {
    if data.len() != lin.jac_cache.len() {
        return Err(Error::DimensionMismatch { expected: lin.jac_cache.len(), got: data.len() });
    }
    Ok(ggn_from_outputs(lin, lik, &lin.f_cache, EvalPoint::AtLinearisation))
}

/// GGN with the output Hessian re-evaluated at the surrogate outputs
/// h(theta, .). For Gaussian likelihoods this coincides with `ggn`.
pub fn ggn_at(
    lin: &Linearisation,
    lik: &Likelihood,
    data: &Dataset,
    theta: &[f64],
) -> Result<Curvature> {
    if data.len() != lin.jac_cache.len() {
        return Err(Error::DimensionMismatch { expected: lin.jac_cache.len(), got: data.len() });
    }
    let outputs: Vec<Vec<f64>> =
        (0..data.len()).map(|i| lin.predict_train(i, theta)).collect();
    Ok(ggn_from_outputs(lin, lik, &outputs, EvalPoint::AtStar))
}

// ---------------------------------------------------------------------------
// Linear-model loss gradient (Algorithm-1 path)

/// Gradient of L(h(theta, .)) + 0.5||theta||^2_Lambda in active coordinates.
///
/// The surrogate outputs are evaluated through a JVP (exact forward-mode or
/// two-sided finite differences) and the loss gradient is pulled back with
/// reverse-mode VJPs; the explicit Jacobian is never used here.
pub fn linear_loss_grad(
    lin: &Linearisation,
    theta: &[f64],
    lik: &Likelihood,
    data: &Dataset,
    prec: &PrecisionSpec,
    mode: GradMode,
) -> Result<Vec<f64>> {
    if theta.len() != lin.active_dim() {
        return Err(Error::DimensionMismatch { expected: lin.active_dim(), got: theta.len() });
    }
    prec.validate()?;
    let mut grad = prec.penalty_grad_values(theta);
    let dir_full = lin.embed(&lin.jvp_direction(theta));
    let dir_is_zero = norm_inf(&dir_full) == 0.0;
    for (i, (x, y)) in data.inputs.iter().zip(data.targets.iter()).enumerate() {
        let mut h = lin.offset(&lin.f_cache[i]);
        if !dir_is_zero {
            let jv = match mode {
                GradMode::ExactJvp => jvp_exact(&lin.arch, &lin.theta_tilde, x, &dir_full)?,
                GradMode::FiniteDifference => {
                    jvp_fd(&lin.arch, &lin.theta_tilde, x, &dir_full, f64::EPSILON)?
                }
            };
            for (o, v) in h.iter_mut().zip(jv.iter()) {
                *o += v;
            }
        }
        let g = nll_grad(lik, &h, y)?;
        let gfull = vjp(&lin.arch, &lin.theta_tilde, x, &g)?;
        for (dst, &idx) in grad.iter_mut().zip(lin.active_indices.iter()) {
            *dst += gfull[idx];
        }
    }
    Ok(grad)
}

/// The assembled linear-model loss, for line searches and oracles.
pub fn linear_loss(
    lin: &Linearisation,
    theta: &[f64],
    lik: &Likelihood,
    data: &Dataset,
    prec: &PrecisionSpec,
) -> Result<f64> {
    let mut acc = prec.penalty_values(theta);
    for (i, y) in data.targets.iter().enumerate() {
        let h = lin.predict_train(i, theta);
        acc += nll(lik, &h, y)?;
    }
    Ok(acc)
}

// ---------------------------------------------------------------------------
// theta* solver

#[derive(Debug, Clone)]
pub struct ThetaSolve {
    pub theta: Vec<f64>,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

const NEWTON_TOL: f64 = 1e-6;
const NEWTON_CAP: usize = 500;

/// Minimise the convex linear-model loss. Gaussian likelihoods are solved in
/// closed form; categorical ones by damped Newton with Algorithm-1 gradients.
pub fn solve_theta_star(
    lin: &Linearisation,
    lik: &Likelihood,
    data: &Dataset,
    prec: &PrecisionSpec,
) -> Result<ThetaSolve> {
    prec.validate()?;
    let d = lin.active_dim();
    if prec.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: prec.dim() });
    }
    match lik {
        Likelihood::Gaussian { sigma2 } => {
            // theta* = (J^T J / s2 + Lambda)^{-1} J^T r / s2 where the prior
            // acts on theta itself; for the full Taylor variant the effective
            // target is y - f(t, x) + J t so the shift is folded in here.
            let t_active = lin.theta_tilde_active();
            let mut a = DenseMatrix::zeros(d, d);
            let mut b = vec![0.0; d];
            for (i, y) in data.targets.iter().enumerate() {
                let tgt = match y {
                    crate::objectives::Target::Regression(t) => t,
                    _ => return Err(Error::Config("gaussian solve requires regression targets".into())),
                };
                let j = &lin.jac_cache[i];
                let jt = j.transpose();
                a.add_scaled(&jt.matmul(j), 1.0 / sigma2);
                let resid: Vec<f64> = match lin.variant {
                    Variant::Simple => tgt.to_vec(),
                    Variant::FullTaylor => {
                        let jt_v = j.matvec(&t_active);
                        tgt.iter()
                            .zip(lin.f_cache[i].iter())
                            .zip(jt_v.iter())
                            .map(|((y, f), jv)| y - f + jv)
                            .collect()
                    }
                };
                let jtr = jt.matvec(&resid);
                for (dst, v) in b.iter_mut().zip(jtr.iter()) {
                    *dst += v / sigma2;
                }
            }
            let a = a.add_diag(&prec.diagonal());
            let c = chol_psd(&a)?;
            let theta = solve_vec(&c, &b)?;
            let grad = linear_loss_grad(lin, &theta, lik, data, prec, GradMode::ExactJvp)?;
            Ok(ThetaSolve { grad_norm: norm_inf(&grad), theta, iterations: 0, converged: true })
        }
        Likelihood::Categorical => newton_solve(lin, lik, data, prec),
    }
}

/// Damped Newton on the convex linear-model loss, valid for any likelihood.
/// The Gaussian path in `solve_theta_star` prefers the closed form; this
/// solver doubles as its cross-check.
pub fn newton_solve(
    lin: &Linearisation,
    lik: &Likelihood,
    data: &Dataset,
    prec: &PrecisionSpec,
) -> Result<ThetaSolve> {
    prec.validate()?;
    let mut theta = lin.default_init();
    let mut best_gn = f64::INFINITY;
    for it in 0..NEWTON_CAP {
        let grad = linear_loss_grad(lin, &theta, lik, data, prec, GradMode::ExactJvp)?;
        let gn = norm_inf(&grad);
        best_gn = best_gn.min(gn);
        if gn <= NEWTON_TOL {
            return Ok(ThetaSolve { theta, grad_norm: gn, iterations: it, converged: true });
        }
        let curv = ggn_at(lin, lik, data, &theta)?;
        let hess = curv.h.add_diag(&prec.diagonal());
        let c = chol_psd(&hess)?;
        let step = solve_vec(&c, &grad)?;
        // damped: backtrack on the assembled loss
        let f0 = linear_loss(lin, &theta, lik, data, prec)?;
        let mut alpha = 1.0;
        loop {
            let cand: Vec<f64> =
                theta.iter().zip(step.iter()).map(|(t, s)| t - alpha * s).collect();
            let f1 = linear_loss(lin, &cand, lik, data, prec)?;
            if f1 <= f0 || alpha < 1e-8 {
                theta = cand;
                break;
            }
            alpha *= 0.5;
        }
    }
    Err(Error::NotConverged { iters: NEWTON_CAP, residual: best_gn })
}

// ---------------------------------------------------------------------------
// Evidence

const LAMBDA_MIN: f64 = 1e-10;
const LAMBDA_MAX: f64 = 1e10;
const DEGENERATE_NORM: f64 = 1e-20;

/// The Lambda-dependent part of the log evidence:
/// -0.5 [ ||theta||^2_Lambda + log det(H + Lambda) - log det Lambda ].
pub fn evidence(theta: &[f64], prec: &PrecisionSpec, curv: &Curvature) -> Result<f64> {
    prec.validate()?;
    let hl = curv.h.add_diag(&prec.diagonal());
    let c = chol_psd(&hl)?;
    let quad = 2.0 * prec.penalty_values(theta);
    Ok(-0.5 * (quad + log_det_psd(&c) - prec.log_det()))
}

/// Per-group gradient of the evidence with respect to log lambda_g:
/// lambda_g * dM/dlambda_g with
/// dM/dlambda_g = -0.5 [ ||theta_g||^2 + tr_g((H+Lambda)^{-1}) - d_g/lambda_g ].
pub fn evidence_grad_loglambda(
    theta: &[f64],
    prec: &PrecisionSpec,
    curv: &Curvature,
) -> Result<Vec<f64>> {
    prec.validate()?;
    let hl = curv.h.add_diag(&prec.diagonal());
    let c = chol_psd(&hl)?;
    let inv_diag = inverse_diagonal(&c);
    let mut out = Vec::with_capacity(prec.groups.len());
    for (g, &l) in prec.groups.iter().zip(prec.lambdas.iter()) {
        let nsq: f64 = theta[g.range()].iter().map(|v| v * v).sum();
        let tr: f64 = inv_diag[g.range()].iter().sum();
        let dg = g.len as f64;
        out.push(-0.5 * l * (nsq + tr - dg / l));
    }
    Ok(out)
}

/// Per-group effective dimensions gamma_g = d_g - lambda_g tr_g((H+Lambda)^-1).
pub fn effective_dimensions(prec: &PrecisionSpec, curv: &Curvature) -> Result<Vec<f64>> {
    let hl = curv.h.add_diag(&prec.diagonal());
    let c = chol_psd(&hl)?;
    let inv_diag = inverse_diagonal(&c);
    Ok(prec
        .groups
        .iter()
        .zip(prec.lambdas.iter())
        .map(|(g, &l)| g.len as f64 - l * inv_diag[g.range()].iter().sum::<f64>())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvidenceMethod {
    GradientAscent,
    MackayFixedPoint,
}

/// Evidence-maximisation bookkeeping for reports and the metrics schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvidenceReport {
    pub evidence: f64,
    pub lambdas: Vec<(String, f64)>,
    pub effective_dims: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub jitter: f64,
    pub degenerate_groups: Vec<String>,
    pub outer_rounds: usize,
}

fn clamp_lambda(l: f64) -> f64 {
    l.clamp(LAMBDA_MIN, LAMBDA_MAX)
}

/// In single-lambda mode the update treats all groups as one; per-group mode
/// updates each independently.
fn merged_view(prec: &PrecisionSpec, theta: &[f64], inv_diag: &[f64]) -> Vec<(f64, f64, f64)> {
    // (||theta_g||^2, tr_g, d_g) per optimisation variable
    match prec.tying {
        Tying::Single => {
            let nsq: f64 = theta.iter().map(|v| v * v).sum();
            let tr: f64 = inv_diag.iter().sum();
            vec![(nsq, tr, prec.dim() as f64)]
        }
        Tying::PerGroup => prec
            .groups
            .iter()
            .map(|g| {
                let nsq: f64 = theta[g.range()].iter().map(|v| v * v).sum();
                let tr: f64 = inv_diag[g.range()].iter().sum();
                (nsq, tr, g.len as f64)
            })
            .collect(),
    }
}

fn lambdas_from_vars(prec: &PrecisionSpec, vars: &[f64]) -> Vec<f64> {
    match prec.tying {
        Tying::Single => vec![vars[0]; prec.groups.len()],
        Tying::PerGroup => vars.to_vec(),
    }
}

fn vars_from_lambdas(prec: &PrecisionSpec) -> Vec<f64> {
    match prec.tying {
        Tying::Single => vec![prec.lambdas[0]],
        Tying::PerGroup => prec.lambdas.clone(),
    }
}

/// Maximise the concave evidence over the precisions, either by ascent in
/// log lambda or by the classical effective-dimension fixed point.
pub fn maximise_evidence(
    theta: &[f64],
    curv: &Curvature,
    init: &PrecisionSpec,
    method: EvidenceMethod,
) -> Result<(PrecisionSpec, EvidenceReport)> {
    maximise_evidence_tol(theta, curv, init, method, 1e-8)
}

/// As `maximise_evidence` with an explicit fixed-point tolerance. The EM
/// alternation loosens the inner solve while the joint iterate is far from
/// its fixed point; the public entry point always uses 1e-8.
fn maximise_evidence_tol(
    theta: &[f64],
    curv: &Curvature,
    init: &PrecisionSpec,
    method: EvidenceMethod,
    fp_tol: f64,
) -> Result<(PrecisionSpec, EvidenceReport)> {
    init.validate()?;
    let mut prec = init.clone();
    let mut degenerate: Vec<String> = Vec::new();
    let mut iterations = 0usize;
    let mut converged = false;

    match method {
        EvidenceMethod::MackayFixedPoint => {
            // the plain fixed point is linearly convergent with a rate that
            // can be very close to one; Steffensen extrapolation in log
            // space, applied after every two plain updates, removes the
            // dominant geometric mode while keeping the same fixed point
            let mut log_hist: Vec<Vec<f64>> = Vec::new();
            let mut prev_delta: Vec<f64> = Vec::new();
            let mut omegas: Vec<f64> = Vec::new();
            for it in 0..2000 {
                iterations = it + 1;
                let hl = curv.h.add_diag(&prec.diagonal());
                let c = chol_psd(&hl)?;
                let inv_diag = inverse_diagonal(&c);
                let stats = merged_view(&prec, theta, &inv_diag);
                let old_vars = vars_from_lambdas(&prec);
                let mut new_vars = Vec::with_capacity(old_vars.len());
                for (v, (nsq, tr, dg)) in old_vars.iter().zip(stats.iter()) {
                    let gamma = dg - v * tr;
                    if *nsq <= DEGENERATE_NORM {
                        new_vars.push(LAMBDA_MAX);
                    } else {
                        new_vars.push(clamp_lambda(gamma.max(0.0) / nsq));
                    }
                }
                let rel_change = old_vars
                    .iter()
                    .zip(new_vars.iter())
                    .map(|(o, n)| (o - n).abs() / o.abs().max(1e-300))
                    .fold(0.0f64, f64::max);
                if std::env::var("LLAP_DEBUG_MACKAY").is_ok() {
                    eprintln!("  mackay it {it} rel {rel_change:.3e} vars {:?}", new_vars.iter().map(|v| format!("{v:.3e}")).collect::<Vec<_>>());
                }
                if rel_change <= fp_tol {
                    prec = prec.with_lambdas(lambdas_from_vars(&prec, &new_vars));
                    converged = true;
                    break;
                }
                let old_log: Vec<f64> = old_vars.iter().map(|v| v.ln()).collect();
                let mut new_log: Vec<f64> = new_vars.iter().map(|v| v.ln()).collect();
                // period-2 cycles show up as sign-flipping log deltas;
                // adaptive per-coordinate relaxation shrinks on a flip and
                // recovers on sustained progress, without moving the fixed
                // point
                let delta: Vec<f64> =
                    new_log.iter().zip(old_log.iter()).map(|(n, o)| n - o).collect();
                if omegas.len() != delta.len() {
                    omegas = vec![1.0; delta.len()];
                }
                if prev_delta.len() == delta.len() {
                    for i in 0..delta.len() {
                        if prev_delta[i] * delta[i] < 0.0 {
                            omegas[i] = (0.5 * omegas[i]).max(0.05);
                        } else {
                            omegas[i] = (1.3 * omegas[i]).min(1.0);
                        }
                    }
                }
                let damped = omegas.iter().any(|&w| w < 1.0);
                for i in 0..delta.len() {
                    new_log[i] = old_log[i] + omegas[i] * delta[i];
                }
                prev_delta = delta;
                if damped {
                    log_hist.clear();
                }
                log_hist.push(old_log.clone());
                if !damped && log_hist.len() == 2 {
                    // per-coordinate Aitken step from the last two plain
                    // deltas; skipped where the ratio is not a contraction
                    let (l0, l1) = (&log_hist[0], &log_hist[1]);
                    for i in 0..new_log.len() {
                        let d0 = l1[i] - l0[i];
                        let d1 = new_log[i] - l1[i];
                        let r = d1 / d0;
                        if r.is_finite() && r > 0.0 && r < 0.995 {
                            new_log[i] += d1 * r / (1.0 - r);
                        }
                    }
                    log_hist.clear();
                }
                // at most two decades per applied step: an extrapolation
                // overshoot that lands on the clamp would read as a
                // spurious fixed point
                let max_step = f64::ln(100.0);
                let acc_vars: Vec<f64> = new_log
                    .iter()
                    .zip(old_log.iter())
                    .map(|(n, o)| clamp_lambda((o + (n - o).clamp(-max_step, max_step)).exp()))
                    .collect();
                prec = prec.with_lambdas(lambdas_from_vars(&prec, &acc_vars));
            }
        }
        EvidenceMethod::GradientAscent => {
            let mut vars = vars_from_lambdas(&prec);
            let mut log_vars: Vec<f64> = vars.iter().map(|v| v.ln()).collect();
            let mut ev = evidence(theta, &prec, curv)?;
            for it in 0..2000 {
                iterations = it + 1;
                let grads = evidence_grad_loglambda(theta, &prec, curv)?;
                // collapse to optimisation variables
                let g: Vec<f64> = match prec.tying {
                    Tying::Single => vec![grads.iter().sum()],
                    Tying::PerGroup => grads,
                };
                if norm_inf(&g) <= 1e-6 {
                    converged = true;
                    break;
                }
                let mut step = 0.1;
                loop {
                    let cand_log: Vec<f64> =
                        log_vars.iter().zip(g.iter()).map(|(l, gr)| l + step * gr).collect();
                    let cand_vars: Vec<f64> =
                        cand_log.iter().map(|l| clamp_lambda(l.exp())).collect();
                    let cand = prec.with_lambdas(lambdas_from_vars(&prec, &cand_vars));
                    let cand_ev = evidence(theta, &cand, curv)?;
                    if cand_ev >= ev || step < 1e-12 {
                        log_vars = cand_vars.iter().map(|v| v.ln()).collect();
                        vars = cand_vars;
                        prec = cand;
                        ev = cand_ev;
                        break;
                    }
                    step *= 0.5;
                }
            }
            let _ = vars;
        }
    }

    // flag degenerate groups pinned at the upper clamp
    for (g, &l) in prec.groups.iter().zip(prec.lambdas.iter()) {
        let nsq: f64 = theta[g.range()].iter().map(|v| v * v).sum();
        if nsq <= DEGENERATE_NORM && l >= LAMBDA_MAX {
            degenerate.push(g.name.clone());
        }
    }

    let hl = curv.h.add_diag(&prec.diagonal());
    let c = chol_psd(&hl)?;
    let ev = -0.5 * (2.0 * prec.penalty_values(theta) + log_det_psd(&c) - prec.log_det());
    let report = EvidenceReport {
        evidence: ev,
        lambdas: prec
            .groups
            .iter()
            .zip(prec.lambdas.iter())
            .map(|(g, &l)| (g.name.clone(), l))
            .collect(),
        effective_dims: effective_dimensions(&prec, curv)?,
        iterations,
        converged,
        jitter: c.jitter,
        degenerate_groups: degenerate,
        outer_rounds: 0,
    };
    Ok((prec, report))
}

/// Alternate the convex weight solve and concave precision maximisation
/// until the joint iterate settles. H stays fixed (evaluated at the
/// linearisation point) unless the caller refreshes it.
pub fn em_alternate(
    lin: &Linearisation,
    lik: &Likelihood,
    data: &Dataset,
    curv: &Curvature,
    init: &PrecisionSpec,
) -> Result<(Vec<f64>, PrecisionSpec, EvidenceReport)> {
    init.validate()?;
    let mut prec = init.clone();
    let mut theta = lin.default_init();
    let mut last_report: Option<EvidenceReport> = None;
    // rounds where Lambda actually moved; a fixed-point init reports zero
    let mut moved_rounds = 0usize;
    // inexact inner solves: while log-lambda still moves a lot between
    // rounds, a loose fixed-point tolerance suffices; the tolerance
    // tightens to 1e-8 as the joint iterate settles, so the returned pair
    // satisfies the full-precision stationarity conditions
    let mut fp_tol = 1e-2;
    for _ in 0..100 {
        let solve = solve_theta_star(lin, lik, data, &prec)?;
        let new_theta = solve.theta;
        let (new_prec, report) =
            maximise_evidence_tol(&new_theta, curv, &prec, EvidenceMethod::MackayFixedPoint, fp_tol)?;
        let dt = theta
            .iter()
            .zip(new_theta.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max)
            / (1.0 + norm2(&new_theta));
        let dl = prec
            .lambdas
            .iter()
            .zip(new_prec.lambdas.iter())
            .map(|(a, b)| (a.ln() - b.ln()).abs())
            .fold(0.0f64, f64::max);
        if dl > 1e-6 {
            moved_rounds += 1;
        }
        theta = new_theta;
        prec = new_prec;
        last_report = Some(report);
        // convergence only counts when the inner solve was at full precision
        if dt <= 1e-6 && dl <= 1e-6 && fp_tol <= 1e-8 {
            break;
        }
        fp_tol = (0.01 * dl).clamp(1e-8, 1e-2);
    }
    let mut report = last_report.expect("at least one round runs");
    report.outer_rounds = moved_rounds;
    Ok((theta, prec, report))
}

// ---------------------------------------------------------------------------
// Predictive posterior

/// Gaussian predictive: mean is the network forward pass, covariance is
/// J(x) (H + Lambda)^{-1} J(x)^T.
#[derive(Debug, Clone)]
pub struct PredictivePosterior {
    pub mean: Vec<f64>,
    pub covariance: DenseMatrix,
    pub jitter: f64,
}

impl PredictivePosterior {
    pub fn std_devs(&self) -> Vec<f64> {
        (0..self.mean.len()).map(|i| self.covariance.get(i, i).max(0.0).sqrt()).collect()
    }
}

/// Factorisation of H + Lambda, reusable across test points.
pub struct PosteriorFactor {
    chol: CholeskyFactor,
}

impl PosteriorFactor {
    pub fn jitter(&self) -> f64 {
        self.chol.jitter
    }
}

pub fn posterior_factor(curv: &Curvature, prec: &PrecisionSpec) -> Result<PosteriorFactor> {
    prec.validate()?;
    let hl = curv.h.add_diag(&prec.diagonal());
    Ok(PosteriorFactor { chol: chol_psd(&hl)? })
}

pub fn predictive(
    lin: &Linearisation,
    curv: &Curvature,
    prec: &PrecisionSpec,
    x: &[f64],
) -> Result<PredictivePosterior> {
    let factor = posterior_factor(curv, prec)?;
    predictive_with(lin, &factor, x)
}

pub fn predictive_with(
    lin: &Linearisation,
    factor: &PosteriorFactor,
    x: &[f64],
) -> Result<PredictivePosterior> {
    let mean = forward(&lin.arch, &lin.theta_tilde, x)?;
    let j = lin.features(x)?;
    let c = &factor.chol;
    let jt = j.transpose();
    let sol = crate::linalg::solve(c, &jt)?;
    let cov = j.matmul(&sol);
    // symmetrise
    let mut cov = cov;
    for i in 0..cov.rows {
        for k in (i + 1)..cov.cols {
            let m = 0.5 * (cov.get(i, k) + cov.get(k, i));
            cov.set(i, k, m);
            cov.set(k, i, m);
        }
    }
    Ok(PredictivePosterior { mean, covariance: cov, jitter: c.jitter })
}

/// Test negative log-likelihood under the predictive posterior. Gaussian
/// outputs are handled in closed form; categorical ones by seeded Monte
/// Carlo through the softmax.
pub fn predictive_nll(
    post: &PredictivePosterior,
    lik: &Likelihood,
    y: &crate::objectives::Target,
    mc_samples: usize,
    seed: u64,
) -> Result<f64> {
    match (lik, y) {
        (Likelihood::Gaussian { sigma2 }, crate::objectives::Target::Regression(t)) => {
            if post.mean.len() != 1 || t.len() != 1 {
                return Err(Error::Config("gaussian predictive NLL requires scalar outputs".into()));
            }
            let var = post.covariance.get(0, 0).max(0.0) + sigma2;
            let r = post.mean[0] - t[0];
            Ok(0.5 * (r * r / var + (2.0 * std::f64::consts::PI * var).ln()))
        }
        (Likelihood::Categorical, crate::objectives::Target::Class(cidx)) => {
            let k = post.mean.len();
            if *cidx >= k {
                return Err(Error::InvalidTarget { label: *cidx, classes: k });
            }
            if post.covariance.max_abs() == 0.0 {
                let p = softmax(&post.mean);
                return Ok(-p[*cidx].ln());
            }
            let c = chol_psd(&post.covariance)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut mean_prob = vec![0.0; k];
            let mut z = vec![0.0; k];
            for _ in 0..mc_samples.max(1) {
                for v in z.iter_mut() {
                    *v = standard_normal(&mut rng);
                }
                let mut logits = post.mean.clone();
                for i in 0..k {
                    let mut acc = 0.0;
                    for jc in 0..=i {
                        acc += c.lower.get(i, jc) * z[jc];
                    }
                    logits[i] += acc;
                }
                let p = softmax(&logits);
                for (m, v) in mean_prob.iter_mut().zip(p.iter()) {
                    *m += v;
                }
            }
            let n = mc_samples.max(1) as f64;
            Ok(-(mean_prob[*cidx] / n).ln())
        }
        _ => Err(Error::Config("likelihood and target kinds disagree".into())),
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller on two uniforms
    use rand::Rng;
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
