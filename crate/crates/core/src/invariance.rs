//! Numeric certificates for the scale-invariance theory: how Jacobian and
//! curvature blocks transform when the normalised weights are rescaled, how
//! the jointly optimised (theta*, Lambda*) pair maps between scales, the
//! resulting invariance of the predictive error bars under per-group
//! precisions, and the Wasserstein-2 comparison of predictive posteriors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::laplace::{
    em_alternate, ggn, predictive, Linearisation, PrecisionSpec, PredictivePosterior, Tying,
    Variant,
};
use crate::linalg::DenseMatrix;
use crate::model::{
    directional_derivative_penultimate, jvp_exact, penultimate, scale_group, Architecture,
    GroupedParams,
};
use crate::objectives::{Dataset, Likelihood};

/// One named identity with its observed worst-case deviation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub name: String,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl IdentityCheck {
    fn new(name: &str, max_deviation: f64, tolerance: f64) -> IdentityCheck {
        IdentityCheck {
            name: name.to_string(),
            max_deviation,
            tolerance,
            pass: max_deviation <= tolerance,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingCheckReport {
    pub k_values: Vec<f64>,
    pub checks: Vec<IdentityCheck>,
}

impl ScalingCheckReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn max_deviation(&self) -> f64 {
        self.checks.iter().map(|c| c.max_deviation).fold(0.0, f64::max)
    }
}

/// Relative deviation of `got` from `want`, normalised by the larger block
/// magnitude (plus one, so zero blocks compare absolutely).
fn block_deviation(want: &DenseMatrix, got: &DenseMatrix) -> f64 {
    let scale = 1.0 + want.max_abs().max(got.max_abs());
    let mut dev = 0.0f64;
    for i in 0..want.rows {
        for j in 0..want.cols {
            dev = dev.max((want.get(i, j) - got.get(i, j)).abs());
        }
    }
    dev / scale
}

fn select_block(m: &DenseMatrix, rows: &[usize], cols: &[usize]) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(rows.len(), cols.len());
    for (i, &r) in rows.iter().enumerate() {
        for (j, &c) in cols.iter().enumerate() {
            out.set(i, j, m.get(r, c));
        }
    }
    out
}

fn scaled(m: &DenseMatrix, s: f64) -> DenseMatrix {
    let mut out = m.clone();
    for v in &mut out.data {
        *v *= s;
    }
    out
}

fn split_indices(params: &GroupedParams) -> (Vec<usize>, Vec<usize>) {
    let normalised = params.normalised_indices();
    let mask = params.normalised_mask();
    let plain: Vec<usize> =
        (0..params.dim()).filter(|&i| mask[i] == 0.0).collect();
    (plain, normalised)
}

/// Certify the transformation laws of the Jacobian and curvature blocks under
/// rescaling of the normalised weights, and the pointwise equality of the two
/// surrogate models h_k(theta' + k theta'', .) = h(theta' + theta'', .).
pub fn check_scaling_identities(
    arch: &Architecture,
    theta_tilde: &GroupedParams,
    data: &Dataset,
    lik: &Likelihood,
    k_set: &[f64],
    tolerance: f64,
) -> Result<ScalingCheckReport> {
    if !arch.is_fully_normalised() {
        return Err(Error::Config("scaling laws require a fully normalised architecture".into()));
    }
    let (plain, normed) = split_indices(theta_tilde);
    let base = Linearisation::new(arch, theta_tilde, Variant::FullTaylor, true, data)?;
    let base_curv = ggn(&base, lik, data)?;

    // stack per-example Jacobians for block comparison
    let stack = |lin: &Linearisation| -> DenseMatrix {
        let rows: usize = lin.jac_cache.iter().map(|j| j.rows).sum();
        let cols = lin.active_dim();
        let mut out = DenseMatrix::zeros(rows, cols);
        let mut r0 = 0;
        for j in &lin.jac_cache {
            for r in 0..j.rows {
                for c in 0..cols {
                    out.set(r0 + r, c, j.get(r, c));
                }
            }
            r0 += j.rows;
        }
        out
    };
    let j_base = stack(&base);
    let all_rows: Vec<usize> = (0..j_base.rows).collect();

    // a fixed probe weight vector for the surrogate-equality identity
    let mut probe = theta_tilde.clone();
    for (i, v) in probe.values.iter_mut().enumerate() {
        *v += 0.05 * ((i as f64 * 0.7).sin());
    }

    let mut dev_jp = 0.0f64;
    let mut dev_jn = 0.0f64;
    let mut dev_hp = 0.0f64;
    let mut dev_x = 0.0f64;
    let mut dev_hn = 0.0f64;
    let mut dev_h = 0.0f64;
    for &k in k_set {
        let theta_k = scale_group(theta_tilde, k)?;
        let lin_k = Linearisation::new(arch, &theta_k, Variant::FullTaylor, true, data)?;
        let curv_k = ggn(&lin_k, lik, data)?;
        let j_k = stack(&lin_k);

        dev_jp = dev_jp.max(block_deviation(
            &select_block(&j_base, &all_rows, &plain),
            &select_block(&j_k, &all_rows, &plain),
        ));
        dev_jn = dev_jn.max(block_deviation(
            &scaled(&select_block(&j_base, &all_rows, &normed), 1.0 / k),
            &select_block(&j_k, &all_rows, &normed),
        ));
        dev_hp = dev_hp.max(block_deviation(
            &select_block(&base_curv.h, &plain, &plain),
            &select_block(&curv_k.h, &plain, &plain),
        ));
        dev_x = dev_x.max(block_deviation(
            &scaled(&select_block(&base_curv.h, &plain, &normed), 1.0 / k),
            &select_block(&curv_k.h, &plain, &normed),
        ));
        dev_hn = dev_hn.max(block_deviation(
            &scaled(&select_block(&base_curv.h, &normed, &normed), 1.0 / (k * k)),
            &select_block(&curv_k.h, &normed, &normed),
        ));

        // h_k(theta' + k theta'', x) = h(theta' + theta'', x)
        let probe_k = scale_group(&probe, k)?;
        for x in &data.inputs {
            let a = base.predict(&probe.values, x)?;
            let b = lin_k.predict(&probe_k.values, x)?;
            for (u, v) in a.iter().zip(b.iter()) {
                dev_h = dev_h.max((u - v).abs() / (1.0 + u.abs()));
            }
        }
    }

    Ok(ScalingCheckReport {
        k_values: k_set.to_vec(),
        checks: vec![
            IdentityCheck::new("jacobian_plain_block", dev_jp, tolerance),
            IdentityCheck::new("jacobian_normalised_block", dev_jn, tolerance),
            IdentityCheck::new("curvature_plain_block", dev_hp, tolerance),
            IdentityCheck::new("curvature_cross_block", dev_x, tolerance),
            IdentityCheck::new("curvature_normalised_block", dev_hn, tolerance),
            IdentityCheck::new("surrogate_pointwise", dev_h, tolerance),
        ],
    })
}

/// Certify that the jointly optimised pair maps across scales as
/// (theta_k, Lambda_k) = (theta' + k theta'', Lambda' + k^-2 Lambda'').
/// With a single tied lambda the mapping is expected to break; the report
/// records the deviation either way.
pub fn check_stationary_scaling(
    arch: &Architecture,
    theta_tilde: &GroupedParams,
    data: &Dataset,
    lik: &Likelihood,
    k: f64,
    tying: Tying,
    tolerance: f64,
) -> Result<ScalingCheckReport> {
    if !arch.is_fully_normalised() {
        return Err(Error::Config("scaling laws require a fully normalised architecture".into()));
    }
    let solve_at = |params: &GroupedParams,
                    scale: f64|
     -> Result<(Vec<f64>, PrecisionSpec, Linearisation)> {
        let lin = Linearisation::new(arch, params, Variant::Simple, true, data)?;
        let curv = ggn(&lin, lik, data)?;
        let mut init = PrecisionSpec::isotropic(&lin.active_groups, 1e-4, tying);
        if tying == Tying::PerGroup {
            // the joint optimum is only unique up to the scale orbit, so the
            // initial precisions are mapped along with the linearisation
            // point; every alternation iterate then maps exactly
            let lambdas = init
                .groups
                .iter()
                .map(|g| if g.normalised { 1e-4 / (scale * scale) } else { 1e-4 })
                .collect();
            init = init.with_lambdas(lambdas);
        }
        let (theta, prec, _) = em_alternate(&lin, lik, data, &curv, &init)?;
        Ok((theta, prec, lin))
    };

    let (theta1, prec1, lin1) = solve_at(theta_tilde, 1.0)?;
    let theta_k = scale_group(theta_tilde, k)?;
    let (thetak, preck, link) = solve_at(&theta_k, k)?;

    // map the k=1 solution
    let mut theta_mapped = theta1.clone();
    let mut lambda_mapped = prec1.lambdas.clone();
    for (gi, g) in lin1.active_groups.iter().enumerate() {
        if g.normalised {
            for v in &mut theta_mapped[g.range()] {
                *v *= k;
            }
            lambda_mapped[gi] /= k * k;
        }
    }

    let tdev = theta_mapped
        .iter()
        .zip(thetak.theta_scaled_view(&link))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max)
        / (1.0 + theta_mapped.iter().map(|v| v.abs()).fold(0.0f64, f64::max));
    // a group whose precision sits on the upper clamp in both runs has been
    // pruned to effectively infinite precision; the orbit maps that boundary
    // point to itself, so the finite-ratio comparison does not apply
    let clamp = 0.999 * 1e10;
    let ldev = prec1
        .lambdas
        .iter()
        .zip(lambda_mapped.iter().zip(preck.lambdas.iter()))
        .filter(|(raw, (_, b))| !(**raw >= clamp && **b >= clamp))
        .map(|(_, (a, b))| (a.ln() - b.ln()).abs())
        .fold(0.0f64, f64::max);

    Ok(ScalingCheckReport {
        k_values: vec![k],
        checks: vec![
            IdentityCheck::new("weights_map", tdev, tolerance),
            IdentityCheck::new("precisions_map", ldev, tolerance),
        ],
    })
}

// theta vectors from both solves live in the same active layout; this helper
// exists only to keep the zip above readable.
trait ThetaView {
    fn theta_scaled_view<'a>(&'a self, lin: &Linearisation) -> std::slice::Iter<'a, f64>;
}

impl ThetaView for Vec<f64> {
    fn theta_scaled_view<'a>(&'a self, lin: &Linearisation) -> std::slice::Iter<'a, f64> {
        debug_assert_eq!(self.len(), lin.active_dim());
        self.iter()
    }
}

/// Run the full pipeline at each k and compare predictive standard deviations
/// across scales. Per-group precisions should make the profiles coincide;
/// a single tied lambda should not.
pub fn check_posterior_invariance(
    arch: &Architecture,
    theta_tilde: &GroupedParams,
    data: &Dataset,
    lik: &Likelihood,
    test_inputs: &[Vec<f64>],
    k_set: &[f64],
    tying: Tying,
    tolerance: f64,
) -> Result<ScalingCheckReport> {
    if !arch.is_fully_normalised() {
        return Err(Error::Config("scaling laws require a fully normalised architecture".into()));
    }
    let stds_at = |k: f64| -> Result<Vec<f64>> {
        let params = scale_group(theta_tilde, k)?;
        let lin = Linearisation::new(arch, &params, Variant::Simple, true, data)?;
        let curv = ggn(&lin, lik, data)?;
        let init = PrecisionSpec::isotropic(&lin.active_groups, 1e-4, tying);
        let (theta, prec, _) = em_alternate(&lin, lik, data, &curv, &init)?;
        let _ = theta;
        let mut stds = Vec::with_capacity(test_inputs.len());
        for x in test_inputs {
            let post = predictive(&lin, &curv, &prec, x)?;
            stds.extend(post.std_devs());
        }
        Ok(stds)
    };
    let base = stds_at(1.0)?;
    let mut dev = 0.0f64;
    for &k in k_set {
        let stds = stds_at(k)?;
        for (a, b) in base.iter().zip(stds.iter()) {
            dev = dev.max((a - b).abs() / (1e-12 + a.abs()));
        }
    }
    Ok(ScalingCheckReport {
        k_values: k_set.to_vec(),
        checks: vec![IdentityCheck::new("predictive_std_profile", dev, tolerance)],
    })
}

/// Largest magnitude over test inputs of the penultimate features'
/// directional derivative along the normalised weights, relative to the
/// feature scale. Vanishes for fully normalised dense-final networks.
pub fn check_directional_zero(
    arch: &Architecture,
    theta_tilde: &GroupedParams,
    test_inputs: &[Vec<f64>],
) -> Result<f64> {
    let mut worst = 0.0f64;
    for x in test_inputs {
        let phi = penultimate(arch, theta_tilde, x)?;
        let d = directional_derivative_penultimate(arch, theta_tilde, x)?;
        let scale = 1.0 + phi.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
        for v in &d {
            worst = worst.max(v.abs() / scale);
        }
    }
    Ok(worst)
}

/// Same cancellation read off the network output instead of the features.
pub fn check_directional_zero_output(
    arch: &Architecture,
    theta_tilde: &GroupedParams,
    test_inputs: &[Vec<f64>],
) -> Result<f64> {
    let dir = theta_tilde.normalised_part();
    let mut worst = 0.0f64;
    for x in test_inputs {
        if dir.iter().all(|&v| v == 0.0) {
            continue;
        }
        let jv = jvp_exact(arch, theta_tilde, x, &dir)?;
        let f = crate::model::forward(arch, theta_tilde, x)?;
        let scale = 1.0 + f.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
        for v in &jv {
            worst = worst.max(v.abs() / scale);
        }
    }
    Ok(worst)
}

/// Wasserstein-2 distance between two univariate Gaussians.
pub fn wasserstein2_1d(mu1: f64, sigma1: f64, mu2: f64, sigma2: f64) -> Result<f64> {
    for s in [sigma1, sigma2] {
        if s < 0.0 {
            return Err(Error::NegativeStdDev { sigma: s });
        }
    }
    Ok(((mu1 - mu2).powi(2) + (sigma1 - sigma2).powi(2)).sqrt())
}

/// Mean marginal Wasserstein-2 distance between two predictive posteriors
/// over the same scalar-output test set.
pub fn posterior_distance(
    a: &[PredictivePosterior],
    b: &[PredictivePosterior],
) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    if a.is_empty() {
        return Err(Error::Config("posterior distance needs at least one test point".into()));
    }
    let mut acc = 0.0;
    for (pa, pb) in a.iter().zip(b.iter()) {
        if pa.mean.len() != 1 || pb.mean.len() != 1 {
            return Err(Error::DimensionMismatch { expected: 1, got: pa.mean.len().max(pb.mean.len()) });
        }
        let sa = pa.covariance.get(0, 0).max(0.0).sqrt();
        let sb = pb.covariance.get(0, 0).max(0.0).sqrt();
        acc += wasserstein2_1d(pa.mean[0], sa, pb.mean[0], sb)?;
    }
    Ok(acc / a.len() as f64)
}
