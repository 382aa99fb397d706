//! Forward pass and exact derivatives for the MLP family: reverse-mode
//! vector-Jacobian products, forward-mode (dual number) Jacobian-vector
//! products, explicit per-example Jacobians and the two-sided
//! finite-difference JVP with the Andrei step size.

use crate::error::{Error, Result};
use crate::linalg::{norm_inf, DenseMatrix};
use crate::model::arch::Architecture;
use crate::model::params::GroupedParams;

const VAR_FLOOR: f64 = 1e-24;

/// Borrowed per-layer parameter slices, in layout order.
struct LayerRefs<'a> {
    w: &'a [f64],
    b: Option<&'a [f64]>,
    gamma: Option<&'a [f64]>,
    beta: Option<&'a [f64]>,
}

struct ParamRefs<'a> {
    hidden: Vec<LayerRefs<'a>>,
    final_w: &'a [f64],
    final_b: Option<&'a [f64]>,
}

fn split_params<'a>(arch: &Architecture, params: &'a GroupedParams) -> Result<ParamRefs<'a>> {
    if params.dim() != arch.num_params() {
        return Err(Error::DimensionMismatch { expected: arch.num_params(), got: params.dim() });
    }
    let mut gi = 0usize;
    let g = |i: usize| -> &'a [f64] {
        let gr = &params.groups[i];
        &params.values[gr.start..gr.start + gr.len]
    };
    let mut hidden = Vec::with_capacity(arch.hidden.len());
    for h in &arch.hidden {
        let w = g(gi);
        gi += 1;
        let b = if h.bias {
            let s = g(gi);
            gi += 1;
            Some(s)
        } else {
            None
        };
        let (gamma, beta) = if h.layer_norm && h.ln_affine {
            let ga = g(gi);
            let be = g(gi + 1);
            gi += 2;
            (Some(ga), Some(be))
        } else {
            (None, None)
        };
        hidden.push(LayerRefs { w, b, gamma, beta });
    }
    let final_w = g(gi);
    gi += 1;
    let final_b = if arch.final_bias { Some(g(gi)) } else { None };
    Ok(ParamRefs { hidden, final_w, final_b })
}

fn dense(w: &[f64], b: Option<&[f64]>, x: &[f64], out_dim: usize) -> Vec<f64> {
    let in_dim = x.len();
    let mut out = vec![0.0; out_dim];
    for i in 0..out_dim {
        let row = &w[i * in_dim..(i + 1) * in_dim];
        let mut acc = 0.0;
        for j in 0..in_dim {
            acc += row[j] * x[j];
        }
        out[i] = acc + b.map_or(0.0, |b| b[i]);
    }
    out
}

/// Per-layer intermediates kept for the backward sweep.
struct LayerTrace {
    input: Vec<f64>,
    /// normalised pre-activations z = (a - mean)/std, when layer norm is on
    normed: Option<Vec<f64>>,
    ln_std: f64,
    /// input to the activation (after norm and affine)
    act_in: Vec<f64>,
}

struct Trace {
    layers: Vec<LayerTrace>,
    penultimate: Vec<f64>,
    output: Vec<f64>,
}

fn forward_trace(arch: &Architecture, p: &ParamRefs, x: &[f64]) -> Result<Trace> {
    if x.len() != arch.input_dim {
        return Err(Error::DimensionMismatch { expected: arch.input_dim, got: x.len() });
    }
    let mut cur = x.to_vec();
    let mut layers = Vec::with_capacity(arch.hidden.len());
    for (h, refs) in arch.hidden.iter().zip(p.hidden.iter()) {
        let a = dense(refs.w, refs.b, &cur, h.width);
        let (normed, ln_std, mut act_in) = if h.layer_norm {
            let n = h.width as f64;
            let mean = a.iter().sum::<f64>() / n;
            let var = a.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            if var < VAR_FLOOR {
                return Err(Error::DegenerateVariance { var });
            }
            let s = var.sqrt();
            let z: Vec<f64> = a.iter().map(|v| (v - mean) / s).collect();
            let u = match (refs.gamma, refs.beta) {
                (Some(ga), Some(be)) => {
                    z.iter().zip(ga.iter().zip(be.iter())).map(|(z, (g, b))| z * g + b).collect()
                }
                _ => z.clone(),
            };
            (Some(z), s, u)
        } else {
            (None, 0.0, a)
        };
        let output: Vec<f64> = act_in.iter().map(|&v| arch.activation.apply(v)).collect();
        let input = std::mem::replace(&mut cur, output);
        act_in.shrink_to_fit();
        layers.push(LayerTrace { input, normed, ln_std, act_in });
    }
    let out = dense(p.final_w, p.final_b, &cur, arch.output_dim);
    Ok(Trace { layers, penultimate: cur, output: out })
}

/// Deterministic forward pass. Layer norm uses the population variance
/// (divide by width) and no epsilon inside the square root.
pub fn forward(arch: &Architecture, params: &GroupedParams, x: &[f64]) -> Result<Vec<f64>> {
    let p = split_params(arch, params)?;
    Ok(forward_trace(arch, &p, x)?.output)
}

/// Output of the penultimate layer (the feature map feeding the final dense
/// layer).
pub fn penultimate(arch: &Architecture, params: &GroupedParams, x: &[f64]) -> Result<Vec<f64>> {
    let p = split_params(arch, params)?;
    Ok(forward_trace(arch, &p, x)?.penultimate)
}

/// Reverse sweep: g^T J(x) for an output cotangent g, written into `grad`
/// (accumulated, caller zeroes).
fn vjp_into(
    arch: &Architecture,
    params: &GroupedParams,
    p: &ParamRefs,
    trace: &Trace,
    g: &[f64],
    grad: &mut [f64],
) {
    // final layer
    let pen = &trace.penultimate;
    let mut gi = params.groups.len() - 1;
    if arch.final_bias {
        let gr = &params.groups[gi];
        for (dst, &gv) in grad[gr.range()].iter_mut().zip(g.iter()) {
            *dst += gv;
        }
        gi -= 1;
    }
    {
        let gr = &params.groups[gi];
        let gw = &mut grad[gr.range()];
        for i in 0..arch.output_dim {
            for j in 0..pen.len() {
                gw[i * pen.len() + j] += g[i] * pen[j];
            }
        }
    }
    // cotangent wrt penultimate activations
    let in_dim = pen.len();
    let mut cur: Vec<f64> = (0..in_dim)
        .map(|j| (0..arch.output_dim).map(|i| g[i] * p.final_w[i * in_dim + j]).sum())
        .collect();

    // walk hidden layers backwards; group indices are recomputed per layer
    let mut group_starts = Vec::with_capacity(arch.hidden.len());
    {
        let mut k = 0usize;
        for h in &arch.hidden {
            group_starts.push(k);
            k += 1 + h.bias as usize + (h.layer_norm && h.ln_affine) as usize * 2;
        }
    }
    for (li, h) in arch.hidden.iter().enumerate().rev() {
        let tr = &trace.layers[li];
        let refs = &p.hidden[li];
        // activation
        let mut gu: Vec<f64> = cur
            .iter()
            .zip(tr.act_in.iter())
            .map(|(&c, &u)| c * arch.activation.derivative(u))
            .collect();
        let mut gidx = group_starts[li];
        // affine
        if h.layer_norm && h.ln_affine {
            let z = tr.normed.as_ref().unwrap();
            let gamma = refs.gamma.unwrap();
            let ga_group = &params.groups[gidx + 1 + h.bias as usize];
            let be_group = &params.groups[gidx + 2 + h.bias as usize];
            {
                let dst = &mut grad[ga_group.range()];
                for i in 0..h.width {
                    dst[i] += gu[i] * z[i];
                }
            }
            {
                let dst = &mut grad[be_group.range()];
                for i in 0..h.width {
                    dst[i] += gu[i];
                }
            }
            for i in 0..h.width {
                gu[i] *= gamma[i];
            }
        }
        // layer norm backward: da = (g - mean(g) - z * mean(g.z)) / s
        let ga = if h.layer_norm {
            let z = tr.normed.as_ref().unwrap();
            let n = h.width as f64;
            let mg = gu.iter().sum::<f64>() / n;
            let mgz = gu.iter().zip(z.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
            gu.iter()
                .zip(z.iter())
                .map(|(&g, &z)| (g - mg - z * mgz) / tr.ln_std)
                .collect::<Vec<f64>>()
        } else {
            gu
        };
        // dense backward
        let x = &tr.input;
        let w_group = &params.groups[gidx];
        {
            let dst = &mut grad[w_group.range()];
            for i in 0..h.width {
                for j in 0..x.len() {
                    dst[i * x.len() + j] += ga[i] * x[j];
                }
            }
        }
        if h.bias {
            gidx += 1;
            let b_group = &params.groups[gidx];
            let dst = &mut grad[b_group.range()];
            for i in 0..h.width {
                dst[i] += ga[i];
            }
        }
        cur = (0..x.len())
            .map(|j| (0..h.width).map(|i| ga[i] * refs.w[i * x.len() + j]).sum())
            .collect();
    }
}

/// g^T J(x) as a length-|theta| vector.
pub fn vjp(arch: &Architecture, params: &GroupedParams, x: &[f64], g: &[f64]) -> Result<Vec<f64>> {
    if g.len() != arch.output_dim {
        return Err(Error::DimensionMismatch { expected: arch.output_dim, got: g.len() });
    }
    let p = split_params(arch, params)?;
    let trace = forward_trace(arch, &p, x)?;
    let mut grad = vec![0.0; params.dim()];
    vjp_into(arch, params, &p, &trace, g, &mut grad);
    Ok(grad)
}

/// Exact per-example Jacobian, one backward sweep per output dimension.
/// Shape: output_dim x |theta|.
pub fn jacobian(arch: &Architecture, params: &GroupedParams, x: &[f64]) -> Result<DenseMatrix> {
    let p = split_params(arch, params)?;
    let trace = forward_trace(arch, &p, x)?;
    let d = params.dim();
    let mut jac = DenseMatrix::zeros(arch.output_dim, d);
    let mut g = vec![0.0; arch.output_dim];
    for i in 0..arch.output_dim {
        for v in g.iter_mut() {
            *v = 0.0;
        }
        g[i] = 1.0;
        vjp_into(arch, params, &p, &trace, &g, &mut jac.data[i * d..(i + 1) * d]);
    }
    Ok(jac)
}

struct DualVec {
    val: Vec<f64>,
    tan: Vec<f64>,
}

fn jvp_trace(
    arch: &Architecture,
    params: &GroupedParams,
    x: &[f64],
    v: &[f64],
) -> Result<(DualVec, DualVec)> {
    if x.len() != arch.input_dim {
        return Err(Error::DimensionMismatch { expected: arch.input_dim, got: x.len() });
    }
    if v.len() != params.dim() {
        return Err(Error::DimensionMismatch { expected: params.dim(), got: v.len() });
    }
    let p = split_params(arch, params)?;
    let tangent = params.with_values(v.to_vec());
    let t = split_params(arch, &tangent)?;

    let mut cur = DualVec { val: x.to_vec(), tan: vec![0.0; x.len()] };
    for (li, h) in arch.hidden.iter().enumerate() {
        let refs = &p.hidden[li];
        let trefs = &t.hidden[li];
        let a = dense(refs.w, refs.b, &cur.val, h.width);
        // da = dW x + W dx + db
        let mut da = dense(trefs.w, trefs.b, &cur.val, h.width);
        let wdx = dense(refs.w, None, &cur.tan, h.width);
        for (d, w) in da.iter_mut().zip(wdx.iter()) {
            *d += w;
        }
        let (mut u, mut du) = if h.layer_norm {
            let n = h.width as f64;
            let mean = a.iter().sum::<f64>() / n;
            let var = a.iter().map(|w| (w - mean) * (w - mean)).sum::<f64>() / n;
            if var < VAR_FLOOR {
                return Err(Error::DegenerateVariance { var });
            }
            let s = var.sqrt();
            let dmean = da.iter().sum::<f64>() / n;
            let dvar = a
                .iter()
                .zip(da.iter())
                .map(|(&av, &dav)| 2.0 * (av - mean) * (dav - dmean))
                .sum::<f64>()
                / n;
            let ds = dvar / (2.0 * s);
            let z: Vec<f64> = a.iter().map(|w| (w - mean) / s).collect();
            let dz: Vec<f64> = a
                .iter()
                .zip(da.iter())
                .map(|(&av, &dav)| (dav - dmean) / s - (av - mean) * ds / (s * s))
                .collect();
            match (refs.gamma, refs.beta, trefs.gamma, trefs.beta) {
                (Some(ga), Some(_), Some(dga), Some(dbe)) => {
                    let u: Vec<f64> = z
                        .iter()
                        .zip(ga.iter().zip(p.hidden[li].beta.unwrap().iter()))
                        .map(|(z, (g, b))| z * g + b)
                        .collect();
                    let du: Vec<f64> = (0..h.width)
                        .map(|i| dz[i] * ga[i] + z[i] * dga[i] + dbe[i])
                        .collect();
                    (u, du)
                }
                _ => (z, dz),
            }
        } else {
            (a, da)
        };
        for i in 0..h.width {
            du[i] *= arch.activation.derivative(u[i]);
            u[i] = arch.activation.apply(u[i]);
        }
        cur = DualVec { val: u, tan: du };
    }
    let pen = DualVec { val: cur.val.clone(), tan: cur.tan.clone() };
    let out_val = dense(p.final_w, p.final_b, &cur.val, arch.output_dim);
    let mut out_tan = dense(t.final_w, t.final_b, &cur.val, arch.output_dim);
    let wdx = dense(p.final_w, None, &cur.tan, arch.output_dim);
    for (d, w) in out_tan.iter_mut().zip(wdx.iter()) {
        *d += w;
    }
    Ok((DualVec { val: out_val, tan: out_tan }, pen))
}

/// Forward-mode J(x).v, exact to roundoff.
pub fn jvp_exact(
    arch: &Architecture,
    params: &GroupedParams,
    x: &[f64],
    v: &[f64],
) -> Result<Vec<f64>> {
    Ok(jvp_trace(arch, params, x, v)?.0.tan)
}

/// Two-sided finite-difference J(x).v with step
/// delta = sqrt(eps) * (1 + ||theta||_inf) / ||v||_inf.
pub fn jvp_fd(
    arch: &Architecture,
    params: &GroupedParams,
    x: &[f64],
    v: &[f64],
    machine_eps: f64,
) -> Result<Vec<f64>> {
    if v.len() != params.dim() {
        return Err(Error::DimensionMismatch { expected: params.dim(), got: v.len() });
    }
    let vnorm = norm_inf(v);
    if vnorm == 0.0 {
        return Err(Error::ZeroDirection);
    }
    let delta = machine_eps.sqrt() * (1.0 + norm_inf(&params.values)) / vnorm;
    let plus: Vec<f64> = params.values.iter().zip(v.iter()).map(|(t, v)| t + delta * v).collect();
    let minus: Vec<f64> = params.values.iter().zip(v.iter()).map(|(t, v)| t - delta * v).collect();
    let fp = forward(arch, &params.with_values(plus), x)?;
    let fm = forward(arch, &params.with_values(minus), x)?;
    Ok(fp.iter().zip(fm.iter()).map(|(p, m)| (p - m) / (2.0 * delta)).collect())
}

/// Derivative of the penultimate features in the direction of the normalised
/// part of theta. Vanishes for fully normalised stacks.
pub fn directional_derivative_penultimate(
    arch: &Architecture,
    params: &GroupedParams,
    x: &[f64],
) -> Result<Vec<f64>> {
    let v = params.normalised_part();
    if v.iter().all(|&w| w == 0.0) {
        return Ok(vec![0.0; arch.penultimate_dim()]);
    }
    Ok(jvp_trace(arch, params, x, &v)?.1.tan)
}
