//! Small differentiable networks: MLPs with optional layer norm and a dense
//! final layer, grouped-parameter bookkeeping, exact Jacobians/JVPs/VJPs and
//! a finite-difference JVP fallback.

mod ad;
mod arch;
mod params;

pub use ad::{
    directional_derivative_penultimate, forward, jacobian, jvp_exact, jvp_fd, penultimate, vjp,
};
pub use arch::{Activation, Architecture, HiddenSpec};
pub use params::{scale_group, GroupedParams, ParamGroup};

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seeded_dir(dim: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn layer_norm_core_on_two_units() {
        // pre-activations [1,3]: mean 2, population var 1 -> [-1, 1]
        let arch = Architecture {
            input_dim: 2,
            output_dim: 2,
            hidden: vec![HiddenSpec { width: 2, bias: false, layer_norm: true, ln_affine: false }],
            activation: Activation::LeakyRelu(1.0), // slope 1: identity activation
            final_bias: false,
        };
        let mut p = GroupedParams::layout(&arch);
        // hidden weight = I, final weight = I
        let w = p.group("layer0.weight").unwrap().range();
        p.values[w.start] = 1.0;
        p.values[w.start + 3] = 1.0;
        let f = p.group("final.weight").unwrap().range();
        p.values[f.start] = 1.0;
        p.values[f.start + 3] = 1.0;
        let y = forward(&arch, &p, &[1.0, 3.0]).unwrap();
        assert_relative_eq!(y[0], -1.0, epsilon = 1e-12);
        assert_relative_eq!(y[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn single_dense_identity_layer() {
        let arch = Architecture {
            input_dim: 3,
            output_dim: 3,
            hidden: vec![],
            activation: Activation::Tanh,
            final_bias: false,
        };
        let mut p = GroupedParams::layout(&arch);
        let w = p.group("final.weight").unwrap().range();
        for i in 0..3 {
            p.values[w.start + i * 3 + i] = 1.0;
        }
        let x = [0.3, -1.2, 2.5];
        assert_eq!(forward(&arch, &p, &x).unwrap(), x.to_vec());
    }

    #[test]
    fn forward_matches_hand_rolled_pass() {
        // 2-hidden-layer layer-norm MLP reimplemented inline as the oracle
        let arch = Architecture::fully_normalised_mlp(2, &[3, 3], 1, Activation::Tanh, false);
        let p = GroupedParams::init(&arch, 42);
        let x = [0.7, -0.4];

        let slice = |name: &str| {
            let g = p.group(name).unwrap();
            p.values[g.range()].to_vec()
        };
        let w0 = slice("layer0.weight");
        let w1 = slice("layer1.weight");
        let wf = slice("final.weight");
        let ln = |a: &[f64]| {
            let n = a.len() as f64;
            let m = a.iter().sum::<f64>() / n;
            let v = a.iter().map(|z| (z - m) * (z - m)).sum::<f64>() / n;
            a.iter().map(|z| (z - m) / v.sqrt()).collect::<Vec<f64>>()
        };
        let a0: Vec<f64> = (0..3).map(|i| w0[i * 2] * x[0] + w0[i * 2 + 1] * x[1]).collect();
        let h0: Vec<f64> = ln(&a0).iter().map(|z| z.tanh()).collect();
        let a1: Vec<f64> = (0..3)
            .map(|i| (0..3).map(|j| w1[i * 3 + j] * h0[j]).sum::<f64>())
            .collect();
        let h1: Vec<f64> = ln(&a1).iter().map(|z| z.tanh()).collect();
        let oracle: f64 = (0..3).map(|j| wf[j] * h1[j]).sum();

        let y = forward(&arch, &p, &x).unwrap();
        assert_relative_eq!(y[0], oracle, epsilon = 1e-12);
    }

    #[test]
    fn jacobian_of_scalar_linear_model() {
        // f(theta, x) = theta1 * x + theta2 -> J = [x, 1]
        let arch = Architecture {
            input_dim: 1,
            output_dim: 1,
            hidden: vec![],
            activation: Activation::Tanh,
            final_bias: true,
        };
        let mut p = GroupedParams::layout(&arch);
        p.values = vec![0.8, -0.1];
        let j = jacobian(&arch, &p, &[2.5]).unwrap();
        assert_eq!(j.row(0), &[2.5, 1.0]);
    }

    #[test]
    fn jacobian_rows_match_jvp_on_basis_directions() {
        let arch = Architecture::fully_normalised_mlp(2, &[4, 4], 2, Activation::LeakyRelu(0.01), true);
        let p = GroupedParams::init(&arch, 5);
        let x = [0.4, -0.9];
        let j = jacobian(&arch, &p, &x).unwrap();
        for col in 0..p.dim() {
            let mut e = vec![0.0; p.dim()];
            e[col] = 1.0;
            let jv = jvp_exact(&arch, &p, &x, &e).unwrap();
            for row in 0..arch.output_dim {
                assert_relative_eq!(j.get(row, col), jv[row], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn final_layer_jacobian_columns_equal_penultimate_features() {
        let arch = Architecture::fully_normalised_mlp(2, &[4], 2, Activation::Tanh, false);
        let p = GroupedParams::init(&arch, 8);
        let x = [1.1, 0.2];
        let j = jacobian(&arch, &p, &x).unwrap();
        let phi = penultimate(&arch, &p, &x).unwrap();
        let fw = p.group("final.weight").unwrap();
        for i in 0..arch.output_dim {
            for k in 0..phi.len() {
                assert_relative_eq!(j.get(i, fw.start + i * phi.len() + k), phi[k], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn jvp_exact_on_linear_model_and_zero_direction() {
        let arch = Architecture {
            input_dim: 1,
            output_dim: 1,
            hidden: vec![],
            activation: Activation::Tanh,
            final_bias: true,
        };
        let mut p = GroupedParams::layout(&arch);
        p.values = vec![0.3, 0.7];
        let x = [1.5];
        // jvp(v) = v1*x + v2
        let jv = jvp_exact(&arch, &p, &x, &[2.0, -1.0]).unwrap();
        assert_relative_eq!(jv[0], 2.0 * 1.5 - 1.0, epsilon = 1e-14);
        let z = jvp_exact(&arch, &p, &x, &[0.0, 0.0]).unwrap();
        assert_eq!(z, vec![0.0]);
    }

    #[test]
    fn jvp_exact_matches_explicit_jacobian_product() {
        let arch = Architecture::plain_mlp(3, &[5, 4], 2, Activation::Tanh, true);
        let p = GroupedParams::init(&arch, 17);
        let x = [0.2, -0.5, 0.9];
        let v = seeded_dir(p.dim(), 3);
        let jv = jvp_exact(&arch, &p, &x, &v).unwrap();
        let j = jacobian(&arch, &p, &x).unwrap();
        let explicit = j.matvec(&v);
        for (a, b) in jv.iter().zip(explicit.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn jvp_fd_exact_for_linear_and_near_exact_for_mlp() {
        let arch = Architecture {
            input_dim: 1,
            output_dim: 1,
            hidden: vec![],
            activation: Activation::Tanh,
            final_bias: true,
        };
        let mut p = GroupedParams::layout(&arch);
        p.values = vec![0.3, 0.7];
        let v = [1.0, 2.0];
        let fd = jvp_fd(&arch, &p, &[1.5], &v, f64::EPSILON).unwrap();
        let ex = jvp_exact(&arch, &p, &[1.5], &v).unwrap();
        assert_relative_eq!(fd[0], ex[0], epsilon = 1e-7);

        let arch = Architecture::fully_normalised_mlp(2, &[6, 6], 1, Activation::Tanh, false);
        let p = GroupedParams::init(&arch, 23);
        let x = [0.8, -0.3];
        let v = seeded_dir(p.dim(), 4);
        let fd = jvp_fd(&arch, &p, &x, &v, f64::EPSILON).unwrap();
        let ex = jvp_exact(&arch, &p, &x, &v).unwrap();
        let scale = ex[0].abs().max(1e-12);
        assert!(((fd[0] - ex[0]) / scale).abs() <= 1e-4);
    }

    #[test]
    fn jvp_fd_rejects_zero_direction() {
        let arch = Architecture::plain_mlp(1, &[3], 1, Activation::Tanh, false);
        let p = GroupedParams::init(&arch, 1);
        let v = vec![0.0; p.dim()];
        assert!(jvp_fd(&arch, &p, &[0.5], &v, f64::EPSILON).is_err());
    }

    #[test]
    fn vjp_rows_and_zero_cotangent() {
        let arch = Architecture::plain_mlp(2, &[4], 2, Activation::LeakyRelu(0.01), true);
        let p = GroupedParams::init(&arch, 31);
        let x = [0.1, 0.9];
        let j = jacobian(&arch, &p, &x).unwrap();
        let g0 = vjp(&arch, &p, &x, &[1.0, 0.0]).unwrap();
        for (a, b) in g0.iter().zip(j.row(0).iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
        let gz = vjp(&arch, &p, &x, &[0.0, 0.0]).unwrap();
        assert!(gz.iter().all(|&v| v == 0.0));
        // random cotangent against explicit product
        let g = [0.3, -1.7];
        let gt = vjp(&arch, &p, &x, &g).unwrap();
        let jt = j.transpose().matvec(&g);
        for (a, b) in gt.iter().zip(jt.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn scale_invariance_of_fully_normalised_forward() {
        // Definition-1 invariance over a seeded architecture set
        for seed in [1u64, 2, 3] {
            let arch =
                Architecture::fully_normalised_mlp(2, &[5, 5], 1, Activation::LeakyRelu(0.01), false);
            let p = GroupedParams::init(&arch, seed);
            for x in [[0.5, -0.2], [1.4, 0.7], [-0.9, -1.1]] {
                let base = forward(&arch, &p, &x).unwrap();
                let fnorm = base.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                for k in [0.25, 0.5, 2.0, 4.0] {
                    let scaled = scale_group(&p, k).unwrap();
                    let y = forward(&arch, &scaled, &x).unwrap();
                    for (a, b) in y.iter().zip(base.iter()) {
                        assert!((a - b).abs() <= 1e-10 * (1.0 + fnorm), "k={k} seed={seed}");
                    }
                }
            }
        }
    }

    #[test]
    fn four_param_width2_mlp_invariance() {
        // 1 input, 2 hidden units with layer norm, scalar readout: 4 params
        let arch = Architecture::fully_normalised_mlp(1, &[2], 1, Activation::LeakyRelu(1.0), false);
        let p = GroupedParams::layout(&arch);
        let p = p.with_values(vec![0.6, -1.3, 0.9, 0.4]);
        p.check_partition().unwrap();
        let x = [0.8];
        let base = forward(&arch, &p, &x).unwrap();
        let scaled = scale_group(&p, 2.0).unwrap();
        let y = forward(&arch, &scaled, &x).unwrap();
        assert_relative_eq!(y[0], base[0], epsilon = 1e-12);
    }

    #[test]
    fn directional_derivative_zero_for_fully_normalised() {
        let arch = Architecture::fully_normalised_mlp(2, &[5, 4], 1, Activation::Tanh, false);
        let p = GroupedParams::init(&arch, 12);
        let x = [0.6, -1.0];
        let phi = penultimate(&arch, &p, &x).unwrap();
        let pnorm = phi.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let d = directional_derivative_penultimate(&arch, &p, &x).unwrap();
        for v in d {
            assert!(v.abs() <= 1e-8 * (1.0 + pnorm));
        }
    }

    #[test]
    fn directional_derivative_nonzero_without_normalisation() {
        // unnormalised control: treat all hidden weights as the direction
        let arch = Architecture::plain_mlp(2, &[5, 4], 1, Activation::Tanh, false);
        let p = GroupedParams::init(&arch, 12);
        let x = [0.6, -1.0];
        // direction: hidden weights of theta (final layer zeroed)
        let mut v = p.values.clone();
        let fw = p.group("final.weight").unwrap().range();
        for w in &mut v[fw] {
            *w = 0.0;
        }
        let jv = jvp_exact(&arch, &p, &x, &v).unwrap();
        assert!(jv[0].abs() > 1e-3);
    }

    #[test]
    fn jacobian_block_scaling_under_k() {
        // J'_k = J' and J''_k = (1/k) J'' for fully normalised nets
        let arch = Architecture::fully_normalised_mlp(2, &[5, 5], 1, Activation::LeakyRelu(0.01), false);
        let p = GroupedParams::init(&arch, 77);
        let x = [0.4, 1.2];
        let j = jacobian(&arch, &p, &x).unwrap();
        let mask = p.normalised_mask();
        for k in [0.5, 2.0] {
            let pk = scale_group(&p, k).unwrap();
            let jk = jacobian(&arch, &pk, &x).unwrap();
            for c in 0..p.dim() {
                let expected = if mask[c] == 1.0 { j.get(0, c) / k } else { j.get(0, c) };
                let scale = expected.abs().max(1e-8);
                assert!(
                    (jk.get(0, c) - expected).abs() / scale <= 1e-8,
                    "col {c} k {k}: {} vs {}",
                    jk.get(0, c),
                    expected
                );
            }
        }
    }

    #[test]
    fn degenerate_variance_is_reported() {
        let arch = Architecture::fully_normalised_mlp(1, &[2], 1, Activation::Tanh, false);
        let p = GroupedParams::layout(&arch); // all-zero weights -> zero variance
        let err = forward(&arch, &p, &[1.0]).unwrap_err();
        assert!(matches!(err, crate::error::Error::DegenerateVariance { .. }));
    }
}
