//! Minimal dense-tensor math with reverse-mode automatic differentiation.
//!
//! Everything downstream — the radiance field, the volume renderer, the
//! losses and the Vision Transformer — is expressed as ops recorded on a
//! [`Tape`], which evaluates eagerly and differentiates in reverse. The op
//! set is deliberately small; higher layers compose it.

mod check;
mod tape;
mod tensor;

pub use check::{finite_difference_check, FdReport, FdSettings};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward target must be a scalar, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },
    #[error("duplicate parameter name {0:?}")]
    DuplicateParam(String),
    #[error("non-finite values in {context}")]
    NonFinite { context: String },
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use approx::assert_relative_eq;

    use super::*;

    #[test]
    fn square_at_three() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        assert_eq!(tape.value(y).scalar_value(), 9.0);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new([2], vec![0.0, 0.0]));
        let y = tape.softmax(x);
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_of_constant_vector_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new([4], vec![3.0; 4]));
        let y = tape.layer_norm(x, 1e-5);
        for &v in tape.value(y).data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn product_rule_gradients() {
        let mut tape = Tape::new();
        let x = tape.param("x", Tensor::scalar(2.0)).unwrap();
        let y = tape.param("y", Tensor::scalar(5.0)).unwrap();
        let z = tape.mul(x, y).unwrap();
        let grads = tape.backward(z).unwrap();
        assert_eq!(grads.get(x).unwrap().scalar_value(), 5.0);
        assert_eq!(grads.get(y).unwrap().scalar_value(), 2.0);
    }

    #[test]
    fn sine_gradient_at_zero() {
        let mut tape = Tape::new();
        let x = tape.param("x", Tensor::scalar(0.0)).unwrap();
        let y = tape.sin(x);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().scalar_value(), 1.0);
    }

    #[test]
    fn non_scalar_backward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new([2], vec![1.0, 2.0]));
        let y = tape.relu(x);
        assert!(matches!(
            tape.backward(y),
            Err(DiffError::NonScalarOutput { .. })
        ));
    }

    #[test]
    fn disconnected_param_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param("x", Tensor::scalar(1.0)).unwrap();
        tape.param("unused", Tensor::new([3], vec![1.0, 2.0, 3.0]))
            .unwrap();
        let y = tape.square(x);
        let grads = tape.backward(y).unwrap();
        let by_name = tape.param_grads(&grads);
        assert_eq!(by_name["unused"].data(), &[0.0, 0.0, 0.0]);
        assert_eq!(by_name["x"].scalar_value(), 2.0);
    }

    #[test]
    fn matmul_shape_mismatch_names_op() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros([2, 3]));
        let b = tape.leaf(Tensor::zeros([2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul"), "{msg}");
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_matches_hand_computation() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(Tensor::new([2, 2], vec![5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn broadcast_bias_row() {
        let mut tape = Tape::new();
        let bias = tape.param("b", Tensor::new([3], vec![1.0, 2.0, 3.0])).unwrap();
        let wide = tape.broadcast(bias, &[2, 3]).unwrap();
        assert_eq!(tape.value(wide).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let s = tape.sum_all(wide);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(bias).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn concat_and_slice_round_trip_gradient() {
        let mut tape = Tape::new();
        let a = tape.param("a", Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        let b = tape.param("b", Tensor::new([2, 1], vec![5.0, 6.0])).unwrap();
        let cat = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(cat).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let right = tape.slice(cat, 1, 2, 3).unwrap();
        let s = tape.sum_all(right);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[0.0; 4]);
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn cumsum_forward_and_backward() {
        let mut tape = Tape::new();
        let x = tape.param("x", Tensor::new([1, 3], vec![1.0, 2.0, 3.0])).unwrap();
        let c = tape.cumsum(x);
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 6.0]);
        // d(sum of cumsum)/dx_i counts how many cumsum entries include x_i.
        let s = tape.sum_all(c);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 2.0, 1.0]);
    }

    #[test]
    fn gather_scatter_gradient() {
        use std::sync::Arc;
        let mut tape = Tape::new();
        let x = tape.param("x", Tensor::new([3], vec![10.0, 20.0, 30.0])).unwrap();
        let g = tape
            .gather(x, Arc::new(vec![2, 0, 2]), &[3])
            .unwrap();
        assert_eq!(tape.value(g).data(), &[30.0, 10.0, 30.0]);
        let s = tape.sum_all(g);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 2.0]);
    }

    fn mlp_scalar(
        tape: &mut Tape,
        params: &BTreeMap<String, Tensor>,
    ) -> Result<NodeId, DiffError> {
        let x = tape.leaf(Tensor::new([2, 3], vec![0.3, -0.5, 0.9, 0.1, 0.7, -0.2]));
        let mut h = x;
        for layer in 0..3 {
            let w = tape.param(&format!("w{layer}"), params[&format!("w{layer}")].clone())?;
            let b = tape.param(&format!("b{layer}"), params[&format!("b{layer}")].clone())?;
            h = tape.matmul(h, w)?;
            let rows = tape.shape_of(h)[0];
            let cols = tape.shape_of(h)[1];
            let bb = tape.broadcast(b, &[rows, cols])?;
            h = tape.add(h, bb)?;
            if layer < 2 {
                h = tape.tanh(h);
            }
        }
        Ok(tape.mean_all(h))
    }

    fn mlp_params(seed: u64) -> BTreeMap<String, Tensor> {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let dims = [(3usize, 4usize), (4, 4), (4, 1)];
        let mut params = BTreeMap::new();
        for (i, (fi, fo)) in dims.iter().enumerate() {
            params.insert(
                format!("w{i}"),
                Tensor::from_fn([*fi, *fo], |_| rng.gen_range(-0.8..0.8)),
            );
            params.insert(
                format!("b{i}"),
                Tensor::from_fn([*fo], |_| rng.gen_range(-0.2..0.2)),
            );
        }
        params
    }

    #[test]
    fn three_layer_mlp_matches_finite_differences() {
        let params = mlp_params(7);
        let report = finite_difference_check(
            &params,
            FdSettings {
                max_coords_per_param: 8,
                ..FdSettings::default()
            },
            mlp_scalar,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn quadratic_form_gradient_is_2ax() {
        // f(x) = x^T A x with symmetric A has gradient 2 A x.
        let a_data = vec![2.0, 0.5, 0.5, 1.0];
        let x_data = vec![0.7, -0.3];
        let mut params = BTreeMap::new();
        params.insert("x".to_string(), Tensor::new([2, 1], x_data.clone()));

        let build = |tape: &mut Tape, p: &BTreeMap<String, Tensor>| {
            let a = tape.leaf(Tensor::new([2, 2], a_data.clone()));
            let x = tape.param("x", p["x"].clone())?;
            let ax = tape.matmul(a, x)?;
            let xt = tape.transpose(x)?;
            let q = tape.matmul(xt, ax)?;
            Ok(tape.sum_all(q))
        };

        let report = finite_difference_check(
            &params,
            FdSettings {
                tolerance: 1e-3,
                ..FdSettings::default()
            },
            build,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);

        // And the analytic gradient itself equals 2 A x.
        let mut tape = Tape::new();
        let out = build(&mut tape, &params).unwrap();
        let grads = tape.backward(out).unwrap();
        let g = tape.param_grads(&grads)["x"].clone();
        let expect = [
            2.0 * (2.0 * 0.7 + 0.5 * -0.3),
            2.0 * (0.5 * 0.7 + 1.0 * -0.3),
        ];
        for (got, want) in g.data().iter().zip(expect) {
            assert_relative_eq!(*got, want, max_relative = 1e-4);
        }
    }

    #[test]
    fn deliberately_wrong_gradient_fails_the_check() {
        use std::cell::Cell;
        // The first build call (used for the analytic pass) evaluates x^2;
        // subsequent calls (finite-difference evaluations) see 2 x^2, so the
        // difference quotient disagrees with the recorded gradient.
        let calls = Cell::new(0usize);
        let mut params = BTreeMap::new();
        params.insert("x".to_string(), Tensor::scalar(1.5));
        let report = finite_difference_check(&params, FdSettings::default(), |tape, p| {
            let n = calls.get();
            calls.set(n + 1);
            let x = tape.param("x", p["x"].clone())?;
            let sq = tape.square(x);
            Ok(if n == 0 { sq } else { tape.scale(sq, 2.0) })
        })
        .unwrap();
        assert!(!report.pass);
    }

    #[test]
    fn rematerialized_backward_matches_stored() {
        let params = mlp_params(11);
        let run = |remat: bool| {
            let mut tape = Tape::new().with_rematerialization(remat);
            let out = if remat {
                let p = params.clone();
                tape.checkpoint(|t| mlp_scalar(t, &p)).unwrap()
            } else {
                mlp_scalar(&mut tape, &params).unwrap()
            };
            let grads = tape.backward(out).unwrap();
            tape.param_grads(&grads)
        };
        let plain = run(false);
        let remat = run(true);
        for (name, g) in &plain {
            let r = &remat[name];
            for (a, b) in g.data().iter().zip(r.data()) {
                assert!((a - b).abs() <= 1e-6, "{name}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn forward_is_pure() {
        let params = mlp_params(3);
        let run = || {
            let mut tape = Tape::new();
            let out = mlp_scalar(&mut tape, &params).unwrap();
            tape.value(out).scalar_value()
        };
        let a = run();
        let b = run();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn softmax_layernorm_gradients_match_fd() {
        let mut params = BTreeMap::new();
        params.insert(
            "x".to_string(),
            Tensor::new([2, 4], vec![0.3, -1.2, 0.8, 0.1, -0.4, 0.9, -0.6, 1.4]),
        );
        let report = finite_difference_check(&params, FdSettings::default(), |tape, p| {
            let x = tape.param("x", p["x"].clone())?;
            let ln = tape.layer_norm(x, 1e-5);
            let sm = tape.softmax(ln);
            let w = tape.leaf(Tensor::new([2, 4], vec![1.0, -2.0, 3.0, 0.5, -1.5, 2.0, 0.7, -0.3]));
            let weighted = tape.mul(sm, w)?;
            Ok(tape.sum_all(weighted))
        })
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn scalar_activation_gradients_match_fd() {
        let mut params = BTreeMap::new();
        // No exact zero: relu's kink breaks the difference quotient there.
        params.insert(
            "x".to_string(),
            Tensor::new([6], vec![-1.7, -0.4, 0.05, 0.3, 1.1, 2.5]),
        );
        for op in ["gelu", "softplus", "sigmoid", "tanh", "exp", "relu"] {
            let report = finite_difference_check(&params, FdSettings::default(), |tape, p| {
                let x = tape.param("x", p["x"].clone())?;
                let y = match op {
                    "gelu" => tape.gelu(x),
                    "softplus" => tape.softplus(x),
                    "sigmoid" => tape.sigmoid(x),
                    "tanh" => tape.tanh(x),
                    "exp" => tape.exp(x),
                    _ => tape.relu(x),
                };
                Ok(tape.sum_all(y))
            })
            .unwrap();
            assert!(report.pass, "{op}: max rel err {}", report.max_rel_err);
        }
    }
}
