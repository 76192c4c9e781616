//! Central-difference gradient verification.
//!
//! Relative errors use the denominator `max(1, |analytic|, |numeric|)` so
//! near-zero gradients do not blow up the ratio. The default step is 1e-5;
//! run checks in 64-bit.

pub const DEFAULT_STEP: f64 = 1e-5;

/// Numerical gradient of a scalar function at `point` via central differences.
pub fn finite_diff_grad<F>(f: F, point: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grads = Vec::with_capacity(point.len());
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        probe[i] = point[i] + h;
        let plus = f(&probe);
        probe[i] = point[i] - h;
        let minus = f(&probe);
        probe[i] = point[i];
        grads.push((plus - minus) / (2.0 * h));
    }
    grads
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1.0f64.max(analytic.abs()).max(numeric.abs())
}

/// Flat indexed access to every trainable scalar of a model, in a fixed
/// deterministic order. Implemented by anything the harness can check.
pub trait ParamAccess {
    fn param_count(&self) -> usize;
    fn param_get(&self, index: usize) -> f64;
    fn param_set(&mut self, index: usize, value: f64);
    fn grad_get(&self, index: usize) -> f64;
}

/// Compare analytic gradients against central differences of `eval` over all
/// parameters of `model` and return the maximum relative error.
///
/// `compute_grads` must populate the model's gradient buffers for the same
/// scalar that `eval` computes; `eval` must not mutate parameters.
pub fn max_rel_error<M: ParamAccess>(
    model: &mut M,
    mut eval: impl FnMut(&mut M) -> f64,
    compute_grads: impl FnOnce(&mut M),
    h: f64,
) -> f64 {
    compute_grads(model);
    let n = model.param_count();
    let analytic: Vec<f64> = (0..n).map(|i| model.grad_get(i)).collect();
    let mut worst = 0.0f64;
    for i in 0..n {
        let base = model.param_get(i);
        model.param_set(i, base + h);
        let plus = eval(model);
        model.param_set(i, base - h);
        let minus = eval(model);
        model.param_set(i, base);
        let numeric = (plus - minus) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        if err > worst {
            worst = err;
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quadratic {
        x: Vec<f64>,
        grad: Vec<f64>,
    }

    impl Quadratic {
        fn value(&self) -> f64 {
            // f(x) = sum x_i^2 + x_0 * x_1
            self.x.iter().map(|v| v * v).sum::<f64>() + self.x[0] * self.x[1]
        }
        fn fill_grads(&mut self) {
            for (i, g) in self.grad.iter_mut().enumerate() {
                *g = 2.0 * self.x[i];
            }
            self.grad[0] += self.x[1];
            self.grad[1] += self.x[0];
        }
    }

    impl ParamAccess for Quadratic {
        fn param_count(&self) -> usize {
            self.x.len()
        }
        fn param_get(&self, i: usize) -> f64 {
            self.x[i]
        }
        fn param_set(&mut self, i: usize, v: f64) {
            self.x[i] = v;
        }
        fn grad_get(&self, i: usize) -> f64 {
            self.grad[i]
        }
    }

    #[test]
    fn quadratic_is_exact_up_to_roundoff() {
        let mut q = Quadratic {
            x: vec![0.7, -1.3, 2.1],
            grad: vec![0.0; 3],
        };
        let err = max_rel_error(&mut q, |m| m.value(), |m| m.fill_grads(), DEFAULT_STEP);
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn detects_a_corrupted_backward() {
        struct Broken(Quadratic);
        impl ParamAccess for Broken {
            fn param_count(&self) -> usize {
                self.0.param_count()
            }
            fn param_get(&self, i: usize) -> f64 {
                self.0.param_get(i)
            }
            fn param_set(&mut self, i: usize, v: f64) {
                self.0.param_set(i, v)
            }
            fn grad_get(&self, i: usize) -> f64 {
                // deliberately wrong scale
                self.0.grad_get(i) * 1.5
            }
        }
        let mut b = Broken(Quadratic {
            x: vec![0.7, -1.3],
            grad: vec![0.0; 2],
        });
        let err = max_rel_error(&mut b, |m| m.0.value(), |m| m.0.fill_grads(), DEFAULT_STEP);
        assert!(
            err > 1e-2,
            "corrupted gradient should be flagged, got {err}"
        );
    }

    #[test]
    fn finite_diff_transcendental() {
        let f = |v: &[f64]| v[0].sin() * v[0].exp();
        let g = finite_diff_grad(f, &[1.0], 1e-6);
        let expect = (1.0f64.cos() + 1.0f64.sin()) * 1.0f64.exp();
        assert!((g[0] - expect).abs() < 1e-7);
    }

    /// Two-layer MLP with ReLU at a generic point: composite backward matches
    /// central differences below 1e-4.
    #[test]
    fn two_layer_relu_mlp_gradcheck() {
        use crate::layers::{activation_backward, activation_forward, Activation, Dense};
        use crate::loss::softmax_cross_entropy;
        use crate::tensor::Tensor;
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;

        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let w1: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b1: Vec<f64> = (0..4).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let w2: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::new(
            vec![5, 3],
            (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let labels: Vec<usize> = (0..5).map(|_| rng.gen_range(0..2)).collect();

        let loss_of = |p: &[f64]| {
            let l1 = Dense::new(
                "l1",
                Tensor::new(vec![3, 4], p[..12].to_vec()).unwrap(),
                Some(Tensor::from_vec(p[12..16].to_vec())),
            );
            let l2 = Dense::new(
                "l2",
                Tensor::new(vec![4, 2], p[16..].to_vec()).unwrap(),
                None,
            );
            let (h, _) = l1.forward(&x).unwrap();
            let (a, _) = activation_forward(Activation::Relu, &h);
            let (logits, _) = l2.forward(&a).unwrap();
            softmax_cross_entropy(&logits, &labels).unwrap().0
        };
        let point: Vec<f64> = w1.iter().chain(&b1).chain(&w2).copied().collect();
        let numeric = finite_diff_grad(loss_of, &point, DEFAULT_STEP);

        let mut l1 = Dense::new(
            "l1",
            Tensor::new(vec![3, 4], w1).unwrap(),
            Some(Tensor::from_vec(b1)),
        );
        let mut l2 = Dense::new("l2", Tensor::new(vec![4, 2], w2).unwrap(), None);
        let (h, c1) = l1.forward(&x).unwrap();
        let (a, ca) = activation_forward(Activation::Relu, &h);
        let (logits, c2) = l2.forward(&a).unwrap();
        let (_, grad_logits) = softmax_cross_entropy(&logits, &labels).unwrap();
        let grad_a = l2.backward(&grad_logits, &c2).unwrap();
        let grad_h = activation_backward(&grad_a, &ca).unwrap();
        l1.backward(&grad_h, &c1).unwrap();
        let analytic: Vec<f64> = l1
            .weight
            .grad
            .data()
            .iter()
            .chain(l1.bias.as_ref().unwrap().grad.data())
            .chain(l2.weight.grad.data())
            .copied()
            .collect();
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!(relative_error(*a, *n) < 1e-4, "analytic {a} vs numeric {n}");
        }
    }

    /// 32-bit gradients tolerate finite-difference cancellation up to 1e-2.
    #[test]
    fn dense_gradcheck_in_f32_within_loose_tolerance() {
        use crate::layers::Dense;
        use crate::tensor::Tensor;
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w: Vec<f32> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::new(
            vec![4, 2],
            (0..8).map(|_| rng.gen_range(-1.0..1.0f32)).collect(),
        )
        .unwrap();
        let loss_of = |p: &[f32]| -> f64 {
            let layer = Dense::new("t", Tensor::new(vec![2, 3], p.to_vec()).unwrap(), None);
            let (y, _) = layer.forward(&x).unwrap();
            y.data().iter().map(|v| (*v as f64) * (*v as f64)).sum()
        };
        let h = 1e-5f32;
        let mut numeric = Vec::new();
        let mut probe = w.clone();
        for i in 0..w.len() {
            probe[i] = w[i] + h;
            let plus = loss_of(&probe);
            probe[i] = w[i] - h;
            let minus = loss_of(&probe);
            probe[i] = w[i];
            numeric.push((plus - minus) / (2.0 * h as f64));
        }
        let mut layer = Dense::new("t", Tensor::new(vec![2, 3], w).unwrap(), None);
        let (y, cache) = layer.forward(&x).unwrap();
        let grad_out = y.map(|v| 2.0 * v);
        layer.backward(&grad_out, &cache).unwrap();
        for (a, n) in layer.weight.grad.data().iter().zip(&numeric) {
            assert!(
                relative_error(*a as f64, *n) < 1e-2,
                "analytic {a} vs numeric {n}"
            );
        }
    }
}
