//! Small dense MLP with ReLU hidden layers and a linear output layer,
//! trained by Adam on a squared-error reconstruction loss. Everything is
//! seed-deterministic and single-threaded.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Layer {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

/// Feed-forward network; ReLU between layers, identity after the last so the
/// output can take any sign in standardized units.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Per-layer activations cached by a forward pass, for backprop.
pub struct ForwardCache {
    /// activations[0] is the input; activations[k+1] the output of layer k.
    activations: Vec<DVector<f64>>,
    /// Pre-activation values of each layer.
    pre: Vec<DVector<f64>>,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub w: Vec<DMatrix<f64>>,
    pub b: Vec<DVector<f64>>,
}

impl Mlp {
    /// He-style uniform initialization over the dimension chain
    /// `dims = [input, hidden..., output]`.
    pub fn new_seeded(dims: &[usize], rng: &mut ChaCha8Rng) -> Result<Mlp> {
        if dims.len() < 2 {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument("zero-width layer".into()));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for win in dims.windows(2) {
            let (n_in, n_out) = (win[0], win[1]);
            let bound = (6.0 / n_in as f64).sqrt();
            let w = DMatrix::from_fn(n_out, n_in, |_, _| rng.random_range(-bound..bound));
            layers.push(Layer { w, b: DVector::zeros(n_out) });
        }
        Ok(Mlp { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().expect("nonempty").w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").w.nrows()
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(|l| l.w.nrows()));
        d
    }

    /// Weights plus biases.
    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        let last = self.layers.len() - 1;
        let mut a = x.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = &layer.w * &a + &layer.b;
            if k != last {
                z.apply(|v| *v = v.max(0.0));
            }
            a = z;
        }
        a
    }

    pub fn forward_cached(&self, x: &DVector<f64>) -> (DVector<f64>, ForwardCache) {
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        activations.push(x.clone());
        for (k, layer) in self.layers.iter().enumerate() {
            let z = &layer.w * activations.last().expect("activation") + &layer.b;
            pre.push(z.clone());
            let a = if k != last { z.map(|v| v.max(0.0)) } else { z };
            activations.push(a);
        }
        (activations.last().expect("output").clone(), ForwardCache { activations, pre })
    }

    /// Accumulates parameter gradients for an upstream `d_output` into
    /// `grads` (caller zeroes between batches).
    pub fn backward_accumulate(&self, cache: &ForwardCache, d_output: &DVector<f64>, grads: &mut Gradients) {
        let last = self.layers.len() - 1;
        let mut delta = d_output.clone();
        for k in (0..self.layers.len()).rev() {
            if k != last {
                // ReLU gate on the pre-activation.
                for (d, &z) in delta.iter_mut().zip(cache.pre[k].iter()) {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            grads.w[k] += &delta * cache.activations[k].transpose();
            grads.b[k] += &delta;
            if k > 0 {
                delta = self.layers[k].w.transpose() * delta;
            }
        }
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            w: self.layers.iter().map(|l| DMatrix::zeros(l.w.nrows(), l.w.ncols())).collect(),
            b: self.layers.iter().map(|l| DVector::zeros(l.b.len())).collect(),
        }
    }
}

/// Adam optimizer state.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Gradients,
    v: Gradients,
}

impl Adam {
    pub fn new(mlp: &Mlp, lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: mlp.zero_gradients(),
            v: mlp.zero_gradients(),
        }
    }

    pub fn step(&mut self, mlp: &mut Mlp, grads: &Gradients) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for k in 0..mlp.layers.len() {
            for (dst, (m, (v, g))) in mlp.layers[k].w.iter_mut().zip(
                self.m.w[k].iter_mut().zip(self.v.w[k].iter_mut().zip(grads.w[k].iter())),
            ) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *dst -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            }
            for (dst, (m, (v, g))) in mlp.layers[k].b.iter_mut().zip(
                self.m.b[k].iter_mut().zip(self.v.b[k].iter_mut().zip(grads.b[k].iter())),
            ) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *dst -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn relu_semantics() {
        // Single layer, identity weights, zero bias: a plain ReLU stage when
        // followed by nothing would be linear; use two layers so the hidden
        // ReLU acts.
        let mut mlp = Mlp {
            layers: vec![
                Layer { w: DMatrix::identity(2, 2), b: DVector::zeros(2) },
                Layer { w: DMatrix::identity(2, 2), b: DVector::zeros(2) },
            ],
        };
        let y = mlp.forward(&DVector::from_column_slice(&[-1.0, 2.0]));
        assert_eq!(y.as_slice(), &[0.0, 2.0]);

        // Output layer itself is linear: negative outputs pass through.
        mlp.layers[0].w = DMatrix::identity(2, 2) * -1.0;
        let y = mlp.forward(&DVector::from_column_slice(&[-1.0, 2.0]));
        // hidden = relu([1, -2]) = [1, 0]; output = [1, 0]
        assert_eq!(y.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut mlp = Mlp::new_seeded(&[3, 5, 4, 2], &mut rng).unwrap();
        let x = DVector::from_column_slice(&[0.37, -0.82, 0.55]);
        let target = DVector::from_column_slice(&[0.3, -0.6]);

        let loss = |mlp: &Mlp| -> f64 {
            let y = mlp.forward(&x);
            (&y - &target).norm_squared()
        };

        let (y, cache) = mlp.forward_cached(&x);
        let mut grads = mlp.zero_gradients();
        let d_out = (&y - &target) * 2.0;
        mlp.backward_accumulate(&cache, &d_out, &mut grads);

        // Keep clear of ReLU kinks so the derivative is well-defined.
        for z in cache.pre.iter().take(mlp.layers.len() - 1) {
            for &v in z.iter() {
                assert!(v.abs() > 1e-4, "pre-activation too close to a kink: {v}");
            }
        }

        let h = 1e-6;
        for k in 0..mlp.layers.len() {
            for idx in 0..mlp.layers[k].w.len() {
                let orig = mlp.layers[k].w[idx];
                mlp.layers[k].w[idx] = orig + h;
                let lp = loss(&mlp);
                mlp.layers[k].w[idx] = orig - h;
                let lm = loss(&mlp);
                mlp.layers[k].w[idx] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = grads.w[k][idx];
                let denom = fd.abs().max(an.abs()).max(1e-8);
                assert!(
                    (fd - an).abs() / denom <= 1e-5,
                    "layer {k} w[{idx}]: fd {fd} vs {an}"
                );
            }
            for idx in 0..mlp.layers[k].b.len() {
                let orig = mlp.layers[k].b[idx];
                mlp.layers[k].b[idx] = orig + h;
                let lp = loss(&mlp);
                mlp.layers[k].b[idx] = orig - h;
                let lm = loss(&mlp);
                mlp.layers[k].b[idx] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = grads.b[k][idx];
                let denom = fd.abs().max(an.abs()).max(1e-8);
                assert!(
                    (fd - an).abs() / denom <= 1e-5,
                    "layer {k} b[{idx}]: fd {fd} vs {an}"
                );
            }
        }
    }

    #[test]
    fn adam_reduces_loss_on_toy_regression() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mlp = Mlp::new_seeded(&[2, 8, 1], &mut rng).unwrap();
        let mut adam = Adam::new(&mlp, 1e-2);
        let data: Vec<(DVector<f64>, DVector<f64>)> = (0..32)
            .map(|i| {
                let a = (i as f64) / 16.0 - 1.0;
                let b = ((i * 7 % 32) as f64) / 16.0 - 1.0;
                (
                    DVector::from_column_slice(&[a, b]),
                    DVector::from_column_slice(&[a * b + 0.3]),
                )
            })
            .collect();

        let batch_loss = |mlp: &Mlp| -> f64 {
            data.iter().map(|(x, y)| (mlp.forward(x) - y).norm_squared()).sum::<f64>()
                / data.len() as f64
        };
        let initial = batch_loss(&mlp);
        for _ in 0..500 {
            let mut grads = mlp.zero_gradients();
            for (x, y) in &data {
                let (out, cache) = mlp.forward_cached(x);
                let d_out = (&out - y) * (2.0 / data.len() as f64);
                mlp.backward_accumulate(&cache, &d_out, &mut grads);
            }
            adam.step(&mut mlp, &grads);
        }
        let fin = batch_loss(&mlp);
        assert!(fin < initial * 0.05, "loss {initial} -> {fin}");
    }
}
