//! Small fully connected regressor with tanh hidden units.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    /// Optimizer steps on the first (cold) training.
    pub epochs: usize,
    /// Optimizer steps on each warm-started retrain.
    pub warm_epochs: usize,
    /// Mini-batch size; the full training set is used when it is smaller.
    pub batch_size: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden: vec![5; 5],
            learning_rate: 1e-2,
            epochs: 500,
            warm_epochs: 20,
            batch_size: 128,
        }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
struct Layer {
    n_in: usize,
    n_out: usize,
    // row-major n_out x n_in
    w: Vec<f64>,
    b: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Mlp {
    config: MlpConfig,
    layers: Vec<Layer>,
    moments: Vec<Moments>,
    adam_steps: u64,
    input_mean: Vec<f64>,
    input_scale: Vec<f64>,
    target_mean: f64,
    target_scale: f64,
    trained: bool,
}

/// Scratch space reused across samples of one training call.
struct Workspace {
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
    grads: Vec<Vec<f64>>,
}

impl Mlp {
    pub fn new(n_in: usize, config: MlpConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut sizes = vec![n_in];
        sizes.extend(&config.hidden);
        sizes.push(1);
        let layers: Vec<Layer> = sizes
            .windows(2)
            .map(|w| {
                let (n_in, n_out) = (w[0], w[1]);
                let limit = (6.0 / (n_in + n_out) as f64).sqrt();
                Layer {
                    n_in,
                    n_out,
                    w: (0..n_in * n_out).map(|_| rng.random_range(-limit..limit)).collect(),
                    b: vec![0.0; n_out],
                }
            })
            .collect();
        let moments = layers
            .iter()
            .map(|l| {
                let n = l.w.len() + l.b.len();
                Moments {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                }
            })
            .collect();
        Self {
            config,
            layers,
            moments,
            adam_steps: 0,
            input_mean: vec![0.0; n_in],
            input_scale: vec![1.0; n_in],
            target_mean: 0.0,
            target_scale: 1.0,
            trained: false,
        }
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    fn workspace(&self) -> Workspace {
        let mut acts = vec![vec![0.0; self.layers[0].n_in]];
        acts.extend(self.layers.iter().map(|l| vec![0.0; l.n_out]));
        Workspace {
            acts,
            deltas: self.layers.iter().map(|l| vec![0.0; l.n_out]).collect(),
            grads: self.layers.iter().map(|l| vec![0.0; l.w.len() + l.b.len()]).collect(),
        }
    }

    /// Forward pass on an already standardized input left in `ws.acts[0]`.
    fn forward(&self, ws: &mut Workspace) -> f64 {
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (prev, next) = ws.acts.split_at_mut(l + 1);
            let input = &prev[l];
            let out = &mut next[0];
            for o in 0..layer.n_out {
                let row = &layer.w[o * layer.n_in..(o + 1) * layer.n_in];
                let z = layer.b[o] + row.iter().zip(input).map(|(w, a)| w * a).sum::<f64>();
                out[o] = if l == last { z } else { z.tanh() };
            }
        }
        ws.acts[self.layers.len()][0]
    }

    /// Accumulates gradients of `0.5 (yhat - y)^2` into `ws.grads`.
    fn backward(&self, ws: &mut Workspace, err: f64) {
        let nl = self.layers.len();
        ws.deltas[nl - 1][0] = err;
        for l in (0..nl).rev() {
            let layer = &self.layers[l];
            if l + 1 < nl {
                let upper = &self.layers[l + 1];
                let (lower_d, upper_d) = ws.deltas.split_at_mut(l + 1);
                let d = &mut lower_d[l];
                let du = &upper_d[0];
                for (i, di) in d.iter_mut().enumerate() {
                    let back: f64 = (0..upper.n_out).map(|o| upper.w[o * upper.n_in + i] * du[o]).sum();
                    let a = ws.acts[l + 1][i];
                    *di = back * (1.0 - a * a);
                }
            }
            let input = &ws.acts[l];
            let g = &mut ws.grads[l];
            let d = &ws.deltas[l];
            for o in 0..layer.n_out {
                let row = &mut g[o * layer.n_in..(o + 1) * layer.n_in];
                for (gw, a) in row.iter_mut().zip(input) {
                    *gw += d[o] * a;
                }
                g[layer.w.len() + o] += d[o];
            }
        }
    }

    fn adam_step(&mut self, ws: &mut Workspace, batch: usize) {
        self.adam_steps += 1;
        let t = self.adam_steps as f64;
        let lr = self.config.learning_rate * (1.0 - BETA2.powf(t)).sqrt() / (1.0 - BETA1.powf(t));
        let scale = 1.0 / batch as f64;
        for ((layer, mom), grad) in self.layers.iter_mut().zip(&mut self.moments).zip(&mut ws.grads) {
            let nw = layer.w.len();
            for (k, g) in grad.iter_mut().enumerate() {
                let gk = *g * scale;
                *g = 0.0;
                mom.m[k] = BETA1 * mom.m[k] + (1.0 - BETA1) * gk;
                mom.v[k] = BETA2 * mom.v[k] + (1.0 - BETA2) * gk * gk;
                let upd = lr * mom.m[k] / (mom.v[k].sqrt() + ADAM_EPS);
                if k < nw {
                    layer.w[k] -= upd;
                } else {
                    layer.b[k - nw] -= upd;
                }
            }
        }
    }

    fn load_input(&self, ws: &mut Workspace, raw: &[f64]) {
        for ((a, r), (m, s)) in ws.acts[0]
            .iter_mut()
            .zip(raw)
            .zip(self.input_mean.iter().zip(&self.input_scale))
        {
            *a = (r - m) / s;
        }
    }

    /// Trains on `(inputs[i], targets[i])`. Standardization statistics are
    /// refreshed from the data; weights and optimizer state carry over from
    /// previous calls. Returns the per-step mini-batch loss.
    pub fn train(&mut self, inputs: &[Vec<f64>], targets: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        let n = inputs.len();
        assert_eq!(n, targets.len());
        assert!(n > 0);
        let dim = self.input_mean.len();
        for j in 0..dim {
            let (m, s) = mean_scale(inputs.iter().map(|r| r[j]));
            self.input_mean[j] = m;
            self.input_scale[j] = s;
        }
        let (m, s) = mean_scale(targets.iter().copied());
        self.target_mean = m;
        self.target_scale = s;

        let steps = if self.trained {
            self.config.warm_epochs
        } else {
            self.config.epochs
        };
        let batch = self.config.batch_size.min(n).max(1);
        let full = batch == n;
        let mut ws = self.workspace();
        let mut losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            let mut loss = 0.0;
            for k in 0..batch {
                let i = if full { k } else { rng.random_range(0..n) };
                self.load_input(&mut ws, &inputs[i]);
                let yhat = self.forward(&mut ws);
                let err = yhat - (targets[i] - self.target_mean) / self.target_scale;
                loss += 0.5 * err * err;
                self.backward(&mut ws, err);
            }
            losses.push(loss / batch as f64);
            self.adam_step(&mut ws, batch);
        }
        self.trained = true;
        losses
    }

    pub fn predict(&self, input: &[f64]) -> f64 {
        let mut ws = Workspace {
            acts: std::iter::once(vec![0.0; self.layers[0].n_in])
                .chain(self.layers.iter().map(|l| vec![0.0; l.n_out]))
                .collect(),
            deltas: Vec::new(),
            grads: Vec::new(),
        };
        self.load_input(&mut ws, input);
        self.forward(&mut ws) * self.target_scale + self.target_mean
    }

    /// Mean of `0.5 (yhat - y)^2` in standardized target units.
    pub fn loss(&self, inputs: &[Vec<f64>], targets: &[f64]) -> f64 {
        inputs
            .iter()
            .zip(targets)
            .map(|(x, y)| {
                let e = (self.predict(x) - y) / self.target_scale;
                0.5 * e * e
            })
            .sum::<f64>()
            / inputs.len() as f64
    }
}

fn mean_scale(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (n, sum) = values.clone().fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let sd = var.sqrt();
    (mean, if sd > 1e-12 { sd } else { 1.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = Mlp::new(3, MlpConfig::default(), &mut rng);
        let x = [0.3, -0.8, 0.5];
        let y = 0.7;
        let mut ws = net.workspace();
        net.load_input(&mut ws, &x);
        let yhat = net.forward(&mut ws);
        net.backward(&mut ws, yhat - y);
        let analytic = ws.grads.clone();
        let h = 1e-6;
        for l in 0..net.layers.len() {
            for k in [0, net.layers[l].w.len() - 1] {
                let orig = net.layers[l].w[k];
                net.layers[l].w[k] = orig + h;
                let up = 0.5 * (net.predict(&x) - y).powi(2);
                net.layers[l].w[k] = orig - h;
                let down = 0.5 * (net.predict(&x) - y).powi(2);
                net.layers[l].w[k] = orig;
                let numeric = (up - down) / (2.0 * h);
                assert!((numeric - analytic[l][k]).abs() < 1e-6, "layer {l} weight {k}");
            }
        }
    }

    #[test]
    fn training_reduces_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs: Vec<Vec<f64>> = (0..400)
            .map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
            .collect();
        let targets: Vec<f64> = inputs.iter().map(|x| 1.0 + 0.5 * x[0] - 0.25 * x[1]).collect();
        let mut net = Mlp::new(2, MlpConfig::default(), &mut rng);
        net.train(&inputs, &targets, &mut rng);
        let before = net.loss(&inputs, &targets);
        // warm restart keeps improving
        for _ in 0..20 {
            net.train(&inputs, &targets, &mut rng);
        }
        let after = net.loss(&inputs, &targets);
        assert!(after <= before);
        let mae = inputs
            .iter()
            .zip(&targets)
            .map(|(x, y)| (net.predict(x) - y).abs())
            .sum::<f64>()
            / inputs.len() as f64;
        assert!(mae < 0.05, "mae {mae}");
    }
}
