//! AdamW, the warmup/decay schedule and global-norm clipping.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub warmup: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 3e-4,
            warmup: 100,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 0.01,
            clip_norm: 1.0,
        }
    }
}

/// Linear warmup to the peak over `warmup` steps, then linear decay to 0
/// at `total`. Steps count from 1.
pub fn learning_rate(peak: f64, step: usize, warmup: usize, total: usize) -> f64 {
    if warmup > 0 && step <= warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return peak;
    }
    let left = total.saturating_sub(step) as f64 / (total - warmup) as f64;
    peak * left.max(0.0)
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut Array2<f64>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * s);
        }
    }
    norm
}

/// Weight decay applies to matrices only, not to biases, layer-norm
/// vectors or the relative-bias table.
pub fn decays(name: &str) -> bool {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    !(leaf.starts_with('b') || leaf.starts_with("ln") || name == "rel_bias" || leaf == "query")
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: OptimConfig,
    pub t: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl AdamW {
    pub fn new(config: OptimConfig) -> Self {
        AdamW {
            config,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update with learning rate `lr`. `params` and `grads` must list
    /// the same tensors in the same order on every call.
    pub fn step(&mut self, params: Vec<(String, &mut Array2<f64>)>, grads: &[&Array2<f64>], lr: f64) {
        assert_eq!(params.len(), grads.len(), "parameter and gradient lists differ");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Array2::zeros(g.dim())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (k, ((name, p), g)) in params.into_iter().zip(grads).enumerate() {
            let decay = if decays(&name) { c.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            ndarray::Zip::from(&mut **p).and(&mut *m).and(&mut *v).and(*g).for_each(|p, m, v, &g| {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                *p -= lr * (update + decay * *p);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn schedule_shape() {
        assert_eq!(learning_rate(1.0, 1, 10, 100), 0.1);
        assert_eq!(learning_rate(1.0, 10, 10, 100), 1.0);
        assert!((learning_rate(1.0, 55, 10, 100) - 0.5).abs() < 1e-12);
        assert_eq!(learning_rate(1.0, 100, 10, 100), 0.0);
        assert_eq!(learning_rate(1.0, 5, 0, 0), 1.0);
    }

    #[test]
    fn clipping() {
        let mut a = array![[3.0, 0.0]];
        let mut b = array![[0.0, 4.0]];
        let norm = clip_global_norm(&mut [&mut a, &mut b], 1.0);
        assert_eq!(norm, 5.0);
        assert!((a[[0, 0]] - 0.6).abs() < 1e-12 && (b[[0, 1]] - 0.8).abs() < 1e-12);
        let mut c = array![[0.1]];
        clip_global_norm(&mut [&mut c], 1.0);
        assert_eq!(c[[0, 0]], 0.1);
    }

    #[test]
    fn decay_selection() {
        assert!(decays("layer0.wq") && decays("tok_emb") && decays("mlm.w"));
        assert!(!decays("layer0.b1") && !decays("layer1.ln2_g") && !decays("rel_bias") && !decays("mlm.b"));
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut x = array![[5.0, -3.0]];
        let mut opt = AdamW::new(OptimConfig { weight_decay: 0.0, ..Default::default() });
        for _ in 0..2000 {
            let g = x.mapv(|v| 2.0 * v);
            opt.step(vec![("x".into(), &mut x)], &[&g], 0.05);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-2));
    }
}
