use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::ops::{log_sigmoid, sigmoid};
use crate::encoder::LinearHead;
use crate::error::{Error, Result};
use crate::optim::{clip_global_norm, learning_rate, AdamW, OptimConfig};
use crate::pretrain::item_rng;

/// Pooled vector and the attention weights behind it.
#[derive(Clone, Debug, PartialEq)]
pub struct Pooled {
    pub output: Array1<f64>,
    pub weights: Array1<f64>,
}

/// Softmax over `query · e_i`, then the weighted sum of the rows of
/// `embeddings`.
///
/// ```
/// use depattn::downstream::attention_pool;
/// use ndarray::array;
///
/// let e = array![[1.0, 0.0], [0.0, 1.0]];
/// let p = attention_pool(array![0.0, 0.0].view(), e.view());
/// assert_eq!(p.output, array![0.5, 0.5]);
/// ```
pub fn attention_pool(query: ArrayView1<f64>, embeddings: ArrayView2<f64>) -> Pooled {
    let scores = embeddings.dot(&query);
    let m = scores.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut w = scores.mapv(|s| (s - m).exp());
    w /= w.sum();
    Pooled {
        output: w.dot(&embeddings),
        weights: w,
    }
}

/// Gradients of the pooled output with respect to the query and each
/// embedding.
pub fn attention_pool_backward(
    query: ArrayView1<f64>,
    embeddings: ArrayView2<f64>,
    pooled: &Pooled,
    d_output: ArrayView1<f64>,
) -> (Array1<f64>, Array2<f64>) {
    let w = &pooled.weights;
    let dw = embeddings.dot(&d_output);
    let mean = w.dot(&dw);
    let ds = w * &(dw - mean);
    let d_query = ds.dot(&embeddings);
    let mut d_emb = Array2::zeros(embeddings.dim());
    for (i, mut row) in d_emb.axis_iter_mut(Axis(0)).enumerate() {
        row.scaled_add(w[i], &d_output);
        row.scaled_add(ds[i], &query);
    }
    (d_query, d_emb)
}

/// Attention pooling followed by a linear head with one logit per label.
#[derive(Clone, Debug, PartialEq)]
pub struct MlcModel {
    pub query: Array2<f64>,
    pub head: LinearHead,
}

impl MlcModel {
    pub fn init(hidden: usize, labels: usize, rng: &mut impl Rng) -> Self {
        MlcModel {
            query: Array2::zeros((1, hidden)),
            head: LinearHead::init(hidden, labels, 0.02, rng),
        }
    }

    pub fn scores(&self, embeddings: ArrayView2<f64>) -> Array1<f64> {
        let pooled = attention_pool(self.query.row(0), embeddings);
        let x = pooled.output.insert_axis(Axis(0));
        self.head.forward(x.view()).row(0).mapv(sigmoid)
    }

    /// Summed binary cross-entropy over labels, with gradients added to
    /// `grad`.
    pub fn loss(&self, embeddings: ArrayView2<f64>, labels: &[u8], grad: &mut MlcModel) -> f64 {
        let pooled = attention_pool(self.query.row(0), embeddings);
        let x = pooled.output.clone().insert_axis(Axis(0));
        let logits = self.head.forward(x.view());
        let mut dl = Array2::zeros(logits.dim());
        let mut loss = 0.0;
        for (j, &y) in labels.iter().enumerate() {
            let z = logits[[0, j]];
            loss -= if y == 1 { log_sigmoid(z) } else { log_sigmoid(-z) };
            dl[[0, j]] = sigmoid(z) - f64::from(y);
        }
        let dx = self.head.backward(x.view(), &dl, &mut grad.head);
        let (dq, _) = attention_pool_backward(self.query.row(0), embeddings, &pooled, dx.row(0));
        let mut q = grad.query.row_mut(0);
        q += &dq;
        loss
    }

    fn zeros_like(&self) -> Self {
        MlcModel {
            query: Array2::zeros(self.query.dim()),
            head: self.head.zeros_like(),
        }
    }
}

/// Embeddings of the first `k` functions of a sample and its label vector.
#[derive(Clone, Debug, PartialEq)]
pub struct MlcExample {
    pub embeddings: Array2<f64>,
    pub labels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlcConfig {
    /// Functions per sample fed to the pool, in listing order.
    pub forefront_k: usize,
    pub steps: usize,
    pub batch: usize,
    pub optim: OptimConfig,
}

impl Default for MlcConfig {
    fn default() -> Self {
        MlcConfig {
            forefront_k: 4,
            steps: 300,
            batch: 16,
            optim: OptimConfig {
                lr: 1e-2,
                warmup: 10,
                weight_decay: 0.0,
                ..Default::default()
            },
        }
    }
}

/// Trains pooling query and head on fixed function embeddings. Returns the
/// mean loss of every step.
pub fn train_mlc(model: &mut MlcModel, data: &[MlcExample], cfg: &MlcConfig, seed: u64) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if cfg.batch == 0 {
        return Err(Error::Config("train-mlc: batch must be positive".into()));
    }
    let labels = model.head.outputs();
    if let Some(e) = data.iter().find(|e| e.labels.len() != labels || e.embeddings.nrows() == 0) {
        return Err(Error::Format(format!(
            "multi-label sample with {} labels and {} functions, expected {labels} labels",
            e.labels.len(),
            e.embeddings.nrows()
        )));
    }
    let mut opt = AdamW::new(cfg.optim.clone());
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let mut rng = item_rng(seed, step as u64, 0);
        let picks = sample(&mut rng, data.len(), cfg.batch.min(data.len())).into_vec();
        let mut grad = model.zeros_like();
        let mut loss = 0.0;
        for &i in &picks {
            loss += model.loss(data[i].embeddings.view(), &data[i].labels, &mut grad);
        }
        let b = picks.len() as f64;
        let mut gs = [&mut grad.query, &mut grad.head.w, &mut grad.head.b];
        for g in gs.iter_mut() {
            g.mapv_inplace(|x| x / b);
        }
        clip_global_norm(&mut gs, cfg.optim.clip_norm);
        let lr = learning_rate(cfg.optim.lr, step, cfg.optim.warmup, cfg.steps);
        let params = vec![
            ("query".to_string(), &mut model.query),
            ("mlc.w".to_string(), &mut model.head.w),
            ("mlc.b".to_string(), &mut model.head.b),
        ];
        opt.step(params, &[&grad.query, &grad.head.w, &grad.head.b], lr);
        if model.query.iter().chain(model.head.w.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "multi-label model".into(),
            });
        }
        losses.push(loss / b);
    }
    Ok(losses)
}

/// Scores of every sample, one row each.
pub fn predict_mlc(model: &MlcModel, data: &[MlcExample]) -> Array2<f64> {
    let mut out = Array2::zeros((data.len(), model.head.outputs()));
    for (i, e) in data.iter().enumerate() {
        out.row_mut(i).assign(&model.scores(e.embeddings.view()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    #[test]
    fn single_and_identical_embeddings() {
        let q = array![0.3, -2.0];
        let one = array![[1.5, 2.5]];
        assert_eq!(attention_pool(q.view(), one.view()).output, array![1.5, 2.5]);
        let same = array![[1.0, -1.0], [1.0, -1.0], [1.0, -1.0]];
        let p = attention_pool(q.view(), same.view()).output;
        assert!((p[0] - 1.0).abs() < 1e-15 && (p[1] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn learns_separable_labels() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let data: Vec<MlcExample> = (0..40)
            .map(|i| {
                let a = (i % 2) as f64;
                let b = ((i / 2) % 2) as f64;
                MlcExample {
                    embeddings: array![[a, b, 1.0], [a, 0.0, 1.0]],
                    labels: vec![a as u8, b as u8],
                }
            })
            .collect();
        let mut m = MlcModel::init(3, 2, &mut rng);
        let mut cfg = MlcConfig::default();
        cfg.optim.lr = 0.1;
        let losses = train_mlc(&mut m, &data, &cfg, 0).unwrap();
        assert!(losses.last().unwrap() < &(losses[0] * 0.3), "{} -> {}", losses[0], losses.last().unwrap());
        let s = predict_mlc(&m, &data);
        for (i, e) in data.iter().enumerate() {
            for j in 0..2 {
                assert_eq!(s[[i, j]] > 0.5, e.labels[j] == 1);
            }
        }
    }
}
