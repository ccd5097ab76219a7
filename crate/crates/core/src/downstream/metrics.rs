use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};

/// Ground truth and scores of a multi-label evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiLabelBatch {
    pub y: Array2<u8>,
    pub scores: Array2<f64>,
}

impl MultiLabelBatch {
    pub fn new(y: Array2<u8>, scores: Array2<f64>) -> Result<Self> {
        if y.dim() != scores.dim() {
            return Err(Error::Format(format!("labels {:?} vs scores {:?}", y.dim(), scores.dim())));
        }
        if y.iter().any(|&v| v > 1) {
            return Err(Error::Format("labels must be 0 or 1".into()));
        }
        Ok(MultiLabelBatch { y, scores })
    }

    pub fn samples(&self) -> usize {
        self.y.nrows()
    }

    pub fn labels(&self) -> usize {
        self.y.ncols()
    }

    fn check_ranked(&self) -> Result<()> {
        for (i, row) in self.y.rows().into_iter().enumerate() {
            if row.iter().all(|&v| v == 0) {
                return Err(Error::Format(format!("sample {i} has no positive label")));
            }
        }
        if self.samples() == 0 {
            return Err(Error::Format("empty batch".into()));
        }
        Ok(())
    }
}

/// Label ranking average precision. Ranks count every label scored at
/// least as high, so ties rank pessimistically.
///
/// ```
/// use depattn::downstream::{lrap, MultiLabelBatch};
/// use ndarray::array;
///
/// let b = MultiLabelBatch::new(array![[0, 1, 0, 0]], array![[0.9, 0.5, 0.2, 0.1]]).unwrap();
/// assert_eq!(lrap(&b).unwrap(), 0.5);
/// ```
pub fn lrap(batch: &MultiLabelBatch) -> Result<f64> {
    batch.check_ranked()?;
    let mut total = 0.0;
    for (y, f) in batch.y.rows().into_iter().zip(batch.scores.rows()) {
        let pos: Vec<usize> = (0..y.len()).filter(|&j| y[j] == 1).collect();
        let mut sum = 0.0;
        for &j in &pos {
            let rank = f.iter().filter(|&&s| s >= f[j]).count();
            let above = pos.iter().filter(|&&k| f[k] >= f[j]).count();
            sum += above as f64 / rank as f64;
        }
        total += sum / pos.len() as f64;
    }
    Ok(total / batch.samples() as f64)
}

/// Label ranking loss: the fraction of (positive, negative) pairs whose
/// positive is not scored strictly above the negative. Samples with every
/// label positive contribute 0.
pub fn lrl(batch: &MultiLabelBatch) -> Result<f64> {
    batch.check_ranked()?;
    let mut total = 0.0;
    for (y, f) in batch.y.rows().into_iter().zip(batch.scores.rows()) {
        let mut pos: Vec<f64> = f.iter().zip(y).filter(|(_, &l)| l == 1).map(|(&s, _)| s).collect();
        let neg: Vec<f64> = f.iter().zip(y).filter(|(_, &l)| l == 0).map(|(&s, _)| s).collect();
        if neg.is_empty() {
            continue;
        }
        pos.sort_by(f64::total_cmp);
        let mut bad = 0usize;
        for &n in &neg {
            // positives with score <= n
            bad += pos.partition_point(|&p| p <= n);
        }
        total += bad as f64 / (pos.len() * neg.len()) as f64;
    }
    Ok(total / batch.samples() as f64)
}

/// Area under the ROC curve of one class: the probability that a random
/// positive outscores a random negative, with ties counting one half.
/// `None` when either class is absent.
pub fn roc_auc(scores: ArrayView1<f64>, labels: ArrayView1<u8>) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    // Mann-Whitney U via midranks.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] == 1 {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Mean of [`roc_auc`] over the classes that have both positives and
/// negatives; `None` if no class qualifies.
pub fn macro_roc_auc(batch: &MultiLabelBatch) -> Option<f64> {
    let aucs: Vec<f64> = (0..batch.labels())
        .filter_map(|c| roc_auc(batch.scores.column(c), batch.y.column(c)))
        .collect();
    (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64)
}
