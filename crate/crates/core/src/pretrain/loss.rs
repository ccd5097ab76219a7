use ndarray::Array2;

use super::sampling::{EdgeSample, MlmPerturbation};
use crate::asm::TokenSequence;
use crate::encoder::ops::{log_sigmoid, sigmoid};
use crate::encoder::LinearHead;

/// Summed cross-entropy of the original tokens at masked positions.
/// Returns the loss and the gradient of the hidden states; head gradients
/// are added to `head_grad`.
pub fn mlm_loss(
    hidden: &Array2<f64>,
    pert: &MlmPerturbation,
    head: &LinearHead,
    head_grad: &mut LinearHead,
) -> (f64, Array2<f64>) {
    let mut dh = Array2::zeros(hidden.dim());
    if pert.is_empty() {
        return (0.0, dh);
    }
    let x = hidden.select(ndarray::Axis(0), &pert.positions);
    let logits = head.forward(x.view());
    let targets: Vec<usize> = pert.originals.iter().map(|&t| t as usize).collect();
    let (loss, dlogits) = LinearHead::cross_entropy(&logits, &targets);
    let dx = head.backward(x.view(), &dlogits, head_grad);
    for (r, &p) in pert.positions.iter().enumerate() {
        let mut row = dh.row_mut(p);
        row += &dx.row(r);
    }
    (loss, dh)
}

/// Edge prediction outcome for one sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MdmOutcome {
    pub loss: f64,
    pub correct: usize,
    pub total: usize,
}

/// Binary cross-entropy of `sigmoid(h_u · h_v)` over the sampled pairs,
/// using the final `<INST>` states. Returns the outcome and the hidden-state
/// gradient.
pub fn mdm_loss(hidden: &Array2<f64>, sample: &EdgeSample, seq: &TokenSequence) -> (MdmOutcome, Array2<f64>) {
    let mut dh = Array2::zeros(hidden.dim());
    let mut out = MdmOutcome::default();
    for (u, v, label) in sample.labeled() {
        let (pu, pv) = (seq.inst_positions[u], seq.inst_positions[v]);
        let hu = hidden.row(pu).to_owned();
        let hv = hidden.row(pv).to_owned();
        let x = hu.dot(&hv);
        out.loss -= if label { log_sigmoid(x) } else { log_sigmoid(-x) };
        let g = sigmoid(x) - if label { 1.0 } else { 0.0 };
        {
            let mut row = dh.row_mut(pu);
            row.scaled_add(g, &hv);
        }
        let mut row = dh.row_mut(pv);
        row.scaled_add(g, &hu);
        out.total += 1;
        if (x > 0.0) == label {
            out.correct += 1;
        }
    }
    (out, dh)
}
