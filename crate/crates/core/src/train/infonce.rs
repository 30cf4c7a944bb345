//! Symmetric InfoNCE over a batch of paired embeddings.

use crate::error::{TensorError, TrainError};
use crate::model::{LOGIT_SCALE_MAX, LOGIT_SCALE_MIN};
use crate::tensor::{Graph, NodeId, Tensor};

/// Row norms must sit within this distance of 1.
pub const NORM_TOL: f64 = 1e-3;

fn check_normalized(t: &Tensor, side: &'static str) -> Result<(usize, usize), TrainError> {
    let s = t.shape();
    if s.len() != 2 {
        return Err(TensorError::BadRank {
            op: "infonce",
            expected: 2,
            shape: s.to_vec(),
        }
        .into());
    }
    let (b, e) = (s[0], s[1]);
    for (i, row) in t.data().chunks(e).enumerate() {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOL {
            return Err(TensorError::ContractViolation(format!(
                "{side} embedding row {i} has norm {norm:.6}, expected 1 ± {NORM_TOL}"
            ))
            .into());
        }
    }
    Ok((b, e))
}

/// `½·[meanᵢ CE(logits row i, i) + meanⱼ CE(logits column j, j)]` where
/// `logits = clamp(exp(logit_t), 1, 100) · img·txtᵀ`. Gradients flow into
/// both towers and the temperature.
pub fn infonce_loss(
    g: &mut Graph,
    img_emb: NodeId,
    txt_emb: NodeId,
    logit_t: NodeId,
) -> Result<NodeId, TrainError> {
    let (b, e) = check_normalized(g.value(img_emb), "image")?;
    let (bt, et) = check_normalized(g.value(txt_emb), "text")?;
    if b != bt || e != et {
        return Err(TensorError::ShapeMismatch {
            op: "infonce",
            lhs: vec![b, e],
            rhs: vec![bt, et],
        }
        .into());
    }
    if b == 0 {
        return Err(TensorError::ContractViolation("empty batch".into()).into());
    }

    let scale = g.exp(logit_t)?;
    let scale = g.clamp(scale, LOGIT_SCALE_MIN, LOGIT_SCALE_MAX)?;
    let txt_t = g.transpose(txt_emb)?;
    let sims = g.matmul(img_emb, txt_t)?;
    let logits = g.scale_by(sims, scale)?;

    // pick out the diagonal of each log-softmax with an identity mask
    let mut eye = vec![0.0; b * b];
    for i in 0..b {
        eye[i * b + i] = 1.0;
    }
    let eye = g.input(vec![b, b], eye)?;

    let rows = g.log_softmax(logits, 1)?;
    let rows_diag = g.mul(rows, eye)?;
    let rows_sum = g.sum(rows_diag)?;
    let cols = g.log_softmax(logits, 0)?;
    let cols_diag = g.mul(cols, eye)?;
    let cols_sum = g.sum(cols_diag)?;

    let total = g.add(rows_sum, cols_sum)?;
    Ok(g.mul_scalar(total, -0.5 / b as f64)?)
}
