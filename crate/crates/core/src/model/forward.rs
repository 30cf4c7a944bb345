//! Batched tower forwards on a shared graph.
//!
//! A batch is stacked into one `[B·T, d]` matrix so every linear layer runs
//! as a single matmul; attention slices per-sample (and per-head) views back
//! out. Row-wise kernels make the stacked path bit-identical to running
//! samples one at a time.
//!
//! Masking note: kept patch rows are gathered from the raw input *before*
//! the patch-embedding matmul. Patch embedding and positional addition are
//! per-token, so this commutes exactly with embedding first and masking
//! after — same outputs, same gradients — while the recorded MAC count
//! scales with kept tokens, matching the analytical cost model.

use crate::error::ModelError;
use crate::mask::TokenMask;
use crate::tensor::{Graph, NodeId};

use super::{ModelConfig, ParamNodes, LN_EPS};

const ATTN_MASK_BIAS: f64 = -1e9;

/// One image, already patchified to `[n_tokens, P·P·3]` row-major data.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub patches: Vec<f64>,
    pub n_tokens: usize,
    pub mask: TokenMask,
}

/// One caption: fixed-length ids plus the real-token flags.
#[derive(Debug, Clone)]
pub struct TextSample {
    pub ids: Vec<u32>,
    pub real: Vec<bool>,
}

fn affine_ln(g: &mut Graph, p: &ParamNodes, prefix: &str, x: NodeId) -> Result<NodeId, ModelError> {
    let normed = g.layernorm(x, LN_EPS)?;
    let scaled = g.mul_rows(normed, p.get(&format!("{prefix}.g")))?;
    Ok(g.add_bias(scaled, p.get(&format!("{prefix}.b")))?)
}

fn linear(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, ModelError> {
    let y = g.matmul(x, w)?;
    Ok(g.add_bias(y, b)?)
}

/// Pre-norm transformer block over `[batch·tokens, d]`.
/// `attn_bias` holds one `[tokens, tokens]` additive mask per sample.
fn block(
    g: &mut Graph,
    p: &ParamNodes,
    prefix: &str,
    x: NodeId,
    batch: usize,
    tokens: usize,
    cfg: &ModelConfig,
    attn_bias: Option<&[NodeId]>,
) -> Result<NodeId, ModelError> {
    let d = cfg.width;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let x_ln = affine_ln(g, p, &format!("{prefix}.ln1"), x)?;
    let q = linear(g, x_ln, p.get(&format!("{prefix}.attn.wq")), p.get(&format!("{prefix}.attn.bq")))?;
    let k = linear(g, x_ln, p.get(&format!("{prefix}.attn.wk")), p.get(&format!("{prefix}.attn.bk")))?;
    let v = linear(g, x_ln, p.get(&format!("{prefix}.attn.wv")), p.get(&format!("{prefix}.attn.bv")))?;

    let mut per_sample = Vec::with_capacity(batch);
    for s in 0..batch {
        let qs = g.slice_rows(q, s * tokens, tokens)?;
        let ks = g.slice_rows(k, s * tokens, tokens)?;
        let vs = g.slice_rows(v, s * tokens, tokens)?;
        let mut heads = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let qh = g.slice_cols(qs, h * dh, dh)?;
            let kh = g.slice_cols(ks, h * dh, dh)?;
            let vh = g.slice_cols(vs, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let mut scores = g.mul_scalar(scores, scale)?;
            if let Some(bias) = attn_bias {
                scores = g.add(scores, bias[s])?;
            }
            let attn = g.softmax(scores, 1)?;
            heads.push(g.matmul(attn, vh)?);
        }
        per_sample.push(g.concat_cols(&heads)?);
    }
    let attn_out = g.stack_rows(&per_sample)?;
    let attn_out = linear(
        g,
        attn_out,
        p.get(&format!("{prefix}.attn.wo")),
        p.get(&format!("{prefix}.attn.bo")),
    )?;
    let x = g.add(x, attn_out)?;

    let x_ln = affine_ln(g, p, &format!("{prefix}.ln2"), x)?;
    let h = linear(g, x_ln, p.get(&format!("{prefix}.mlp.w1")), p.get(&format!("{prefix}.mlp.b1")))?;
    let h = g.gelu(h)?;
    let h = linear(g, h, p.get(&format!("{prefix}.mlp.w2")), p.get(&format!("{prefix}.mlp.b2")))?;
    debug_assert_eq!(g.shape(h), &[batch * tokens, d]);
    Ok(g.add(x, h)?)
}

/// Encode a batch of masked images to L2-normalized `[B, e]` embeddings.
/// All samples must share one grid and one kept-token count.
pub fn encode_image_batch(
    g: &mut Graph,
    p: &ParamNodes,
    cfg: &ModelConfig,
    batch: &[ImageSample],
) -> Result<NodeId, ModelError> {
    let b = batch.len();
    if b == 0 {
        return Err(ModelError::BadConfig("empty image batch".into()));
    }
    let patch_dim = cfg.patch() * cfg.patch() * 3;
    let kept = batch[0].mask.n_kept();
    let n_tokens = batch[0].n_tokens;
    for sample in batch {
        if sample.mask.n_tokens() != sample.n_tokens {
            return Err(ModelError::Mask(crate::error::MaskError::GridMismatch {
                tokens: sample.n_tokens,
                h: sample.mask.grid_h,
                w: sample.mask.grid_w,
            }));
        }
        if sample.patches.len() != sample.n_tokens * patch_dim
            || sample.n_tokens != n_tokens
            || sample.mask.n_kept() != kept
        {
            return Err(ModelError::BadConfig(
                "image batch samples disagree on token counts".into(),
            ));
        }
    }

    // gather kept patch rows while the data is still plain input
    let mut stacked = Vec::with_capacity(b * kept * patch_dim);
    for sample in batch {
        for &i in &sample.mask.kept {
            stacked.extend_from_slice(&sample.patches[i * patch_dim..(i + 1) * patch_dim]);
        }
    }
    let input = g.input(vec![b * kept, patch_dim], stacked)?;
    let embedded = linear(g, input, p.get("image.patch_embed.w"), p.get("image.patch_embed.b"))?;

    let cls = usize::from(cfg.use_class_token);
    let pos = p.get("image.pos");
    let tokens = kept + cls;
    let mut per_sample = Vec::with_capacity(b);
    for (s, sample) in batch.iter().enumerate() {
        let xe = g.slice_rows(embedded, s * kept, kept)?;
        let offsets: Vec<usize> = sample.mask.kept.iter().map(|&i| i + cls).collect();
        let pos_rows = g.gather_rows(pos, &offsets)?;
        let with_pos = g.add(xe, pos_rows)?;
        if cfg.use_class_token {
            let pos0 = g.gather_rows(pos, &[0])?;
            let cls_tok = g.add(p.get("image.class"), pos0)?;
            per_sample.push(g.stack_rows(&[cls_tok, with_pos])?);
        } else {
            per_sample.push(with_pos);
        }
    }
    let mut x = g.stack_rows(&per_sample)?;

    for layer in 0..cfg.layers {
        x = block(g, p, &format!("image.block{layer}"), x, b, tokens, cfg, None)?;
    }

    let pooled = if cfg.use_class_token {
        let firsts: Vec<usize> = (0..b).map(|s| s * tokens).collect();
        g.gather_rows(x, &firsts)?
    } else {
        let mut means = Vec::with_capacity(b);
        for s in 0..b {
            let rows = g.slice_rows(x, s * tokens, tokens)?;
            means.push(g.mean_rows(rows)?);
        }
        g.stack_rows(&means)?
    };
    let pooled = affine_ln(g, p, "image.ln_out", pooled)?;
    let projected = g.matmul(pooled, p.get("image.proj"))?;
    Ok(g.l2_normalize(projected, 1)?)
}

/// Encode a batch of equal-length captions to L2-normalized `[B, e]`.
pub fn encode_text_batch(
    g: &mut Graph,
    p: &ParamNodes,
    cfg: &ModelConfig,
    batch: &[TextSample],
) -> Result<NodeId, ModelError> {
    let b = batch.len();
    if b == 0 {
        return Err(ModelError::BadConfig("empty text batch".into()));
    }
    let t = batch[0].ids.len();
    let max_len = g.shape(p.get("text.pos"))[0];
    if t == 0 || t > max_len {
        return Err(ModelError::BadTextLen {
            got: t,
            expected: max_len,
        });
    }
    let vocab = cfg.vocab();
    for sample in batch {
        if sample.ids.len() != t || sample.real.len() != t {
            return Err(ModelError::BadTextLen {
                got: sample.ids.len().min(sample.real.len()),
                expected: t,
            });
        }
        if let Some(&bad) = sample.ids.iter().find(|&&id| id as usize >= vocab) {
            return Err(ModelError::BadTokenId {
                id: bad as usize,
                vocab,
            });
        }
    }

    let tok_embed = p.get("text.tok_embed");
    let pos = p.get("text.pos");
    let pos_slice = g.slice_rows(pos, 0, t)?;
    let mut per_sample = Vec::with_capacity(b);
    let mut biases = Vec::with_capacity(b);
    for sample in batch {
        let ids: Vec<usize> = sample.ids.iter().map(|&i| i as usize).collect();
        let emb = g.gather_rows(tok_embed, &ids)?;
        per_sample.push(g.add(emb, pos_slice)?);

        let mut bias = vec![0.0; t * t];
        for (j, &real) in sample.real.iter().enumerate() {
            if !real {
                for i in 0..t {
                    bias[i * t + j] = ATTN_MASK_BIAS;
                }
            }
        }
        biases.push(g.input(vec![t, t], bias)?);
    }
    let mut x = g.stack_rows(&per_sample)?;

    for layer in 0..cfg.layers {
        x = block(g, p, &format!("text.block{layer}"), x, b, t, cfg, Some(&biases))?;
    }

    // pool at the last real token (position 0 if the caption is all padding)
    let pool_rows: Vec<usize> = batch
        .iter()
        .enumerate()
        .map(|(s, sample)| s * t + sample.real.iter().rposition(|&r| r).unwrap_or(0))
        .collect();
    let pooled = g.gather_rows(x, &pool_rows)?;
    let pooled = affine_ln(g, p, "text.ln_out", pooled)?;
    let projected = g.matmul(pooled, p.get("text.proj"))?;
    Ok(g.l2_normalize(projected, 1)?)
}
