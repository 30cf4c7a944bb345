//! Zero-shot classification and bidirectional retrieval over frozen
//! embeddings. Evaluation never mutates the model; all ranking ties break
//! toward the lower index so results are exactly reproducible.

use serde::{Deserialize, Serialize};

use crate::error::EvalError;
use crate::mask::{truncate_text, TokenMask};
use crate::model::ClipModel;
use crate::tensor::{Precision, Tensor};

/// Per-class slice of the classification result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub name: String,
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
}

/// Recall@{1,5,10}; K is clamped to the sample count, so small sets report
/// the (trivially attained) full recall for oversized K.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Recalls {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1: f64,
    pub per_class: Vec<ClassAccuracy>,
    pub image_to_text: Recalls,
    pub text_to_image: Recalls,
    pub n_samples: usize,
    pub n_classes: usize,
}

fn rows(t: &Tensor) -> (usize, usize) {
    let s = t.shape();
    (s[0], s[1])
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Embed every filled prompt per class, average, re-normalize. The literal
/// `{}` in a template is replaced with the class name.
pub fn build_class_embeddings(
    model: &ClipModel,
    class_names: &[String],
    templates: &[String],
    tokenize: impl Fn(&str) -> Vec<u32>,
) -> Result<Tensor, EvalError> {
    if class_names.is_empty() {
        return Err(EvalError::NoClasses);
    }
    if templates.is_empty() {
        return Err(EvalError::NoTemplates);
    }
    let e = model.cfg.text.embed_dim;
    let text_len = model.cfg.text_len;
    let mut out = Vec::with_capacity(class_names.len() * e);
    for name in class_names {
        let mut mean = vec![0.0; e];
        for template in templates {
            let prompt = template.replace("{}", name);
            let ids = tokenize(&prompt);
            let (ids, real) = truncate_text(&ids, text_len, 0);
            let emb = model.embed_text(&ids, &real, Precision::F64)?;
            for (acc, x) in mean.iter_mut().zip(emb.data()) {
                *acc += x;
            }
        }
        for x in mean.iter_mut() {
            *x /= templates.len() as f64;
        }
        let norm = dot(&mean, &mean).sqrt().max(1e-12);
        out.extend(mean.iter().map(|x| x / norm));
    }
    Ok(Tensor::from_vec(vec![class_names.len(), e], out).expect("C·e elements"))
}

/// Embed a batch of images with no masking (every token kept).
pub fn embed_images_full(
    model: &ClipModel,
    images: &[Tensor],
) -> Result<Tensor, EvalError> {
    let e = model.cfg.image.embed_dim;
    let patch = model.cfg.image.patch();
    let mut out = Vec::with_capacity(images.len() * e);
    for image in images {
        let patches = crate::model::patchify(image, patch)?;
        let grid = image.shape()[0] / patch;
        let mask = TokenMask {
            grid_h: grid,
            grid_w: image.shape()[1] / patch,
            kept: (0..patches.shape()[0]).collect(),
        };
        let emb = model.embed_image(&patches, &mask, Precision::F64)?;
        out.extend_from_slice(emb.data());
    }
    Ok(Tensor::from_vec(vec![images.len(), e], out).expect("N·e elements"))
}

/// Argmax-similarity classification. Returns top-1 accuracy and per-class
/// `(correct, total)` tallies; ties go to the lowest class index.
pub fn zero_shot_classify(
    img_embs: &Tensor,
    class_embs: &Tensor,
    labels: &[usize],
) -> Result<(f64, Vec<(usize, usize)>), EvalError> {
    let (n, e) = rows(img_embs);
    let (c, ec) = rows(class_embs);
    if c == 0 {
        return Err(EvalError::NoClasses);
    }
    if e != ec || labels.len() != n {
        return Err(EvalError::RowMismatch {
            lhs: n,
            rhs: labels.len(),
        });
    }
    let mut tally = vec![(0usize, 0usize); c];
    let mut correct_total = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(EvalError::BadLabel { label, classes: c });
        }
        let img = &img_embs.data()[i * e..(i + 1) * e];
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for j in 0..c {
            let score = dot(img, &class_embs.data()[j * e..(j + 1) * e]);
            if score > best_score {
                best_score = score;
                best = j;
            }
        }
        tally[label].1 += 1;
        if best == label {
            tally[label].0 += 1;
            correct_total += 1;
        }
    }
    Ok((correct_total as f64 / n as f64, tally))
}

/// Fraction of queries whose true pair ranks in the top K by similarity,
/// in both directions: `(image→text, text→image)`.
pub fn retrieval_recall(
    img_embs: &Tensor,
    txt_embs: &Tensor,
    k: usize,
) -> Result<(f64, f64), EvalError> {
    let (n, e) = rows(img_embs);
    let (nt, et) = rows(txt_embs);
    if n != nt || e != et {
        return Err(EvalError::RowMismatch { lhs: n, rhs: nt });
    }
    if k < 1 {
        return Err(EvalError::BadK(k));
    }
    if k > n {
        return Err(EvalError::KTooLarge { k, n });
    }
    let row = |t: &Tensor, i: usize| t.data()[i * e..(i + 1) * e].to_vec();
    let direction = |queries: &Tensor, pool: &Tensor| -> f64 {
        let mut hits = 0usize;
        for i in 0..n {
            let q = row(queries, i);
            let true_score = dot(&q, &row(pool, i));
            // rank = how many candidates beat the true pair (lower index wins ties)
            let rank = (0..n)
                .filter(|&j| {
                    let s = dot(&q, &row(pool, j));
                    s > true_score || (s == true_score && j < i)
                })
                .count();
            if rank < k {
                hits += 1;
            }
        }
        hits as f64 / n as f64
    };
    Ok((direction(img_embs, txt_embs), direction(txt_embs, img_embs)))
}

fn recalls(img_embs: &Tensor, txt_embs: &Tensor) -> Result<Recalls, EvalError> {
    let n = img_embs.shape()[0];
    let at = |k: usize| retrieval_recall(img_embs, txt_embs, k.min(n));
    Ok(Recalls {
        r1: at(1)?.0,
        r5: at(5)?.0,
        r10: at(10)?.0,
    })
}

fn recalls_rev(img_embs: &Tensor, txt_embs: &Tensor) -> Result<Recalls, EvalError> {
    let n = img_embs.shape()[0];
    let at = |k: usize| retrieval_recall(img_embs, txt_embs, k.min(n));
    Ok(Recalls {
        r1: at(1)?.1,
        r5: at(5)?.1,
        r10: at(10)?.1,
    })
}

/// Assemble the full report from frozen embeddings.
pub fn evaluate_embeddings(
    img_embs: &Tensor,
    txt_embs: &Tensor,
    class_embs: &Tensor,
    labels: &[usize],
    class_names: &[String],
) -> Result<EvalReport, EvalError> {
    let (top1, tally) = zero_shot_classify(img_embs, class_embs, labels)?;
    let per_class = class_names
        .iter()
        .zip(&tally)
        .map(|(name, &(correct, total))| ClassAccuracy {
            name: name.clone(),
            total,
            correct,
            accuracy: if total == 0 {
                0.0
            } else {
                correct as f64 / total as f64
            },
        })
        .collect();
    Ok(EvalReport {
        top1,
        per_class,
        image_to_text: recalls(img_embs, txt_embs)?,
        text_to_image: recalls_rev(img_embs, txt_embs)?,
        n_samples: img_embs.shape()[0],
        n_classes: class_names.len(),
    })
}
