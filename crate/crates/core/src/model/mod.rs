//! Two-tower image/text model: ViT image encoder, bidirectional transformer
//! text encoder, projection heads into a shared embedding space, and a
//! learnable temperature.
//!
//! Parameters live outside any graph as named tensors in a fixed order.
//! Each forward pass inserts them as leaves into a fresh [`Graph`]; the
//! optimizer reads gradients back by name after `backward`.

mod checkpoint;
mod forward;
mod pos_resize;
mod presets;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forward::{encode_image_batch, encode_text_batch, ImageSample, TextSample};
pub use pos_resize::resize_pos_embed;
pub use presets::{flops_preset, toy_pair, FLOPS_PRESETS};

use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::rng::SplitMix64;
use crate::tensor::{Graph, NodeId, Precision, Tensor};

pub const LN_EPS: f64 = 1e-5;
pub const LOGIT_SCALE_MIN: f64 = 1.0;
pub const LOGIT_SCALE_MAX: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TowerKind {
    Image,
    Text,
}

/// Shape of one tower.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub tower: TowerKind,
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Image towers only.
    pub patch_size: Option<usize>,
    /// Text towers only.
    pub vocab_size: Option<usize>,
    pub embed_dim: usize,
    pub use_class_token: bool,
}

impl ModelConfig {
    pub fn image(layers: usize, width: usize, heads: usize, patch_size: usize, embed_dim: usize) -> Self {
        Self {
            tower: TowerKind::Image,
            layers,
            width,
            heads,
            mlp_ratio: 4,
            patch_size: Some(patch_size),
            vocab_size: None,
            embed_dim,
            use_class_token: true,
        }
    }

    pub fn text(layers: usize, width: usize, heads: usize, vocab_size: usize, embed_dim: usize) -> Self {
        Self {
            tower: TowerKind::Text,
            layers,
            width,
            heads,
            mlp_ratio: 4,
            patch_size: None,
            vocab_size: None,
            embed_dim,
            use_class_token: false,
        }
        .with_vocab(vocab_size)
    }

    fn with_vocab(mut self, vocab_size: usize) -> Self {
        self.vocab_size = Some(vocab_size);
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(ModelError::BadHeads {
                width: self.width,
                heads: self.heads,
            });
        }
        if self.embed_dim == 0 {
            return Err(ModelError::BadConfig("embed_dim must be >= 1".into()));
        }
        if self.layers == 0 || self.width == 0 || self.mlp_ratio == 0 {
            return Err(ModelError::BadConfig(
                "layers, width, mlp_ratio must be >= 1".into(),
            ));
        }
        match self.tower {
            TowerKind::Image => {
                if self.patch_size.is_none_or(|p| p == 0) {
                    return Err(ModelError::BadConfig(
                        "image tower needs patch_size >= 1".into(),
                    ));
                }
            }
            TowerKind::Text => {
                if self.vocab_size.is_none_or(|v| v == 0) {
                    return Err(ModelError::BadConfig(
                        "text tower needs vocab_size >= 1".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn patch(&self) -> usize {
        self.patch_size.expect("image tower")
    }

    pub fn vocab(&self) -> usize {
        self.vocab_size.expect("text tower")
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// Both towers plus the shared text length cap.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub image: ModelConfig,
    pub text: ModelConfig,
    /// Maximum text tokens the text tower is built for.
    pub text_len: usize,
}

impl ClipConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.image.validate()?;
        self.text.validate()?;
        if self.image.tower != TowerKind::Image || self.text.tower != TowerKind::Text {
            return Err(ModelError::BadConfig("tower kinds swapped".into()));
        }
        if self.image.embed_dim != self.text.embed_dim {
            return Err(ModelError::BadConfig(format!(
                "projection dims differ: image {} vs text {}",
                self.image.embed_dim, self.text.embed_dim
            )));
        }
        if self.text_len == 0 {
            return Err(ModelError::BadConfig("text_len must be >= 1".into()));
        }
        Ok(())
    }
}

/// `(image_side / patch_size)²`.
pub fn tokens_for_resolution(image_side: usize, patch_size: usize) -> Result<usize, ModelError> {
    if patch_size == 0 || image_side % patch_size != 0 {
        return Err(ModelError::BadResolution {
            side: image_side,
            patch: patch_size,
        });
    }
    let g = image_side / patch_size;
    Ok(g * g)
}

/// Split an `[H,W,3]` image into row-major `P×P` patch rows of length `P·P·3`.
pub fn patchify(image: &Tensor, patch_size: usize) -> Result<Tensor, ModelError> {
    let shape = image.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(ModelError::BadConfig(format!(
            "patchify expects [H,W,3], got {shape:?}"
        )));
    }
    let (h, w) = (shape[0], shape[1]);
    if patch_size == 0 || h % patch_size != 0 {
        return Err(ModelError::BadResolution {
            side: h,
            patch: patch_size,
        });
    }
    if w % patch_size != 0 {
        return Err(ModelError::BadResolution {
            side: w,
            patch: patch_size,
        });
    }
    let (gh, gw, p) = (h / patch_size, w / patch_size, patch_size);
    let src = image.data();
    let mut out = Vec::with_capacity(h * w * 3);
    for pi in 0..gh {
        for pj in 0..gw {
            for i in 0..p {
                for j in 0..p {
                    let row = pi * p + i;
                    let col = pj * p + j;
                    let base = (row * w + col) * 3;
                    out.extend_from_slice(&src[base..base + 3]);
                }
            }
        }
    }
    Ok(Tensor::from_vec(vec![gh * gw, p * p * 3], out)?)
}

/// Inverse of [`patchify`]; bit-exact round trip.
pub fn unpatchify(patches: &Tensor, grid_h: usize, grid_w: usize, patch_size: usize) -> Result<Tensor, ModelError> {
    let shape = patches.shape();
    let p = patch_size;
    if shape.len() != 2 || shape[0] != grid_h * grid_w || shape[1] != p * p * 3 {
        return Err(ModelError::BadConfig(format!(
            "unpatchify expects [{}, {}], got {shape:?}",
            grid_h * grid_w,
            p * p * 3
        )));
    }
    let (h, w) = (grid_h * p, grid_w * p);
    let src = patches.data();
    let mut out = vec![0.0; h * w * 3];
    for (t, patch) in src.chunks(p * p * 3).enumerate() {
        let (pi, pj) = (t / grid_w, t % grid_w);
        for i in 0..p {
            for j in 0..p {
                let row = pi * p + i;
                let col = pj * p + j;
                let base = (row * w + col) * 3;
                let pbase = (i * p + j) * 3;
                out[base..base + 3].copy_from_slice(&patch[pbase..pbase + 3]);
            }
        }
    }
    Ok(Tensor::from_vec(vec![h, w, 3], out)?)
}

/// Named parameters in fixed insertion order.
#[derive(Debug, Clone)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push((name.into(), tensor));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn total_elems(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Parameter leaves inserted into one graph, addressable by name.
pub struct ParamNodes {
    ids: Vec<(String, NodeId)>,
}

impl ParamNodes {
    pub fn get(&self, name: &str) -> NodeId {
        self.ids
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.ids.iter().map(|(n, id)| (n.as_str(), *id))
    }
}

/// The full two-tower model with its current input resolution.
#[derive(Debug, Clone)]
pub struct ClipModel {
    pub cfg: ClipConfig,
    pub image_side: usize,
    pub params: ParamSet,
}

impl ClipModel {
    /// Fresh parameters, deterministically initialized from `seed`.
    pub fn new(cfg: ClipConfig, image_side: usize, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let n_tokens = tokens_for_resolution(image_side, cfg.image.patch())?;
        let params = init_params(&cfg, n_tokens, seed);
        Ok(Self {
            cfg,
            image_side,
            params,
        })
    }

    pub fn grid(&self) -> usize {
        self.image_side / self.cfg.image.patch()
    }

    /// Image tokens entering the transformer at ratio 0 (class token included).
    pub fn image_tokens(&self) -> usize {
        self.grid() * self.grid() + usize::from(self.cfg.image.use_class_token)
    }

    /// Insert every parameter into `g` as a leaf; `tracked` enables gradients.
    pub fn leaf_params(&self, g: &mut Graph, tracked: bool) -> ParamNodes {
        let ids = self
            .params
            .iter()
            .map(|(name, tensor)| {
                let t = if tracked {
                    tensor.clone().tracked()
                } else {
                    tensor.clone()
                };
                (name.to_string(), g.leaf(t))
            })
            .collect();
        ParamNodes { ids }
    }

    /// Move to a new input resolution by resizing the positional grid.
    pub fn set_resolution(&mut self, image_side: usize, nearest: bool) -> Result<(), ModelError> {
        let new_tokens = tokens_for_resolution(image_side, self.cfg.image.patch())?;
        if image_side == self.image_side {
            return Ok(());
        }
        let new_grid = (new_tokens as f64).sqrt() as usize;
        let cls = self.cfg.image.use_class_token;
        let pos = self
            .params
            .get("image.pos")
            .expect("image.pos always present");
        let resized = resize_pos_embed(pos, new_grid, cls, nearest)?;
        *self
            .params
            .get_mut("image.pos")
            .expect("image.pos always present") = resized;
        self.image_side = image_side;
        Ok(())
    }

    /// Single-image forward on a fresh graph (training uses the batched path).
    pub fn embed_image(
        &self,
        patches: &Tensor,
        mask: &crate::mask::TokenMask,
        precision: Precision,
    ) -> Result<Tensor, ModelError> {
        let mut g = Graph::new(precision);
        let nodes = self.leaf_params(&mut g, false);
        let sample = ImageSample {
            patches: patches.data().to_vec(),
            n_tokens: patches.shape()[0],
            mask: mask.clone(),
        };
        let out = encode_image_batch(&mut g, &nodes, &self.cfg.image, &[sample])?;
        let e = self.cfg.image.embed_dim;
        let flat = g.reshape(out, vec![e])?;
        Ok(g.value(flat).clone())
    }

    /// Single-text forward on a fresh graph.
    pub fn embed_text(
        &self,
        ids: &[u32],
        attn_mask: &[bool],
        precision: Precision,
    ) -> Result<Tensor, ModelError> {
        let mut g = Graph::new(precision);
        let nodes = self.leaf_params(&mut g, false);
        let sample = TextSample {
            ids: ids.to_vec(),
            real: attn_mask.to_vec(),
        };
        let out = encode_text_batch(&mut g, &nodes, &self.cfg.text, &[sample])?;
        let e = self.cfg.text.embed_dim;
        let flat = g.reshape(out, vec![e])?;
        Ok(g.value(flat).clone())
    }

    /// Current `exp(t)` clamped to `[1, 100]`.
    pub fn logit_scale(&self) -> f64 {
        let t = self.params.get("logit_t").expect("logit_t present").data()[0];
        t.exp().clamp(LOGIT_SCALE_MIN, LOGIT_SCALE_MAX)
    }
}

fn init_params(cfg: &ClipConfig, n_image_tokens: usize, seed: u64) -> ParamSet {
    let mut params = ParamSet::new();
    let mut next_key = 0u64;
    let mut fill = |shape: Vec<usize>, std: f64, constant: Option<f64>| -> Tensor {
        let n: usize = shape.iter().product();
        let data = match constant {
            Some(c) => vec![c; n],
            None => {
                let mut rng = SplitMix64::keyed(seed, next_key);
                (0..n).map(|_| rng.next_normal() * std).collect()
            }
        };
        next_key += 1;
        Tensor::from_vec(shape, data).expect("init shapes consistent")
    };

    let img = &cfg.image;
    let d = img.width;
    let s = img.patch() * img.patch() * 3;
    params.push("image.patch_embed.w", fill(vec![s, d], 0.02, None));
    params.push("image.patch_embed.b", fill(vec![d], 0.0, Some(0.0)));
    if img.use_class_token {
        params.push("image.class", fill(vec![1, d], 0.02, None));
    }
    let n_pos = n_image_tokens + usize::from(img.use_class_token);
    params.push("image.pos", fill(vec![n_pos, d], 0.01, None));
    push_blocks(&mut params, "image", img, &mut fill);
    params.push("image.proj", fill(vec![d, img.embed_dim], 1.0 / (d as f64).sqrt(), None));

    let txt = &cfg.text;
    let d = txt.width;
    params.push("text.tok_embed", fill(vec![txt.vocab(), d], 0.02, None));
    params.push("text.pos", fill(vec![cfg.text_len, d], 0.01, None));
    push_blocks(&mut params, "text", txt, &mut fill);
    params.push("text.proj", fill(vec![d, txt.embed_dim], 1.0 / (d as f64).sqrt(), None));

    params.push(
        "logit_t",
        Tensor::from_vec(vec![1], vec![(1.0f64 / 0.07).ln()]).expect("scalar"),
    );
    params
}

fn push_blocks(
    params: &mut ParamSet,
    tower: &str,
    cfg: &ModelConfig,
    fill: &mut impl FnMut(Vec<usize>, f64, Option<f64>) -> Tensor,
) {
    let d = cfg.width;
    let m = cfg.mlp_ratio * d;
    for i in 0..cfg.layers {
        let p = format!("{tower}.block{i}");
        params.push(format!("{p}.ln1.g"), fill(vec![d], 0.0, Some(1.0)));
        params.push(format!("{p}.ln1.b"), fill(vec![d], 0.0, Some(0.0)));
        for w in ["wq", "wk", "wv", "wo"] {
            params.push(format!("{p}.attn.{w}"), fill(vec![d, d], 0.02, None));
        }
        for b in ["bq", "bk", "bv", "bo"] {
            params.push(format!("{p}.attn.{b}"), fill(vec![d], 0.0, Some(0.0)));
        }
        params.push(format!("{p}.ln2.g"), fill(vec![d], 0.0, Some(1.0)));
        params.push(format!("{p}.ln2.b"), fill(vec![d], 0.0, Some(0.0)));
        params.push(format!("{p}.mlp.w1"), fill(vec![d, m], 0.02, None));
        params.push(format!("{p}.mlp.b1"), fill(vec![m], 0.0, Some(0.0)));
        params.push(format!("{p}.mlp.w2"), fill(vec![m, d], 0.02, None));
        params.push(format!("{p}.mlp.b2"), fill(vec![d], 0.0, Some(0.0)));
    }
    params.push(format!("{tower}.ln_out.g"), fill(vec![d], 0.0, Some(1.0)));
    params.push(format!("{tower}.ln_out.b"), fill(vec![d], 0.0, Some(0.0)));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokens_for_resolution_examples() {
        assert_eq!(tokens_for_resolution(84, 14).unwrap(), 36);
        assert_eq!(tokens_for_resolution(224, 14).unwrap(), 256);
        assert_eq!(tokens_for_resolution(70, 14).unwrap(), 25);
        assert!(matches!(
            tokens_for_resolution(100, 14),
            Err(ModelError::BadResolution { .. })
        ));
    }

    #[test]
    fn patchify_single_and_quad() {
        let img = Tensor::from_vec(vec![14, 14, 3], (0..14 * 14 * 3).map(|i| i as f64).collect()).unwrap();
        let p = patchify(&img, 14).unwrap();
        assert_eq!(p.shape(), &[1, 588]);
        assert_eq!(p.data(), img.data());

        let img = Tensor::from_vec(vec![28, 28, 3], (0..28 * 28 * 3).map(|i| i as f64).collect()).unwrap();
        let p = patchify(&img, 14).unwrap();
        assert_eq!(p.shape(), &[4, 588]);
        // row-major patch order: patch 0 starts at pixel (0,0), patch 1 at (0,14)
        assert_eq!(p.data()[0], 0.0);
        assert_eq!(p.data()[588], (14 * 3) as f64);
        // patch 2 at (14,0), patch 3 at (14,14)
        assert_eq!(p.data()[2 * 588], (14 * 28 * 3) as f64);
        assert_eq!(p.data()[3 * 588], ((14 * 28 + 14) * 3) as f64);
    }

    #[test]
    fn patchify_round_trip() {
        let mut rng = SplitMix64::new(5);
        let img = Tensor::from_vec(
            vec![16, 24, 3],
            (0..16 * 24 * 3).map(|_| rng.next_f64()).collect(),
        )
        .unwrap();
        let p = patchify(&img, 8).unwrap();
        let back = unpatchify(&p, 2, 3, 8).unwrap();
        assert_eq!(back.shape(), img.shape());
        assert_eq!(back.data(), img.data());
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::image(2, 64, 2, 8, 32);
        cfg.validate().unwrap();
        cfg.heads = 3;
        assert!(matches!(cfg.validate(), Err(ModelError::BadHeads { .. })));

        let text = ModelConfig::text(2, 64, 2, 100, 32);
        text.validate().unwrap();

        let clip = ClipConfig {
            image: ModelConfig::image(2, 64, 2, 8, 32),
            text: ModelConfig::text(2, 64, 2, 100, 48),
            text_len: 16,
        };
        assert!(clip.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_and_insertion_order_independent_of_reruns() {
        let cfg = ClipConfig {
            image: ModelConfig::image(2, 32, 2, 8, 16),
            text: ModelConfig::text(2, 32, 2, 50, 16),
            text_len: 8,
        };
        let a = ClipModel::new(cfg.clone(), 32, 7).unwrap();
        let b = ClipModel::new(cfg, 32, 7).unwrap();
        for ((na, ta), (nb, tb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
        assert!(a.params.get("image.class").is_some());
        assert_eq!(a.params.get("image.pos").unwrap().shape(), &[17, 32]);
        assert!((a.logit_scale() - 1.0 / 0.07).abs() < 1e-9);
    }
}
