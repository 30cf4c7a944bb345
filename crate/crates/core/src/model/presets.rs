//! Named model shapes.
//!
//! The scale presets (S/16 … H/14) exist for compute accounting only — they
//! are far too large to train here. Toy presets are the trainable ones.

use super::{ClipConfig, ModelConfig};

/// (name, image (layers, width, heads, patch), text (layers, width, heads), embed)
type PresetRow = (
    &'static str,
    (usize, usize, usize, usize),
    (usize, usize, usize),
    usize,
);

pub const FLOPS_PRESETS: &[PresetRow] = &[
    ("S/16", (12, 384, 6, 16), (12, 384, 6), 384),
    ("B/16", (12, 768, 12, 16), (12, 512, 8), 512),
    ("L/16", (24, 1024, 16, 16), (12, 768, 12), 768),
    ("L/14", (24, 1024, 16, 14), (12, 768, 12), 768),
    ("H/14", (32, 1280, 16, 14), (24, 1024, 16), 1024),
];

const PRESET_VOCAB: usize = 49408;
const PRESET_TEXT_LEN: usize = 77;

/// Look up a scale preset by name (e.g. "H/14"); case-sensitive.
pub fn flops_preset(name: &str) -> Option<ClipConfig> {
    FLOPS_PRESETS.iter().find(|row| row.0 == name).map(|row| {
        let (_, (il, iw, ih, p), (tl, tw, th), e) = *row;
        ClipConfig {
            image: ModelConfig::image(il, iw, ih, p, e),
            text: ModelConfig::text(tl, tw, th, PRESET_VOCAB, e),
            text_len: PRESET_TEXT_LEN,
        }
    })
}

/// Trainable desk-scale pair: 2-layer towers, width 64, patch 8.
pub fn toy_pair(vocab_size: usize, text_len: usize) -> ClipConfig {
    ClipConfig {
        image: ModelConfig::image(2, 64, 2, 8, 32),
        text: ModelConfig::text(2, 64, 2, vocab_size, 32),
        text_len,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid_configs() {
        for row in FLOPS_PRESETS {
            let cfg = flops_preset(row.0).unwrap();
            cfg.validate().unwrap();
        }
        assert!(flops_preset("Z/99").is_none());
        toy_pair(64, 16).validate().unwrap();
    }

    #[test]
    fn h14_shape_pins() {
        let cfg = flops_preset("H/14").unwrap();
        assert_eq!(cfg.image.layers, 32);
        assert_eq!(cfg.image.width, 1280);
        assert_eq!(cfg.image.patch_size, Some(14));
        assert_eq!(cfg.text.layers, 24);
        assert_eq!(cfg.text.width, 1024);
        assert_eq!(cfg.image.embed_dim, 1024);
    }
}
