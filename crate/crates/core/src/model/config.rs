//! Architecture hyperparameters and the named presets.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::kernels::NormKind;

/// Activation turning the per-source latents into masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskActivation {
    /// Softmax across sources; masks sum to one.
    Softmax,
    /// Independent elementwise ReLU per source.
    Relu,
}

/// Where the activation in front of a block's channel-contracting
/// point-wise convolution sits.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreluPlacement {
    /// PReLU over the expanded channels, before the contraction.
    #[default]
    BeforeContraction,
    /// PReLU over the block's I/O channels, after the contraction.
    AfterContraction,
}

/// All architecture hyperparameters. Field names are the config-file keys.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Encoder/decoder kernel length in samples; the stride is half of it.
    pub enc_kernel: usize,
    /// Number of encoder basis signals.
    pub enc_channels: usize,
    /// Channels entering and leaving each block.
    pub block_io_channels: usize,
    /// Channels inside a block after the point-wise expansion.
    pub block_expanded_channels: usize,
    /// Depth-wise kernel length inside blocks.
    pub block_kernel: usize,
    /// Temporal downsampling factor of each resampling step.
    pub block_stride: usize,
    /// Number of successive downsamplings per block.
    pub resampling_depth: usize,
    pub num_blocks: usize,
    pub num_sources: usize,
    pub norm_kind: NormKind,
    pub mask_activation: MaskActivation,
    /// Either 1 (shared decoder) or `num_sources`.
    pub num_decoders: usize,
    #[serde(default)]
    pub contraction_prelu: PreluPlacement,
}

/// Names accepted by [`preset`].
pub const PRESET_NAMES: &[&str] = &[
    "1.0x",
    "0.5x",
    "0.25x",
    "ablation-row-1",
    "ablation-row-2",
    "ablation-row-3",
    "ablation-row-4",
    "ablation-row-5",
    "ablation-row-6",
    "ablation-row-7",
    "ablation-row-8",
    "ablation-row-9",
    "tiny",
    "gradcheck-tiny",
];

/// `(enc_kernel, block_io_channels, num_blocks, resampling_depth, norm, mask, decoders)`
/// for each row of the ablation table.
const ABLATION_ROWS: [(usize, usize, usize, usize, NormKind, MaskActivation, usize); 9] = {
    use MaskActivation::{Relu, Softmax};
    use NormKind::{Channelwise as Ln, Global as Gln};
    [
        (21, 128, 16, 4, Ln, Softmax, 2),
        (17, 128, 16, 4, Ln, Relu, 1),
        (17, 128, 16, 4, Gln, Relu, 1),
        (21, 256, 20, 4, Gln, Relu, 1),
        (41, 256, 32, 4, Gln, Relu, 1),
        (41, 256, 20, 4, Gln, Relu, 1),
        (21, 512, 18, 7, Gln, Relu, 1),
        (21, 512, 20, 2, Gln, Relu, 1),
        (21, 512, 34, 4, Gln, Relu, 1),
    ]
};

impl ModelConfig {
    /// The full-size configuration with `num_blocks` blocks.
    pub fn standard(num_blocks: usize) -> Self {
        Self {
            enc_kernel: 21,
            enc_channels: 512,
            block_io_channels: 128,
            block_expanded_channels: 512,
            block_kernel: 5,
            block_stride: 2,
            resampling_depth: 4,
            num_blocks,
            num_sources: 2,
            norm_kind: NormKind::Channelwise,
            mask_activation: MaskActivation::Softmax,
            num_decoders: 2,
            contraction_prelu: PreluPlacement::BeforeContraction,
        }
    }

    /// Small configuration used for the overfitting experiment.
    pub fn tiny() -> Self {
        Self {
            enc_channels: 64,
            block_io_channels: 32,
            block_expanded_channels: 64,
            resampling_depth: 2,
            ..Self::standard(2)
        }
    }

    /// Smallest configuration used for end-to-end gradient checks. Global
    /// normalization keeps every parameter's gradient away from zero; with
    /// channel-wise normalization the biases of convolutions feeding a norm
    /// have an exactly zero gradient.
    pub fn gradcheck_tiny() -> Self {
        Self {
            norm_kind: NormKind::Global,
            enc_channels: 8,
            block_io_channels: 4,
            block_expanded_channels: 8,
            resampling_depth: 2,
            ..Self::standard(1)
        }
    }

    pub fn enc_stride(&self) -> usize {
        self.enc_kernel / 2
    }

    /// Encoded frame count for `samples` input samples.
    pub fn encoded_len(&self, samples: usize) -> usize {
        samples.div_ceil(self.enc_stride())
    }

    /// Total temporal reduction inside a block.
    pub fn resampling_factor(&self) -> usize {
        self.block_stride.pow(self.resampling_depth as u32)
    }

    /// Frame count after right-padding to a multiple of the resampling factor.
    pub fn padded_len(&self, frames: usize) -> usize {
        frames.div_ceil(self.resampling_factor()) * self.resampling_factor()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("enc_channels", self.enc_channels),
            ("block_io_channels", self.block_io_channels),
            ("block_expanded_channels", self.block_expanded_channels),
            ("block_kernel", self.block_kernel),
            ("block_stride", self.block_stride),
            ("resampling_depth", self.resampling_depth),
            ("num_blocks", self.num_blocks),
            ("num_sources", self.num_sources),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(invalid(format!("{name} must be >= 1")));
            }
        }
        if self.enc_kernel < 2 {
            return Err(invalid("enc_kernel must be >= 2 so the stride is at least 1"));
        }
        if self.num_decoders != 1 && self.num_decoders != self.num_sources {
            return Err(invalid(format!(
                "num_decoders must be 1 or num_sources ({}), got {}",
                self.num_sources, self.num_decoders
            )));
        }
        if self.block_stride.checked_pow(self.resampling_depth as u32).is_none() {
            return Err(invalid("block_stride ^ resampling_depth overflows"));
        }
        Ok(())
    }
}

/// Looks up a named configuration.
pub fn preset(name: &str) -> Result<ModelConfig> {
    let cfg = match name {
        "1.0x" => ModelConfig::standard(16),
        "0.5x" => ModelConfig::standard(8),
        "0.25x" => ModelConfig::standard(4),
        "tiny" => ModelConfig::tiny(),
        "gradcheck-tiny" => ModelConfig::gradcheck_tiny(),
        _ => {
            let row = name
                .strip_prefix("ablation-row-")
                .and_then(|r| r.parse::<usize>().ok())
                .filter(|r| (1..=ABLATION_ROWS.len()).contains(r))
                .ok_or_else(|| {
                    invalid(format!("unknown preset {name:?}; valid presets: {}", PRESET_NAMES.join(", ")))
                })?;
            let (k, c_out, b, q, norm, act, dec) = ABLATION_ROWS[row - 1];
            ModelConfig {
                enc_kernel: k,
                block_io_channels: c_out,
                num_blocks: b,
                resampling_depth: q,
                norm_kind: norm,
                mask_activation: act,
                num_decoders: dec,
                ..ModelConfig::standard(b)
            }
        }
    };
    Ok(cfg)
}

/// The nine ablation-table configurations in row order.
pub fn ablation_rows() -> Vec<ModelConfig> {
    (1..=ABLATION_ROWS.len())
        .map(|r| preset(&format!("ablation-row-{r}")).expect("row exists"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_size_preset() {
        let c = preset("1.0x").unwrap();
        assert_eq!(
            (c.num_blocks, c.enc_kernel, c.enc_channels, c.block_io_channels),
            (16, 21, 512, 128)
        );
        assert_eq!(
            (c.block_expanded_channels, c.resampling_depth, c.block_kernel, c.block_stride),
            (512, 4, 5, 2)
        );
    }

    #[test]
    fn smaller_presets_only_change_depth() {
        assert_eq!(preset("0.5x").unwrap(), ModelConfig { num_blocks: 8, ..preset("1.0x").unwrap() });
        assert_eq!(preset("0.25x").unwrap(), ModelConfig { num_blocks: 4, ..preset("1.0x").unwrap() });
    }

    #[test]
    fn last_ablation_row() {
        let c = preset("ablation-row-9").unwrap();
        assert_eq!((c.enc_kernel, c.block_io_channels, c.num_blocks, c.resampling_depth), (21, 512, 34, 4));
        assert_eq!(c.norm_kind, NormKind::Global);
        assert_eq!(c.mask_activation, MaskActivation::Relu);
        assert_eq!(c.num_decoders, 1);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_preset_lists_valid_names() {
        let err = preset("bogus").unwrap_err().to_string();
        assert!(err.contains("1.0x") && err.contains("ablation-row-9"));
        assert!(preset("ablation-row-10").is_err());
        assert!(preset("ablation-row-0").is_err());
    }

    #[test]
    fn every_preset_validates() {
        for name in PRESET_NAMES {
            preset(name).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn encoder_geometry() {
        let c = preset("1.0x").unwrap();
        assert_eq!(c.enc_stride(), 10);
        assert_eq!(c.encoded_len(8000), 800);
        assert_eq!(c.encoded_len(8001), 801);
        assert_eq!(c.padded_len(800), 800);
        assert_eq!(c.padded_len(801), 816);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = ModelConfig::tiny();
        assert!(ModelConfig { enc_kernel: 1, ..base.clone() }.validate().is_err());
        assert!(ModelConfig { num_blocks: 0, ..base.clone() }.validate().is_err());
        assert!(ModelConfig { resampling_depth: 0, ..base.clone() }.validate().is_err());
        assert!(ModelConfig { num_decoders: 3, ..base }.validate().is_err());
    }

    #[test]
    fn config_file_round_trip() {
        let c = preset("ablation-row-4").unwrap();
        let text = serde_json::to_string_pretty(&c).unwrap();
        assert!(text.contains("\"block_io_channels\": 256"));
        assert_eq!(serde_json::from_str::<ModelConfig>(&text).unwrap(), c);
        assert!(serde_json::from_str::<ModelConfig>(r#"{"enc_kernel": 3}"#).is_err());
    }
}
