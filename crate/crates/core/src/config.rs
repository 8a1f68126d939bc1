//! Network configuration: the JSON document, the backbone knobs, and the
//! detection post-processing settings.
//!
//! The JSON config carries exactly eight fields (all optional, defaults
//! below): `input_size`, `num_tums`, `tum_channels`, `base_compress_shallow`,
//! `base_compress_deep`, `se_reduction`, `num_classes`, `seed`. Backbone
//! widths and NMS thresholds are programmatic settings, not part of the
//! document.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::conv_out_extent;

/// Number of pyramid scales emitted per level. The encoder has five stride-2
/// convolutions, so counting the input there are always six scales.
pub const NUM_SCALES: usize = 6;

/// Anchors per grid cell: 3 aspect ratios x 2 sizes.
pub const ANCHORS_PER_CELL: usize = 6;

fn d_input_size() -> usize {
    320
}
fn d_num_tums() -> usize {
    8
}
fn d_tum_channels() -> usize {
    256
}
fn d_base_compress_shallow() -> usize {
    256
}
fn d_base_compress_deep() -> usize {
    512
}
fn d_se_reduction() -> usize {
    16
}
fn d_num_classes() -> usize {
    81
}
fn d_seed() -> u64 {
    0
}

/// Top-level network configuration (the JSON document).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Square input resolution in pixels.
    #[serde(default = "d_input_size")]
    pub input_size: usize,
    /// Number of stacked TUM levels (L).
    #[serde(default = "d_num_tums")]
    pub num_tums: usize,
    /// Per-scale decoder width (C); every TUM output has this many channels.
    #[serde(default = "d_tum_channels")]
    pub tum_channels: usize,
    /// Channels the shallow backbone tap is compressed to inside FFMv1.
    #[serde(default = "d_base_compress_shallow")]
    pub base_compress_shallow: usize,
    /// Channels the deep backbone tap is compressed to inside FFMv1.
    #[serde(default = "d_base_compress_deep")]
    pub base_compress_deep: usize,
    /// Squeeze-excitation reduction ratio (r); hidden width = L*C/r.
    #[serde(default = "d_se_reduction")]
    pub se_reduction: usize,
    /// Detection classes including background (class 0).
    #[serde(default = "d_num_classes")]
    pub num_classes: usize,
    /// Master seed for parameter initialization.
    #[serde(default = "d_seed")]
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults are total")
    }
}

/// Spatial extent after one 3x3 stride-2 pad-1 convolution:
/// floor((s - 1) / 2) + 1 = ceil(s / 2).
#[inline]
pub fn halve(extent: usize) -> usize {
    extent.div_ceil(2)
}

impl NetworkConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: NetworkConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("config document: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct")
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "input_size must be a positive multiple of 32, got {}",
                self.input_size
            )));
        }
        if self.num_tums < 1 {
            return Err(Error::Config("num_tums must be >= 1".into()));
        }
        if self.tum_channels < self.se_reduction || self.se_reduction < 1 {
            return Err(Error::Config(format!(
                "need tum_channels >= se_reduction >= 1, got {} and {}",
                self.tum_channels, self.se_reduction
            )));
        }
        if self.base_compress_shallow < 1 || self.base_compress_deep < 1 {
            return Err(Error::Config("base compression widths must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be >= 2 (class 0 is background), got {}",
                self.num_classes
            )));
        }
        // The last encoder convolution runs unpadded; it needs a 3x3 map.
        self.scale_extents().map(|_| ())
    }

    /// Base feature width B after FFMv1.
    pub fn base_channels(&self) -> usize {
        self.base_compress_shallow + self.base_compress_deep
    }

    /// Channels of each aggregated pyramid feature (L*C).
    pub fn aggregated_channels(&self) -> usize {
        self.num_tums * self.tum_channels
    }

    /// Squeeze-excitation hidden width, floor(L*C / r).
    pub fn se_hidden(&self) -> usize {
        self.aggregated_channels() / self.se_reduction
    }

    /// Spatial size of the shallow backbone tap (stride 8).
    pub fn shallow_extent(&self) -> usize {
        self.input_size / 8
    }

    /// Spatial size of the deep backbone tap (stride 16).
    pub fn deep_extent(&self) -> usize {
        self.input_size / 16
    }

    /// The six pyramid extents, largest first. The first five encoder steps
    /// use pad 1 (ceil halving); the last uses pad 0, which fails when the
    /// preceding map is smaller than the kernel.
    pub fn scale_extents(&self) -> Result<[usize; NUM_SCALES]> {
        let mut e = [0usize; NUM_SCALES];
        e[0] = self.shallow_extent();
        for k in 1..NUM_SCALES - 1 {
            e[k] = halve(e[k - 1]);
        }
        e[NUM_SCALES - 1] = conv_out_extent(e[NUM_SCALES - 2], 3, 2, 0).map_err(|_| {
            Error::Config(format!(
                "input_size {} leaves a {}-pixel map before the final unpadded \
                 stride-2 convolution; need at least 3",
                self.input_size,
                e[NUM_SCALES - 2]
            ))
        })?;
        Ok(e)
    }
}

/// Backbone structure: four Conv->ReLU stages, each opening with a stride-2
/// convolution, tapped after stage 3 (stride 8) and stage 4 (stride 16).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub input_size: usize,
    /// Channels of the stride-8 tap (stage 3 width).
    pub shallow_channels: usize,
    /// Channels of the stride-16 tap (stage 4 width).
    pub deep_channels: usize,
    /// Downsampling factor of the shallow tap. Fixed at 8 by the stage
    /// structure; kept as a field so configs state it explicitly.
    pub shallow_stride: usize,
    /// Downsampling factor of the deep tap. Fixed at 16.
    pub deep_stride: usize,
    /// Conv->ReLU blocks per stage; the first is the strided one.
    pub stem_depth: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_size: 320,
            shallow_channels: 512,
            deep_channels: 1024,
            shallow_stride: 8,
            deep_stride: 16,
            stem_depth: 2,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    /// Default backbone matched to a network config (same input size and
    /// seed, so the pair cannot drift apart).
    pub fn for_network(net: &NetworkConfig) -> Self {
        Self {
            input_size: net.input_size,
            seed: net.seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "backbone input_size must be a positive multiple of 32, got {}",
                self.input_size
            )));
        }
        if self.shallow_stride != 8 || self.deep_stride != 16 {
            return Err(Error::Config(format!(
                "tap strides are fixed at 8/16 by the stage structure, got {}/{}",
                self.shallow_stride, self.deep_stride
            )));
        }
        if self.stem_depth < 1 {
            return Err(Error::Config("stem_depth must be >= 1".into()));
        }
        if self.shallow_channels < 1 || self.deep_channels < 1 {
            return Err(Error::Config("backbone widths must be >= 1".into()));
        }
        Ok(())
    }

    /// Output width of each of the four stages. The two early stages ramp up
    /// toward the shallow tap width.
    pub fn stage_widths(&self) -> [usize; 4] {
        [
            (self.shallow_channels / 4).max(1),
            (self.shallow_channels / 2).max(1),
            self.shallow_channels,
            self.deep_channels,
        ]
    }
}

/// Detection post-processing knobs. Not part of the JSON config document.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectSettings {
    /// Minimum class score (strict) for a candidate to enter NMS.
    pub score_thresh: f32,
    /// Per-class candidate cap before NMS, highest scores first.
    pub pre_nms_top_k: usize,
    /// Overlap at or above which soft-NMS decays a neighbor's score.
    pub nms_iou_thresh: f32,
    /// Emitted boxes below this rescaled score are dropped.
    pub nms_final_thresh: f32,
    /// Cap on emitted boxes per class and per image.
    pub nms_top_k: usize,
    /// Clamp anchor corners into [0,1] before decoding.
    pub clip_anchors: bool,
    /// SSD box-coding variances (cx, cy, w, h).
    pub variances: [f32; 4],
}

impl Default for DetectSettings {
    fn default() -> Self {
        Self {
            score_thresh: 0.05,
            pre_nms_top_k: 1000,
            nms_iou_thresh: 0.3,
            nms_final_thresh: 0.01,
            nms_top_k: 200,
            clip_anchors: false,
            variances: [0.1, 0.1, 0.2, 0.2],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_network() {
        let cfg = NetworkConfig::default();
        assert_eq!(cfg.input_size, 320);
        assert_eq!(cfg.num_tums, 8);
        assert_eq!(cfg.tum_channels, 256);
        assert_eq!(cfg.base_channels(), 768);
        assert_eq!(cfg.se_reduction, 16);
        assert_eq!(cfg.num_classes, 81);
        assert_eq!(cfg.aggregated_channels(), 2048);
        assert_eq!(cfg.se_hidden(), 128);
        cfg.validate().unwrap();
    }

    #[test]
    fn scale_extents_320_and_512() {
        let cfg = NetworkConfig::default();
        assert_eq!(cfg.scale_extents().unwrap(), [40, 20, 10, 5, 3, 1]);
        let cfg = NetworkConfig {
            input_size: 512,
            ..NetworkConfig::default()
        };
        assert_eq!(cfg.scale_extents().unwrap(), [64, 32, 16, 8, 4, 1]);
    }

    #[test]
    fn unreachable_padding_schedule_rejected() {
        // 256/8 = 32 -> 16 -> 8 -> 4 -> 2: too small for the unpadded conv
        let cfg = NetworkConfig {
            input_size: 256,
            ..NetworkConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn halving_is_ceil() {
        assert_eq!(halve(40), 20);
        assert_eq!(halve(5), 3);
        assert_eq!(halve(3), 2);
        assert_eq!(halve(64), 32);
    }

    #[test]
    fn json_roundtrip_and_partial_documents() {
        let cfg = NetworkConfig::from_json("{}").unwrap();
        assert_eq!(cfg, NetworkConfig::default());

        let cfg = NetworkConfig::from_json(r#"{"num_tums": 4, "tum_channels": 128}"#).unwrap();
        assert_eq!(cfg.num_tums, 4);
        assert_eq!(cfg.tum_channels, 128);
        assert_eq!(cfg.input_size, 320);

        let back = NetworkConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_field_rejected_with_position() {
        let err = NetworkConfig::from_json(r#"{"input_sise": 320}"#).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("input_sise"), "{msg}");
        assert!(msg.contains("line"), "{msg}");
    }

    #[test]
    fn invariant_violations_rejected() {
        let bad = |f: fn(&mut NetworkConfig)| {
            let mut cfg = NetworkConfig::default();
            f(&mut cfg);
            cfg.validate().unwrap_err()
        };
        bad(|c| c.input_size = 300);
        bad(|c| c.num_tums = 0);
        bad(|c| c.tum_channels = 8); // < se_reduction 16
        bad(|c| c.se_reduction = 0);
        bad(|c| c.num_classes = 1);
        bad(|c| c.base_compress_deep = 0);
    }

    #[test]
    fn backbone_defaults_and_validation() {
        let b = BackboneConfig::default();
        b.validate().unwrap();
        assert_eq!(b.stage_widths(), [128, 256, 512, 1024]);
        assert_eq!(b.deep_stride, 2 * b.shallow_stride);

        let bad = BackboneConfig {
            shallow_stride: 4,
            deep_stride: 8,
            ..BackboneConfig::default()
        };
        assert!(bad.validate().is_err());

        let net = NetworkConfig {
            input_size: 512,
            seed: 9,
            ..NetworkConfig::default()
        };
        let b = BackboneConfig::for_network(&net);
        assert_eq!((b.input_size, b.seed), (512, 9));
    }

    #[test]
    fn detect_settings_defaults() {
        let d = DetectSettings::default();
        assert_eq!(d.score_thresh, 0.05);
        assert_eq!(d.pre_nms_top_k, 1000);
        assert_eq!(d.nms_iou_thresh, 0.3);
        assert_eq!(d.nms_final_thresh, 0.01);
        assert_eq!(d.nms_top_k, 200);
        assert_eq!(d.variances, [0.1, 0.1, 0.2, 0.2]);
        assert!(!d.clip_anchors);
    }
}
