//! The three networks: backbone with multi-layer fusion (DCN), proposal
//! network (PN) and fine-tuning network (FTN).

mod checkpoint;
mod network;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::anchors::{AnchorSpec, Ratio};
use crate::geom::BBox;
use crate::tensor::{Tensor, TensorError};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use network::{DcnNodes, DetectOptions, FtnNodes, Model, PnNodes, StageTimes};

/// Number of backbone blocks; blocks 1-4 are followed by 2x2 max pooling.
pub const BACKBONE_BLOCKS: usize = 5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("parameter {0} missing from checkpoint")]
    MissingParameter(String),
    #[error("checkpoint has unexpected parameter {0}")]
    UnexpectedParameter(String),
    #[error("image shape {found:?} does not match configured [3, {h}, {w}]")]
    ImageShape { found: Vec<usize>, h: u32, w: u32 },
}

/// How the backbone feature maps feed the hyper feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    LastLayerOnly,
    MultiLayer,
}

/// Whether the FTN head also sees the proposal's PN fc feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConcatMode {
    FtnOnly,
    PnPlusFtn,
}

/// Backbone weight initialization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitScheme {
    /// Zero-mean Gaussian with the configured `init_std`.
    Gaussian,
    /// Zero-mean Gaussian with variance `2 / fan_in`.
    He,
}

macro_rules! enum_text {
    ($t:ty { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$variant => $text),+ })
            }
        }

        impl FromStr for $t {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($text => Ok(Self::$variant),)+
                    _ => Err(format!("expected one of: {}", [$($text),+].join(", "))),
                }
            }
        }
    };
}

enum_text!(FusionMode { LastLayerOnly => "last-layer-only", MultiLayer => "multi-layer" });
enum_text!(ConcatMode { FtnOnly => "ftn-only", PnPlusFtn => "pn-plus-ftn" });
enum_text!(InitScheme { Gaussian => "gaussian", He => "he" });

/// Every architectural constant of the detector.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_w: u32,
    pub image_h: u32,
    /// Output channels of the five backbone blocks.
    pub backbone_widths: Vec<usize>,
    /// 1-based backbone blocks concatenated into the hyper feature map.
    pub fusion_layers: Vec<usize>,
    /// Block whose resolution the fused maps are aligned to.
    pub align_block: usize,
    /// Hyper feature map size; zero means the align block's native size.
    pub feature_w: usize,
    pub feature_h: usize,
    /// conv6_1 filters.
    pub pn_conv_filters: usize,
    /// conv6_2 filters.
    pub ftn_conv_filters: usize,
    pub head_kernel: usize,
    /// ReLU after conv6_1/conv6_2.
    pub head_relu: bool,
    pub pn_fc_dim: usize,
    pub ftn_fc_dim: usize,
    pub roi_size: usize,
    pub grid_w: usize,
    pub grid_h: usize,
    pub anchor_scales: Vec<f64>,
    pub anchor_ratios: Vec<Ratio>,
    pub pn_score_threshold: f64,
    pub pn_nms_threshold: f64,
    pub pn_keep: usize,
    /// NMS applied to the refined detections.
    pub ftn_nms_threshold: f64,
    pub final_score_threshold: f64,
    pub fusion_mode: FusionMode,
    pub concat_mode: ConcatMode,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub init_std: f64,
    pub dcn_init: InitScheme,
}

impl ModelConfig {
    /// Full-scale constants (960x540 frames, 64x36 anchor grid, five scales,
    /// three ratios, 256x144 hyper map). Too heavy to train on a CPU.
    pub fn paper() -> Self {
        Self {
            image_w: 960,
            image_h: 540,
            backbone_widths: vec![64, 128, 256, 512, 512],
            fusion_layers: vec![1, 3, 5],
            align_block: 3,
            feature_w: 256,
            feature_h: 144,
            pn_conv_filters: 4,
            ftn_conv_filters: 64,
            head_kernel: 3,
            head_relu: true,
            pn_fc_dim: 128,
            ftn_fc_dim: 512,
            roi_size: 14,
            grid_w: 64,
            grid_h: 36,
            anchor_scales: vec![32.0, 64.0, 128.0, 256.0, 512.0],
            anchor_ratios: vec![Ratio::new(1.0, 2.0), Ratio::new(2.0, 1.0), Ratio::new(1.0, 1.0)],
            pn_score_threshold: 0.05,
            pn_nms_threshold: 0.7,
            pn_keep: 800,
            ftn_nms_threshold: 0.45,
            final_score_threshold: 0.5,
            fusion_mode: FusionMode::MultiLayer,
            concat_mode: ConcatMode::PnPlusFtn,
            bn_eps: 1e-5,
            bn_momentum: 0.9,
            init_std: 0.01,
            dcn_init: InitScheme::Gaussian,
        }
    }

    /// CPU-trainable scale: 128x96 frames, 16x12 grid with 9 anchors per cell.
    /// The hyper map sits at block 2 (stride 2) so ROI pooling can resolve
    /// the few-pixel offsets that decide IoU 0.7 on 16-40 px vehicles.
    pub fn desk() -> Self {
        Self {
            image_w: 128,
            image_h: 96,
            backbone_widths: vec![8, 16, 32, 32, 32],
            align_block: 2,
            feature_w: 0,
            feature_h: 0,
            ftn_conv_filters: 32,
            roi_size: 7,
            grid_w: 16,
            grid_h: 12,
            anchor_scales: vec![16.0, 24.0, 36.0],
            pn_keep: 160,
            dcn_init: InitScheme::He,
            ..Self::paper()
        }
    }

    pub fn anchor_spec(&self) -> AnchorSpec {
        AnchorSpec {
            grid_w: self.grid_w,
            grid_h: self.grid_h,
            scales: self.anchor_scales.clone(),
            ratios: self.anchor_ratios.clone(),
            image_w: self.image_w,
            image_h: self.image_h,
        }
    }

    /// Image size after zero-padding to a multiple of the backbone's total
    /// pooling factor.
    pub fn padded_size(&self) -> (usize, usize) {
        let m = 1usize << (BACKBONE_BLOCKS - 1);
        let up = |v: u32| (v as usize).div_ceil(m) * m;
        (up(self.image_h), up(self.image_w))
    }

    /// Spatial size (h, w) of a backbone block's output.
    pub fn block_size(&self, block: usize) -> (usize, usize) {
        let (h, w) = self.padded_size();
        (h >> (block - 1), w >> (block - 1))
    }

    /// Hyper feature map (h, w).
    pub fn feature_size(&self) -> (usize, usize) {
        if self.feature_w > 0 && self.feature_h > 0 {
            (self.feature_h, self.feature_w)
        } else {
            self.block_size(self.align_block)
        }
    }

    /// Image pixels per hyper feature cell.
    pub fn feature_stride(&self) -> f64 {
        self.image_w as f64 / self.feature_size().1 as f64
    }

    /// Backbone blocks feeding the hyper map under the current fusion mode.
    pub fn fused_blocks(&self) -> Vec<usize> {
        match self.fusion_mode {
            FusionMode::MultiLayer => self.fusion_layers.clone(),
            FusionMode::LastLayerOnly => vec![BACKBONE_BLOCKS],
        }
    }

    pub fn hyper_channels(&self) -> usize {
        self.fused_blocks().iter().map(|&b| self.backbone_widths[b - 1]).sum()
    }

    /// Input width of the FTN output head.
    pub fn ftn_head_input(&self) -> usize {
        match self.concat_mode {
            ConcatMode::FtnOnly => self.ftn_fc_dim,
            ConcatMode::PnPlusFtn => self.ftn_fc_dim + self.pn_fc_dim,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.image_w == 0 || self.image_h == 0 {
            return fail("image size must be positive");
        }
        if self.backbone_widths.len() != BACKBONE_BLOCKS || self.backbone_widths.contains(&0) {
            return fail("backbone_widths needs five positive entries");
        }
        if self.fusion_layers.is_empty()
            || self.fusion_layers.windows(2).any(|w| w[0] >= w[1])
            || self.fusion_layers.iter().any(|&l| !(1..=BACKBONE_BLOCKS).contains(&l))
        {
            return fail("fusion_layers must be sorted, unique and within 1..=5");
        }
        if !(1..=BACKBONE_BLOCKS).contains(&self.align_block) {
            return fail("align_block must be within 1..=5");
        }
        if (self.feature_w == 0) != (self.feature_h == 0) {
            return fail("feature_w and feature_h must both be zero or both positive");
        }
        if self.hyper_channels() == 0 {
            return fail("fused channel sum is zero");
        }
        if self.roi_size == 0 || self.pn_keep == 0 {
            return fail("roi_size and pn_keep must be at least 1");
        }
        if self.pn_conv_filters == 0 || self.ftn_conv_filters == 0 || self.pn_fc_dim == 0 || self.ftn_fc_dim == 0 {
            return fail("layer widths must be positive");
        }
        if self.head_kernel % 2 == 0 {
            return fail("head_kernel must be odd");
        }
        for (name, v) in [
            ("pn_score_threshold", self.pn_score_threshold),
            ("pn_nms_threshold", self.pn_nms_threshold),
            ("ftn_nms_threshold", self.ftn_nms_threshold),
            ("final_score_threshold", self.final_score_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(ModelError::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.bn_eps > 0.0) || !(0.0..1.0).contains(&self.bn_momentum) || !(self.init_std > 0.0) {
            return fail("bn_eps and init_std must be positive, bn_momentum in [0, 1)");
        }
        self.anchor_spec().validate().map_err(ModelError::Config)
    }
}

/// Fused, normalized multi-layer feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperFeature<T: crate::tensor::Element = f32> {
    pub map: Tensor<T>,
    /// Image pixels per feature cell.
    pub stride: f64,
}

/// A scored candidate from the proposal network.
#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub score: f64,
    /// Post-ReLU PN fc activation of the generating anchor.
    pub pn_feature: Tensor<f32>,
    pub anchor_index: usize,
}

/// Forward-pass flavour: batch statistics and running-stat updates in
/// training, running statistics at inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}
