//! Backbone stub: four Conv->ReLU stages standing in for a classification
//! network, exporting a stride-8 and a stride-16 feature map.
//!
//! Each stage opens with a 3x3 stride-2 convolution and continues with
//! `stem_depth - 1` stride-1 convolutions at the stage width. The tap after
//! stage 3 is the shallow feature, after stage 4 the deep one.

use crate::config::BackboneConfig;
use crate::error::{Error, Result};
use crate::params::BackboneParams;
use crate::tensor::Tensor4;
use crate::trace::{TraceRecorder, INPUT};

/// Runs the backbone, returning `(shallow, deep)` taps.
pub fn backbone_forward(
    image: &Tensor4,
    cfg: &BackboneConfig,
    params: &BackboneParams,
) -> Result<(Tensor4, Tensor4)> {
    backbone_forward_traced(image, cfg, params, &mut TraceRecorder::off())
}

/// Same as [`backbone_forward`], recording one trace entry per convolution.
pub fn backbone_forward_traced(
    image: &Tensor4,
    cfg: &BackboneConfig,
    params: &BackboneParams,
    rec: &mut TraceRecorder,
) -> Result<(Tensor4, Tensor4)> {
    let (_, c, h, w) = image.shape();
    if c != 3 || h != cfg.input_size || w != cfg.input_size {
        return Err(Error::Shape(format!(
            "backbone expects (n, 3, {0}, {0}) input, got {1:?}",
            cfg.input_size,
            image.dims()
        )));
    }
    let mut x = image.clone();
    let mut src = INPUT.to_string();
    let mut shallow = None;
    for (s, stage) in params.stages.iter().enumerate() {
        for conv in stage {
            x = conv.apply_relu(&x, &src, rec)?;
            src = conv.name.clone();
        }
        if s == 2 {
            shallow = Some(x.clone());
        }
    }
    let shallow = shallow.ok_or_else(|| Error::Internal("backbone has no stage 3".into()))?;
    Ok((shallow, x))
}

/// Trace name of the shallow tap (last conv of stage 3).
pub fn shallow_tap_name(cfg: &BackboneConfig) -> String {
    format!("backbone.stage3.conv{}", cfg.stem_depth)
}

/// Trace name of the deep tap (last conv of stage 4).
pub fn deep_tap_name(cfg: &BackboneConfig) -> String {
    format!("backbone.stage4.conv{}", cfg.stem_depth)
}
