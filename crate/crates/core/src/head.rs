//! Detection head primitives: anchor geometry, the per-scale prediction
//! convs, box decoding, score filtering, and linear soft suppression.
//!
//! Anchor ordering is the contract everything else leans on: scales in
//! pyramid order (largest grid first), cells row-major within a scale,
//! and per cell the 6 anchors as 3 aspect ratios x 2 sizes, ratio-major.
//! Head outputs are flattened in exactly this order.

use serde::Serialize;

use crate::config::{DetectSettings, NetworkConfig, ANCHORS_PER_CELL, NUM_SCALES};
use crate::error::{Error, Result};
use crate::mlfpn::PyramidLevel;
use crate::params::HeadScale;
use crate::tensor::conv2d;

/// Prior box in center form, normalized to the unit square.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorBox {
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
}

/// One final detection. `class_id` is never 0 (background).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Detection {
    pub image: usize,
    pub class_id: usize,
    pub score: f32,
    #[serde(rename = "box")]
    pub corners: [f32; 4],
}

/// Raw per-anchor head outputs for a batch: `loc[image][anchor]` is the
/// 4-vector of box offsets, `conf[image]` holds `anchors * K` softmaxed
/// scores, anchor-major.
#[derive(Debug)]
pub struct HeadOutputs {
    pub loc: Vec<Vec<[f32; 4]>>,
    pub conf: Vec<Vec<f32>>,
}

/// Per-scale anchor side lengths: the six base scales (first one lowered
/// per SSD convention) plus the extra scale used for the geometric-mean
/// size on the last map.
pub fn anchor_scales(input_size: usize) -> [f32; NUM_SCALES + 1] {
    let mut s = [0.0f32; NUM_SCALES + 1];
    for (k, slot) in s.iter_mut().enumerate().take(NUM_SCALES) {
        *slot = 0.2 + 0.7 * k as f32 / (NUM_SCALES - 1) as f32;
    }
    s[0] = 0.1;
    s[NUM_SCALES] = 1.05;
    // large inputs grow every anchor proportionally in pixels, which keeps
    // normalized sizes unchanged, except the finest anchors stay at their
    // 320-input pixel size
    if input_size >= 800 {
        s[0] = 0.1 * 320.0 / input_size as f32;
    }
    s
}

/// Generates the full anchor list for a config.
pub fn generate_anchors(cfg: &NetworkConfig, settings: &DetectSettings) -> Result<Vec<AnchorBox>> {
    let grids = cfg.scale_extents()?;
    let scales = anchor_scales(cfg.input_size);
    let ratios = [1.0f32, 2.0, 0.5];
    let mut anchors =
        Vec::with_capacity(grids.iter().map(|f| f * f).sum::<usize>() * ANCHORS_PER_CELL);
    for (k, &f) in grids.iter().enumerate() {
        let sizes = [scales[k], (scales[k] * scales[k + 1]).sqrt()];
        for i in 0..f {
            for j in 0..f {
                let cx = (j as f32 + 0.5) / f as f32;
                let cy = (i as f32 + 0.5) / f as f32;
                for ratio in ratios {
                    for size in sizes {
                        let w = size * ratio.sqrt();
                        let h = w / ratio;
                        let a = AnchorBox { cx, cy, w, h };
                        anchors.push(if settings.clip_anchors {
                            clip_anchor(a)
                        } else {
                            a
                        });
                    }
                }
            }
        }
    }
    Ok(anchors)
}

fn clip_anchor(a: AnchorBox) -> AnchorBox {
    let x1 = (a.cx - a.w / 2.0).clamp(0.0, 1.0);
    let y1 = (a.cy - a.h / 2.0).clamp(0.0, 1.0);
    let x2 = (a.cx + a.w / 2.0).clamp(0.0, 1.0);
    let y2 = (a.cy + a.h / 2.0).clamp(0.0, 1.0);
    AnchorBox {
        cx: (x1 + x2) / 2.0,
        cy: (y1 + y2) / 2.0,
        w: x2 - x1,
        h: y2 - y1,
    }
}

/// Runs the two prediction convs on every pyramid scale and flattens the
/// results in anchor order. Confidence rows are softmaxed over the K
/// classes (computed in f64). `expected_anchors` is the length of the
/// anchor list the caller will pair these rows with.
pub fn head_forward(
    pyramid: &[PyramidLevel],
    heads: &[HeadScale],
    num_classes: usize,
    expected_anchors: usize,
) -> Result<HeadOutputs> {
    if pyramid.len() != NUM_SCALES || heads.len() != NUM_SCALES {
        return Err(Error::Config(format!(
            "expected {NUM_SCALES} pyramid scales and head pairs, got {} and {}",
            pyramid.len(),
            heads.len()
        )));
    }
    let n = pyramid[0].aggregated.n();
    let mut loc: Vec<Vec<[f32; 4]>> = vec![Vec::new(); n];
    let mut conf: Vec<Vec<f32>> = vec![Vec::new(); n];
    for (scale, head) in pyramid.iter().zip(heads) {
        let x = &scale.aggregated;
        let loc_out = conv2d(x, &head.loc.p).map_err(|e| e.at_layer(&head.loc.name))?;
        let conf_out = conv2d(x, &head.conf.p).map_err(|e| e.at_layer(&head.conf.name))?;
        let (h, w) = (x.h(), x.w());
        for ni in 0..n {
            for i in 0..h {
                for j in 0..w {
                    for a in 0..ANCHORS_PER_CELL {
                        loc[ni].push([
                            loc_out.at(ni, a * 4, i, j),
                            loc_out.at(ni, a * 4 + 1, i, j),
                            loc_out.at(ni, a * 4 + 2, i, j),
                            loc_out.at(ni, a * 4 + 3, i, j),
                        ]);
                        softmax_into(
                            (0..num_classes).map(|k| conf_out.at(ni, a * num_classes + k, i, j)),
                            num_classes,
                            &mut conf[ni],
                        );
                    }
                }
            }
        }
    }
    if loc[0].len() != expected_anchors {
        return Err(Error::Internal(format!(
            "head produced {} rows but the anchor list has {expected_anchors}",
            loc[0].len()
        )));
    }
    Ok(HeadOutputs { loc, conf })
}

/// Numerically stable softmax appended to `out`.
fn softmax_into(logits: impl Iterator<Item = f32>, k: usize, out: &mut Vec<f32>) {
    let mut vals = Vec::with_capacity(k);
    let mut max = f64::NEG_INFINITY;
    for v in logits {
        let v = f64::from(v);
        max = max.max(v);
        vals.push(v);
    }
    let mut sum = 0.0f64;
    for v in &mut vals {
        *v = (*v - max).exp();
        sum += *v;
    }
    out.extend(vals.iter().map(|&v| (v / sum) as f32));
}

/// Decodes one offset row against its anchor. Returns corner coordinates
/// clipped to the unit square, or `None` when the offsets are not finite.
pub fn decode_box(t: [f32; 4], a: &AnchorBox, variances: [f32; 4]) -> Option<[f32; 4]> {
    let cx = a.cx + t[0] * variances[0] * a.w;
    let cy = a.cy + t[1] * variances[1] * a.h;
    let w = a.w * (t[2] * variances[2]).exp();
    let h = a.h * (t[3] * variances[3]).exp();
    let raw = [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0];
    // finiteness is judged before clamping; an overflowed width must not
    // sneak back in as a full-image box
    if raw.iter().all(|v| v.is_finite()) {
        Some(raw.map(|v| v.clamp(0.0, 1.0)))
    } else {
        None
    }
}

/// Decodes all rows; the second return value counts rejected (non-finite)
/// rows for diagnostics.
pub fn decode_boxes(
    loc: &[[f32; 4]],
    anchors: &[AnchorBox],
    variances: [f32; 4],
) -> Result<(Vec<Option<[f32; 4]>>, usize)> {
    if loc.len() != anchors.len() {
        return Err(Error::Internal(format!(
            "{} offset rows vs {} anchors",
            loc.len(),
            anchors.len()
        )));
    }
    let mut rejected = 0usize;
    let boxes = loc
        .iter()
        .zip(anchors)
        .map(|(&t, a)| {
            let b = decode_box(t, a, variances);
            rejected += b.is_none() as usize;
            b
        })
        .collect();
    Ok((boxes, rejected))
}

/// Per-class score filtering: keeps anchors whose class score strictly
/// exceeds the threshold, at most `pre_top_k` per class (highest scores
/// win, ties broken toward lower anchor index), returned in ascending
/// anchor order. Index 0 of the result (background) is always empty.
pub fn filter_scores(
    conf: &[f32],
    num_classes: usize,
    threshold: f32,
    pre_top_k: usize,
) -> Vec<Vec<(usize, f32)>> {
    let num_anchors = conf.len() / num_classes;
    let mut per_class: Vec<Vec<(usize, f32)>> = vec![Vec::new(); num_classes];
    for (class, list) in per_class.iter_mut().enumerate().skip(1) {
        for a in 0..num_anchors {
            let score = conf[a * num_classes + class];
            if score > threshold {
                list.push((a, score));
            }
        }
        if list.len() > pre_top_k {
            list.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
            list.truncate(pre_top_k);
            list.sort_by_key(|&(a, _)| a);
        }
    }
    per_class
}

/// Intersection-over-union of two corner boxes; degenerate boxes and empty
/// unions contribute 0.
pub fn iou(a: [f32; 4], b: [f32; 4]) -> f32 {
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let area_a = (a[2] - a[0]).max(0.0) * (a[3] - a[1]).max(0.0);
    let area_b = (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Linear soft suppression over one candidate list. Returns
/// `(candidate index, rescaled score)` in emission order: repeatedly select
/// the highest-scoring remaining candidate (ties to the lowest index), emit
/// it, and decay every remaining score by `(1 - IoU)` where the overlap
/// reaches `iou_thresh`. Emitted boxes scoring below `final_cutoff` are
/// dropped; at most `top_k` survive.
///
/// Scores only ever decay, so once the best remaining score falls below the
/// cutoff nothing further can be emitted; stopping there is exact.
pub fn soft_nms_linear(
    cands: &[([f32; 4], f32)],
    iou_thresh: f32,
    final_cutoff: f32,
    top_k: usize,
) -> Vec<(usize, f32)> {
    let mut items: Vec<(usize, [f32; 4], f32)> = cands
        .iter()
        .enumerate()
        .map(|(i, &(b, s))| (i, b, s))
        .collect();
    let mut out = Vec::new();
    while !items.is_empty() && out.len() < top_k {
        let mut best = 0;
        for i in 1..items.len() {
            if items[i].2 > items[best].2
                || (items[i].2 == items[best].2 && items[i].0 < items[best].0)
            {
                best = i;
            }
        }
        let m = items.swap_remove(best);
        if m.2 < final_cutoff {
            break;
        }
        for item in &mut items {
            let overlap = iou(m.1, item.1);
            if overlap >= iou_thresh {
                item.2 *= 1.0 - overlap;
            }
        }
        out.push((m.0, m.2));
    }
    out
}

/// Compact JSON rendering of a detection list (an empty list is `[]`).
pub fn detections_to_json(dets: &[Detection]) -> String {
    serde_json::to_string(dets).expect("plain data")
}
