//! End-to-end passes: image -> pyramid, and image -> detections.

use crate::backbone::{backbone_forward_traced, deep_tap_name, shallow_tap_name};
use crate::config::DetectSettings;
use crate::error::Result;
use crate::head::{
    decode_boxes, filter_scores, generate_anchors, head_forward, soft_nms_linear, Detection,
};
use crate::mlfpn::{mlfpn_forward_traced, sfam_aggregate_traced, MlfpnOutput, PyramidLevel};
use crate::params::Model;
use crate::tensor::Tensor4;
use crate::trace::TraceRecorder;

/// Everything the pyramid side of the network produces.
#[derive(Debug)]
pub struct PipelineOutput {
    /// Base feature and per-level outputs (pre-aggregation).
    pub mlfpn: MlfpnOutput,
    /// Aggregated, attention-scaled pyramid, largest scale first.
    pub pyramid: Vec<PyramidLevel>,
}

/// Backbone -> base fusion -> level stack -> scale-wise aggregation.
pub fn forward_pyramid(image: &Tensor4, model: &Model) -> Result<PipelineOutput> {
    forward_pyramid_traced(image, model, &mut TraceRecorder::off())
}

pub fn forward_pyramid_traced(
    image: &Tensor4,
    model: &Model,
    rec: &mut TraceRecorder,
) -> Result<PipelineOutput> {
    let (shallow, deep) =
        backbone_forward_traced(image, &model.backbone_cfg, &model.backbone, rec)?;
    let mlfpn = mlfpn_forward_traced(
        &shallow,
        &deep,
        &model.net,
        &model.ffm,
        &model.tums,
        &shallow_tap_name(&model.backbone_cfg),
        &deep_tap_name(&model.backbone_cfg),
        rec,
    )?;
    let pyramid = sfam_aggregate_traced(&mlfpn.levels, &model.sfam, rec)?;
    Ok(PipelineOutput { mlfpn, pyramid })
}

/// Detection statistics worth surfacing next to the result.
#[derive(Debug, Default, Clone, Copy)]
pub struct DetectStats {
    /// Offset rows rejected for non-finite values, summed over the batch.
    pub rejected_boxes: usize,
}

/// Full detection pass over a batch. Output is sorted by
/// `(image, descending score, class_id)` and capped per image.
pub fn detect(image: &Tensor4, model: &Model, settings: &DetectSettings) -> Result<Vec<Detection>> {
    detect_with_stats(image, model, settings).map(|(dets, _)| dets)
}

pub fn detect_with_stats(
    image: &Tensor4,
    model: &Model,
    settings: &DetectSettings,
) -> Result<(Vec<Detection>, DetectStats)> {
    let out = forward_pyramid(image, model)?;
    let anchors = generate_anchors(&model.net, settings)?;
    let k = model.net.num_classes;
    let heads = head_forward(&out.pyramid, &model.heads, k, anchors.len())?;

    let mut stats = DetectStats::default();
    let mut detections = Vec::new();
    for ni in 0..image.n() {
        let (boxes, rejected) = decode_boxes(&heads.loc[ni], &anchors, settings.variances)?;
        stats.rejected_boxes += rejected;
        let per_class = filter_scores(
            &heads.conf[ni],
            k,
            settings.score_thresh,
            settings.pre_nms_top_k,
        );

        // (score, class_id, candidate order) triples for the image-level cap
        let mut image_dets: Vec<(usize, f32, [f32; 4], usize)> = Vec::new();
        for (class_id, kept) in per_class.iter().enumerate().skip(1) {
            let cands: Vec<([f32; 4], f32)> = kept
                .iter()
                .filter_map(|&(anchor, score)| {
                    let b = boxes[anchor]?;
                    // clipping can collapse a box to zero extent; those
                    // cannot be detections (corners must be ordered)
                    (b[0] < b[2] && b[1] < b[3]).then_some((b, score))
                })
                .collect();
            for (idx, score) in soft_nms_linear(
                &cands,
                settings.nms_iou_thresh,
                settings.nms_final_thresh,
                settings.nms_top_k,
            ) {
                image_dets.push((class_id, score, cands[idx].0, idx));
            }
        }
        // highest scores first; ties resolved by class then candidate order
        image_dets.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)).then(a.3.cmp(&b.3)));
        image_dets.truncate(settings.nms_top_k);
        detections.extend(
            image_dets
                .into_iter()
                .map(|(class_id, score, corners, _)| Detection {
                    image: ni,
                    class_id,
                    score,
                    corners,
                }),
        );
    }
    Ok((detections, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{BackboneConfig, NetworkConfig};

    fn tiny_model(seed: u64) -> Model {
        let net = NetworkConfig {
            input_size: 320,
            num_tums: 2,
            tum_channels: 8,
            base_compress_shallow: 8,
            base_compress_deep: 8,
            se_reduction: 4,
            num_classes: 4,
            seed,
        };
        let bb = BackboneConfig {
            shallow_channels: 8,
            deep_channels: 8,
            stem_depth: 1,
            ..BackboneConfig::for_network(&net)
        };
        Model::init(&net, &bb).unwrap()
    }

    fn test_image(n: usize, seed: u32) -> Tensor4 {
        let len = n * 3 * 320 * 320;
        let data = (0..len)
            .map(|i| {
                (((i as u32).wrapping_mul(2654435761).wrapping_add(seed) >> 8) as f32
                    / (1 << 24) as f32)
                    - 0.5
            })
            .collect();
        Tensor4::from_vec(n, 3, 320, 320, data).unwrap()
    }

    #[test]
    fn pyramid_shapes_from_image() {
        let model = tiny_model(1);
        let out = forward_pyramid(&test_image(1, 7), &model).unwrap();
        let sizes: Vec<usize> = out.pyramid.iter().map(|p| p.aggregated.h()).collect();
        assert_eq!(sizes, vec![40, 20, 10, 5, 3, 1]);
        assert!(out.pyramid.iter().all(|p| p.aggregated.c() == 16));
    }

    #[test]
    fn zero_model_detects_nothing_with_many_classes() {
        let net = NetworkConfig {
            num_tums: 1,
            tum_channels: 16,
            base_compress_shallow: 8,
            base_compress_deep: 8,
            se_reduction: 4,
            num_classes: 81,
            ..NetworkConfig::default()
        };
        let bb = BackboneConfig {
            shallow_channels: 8,
            deep_channels: 8,
            stem_depth: 1,
            ..BackboneConfig::for_network(&net)
        };
        let model = Model::zeros(&net, &bb).unwrap();
        let dets = detect(&test_image(1, 3), &model, &DetectSettings::default()).unwrap();
        assert!(dets.is_empty());
    }

    #[test]
    fn zero_threshold_yields_detections() {
        let model = tiny_model(5);
        let settings = DetectSettings {
            score_thresh: 0.0,
            ..DetectSettings::default()
        };
        let dets = detect(&test_image(1, 3), &model, &settings).unwrap();
        assert!(!dets.is_empty());
        // sorted by descending score
        for pair in dets.windows(2) {
            assert!(pair[0].score >= pair[1].score);
        }
        for d in &dets {
            assert!(d.class_id >= 1 && d.class_id < 4);
            assert!(d.score > 0.0 && d.score <= 1.0);
            let [x1, y1, x2, y2] = d.corners;
            assert!(x1 < x2 && y1 < y2);
            assert!(x1 >= 0.0 && y2 <= 1.0);
        }
    }

    #[test]
    fn detect_is_deterministic() {
        let model = tiny_model(5);
        let settings = DetectSettings {
            score_thresh: 0.0,
            ..DetectSettings::default()
        };
        let img = test_image(1, 9);
        let a = detect(&img, &model, &settings).unwrap();
        let b = detect(&img, &model, &settings).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batch_equals_independent_runs() {
        let model = tiny_model(5);
        let settings = DetectSettings {
            score_thresh: 0.0,
            ..DetectSettings::default()
        };
        let img1 = test_image(1, 11);
        let img2 = test_image(1, 22);
        let mut both_data = img1.data().to_vec();
        both_data.extend_from_slice(img2.data());
        let both = Tensor4::from_vec(2, 3, 320, 320, both_data).unwrap();

        let batch = detect(&both, &model, &settings).unwrap();
        let solo1 = detect(&img1, &model, &settings).unwrap();
        let solo2 = detect(&img2, &model, &settings).unwrap();

        let (first, second): (Vec<_>, Vec<_>) = batch.into_iter().partition(|d| d.image == 0);
        assert_eq!(first, solo1);
        let relabeled: Vec<Detection> = second
            .into_iter()
            .map(|d| Detection { image: 0, ..d })
            .collect();
        assert_eq!(relabeled, solo2);
    }
}
