//! Independent verification: a symbolic shape tracer, closed-form parameter
//! accounting, a finite-difference gradient harness, a brute-force
//! suppression oracle, and the per-block activation profiler.
//!
//! Everything here is written against the contracts, not the
//! implementations: the tracer propagates shapes by formula, the parameter
//! counter multiplies dimensions, the suppression oracle re-scans naively.
//! Agreement between these and the executing code is the correctness
//! argument.

use serde::Serialize;

use crate::config::{BackboneConfig, NetworkConfig, ANCHORS_PER_CELL, NUM_SCALES};
use crate::error::{Error, Result};
use crate::mlfpn::{se_forward_f64, tum_scale_name, TumOutput};
use crate::params::Model;
use crate::pipeline::forward_pyramid_traced;
use crate::rng::Rng;
use crate::tensor::Tensor4;
use crate::trace::{conv_op, LayerRecord, ShapeTrace, TraceRecorder, INPUT};

// ---------------------------------------------------------------------------
// symbolic shape trace

struct SymbolicTracer {
    records: Vec<LayerRecord>,
}

#[allow(clippy::too_many_arguments)]
impl SymbolicTracer {
    fn push(
        &mut self,
        name: String,
        op: String,
        inputs: Vec<(String, [usize; 4])>,
        output: [usize; 4],
        params: usize,
    ) {
        self.records.push(LayerRecord {
            name,
            op,
            inputs,
            output,
            params,
        });
    }

    fn conv(
        &mut self,
        name: String,
        src: &str,
        in_shape: [usize; 4],
        out_c: usize,
        k: usize,
        stride: usize,
        out_extent: usize,
        relu: bool,
    ) -> [usize; 4] {
        let out = [in_shape[0], out_c, out_extent, out_extent];
        let params = out_c * in_shape[1] * k * k + out_c;
        self.push(
            name,
            conv_op(k, stride, relu),
            vec![(src.to_string(), in_shape)],
            out,
            params,
        );
        out
    }
}

/// Builds the full per-layer trace for a config by shape algebra alone; no
/// tensor arithmetic runs. Mirrors, record for record, what an instrumented
/// forward pass with batch size `batch` emits.
pub fn trace_shapes(net: &NetworkConfig, bb: &BackboneConfig, batch: usize) -> Result<ShapeTrace> {
    net.validate()?;
    bb.validate()?;
    if net.input_size != bb.input_size {
        return Err(Error::Config(format!(
            "network input_size {} != backbone input_size {}",
            net.input_size, bb.input_size
        )));
    }
    let n = batch;
    let c = net.tum_channels;
    let b = net.base_channels();
    let lc = net.aggregated_channels();
    let e = net.scale_extents()?;
    let l_count = net.num_tums;

    let mut t = SymbolicTracer {
        records: Vec::new(),
    };

    // backbone: four stages, strided first conv
    let widths = bb.stage_widths();
    let mut src = INPUT.to_string();
    let mut shape = [n, 3, bb.input_size, bb.input_size];
    for (s, &width) in widths.iter().enumerate() {
        for k in 0..bb.stem_depth {
            let name = format!("backbone.stage{}.conv{}", s + 1, k + 1);
            let (stride, extent) = if k == 0 {
                (2, shape[2] / 2)
            } else {
                (1, shape[2])
            };
            shape = t.conv(name.clone(), &src, shape, width, 3, stride, extent, true);
            src = name;
        }
    }
    let shallow_src = format!("backbone.stage3.conv{}", bb.stem_depth);
    let deep_src = format!("backbone.stage4.conv{}", bb.stem_depth);
    let shallow_shape = [n, widths[2], e[0], e[0]];
    let deep_shape = [n, widths[3], e[0] / 2, e[0] / 2];

    // base fusion
    let s_shape = t.conv(
        "ffm1.shallow".into(),
        &shallow_src,
        shallow_shape,
        net.base_compress_shallow,
        3,
        1,
        e[0],
        true,
    );
    let d_shape = t.conv(
        "ffm1.deep".into(),
        &deep_src,
        deep_shape,
        net.base_compress_deep,
        1,
        1,
        e[0] / 2,
        true,
    );
    let d_up = [n, net.base_compress_deep, e[0], e[0]];
    t.push(
        "ffm1.deep.upsample".into(),
        "upsample".into(),
        vec![("ffm1.deep".into(), d_shape)],
        d_up,
        0,
    );
    let base_shape = [n, b, e[0], e[0]];
    t.push(
        "ffm1.concat".into(),
        "concat".into(),
        vec![
            ("ffm1.shallow".into(), s_shape),
            ("ffm1.deep.upsample".into(), d_up),
        ],
        base_shape,
        0,
    );

    // level stack
    for l in 1..=l_count {
        let (tum_src, tum_in_shape) = if l == 1 {
            let shape = t.conv(
                "ffm2.1".into(),
                "ffm1.concat",
                base_shape,
                2 * c,
                1,
                1,
                e[0],
                true,
            );
            ("ffm2.1".to_string(), shape)
        } else {
            let compressed = t.conv(
                format!("ffm2.{l}"),
                "ffm1.concat",
                base_shape,
                c,
                1,
                1,
                e[0],
                true,
            );
            let prev = tum_scale_name(l - 1, 0);
            let cat = [n, 2 * c, e[0], e[0]];
            t.push(
                format!("ffm2.{l}.concat"),
                "concat".into(),
                vec![
                    (format!("ffm2.{l}"), compressed),
                    (prev, [n, c, e[0], e[0]]),
                ],
                cat,
                0,
            );
            (format!("ffm2.{l}.concat"), cat)
        };

        // encoder
        let mut enc_srcs = vec![tum_src.clone()];
        let mut enc_shapes = vec![tum_in_shape];
        for k in 1..=5 {
            let name = format!("tum{l}.enc{k}");
            let shape = t.conv(
                name.clone(),
                &enc_srcs[k - 1],
                enc_shapes[k - 1],
                c,
                3,
                2,
                e[k],
                true,
            );
            enc_srcs.push(name);
            enc_shapes.push(shape);
        }

        // decoder, deepest first
        let mut d_src = format!("tum{l}.lat6");
        let mut d_shape = t.conv(
            d_src.clone(),
            &enc_srcs[5],
            enc_shapes[5],
            c,
            1,
            1,
            e[5],
            true,
        );
        for k in (0..5).rev() {
            let step = k + 1;
            let up_name = format!("tum{l}.up{step}");
            let up_shape = [n, c, e[k], e[k]];
            t.push(
                up_name.clone(),
                "upsample".into(),
                vec![(d_src.clone(), d_shape)],
                up_shape,
                0,
            );
            let lat_shape = t.conv(
                format!("tum{l}.lat{step}"),
                &enc_srcs[k],
                enc_shapes[k],
                c,
                1,
                1,
                e[k],
                true,
            );
            let add_name = format!("tum{l}.add{step}");
            t.push(
                add_name.clone(),
                "add".into(),
                vec![
                    (up_name, up_shape),
                    (format!("tum{l}.lat{step}"), lat_shape),
                ],
                up_shape,
                0,
            );
            d_src = format!("tum{l}.smooth{step}");
            d_shape = t.conv(d_src.clone(), &add_name, up_shape, c, 1, 1, e[k], true);
        }
    }

    // scale-wise aggregation
    for (i, &ext) in e.iter().enumerate() {
        let inputs: Vec<(String, [usize; 4])> = (1..=l_count)
            .map(|l| (tum_scale_name(l, i), [n, c, ext, ext]))
            .collect();
        t.push(
            format!("sfam.scale{}.concat", i + 1),
            "concat".into(),
            inputs,
            [n, lc, ext, ext],
            0,
        );
    }
    let hidden = net.se_hidden();
    let se_params = hidden * lc + hidden + lc * hidden + lc;
    for (i, &ext) in e.iter().enumerate() {
        t.push(
            format!("sfam.scale{}.se", i + 1),
            "se".into(),
            vec![(format!("sfam.scale{}.concat", i + 1), [n, lc, ext, ext])],
            [n, lc, ext, ext],
            se_params,
        );
    }

    let trace = ShapeTrace { records: t.records };
    trace.validate()?;
    Ok(trace)
}

/// Runs an instrumented forward pass and demands record-for-record equality
/// with the symbolic trace. Returns the trace on success.
pub fn check_trace_matches_execution(
    net: &NetworkConfig,
    bb: &BackboneConfig,
    batch: usize,
) -> Result<ShapeTrace> {
    let symbolic = trace_shapes(net, bb, batch)?;
    let model = Model::init(net, bb)?;
    let image = Tensor4::zeros(batch, 3, net.input_size, net.input_size)?;
    let mut rec = TraceRecorder::new();
    forward_pyramid_traced(&image, &model, &mut rec)?;
    let executed = rec.finish();
    executed.validate()?;
    if symbolic.records.len() != executed.records.len() {
        return Err(Error::Internal(format!(
            "symbolic trace has {} records, executed pass emitted {}",
            symbolic.records.len(),
            executed.records.len()
        )));
    }
    for (i, (s, x)) in symbolic.records.iter().zip(&executed.records).enumerate() {
        if s != x {
            return Err(Error::Internal(format!(
                "trace mismatch at record {i}:\n  symbolic: {s:?}\n  executed: {x:?}"
            )));
        }
    }
    Ok(symbolic)
}

// ---------------------------------------------------------------------------
// parameter accounting

/// Exact parameter counts by module group, plus the cost of adding one more
/// level at this width.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamReport {
    pub backbone: usize,
    pub ffm: usize,
    pub tums: usize,
    pub sfam: usize,
    pub heads: usize,
    pub total: usize,
    /// `count(L+1) - count(L)`: grows with L because the attention widths
    /// scale with the aggregate channel count.
    pub marginal_next_tum: usize,
}

fn conv_count(out_c: usize, in_c: usize, k: usize) -> usize {
    out_c * in_c * k * k + out_c
}

fn group_counts(net: &NetworkConfig, bb: &BackboneConfig) -> (usize, usize, usize, usize, usize) {
    let c = net.tum_channels;
    let b = net.base_channels();
    let l = net.num_tums;
    let lc = net.aggregated_channels();
    let hidden = net.se_hidden();

    let mut backbone = 0;
    let mut prev = 3;
    for w in bb.stage_widths() {
        backbone += conv_count(w, prev, 3) + (bb.stem_depth - 1) * conv_count(w, w, 3);
        prev = w;
    }

    let ffm = conv_count(net.base_compress_shallow, bb.shallow_channels, 3)
        + conv_count(net.base_compress_deep, bb.deep_channels, 1)
        + conv_count(2 * c, b, 1)
        + (l - 1) * conv_count(c, b, 1);

    let per_tum = conv_count(c, 2 * c, 3)
        + 4 * conv_count(c, c, 3)
        + conv_count(c, 2 * c, 1)
        + 5 * conv_count(c, c, 1)
        + 5 * conv_count(c, c, 1);
    let tums = l * per_tum;

    let sfam = NUM_SCALES * (hidden * lc + hidden + lc * hidden + lc);

    let heads = NUM_SCALES
        * (conv_count(ANCHORS_PER_CELL * 4, lc, 3)
            + conv_count(ANCHORS_PER_CELL * net.num_classes, lc, 3));

    (backbone, ffm, tums, sfam, heads)
}

/// Closed-form parameter count for a config; no model is built.
pub fn count_params(net: &NetworkConfig, bb: &BackboneConfig) -> Result<ParamReport> {
    net.validate()?;
    bb.validate()?;
    let (backbone, ffm, tums, sfam, heads) = group_counts(net, bb);
    let total = backbone + ffm + tums + sfam + heads;

    let bigger = NetworkConfig {
        num_tums: net.num_tums + 1,
        ..net.clone()
    };
    let (b2, f2, t2, s2, h2) = group_counts(&bigger, bb);
    let total_bigger = b2 + f2 + t2 + s2 + h2;

    Ok(ParamReport {
        backbone,
        ffm,
        tums,
        sfam,
        heads,
        total,
        marginal_next_tum: total_bigger - total,
    })
}

impl ParamReport {
    pub fn render(&self) -> String {
        let row = |name: &str, v: usize| format!("{name:10}  {v:>14}\n");
        let mut out = String::new();
        out.push_str(&row("backbone", self.backbone));
        out.push_str(&row("ffm", self.ffm));
        out.push_str(&row("tums", self.tums));
        out.push_str(&row("sfam", self.sfam));
        out.push_str(&row("heads", self.heads));
        out.push_str(&row("total", self.total));
        out.push_str(&format!(
            "{:10}  {:>14}  (adding one level at this width)\n",
            "marginal", self.marginal_next_tum
        ));
        out
    }
}

/// Parameter-count structure checks:
/// * the closed form is affine-plus-quadratic in the level count L
///   (levels and their input convs are linear; attention is quadratic
///   through the hidden width);
/// * with the attention group subtracted out, the per-level marginal cost
///   is exactly constant in L.
pub fn check_param_scaling(net: &NetworkConfig, bb: &BackboneConfig) -> Result<String> {
    let at = |l: usize| -> Result<ParamReport> {
        count_params(
            &NetworkConfig {
                num_tums: l,
                ..net.clone()
            },
            bb,
        )
    };

    // fit a + b*L + c*L^2 through L = 1, 2, 4, predict L = 8
    let t1 = at(1)?.total as f64;
    let t2 = at(2)?.total as f64;
    let t4 = at(4)?.total as f64;
    let t8 = at(8)?.total as f64;
    let d1 = t2 - t1;
    let d2 = t4 - t2;
    let cq = (d2 - 2.0 * d1) / 6.0;
    let bq = d1 - 3.0 * cq;
    let aq = t1 - bq - cq;
    let predicted = aq + 8.0 * bq + 64.0 * cq;
    let residual = (predicted - t8).abs();
    if residual > 1e-6 * t8 {
        return Err(Error::Internal(format!(
            "total(L) is not quadratic in L: fit over L=1,2,4 predicts {predicted} at L=8, \
             actual {t8} (residual {residual})"
        )));
    }

    // non-attention marginal is exactly constant
    let non_se = |l: usize| -> Result<usize> {
        let r = at(l)?;
        Ok(r.total - r.sfam)
    };
    let m2 = non_se(2)? - non_se(1)?;
    let m3 = non_se(3)? - non_se(2)?;
    let m4 = non_se(4)? - non_se(3)?;
    if m2 != m3 || m3 != m4 {
        return Err(Error::Internal(format!(
            "non-attention marginal varies with L: {m2}, {m3}, {m4}"
        )));
    }

    Ok(format!(
        "quadratic fit residual {residual:.3e} of {t8}; non-attention marginal {m2} constant"
    ))
}

// ---------------------------------------------------------------------------
// finite-difference gradient harness

/// Outcome of one finite-difference sweep.
#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub coords: usize,
}

/// Central-difference check of `analytic` against `f` at `theta`:
/// per coordinate, compare `(f(θ+ε) - f(θ-ε)) / 2ε` with relative error
/// `|fd - a| / max(|fd|, |a|, 1e-8)`.
pub fn fd_gradient_harness(
    f: &mut dyn FnMut(&[f64]) -> f64,
    theta: &[f64],
    analytic: &[f64],
    eps: f64,
) -> Result<FdReport> {
    if theta.len() != analytic.len() {
        return Err(Error::Config(format!(
            "{} coordinates but {} analytic gradient entries",
            theta.len(),
            analytic.len()
        )));
    }
    let mut work = theta.to_vec();
    let mut max_rel_err = 0.0f64;
    let mut worst_coord = 0usize;
    for i in 0..theta.len() {
        work[i] = theta[i] + eps;
        let plus = f(&work);
        work[i] = theta[i] - eps;
        let minus = f(&work);
        work[i] = theta[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Internal(format!(
                "non-finite loss while perturbing coordinate {i}"
            )));
        }
        let fd = (plus - minus) / (2.0 * eps);
        let a = analytic[i];
        if !a.is_finite() {
            return Err(Error::Internal(format!(
                "non-finite analytic gradient at coordinate {i}"
            )));
        }
        let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-8);
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_coord = i;
        }
    }
    Ok(FdReport {
        max_rel_err,
        worst_coord,
        coords: theta.len(),
    })
}

/// One random attention instance checked end to end: builds a small input,
/// weights, and upstream gradient; compares the analytic gradients of
/// `sum(upstream ⊙ se(x))` against central differences over every
/// coordinate (input and all four weight tensors).
///
/// Instances are rejection-sampled so every hidden pre-activation sits at
/// least 0.02 away from the ReLU kink: central differences are only a valid
/// oracle where the loss is smooth around θ.
pub fn se_gradient_instance(rng: &mut Rng, eps: f64) -> Result<FdReport> {
    use crate::params::{Dense, SeParams};
    use crate::tensor::Matrix;

    let n = 1 + (rng.next_u64() % 2) as usize;
    let c = 2 + (rng.next_u64() % 5) as usize;
    let hw = [1usize, 4, 6][(rng.next_u64() % 3) as usize];
    let hidden = 1 + (rng.next_u64() % 3) as usize;

    let (x, w1, b1, w2, b2) = loop {
        let x: Vec<f32> = (0..n * c * hw).map(|_| rng.uniform(1.0)).collect();
        let w1: Vec<f32> = (0..hidden * c).map(|_| rng.uniform(1.0)).collect();
        let b1: Vec<f32> = (0..hidden).map(|_| rng.uniform(0.5)).collect();
        let w2: Vec<f32> = (0..c * hidden).map(|_| rng.uniform(1.0)).collect();
        let b2: Vec<f32> = (0..c).map(|_| rng.uniform(0.5)).collect();

        // hidden pre-activations, f64
        let xf: Vec<f64> = x.iter().map(|&v| f64::from(v)).collect();
        let fwd = se_forward_f64(
            &xf,
            n,
            c,
            hw,
            &w1.iter().map(|&v| f64::from(v)).collect::<Vec<_>>(),
            &b1.iter().map(|&v| f64::from(v)).collect::<Vec<_>>(),
            &w2.iter().map(|&v| f64::from(v)).collect::<Vec<_>>(),
            &b2.iter().map(|&v| f64::from(v)).collect::<Vec<_>>(),
        );
        if fwd.pre1.iter().all(|p| p.abs() >= 0.02) {
            break (x, w1, b1, w2, b2);
        }
    };
    let upstream: Vec<f32> = (0..n * c * hw).map(|_| rng.uniform(1.0)).collect();

    let se = SeParams {
        fc1: Dense {
            name: "fd.fc1".into(),
            weight: Matrix::new(hidden, c, w1.clone())?,
            bias: b1.clone(),
        },
        fc2: Dense {
            name: "fd.fc2".into(),
            weight: Matrix::new(c, hidden, w2.clone())?,
            bias: b2.clone(),
        },
    };
    let spatial = if hw == 1 { (1, 1) } else { (2, hw / 2) };
    let x_t = Tensor4::from_vec(n, c, spatial.0, spatial.1, x.clone())?;
    let g_t = Tensor4::from_vec(n, c, spatial.0, spatial.1, upstream.clone())?;
    let grads = crate::mlfpn::se_backward(&x_t, &se, &g_t)?;

    // θ = [x | w1 | b1 | w2 | b2], all f64
    let mut theta: Vec<f64> = Vec::new();
    let mut analytic: Vec<f64> = Vec::new();
    let push = |theta: &mut Vec<f64>, analytic: &mut Vec<f64>, vals: &[f32], grad: &[f64]| {
        theta.extend(vals.iter().map(|&v| f64::from(v)));
        analytic.extend_from_slice(grad);
    };
    push(&mut theta, &mut analytic, &x, &grads.x);
    push(&mut theta, &mut analytic, &w1, &grads.w1);
    push(&mut theta, &mut analytic, &b1, &grads.b1);
    push(&mut theta, &mut analytic, &w2, &grads.w2);
    push(&mut theta, &mut analytic, &b2, &grads.b2);

    let g64: Vec<f64> = upstream.iter().map(|&v| f64::from(v)).collect();
    let x_len = n * c * hw;
    let w1_len = hidden * c;
    let w2_len = c * hidden;
    let mut loss = move |t: &[f64]| -> f64 {
        let (x, rest) = t.split_at(x_len);
        let (w1, rest) = rest.split_at(w1_len);
        let (b1, rest) = rest.split_at(hidden);
        let (w2, b2) = rest.split_at(w2_len);
        let fwd = se_forward_f64(x, n, c, hw, w1, b1, w2, b2);
        fwd.out.iter().zip(&g64).map(|(o, g)| o * g).sum()
    };
    fd_gradient_harness(&mut loss, &theta, &analytic, eps)
}

/// Runs `trials` random attention gradient checks; returns the worst
/// relative error seen.
pub fn se_gradient_max_err(trials: usize, seed: u64, eps: f64) -> Result<f64> {
    let mut rng = Rng::from_seed(seed);
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let report = se_gradient_instance(&mut rng, eps)
            .map_err(|e| Error::Internal(format!("gradient trial {trial}: {e}")))?;
        worst = worst.max(report.max_rel_err);
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// suppression oracle

/// Reference linear soft suppression: every round re-scans the entire
/// candidate array for the best remaining score (first hit wins ties, which
/// is the lowest index), then decays every other remaining score whose
/// overlap reaches the threshold. No early exit, no reordering. O(n^2).
pub fn soft_nms_oracle(
    cands: &[([f32; 4], f32)],
    iou_thresh: f32,
    final_cutoff: f32,
    top_k: usize,
) -> Vec<(usize, f32)> {
    fn overlap(a: [f32; 4], b: [f32; 4]) -> f32 {
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

    let mut scores: Vec<f32> = cands.iter().map(|&(_, s)| s).collect();
    let mut alive = vec![true; cands.len()];
    let mut emitted: Vec<(usize, f32)> = Vec::new();
    for _ in 0..cands.len() {
        let mut best: Option<usize> = None;
        for i in 0..cands.len() {
            if alive[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let m = best.expect("loop runs once per candidate");
        alive[m] = false;
        emitted.push((m, scores[m]));
        for i in 0..cands.len() {
            if alive[i] {
                let o = overlap(cands[m].0, cands[i].0);
                if o >= iou_thresh {
                    scores[i] *= 1.0 - o;
                }
            }
        }
    }
    emitted.retain(|&(_, s)| s >= final_cutoff);
    emitted.truncate(top_k);
    emitted
}

/// Draws a random candidate list: up to `max_boxes` boxes with occasional
/// exact duplicates and zero-area degenerates, scores in (0, 1].
pub fn random_nms_instance(rng: &mut Rng, max_boxes: usize) -> Vec<([f32; 4], f32)> {
    let n = (rng.next_u64() % (max_boxes as u64 + 1)) as usize;
    let mut cands: Vec<([f32; 4], f32)> = Vec::with_capacity(n);
    for _ in 0..n {
        let score = rng.next_f32() * 0.99 + 0.01;
        if !cands.is_empty() && rng.next_f32() < 0.1 {
            // duplicate an earlier box to exercise the IoU = 1 path
            let idx = (rng.next_u64() as usize) % cands.len();
            cands.push((cands[idx].0, score));
            continue;
        }
        let x1 = rng.next_f32() * 0.8;
        let y1 = rng.next_f32() * 0.8;
        let (w, h) = if rng.next_f32() < 0.05 {
            (0.0, 0.0) // degenerate
        } else {
            (rng.next_f32() * 0.5 + 1e-3, rng.next_f32() * 0.5 + 1e-3)
        };
        cands.push(([x1, y1, x1 + w, y1 + h], score));
    }
    cands
}

/// Compares the production suppression against the oracle on `trials`
/// random instances with varied thresholds. Returns a summary line, or the
/// first counterexample serialized into the error.
pub fn check_nms_equivalence(trials: usize, seed: u64, max_boxes: usize) -> Result<String> {
    let mut rng = Rng::from_seed(seed);
    for trial in 0..trials {
        let cands = random_nms_instance(&mut rng, max_boxes);
        let iou_thresh = 0.2 + 0.5 * rng.next_f32();
        let cutoff = [0.0f32, 0.01, 0.05][(rng.next_u64() % 3) as usize];
        let top_k = if rng.next_u64().is_multiple_of(4) {
            3
        } else {
            200
        };

        let fast = crate::head::soft_nms_linear(&cands, iou_thresh, cutoff, top_k);
        let slow = soft_nms_oracle(&cands, iou_thresh, cutoff, top_k);
        let agree = fast.len() == slow.len()
            && fast
                .iter()
                .zip(&slow)
                .all(|(a, b)| a.0 == b.0 && (a.1 - b.1).abs() <= 1e-6);
        if !agree {
            let dump = serde_json::json!({
                "trial": trial,
                "iou_thresh": iou_thresh,
                "final_cutoff": cutoff,
                "top_k": top_k,
                "candidates": cands.iter().map(|(b, s)| serde_json::json!({"box": b, "score": s})).collect::<Vec<_>>(),
                "fast": fast,
                "oracle": slow,
            });
            return Err(Error::Internal(format!(
                "suppression diverges from oracle; counterexample: {dump}"
            )));
        }
    }
    Ok(format!(
        "{trials} random suppression instances (<= {max_boxes} boxes) match the oracle"
    ))
}

// ---------------------------------------------------------------------------
// activation profiler

/// Mean absolute activation per (scale, level-block) over the pre-attention
/// aggregates, in f64.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActivationProfile {
    pub levels: usize,
    /// `entries[scale][level]`, scales largest first.
    pub entries: Vec<Vec<f64>>,
}

/// Profiles the pre-attention aggregates X_1..X_S: entry `(i, l)` is the
/// mean of `|x|` over channel block `[l*C, (l+1)*C)` and every batch item
/// and spatial position of X_i.
pub fn activation_profile(
    aggregates: &[Tensor4],
    num_levels: usize,
    c: usize,
) -> Result<ActivationProfile> {
    let mut entries = Vec::with_capacity(aggregates.len());
    for x in aggregates {
        if x.c() != num_levels * c {
            return Err(Error::Shape(format!(
                "aggregate has {} channels, expected {num_levels} blocks of {c}",
                x.c()
            )));
        }
        let mut row = Vec::with_capacity(num_levels);
        for l in 0..num_levels {
            let mut sum = 0.0f64;
            for ni in 0..x.n() {
                for ci in l * c..(l + 1) * c {
                    sum += x
                        .plane(ni, ci)
                        .iter()
                        .map(|&v| f64::from(v).abs())
                        .sum::<f64>();
                }
            }
            let count = (x.n() * c * x.h() * x.w()) as f64;
            row.push(sum / count);
        }
        entries.push(row);
    }
    Ok(ActivationProfile {
        levels: num_levels,
        entries,
    })
}

/// Convenience: profile straight from level outputs.
pub fn activation_profile_from_levels(levels: &[TumOutput], c: usize) -> Result<ActivationProfile> {
    let aggregates: Vec<Tensor4> = (0..NUM_SCALES)
        .map(|i| crate::mlfpn::concat_levels(levels, i))
        .collect::<Result<_>>()?;
    activation_profile(&aggregates, levels.len(), c)
}

impl ActivationProfile {
    /// CSV export: `scale,level,mean_abs`, scale-major, 1-based indices.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scale,level,mean_abs\n");
        for (i, row) in self.entries.iter().enumerate() {
            for (l, v) in row.iter().enumerate() {
                out.push_str(&format!("{},{},{}\n", i + 1, l + 1, v));
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .iter()
            .all(|row| row.iter().all(|v| v.is_finite() && *v >= 0.0))
    }
}
