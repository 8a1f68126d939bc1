//! The multi-level feature pyramid: base-feature fusion, the stacked
//! U-shape levels, and scale-wise aggregation with channel attention.
//!
//! Dataflow for L levels:
//!
//! ```text
//! base   = ffm_v1(shallow, deep)                        B channels
//! x^1    = tum_1(relu(conv1x1(base)))                   level 1, adapter ffm2.1
//! x^l    = tum_l(ffm_v2(base, largest(x^{l-1})))        levels 2..L
//! pyramid[i] = se(concat(x^1[i], ..., x^L[i]))          scales i = 1..6
//! ```
//!
//! Every level emits six features (largest first) of `C` channels; scale i
//! has the same spatial size at every level, which is what makes the
//! per-scale concatenation well-formed.

use crate::config::{NetworkConfig, NUM_SCALES};
use crate::error::{Error, Result};
use crate::params::{Conv, FfmParams, SeParams, TumParams};
use crate::tensor::{
    add, concat_channels, dense, global_avg_pool, sigmoid_scalar, upsample_to, Tensor4,
};
use crate::trace::TraceRecorder;

/// Six features from one level, index i = i-th largest scale.
#[derive(Debug, Clone, PartialEq)]
pub struct TumOutput {
    pub features: Vec<Tensor4>,
}

/// One aggregated pyramid scale after attention.
#[derive(Debug, Clone)]
pub struct PyramidLevel {
    /// 1-based scale index; 1 is the largest map.
    pub scale_index: usize,
    /// Post-attention feature, L*C channels.
    pub aggregated: Tensor4,
    /// Attention coefficients, one L*C block per batch item.
    pub attention: Vec<f32>,
}

/// Base feature plus all level outputs.
#[derive(Debug, Clone)]
pub struct MlfpnOutput {
    pub base: Tensor4,
    pub levels: Vec<TumOutput>,
}

/// Trace name of the base feature produced by [`ffm_v1`].
pub const BASE_NAME: &str = "ffm1.concat";

/// Trace name of scale `i` (0-based) of level `l` (1-based): the decoder
/// emits scales 1..5 from its smoothing convs and the smallest scale from
/// the deepest lateral.
pub fn tum_scale_name(l: usize, i: usize) -> String {
    if i < NUM_SCALES - 1 {
        format!("tum{l}.smooth{}", i + 1)
    } else {
        format!("tum{l}.lat6")
    }
}

/// Fuses the two backbone taps into the base feature: the shallow tap
/// through a 3x3 conv, the deep tap through a 1x1 conv and nearest-neighbor
/// upsampling, concatenated shallow-first.
pub fn ffm_v1(shallow: &Tensor4, deep: &Tensor4, ffm: &FfmParams) -> Result<Tensor4> {
    ffm_v1_traced(
        shallow,
        deep,
        ffm,
        "shallow",
        "deep",
        &mut TraceRecorder::off(),
    )
}

pub fn ffm_v1_traced(
    shallow: &Tensor4,
    deep: &Tensor4,
    ffm: &FfmParams,
    shallow_src: &str,
    deep_src: &str,
    rec: &mut TraceRecorder,
) -> Result<Tensor4> {
    if deep.h() * 2 != shallow.h() || deep.w() * 2 != shallow.w() {
        return Err(Error::Shape(format!(
            "base fusion expects the deep tap at half the shallow size, got {:?} vs {:?}",
            deep.dims(),
            shallow.dims()
        )));
    }
    let s = ffm.shallow.apply_relu(shallow, shallow_src, rec)?;
    let d = ffm.deep.apply_relu(deep, deep_src, rec)?;
    let d_up = upsample_to(&d, s.h(), s.w())?;
    rec.record(
        "ffm1.deep.upsample",
        "upsample",
        &[(&ffm.deep.name, d.dims())],
        d_up.dims(),
        0,
    );
    let base = concat_channels(&[s, d_up])?;
    rec.record(
        BASE_NAME,
        "concat",
        &[
            (
                &ffm.shallow.name,
                [base.n(), ffm.shallow.p.out_channels(), base.h(), base.w()],
            ),
            (
                "ffm1.deep.upsample",
                [base.n(), ffm.deep.p.out_channels(), base.h(), base.w()],
            ),
        ],
        base.dims(),
        0,
    );
    Ok(base)
}

/// Fuses the base feature with the previous level's largest output:
/// `concat(relu(conv1x1(base)), prev_largest)`. `conv` is the level's
/// `ffm2.{l}` layer.
pub fn ffm_v2(base: &Tensor4, prev_largest: &Tensor4, conv: &Conv) -> Result<Tensor4> {
    ffm_v2_traced(
        base,
        prev_largest,
        conv,
        BASE_NAME,
        "prev",
        &mut TraceRecorder::off(),
    )
}

pub fn ffm_v2_traced(
    base: &Tensor4,
    prev_largest: &Tensor4,
    conv: &Conv,
    base_src: &str,
    prev_src: &str,
    rec: &mut TraceRecorder,
) -> Result<Tensor4> {
    if (base.n(), base.h(), base.w()) != (prev_largest.n(), prev_largest.h(), prev_largest.w()) {
        return Err(Error::Shape(format!(
            "{}: base {:?} and previous-level feature {:?} disagree on batch or spatial size",
            conv.name,
            base.dims(),
            prev_largest.dims()
        )));
    }
    let compressed = conv.apply_relu(base, base_src, rec)?;
    let out = concat_channels(&[compressed, prev_largest.clone()])?;
    rec.record(
        &format!("{}.concat", conv.name),
        "concat",
        &[
            (
                &conv.name,
                [out.n(), conv.p.out_channels(), out.h(), out.w()],
            ),
            (prev_src, prev_largest.dims()),
        ],
        out.dims(),
        0,
    );
    Ok(out)
}

/// One U-shape level: five stride-2 encoder convs, then a decoder that
/// repeatedly upsamples, adds a 1x1 lateral of the encoder feature, and
/// smooths with a 1x1 conv. Emits six features, largest first.
pub fn tum_forward(input: &Tensor4, t: &TumParams) -> Result<TumOutput> {
    tum_forward_traced(input, "tum_input", t, &mut TraceRecorder::off())
}

pub fn tum_forward_traced(
    input: &Tensor4,
    src: &str,
    t: &TumParams,
    rec: &mut TraceRecorder,
) -> Result<TumOutput> {
    if t.enc.len() != 5 || t.lat.len() != 6 || t.smooth.len() != 5 {
        return Err(Error::Config(format!(
            "malformed level parameters: {} encoder, {} lateral, {} smoothing convs",
            t.enc.len(),
            t.lat.len(),
            t.smooth.len()
        )));
    }
    // "tum{l}.enc1" -> "tum{l}"
    let prefix = t.enc[0]
        .name
        .split_once('.')
        .map(|(p, _)| p.to_string())
        .unwrap_or_default();

    // encoder: e[0] is the input itself
    let mut enc_feats: Vec<Tensor4> = Vec::with_capacity(6);
    let mut enc_srcs: Vec<String> = Vec::with_capacity(6);
    enc_feats.push(input.clone());
    enc_srcs.push(src.to_string());
    for k in 0..5 {
        let e = t.enc[k]
            .apply_relu(&enc_feats[k], &enc_srcs[k], rec)
            .map_err(|e| {
                if let Error::Shape(msg) = e {
                    // pad-0 output vanishing is a build-level configuration
                    // problem, not a data problem
                    Error::Config(format!("{}: {msg}", t.enc[k].name))
                } else {
                    e
                }
            })?;
        enc_srcs.push(t.enc[k].name.clone());
        enc_feats.push(e);
    }

    // decoder, smallest scale first
    let mut features = vec![None; NUM_SCALES];
    let mut d = t.lat[5].apply_relu(&enc_feats[5], &enc_srcs[5], rec)?;
    let mut d_src = t.lat[5].name.clone();
    features[5] = Some(d.clone());
    for k in (0..5).rev() {
        let target = &enc_feats[k];
        let up = upsample_to(&d, target.h(), target.w())?;
        let up_name = format!("{prefix}.up{}", k + 1);
        rec.record(&up_name, "upsample", &[(&d_src, d.dims())], up.dims(), 0);
        let lateral = t.lat[k].apply_relu(target, &enc_srcs[k], rec)?;
        let sum = add(&up, &lateral).map_err(|e| e.at_layer(&format!("{prefix}.add{}", k + 1)))?;
        let add_name = format!("{prefix}.add{}", k + 1);
        rec.record(
            &add_name,
            "add",
            &[(&up_name, up.dims()), (&t.lat[k].name, lateral.dims())],
            sum.dims(),
            0,
        );
        d = t.smooth[k].apply_relu(&sum, &add_name, rec)?;
        d_src = t.smooth[k].name.clone();
        features[k] = Some(d.clone());
    }

    Ok(TumOutput {
        features: features
            .into_iter()
            .map(|f| f.expect("all scales filled"))
            .collect(),
    })
}

/// Runs the full level stack. `ffm.level_in` and `tums` must both have
/// exactly `net.num_tums` entries.
pub fn mlfpn_forward(
    shallow: &Tensor4,
    deep: &Tensor4,
    net: &NetworkConfig,
    ffm: &FfmParams,
    tums: &[TumParams],
) -> Result<MlfpnOutput> {
    mlfpn_forward_traced(
        shallow,
        deep,
        net,
        ffm,
        tums,
        "shallow",
        "deep",
        &mut TraceRecorder::off(),
    )
}

#[allow(clippy::too_many_arguments)]
pub fn mlfpn_forward_traced(
    shallow: &Tensor4,
    deep: &Tensor4,
    net: &NetworkConfig,
    ffm: &FfmParams,
    tums: &[TumParams],
    shallow_src: &str,
    deep_src: &str,
    rec: &mut TraceRecorder,
) -> Result<MlfpnOutput> {
    if ffm.level_in.len() != net.num_tums || tums.len() != net.num_tums {
        return Err(Error::Config(format!(
            "config says {} levels but params carry {} input convs and {} level bodies",
            net.num_tums,
            ffm.level_in.len(),
            tums.len()
        )));
    }
    let base = ffm_v1_traced(shallow, deep, ffm, shallow_src, deep_src, rec)?;
    let mut levels: Vec<TumOutput> = Vec::with_capacity(net.num_tums);
    let mut prev: Option<(Tensor4, String)> = None;
    for (l, tum) in tums.iter().enumerate() {
        let conv = &ffm.level_in[l];
        let (input, input_src) = match &prev {
            None => (conv.apply_relu(&base, BASE_NAME, rec)?, conv.name.clone()),
            Some((p, p_src)) => (
                ffm_v2_traced(&base, p, conv, BASE_NAME, p_src, rec)?,
                format!("{}.concat", conv.name),
            ),
        };
        let out = tum_forward_traced(&input, &input_src, tum, rec)?;
        prev = Some((out.features[0].clone(), tum_scale_name(l + 1, 0)));
        levels.push(out);
    }
    Ok(MlfpnOutput { base, levels })
}

/// Channel attention: squeeze by global average pooling, excite through two
/// dense layers (inner ReLU, outer sigmoid), scale every channel plane by
/// its coefficient. Returns the scaled feature and the coefficients
/// (`n * channels` values, one block per batch item).
pub fn se_attention(x: &Tensor4, se: &SeParams) -> Result<(Tensor4, Vec<f32>)> {
    let (n, c, _, _) = x.shape();
    check_se_dims(c, se)?;
    let z = global_avg_pool(x);
    let mut out = x.clone();
    let mut attention = Vec::with_capacity(n * c);
    for ni in 0..n {
        let zn = &z[ni * c..(ni + 1) * c];
        let hidden: Vec<f32> = dense(zn, &se.fc1.weight, &se.fc1.bias)?
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        let s: Vec<f32> = dense(&hidden, &se.fc2.weight, &se.fc2.bias)?
            .into_iter()
            .map(sigmoid_scalar)
            .collect();
        let hw = out.h() * out.w();
        for (ci, &sc) in s.iter().enumerate() {
            let start = (ni * c + ci) * hw;
            for v in &mut out.data_mut()[start..start + hw] {
                *v *= sc;
            }
        }
        attention.extend_from_slice(&s);
    }
    Ok((out, attention))
}

fn check_se_dims(c: usize, se: &SeParams) -> Result<()> {
    let hidden = se.fc1.weight.rows;
    if se.fc1.weight.cols != c
        || se.fc2.weight.rows != c
        || se.fc2.weight.cols != hidden
        || se.fc1.bias.len() != hidden
        || se.fc2.bias.len() != c
    {
        return Err(Error::Config(format!(
            "attention weights ({}x{} / {}x{}) do not fit {} channels",
            se.fc1.weight.rows, se.fc1.weight.cols, se.fc2.weight.rows, se.fc2.weight.cols, c
        )));
    }
    Ok(())
}

/// All quantities of one attention forward pass, evaluated entirely in f64.
/// This is the reference path for gradient verification.
#[derive(Debug)]
pub struct SeForward64 {
    pub z: Vec<f64>,
    pub pre1: Vec<f64>,
    pub hidden: Vec<f64>,
    pub s: Vec<f64>,
    pub out: Vec<f64>,
}

/// 64-bit attention forward on raw slices. `x` has `n * c * hw` values,
/// `w1` is `hidden x c` row-major, `w2` is `c x hidden`.
#[allow(clippy::too_many_arguments)]
pub fn se_forward_f64(
    x: &[f64],
    n: usize,
    c: usize,
    hw: usize,
    w1: &[f64],
    b1: &[f64],
    w2: &[f64],
    b2: &[f64],
) -> SeForward64 {
    let hidden_w = b1.len();
    let mut z = vec![0.0; n * c];
    for ni in 0..n {
        for ci in 0..c {
            let start = (ni * c + ci) * hw;
            z[ni * c + ci] = x[start..start + hw].iter().sum::<f64>() / hw as f64;
        }
    }
    let mut pre1 = vec![0.0; n * hidden_w];
    let mut hid = vec![0.0; n * hidden_w];
    let mut s = vec![0.0; n * c];
    let mut out = vec![0.0; x.len()];
    for ni in 0..n {
        for j in 0..hidden_w {
            let mut acc = b1[j];
            for ci in 0..c {
                acc += w1[j * c + ci] * z[ni * c + ci];
            }
            pre1[ni * hidden_w + j] = acc;
            hid[ni * hidden_w + j] = acc.max(0.0);
        }
        for ci in 0..c {
            let mut acc = b2[ci];
            for j in 0..hidden_w {
                acc += w2[ci * hidden_w + j] * hid[ni * hidden_w + j];
            }
            s[ni * c + ci] = 1.0 / (1.0 + (-acc).exp());
        }
        for ci in 0..c {
            let start = (ni * c + ci) * hw;
            for p in 0..hw {
                out[start + p] = s[ni * c + ci] * x[start + p];
            }
        }
    }
    SeForward64 {
        z,
        pre1,
        hidden: hid,
        s,
        out,
    }
}

/// Gradients of `sum(upstream ⊙ se(x))` with respect to every input,
/// computed in f64 alongside the f64 forward quantities.
#[derive(Debug)]
pub struct SeGradients {
    pub x: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Reverse-mode gradients of the scalar loss `sum(upstream ⊙ se(x))`.
pub fn se_backward(x: &Tensor4, se: &SeParams, upstream: &Tensor4) -> Result<SeGradients> {
    let (n, c, h, w) = x.shape();
    check_se_dims(c, se)?;
    if upstream.shape() != x.shape() {
        return Err(Error::Config(format!(
            "upstream gradient shape {:?} != input shape {:?}",
            upstream.dims(),
            x.dims()
        )));
    }
    let hw = h * w;
    let hidden_w = se.fc1.weight.rows;
    let xf: Vec<f64> = x.data().iter().map(|&v| f64::from(v)).collect();
    let g: Vec<f64> = upstream.data().iter().map(|&v| f64::from(v)).collect();
    let w1: Vec<f64> = se.fc1.weight.data.iter().map(|&v| f64::from(v)).collect();
    let b1: Vec<f64> = se.fc1.bias.iter().map(|&v| f64::from(v)).collect();
    let w2: Vec<f64> = se.fc2.weight.data.iter().map(|&v| f64::from(v)).collect();
    let b2: Vec<f64> = se.fc2.bias.iter().map(|&v| f64::from(v)).collect();
    let fwd = se_forward_f64(&xf, n, c, hw, &w1, &b1, &w2, &b2);

    let mut gx = vec![0.0; xf.len()];
    let mut gw1 = vec![0.0; w1.len()];
    let mut gb1 = vec![0.0; b1.len()];
    let mut gw2 = vec![0.0; w2.len()];
    let mut gb2 = vec![0.0; b2.len()];

    for ni in 0..n {
        // G_c = sum_p g * x; d pre2 = G * s(1-s)
        let mut dpre2 = vec![0.0; c];
        for (ci, d) in dpre2.iter_mut().enumerate() {
            let start = (ni * c + ci) * hw;
            let big_g: f64 = (0..hw).map(|p| g[start + p] * xf[start + p]).sum();
            let s = fwd.s[ni * c + ci];
            *d = big_g * s * (1.0 - s);
        }
        for ci in 0..c {
            gb2[ci] += dpre2[ci];
            for j in 0..hidden_w {
                gw2[ci * hidden_w + j] += dpre2[ci] * fwd.hidden[ni * hidden_w + j];
            }
        }
        let mut dpre1 = vec![0.0; hidden_w];
        for j in 0..hidden_w {
            let mut dh = 0.0;
            for ci in 0..c {
                dh += w2[ci * hidden_w + j] * dpre2[ci];
            }
            dpre1[j] = if fwd.pre1[ni * hidden_w + j] > 0.0 {
                dh
            } else {
                0.0
            };
        }
        for j in 0..hidden_w {
            gb1[j] += dpre1[j];
            for ci in 0..c {
                gw1[j * c + ci] += dpre1[j] * fwd.z[ni * c + ci];
            }
        }
        for ci in 0..c {
            let mut dz = 0.0;
            for j in 0..hidden_w {
                dz += w1[j * c + ci] * dpre1[j];
            }
            let start = (ni * c + ci) * hw;
            let s = fwd.s[ni * c + ci];
            for p in 0..hw {
                gx[start + p] = g[start + p] * s + dz / hw as f64;
            }
        }
    }
    Ok(SeGradients {
        x: gx,
        w1: gw1,
        b1: gb1,
        w2: gw2,
        b2: gb2,
    })
}

/// Concatenates scale `i` (0-based) across levels, in level order. This is
/// the pre-attention aggregate X_i.
pub fn concat_levels(levels: &[TumOutput], scale: usize) -> Result<Tensor4> {
    if levels.is_empty() {
        return Err(Error::Shape("no levels to aggregate".into()));
    }
    let parts: Vec<Tensor4> = levels
        .iter()
        .map(|l| {
            l.features.get(scale).cloned().ok_or_else(|| {
                Error::Shape(format!(
                    "a level has {} scales, wanted index {scale}",
                    l.features.len()
                ))
            })
        })
        .collect::<Result<_>>()?;
    concat_channels(&parts).map_err(|e| e.at_layer(&format!("sfam.scale{}.concat", scale + 1)))
}

/// Scale-wise aggregation: per scale, concatenate all levels and apply
/// channel attention.
pub fn sfam_aggregate(levels: &[TumOutput], se: &[SeParams]) -> Result<Vec<PyramidLevel>> {
    sfam_aggregate_traced(levels, se, &mut TraceRecorder::off())
}

pub fn sfam_aggregate_traced(
    levels: &[TumOutput],
    se: &[SeParams],
    rec: &mut TraceRecorder,
) -> Result<Vec<PyramidLevel>> {
    if se.len() != NUM_SCALES {
        return Err(Error::Config(format!(
            "need {NUM_SCALES} attention blocks, got {}",
            se.len()
        )));
    }
    let mut cats = Vec::with_capacity(NUM_SCALES);
    for i in 0..NUM_SCALES {
        let cat = concat_levels(levels, i)?;
        let inputs: Vec<(String, [usize; 4])> = levels
            .iter()
            .enumerate()
            .map(|(l, lev)| (tum_scale_name(l + 1, i), lev.features[i].dims()))
            .collect();
        let input_refs: Vec<(&str, [usize; 4])> =
            inputs.iter().map(|(s, d)| (s.as_str(), *d)).collect();
        rec.record(
            &format!("sfam.scale{}.concat", i + 1),
            "concat",
            &input_refs,
            cat.dims(),
            0,
        );
        cats.push(cat);
    }
    let mut pyramid = Vec::with_capacity(NUM_SCALES);
    for (i, cat) in cats.into_iter().enumerate() {
        let params = &se[i];
        let (aggregated, attention) =
            se_attention(&cat, params).map_err(|e| e.at_layer(&format!("sfam.scale{}", i + 1)))?;
        let param_count = params.fc1.weight.data.len()
            + params.fc1.bias.len()
            + params.fc2.weight.data.len()
            + params.fc2.bias.len();
        rec.record(
            &format!("sfam.scale{}.se", i + 1),
            "se",
            &[(&format!("sfam.scale{}.concat", i + 1), cat.dims())],
            aggregated.dims(),
            param_count,
        );
        pyramid.push(PyramidLevel {
            scale_index: i + 1,
            aggregated,
            attention,
        });
    }
    Ok(pyramid)
}
