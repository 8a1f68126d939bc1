//! Acceptance gate: one test per published criterion. Each test prints a
//! single PASS line with the measured evidence; a failing criterion fails
//! its test. Heavy tests share a lock so wall-clock bounds stay honest.

use std::sync::Mutex;
use std::time::Instant;

use mlfpn_core::config::{BackboneConfig, DetectSettings, NetworkConfig};
use mlfpn_core::head::{generate_anchors, iou, soft_nms_linear};
use mlfpn_core::mlfpn::se_attention;
use mlfpn_core::mtsr;
use mlfpn_core::params::Model;
use mlfpn_core::pipeline::forward_pyramid;
use mlfpn_core::rng::Rng;
use mlfpn_core::tensor::{conv2d, conv_out_extent, ConvParams, Tensor4};
use mlfpn_core::verify;

static GATE: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    GATE.lock().unwrap_or_else(|e| e.into_inner())
}

fn rand_image(side: usize, seed: u64) -> Tensor4 {
    let mut rng = Rng::from_seed(seed);
    let data = (0..3 * side * side).map(|_| rng.uniform(1.0)).collect();
    Tensor4::from_vec(1, 3, side, side, data).unwrap()
}

fn level_bits(out: &mlfpn_core::pipeline::PipelineOutput, level: usize) -> Vec<u32> {
    out.mlfpn.levels[level]
        .features
        .iter()
        .flat_map(|f| f.data().iter().map(|v| v.to_bits()))
        .collect()
}

#[test]
fn criterion_1_shape_contract() {
    let _g = serial();
    let net = NetworkConfig::default();
    let bb = BackboneConfig::for_network(&net);

    let t0 = Instant::now();
    let trace = verify::trace_shapes(&net, &bb, 1).unwrap();
    let symbolic_secs = t0.elapsed().as_secs_f64();
    assert!(
        symbolic_secs < 1.0,
        "symbolic trace took {symbolic_secs:.2}s"
    );

    let tail = &trace.records[trace.records.len() - 6..];
    let extents: Vec<usize> = tail.iter().map(|r| r.output[2]).collect();
    assert_eq!(extents, vec![40, 20, 10, 5, 3, 1]);
    for rec in tail {
        assert_eq!(rec.output[1], 2048, "{}: L*C channels", rec.name);
    }

    let t1 = Instant::now();
    verify::check_trace_matches_execution(&net, &bb, 1).unwrap();
    let executed_secs = t1.elapsed().as_secs_f64();
    assert!(
        executed_secs < 30.0,
        "executed pass took {executed_secs:.2}s"
    );

    println!(
        "PASS criterion 1: 6 scales {extents:?} x 2048 channels; symbolic {symbolic_secs:.3}s, \
         executed {executed_secs:.1}s"
    );
}

#[test]
fn criterion_2_level_stack_truncation() {
    let _g = serial();
    let image = rand_image(320, 0xF00D);
    let deep_net = NetworkConfig::default(); // 8 levels
    let bb = BackboneConfig::for_network(&deep_net);
    let deep_bits: Vec<Vec<u32>> = {
        let model = Model::init(&deep_net, &bb).unwrap();
        let out = forward_pyramid(&image, &model).unwrap();
        (0..8).map(|l| level_bits(&out, l)).collect()
    };

    for k in [1usize, 2, 4] {
        let net = NetworkConfig {
            num_tums: k,
            ..NetworkConfig::default()
        };
        let model = Model::init(&net, &BackboneConfig::for_network(&net)).unwrap();
        let out = forward_pyramid(&image, &model).unwrap();
        for (l, deep) in deep_bits.iter().enumerate().take(k) {
            assert_eq!(
                &level_bits(&out, l),
                deep,
                "level {l} of the {k}-level stack diverges from the 8-level run"
            );
        }
    }
    println!("PASS criterion 2: levels 1..k bit-identical to the 8-level run for k in {{1,2,4}}");
}

#[test]
fn criterion_3_attention_gradients() {
    let _g = serial();
    let trials = 120;
    let worst = verify::se_gradient_max_err(trials, 0xACCE, 1e-3).unwrap();
    assert!(worst <= 1e-4, "max relative error {worst}");

    // zero weights: sigmoid(0) must come out as exactly one half
    let net = NetworkConfig {
        num_tums: 1,
        tum_channels: 16,
        num_classes: 3,
        ..NetworkConfig::default()
    };
    let bb = BackboneConfig::for_network(&net);
    let zero = Model::zeros(&net, &bb).unwrap();
    let mut rng = Rng::from_seed(3);
    let x = Tensor4::from_vec(1, 16, 4, 4, (0..256).map(|_| rng.uniform(2.0)).collect()).unwrap();
    let (_, coeffs) = se_attention(&x, &zero.sfam[0]).unwrap();
    assert!(coeffs.iter().all(|s| *s == 0.5), "{coeffs:?}");

    println!(
        "PASS criterion 3: {trials} gradient instances, max relative error {worst:.2e}; \
         zero-weight attention is exactly 0.5"
    );
}

#[test]
fn criterion_4_suppression_oracle() {
    let _g = serial();
    let summary = verify::check_nms_equivalence(1000, 0x50F7, 64).unwrap();

    // two identical boxes: second decays to exactly zero
    let b = [0.1, 0.1, 0.5, 0.5];
    let out = soft_nms_linear(&[(b, 0.9), (b, 0.8)], 0.3, 0.0, 200);
    assert_eq!(out, vec![(0, 0.9), (1, 0.0)]);

    // hand case with IoU exactly 1/3: second score becomes 0.8 * (1 - 1/3)
    let a = ([0.0, 0.0, 1.0, 1.0], 0.9f32);
    let c = ([0.0, 0.5, 1.0, 1.5], 0.8f32);
    assert!((iou(a.0, c.0) - 1.0 / 3.0).abs() < 1e-6);
    let out = soft_nms_linear(&[a, c], 0.3, 0.01, 200);
    assert!((out[1].1 - 0.8 * (2.0 / 3.0)).abs() < 1e-6, "{:?}", out);

    println!("PASS criterion 4: {summary}; exact-zero and IoU=1/3 hand cases hold");
}

#[test]
fn criterion_5_anchor_counts() {
    let _g = serial();
    let settings = DetectSettings::default();

    let net320 = NetworkConfig::default();
    let n320 = generate_anchors(&net320, &settings).unwrap().len();
    assert_eq!(n320, 12810);

    let net512 = NetworkConfig {
        input_size: 512,
        ..NetworkConfig::default()
    };
    let bb = BackboneConfig::for_network(&net512);
    let trace = verify::trace_shapes(&net512, &bb, 1).unwrap();
    let closed_form: usize = trace.records[trace.records.len() - 6..]
        .iter()
        .map(|r| r.output[2] * r.output[3] * 6)
        .sum();
    let n512 = generate_anchors(&net512, &settings).unwrap().len();
    assert_eq!(n512, closed_form);
    assert_eq!(n512, 32742);

    println!("PASS criterion 5: 12810 anchors at 320, {n512} at 512 (= 6 * sum of grid squares)");
}

#[test]
fn criterion_6_parameter_accounting() {
    let _g = serial();
    // toy config, hand-derived total
    let toy = NetworkConfig {
        input_size: 320,
        num_tums: 2,
        tum_channels: 8,
        base_compress_shallow: 8,
        base_compress_deep: 8,
        se_reduction: 4,
        num_classes: 2,
        seed: 0,
    };
    let toy_bb = BackboneConfig {
        shallow_channels: 16,
        deep_channels: 32,
        stem_depth: 1,
        ..BackboneConfig::for_network(&toy)
    };
    let report = verify::count_params(&toy, &toy_bb).unwrap();
    assert_eq!(report.total, 48_960);
    assert_eq!(Model::init(&toy, &toy_bb).unwrap().param_elements(), 48_960);

    // published width: cost of one extra level, averaged over two
    let at = |l: usize| NetworkConfig {
        num_tums: l,
        ..NetworkConfig::default()
    };
    let bb = BackboneConfig::for_network(&at(4));
    let c4 = verify::count_params(&at(4), &bb).unwrap().total;
    let c2 = verify::count_params(&at(2), &bb).unwrap().total;
    let marginal = (c4 - c2) as f64 / 2.0;
    let reference = 10.05e6;
    let ratio = marginal / reference;
    assert!(
        (0.8..=1.2).contains(&ratio),
        "marginal {marginal} vs reference {reference}"
    );

    println!(
        "PASS criterion 6: toy total 48960 exact; per-level cost {marginal:.0} within 20% of \
         {reference:.0} (ratio {ratio:.3})"
    );
}

/// Six-loop reference convolution: per output element, taps are summed in
/// (in_channel, ky, kx) order in f64 with out-of-bounds taps skipped. The
/// production kernel promises the same order, so equality is bitwise.
fn conv_reference(x: &Tensor4, p: &ConvParams) -> Tensor4 {
    let (n, c, h, w) = x.shape();
    let (out_ch, _, kh, kw) = p.weights.shape();
    let oh = conv_out_extent(h, kh, p.stride, p.pad).unwrap();
    let ow = conv_out_extent(w, kw, p.stride, p.pad).unwrap();
    let mut out = Vec::with_capacity(n * out_ch * oh * ow);
    for ni in 0..n {
        for oc in 0..out_ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = f64::from(p.bias[oc]);
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * p.stride + ky) as i64 - p.pad as i64;
                                let ix = (ox * p.stride + kx) as i64 - p.pad as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                    continue;
                                }
                                acc += f64::from(p.weights.at(oc, ic, ky, kx))
                                    * f64::from(x.at(ni, ic, iy as usize, ix as usize));
                            }
                        }
                    }
                    out.push(acc as f32);
                }
            }
        }
    }
    Tensor4::from_vec(n, out_ch, oh, ow, out).unwrap()
}

#[test]
fn criterion_7_conv_oracle() {
    let _g = serial();
    let mut rng = Rng::from_seed(0xC04);
    let mut cases = 0usize;
    while cases < 100 {
        let n = 1 + (rng.next_u64() % 2) as usize;
        let c = 1 + (rng.next_u64() % 8) as usize;
        let h = 1 + (rng.next_u64() % 16) as usize;
        let w = 1 + (rng.next_u64() % 16) as usize;
        let oc = 1 + (rng.next_u64() % 8) as usize;
        let k = [1usize, 3][(rng.next_u64() % 2) as usize];
        let stride = 1 + (rng.next_u64() % 2) as usize;
        let pad = (rng.next_u64() % 2) as usize;
        if h + 2 * pad < k || w + 2 * pad < k {
            continue;
        }
        let x = Tensor4::from_vec(
            n,
            c,
            h,
            w,
            (0..n * c * h * w).map(|_| rng.uniform(2.0)).collect(),
        )
        .unwrap();
        let weights = Tensor4::from_vec(
            oc,
            c,
            k,
            k,
            (0..oc * c * k * k).map(|_| rng.uniform(1.0)).collect(),
        )
        .unwrap();
        let bias = (0..oc).map(|_| rng.uniform(0.5)).collect();
        let p = ConvParams::new(weights, bias, stride, pad).unwrap();

        let fast = conv2d(&x, &p).unwrap();
        let slow = conv_reference(&x, &p);
        assert_eq!(fast.shape(), slow.shape());
        let same = fast
            .data()
            .iter()
            .zip(slow.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(
            same,
            "case {cases}: n={n} c={c} {h}x{w} oc={oc} k={k} s={stride} p={pad}"
        );
        cases += 1;
    }
    println!("PASS criterion 7: conv2d bitwise-equal to the six-loop reference on {cases} cases");
}

#[test]
fn criterion_8_cli_determinism() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let image_path = dir.path().join("image.mtsr");
    mtsr::save_tensor(&image_path, &rand_image(320, 77)).unwrap();
    let image = image_path.display().to_string();

    let mut outputs = Vec::new();
    for run in 0..3 {
        let out_file = dir.path().join(format!("dets_{run}.json"));
        let status = std::process::Command::new(env!("CARGO_BIN_EXE_mlfpn"))
            .args([
                "detect",
                "--input",
                &image,
                "--tums",
                "2",
                "--channels",
                "32",
                "--seed",
                "7",
                "--num-classes",
                "5",
                "--score-thresh",
                "0.0",
                "--out",
                out_file.display().to_string().as_str(),
            ])
            .status()
            .unwrap();
        assert!(status.success());
        outputs.push(std::fs::read(&out_file).unwrap());
    }
    assert!(!outputs[0].is_empty());
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[1], outputs[2]);
    let dets: serde_json::Value = serde_json::from_slice(&outputs[0]).unwrap();
    assert!(!dets.as_array().unwrap().is_empty());

    // zero weights with 81 classes: uniform scores fall below threshold
    let net = NetworkConfig {
        num_tums: 1,
        tum_channels: 16,
        num_classes: 81,
        ..NetworkConfig::default()
    };
    let bb = BackboneConfig::for_network(&net);
    let store = dir.path().join("zeros");
    Model::zeros(&net, &bb).unwrap().save(&store).unwrap();
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_mlfpn"))
        .args([
            "detect",
            "--input",
            &image,
            "--tums",
            "1",
            "--channels",
            "16",
            "--num-classes",
            "81",
            "--params",
            store.display().to_string().as_str(),
        ])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "[]");

    println!(
        "PASS criterion 8: 3 detect runs byte-identical ({} bytes); zero-weight 81-class model \
         emits []",
        outputs[0].len()
    );
}

#[test]
fn criterion_9_activation_profiler() {
    let _g = serial();
    let net = NetworkConfig {
        input_size: 320,
        num_tums: 3,
        tum_channels: 8,
        base_compress_shallow: 8,
        base_compress_deep: 8,
        se_reduction: 4,
        num_classes: 3,
        seed: 1,
    };
    let bb = BackboneConfig {
        shallow_channels: 8,
        deep_channels: 8,
        stem_depth: 1,
        ..BackboneConfig::for_network(&net)
    };
    let c = net.tum_channels;

    // all-ones aggregates: every entry exactly 1.0
    let extents = net.scale_extents().unwrap();
    let ones: Vec<Tensor4> = extents
        .iter()
        .map(|&e| Tensor4::full(1, 3 * c, e, e, 1.0).unwrap())
        .collect();
    let p = verify::activation_profile(&ones, 3, c).unwrap();
    assert_eq!(p.entries.len(), 6);
    assert!(p.entries.iter().all(|row| row.len() == 3));
    assert!(p.entries.iter().flatten().all(|&v| v == 1.0));

    // real forward with one level zeroed out
    let model = Model::init(&net, &bb).unwrap();
    let mut levels = forward_pyramid(&rand_image(320, 5), &model)
        .unwrap()
        .mlfpn
        .levels;
    for f in &mut levels[2].features {
        *f = Tensor4::zeros(f.n(), f.c(), f.h(), f.w()).unwrap();
    }
    let p = verify::activation_profile_from_levels(&levels, c).unwrap();
    assert!(p.all_finite());
    for row in &p.entries {
        assert_eq!(row.len(), 3);
        assert_eq!(row[2], 0.0, "zeroed level must profile to zero");
    }

    // elementwise oracle within 1e-6
    for (i, row) in p.entries.iter().enumerate() {
        let agg = mlfpn_core::mlfpn::concat_levels(&levels, i).unwrap();
        for (l, &got) in row.iter().enumerate() {
            let mut sum = 0.0f64;
            let mut count = 0usize;
            for ni in 0..agg.n() {
                for ci in l * c..(l + 1) * c {
                    for hi in 0..agg.h() {
                        for wi in 0..agg.w() {
                            sum += f64::from(agg.at(ni, ci, hi, wi)).abs();
                            count += 1;
                        }
                    }
                }
            }
            assert!((got - sum / count as f64).abs() <= 1e-6);
        }
    }

    println!("PASS criterion 9: profile is 6x3, ones map to 1.0, zeroed level zeroes its column");
}
