//! Model parameters: construction, deterministic initialization, and the
//! on-disk parameter store.
//!
//! Every layer has a stable name (`backbone.stage2.conv1`, `tum3.enc5`,
//! `ffm2.1`, `sfam.scale4.fc2`, `head.scale1.conf`, ...). Initialization
//! draws each layer from its own generator keyed by `(seed, name)`, so a
//! layer's values never depend on which other layers exist.
//!
//! The store is a directory of `.mtsr` tensors plus `manifest.txt` with
//! tab-separated `key<TAB>filename` lines; keys are `<layer>.weight` and
//! `<layer>.bias`. Biases are stored as `(len,1,1,1)`, dense matrices as
//! `(rows,cols,1,1)`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::config::{BackboneConfig, NetworkConfig, ANCHORS_PER_CELL, NUM_SCALES};
use crate::error::{Error, Result};
use crate::mtsr;
use crate::rng::{glorot_bound, Rng};
use crate::tensor::{self, ConvParams, Matrix, Tensor4};

pub const MANIFEST_FILE: &str = "manifest.txt";

/// A named convolution layer.
#[derive(Debug, Clone)]
pub struct Conv {
    pub name: String,
    pub p: ConvParams,
}

impl Conv {
    /// Convolution followed by ReLU, recorded under this layer's name.
    /// `src` is the trace name of the producer of `x`.
    pub fn apply_relu(
        &self,
        x: &Tensor4,
        src: &str,
        rec: &mut crate::trace::TraceRecorder,
    ) -> Result<Tensor4> {
        let out = tensor::relu(&tensor::conv2d(x, &self.p).map_err(|e| e.at_layer(&self.name))?);
        self.record(x, src, &out, true, rec);
        Ok(out)
    }

    /// Bare convolution (no activation), recorded under this layer's name.
    pub fn apply(
        &self,
        x: &Tensor4,
        src: &str,
        rec: &mut crate::trace::TraceRecorder,
    ) -> Result<Tensor4> {
        let out = tensor::conv2d(x, &self.p).map_err(|e| e.at_layer(&self.name))?;
        self.record(x, src, &out, false, rec);
        Ok(out)
    }

    fn record(
        &self,
        x: &Tensor4,
        src: &str,
        out: &Tensor4,
        relu: bool,
        rec: &mut crate::trace::TraceRecorder,
    ) {
        rec.record(
            &self.name,
            &crate::trace::conv_op(self.p.weights.h(), self.p.stride, relu),
            &[(src, x.dims())],
            out.dims(),
            self.p.param_count(),
        );
    }
}

/// A named dense (fully connected) layer.
#[derive(Debug, Clone)]
pub struct Dense {
    pub name: String,
    pub weight: Matrix,
    pub bias: Vec<f32>,
}

/// Squeeze-excitation parameters for one pyramid scale.
#[derive(Debug, Clone)]
pub struct SeParams {
    pub fc1: Dense,
    pub fc2: Dense,
}

/// One level's U-shape module: 5 encoder convs, 6 laterals, 5 smoothing convs.
#[derive(Debug, Clone)]
pub struct TumParams {
    pub enc: Vec<Conv>,
    pub lat: Vec<Conv>,
    pub smooth: Vec<Conv>,
}

#[derive(Debug, Clone)]
pub struct BackboneParams {
    /// `stages[s][k]` = `backbone.stage{s+1}.conv{k+1}`; conv 1 is strided.
    pub stages: Vec<Vec<Conv>>,
}

/// Base-feature fusion plus per-level input convs. `level_in[l-1]` is
/// `ffm2.{l}`: level 1 maps the base feature to the full TUM input width,
/// later levels map it to half that and concatenate the previous level's
/// largest output.
#[derive(Debug, Clone)]
pub struct FfmParams {
    pub shallow: Conv,
    pub deep: Conv,
    pub level_in: Vec<Conv>,
}

/// Per-scale detection convs: box regression and class logits.
#[derive(Debug, Clone)]
pub struct HeadScale {
    pub loc: Conv,
    pub conf: Conv,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub net: NetworkConfig,
    pub backbone_cfg: BackboneConfig,
    pub backbone: BackboneParams,
    pub ffm: FfmParams,
    pub tums: Vec<TumParams>,
    pub sfam: Vec<SeParams>,
    pub heads: Vec<HeadScale>,
}

#[allow(clippy::too_many_arguments)]
fn init_conv(
    name: String,
    out_ch: usize,
    in_ch: usize,
    k: usize,
    stride: usize,
    pad: usize,
    seed: u64,
    zeros: bool,
) -> Result<Conv> {
    let count = out_ch * in_ch * k * k;
    let data = if zeros {
        vec![0.0; count]
    } else {
        let bound = glorot_bound(in_ch * k * k, out_ch * k * k);
        let mut rng = Rng::for_layer(seed, &name);
        (0..count).map(|_| rng.uniform(bound)).collect()
    };
    let weights = Tensor4::from_vec(out_ch, in_ch, k, k, data)?;
    let p = ConvParams::new(weights, vec![0.0; out_ch], stride, pad)?;
    Ok(Conv { name, p })
}

fn init_dense(name: String, rows: usize, cols: usize, seed: u64, zeros: bool) -> Result<Dense> {
    if rows == 0 || cols == 0 {
        return Err(Error::Config(format!(
            "dense layer {name} would have zero width ({rows}x{cols})"
        )));
    }
    let data = if zeros {
        vec![0.0; rows * cols]
    } else {
        let bound = glorot_bound(cols, rows);
        let mut rng = Rng::for_layer(seed, &name);
        (0..rows * cols).map(|_| rng.uniform(bound)).collect()
    };
    Ok(Dense {
        name,
        weight: Matrix::new(rows, cols, data)?,
        bias: vec![0.0; rows],
    })
}

impl Model {
    /// Seeded Glorot-uniform initialization (biases zero).
    pub fn init(net: &NetworkConfig, backbone: &BackboneConfig) -> Result<Self> {
        Self::build(net, backbone, false)
    }

    /// All parameters zero. ReLU(conv(x)) chains then output exactly zero,
    /// and every class posterior is uniform.
    pub fn zeros(net: &NetworkConfig, backbone: &BackboneConfig) -> Result<Self> {
        Self::build(net, backbone, true)
    }

    fn build(net: &NetworkConfig, backbone: &BackboneConfig, zeros: bool) -> Result<Self> {
        net.validate()?;
        backbone.validate()?;
        if net.input_size != backbone.input_size {
            return Err(Error::Config(format!(
                "network input_size {} != backbone input_size {}",
                net.input_size, backbone.input_size
            )));
        }
        let c = net.tum_channels;
        let b = net.base_channels();
        let lc = net.aggregated_channels();
        let hidden = net.se_hidden();

        let widths = backbone.stage_widths();
        let mut stages = Vec::with_capacity(4);
        let mut prev = 3;
        for (s, &width) in widths.iter().enumerate() {
            let mut convs = Vec::with_capacity(backbone.stem_depth);
            for k in 0..backbone.stem_depth {
                let name = format!("backbone.stage{}.conv{}", s + 1, k + 1);
                let (in_ch, stride) = if k == 0 { (prev, 2) } else { (width, 1) };
                convs.push(init_conv(
                    name,
                    width,
                    in_ch,
                    3,
                    stride,
                    1,
                    backbone.seed,
                    zeros,
                )?);
            }
            stages.push(convs);
            prev = width;
        }

        let seed = net.seed;
        let ffm = FfmParams {
            shallow: init_conv(
                "ffm1.shallow".into(),
                net.base_compress_shallow,
                backbone.shallow_channels,
                3,
                1,
                1,
                seed,
                zeros,
            )?,
            deep: init_conv(
                "ffm1.deep".into(),
                net.base_compress_deep,
                backbone.deep_channels,
                1,
                1,
                0,
                seed,
                zeros,
            )?,
            level_in: (1..=net.num_tums)
                .map(|l| {
                    let out = if l == 1 { 2 * c } else { c };
                    init_conv(format!("ffm2.{l}"), out, b, 1, 1, 0, seed, zeros)
                })
                .collect::<Result<_>>()?,
        };

        let tums = (1..=net.num_tums)
            .map(|l| {
                let enc = (1..=5)
                    .map(|k| {
                        let in_ch = if k == 1 { 2 * c } else { c };
                        let pad = if k == 5 { 0 } else { 1 };
                        init_conv(format!("tum{l}.enc{k}"), c, in_ch, 3, 2, pad, seed, zeros)
                    })
                    .collect::<Result<_>>()?;
                let lat = (1..=6)
                    .map(|k| {
                        let in_ch = if k == 1 { 2 * c } else { c };
                        init_conv(format!("tum{l}.lat{k}"), c, in_ch, 1, 1, 0, seed, zeros)
                    })
                    .collect::<Result<_>>()?;
                let smooth = (1..=5)
                    .map(|k| init_conv(format!("tum{l}.smooth{k}"), c, c, 1, 1, 0, seed, zeros))
                    .collect::<Result<_>>()?;
                Ok(TumParams { enc, lat, smooth })
            })
            .collect::<Result<Vec<_>>>()?;

        let sfam = (1..=NUM_SCALES)
            .map(|i| {
                Ok(SeParams {
                    fc1: init_dense(format!("sfam.scale{i}.fc1"), hidden, lc, seed, zeros)?,
                    fc2: init_dense(format!("sfam.scale{i}.fc2"), lc, hidden, seed, zeros)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let heads = (1..=NUM_SCALES)
            .map(|i| {
                Ok(HeadScale {
                    loc: init_conv(
                        format!("head.scale{i}.loc"),
                        ANCHORS_PER_CELL * 4,
                        lc,
                        3,
                        1,
                        1,
                        seed,
                        zeros,
                    )?,
                    conf: init_conv(
                        format!("head.scale{i}.conf"),
                        ANCHORS_PER_CELL * net.num_classes,
                        lc,
                        3,
                        1,
                        1,
                        seed,
                        zeros,
                    )?,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        Ok(Self {
            net: net.clone(),
            backbone_cfg: backbone.clone(),
            backbone: BackboneParams { stages },
            ffm,
            tums,
            sfam,
            heads,
        })
    }

    /// Walks every stored tensor slot in canonical order. Used by the store
    /// reader and writer so the two can never enumerate different sets.
    fn visit_slots<F>(&mut self, mut f: F) -> Result<()>
    where
        F: FnMut(String, Slot<'_>) -> Result<()>,
    {
        fn conv<F>(c: &mut Conv, f: &mut F) -> Result<()>
        where
            F: FnMut(String, Slot<'_>) -> Result<()>,
        {
            f(
                format!("{}.weight", c.name),
                Slot::Weights(&mut c.p.weights),
            )?;
            f(format!("{}.bias", c.name), Slot::Bias(&mut c.p.bias))
        }
        fn dense<F>(d: &mut Dense, f: &mut F) -> Result<()>
        where
            F: FnMut(String, Slot<'_>) -> Result<()>,
        {
            f(format!("{}.weight", d.name), Slot::Mat(&mut d.weight))?;
            f(format!("{}.bias", d.name), Slot::Bias(&mut d.bias))
        }

        for stage in &mut self.backbone.stages {
            for c in stage {
                conv(c, &mut f)?;
            }
        }
        conv(&mut self.ffm.shallow, &mut f)?;
        conv(&mut self.ffm.deep, &mut f)?;
        for c in &mut self.ffm.level_in {
            conv(c, &mut f)?;
        }
        for tum in &mut self.tums {
            for c in tum
                .enc
                .iter_mut()
                .chain(&mut tum.lat)
                .chain(&mut tum.smooth)
            {
                conv(c, &mut f)?;
            }
        }
        for se in &mut self.sfam {
            dense(&mut se.fc1, &mut f)?;
            dense(&mut se.fc2, &mut f)?;
        }
        for h in &mut self.heads {
            conv(&mut h.loc, &mut f)?;
            conv(&mut h.conf, &mut f)?;
        }
        Ok(())
    }

    /// Total weight and bias element count, summed over every slot.
    pub fn param_elements(&mut self) -> usize {
        let mut total = 0usize;
        self.visit_slots(|_, slot| {
            total += match slot {
                Slot::Weights(t) => t.data().len(),
                Slot::Bias(b) => b.len(),
                Slot::Mat(m) => m.data.len(),
            };
            Ok(())
        })
        .expect("counting cannot fail");
        total
    }

    /// Writes every tensor plus the manifest into `dir` (created if needed).
    pub fn save(&mut self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        self.visit_slots(|key, slot| {
            let file = format!("{key}.mtsr");
            let tensor = match slot {
                Slot::Weights(t) => t.clone(),
                Slot::Bias(b) => Tensor4::from_vec(b.len(), 1, 1, 1, b.clone())?,
                Slot::Mat(m) => Tensor4::from_vec(m.rows, m.cols, 1, 1, m.data.clone())?,
            };
            mtsr::save_tensor(&dir.join(&file), &tensor)?;
            manifest.push_str(&key);
            manifest.push('\t');
            manifest.push_str(&file);
            manifest.push('\n');
            Ok(())
        })?;
        std::fs::write(dir.join(MANIFEST_FILE), manifest)?;
        Ok(())
    }

    /// Loads a parameter store written by [`Model::save`]. The store must
    /// contain exactly the keys the config implies, with matching shapes.
    pub fn load(net: &NetworkConfig, backbone: &BackboneConfig, dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&manifest_path)
            .map_err(|e| Error::Format(format!("cannot read {}: {e}", manifest_path.display())))?;
        let mut files: BTreeMap<String, String> = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (key, file) = line.split_once('\t').ok_or_else(|| {
                Error::Format(format!(
                    "manifest line {} is not key<TAB>file: {line:?}",
                    lineno + 1
                ))
            })?;
            if files.insert(key.to_string(), file.to_string()).is_some() {
                return Err(Error::Format(format!("duplicate manifest key {key}")));
            }
        }

        let mut model = Self::zeros(net, backbone)?;
        model.visit_slots(|key, slot| {
            let file = files
                .remove(&key)
                .ok_or_else(|| Error::Format(format!("parameter store is missing key {key}")))?;
            let tensor = mtsr::load_tensor(&dir.join(&file))?;
            match slot {
                Slot::Weights(t) => {
                    if tensor.shape() != t.shape() {
                        return Err(Error::Format(format!(
                            "{key}: stored shape {:?} != expected {:?}",
                            tensor.dims(),
                            t.dims()
                        )));
                    }
                    *t = tensor;
                }
                Slot::Bias(b) => {
                    if tensor.dims() != [b.len(), 1, 1, 1] {
                        return Err(Error::Format(format!(
                            "{key}: stored shape {:?} != expected ({},1,1,1)",
                            tensor.dims(),
                            b.len()
                        )));
                    }
                    *b = tensor.into_data();
                }
                Slot::Mat(m) => {
                    if tensor.dims() != [m.rows, m.cols, 1, 1] {
                        return Err(Error::Format(format!(
                            "{key}: stored shape {:?} != expected ({},{},1,1)",
                            tensor.dims(),
                            m.rows,
                            m.cols
                        )));
                    }
                    m.data = tensor.into_data();
                }
            }
            Ok(())
        })?;
        if let Some(extra) = files.into_keys().next() {
            return Err(Error::Format(format!(
                "parameter store has unexpected key {extra}"
            )));
        }
        Ok(model)
    }
}

enum Slot<'a> {
    Weights(&'a mut Tensor4),
    Bias(&'a mut Vec<f32>),
    Mat(&'a mut Matrix),
}
