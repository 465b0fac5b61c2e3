//! Fully-convolutional encoder–decoder with two per-pixel position heads.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::ops::ConvGeom;
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::dataio::SkeletonSample;
use crate::error::{Error, Result};
use crate::grid::Grid;

/// Name of the decoder feature map that feeds both classification heads.
pub const LAST_HIDDEN: &str = "last_hidden";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    /// Five VGG-style blocks of 3×3 convolutions, each closed by 2×2 pooling.
    Vgg16Like,
    /// Bottleneck residual stages with 3, 4, 6 and 3 blocks.
    Resnet50Like,
    /// Three convolutions (two of them strided) and a fixed upsampling
    /// decoder; the shallow ablation arm.
    Tiny,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadArch {
    /// Skip fusion of stride-8/16/32 features through learned upsampling.
    Fcn8Like,
    /// Output-stride-8 dilated backbone with an atrous pyramid and bilinear
    /// upsampling.
    Dilated,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Random,
    /// Start from a safetensors file whose names and shapes match the model.
    ExternalWeights(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: Backbone,
    pub head_arch: HeadArch,
    pub num_classes_h: usize,
    pub num_classes_v: usize,
    /// `(height, width)` of the network input.
    pub input_size: (usize, usize),
    pub init: Init,
    /// Channel count of the first backbone stage; later stages scale it.
    pub width: usize,
    /// Channels of the shared decoder feature map.
    pub decoder_channels: usize,
    /// Dilation rates of the atrous pyramid (dilated head only).
    pub aspp_rates: Vec<usize>,
    pub init_seed: u64,
}

impl ModelConfig {
    /// Full-size profile: VGG16 widths at 224×224.
    pub fn full_scale(num_classes: usize) -> Self {
        Self {
            backbone: Backbone::Vgg16Like,
            head_arch: HeadArch::Fcn8Like,
            num_classes_h: num_classes,
            num_classes_v: num_classes,
            input_size: (224, 224),
            init: Init::Random,
            width: 64,
            decoder_channels: 64,
            aspp_rates: vec![6, 12, 18, 24],
            init_seed: 0,
        }
    }

    /// Small CPU-friendly profile.
    pub fn desk_scale(backbone: Backbone, num_classes: usize) -> Self {
        Self {
            backbone,
            head_arch: HeadArch::Fcn8Like,
            num_classes_h: num_classes,
            num_classes_v: num_classes,
            input_size: (64, 64),
            init: Init::Random,
            width: 8,
            decoder_channels: 16,
            aspp_rates: vec![1, 2, 4, 6],
            init_seed: 0,
        }
    }

    /// Total stride the input size must be divisible by.
    pub fn required_divisor(&self) -> usize {
        match (self.backbone, self.head_arch) {
            (Backbone::Tiny, _) => 4,
            (_, HeadArch::Fcn8Like) => 32,
            (_, HeadArch::Dilated) => 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        let d = self.required_divisor();
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(Error::InvalidConfig(format!(
                "input size {h}x{w} must be positive multiples of {d} for {:?}/{:?}",
                self.backbone, self.head_arch
            )));
        }
        if self.num_classes_h < 2 || self.num_classes_v < 2 {
            return Err(Error::InvalidConfig(
                "each head needs at least 2 classes (background + one position)".into(),
            ));
        }
        if self.width == 0 || self.decoder_channels == 0 {
            return Err(Error::InvalidConfig("channel widths must be positive".into()));
        }
        if self.head_arch == HeadArch::Dilated
            && self.backbone != Backbone::Tiny
            && (self.aspp_rates.is_empty() || self.aspp_rates.contains(&0))
        {
            return Err(Error::InvalidConfig(
                "the dilated head needs at least one positive atrous rate".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Conv {
    w: usize,
    b: Option<usize>,
    geom: ConvGeom,
    transposed: bool,
}

impl Conv {
    fn apply(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        if self.transposed {
            g.conv_transpose(x, w, b, self.geom)
        } else {
            g.conv(x, w, b, self.geom)
        }
    }

    fn apply_relu(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let y = self.apply(g, x);
        g.relu(y)
    }
}

#[derive(Clone, Copy)]
enum WeightInit {
    /// Normal with std `sqrt(2 / fan_in)`.
    He,
    /// Normal with std `sqrt(1 / fan_in)`.
    Lecun,
    Zero,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, geom: ConvGeom, init: WeightInit) -> Conv {
        let k = geom.kernel;
        let fan_in = (cin * k * k) as f64;
        let shape = [cout, cin, k, k];
        let len = cout * cin * k * k;
        let data = match init {
            WeightInit::Zero => vec![0.0; len],
            WeightInit::He | WeightInit::Lecun => {
                let gain = if matches!(init, WeightInit::He) { 2.0 } else { 1.0 };
                let normal = Normal::new(0.0, (gain / fan_in).sqrt()).expect("finite std");
                (0..len).map(|_| normal.sample(&mut self.rng) as f32).collect()
            }
        };
        let w = self.store.add(format!("{name}.weight"), Tensor::from_vec(shape, data).expect("shape"));
        let b = self.store.add(format!("{name}.bias"), Tensor::zeros([cout, 1, 1, 1]));
        Conv {
            w,
            b: Some(b),
            geom,
            transposed: false,
        }
    }

    /// Transposed convolution initialised to per-channel bilinear
    /// interpolation.
    fn upsampler(&mut self, name: &str, channels: usize, factor: usize) -> Conv {
        let k = 2 * factor;
        let geom = ConvGeom::new(k, factor, factor / 2, 1);
        let kernel = bilinear_kernel(k);
        let mut data = vec![0.0f32; channels * channels * k * k];
        for c in 0..channels {
            let start = (c * channels + c) * k * k;
            data[start..start + k * k].copy_from_slice(&kernel);
        }
        let w = self.store.add(
            format!("{name}.weight"),
            Tensor::from_vec([channels, channels, k, k], data).expect("shape"),
        );
        Conv {
            w,
            b: None,
            geom,
            transposed: true,
        }
    }
}

fn bilinear_kernel(k: usize) -> Vec<f32> {
    let factor = k.div_ceil(2) as f64;
    let center = if k % 2 == 1 { factor - 1.0 } else { factor - 0.5 };
    let tap = |i: usize| 1.0 - (i as f64 - center).abs() / factor;
    (0..k * k).map(|i| (tap(i / k) * tap(i % k)) as f32).collect()
}

#[derive(Clone, Debug)]
struct Bottleneck {
    reduce: Conv,
    spatial: Conv,
    expand: Conv,
    shortcut: Option<Conv>,
}

#[derive(Clone, Debug)]
enum Body {
    Tiny([Conv; 3]),
    Vgg {
        blocks: Vec<Vec<Conv>>,
        pooled: Vec<bool>,
        fc: Option<(Conv, Conv)>,
    },
    Resnet {
        stem: Conv,
        stages: Vec<Vec<Bottleneck>>,
    },
}

#[derive(Clone, Debug)]
enum Decoder {
    Upsample(usize),
    Fcn8 {
        score32: Conv,
        score16: Conv,
        score8: Conv,
        up32: Conv,
        up16: Conv,
        up8: Conv,
    },
    Aspp {
        branches: Vec<Conv>,
        factor: usize,
    },
}

/// Feature maps the decoder reads.
struct Taps {
    stride8: Var,
    stride16: Var,
    deepest: Var,
}

/// Result of recording a forward pass on a graph.
pub struct Forward {
    pub logits_h: Var,
    pub logits_v: Var,
    /// Named intermediate activations, shallow to deep.
    pub activations: Vec<(String, Var)>,
}

/// Forward pass output materialised as tensors.
pub struct Inference {
    pub logits_h: Tensor,
    pub logits_v: Tensor,
    pub activations: Vec<(String, Tensor)>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    body: Body,
    decoder: Decoder,
    head_h: Conv,
    head_v: Conv,
}

pub fn build_model(cfg: &ModelConfig) -> Result<Model> {
    cfg.validate()?;
    let mut params = ParamStore::new();
    let mut b = Builder {
        store: &mut params,
        rng: ChaCha8Rng::seed_from_u64(cfg.init_seed),
    };
    let w = cfg.width;
    let d = cfg.decoder_channels;
    let dilated = cfg.head_arch == HeadArch::Dilated;

    let (body, decoder, hidden) = match cfg.backbone {
        Backbone::Tiny => {
            let c1 = b.conv("conv1", 1, w, ConvGeom::new(7, 2, 3, 1), WeightInit::He);
            let c2 = b.conv("conv2", w, 2 * w, ConvGeom::new(7, 2, 3, 1), WeightInit::He);
            let c3 = b.conv("conv3", 2 * w, 2 * w, ConvGeom::same(7, 3), WeightInit::He);
            (Body::Tiny([c1, c2, c3]), Decoder::Upsample(4), 2 * w)
        }
        Backbone::Vgg16Like => {
            let plan: [(usize, usize); 5] = [(2, w), (2, 2 * w), (3, 4 * w), (3, 8 * w), (3, 8 * w)];
            let mut blocks = Vec::new();
            let mut cin = 1;
            for (i, &(reps, cout)) in plan.iter().enumerate() {
                let dilation = if dilated && i == 4 { 2 } else { 1 };
                let convs = (0..reps)
                    .map(|r| {
                        let c = b.conv(
                            &format!("block{}.conv{}", i + 1, r + 1),
                            if r == 0 { cin } else { cout },
                            cout,
                            ConvGeom::same(3, dilation),
                            WeightInit::He,
                        );
                        c
                    })
                    .collect();
                blocks.push(convs);
                cin = cout;
            }
            let pooled = (0..5).map(|i| !dilated || i < 3).collect();
            if dilated {
                let branches = aspp(&mut b, cfg, 8 * w, d);
                (Body::Vgg { blocks, pooled, fc: None }, Decoder::Aspp { branches, factor: 8 }, d)
            } else {
                let fc6 = b.conv("fc6", 8 * w, 16 * w, ConvGeom::same(3, 1), WeightInit::He);
                let fc7 = b.conv("fc7", 16 * w, 16 * w, ConvGeom::pointwise(), WeightInit::He);
                let dec = fcn8(&mut b, [4 * w, 8 * w, 16 * w], d);
                (Body::Vgg { blocks, pooled, fc: Some((fc6, fc7)) }, dec, d)
            }
        }
        Backbone::Resnet50Like => {
            let stem = b.conv("stem", 1, w, ConvGeom::new(7, 2, 3, 1), WeightInit::He);
            let depths = [3, 4, 6, 3];
            let mut stages = Vec::new();
            let mut cin = w;
            for (s, &depth) in depths.iter().enumerate() {
                let mid = w << s;
                let out = 4 * mid;
                let (stride, dilation) = match (dilated, s) {
                    (true, 2) => (1, 2),
                    (true, 3) => (1, 4),
                    (_, 0) => (1, 1),
                    _ => (2, 1),
                };
                let blocks = (0..depth)
                    .map(|i| {
                        let name = format!("block{}.{}", s + 1, i);
                        let first = i == 0;
                        let block_in = if first { cin } else { out };
                        let st = if first { stride } else { 1 };
                        Bottleneck {
                            reduce: b.conv(&format!("{name}.reduce"), block_in, mid, ConvGeom::pointwise(), WeightInit::He),
                            spatial: b.conv(
                                &format!("{name}.spatial"),
                                mid,
                                mid,
                                ConvGeom::new(3, st, dilation, dilation),
                                WeightInit::He,
                            ),
                            expand: b.conv(&format!("{name}.expand"), mid, out, ConvGeom::pointwise(), WeightInit::Zero),
                            shortcut: first.then(|| {
                                b.conv(
                                    &format!("{name}.shortcut"),
                                    block_in,
                                    out,
                                    ConvGeom::new(1, st, 0, 1),
                                    WeightInit::He,
                                )
                            }),
                        }
                    })
                    .collect();
                stages.push(blocks);
                cin = out;
            }
            let body = Body::Resnet { stem, stages };
            if dilated {
                let branches = aspp(&mut b, cfg, 32 * w, d);
                (body, Decoder::Aspp { branches, factor: 8 }, d)
            } else {
                (body, fcn8(&mut b, [8 * w, 16 * w, 32 * w], d), d)
            }
        }
    };
    let head_h = b.conv("head_h", hidden, cfg.num_classes_h, ConvGeom::pointwise(), WeightInit::Lecun);
    let head_v = b.conv("head_v", hidden, cfg.num_classes_v, ConvGeom::pointwise(), WeightInit::Lecun);

    let mut model = Model {
        config: cfg.clone(),
        params,
        body,
        decoder,
        head_h,
        head_v,
    };
    if let Init::ExternalWeights(path) = &cfg.init {
        model.params.load(path)?;
    }
    Ok(model)
}

fn aspp(b: &mut Builder<'_>, cfg: &ModelConfig, cin: usize, d: usize) -> Vec<Conv> {
    cfg.aspp_rates
        .iter()
        .map(|&r| b.conv(&format!("aspp.rate{r}"), cin, d, ConvGeom::same(3, r), WeightInit::Lecun))
        .collect()
}

fn fcn8(b: &mut Builder<'_>, [c8, c16, c32]: [usize; 3], d: usize) -> Decoder {
    Decoder::Fcn8 {
        score32: b.conv("score32", c32, d, ConvGeom::pointwise(), WeightInit::Lecun),
        score16: b.conv("score16", c16, d, ConvGeom::pointwise(), WeightInit::Lecun),
        score8: b.conv("score8", c8, d, ConvGeom::pointwise(), WeightInit::Lecun),
        up32: b.upsampler("up32", d, 2),
        up16: b.upsampler("up16", d, 2),
        up8: b.upsampler("up8", d, 8),
    }
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Names of the activations [`Model::forward`] exposes, shallow to deep.
    pub fn layer_names(&self) -> Vec<String> {
        let mut names: Vec<String> = match &self.body {
            Body::Tiny(_) => vec!["conv1".into(), "conv2".into(), "conv3".into()],
            Body::Vgg { fc, .. } => {
                let mut v: Vec<String> = (1..=5).map(|i| format!("block{i}")).collect();
                if fc.is_some() {
                    v.push("fc7".into());
                }
                v
            }
            Body::Resnet { .. } => {
                let mut v = vec!["stem".to_string()];
                v.extend((1..=4).map(|i| format!("block{i}")));
                v
            }
        };
        names.push(LAST_HIDDEN.into());
        names
    }

    fn body_forward(&self, g: &mut Graph<'_>, x: Var, acts: &mut Vec<(String, Var)>) -> Taps {
        match &self.body {
            Body::Tiny(convs) => {
                let mut h = x;
                for (i, c) in convs.iter().enumerate() {
                    h = c.apply_relu(g, h);
                    acts.push((format!("conv{}", i + 1), h));
                }
                Taps {
                    stride8: h,
                    stride16: h,
                    deepest: h,
                }
            }
            Body::Vgg { blocks, pooled, fc } => {
                let mut h = x;
                let mut outs = Vec::with_capacity(5);
                for (i, block) in blocks.iter().enumerate() {
                    for c in block {
                        h = c.apply_relu(g, h);
                    }
                    if pooled[i] {
                        h = g.max_pool(h);
                    }
                    acts.push((format!("block{}", i + 1), h));
                    outs.push(h);
                }
                let deepest = match fc {
                    Some((fc6, fc7)) => {
                        let h6 = fc6.apply_relu(g, h);
                        let h7 = fc7.apply_relu(g, h6);
                        acts.push(("fc7".into(), h7));
                        h7
                    }
                    None => h,
                };
                Taps {
                    stride8: outs[2],
                    stride16: outs[3],
                    deepest,
                }
            }
            Body::Resnet { stem, stages } => {
                let h = stem.apply_relu(g, x);
                let mut h = g.max_pool(h);
                acts.push(("stem".into(), h));
                let mut outs = Vec::with_capacity(4);
                for (s, blocks) in stages.iter().enumerate() {
                    for blk in blocks {
                        let r = blk.reduce.apply_relu(g, h);
                        let r = blk.spatial.apply_relu(g, r);
                        let r = blk.expand.apply(g, r);
                        let skip = match &blk.shortcut {
                            Some(sc) => sc.apply(g, h),
                            None => h,
                        };
                        let sum = g.add(r, skip);
                        h = g.relu(sum);
                    }
                    acts.push((format!("block{}", s + 1), h));
                    outs.push(h);
                }
                Taps {
                    stride8: outs[1],
                    stride16: outs[2],
                    deepest: outs[3],
                }
            }
        }
    }

    /// Records a forward pass of `input` (`[N, 1, H, W]`, values in `[0, 1]`).
    pub fn forward(&self, g: &mut Graph<'_>, input: Tensor) -> Forward {
        let x = g.input(input);
        let mut activations = Vec::new();
        let taps = self.body_forward(g, x, &mut activations);
        let hidden = match &self.decoder {
            Decoder::Upsample(f) => g.upsample(taps.deepest, *f),
            Decoder::Fcn8 {
                score32,
                score16,
                score8,
                up32,
                up16,
                up8,
            } => {
                let s32 = score32.apply(g, taps.deepest);
                let u = up32.apply(g, s32);
                let s16 = score16.apply(g, taps.stride16);
                let f16 = g.add(u, s16);
                let u = up16.apply(g, f16);
                let s8 = score8.apply(g, taps.stride8);
                let f8 = g.add(u, s8);
                up8.apply(g, f8)
            }
            Decoder::Aspp { branches, factor } => {
                let mut sum = branches[0].apply(g, taps.deepest);
                for br in &branches[1..] {
                    let y = br.apply(g, taps.deepest);
                    sum = g.add(sum, y);
                }
                g.upsample(sum, *factor)
            }
        };
        activations.push((LAST_HIDDEN.into(), hidden));
        Forward {
            logits_h: self.head_h.apply(g, hidden),
            logits_v: self.head_v.apply(g, hidden),
            activations,
        }
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        let (h, w) = self.config.input_size;
        let [_, c, ih, iw] = input.shape();
        if c != 1 || ih != h || iw != w {
            return Err(Error::ShapeMismatch {
                expected: format!("[N, 1, {h}, {w}]"),
                actual: format!("{:?}", input.shape()),
            });
        }
        Ok(())
    }

    pub fn check_layer(&self, layer: &str) -> Result<()> {
        let names = self.layer_names();
        if names.iter().any(|n| n == layer) {
            Ok(())
        } else {
            Err(Error::UnknownLayer {
                name: layer.to_string(),
                available: names,
            })
        }
    }

    /// Runs a forward pass without keeping the graph, returning the logits
    /// and the requested activations.
    pub fn infer(&self, input: Tensor, layers: &[&str]) -> Result<Inference> {
        self.check_input(&input)?;
        for l in layers {
            self.check_layer(l)?;
        }
        let mut g = Graph::new(&self.params);
        let fwd = self.forward(&mut g, input);
        let activations = layers
            .iter()
            .map(|&name| {
                let var = fwd
                    .activations
                    .iter()
                    .find(|(n, _)| n == name)
                    .map(|(_, v)| *v)
                    .expect("layer checked");
                (name.to_string(), g.value(var).clone())
            })
            .collect();
        Ok(Inference {
            logits_h: g.take_value(fwd.logits_h),
            logits_v: g.take_value(fwd.logits_v),
            activations,
        })
    }

    /// Per-pixel argmax class maps `(horizontal, vertical)` for each sample.
    pub fn predict(&self, input: Tensor) -> Result<Vec<(Grid<u32>, Grid<u32>)>> {
        let out = self.infer(input, &[])?;
        Ok((0..out.logits_h.batch())
            .map(|n| (argmax_map(&out.logits_h, n), argmax_map(&out.logits_v, n)))
            .collect())
    }
}

/// Per-pixel argmax over channels of sample `n`; ties go to the lower class.
pub fn argmax_map(logits: &Tensor, n: usize) -> Grid<u32> {
    let [_, c, h, w] = logits.shape();
    let plane = h * w;
    let data = logits.sample(n);
    Grid::from_fn(h, w, |r, col| {
        let p = r * w + col;
        let mut best = 0;
        for k in 1..c {
            if data[k * plane + p] > data[best * plane + p] {
                best = k;
            }
        }
        best as u32
    })
}

/// Packs binary samples into a `[N, 1, H, W]` tensor.
pub fn samples_to_tensor<'a>(samples: impl IntoIterator<Item = &'a SkeletonSample>) -> Result<Tensor> {
    let parts: Vec<Tensor> = samples
        .into_iter()
        .map(|s| {
            let (h, w) = s.pixels.dims();
            Tensor::from_vec([1, 1, h, w], s.pixels.iter().map(|&p| p as f32).collect())
        })
        .collect::<Result<_>>()?;
    Tensor::stack(&parts)
}

/// Packs intensity images on a `0..=255` scale into a `[N, 1, H, W]` tensor
/// in model units.
pub fn intensities_to_tensor<'a>(images: impl IntoIterator<Item = &'a Grid<f32>>) -> Result<Tensor> {
    let parts: Vec<Tensor> = images
        .into_iter()
        .map(|img| {
            let (h, w) = img.dims();
            Tensor::from_vec([1, 1, h, w], img.iter().map(|&p| p / 255.0).collect())
        })
        .collect::<Result<_>>()?;
    Tensor::stack(&parts)
}
