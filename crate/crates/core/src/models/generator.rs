//! Noise-prediction networks: a residual-free MLP for 2-D points and a small
//! UNet for single-channel images. Both expose their encoder activations as
//! an ordered feature pyramid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{lecun, ParamSet};
use crate::error::{Error, Result};
use crate::graph::{ConvGeom, Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Mlp2d,
    Tinyunet,
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp2d" => Ok(Self::Mlp2d),
            "tinyunet" => Ok(Self::Tinyunet),
            other => Err(Error::InvalidArgument(format!("unknown architecture `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub arch: Arch,
    pub data_shape: Vec<usize>,
    pub cond_classes: usize,
    pub time_embed_dim: usize,
    /// Largest timestep the network is conditioned on.
    pub t_total: usize,
    /// mlp2d: hidden width of each layer (one feature level per layer).
    /// tinyunet: channel width of each of the three resolution stages.
    pub widths: Vec<usize>,
    /// tinyunet mid-block width; ignored by mlp2d.
    pub mid_width: usize,
}

impl GeneratorSpec {
    /// Desk-scale defaults: a 4 x 64 MLP for points, a [16, 32, 64] / 64 UNet for images.
    pub fn default_for(arch: Arch, data_shape: &[usize], cond_classes: usize) -> Self {
        match arch {
            Arch::Mlp2d => Self {
                arch,
                data_shape: data_shape.to_vec(),
                cond_classes,
                time_embed_dim: 16,
                t_total: 1000,
                widths: vec![64; 4],
                mid_width: 0,
            },
            Arch::Tinyunet => Self {
                arch,
                data_shape: data_shape.to_vec(),
                cond_classes,
                time_embed_dim: 32,
                t_total: 1000,
                widths: vec![16, 32, 64],
                mid_width: 64,
            },
        }
    }

    /// Number of feature levels exposed by the encoder.
    pub fn levels(&self) -> usize {
        match self.arch {
            Arch::Mlp2d => self.widths.len(),
            Arch::Tinyunet => self.widths.len() + 1,
        }
    }

    /// `[channels, height, width]` of every feature level for an input of
    /// spatial size `hw` (vector features report `[width, 1, 1]`).
    pub fn level_shapes(&self, hw: (usize, usize)) -> Vec<[usize; 3]> {
        match self.arch {
            Arch::Mlp2d => self.widths.iter().map(|&w| [w, 1, 1]).collect(),
            Arch::Tinyunet => {
                let mut out = Vec::new();
                let (mut h, mut w) = hw;
                for (i, &c) in self.widths.iter().enumerate() {
                    if i > 0 {
                        h = h.div_ceil(2);
                        w = w.div_ceil(2);
                    }
                    out.push([c, h, w]);
                }
                out.push([self.mid_width, h.div_ceil(2), w.div_ceil(2)]);
                out
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |why: String| Err(Error::ArchMismatch(why));
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return bad(format!("time_embed_dim must be even and positive, got {}", self.time_embed_dim));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad(format!("widths must be non-empty and positive: {:?}", self.widths));
        }
        match self.arch {
            Arch::Mlp2d if self.data_shape != [2] => {
                bad(format!("mlp2d expects point data of shape [2], got {:?}", self.data_shape))
            }
            Arch::Tinyunet => {
                let &[1, h, w] = self.data_shape.as_slice() else {
                    return bad(format!("tinyunet expects [1, H, W], got {:?}", self.data_shape));
                };
                if self.widths.len() != 3 || self.mid_width == 0 {
                    return bad("tinyunet needs exactly three stage widths and a mid width".into());
                }
                if h % 8 != 0 || w % 8 != 0 {
                    return bad(format!("tinyunet spatial size must be divisible by 8, got {h}x{w}"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// A noise-prediction network: the teacher or the student.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorNet {
    spec: GeneratorSpec,
    params: ParamSet,
    seed: u64,
    trained: bool,
}

/// Number of groups used by every group normalization in the UNet.
fn norm_groups(channels: usize) -> usize {
    (1..=4).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

const CONV3: ConvGeom = ConvGeom { kernel: 3, stride: 1, pad_lo: 1, pad_hi: 1 };
const DOWN3: ConvGeom = ConvGeom { kernel: 3, stride: 2, pad_lo: 1, pad_hi: 1 };

pub fn build_generator(spec: GeneratorSpec, seed: u64) -> Result<GeneratorNet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    let d = spec.time_embed_dim;
    match spec.arch {
        Arch::Mlp2d => {
            let h0 = spec.widths[0];
            p.push("in.w", lecun(&[2, h0], 2, &mut rng));
            p.push("in.b", Tensor::zeros(&[h0]));
            p.push("time.w", lecun(&[d, h0], d, &mut rng));
            p.push("time.b", Tensor::zeros(&[h0]));
            if spec.cond_classes > 0 {
                p.push("class.emb", lecun(&[spec.cond_classes, h0], 1, &mut rng));
            }
            for (i, pair) in spec.widths.windows(2).enumerate() {
                p.push(format!("hidden{}.w", i + 1), lecun(&[pair[0], pair[1]], pair[0], &mut rng));
                p.push(format!("hidden{}.b", i + 1), Tensor::zeros(&[pair[1]]));
            }
            let last = *spec.widths.last().expect("validated non-empty");
            p.push("out.w", Tensor::zeros(&[last, 2]));
            p.push("out.b", Tensor::zeros(&[2]));
        }
        Arch::Tinyunet => {
            let c = &spec.widths;
            let m = spec.mid_width;
            let th = c[0] * 2;
            p.push("time.w", lecun(&[d, th], d, &mut rng));
            p.push("time.b", Tensor::zeros(&[th]));
            if spec.cond_classes > 0 {
                p.push("class.emb", lecun(&[spec.cond_classes, th], 1, &mut rng));
            }
            let conv = |p: &mut ParamSet, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng| {
                p.push(format!("{name}.w"), lecun(&[cout, cin, 3, 3], cin * 9, rng));
                p.push(format!("{name}.b"), Tensor::zeros(&[cout]));
            };
            let block = |p: &mut ParamSet, name: &str, cout: usize, rng: &mut ChaCha8Rng| {
                p.push(format!("{name}.temb.w"), lecun(&[th, cout], th, rng));
                p.push(format!("{name}.temb.b"), Tensor::zeros(&[cout]));
                p.push(format!("{name}.gn.g"), Tensor::full(&[cout], 1.0));
                p.push(format!("{name}.gn.b"), Tensor::zeros(&[cout]));
            };
            conv(&mut p, "stem", 1, c[0], &mut rng);
            conv(&mut p, "enc0", c[0], c[0], &mut rng);
            block(&mut p, "enc0", c[0], &mut rng);
            conv(&mut p, "down1", c[0], c[1], &mut rng);
            conv(&mut p, "enc1", c[1], c[1], &mut rng);
            block(&mut p, "enc1", c[1], &mut rng);
            conv(&mut p, "down2", c[1], c[2], &mut rng);
            conv(&mut p, "enc2", c[2], c[2], &mut rng);
            block(&mut p, "enc2", c[2], &mut rng);
            conv(&mut p, "down3", c[2], m, &mut rng);
            conv(&mut p, "mid", m, m, &mut rng);
            block(&mut p, "mid", m, &mut rng);
            conv(&mut p, "dec2", m + c[2], c[2], &mut rng);
            block(&mut p, "dec2", c[2], &mut rng);
            conv(&mut p, "dec1", c[2] + c[1], c[1], &mut rng);
            block(&mut p, "dec1", c[1], &mut rng);
            conv(&mut p, "dec0", c[1] + c[0], c[0], &mut rng);
            block(&mut p, "dec0", c[0], &mut rng);
            p.push("out.w", Tensor::zeros(&[1, c[0], 3, 3]));
            p.push("out.b", Tensor::zeros(&[1]));
        }
    }
    Ok(GeneratorNet { spec, params: p, seed, trained: false })
}

/// Sinusoidal embedding of raw timesteps, `[len(ts), dim]`.
pub fn timestep_embedding(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).cos());
        }
    }
    Tensor::from_parts(vec![ts.len(), dim], data)
}

/// Parameters placed on a graph, looked up by name.
pub struct Bound<'a> {
    names: &'a [String],
    vars: Vec<Var>,
}

impl Bound<'_> {
    fn get(&self, name: &str) -> Var {
        let i = self.names.iter().position(|n| n == name).unwrap_or_else(|| panic!("no parameter `{name}`"));
        self.vars[i]
    }

    fn try_get(&self, name: &str) -> Option<Var> {
        self.names.iter().position(|n| n == name).map(|i| self.vars[i])
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Var {
    let y = g.matmul(x, w);
    g.add_row_vec(y, b)
}

impl GeneratorNet {
    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    pub(crate) fn from_parts(spec: GeneratorSpec, params: ParamSet, seed: u64, trained: bool) -> Result<Self> {
        let fresh = build_generator(spec.clone(), seed)?;
        if let Some(why) = fresh.params.layout_mismatch(&params) {
            return Err(Error::ArchMismatch(why));
        }
        Ok(Self { spec, params, seed, trained })
    }

    pub fn bind<'a>(&'a self, g: &mut Graph, trainable: bool) -> Bound<'a> {
        Bound { names: self.params.names(), vars: self.params.bind(g, trainable) }
    }

    /// Wraps vars already on a graph, one per parameter tensor in order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Result<Bound<'_>> {
        if vars.len() != self.params.len() {
            return Err(Error::Shape(format!("{} vars for {} parameters", vars.len(), self.params.len())));
        }
        Ok(Bound { names: self.params.names(), vars })
    }

    /// Encoding (`encode = true`) accepts a missing label on a conditional
    /// network and, for the UNet, any spatial size divisible by 8 (patches).
    fn check_inputs(&self, x_shape: &[usize], ts: &[usize], cond: Option<&[usize]>, encode: bool) -> Result<()> {
        let shape_ok = if encode && self.spec.arch == Arch::Tinyunet {
            matches!(x_shape, &[_, c, h, w] if c == self.spec.data_shape[0] && h > 0 && w > 0 && h % 8 == 0 && w % 8 == 0)
        } else {
            x_shape.len() == self.spec.data_shape.len() + 1 && x_shape[1..] == self.spec.data_shape[..]
        };
        if !shape_ok {
            return Err(Error::Shape(format!(
                "input {x_shape:?} does not match data shape {:?}",
                self.spec.data_shape
            )));
        }
        if ts.len() != x_shape[0] {
            return Err(Error::Shape(format!("{} timesteps for batch of {}", ts.len(), x_shape[0])));
        }
        if let Some(&t) = ts.iter().find(|&&t| t == 0 || t > self.spec.t_total) {
            return Err(Error::TimestepOutOfRange { t, max: self.spec.t_total });
        }
        match (self.spec.cond_classes, cond) {
            (0, Some(_)) => Err(Error::InvalidArgument("label given to an unconditional network".into())),
            (k, None) if k > 0 && !encode => Err(Error::MissingCondition { classes: k }),
            (k, Some(c)) => {
                if c.len() != x_shape[0] {
                    return Err(Error::Shape(format!("{} labels for batch of {}", c.len(), x_shape[0])));
                }
                if let Some(&bad) = c.iter().find(|&&l| l >= k) {
                    return Err(Error::InvalidArgument(format!("label {bad} outside [0, {k})")));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Time (and class) conditioning vector per sample, before the activation.
    fn conditioning(&self, g: &mut Graph, p: &Bound, ts: &[usize], cond: Option<&[usize]>) -> Var {
        let temb = g.constant(timestep_embedding(ts, self.spec.time_embed_dim));
        let mut e = linear(g, temb, p.get("time.w"), p.get("time.b"));
        if let (Some(labels), Some(table)) = (cond, p.try_get("class.emb")) {
            let ce = g.embedding(table, labels.to_vec());
            e = g.add(e, ce);
        }
        e
    }

    /// Predicted noise for `x` (`[B, ...data_shape]`) at per-sample timesteps `ts`.
    pub fn forward_graph(&self, g: &mut Graph, p: &Bound, x: Var, ts: &[usize], cond: Option<&[usize]>) -> Result<Var> {
        self.check_inputs(g.shape(x), ts, cond, false)?;
        Ok(self.run(g, p, x, ts, cond, false).0.expect("full pass yields output"))
    }

    /// Encoder feature pyramid, finest level first. A missing label on a
    /// conditional network drops the class embedding.
    pub fn encode_graph(&self, g: &mut Graph, p: &Bound, x: Var, ts: &[usize], cond: Option<&[usize]>) -> Result<Vec<Var>> {
        self.check_inputs(g.shape(x), ts, cond, true)?;
        Ok(self.run(g, p, x, ts, cond, true).1)
    }

    fn run(&self, g: &mut Graph, p: &Bound, x: Var, ts: &[usize], cond: Option<&[usize]>, encode_only: bool) -> (Option<Var>, Vec<Var>) {
        let e = self.conditioning(g, p, ts, cond);
        match self.spec.arch {
            Arch::Mlp2d => {
                let mut feats = Vec::with_capacity(self.spec.widths.len());
                let h = linear(g, x, p.get("in.w"), p.get("in.b"));
                let h = g.add(h, e);
                let mut h = g.silu(h);
                feats.push(h);
                for i in 1..self.spec.widths.len() {
                    let z = linear(g, h, p.get(&format!("hidden{i}.w")), p.get(&format!("hidden{i}.b")));
                    h = g.silu(z);
                    feats.push(h);
                }
                if encode_only {
                    return (None, feats);
                }
                (Some(linear(g, h, p.get("out.w"), p.get("out.b"))), feats)
            }
            Arch::Tinyunet => {
                let e = g.silu(e);
                let conv = |g: &mut Graph, name: &str, x: Var, geom: ConvGeom| {
                    let y = g.conv2d(x, p.get(&format!("{name}.w")), geom);
                    g.add_channel_bias(y, p.get(&format!("{name}.b")))
                };
                let block = |g: &mut Graph, name: &str, h: Var| {
                    let te = linear(g, e, p.get(&format!("{name}.temb.w")), p.get(&format!("{name}.temb.b")));
                    let h = g.add_channel_rows(h, te);
                    let groups = norm_groups(g.shape(h)[1]);
                    let h = g.group_norm(h, p.get(&format!("{name}.gn.g")), p.get(&format!("{name}.gn.b")), groups);
                    g.silu(h)
                };
                let s = conv(g, "stem", x, CONV3);
                let h = conv(g, "enc0", s, CONV3);
                let f0 = block(g, "enc0", h);
                let h = conv(g, "down1", f0, DOWN3);
                let h = conv(g, "enc1", h, CONV3);
                let f1 = block(g, "enc1", h);
                let h = conv(g, "down2", f1, DOWN3);
                let h = conv(g, "enc2", h, CONV3);
                let f2 = block(g, "enc2", h);
                let h = conv(g, "down3", f2, DOWN3);
                let h = conv(g, "mid", h, CONV3);
                let f3 = block(g, "mid", h);
                let feats = vec![f0, f1, f2, f3];
                if encode_only {
                    return (None, feats);
                }
                let mut h = f3;
                for (name, skip) in [("dec2", f2), ("dec1", f1), ("dec0", f0)] {
                    let up = g.upsample2x(h);
                    let cat = g.concat1(up, skip);
                    let z = conv(g, name, cat, CONV3);
                    h = block(g, name, z);
                }
                (Some(conv(g, "out", h, CONV3)), feats)
            }
        }
    }

    /// Gradient-free forward pass with a single timestep for the whole batch.
    pub fn predict_noise(&self, x: &Tensor, t: usize, cond: Option<&[usize]>) -> Result<Tensor> {
        let ts = vec![t; x.rows()];
        self.predict_noise_rows(x, &ts, cond)
    }

    pub fn predict_noise_rows(&self, x: &Tensor, ts: &[usize], cond: Option<&[usize]>) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = self.forward_graph(&mut g, &p, xv, ts, cond)?;
        Ok(g.value(out).clone())
    }
}

/// Noise prediction `G(x_t, t, cond)` without gradient tracking.
pub fn generator_forward(net: &GeneratorNet, x_t: &Tensor, t: usize, cond: Option<&[usize]>) -> Result<Tensor> {
    net.predict_noise(x_t, t, cond)
}

/// Student initialization: an independent deep copy of the teacher's weights.
pub fn init_student_from_teacher(teacher: &GeneratorNet) -> GeneratorNet {
    teacher.clone()
}

/// `custom + (tuned - base)` for three architecture-compatible networks.
pub fn apply_weight_delta(base: &GeneratorNet, tuned: &GeneratorNet, custom: &GeneratorNet) -> Result<GeneratorNet> {
    for other in [tuned, custom] {
        if other.spec != base.spec {
            return Err(Error::ArchMismatch(format!("{:?} vs {:?}", base.spec, other.spec)));
        }
    }
    let params = ParamSet::apply_delta(&base.params, &tuned.params, &custom.params)?;
    Ok(GeneratorNet { spec: custom.spec.clone(), params, seed: custom.seed, trained: custom.trained })
}
