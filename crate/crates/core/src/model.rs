//! Small classifiers with dropout and feature taps around the final pooling.
//!
//! Two backbones are available. The MLP is for vector inputs and exposes its
//! penultimate activations as the post-pool tap. The conv net is two 3x3
//! conv+relu blocks, dropout, global average pooling and a linear head; it
//! exposes both the spatial map before pooling and the pooled vector.

use std::path::Path;

use rand::Rng as _;

use crate::autodiff::{Tape, Var};
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const PARAMS_MAGIC: &[u8; 4] = b"RCPM";
pub const PARAMS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Backbone {
    /// Fully connected relu layers with the given widths.
    Mlp { hidden: Vec<usize> },
    /// Two 3x3 conv blocks with the given output channels.
    Conv { channels: [usize; 2] },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    /// Per-sample input shape: `[D]` for the MLP, `[C, H, W]` for the conv net.
    pub input_shape: Vec<usize>,
    pub backbone: Backbone,
    pub num_classes: usize,
    pub dropout_rate: f64,
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        match &self.backbone {
            Backbone::Mlp { hidden } => {
                if self.input_shape.len() != 1 || hidden.is_empty() || hidden.contains(&0) {
                    return Err(Error::Config(
                        "mlp needs a [D] input and at least one non-empty hidden layer".into(),
                    ));
                }
            }
            Backbone::Conv { channels } => {
                if self.input_shape.len() != 3 || channels.contains(&0) {
                    return Err(Error::Config(
                        "conv net needs a [C, H, W] input and non-zero channels".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Width of the post-pool feature vector.
    pub fn feature_dim(&self) -> usize {
        match &self.backbone {
            Backbone::Mlp { hidden } => *hidden.last().unwrap(),
            Backbone::Conv { channels } => channels[1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapPoint {
    PrePool,
    PostPool,
}

/// Ordered named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    entries: Vec<(String, Tensor)>,
}

impl Params {
    pub fn new(entries: Vec<(String, Tensor)>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn same_layout(&self, other: &Params) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape())
    }

    /// Order-sensitive hash of every parameter bit pattern.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, t) in &self.entries {
            for v in t.data() {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    /// Puts every tensor on `tape`, as leaves if `trainable`, else as constants.
    pub fn attach(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        ParamVars { vars }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(PARAMS_MAGIC);
        w.u32(PARAMS_VERSION);
        w.u32(self.entries.len() as u32);
        for (name, t) in &self.entries {
            w.u16(name.len() as u16);
            w.bytes(name.as_bytes());
            w.u8(t.rank() as u8);
            for &d in t.shape() {
                w.u32(d as u32);
            }
            w.f64s(t.data());
        }
        w.buf
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        r.magic(PARAMS_MAGIC)?;
        let version = r.u32("version")?;
        if version != PARAMS_VERSION {
            return r.fail(format!("unsupported version {version}"));
        }
        let count = r.u32("tensor count")?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let len = r.u16("name length")? as usize;
            let name = String::from_utf8(r.take(len, "name")?.to_vec())
                .or_else(|_| r.fail("parameter name is not utf-8"))?;
            let ndim = r.u8("ndim")? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32("dimension")? as usize);
            }
            let at = r.offset();
            let n = shape.iter().product();
            let data = r.f64s(n, "tensor data")?;
            let t = Tensor::new(shape, data).map_err(|e| Error::Format {
                offset: at,
                reason: e.to_string(),
            })?;
            entries.push((name, t));
        }
        if !r.is_done() {
            return r.fail("trailing bytes after last tensor");
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

/// Parameter handles on a tape, in [`Params`] order.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub vars: Vec<Var>,
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub logits: Var,
    /// `[B, C, H, W]` map feeding the final pooling; conv nets only.
    pub pre_pool: Option<Var>,
    /// `[B, C]` pooled features (penultimate activations for the MLP).
    pub post_pool: Var,
}

/// Plain values of a forward pass run outside any gradient computation.
#[derive(Debug, Clone)]
pub struct ForwardValues {
    pub logits: Tensor,
    pub pre_pool: Option<Tensor>,
    pub post_pool: Tensor,
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: ArchSpec,
}

impl Model {
    pub fn new(spec: ArchSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_params(&self, rng: &mut Rng) -> Params {
        let mut entries = Vec::new();
        let mut glorot = |shape: &[usize], fan_in: usize, fan_out: usize| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
            Tensor::from_vec(shape, data)
        };
        let k = self.spec.num_classes;
        match &self.spec.backbone {
            Backbone::Mlp { hidden } => {
                let mut width = self.spec.input_shape[0];
                for (i, &h) in hidden.iter().enumerate() {
                    entries.push((format!("fc{i}.weight"), glorot(&[width, h], width, h)));
                    entries.push((format!("fc{i}.bias"), Tensor::zeros(&[h])));
                    width = h;
                }
                entries.push(("head.weight".into(), glorot(&[width, k], width, k)));
            }
            Backbone::Conv { channels } => {
                let mut cin = self.spec.input_shape[0];
                for (i, &c) in channels.iter().enumerate() {
                    entries.push((
                        format!("conv{i}.weight"),
                        glorot(&[c, cin, 3, 3], cin * 9, c * 9),
                    ));
                    entries.push((format!("conv{i}.bias"), Tensor::zeros(&[c])));
                    cin = c;
                }
                entries.push(("head.weight".into(), glorot(&[cin, k], cin, k)));
            }
        }
        entries.push(("head.bias".into(), Tensor::zeros(&[k])));
        Params::new(entries)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let mut want = vec![x.shape()[0]];
        want.extend_from_slice(&self.spec.input_shape);
        if x.shape() != want.as_slice() {
            return Err(Error::dim("forward", x.shape(), &want));
        }
        Ok(())
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-p)`. No draws in eval mode or at `p = 0`.
    fn dropout(&self, tape: &mut Tape, h: Var, mode: Mode, rng: &mut Rng) -> Result<Var> {
        let p = self.spec.dropout_rate;
        if mode == Mode::Eval || p == 0.0 {
            return Ok(h);
        }
        let keep = 1.0 / (1.0 - p);
        let shape = tape.shape(h).to_vec();
        let n = shape.iter().product();
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let m = tape.constant(Tensor::from_vec(&shape, mask));
        tape.mul(h, m)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamVars,
        x: Var,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<ForwardOutput> {
        self.check_input(tape.value(x))?;
        let p = &params.vars;
        match &self.spec.backbone {
            Backbone::Mlp { hidden } => {
                let mut h = x;
                for i in 0..hidden.len() {
                    let z = tape.matmul(h, p[2 * i])?;
                    let z = tape.add_bias(z, p[2 * i + 1])?;
                    h = tape.relu(z);
                }
                let feat = self.dropout(tape, h, mode, rng)?;
                let n = hidden.len();
                let z = tape.matmul(feat, p[2 * n])?;
                let logits = tape.add_bias(z, p[2 * n + 1])?;
                Ok(ForwardOutput {
                    logits,
                    pre_pool: None,
                    post_pool: feat,
                })
            }
            Backbone::Conv { .. } => {
                let mut h = x;
                for i in 0..2 {
                    let z = tape.conv3x3(h, p[2 * i])?;
                    let z = tape.add_bias(z, p[2 * i + 1])?;
                    h = tape.relu(z);
                }
                let fmap = self.dropout(tape, h, mode, rng)?;
                let pooled = tape.global_avg_pool(fmap)?;
                let z = tape.matmul(pooled, p[4])?;
                let logits = tape.add_bias(z, p[5])?;
                Ok(ForwardOutput {
                    logits,
                    pre_pool: Some(fmap),
                    post_pool: pooled,
                })
            }
        }
    }

    /// Forward pass on a private tape with parameters held constant.
    pub fn forward_values(
        &self,
        params: &Params,
        x: &Tensor,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<ForwardValues> {
        let mut tape = Tape::new();
        let pv = params.attach(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &pv, xv, mode, rng)?;
        Ok(ForwardValues {
            logits: tape.value(out.logits).clone(),
            pre_pool: out.pre_pool.map(|v| tape.value(v).clone()),
            post_pool: tape.value(out.post_pool).clone(),
        })
    }
}

/// Features at `tap`, flattened to `[B, D]`.
pub fn tap_features(tape: &mut Tape, out: &ForwardOutput, tap: TapPoint) -> Result<Var> {
    match tap {
        TapPoint::PostPool => Ok(out.post_pool),
        TapPoint::PrePool => {
            let v = out.pre_pool.ok_or(Error::UnsupportedTap("pre_pool"))?;
            let shape = tape.shape(v);
            let flat = [shape[0], shape[1..].iter().product()];
            tape.reshape(v, &flat)
        }
    }
}

/// [`tap_features`] on plain values.
pub fn tap_values(out: &ForwardValues, tap: TapPoint) -> Result<Tensor> {
    match tap {
        TapPoint::PostPool => Ok(out.post_pool.clone()),
        TapPoint::PrePool => out
            .pre_pool
            .as_ref()
            .map(Tensor::flatten_rows)
            .ok_or(Error::UnsupportedTap("pre_pool")),
    }
}
