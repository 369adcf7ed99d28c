//! Tiny timestep-conditioned U-Net with nine named tap sites.
//!
//! Layout (for image size `S` and widths `w0..w3`):
//!
//! ```text
//! D1 (w0, S)  -> pool -> D2 (w1, S/2) -> pool -> D3 (w2, S/4) -> pool -> D4 (w3, S/8)
//! BOTTLENECK (w3, S/8)
//! U4 = block(cat(BOTTLENECK, D4))        (w3, S/8)  -> up
//! U3 = block(cat(up U4, D3))             (w2, S/4)  -> up
//! U2 = block(cat(up U3, D2))             (w1, S/2)  -> up
//! U1 = block(cat(up U2, D1))             (w0, S)    -> head conv -> eps_hat
//! ```
//!
//! Every block is conv3x3 -> group norm -> timestep scale/shift -> SiLU, and
//! its output is the tap activation.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{DiecError, Result};
use crate::numeric::tape::{Real, Tape, Var};
use crate::numeric::{Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tap {
    D1,
    D2,
    D3,
    D4,
    #[serde(rename = "BOTTLENECK")]
    Bottleneck,
    U4,
    U3,
    U2,
    U1,
}

impl Tap {
    /// Shallow-to-deep order along the forward pass; also the tie-break order.
    pub const ALL: [Tap; 9] = [
        Tap::D1,
        Tap::D2,
        Tap::D3,
        Tap::D4,
        Tap::Bottleneck,
        Tap::U4,
        Tap::U3,
        Tap::U2,
        Tap::U1,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Tap::D1 => "D1",
            Tap::D2 => "D2",
            Tap::D3 => "D3",
            Tap::D4 => "D4",
            Tap::Bottleneck => "BOTTLENECK",
            Tap::U4 => "U4",
            Tap::U3 => "U3",
            Tap::U2 => "U2",
            Tap::U1 => "U1",
        }
    }

    pub fn position(self) -> usize {
        Tap::ALL.iter().position(|&t| t == self).expect("tap listed in ALL")
    }

    fn block(self) -> &'static str {
        match self {
            Tap::D1 => "d1",
            Tap::D2 => "d2",
            Tap::D3 => "d3",
            Tap::D4 => "d4",
            Tap::Bottleneck => "mid",
            Tap::U4 => "u4",
            Tap::U3 => "u3",
            Tap::U2 => "u2",
            Tap::U1 => "u1",
        }
    }
}

impl fmt::Display for Tap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Tap {
    type Err = DiecError;
    fn from_str(s: &str) -> Result<Self> {
        Tap::ALL
            .iter()
            .copied()
            .find(|t| t.name().eq_ignore_ascii_case(s) || (s.eq_ignore_ascii_case("mid") && *t == Tap::Bottleneck))
            .ok_or_else(|| DiecError::param(format!("unknown tap id '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub widths: [usize; 4],
    pub groups: usize,
    pub time_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig { in_channels: 1, image_size: 16, widths: [8, 16, 32, 32], groups: 4, time_dim: 64 }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.image_size == 0 || self.image_size % 8 != 0 {
            return Err(DiecError::Config(format!("image size {} must be a positive multiple of 8", self.image_size)));
        }
        if self.groups == 0 || self.widths.iter().any(|&w| w == 0 || w % self.groups != 0) {
            return Err(DiecError::Config(format!("widths {:?} must be multiples of groups {}", self.widths, self.groups)));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(DiecError::Config("time embedding dimension must be even".into()));
        }
        Ok(())
    }

    /// `(channels, height, width)` of a tap activation for one sample.
    pub fn tap_shape(&self, tap: Tap) -> (usize, usize, usize) {
        let s = self.image_size;
        let w = self.widths;
        match tap {
            Tap::D1 | Tap::U1 => (w[0], s, s),
            Tap::D2 | Tap::U2 => (w[1], s / 2, s / 2),
            Tap::D3 | Tap::U3 => (w[2], s / 4, s / 4),
            Tap::D4 | Tap::U4 | Tap::Bottleneck => (w[3], s / 8, s / 8),
        }
    }

    fn block_channels(&self, tap: Tap) -> (usize, usize) {
        let w = self.widths;
        match tap {
            Tap::D1 => (self.in_channels, w[0]),
            Tap::D2 => (w[0], w[1]),
            Tap::D3 => (w[1], w[2]),
            Tap::D4 => (w[2], w[3]),
            Tap::Bottleneck => (w[3], w[3]),
            Tap::U4 => (2 * w[3], w[3]),
            Tap::U3 => (w[3] + w[2], w[2]),
            Tap::U2 => (w[2] + w[1], w[1]),
            Tap::U1 => (w[1] + w[0], w[0]),
        }
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.image_size * self.image_size
    }
}

/// Named parameter tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn insert(&mut self, name: &str, t: Tensor) {
        if let Some(&i) = self.index.get(name) {
            self.entries[i].1 = t;
        } else {
            self.index.insert(name.to_string(), self.entries.len());
            self.entries.push((name.to_string(), t));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
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

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.entries[i].1
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].1
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Loads parameters onto a tape on first use.
pub struct ParamBinder<'a> {
    store: &'a ParamStore,
    trainable: bool,
    bound: BTreeMap<usize, Var>,
}

impl<'a> ParamBinder<'a> {
    pub fn new(store: &'a ParamStore, trainable: bool) -> Self {
        ParamBinder { store, trainable, bound: BTreeMap::new() }
    }

    pub fn var<F: Real>(&mut self, tape: &mut Tape<F>, name: &str) -> Result<Var> {
        let i = self
            .store
            .position(name)
            .ok_or_else(|| DiecError::param(format!("missing parameter {name}")))?;
        if let Some(&v) = self.bound.get(&i) {
            return Ok(v);
        }
        let t = self.store.tensor(i);
        let vals: Vec<F> = t.data().iter().map(|&v| F::of(v as f64)).collect();
        let v = if self.trainable {
            tape.param(t.shape().to_vec(), vals)?
        } else {
            tape.constant(t.shape().to_vec(), vals)?
        };
        self.bound.insert(i, v);
        Ok(v)
    }

    /// Uses `var` for store entry `index` instead of loading it from the store.
    pub fn bind(&mut self, index: usize, var: Var) {
        self.bound.insert(index, var);
    }

    /// `(store index, tape var)` for every parameter touched so far.
    pub fn bound(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.bound.iter().map(|(&i, &v)| (i, v))
    }
}

pub struct ForwardOutput {
    pub eps: Option<Var>,
    pub taps: BTreeMap<Tap, Var>,
}

#[derive(Debug)]
pub struct DenoiserModel {
    config: UNetConfig,
    params: ParamStore,
    forward_count: AtomicU64,
}

impl Clone for DenoiserModel {
    fn clone(&self) -> Self {
        DenoiserModel {
            config: self.config.clone(),
            params: self.params.clone(),
            forward_count: AtomicU64::new(self.forward_count.load(Ordering::Relaxed)),
        }
    }
}

/// Sinusoidal embedding of integer timesteps: `[sin(t f_j) | cos(t f_j)]`.
pub fn timestep_embedding(ts: &[usize], dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let t = t as f64;
        let freqs: Vec<f64> = (0..half).map(|j| (-(10000f64.ln()) * j as f64 / half as f64).exp()).collect();
        out.extend(freqs.iter().map(|f| (t * f).sin() as f32));
        out.extend(freqs.iter().map(|f| (t * f).cos() as f32));
    }
    out
}

impl DenoiserModel {
    pub fn new(config: UNetConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::default();
        let td = config.time_dim;
        let gauss = |shape: Vec<usize>, std: f64, rng: &mut Rng| {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| (rng.normal() * std) as f32).collect();
            Tensor::new(shape, data).expect("sized")
        };
        params.insert("time.w", gauss(vec![td, td], (1.0 / td as f64).sqrt(), rng));
        params.insert("time.b", Tensor::zeros(vec![td]));
        for tap in Tap::ALL {
            let (ci, co) = config.block_channels(tap);
            let b = tap.block();
            params.insert(&format!("{b}.conv.w"), gauss(vec![co, ci, 3, 3], (1.0 / (9 * ci) as f64).sqrt(), rng));
            params.insert(&format!("{b}.conv.b"), Tensor::zeros(vec![co]));
            params.insert(&format!("{b}.norm.g"), Tensor::filled(vec![co], 1.0));
            params.insert(&format!("{b}.norm.b"), Tensor::zeros(vec![co]));
            params.insert(&format!("{b}.mod.w"), gauss(vec![2 * co, td], 0.5 / (td as f64).sqrt(), rng));
            params.insert(&format!("{b}.mod.b"), Tensor::zeros(vec![2 * co]));
        }
        let c = config.in_channels;
        params.insert("head.w", Tensor::zeros(vec![c, config.widths[0], 3, 3]));
        params.insert("head.b", Tensor::zeros(vec![c]));
        Ok(DenoiserModel { config, params, forward_count: AtomicU64::new(0) })
    }

    pub fn from_parts(config: UNetConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(0);
        let reference = DenoiserModel::new(config.clone(), &mut rng)?;
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(DiecError::Format(format!("parameter {name}: shape {:?}, expected {:?}", p.shape(), t.shape())))
                }
                None => return Err(DiecError::Format(format!("missing parameter {name}"))),
            }
        }
        if params.len() != reference.params.len() {
            return Err(DiecError::Format("unexpected extra parameters".into()));
        }
        Ok(DenoiserModel { config, params, forward_count: AtomicU64::new(0) })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Per-sample forward passes executed since construction or last reset.
    pub fn forward_count(&self) -> u64 {
        self.forward_count.load(Ordering::Relaxed)
    }

    pub fn reset_forward_count(&self) {
        self.forward_count.store(0, Ordering::Relaxed);
    }

    fn block<F: Real>(
        &self,
        tape: &mut Tape<F>,
        binder: &mut ParamBinder<'_>,
        tap: Tap,
        x: Var,
        temb: Var,
    ) -> Result<Var> {
        let b = tap.block();
        let w = binder.var(tape, &format!("{b}.conv.w"))?;
        let bias = binder.var(tape, &format!("{b}.conv.b"))?;
        let h = tape.conv3x3(x, w, bias)?;
        let g = binder.var(tape, &format!("{b}.norm.g"))?;
        let beta = binder.var(tape, &format!("{b}.norm.b"))?;
        let h = tape.group_norm(h, g, beta, self.config.groups)?;
        let mw = binder.var(tape, &format!("{b}.mod.w"))?;
        let mb = binder.var(tape, &format!("{b}.mod.b"))?;
        let ss = tape.linear(temb, mw, mb)?;
        let h = tape.modulate(h, ss)?;
        Ok(tape.silu(h))
    }

    /// Records the forward pass on `tape`. Evaluation stops after `stop_after`
    /// when given (no noise prediction is produced in that case).
    pub fn forward_on_tape<F: Real>(
        &self,
        tape: &mut Tape<F>,
        binder: &mut ParamBinder<'_>,
        x: Var,
        ts: &[usize],
        stop_after: Option<Tap>,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4
            || shape[1] != cfg.in_channels
            || shape[2] != cfg.image_size
            || shape[3] != cfg.image_size
            || shape[0] != ts.len()
        {
            return Err(DiecError::shape(format!(
                "input {:?} with {} timesteps; model expects [N, {}, {}, {}]",
                shape,
                ts.len(),
                cfg.in_channels,
                cfg.image_size,
                cfg.image_size
            )));
        }
        self.forward_count.fetch_add(ts.len() as u64, Ordering::Relaxed);
        let n = ts.len();
        let emb = timestep_embedding(ts, cfg.time_dim).into_iter().map(|v| F::of(v as f64)).collect();
        let emb = tape.constant(vec![n, cfg.time_dim], emb)?;
        let tw = binder.var(tape, "time.w")?;
        let tb = binder.var(tape, "time.b")?;
        let temb = tape.linear(emb, tw, tb)?;
        let temb = tape.silu(temb);

        let mut taps = BTreeMap::new();
        let done = |taps: &BTreeMap<Tap, Var>, t: Tap| stop_after == Some(t) && taps.contains_key(&t);

        let d1 = self.block(tape, binder, Tap::D1, x, temb)?;
        taps.insert(Tap::D1, d1);
        if done(&taps, Tap::D1) {
            return Ok(ForwardOutput { eps: None, taps });
        }
        let p = tape.avg_pool2(d1)?;
        let d2 = self.block(tape, binder, Tap::D2, p, temb)?;
        taps.insert(Tap::D2, d2);
        if done(&taps, Tap::D2) {
            return Ok(ForwardOutput { eps: None, taps });
        }
        let p = tape.avg_pool2(d2)?;
        let d3 = self.block(tape, binder, Tap::D3, p, temb)?;
        taps.insert(Tap::D3, d3);
        if done(&taps, Tap::D3) {
            return Ok(ForwardOutput { eps: None, taps });
        }
        let p = tape.avg_pool2(d3)?;
        let d4 = self.block(tape, binder, Tap::D4, p, temb)?;
        taps.insert(Tap::D4, d4);
        if done(&taps, Tap::D4) {
            return Ok(ForwardOutput { eps: None, taps });
        }
        let mid = self.block(tape, binder, Tap::Bottleneck, d4, temb)?;
        taps.insert(Tap::Bottleneck, mid);
        if done(&taps, Tap::Bottleneck) {
            return Ok(ForwardOutput { eps: None, taps });
        }
        let c = tape.concat_channels(mid, d4)?;
        let u4 = self.block(tape, binder, Tap::U4, c, temb)?;
        taps.insert(Tap::U4, u4);
        if done(&taps, Tap::U4) {
            return Ok(ForwardOutput { eps: None, taps });
        }
        let up = tape.upsample2(u4)?;
        let c = tape.concat_channels(up, d3)?;
        let u3 = self.block(tape, binder, Tap::U3, c, temb)?;
        taps.insert(Tap::U3, u3);
        if done(&taps, Tap::U3) {
            return Ok(ForwardOutput { eps: None, taps });
        }
        let up = tape.upsample2(u3)?;
        let c = tape.concat_channels(up, d2)?;
        let u2 = self.block(tape, binder, Tap::U2, c, temb)?;
        taps.insert(Tap::U2, u2);
        if done(&taps, Tap::U2) {
            return Ok(ForwardOutput { eps: None, taps });
        }
        let up = tape.upsample2(u2)?;
        let c = tape.concat_channels(up, d1)?;
        let u1 = self.block(tape, binder, Tap::U1, c, temb)?;
        taps.insert(Tap::U1, u1);
        if done(&taps, Tap::U1) {
            return Ok(ForwardOutput { eps: None, taps });
        }
        let hw = binder.var(tape, "head.w")?;
        let hb = binder.var(tape, "head.b")?;
        let eps = tape.conv3x3(u1, hw, hb)?;
        Ok(ForwardOutput { eps: Some(eps), taps })
    }

    /// Full forward pass returning the noise prediction and the requested
    /// tap activations (`[N, C, h, w]` each).
    pub fn denoise_predict(&self, x_t: &Tensor, ts: &[usize], taps: &[Tap]) -> Result<(Tensor, BTreeMap<Tap, Tensor>)> {
        let mut tape = Tape::<f32>::new();
        let mut binder = ParamBinder::new(&self.params, false);
        let x = tape.constant(x_t.shape().to_vec(), x_t.data().to_vec())?;
        let out = self.forward_on_tape(&mut tape, &mut binder, x, ts, None)?;
        let eps = out.eps.expect("full forward produces eps");
        let eps_t = Tensor::new(tape.shape(eps).to_vec(), tape.value(eps).to_vec())?;
        let mut acts = BTreeMap::new();
        for &tap in taps {
            let v = out.taps[&tap];
            acts.insert(tap, Tensor::new(tape.shape(v).to_vec(), tape.value(v).to_vec())?);
        }
        Ok((eps_t, acts))
    }

    /// Tap activations only; stops the forward pass at the deepest requested tap.
    pub fn tap_activations(&self, x_t: &Tensor, ts: &[usize], taps: &[Tap]) -> Result<BTreeMap<Tap, Tensor>> {
        let deepest = taps.iter().copied().max().ok_or_else(|| DiecError::param("no taps requested"))?;
        let mut tape = Tape::<f32>::new();
        let mut binder = ParamBinder::new(&self.params, false);
        let x = tape.constant(x_t.shape().to_vec(), x_t.data().to_vec())?;
        let out = self.forward_on_tape(&mut tape, &mut binder, x, ts, Some(deepest))?;
        let mut acts = BTreeMap::new();
        for &tap in taps {
            let v = out.taps[&tap];
            acts.insert(tap, Tensor::new(tape.shape(v).to_vec(), tape.value(v).to_vec())?);
        }
        Ok(acts)
    }

    pub fn predict_eps(&self, x_t: &Tensor, ts: &[usize]) -> Result<Tensor> {
        Ok(self.denoise_predict(x_t, ts, &[])?.0)
    }
}
