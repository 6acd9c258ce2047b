//! Conditioning path and the autoregressive mu-law WaveNet.
//!
//! Latents `[B,T',D]` pass through a linear filter-3 conv (probe point
//! `p_cond`), get a speaker one-hot appended, and are projected separately
//! into every gated layer. The per-layer projection is applied at latent rate
//! and then repeated `factor` times along time, which equals projecting the
//! nearest-neighbour upsampled stream.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::mulaw::{LEVELS, ZERO_LEVEL};
use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, sigmoid, Conv1dAttrs, Graph, Scalar, Tensor, Var};
use crate::params::{Bound, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WaveNetConfig {
    pub n_layers: usize,
    /// Dilation of layer `j` is `2^(j mod cycle)`.
    pub cycle: usize,
    pub residual_width: usize,
    pub gate_width: usize,
    pub skip_width: usize,
    pub output_width: usize,
    pub levels: usize,
}

impl Default for WaveNetConfig {
    fn default() -> Self {
        Self {
            n_layers: 10,
            cycle: 10,
            residual_width: 64,
            gate_width: 64,
            skip_width: 64,
            output_width: 64,
            levels: LEVELS,
        }
    }
}

impl WaveNetConfig {
    pub fn dilation(&self, j: usize) -> usize {
        1 << (j % self.cycle)
    }

    /// Previous samples visible to one output step.
    pub fn receptive_field(&self) -> usize {
        1 + (0..self.n_layers).map(|j| self.dilation(j)).sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            self.n_layers,
            self.cycle,
            self.residual_width,
            self.gate_width,
            self.skip_width,
            self.output_width,
        ];
        if widths.contains(&0) {
            return Err(Error::Config("wavenet sizes must be positive".into()));
        }
        if self.levels != LEVELS {
            return Err(Error::Config(format!("wavenet levels must be {LEVELS}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub cond_width: usize,
    pub cond_filter: usize,
    pub wavenet: WaveNetConfig,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            cond_width: 128,
            cond_filter: 3,
            wavenet: WaveNetConfig::default(),
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cond_width == 0 || self.cond_filter.is_multiple_of(2) {
            return Err(Error::Config(
                "cond_width must be positive and cond_filter odd".into(),
            ));
        }
        self.wavenet.validate()
    }

    pub fn init_params<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        latent_dim: usize,
        n_speakers: usize,
        rng: &mut impl Rng,
    ) {
        let (k, c) = (self.cond_filter, self.cond_width);
        store.init_uniform(rng, "dec.cond.w", &[k, latent_dim, c], k * latent_dim, 1.0);
        store.init_zeros("dec.cond.b", &[c]);
        init_wavenet(&self.wavenet, store, c + n_speakers, rng);
    }
}

fn init_wavenet<T: Scalar>(
    cfg: &WaveNetConfig,
    store: &mut ParamStore<T>,
    cond_dim: usize,
    rng: &mut impl Rng,
) {
    let (r, gw, s, h) = (
        cfg.residual_width,
        cfg.gate_width,
        cfg.skip_width,
        cfg.output_width,
    );
    store.init_uniform(rng, "wn.embed", &[cfg.levels, r], 1, 1.0);
    for j in 0..cfg.n_layers {
        store.init_uniform(rng, format!("wn.{j}.filter.w"), &[2, r, 2 * gw], 2 * r, 1.0);
        store.init_zeros(format!("wn.{j}.filter.b"), &[2 * gw]);
        store.init_uniform(rng, format!("wn.{j}.cond.w"), &[1, cond_dim, 2 * gw], cond_dim, 1.0);
        if j + 1 < cfg.n_layers {
            store.init_uniform(rng, format!("wn.{j}.res.w"), &[1, gw, r], gw, 1.0);
            store.init_zeros(format!("wn.{j}.res.b"), &[r]);
        }
        store.init_uniform(rng, format!("wn.{j}.skip.w"), &[1, gw, s], gw, 1.0);
        store.init_zeros(format!("wn.{j}.skip.b"), &[s]);
    }
    store.init_uniform(rng, "wn.out1.w", &[1, s, h], s, 2f64.sqrt());
    store.init_zeros("wn.out1.b", &[h]);
    // small output layer: an untrained model predicts a near-uniform softmax
    store.init_uniform(rng, "wn.out2.w", &[1, h, cfg.levels], h, 0.1);
    store.init_zeros("wn.out2.b", &[cfg.levels]);
}

pub struct Conditioning {
    /// `[B, T', cond_width]`, probe point `p_cond`.
    pub p_cond: Var,
    /// `[B, T', cond_width + n_speakers]` at latent rate.
    pub local: Var,
}

impl Conditioning {
    /// Per-sample stream (`[B, T' * factor, ...]`), for inspection.
    pub fn upsampled<T: Scalar>(&self, g: &mut Graph<T>, factor: usize) -> Result<Var> {
        g.repeat_time(self.local, factor)
    }
}

pub fn speaker_one_hot<T: Scalar>(
    speakers: &[usize],
    steps: usize,
    n_speakers: usize,
) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); speakers.len() * steps * n_speakers];
    for (b, &s) in speakers.iter().enumerate() {
        if s >= n_speakers {
            return Err(Error::InvalidArgument(format!(
                "speaker {s} outside the {n_speakers} training speakers"
            )));
        }
        for t in 0..steps {
            data[(b * steps + t) * n_speakers + s] = T::one();
        }
    }
    Tensor::new([speakers.len(), steps, n_speakers], data)
}

/// The linear filter-`cond_filter` conv producing `p_cond`.
pub fn mixing_conv<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &DecoderConfig,
    z: Var,
) -> Result<Var> {
    let w = p.var("dec.cond.w")?;
    let b = p.var("dec.cond.b")?;
    g.conv1d(z, w, Some(b), Conv1dAttrs::same(cfg.cond_filter))
}

/// Mixing conv over (possibly jittered) latents `z: [B,T',D]` plus the
/// speaker one-hot, one speaker id per batch row.
pub fn build_conditioning<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &DecoderConfig,
    z: Var,
    speakers: &[usize],
    n_speakers: usize,
) -> Result<Conditioning> {
    let shape = g.shape(z).to_vec();
    if shape.len() != 3 || shape[0] != speakers.len() {
        return Err(Error::shape(
            "build_conditioning",
            format!("latents {shape:?} for {} speakers", speakers.len()),
        ));
    }
    let p_cond = mixing_conv(g, p, cfg, z)?;
    let one_hot = g.constant(speaker_one_hot(speakers, shape[1], n_speakers)?);
    let local = g.concat(&[p_cond, one_hot])?;
    Ok(Conditioning { p_cond, local })
}

/// Teacher-forcing inputs: each row shifted right by one, starting from the
/// zero-amplitude level.
pub fn shift_levels(targets: &[usize], batch: usize) -> Vec<usize> {
    let t = targets.len() / batch.max(1);
    let mut out = Vec::with_capacity(targets.len());
    for row in targets.chunks(t.max(1)) {
        out.push(ZERO_LEVEL);
        out.extend_from_slice(&row[..row.len().saturating_sub(1)]);
    }
    out
}

/// One gated layer. Returns the residual output (`None` for the last
/// layer) and the skip contribution.
pub fn wavenet_layer<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &WaveNetConfig,
    j: usize,
    x: Var,
    local: Var,
    factor: usize,
) -> Result<(Option<Var>, Var)> {
    let attrs = Conv1dAttrs::causal(2, cfg.dilation(j));
    let fw = p.var(&format!("wn.{j}.filter.w"))?;
    let fb = p.var(&format!("wn.{j}.filter.b"))?;
    let a = g.conv1d(x, fw, Some(fb), attrs)?;
    let cw = p.var(&format!("wn.{j}.cond.w"))?;
    let cp = g.conv1d(local, cw, None, Conv1dAttrs::valid())?;
    let a = g.add_upsampled(a, cp, factor)?;
    let z = g.gated(a)?;
    let sw = p.var(&format!("wn.{j}.skip.w"))?;
    let sb = p.var(&format!("wn.{j}.skip.b"))?;
    let skip = g.conv1d(z, sw, Some(sb), Conv1dAttrs::valid())?;
    let next = match (p.try_var(&format!("wn.{j}.res.w")), p.try_var(&format!("wn.{j}.res.b"))) {
        (Some(rw), Some(rb)) => {
            let r = g.conv1d(z, rw, Some(rb), Conv1dAttrs::valid())?;
            Some(g.add(x, r)?)
        }
        _ => None,
    };
    Ok((next, skip))
}

/// Logits `[B*T, levels]` for every sample given the previous levels
/// (`B*T`, row-major) and latent-rate conditioning `local: [B,T',C]` with
/// `T = T' * factor`.
pub fn wavenet_logits<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &WaveNetConfig,
    prev_levels: &[usize],
    batch: usize,
    local: Var,
    factor: usize,
) -> Result<Var> {
    let ls = g.shape(local).to_vec();
    if batch == 0 || !prev_levels.len().is_multiple_of(batch) || ls.len() != 3 || ls[0] != batch {
        return Err(Error::shape(
            "wavenet_forward",
            format!("{} levels, batch {batch}, conditioning {ls:?}", prev_levels.len()),
        ));
    }
    let t = prev_levels.len() / batch;
    if ls[1] * factor != t {
        return Err(Error::shape(
            "wavenet_forward",
            format!("conditioning covers {} samples, targets {t}", ls[1] * factor),
        ));
    }
    let emb = g.embedding(p.var("wn.embed")?, prev_levels)?;
    let mut x = g.reshape(emb, [batch, t, cfg.residual_width])?;
    let mut skip_sum: Option<Var> = None;
    for j in 0..cfg.n_layers {
        let (next, skip) = wavenet_layer(g, p, cfg, j, x, local, factor)?;
        skip_sum = Some(match skip_sum {
            Some(s) => g.add(s, skip)?,
            None => skip,
        });
        if let Some(n) = next {
            x = n;
        }
    }
    let h = g.relu(skip_sum.expect("at least one layer"));
    let h = g.conv1d(h, p.var("wn.out1.w")?, Some(p.var("wn.out1.b")?), Conv1dAttrs::valid())?;
    let h = g.relu(h);
    let logits = g.conv1d(h, p.var("wn.out2.w")?, Some(p.var("wn.out2.b")?), Conv1dAttrs::valid())?;
    g.reshape(logits, [batch * t, cfg.levels])
}

/// Mean per-sample cross-entropy of `targets` (`[B, T]` row-major).
pub fn reconstruction_nll<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &WaveNetConfig,
    targets: &[usize],
    batch: usize,
    local: Var,
    factor: usize,
) -> Result<Var> {
    let prev = shift_levels(targets, batch);
    let logits = wavenet_logits(g, p, cfg, &prev, batch, local, factor)?;
    g.softmax_cross_entropy(logits, targets)
}

struct CachedLayer<T> {
    dilation: usize,
    filter_w: Vec<T>,
    filter_b: Vec<T>,
    /// `[T', 2G]` conditioning projection at latent rate.
    cond: Tensor<T>,
    res: Option<(Vec<T>, Vec<T>)>,
    skip_w: Vec<T>,
    skip_b: Vec<T>,
    /// Last `dilation` layer inputs, indexed by `t % dilation`.
    history: Vec<T>,
}

/// `out += x * W` for row-major `W: [x.len(), out.len()]`.
fn accumulate_matvec<T: Scalar>(out: &mut [T], x: &[T], w: &[T]) {
    let n = out.len();
    for (i, &xi) in x.iter().enumerate() {
        if xi == T::zero() {
            continue;
        }
        for (o, &wv) in out.iter_mut().zip(&w[i * n..(i + 1) * n]) {
            *o += xi * wv;
        }
    }
}

/// Sample-by-sample WaveNet evaluation with cached dilated states. Each
/// [`Generator::step`] costs one column of the full forward pass.
pub struct Generator<T> {
    cfg: WaveNetConfig,
    factor: usize,
    steps: usize,
    t: usize,
    embed: Tensor<T>,
    layers: Vec<CachedLayer<T>>,
    out1: (Vec<T>, Vec<T>),
    out2: (Vec<T>, Vec<T>),
}

impl<T: Scalar> Generator<T> {
    /// `local: [T', C]` latent-rate conditioning for a single utterance.
    pub fn new(
        params: &ParamStore<T>,
        cfg: &WaveNetConfig,
        local: &Tensor<T>,
        factor: usize,
    ) -> Result<Self> {
        if local.rank() != 2 {
            return Err(Error::shape("generator", format!("{:?}", local.shape())));
        }
        let steps = local.shape()[0];
        let mut g = Graph::new();
        let lv = g.constant(local.clone().reshape([1, steps, local.shape()[1]])?);
        let take = |name: &str| -> Result<Vec<T>> { Ok(params.require(name)?.data().to_vec()) };
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for j in 0..cfg.n_layers {
            let cw = g.constant(params.require(&format!("wn.{j}.cond.w"))?.clone());
            let cp = g.conv1d(lv, cw, None, Conv1dAttrs::valid())?;
            let cond = g.value(cp).clone().reshape([steps, 2 * cfg.gate_width])?;
            let res = if j + 1 < cfg.n_layers {
                Some((take(&format!("wn.{j}.res.w"))?, take(&format!("wn.{j}.res.b"))?))
            } else {
                None
            };
            let dilation = cfg.dilation(j);
            layers.push(CachedLayer {
                dilation,
                filter_w: take(&format!("wn.{j}.filter.w"))?,
                filter_b: take(&format!("wn.{j}.filter.b"))?,
                cond,
                res,
                skip_w: take(&format!("wn.{j}.skip.w"))?,
                skip_b: take(&format!("wn.{j}.skip.b"))?,
                history: vec![T::zero(); dilation * cfg.residual_width],
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            factor,
            steps,
            t: 0,
            embed: params.require("wn.embed")?.clone(),
            layers,
            out1: (take("wn.out1.w")?, take("wn.out1.b")?),
            out2: (take("wn.out2.w")?, take("wn.out2.b")?),
        })
    }

    /// Samples the conditioning covers.
    pub fn capacity(&self) -> usize {
        self.steps * self.factor
    }

    pub fn position(&self) -> usize {
        self.t
    }

    /// Logits for the next sample given the previous level.
    pub fn step(&mut self, prev_level: usize) -> Result<Vec<T>> {
        if self.t >= self.capacity() {
            return Err(Error::InvalidArgument(format!(
                "conditioning covers only {} samples",
                self.capacity()
            )));
        }
        if prev_level >= self.cfg.levels {
            return Err(Error::InvalidArgument(format!("level {prev_level} out of range")));
        }
        let (r, gw) = (self.cfg.residual_width, self.cfg.gate_width);
        let latent = self.t / self.factor;
        let mut x = self.embed.row(prev_level).to_vec();
        let mut skip = vec![T::zero(); self.cfg.skip_width];
        let mut a = vec![T::zero(); 2 * gw];
        let mut z = vec![T::zero(); gw];
        for layer in &mut self.layers {
            let slot = (self.t % layer.dilation) * r;
            a.copy_from_slice(&layer.filter_b);
            for (o, &c) in a.iter_mut().zip(layer.cond.row(latent)) {
                *o += c;
            }
            if self.t >= layer.dilation {
                let past = &layer.history[slot..slot + r];
                accumulate_matvec(&mut a, past, &layer.filter_w[..r * 2 * gw]);
            }
            accumulate_matvec(&mut a, &x, &layer.filter_w[r * 2 * gw..]);
            layer.history[slot..slot + r].copy_from_slice(&x);
            for k in 0..gw {
                z[k] = a[k].tanh_fast() * sigmoid(a[gw + k]);
            }
            for (s, &b) in skip.iter_mut().zip(&layer.skip_b) {
                *s += b;
            }
            accumulate_matvec(&mut skip, &z, &layer.skip_w);
            if let Some((rw, rb)) = &layer.res {
                for (xv, &b) in x.iter_mut().zip(rb) {
                    *xv += b;
                }
                accumulate_matvec(&mut x, &z, rw);
            }
        }
        let relu = |v: &mut [T]| v.iter_mut().for_each(|e| *e = e.max(T::zero()));
        relu(&mut skip);
        let mut h = self.out1.1.clone();
        accumulate_matvec(&mut h, &skip, &self.out1.0);
        relu(&mut h);
        let mut logits = self.out2.1.clone();
        accumulate_matvec(&mut logits, &h, &self.out2.0);
        self.t += 1;
        Ok(logits)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decoding {
    Argmax,
    Sample,
}

/// Lowest-index maximum.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn sample_softmax<T: Scalar>(logits: &[T], rng: &mut impl Rng) -> usize {
    let lse = log_sum_exp(logits).as_f64();
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &l) in logits.iter().enumerate() {
        acc += (l.as_f64() - lse).exp();
        if u < acc {
            return i;
        }
    }
    logits.len() - 1
}

/// Autoregressively emits `n` levels.
pub fn generate<T: Scalar>(
    params: &ParamStore<T>,
    cfg: &WaveNetConfig,
    local: &Tensor<T>,
    factor: usize,
    n: usize,
    mode: Decoding,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let mut gen = Generator::new(params, cfg, local, factor)?;
    if n > gen.capacity() {
        return Err(Error::InvalidArgument(format!(
            "{n} samples requested, conditioning covers {}",
            gen.capacity()
        )));
    }
    let mut prev = ZERO_LEVEL;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let logits = gen.step(prev)?;
        prev = match mode {
            Decoding::Argmax => argmax(&logits),
            Decoding::Sample => sample_softmax(&logits, rng),
        };
        out.push(prev);
    }
    Ok(out)
}
