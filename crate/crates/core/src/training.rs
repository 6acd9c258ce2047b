//! Optimizer, learning-rate schedule, Polyak averaging, minibatch sampling
//! and the single training step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::FeatureSequence;
use crate::bottleneck::{BottleneckMode, CodebookInit};
use crate::error::{Error, Result};
use crate::model::{total_loss, Batch, LossSettings, Model, ModelConfig};
use crate::numerics::{Graph, Scalar, Tensor};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub segment_samples: usize,
    pub steps: u64,
    pub base_lr: f64,
    /// Steps after which the learning rate halves.
    pub milestones: Vec<u64>,
    pub commitment: f64,
    /// Free-information budget of the VAE, in bits.
    pub free_bits: f64,
    pub jitter_p: f64,
    pub seed: u64,
    pub polyak_decay: f64,
    /// VQ rows unused by a fresh batch are reset from encoder vectors every
    /// this many steps; 0 disables.
    pub codebook_restart_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            segment_samples: 5120,
            steps: 1000,
            base_lr: 4e-4,
            milestones: vec![400_000, 600_000, 800_000],
            commitment: 0.25,
            free_bits: 14.0,
            jitter_p: 0.12,
            seed: 0,
            polyak_decay: 0.9999,
            codebook_restart_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let unit = model.samples_per_latent();
        if self.segment_samples == 0 || !self.segment_samples.is_multiple_of(unit) {
            return Err(Error::Config(format!(
                "segment_samples {} must be a positive multiple of {unit} samples per latent",
                self.segment_samples
            )));
        }
        let frames = self.segment_samples / model.input_hop();
        if frames < model.encoder.receptive_field() {
            return Err(Error::Config(format!(
                "segment of {frames} frames is shorter than the encoder receptive field"
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("milestones must be strictly increasing".into()));
        }
        if !(0.0..=1.0).contains(&self.jitter_p) || !(0.0..=1.0).contains(&self.polyak_decay) {
            return Err(Error::Config("jitter_p and polyak_decay must lie in [0, 1]".into()));
        }
        if self.base_lr <= 0.0 || self.commitment < 0.0 || self.free_bits < 0.0 {
            return Err(Error::Config("learning rate must be positive, loss weights non-negative".into()));
        }
        Ok(())
    }

    pub fn loss_settings(&self) -> LossSettings {
        LossSettings {
            commitment: self.commitment,
            free_bits: self.free_bits,
            jitter_p: self.jitter_p,
        }
    }
}

/// `base * 0.5^(milestones passed)`.
pub fn lr_schedule(step: u64, base: f64, milestones: &[u64]) -> f64 {
    let halvings = milestones.iter().filter(|&&m| step >= m).count();
    base * 0.5f64.powi(halvings as i32)
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moments for every trainable entry of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params
            .entries()
            .iter()
            .filter(|e| e.trainable)
            .map(|e| Tensor::zeros(e.value.shape().to_vec()))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Bias-corrected Adam update. `grads` is indexed like the store's
/// entries; `None` means a zero gradient.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} gradients for {} parameters", grads.len(), params.len()),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = T::from_f64_lossy(1.0 - ADAM_BETA1.powi(t));
    let c2 = T::from_f64_lossy(1.0 - ADAM_BETA2.powi(t));
    let (b1, b2) = (T::from_f64_lossy(ADAM_BETA1), T::from_f64_lossy(ADAM_BETA2));
    let (eps, lr) = (T::from_f64_lossy(ADAM_EPS), T::from_f64_lossy(lr));
    let mut k = 0;
    for (entry, grad) in params.entries_mut().iter_mut().zip(grads) {
        if !entry.trainable {
            continue;
        }
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        k += 1;
        if m.shape() != entry.value.shape() {
            return Err(Error::shape("adam_step", format!("moment shape for {}", entry.name)));
        }
        let Some(grad) = grad else {
            // zero gradient: moments decay, parameter still moves by the
            // remaining momentum
            for ((p, mi), vi) in entry.value.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()) {
                *mi = b1 * *mi;
                *vi = b2 * *vi;
                *p -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
            continue;
        };
        if grad.shape() != entry.value.shape() {
            return Err(Error::shape("adam_step", format!("gradient shape for {}", entry.name)));
        }
        for (((p, &g), mi), vi) in entry
            .value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (T::one() - b1) * g;
            *vi = b2 * *vi + (T::one() - b2) * g * g;
            *p -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// `avg = decay * avg + (1 - decay) * params`, entry by entry.
pub fn polyak_update<T: Scalar>(avg: &mut ParamStore<T>, params: &ParamStore<T>, decay: f64) {
    let d = T::from_f64_lossy(decay);
    let one_minus = T::from_f64_lossy(1.0 - decay);
    for (a, p) in avg.entries_mut().iter_mut().zip(params.entries()) {
        for (x, &y) in a.value.data_mut().iter_mut().zip(p.value.data()) {
            *x = d * *x + one_minus * y;
        }
    }
}

/// Independent random stream for `(seed, step, purpose)`.
pub fn step_rng(seed: u64, step: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_mul(4).wrapping_add(purpose));
    rng
}

const BATCH_STREAM: u64 = 0;
const NOISE_STREAM: u64 = 1;
const INIT_STREAM: u64 = 2;
const RESTART_STREAM: u64 = 3;

/// One training utterance: normalized encoder input (one frame per hop)
/// and mu-law levels of the waveform.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub id: String,
    pub speaker: usize,
    pub features: FeatureSequence,
    pub levels: Vec<u8>,
}

/// Training segments drawn uniformly over every valid hop-aligned window.
#[derive(Clone, Debug)]
pub struct SegmentSampler {
    items: Vec<TrainItem>,
    /// Cumulative count of valid starts per item.
    cumulative: Vec<u64>,
    seg_frames: usize,
    seg_samples: usize,
    hop: usize,
}

impl SegmentSampler {
    /// Utterances shorter than one segment are dropped with a warning.
    pub fn new(items: Vec<TrainItem>, model: &ModelConfig, segment_samples: usize) -> Result<Self> {
        let hop = model.input_hop();
        let seg_frames = segment_samples / hop;
        let mut kept = Vec::new();
        let mut cumulative = Vec::new();
        let mut total = 0u64;
        for it in items {
            let frames = it.features.n_frames().min(it.levels.len() / hop);
            if frames < seg_frames {
                log::warn!(
                    "skipping {}: {} samples, shorter than a {segment_samples}-sample segment",
                    it.id,
                    it.levels.len()
                );
                continue;
            }
            total += (frames - seg_frames + 1) as u64;
            cumulative.push(total);
            kept.push(it);
        }
        if kept.is_empty() {
            return Err(Error::Data("no training utterance covers one segment".into()));
        }
        Ok(Self {
            items: kept,
            cumulative,
            seg_frames,
            seg_samples: segment_samples,
            hop,
        })
    }

    pub fn items(&self) -> &[TrainItem] {
        &self.items
    }

    pub fn n_windows(&self) -> u64 {
        *self.cumulative.last().unwrap()
    }

    /// `(item, start frame)` pairs for one batch.
    pub fn draw(&self, batch: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
        (0..batch)
            .map(|_| {
                let u = rng.gen_range(0..self.n_windows());
                let i = self.cumulative.partition_point(|&c| c <= u);
                let before = if i == 0 { 0 } else { self.cumulative[i - 1] };
                (i, (u - before) as usize)
            })
            .collect()
    }

    pub fn minibatch(&self, batch: usize, rng: &mut impl Rng) -> Batch<f32> {
        let picks = self.draw(batch, rng);
        let dim = self.items[0].features.dim;
        let mut feats = Vec::with_capacity(batch * self.seg_frames * dim);
        let mut targets = Vec::with_capacity(batch * self.seg_samples);
        let mut speakers = Vec::with_capacity(batch);
        for (i, start) in picks {
            let it = &self.items[i];
            feats.extend_from_slice(&it.features.frames[start * dim..(start + self.seg_frames) * dim]);
            let s0 = start * self.hop;
            targets.extend(it.levels[s0..s0 + self.seg_samples].iter().map(|&l| l as usize));
            speakers.push(it.speaker);
        }
        Batch {
            features: Tensor::new([batch, self.seg_frames, dim], feats).unwrap(),
            targets,
            speakers,
        }
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub polyak: ParamStore<f32>,
    pub adam: AdamState<f32>,
    /// Completed optimizer steps.
    pub step: u64,
}

impl TrainState {
    pub fn new(model: Model) -> Self {
        Self {
            polyak: model.params.clone(),
            adam: AdamState::new(&model.params),
            model,
            step: 0,
        }
    }
}

/// Loss components of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub loss: f32,
    pub nll: f32,
    pub kl_or_vq: f32,
    pub commit: f32,
    pub token_ids: Option<Vec<usize>>,
}

impl StepLog {
    pub const CSV_HEADER: &'static str = "step,lr,loss,nll,kl_or_vq,commit";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.lr, self.loss, self.nll, self.kl_or_vq, self.commit
        )
    }
}

/// Loss value of `batch` under the current parameters (no update, no noise).
pub fn evaluate_batch(model: &Model, batch: &Batch<f32>, tc: &TrainConfig) -> Result<f32> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, false);
    let l = total_loss::<f32, ChaCha8Rng>(&mut g, &p, &model.config, batch, &tc.loss_settings(), None)?;
    Ok(g.value(l.total).item())
}

/// One optimizer step on `batch` with the noise stream `noise`.
pub fn step_on_batch(
    state: &mut TrainState,
    batch: &Batch<f32>,
    tc: &TrainConfig,
    noise: &mut ChaCha8Rng,
) -> Result<StepLog> {
    let lr = lr_schedule(state.step, tc.base_lr, &tc.milestones);
    let mut g = Graph::new();
    let p = state.model.params.bind(&mut g, true);
    let l = total_loss(&mut g, &p, &state.model.config, batch, &tc.loss_settings(), Some(noise))?;
    let val = |v: Option<crate::numerics::Var>| v.map_or(0.0, |v| g.value(v).item());
    let log = StepLog {
        step: state.step + 1,
        lr,
        loss: val(Some(l.total)),
        nll: val(Some(l.nll)),
        kl_or_vq: val(l.kl_or_vq),
        commit: val(l.commit),
        token_ids: l.token_ids.clone(),
    };
    for (name, v) in [
        ("nll", log.nll),
        ("kl_or_vq", log.kl_or_vq),
        ("commit", log.commit),
        ("loss", log.loss),
    ] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite {name} ({v}) at step {}",
                log.step
            )));
        }
    }
    let mut grads = g.backward_leaves(l.total)?;
    let per_entry: Vec<Option<Tensor<f32>>> = p
        .vars()
        .iter()
        .map(|&v| grads.get(v).is_some().then(|| grads.take(v)))
        .collect();
    drop(g);
    adam_step(&mut state.model.params, &per_entry, &mut state.adam, lr)?;
    polyak_update(&mut state.polyak, &state.model.params, tc.polyak_decay);
    state.step += 1;
    Ok(log)
}

/// Minibatch offering at least `k` latent vectors, and `tc.batch_size`
/// segments at minimum.
fn latent_batch(model: &Model, data: &SegmentSampler, tc: &TrainConfig, k: usize, rng: &mut ChaCha8Rng) -> Batch<f32> {
    let per_segment = tc.segment_samples / model.config.samples_per_latent();
    data.minibatch(tc.batch_size.max(k.div_ceil(per_segment)), rng)
}

/// Data-dependent initialization before the first step (codebook rows from
/// encoder outputs when configured). Deterministic in the seed.
pub fn initialize_from_data(model: &mut Model, data: &SegmentSampler, tc: &TrainConfig) -> Result<()> {
    if model.config.bottleneck.mode != BottleneckMode::Vq || model.config.bottleneck.codebook_init != CodebookInit::Data {
        return Ok(());
    }
    let mut rng = step_rng(tc.seed, 0, INIT_STREAM);
    let batch = latent_batch(model, data, tc, model.config.bottleneck.codebook_size, &mut rng);
    model.init_codebook_from_data(&batch.features, &mut rng)
}

/// Dead-code restart due before step `state.step`, with fresh Adam moments
/// for the replaced rows. Returns the replaced rows.
pub fn maybe_restart_codes(state: &mut TrainState, data: &SegmentSampler, tc: &TrainConfig) -> Result<Vec<usize>> {
    let every = tc.codebook_restart_every;
    if every == 0 || state.step == 0 || !state.step.is_multiple_of(every) || state.model.config.bottleneck.mode != BottleneckMode::Vq {
        return Ok(Vec::new());
    }
    let mut rng = step_rng(tc.seed, state.step, RESTART_STREAM);
    // four vectors per code make an unused row a meaningful signal
    let k = 4 * state.model.config.bottleneck.codebook_size;
    let batch = latent_batch(&state.model, data, tc, k, &mut rng);
    let dead = state.model.restart_dead_codes(&batch.features, &mut rng)?;
    let slot = state
        .model
        .params
        .entries()
        .iter()
        .filter(|e| e.trainable)
        .position(|e| e.name == "bn.codebook")
        .expect("vq codebook is trainable");
    let d = state.model.config.bottleneck.latent_dim;
    for moments in [&mut state.adam.m[slot], &mut state.adam.v[slot]] {
        for &r in &dead {
            moments.data_mut()[r * d..(r + 1) * d].fill(0.0);
        }
    }
    if !dead.is_empty() {
        log::debug!("step {}: restarted {} codebook rows", state.step, dead.len());
    }
    Ok(dead)
}

/// One step with the minibatch and noise streams of `(seed, step)`.
pub fn train_step(state: &mut TrainState, data: &SegmentSampler, tc: &TrainConfig) -> Result<StepLog> {
    maybe_restart_codes(state, data, tc)?;
    let mut batch_rng = step_rng(tc.seed, state.step, BATCH_STREAM);
    let batch = data.minibatch(tc.batch_size, &mut batch_rng);
    let mut noise = step_rng(tc.seed, state.step, NOISE_STREAM);
    step_on_batch(state, &batch, tc, &mut noise)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::FeatureKind;

    fn scalar_store(x: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::new([1], vec![x]).unwrap(), true);
        s
    }

    #[test]
    fn adam_zero_gradient_leaves_fresh_params() {
        let mut s = scalar_store(2.0);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &[Some(Tensor::new([1], vec![0.0]).unwrap())], &mut st, 0.1).unwrap();
        assert_eq!(s.get("x").unwrap().data(), &[2.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = scalar_store(0.0);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &[Some(Tensor::new([1], vec![1.0]).unwrap())], &mut st, 1e-3).unwrap();
        assert!((s.get("x").unwrap().data()[0] + 1e-3).abs() < 1e-9);
    }

    #[test]
    fn adam_matches_scalar_oracle_on_quadratic() {
        let lr = 0.1;
        let mut s = scalar_store(1.0);
        let mut st = AdamState::new(&s);
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=5 {
            let gx = 2.0 * s.get("x").unwrap().data()[0];
            adam_step(&mut s, &[Some(Tensor::new([1], vec![gx]).unwrap())], &mut st, lr).unwrap();
            let g = 2.0 * x;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= lr * mh / (vh.sqrt() + 1e-8);
            assert!((s.get("x").unwrap().data()[0] - x).abs() < 1e-12, "step {t}");
        }
    }

    #[test]
    fn schedule_halves() {
        let ms = [400_000, 600_000, 800_000];
        assert_eq!(lr_schedule(0, 4e-4, &ms), 4e-4);
        assert_eq!(lr_schedule(399_999, 4e-4, &ms), 4e-4);
        assert!((lr_schedule(700_000, 4e-4, &ms) - 1e-4).abs() < 1e-18);
        assert!((lr_schedule(900_000, 4e-4, &ms) - 5e-5).abs() < 1e-18);
    }

    #[test]
    fn polyak_cases() {
        let mut avg = scalar_store(5.0);
        let p = scalar_store(1.0);
        polyak_update(&mut avg, &p, 0.0);
        assert_eq!(avg.get("x").unwrap().data(), &[1.0]);

        let mut avg = scalar_store(0.0);
        let seq = [1.0, 2.0, 4.0];
        for &x in &seq {
            polyak_update(&mut avg, &scalar_store(x), 0.5);
        }
        // closed form: sum_k (1-d) d^(n-1-k) x_k
        let closed = 0.5 * (0.25 * 1.0 + 0.5 * 2.0 + 4.0);
        assert_eq!(avg.get("x").unwrap().data(), &[closed]);

        let mut avg = scalar_store(0.3f64);
        let p = scalar_store(0.3f64);
        for _ in 0..100_000 {
            polyak_update(&mut avg, &p, 0.9999);
        }
        assert!((avg.get("x").unwrap().data()[0] - 0.3).abs() < 1e-6);
    }

    fn item(id: &str, frames: usize, dim: usize, hop: usize, speaker: usize) -> TrainItem {
        TrainItem {
            id: id.into(),
            speaker,
            features: FeatureSequence::new(
                (0..frames * dim).map(|i| i as f32).collect(),
                dim,
                100.0,
                FeatureKind::LogMel,
            ),
            levels: (0..frames * hop).map(|i| (i % 256) as u8).collect(),
        }
    }

    fn cfg() -> ModelConfig {
        crate::model::tests::tiny_config(BottleneckMode::Vq)
    }

    #[test]
    fn whole_utterance_segment_every_step() {
        let c = cfg();
        let hop = c.input_hop();
        let s = SegmentSampler::new(vec![item("a", 32, c.input_dim(), hop, 1)], &c, 32 * hop).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..5 {
            let b = s.minibatch(2, &mut rng);
            assert_eq!(b.features.shape(), &[2, 32, c.input_dim()]);
            assert_eq!(b.targets[..32 * hop], s.items()[0].levels.iter().map(|&l| l as usize).collect::<Vec<_>>()[..]);
            assert_eq!(b.speakers, vec![1, 1]);
        }
    }

    #[test]
    fn short_utterances_are_skipped() {
        let c = cfg();
        let hop = c.input_hop();
        let items = vec![item("short", 10, c.input_dim(), hop, 0), item("ok", 40, c.input_dim(), hop, 0)];
        let s = SegmentSampler::new(items, &c, 32 * hop).unwrap();
        assert_eq!(s.items().len(), 1);
        assert!(SegmentSampler::new(vec![item("s", 5, c.input_dim(), hop, 0)], &c, 32 * hop).is_err());
    }

    #[test]
    fn batches_are_deterministic_and_aligned() {
        let c = cfg();
        let hop = c.input_hop();
        let s = SegmentSampler::new(vec![item("a", 60, c.input_dim(), hop, 0)], &c, 32 * hop).unwrap();
        let a = s.minibatch(4, &mut step_rng(7, 3, 0));
        let b = s.minibatch(4, &mut step_rng(7, 3, 0));
        assert_eq!(a.targets, b.targets);
        assert_eq!(a.features, b.features);
        for r in 0..4 {
            let first_frame = a.features.data()[r * 32 * c.input_dim()] as usize / c.input_dim();
            assert_eq!(a.targets[r * 32 * hop], (first_frame * hop) % 256);
        }
    }

    #[test]
    fn start_positions_are_uniform() {
        let c = cfg();
        let hop = c.input_hop();
        let s = SegmentSampler::new(vec![item("a", 51, c.input_dim(), hop, 0)], &c, 32 * hop).unwrap();
        let n_starts = 20;
        assert_eq!(s.n_windows(), n_starts);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut hist = vec![0u64; n_starts as usize];
        let draws = 100_000;
        for (_, st) in s.draw(draws, &mut rng) {
            hist[st] += 1;
        }
        let e = draws as f64 / n_starts as f64;
        let chi2: f64 = hist.iter().map(|&o| (o as f64 - e).powi(2) / e).sum();
        // 19 degrees of freedom, 99.9th percentile 43.8
        assert!(chi2 < 43.8, "chi2 {chi2}");
    }

    fn tiny_state(seed: u64) -> (TrainState, SegmentSampler, TrainConfig) {
        let c = cfg();
        let hop = c.input_hop();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let items = (0..2)
            .map(|i| {
                let mut it = item(&format!("u{i}"), 48, c.input_dim(), hop, i);
                it.features.frames.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
                it
            })
            .collect();
        let s = SegmentSampler::new(items, &c, 32 * hop).unwrap();
        let tc = TrainConfig {
            batch_size: 2,
            segment_samples: 32 * hop,
            base_lr: 1e-3,
            seed,
            ..Default::default()
        };
        (TrainState::new(Model::init(c, seed).unwrap()), s, tc)
    }

    #[test]
    fn single_step_decreases_fixed_batch_loss() {
        let mut failures = 0;
        for seed in 0..10 {
            let (mut st, data, mut tc) = tiny_state(seed);
            tc.jitter_p = 0.0;
            tc.base_lr = 1e-4;
            let batch = data.minibatch(2, &mut step_rng(seed, 0, 0));
            let before = evaluate_batch(&st.model, &batch, &tc).unwrap();
            step_on_batch(&mut st, &batch, &tc, &mut step_rng(seed, 0, 1)).unwrap();
            let after = evaluate_batch(&st.model, &batch, &tc).unwrap();
            if after >= before {
                failures += 1;
            }
        }
        assert!(failures <= 1, "{failures} seeds failed to descend");
    }

    #[test]
    fn training_is_reproducible() {
        let run = || {
            let (mut st, data, tc) = tiny_state(3);
            (0..3)
                .map(|_| train_step(&mut st, &data, &tc).unwrap().csv_row())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let (mut st, data, tc) = tiny_state(1);
        st.model.params.get_mut("wn.out2.b").unwrap().data_mut()[0] = f32::NAN;
        match train_step(&mut st, &data, &tc) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("nll"), "{msg}"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn data_codebook_rows_are_encoder_vectors() {
        let (mut st, data, tc) = tiny_state(4);
        st.model.config.bottleneck.codebook_init = CodebookInit::Data;
        let before = st.model.params.get("bn.codebook").unwrap().clone();
        initialize_from_data(&mut st.model, &data, &tc).unwrap();
        let cb = st.model.params.get("bn.codebook").unwrap().clone();
        assert_ne!(before, cb);
        let rows: Vec<&[f32]> = cb.data().chunks(cb.last_dim()).collect();
        for (i, a) in rows.iter().enumerate() {
            assert!(rows[..i].iter().all(|b| b != a), "duplicate row {i}");
        }
        // some utterance position projects exactly onto a row
        let f = &data.items()[0].features;
        let p_proj = st.model.probe_points(f).unwrap().p_proj;
        let found = p_proj.data().chunks(cb.last_dim()).any(|v| rows.contains(&v));
        let other = data.items().iter().any(|it| {
            let p = st.model.probe_points(&it.features).unwrap().p_proj;
            p.data().chunks(cb.last_dim()).any(|v| rows.iter().any(|r| r.iter().zip(v).all(|(a, b)| (a - b).abs() < 1e-5)))
        });
        assert!(found || other);
        let mut again = TrainState::new(Model::init(st.model.config.clone(), 4).unwrap());
        initialize_from_data(&mut again.model, &data, &tc).unwrap();
        assert_eq!(again.model.params.get("bn.codebook").unwrap(), &cb);
    }

    #[test]
    fn config_validation() {
        let c = cfg();
        let mut tc = TrainConfig {
            segment_samples: 32 * c.input_hop(),
            ..Default::default()
        };
        assert!(tc.validate(&c).is_ok());
        tc.segment_samples += 1;
        assert!(tc.validate(&c).is_err());
        tc.segment_samples -= 1;
        tc.milestones = vec![5, 5];
        assert!(tc.validate(&c).is_err());
    }
}
