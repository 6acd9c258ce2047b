//! Frozen-representation probes: one-hidden-layer MLPs predicting gender,
//! speaker, framewise phone and log-mel frames from each probe point.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::FeatureSequence;
use crate::error::{Error, Result};
use crate::eval::{AlignmentTrack, LABEL_RATE};
use crate::model::ProbeOutputs;
use crate::numerics::{Graph, Tensor};
use crate::params::ParamStore;
use crate::training::{adam_step, AdamState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbePoint {
    PEnc,
    PProj,
    PBn,
    PCond,
}

impl ProbePoint {
    pub const ALL: [ProbePoint; 4] = [ProbePoint::PEnc, ProbePoint::PProj, ProbePoint::PBn, ProbePoint::PCond];

    pub fn as_str(self) -> &'static str {
        match self {
            ProbePoint::PEnc => "p_enc",
            ProbePoint::PProj => "p_proj",
            ProbePoint::PBn => "p_bn",
            ProbePoint::PCond => "p_cond",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown probe point {s:?}")))
    }

    pub fn select(self, out: &ProbeOutputs) -> &Tensor<f32> {
        match self {
            ProbePoint::PEnc => &out.p_enc,
            ProbePoint::PProj => &out.p_proj,
            ProbePoint::PBn => &out.p_bn,
            ProbePoint::PCond => &out.p_cond,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ProbeTask {
    Gender,
    Speaker,
    Phoneme,
    Filterbank,
}

impl ProbeTask {
    pub const ALL: [ProbeTask; 4] = [ProbeTask::Gender, ProbeTask::Speaker, ProbeTask::Phoneme, ProbeTask::Filterbank];

    pub fn as_str(self) -> &'static str {
        match self {
            ProbeTask::Gender => "gender",
            ProbeTask::Speaker => "speaker",
            ProbeTask::Phoneme => "phoneme",
            ProbeTask::Filterbank => "filterbank",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Latent steps averaged into one speaker or gender example; `None`
    /// uses the training segment length.
    pub pool_steps: Option<usize>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            steps: 10_000,
            lr: 1e-3,
            batch_size: 128,
            pool_steps: None,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.steps == 0 || self.batch_size == 0 || self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::Config("probe hidden, steps, batch_size and lr must be positive".into()));
        }
        if self.pool_steps == Some(0) {
            return Err(Error::Config("probe pool_steps must be positive".into()));
        }
        Ok(())
    }
}

/// Supervision for a set of examples.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// `slots` labels per example, `None` where unlabelled.
    Classes {
        labels: Vec<Option<usize>>,
        slots: usize,
        n_classes: usize,
    },
    /// `dim` real values per example.
    Values { values: Vec<f32>, dim: usize },
}

impl Targets {
    fn out_dim(&self) -> usize {
        match self {
            Targets::Classes { slots, n_classes, .. } => slots * n_classes,
            Targets::Values { dim, .. } => *dim,
        }
    }

    fn n_examples(&self) -> usize {
        match self {
            Targets::Classes { labels, slots, .. } => labels.len() / slots,
            Targets::Values { values, dim } => values.len() / dim,
        }
    }

    pub fn metric_name(&self) -> &'static str {
        match self {
            Targets::Classes { .. } => "accuracy",
            Targets::Values { .. } => "mse",
        }
    }
}

/// A trained probe with its input standardization.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub params: ParamStore<f32>,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

fn standardizer(x: &[f32], dim: usize) -> (Vec<f32>, Vec<f32>) {
    let n = (x.len() / dim) as f64;
    let mut m = vec![0.0f64; dim];
    let mut q = vec![0.0f64; dim];
    for row in x.chunks(dim) {
        for (j, &v) in row.iter().enumerate() {
            m[j] += v as f64 / n;
            q[j] += (v as f64).powi(2) / n;
        }
    }
    let std = m
        .iter()
        .zip(&q)
        .map(|(&m, &q)| ((q - m * m).max(0.0).sqrt().max(1e-6)) as f32)
        .collect();
    (m.into_iter().map(|v| v as f32).collect(), std)
}

impl Mlp {
    fn standardize(&self, x: &[f32]) -> Vec<f32> {
        let d = self.mean.len();
        x.chunks(d)
            .flat_map(|row| row.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s))
            .collect()
    }

    fn forward(&self, g: &mut Graph<f32>, train: bool, x: Vec<f32>, n: usize) -> Result<(crate::params::Bound, crate::numerics::Var)> {
        let p = self.params.bind(g, train);
        let x = g.constant(Tensor::new([n, self.mean.len()], x)?);
        let h = g.matmul(x, p.var("w1")?)?;
        let h = g.add_bias(h, p.var("b1")?)?;
        let h = g.relu(h);
        let y = g.matmul(h, p.var("w2")?)?;
        let y = g.add_bias(y, p.var("b2")?)?;
        Ok((p, y))
    }

    /// Raw outputs `[n, out]` for standardized-on-the-fly inputs.
    pub fn predict(&self, x: &[f32]) -> Result<Tensor<f32>> {
        let n = x.len() / self.mean.len();
        let mut g = Graph::new();
        let (_, y) = self.forward(&mut g, false, self.standardize(x), n)?;
        Ok(g.value(y).clone())
    }
}

fn batch_loss(g: &mut Graph<f32>, y: crate::numerics::Var, targets: &Targets, idx: &[usize]) -> Result<Option<crate::numerics::Var>> {
    match targets {
        Targets::Classes {
            labels,
            slots,
            n_classes,
        } => {
            let flat = g.reshape(y, [idx.len() * slots, *n_classes])?;
            let mut rows = Vec::new();
            let mut ys = Vec::new();
            for (b, &i) in idx.iter().enumerate() {
                for s in 0..*slots {
                    if let Some(l) = labels[i * slots + s] {
                        rows.push(b * slots + s);
                        ys.push(l);
                    }
                }
            }
            if rows.is_empty() {
                return Ok(None);
            }
            let picked = g.embedding(flat, &rows)?;
            g.softmax_cross_entropy(picked, &ys).map(Some)
        }
        Targets::Values { values, dim } => {
            let t: Vec<f32> = idx.iter().flat_map(|&i| values[i * dim..(i + 1) * dim].iter().copied()).collect();
            let t = g.constant(Tensor::new([idx.len(), *dim], t)?);
            let d = g.sub(y, t)?;
            let s = g.sum_squares(d);
            Ok(Some(g.scale(s, 1.0 / (idx.len() * dim) as f32)))
        }
    }
}

/// Trains an MLP probe on `x` (`n x dim`, row-major) with Adam.
pub fn train_probe(x: &[f32], dim: usize, targets: &Targets, cfg: &ProbeConfig, seed: u64) -> Result<Mlp> {
    cfg.validate()?;
    let n = targets.n_examples();
    if n == 0 || x.len() != n * dim {
        return Err(Error::Data(format!("probe has {} inputs for {n} targets", x.len() / dim.max(1))));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mean, std) = standardizer(x, dim);
    let mut params = ParamStore::new();
    params.init_uniform(&mut rng, "w1", &[dim, cfg.hidden], dim, 2f64.sqrt());
    params.init_zeros("b1", &[cfg.hidden]);
    params.init_uniform(&mut rng, "w2", &[cfg.hidden, targets.out_dim()], cfg.hidden, 1.0);
    params.init_zeros("b2", &[targets.out_dim()]);
    let mut mlp = Mlp { params, mean, std };
    let xs = mlp.standardize(x);
    let mut adam = AdamState::new(&mlp.params);
    let bs = cfg.batch_size.min(n);
    for _ in 0..cfg.steps {
        let idx: Vec<usize> = (0..bs).map(|_| rng.gen_range(0..n)).collect();
        let xb: Vec<f32> = idx.iter().flat_map(|&i| xs[i * dim..(i + 1) * dim].iter().copied()).collect();
        let mut g = Graph::new();
        let (p, y) = mlp.forward(&mut g, true, xb, bs)?;
        let Some(loss) = batch_loss(&mut g, y, targets, &idx)? else {
            continue;
        };
        let lv = g.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::Numeric(format!("probe loss is {lv}")));
        }
        let mut grads = g.backward_leaves(loss)?;
        let per: Vec<Option<Tensor<f32>>> = p
            .vars()
            .iter()
            .map(|&v| grads.get(v).is_some().then(|| grads.take(v)))
            .collect();
        adam_step(&mut mlp.params, &per, &mut adam, cfg.lr)?;
    }
    Ok(mlp)
}

/// Accuracy over labelled slots, or mean squared error per value.
pub fn evaluate_probe(mlp: &Mlp, x: &[f32], targets: &Targets) -> Result<(f64, usize)> {
    let y = mlp.predict(x)?;
    match targets {
        Targets::Classes {
            labels,
            slots,
            n_classes,
        } => {
            let (mut ok, mut tot) = (0usize, 0usize);
            for (k, l) in labels.iter().enumerate() {
                let Some(l) = l else { continue };
                let (i, s) = (k / slots, k % slots);
                let row = &y.row(i)[s * n_classes..(s + 1) * n_classes];
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                ok += (best == *l) as usize;
                tot += 1;
            }
            if tot == 0 {
                return Err(Error::Data("no labelled probe examples".into()));
            }
            Ok((ok as f64 / tot as f64, tot))
        }
        Targets::Values { values, .. } => {
            let se: f64 = y
                .data()
                .iter()
                .zip(values)
                .map(|(&a, &b)| ((a - b) as f64).powi(2))
                .sum();
            Ok((se / values.len() as f64, targets.n_examples()))
        }
    }
}

/// One training utterance seen through the frozen model.
#[derive(Clone, Debug)]
pub struct ProbeUtterance {
    pub outputs: ProbeOutputs,
    pub speaker: usize,
    pub gender: usize,
    pub alignment: Option<AlignmentTrack>,
    /// Standardized log-mel frames at the label rate.
    pub log_mel: FeatureSequence,
}

/// Label frames per latent step; must be an integer.
pub fn frames_per_latent(latent_rate: f64) -> Result<usize> {
    let r = LABEL_RATE / latent_rate;
    if (r - r.round()).abs() > 1e-9 || r < 1.0 {
        return Err(Error::Config(format!(
            "label rate {LABEL_RATE} Hz is not a multiple of the latent rate {latent_rate} Hz"
        )));
    }
    Ok(r.round() as usize)
}

/// Inputs and targets of one (point, task) cell.
#[derive(Clone, Debug)]
pub struct ProbeSet {
    pub x: Vec<f32>,
    pub dim: usize,
    pub targets: Targets,
    /// Utterances left out for missing supervision.
    pub skipped: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn build_probe_set(
    utts: &[ProbeUtterance],
    point: ProbePoint,
    task: ProbeTask,
    r: usize,
    pool_steps: usize,
    n_speakers: usize,
    n_genders: usize,
    phones: &[String],
) -> Result<ProbeSet> {
    let dim = utts
        .first()
        .map(|u| point.select(&u.outputs).last_dim())
        .ok_or_else(|| Error::Data("no probe utterances".into()))?;
    let mut x = Vec::new();
    let mut labels = Vec::new();
    let mut values = Vec::new();
    let mut skipped = 0;
    for u in utts {
        let rep = point.select(&u.outputs);
        let t = rep.shape()[0];
        match task {
            ProbeTask::Gender | ProbeTask::Speaker => {
                let label = if task == ProbeTask::Gender { u.gender } else { u.speaker };
                let w = pool_steps.min(t).max(1);
                for k in 0..(t / w).max(1) {
                    let mut avg = vec![0.0f32; dim];
                    for s in k * w..(k + 1) * w {
                        for (a, v) in avg.iter_mut().zip(rep.row(s)) {
                            *a += v / w as f32;
                        }
                    }
                    x.extend(avg);
                    labels.push(Some(label));
                }
            }
            ProbeTask::Phoneme => {
                let Some(ali) = &u.alignment else {
                    skipped += 1;
                    continue;
                };
                let frame_labels = ali.frame_labels(LABEL_RATE);
                for s in 0..t {
                    let slot: Vec<Option<usize>> = (0..r)
                        .map(|j| {
                            frame_labels
                                .get(s * r + j)
                                .copied()
                                .flatten()
                                .and_then(|p| phones.iter().position(|q| q == p))
                        })
                        .collect();
                    if slot.iter().all(Option::is_none) {
                        continue;
                    }
                    x.extend_from_slice(rep.row(s));
                    labels.extend(slot);
                }
            }
            ProbeTask::Filterbank => {
                let n_mels = u.log_mel.dim;
                for s in 0..t {
                    if (s + 1) * r > u.log_mel.n_frames() {
                        break;
                    }
                    x.extend_from_slice(rep.row(s));
                    values.extend_from_slice(&u.log_mel.frames[s * r * n_mels..(s + 1) * r * n_mels]);
                }
            }
        }
    }
    let targets = match task {
        ProbeTask::Gender => Targets::Classes {
            labels,
            slots: 1,
            n_classes: n_genders,
        },
        ProbeTask::Speaker => Targets::Classes {
            labels,
            slots: 1,
            n_classes: n_speakers,
        },
        ProbeTask::Phoneme => Targets::Classes {
            labels,
            slots: r,
            n_classes: phones.len().max(1),
        },
        ProbeTask::Filterbank => Targets::Values {
            values,
            dim: r * utts[0].log_mel.dim,
        },
    };
    if targets.n_examples() == 0 {
        return Err(Error::Data(format!("no examples for the {} probe", task.as_str())));
    }
    Ok(ProbeSet {
        x,
        dim,
        targets,
        skipped,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeCell {
    pub point: ProbePoint,
    pub task: ProbeTask,
    pub metric: &'static str,
    pub value: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub cells: Vec<ProbeCell>,
}

impl ProbeReport {
    pub fn get(&self, point: ProbePoint, task: ProbeTask) -> Option<&ProbeCell> {
        self.cells.iter().find(|c| c.point == point && c.task == task)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("point,task,metric,value,n\n");
        for c in &self.cells {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                c.point.as_str(),
                c.task.as_str(),
                c.metric,
                c.value,
                c.n
            ));
        }
        s
    }
}

/// The full grid; every cell is trained and scored on the same utterances
/// (training performance). Cell seeds derive from `seed`.
pub fn probe_suite(
    utts: &[ProbeUtterance],
    latent_rate: f64,
    pool_steps: usize,
    n_speakers: usize,
    n_genders: usize,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeReport> {
    let r = frames_per_latent(latent_rate)?;
    let mut phones: Vec<String> = utts
        .iter()
        .filter_map(|u| u.alignment.as_ref())
        .flat_map(|a| a.segments.iter().map(|s| s.phone.clone()))
        .collect();
    phones.sort();
    phones.dedup();
    let mut cells = Vec::new();
    for (pi, point) in ProbePoint::ALL.into_iter().enumerate() {
        for (ti, task) in ProbeTask::ALL.into_iter().enumerate() {
            let set = build_probe_set(utts, point, task, r, pool_steps, n_speakers, n_genders, &phones)?;
            if set.skipped > 0 {
                log::warn!("{} probe skipped {} utterances without alignment", task.as_str(), set.skipped);
            }
            let cell_seed = seed.wrapping_mul(31).wrapping_add((pi * 4 + ti) as u64);
            let mlp = train_probe(&set.x, set.dim, &set.targets, cfg, cell_seed)?;
            let (value, n) = evaluate_probe(&mlp, &set.x, &set.targets)?;
            log::info!("probe {} {}: {value:.4} over {n}", point.as_str(), task.as_str());
            cells.push(ProbeCell {
                point,
                task,
                metric: set.targets.metric_name(),
                value,
                n,
            });
        }
    }
    Ok(ProbeReport { cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::FeatureKind;
    use crate::eval::Segment;

    fn quick() -> ProbeConfig {
        ProbeConfig {
            hidden: 32,
            steps: 300,
            batch_size: 64,
            ..Default::default()
        }
    }

    #[test]
    fn constant_labels_are_learned() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x: Vec<f32> = (0..200 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t = Targets::Classes {
            labels: vec![Some(1); 200],
            slots: 1,
            n_classes: 3,
        };
        let m = train_probe(&x, 3, &t, &quick(), 1).unwrap();
        assert_eq!(evaluate_probe(&m, &x, &t).unwrap(), (1.0, 200));
    }

    #[test]
    fn noise_labels_are_chance_on_held_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 4000;
        let x: Vec<f32> = (0..n * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels: Vec<Option<usize>> = (0..n).map(|_| Some(rng.gen_range(0..2))).collect();
        let (tr, te) = labels.split_at(n / 2);
        let t_tr = Targets::Classes {
            labels: tr.to_vec(),
            slots: 1,
            n_classes: 2,
        };
        let t_te = Targets::Classes {
            labels: te.to_vec(),
            slots: 1,
            n_classes: 2,
        };
        let m = train_probe(&x[..n * 2], 4, &t_tr, &quick(), 2).unwrap();
        let (acc, _) = evaluate_probe(&m, &x[n * 2..], &t_te).unwrap();
        assert!((acc - 0.5).abs() < 0.05, "held-out accuracy {acc}");
    }

    #[test]
    fn regression_probe_fits_linear_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 500;
        let x: Vec<f32> = (0..n * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let values: Vec<f32> = x.chunks(2).map(|r| r[0] - 0.5 * r[1]).collect();
        let t = Targets::Values { values, dim: 1 };
        let cfg = ProbeConfig {
            steps: 1500,
            ..quick()
        };
        let m = train_probe(&x, 2, &t, &cfg, 4).unwrap();
        let (mse, n_out) = evaluate_probe(&m, &x, &t).unwrap();
        assert_eq!(n_out, n);
        assert!(mse < 0.01, "mse {mse}");
    }

    fn utterance(speaker: usize, class_code: &[usize], dim: usize) -> ProbeUtterance {
        // latent rate 25 Hz, r = 4; each latent step encodes its phone one-hot
        let t = class_code.len();
        let mk = |v: Vec<f32>| Tensor::new([t, dim], v).unwrap();
        let one_hot: Vec<f32> = class_code
            .iter()
            .flat_map(|&c| (0..dim).map(move |j| (j == c) as u8 as f32))
            .collect();
        let segs = class_code
            .iter()
            .enumerate()
            .map(|(i, &c)| Segment {
                start: i as f64 * 0.04,
                dur: 0.04,
                phone: format!("p{c}"),
            })
            .collect();
        ProbeUtterance {
            outputs: ProbeOutputs {
                p_enc: mk(one_hot.clone()),
                p_proj: mk(one_hot.clone()),
                p_bn: mk(one_hot.clone()),
                p_cond: mk(one_hot),
                token_ids: None,
            },
            speaker,
            gender: speaker % 2,
            alignment: Some(AlignmentTrack::new(segs).unwrap()),
            log_mel: FeatureSequence::new(vec![0.5; t * 4 * 2], 2, 100.0, FeatureKind::LogMel),
        }
    }

    #[test]
    fn suite_has_sixteen_cells_and_recovers_encoded_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let utts: Vec<ProbeUtterance> = (0..6)
            .map(|i| utterance(i % 3, &(0..20).map(|_| rng.gen_range(0..4)).collect::<Vec<_>>(), 5))
            .collect();
        let rep = probe_suite(&utts, 25.0, 8, 3, 2, &quick(), 7).unwrap();
        assert_eq!(rep.cells.len(), 16);
        assert_eq!(rep.to_csv().lines().count(), 17);
        let ph = rep.get(ProbePoint::PBn, ProbeTask::Phoneme).unwrap();
        assert!(ph.value > 0.95, "phoneme accuracy {}", ph.value);
        assert_eq!(ph.metric, "accuracy");
        assert_eq!(rep.get(ProbePoint::PBn, ProbeTask::Filterbank).unwrap().metric, "mse");
        for c in &rep.cells {
            if c.metric == "accuracy" {
                assert!((0.0..=1.0).contains(&c.value));
            }
        }
        let again = probe_suite(&utts, 25.0, 8, 3, 2, &quick(), 7).unwrap();
        assert_eq!(rep, again);
    }

    #[test]
    fn phoneme_labels_fill_r_slots_per_step() {
        let u = utterance(0, &[0, 1, 2], 3);
        let phones = vec!["p0".to_string(), "p1".into(), "p2".into()];
        let set = build_probe_set(&[u], ProbePoint::PBn, ProbeTask::Phoneme, 4, 8, 1, 1, &phones).unwrap();
        let Targets::Classes { labels, slots, .. } = set.targets else { panic!() };
        assert_eq!(slots, 4);
        assert_eq!(labels.len(), 12);
        assert_eq!(labels[..4], [Some(0); 4]);
        assert_eq!(labels[8..], [Some(2); 4]);
        assert!(frames_per_latent(25.0).unwrap() == 4 && frames_per_latent(30.0).is_err());
    }

    #[test]
    fn missing_alignment_is_skipped_and_counted() {
        let mut u = utterance(0, &[0, 1], 3);
        let v = u.clone();
        u.alignment = None;
        let phones = vec!["p0".to_string(), "p1".into()];
        let set = build_probe_set(&[u, v], ProbePoint::PEnc, ProbeTask::Phoneme, 4, 8, 1, 1, &phones).unwrap();
        assert_eq!(set.skipped, 1);
        assert_eq!(set.targets.n_examples(), 2);
    }
}
