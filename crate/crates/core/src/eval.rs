//! Acoustic-unit evaluation: phone alignments, token to phone mapping,
//! framewise accuracy, DTW and minimal-pair ABX.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::audio::FeatureSequence;
use crate::error::{Error, Result};

/// Frame rate of alignment labels.
pub const LABEL_RATE: f64 = 100.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub start: f64,
    pub dur: f64,
    pub phone: String,
}

impl Segment {
    pub fn end(&self) -> f64 {
        self.start + self.dur
    }
}

/// Sorted, non-overlapping phone segments of one utterance.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AlignmentTrack {
    pub segments: Vec<Segment>,
}

const TIME_EPS: f64 = 1e-9;

impl AlignmentTrack {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        for (i, s) in segments.iter().enumerate() {
            if !(s.start >= 0.0 && s.dur > 0.0) || s.phone.is_empty() || s.phone.contains(char::is_whitespace) {
                return Err(Error::Data(format!("alignment segment {i} is invalid: {s:?}")));
            }
            if i > 0 && s.start < segments[i - 1].end() - TIME_EPS {
                return Err(Error::Data(format!("alignment segment {i} overlaps or is unsorted")));
            }
        }
        Ok(Self { segments })
    }

    /// Parses `start<TAB>dur<TAB>phone` lines; blank lines are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut segs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(Error::Data(format!("alignment line {}: expected 3 tab-separated fields", n + 1)));
            }
            let num = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Data(format!("alignment line {}: bad number {s:?}", n + 1)))
            };
            segs.push(Segment {
                start: num(f[0])?,
                dur: num(f[1])?,
                phone: f[2].trim().to_string(),
            });
        }
        Self::new(segs)
    }

    pub fn to_tsv(&self) -> String {
        self.segments
            .iter()
            .map(|s| format!("{}\t{}\t{}\n", s.start, s.dur, s.phone))
            .collect()
    }

    pub fn end(&self) -> f64 {
        self.segments.last().map_or(0.0, Segment::end)
    }

    /// Label of every frame at `rate`, by the segment containing the frame
    /// center. Frames start at 0 and cover the whole track.
    pub fn frame_labels(&self, rate: f64) -> Vec<Option<&str>> {
        let n = (self.end() * rate + TIME_EPS).floor() as usize;
        let mut out = Vec::with_capacity(n);
        let mut k = 0;
        for i in 0..n {
            let c = (i as f64 + 0.5) / rate;
            while k < self.segments.len() && self.segments[k].end() <= c {
                k += 1;
            }
            out.push(match self.segments.get(k) {
                Some(s) if s.start <= c => Some(s.phone.as_str()),
                _ => None,
            });
        }
        out
    }

    /// Consecutive phone triples with their time span.
    pub fn three_phone_windows(&self) -> Vec<([&str; 3], f64, f64)> {
        self.segments
            .windows(3)
            .map(|w| ([w[0].phone.as_str(), w[1].phone.as_str(), w[2].phone.as_str()], w[0].start, w[2].end()))
            .collect()
    }
}

/// Frames of a sequence at `rate` whose centers fall in `[start, end)`.
pub fn frame_span(start: f64, end: f64, rate: f64, n_frames: usize) -> (usize, usize) {
    let lo = ((start * rate - 0.5).ceil().max(0.0) as usize).min(n_frames);
    let hi = ((end * rate - 0.5).ceil().max(0.0) as usize).min(n_frames);
    (lo, hi.max(lo))
}

/// One utterance's token stream against its alignment.
#[derive(Clone, Copy, Debug)]
pub struct TokenUtterance<'a> {
    pub tokens: &'a [usize],
    pub alignment: &'a AlignmentTrack,
}

/// Pairs each label frame with the token covering it; a token is held for
/// `frames_per_token` label frames.
fn token_frames<'a>(u: &TokenUtterance<'a>, frames_per_token: usize) -> impl Iterator<Item = (usize, &'a str)> + 'a {
    let tokens = u.tokens;
    u.alignment
        .frame_labels(LABEL_RATE)
        .into_iter()
        .enumerate()
        .filter_map(move |(i, l)| Some((*tokens.get(i / frames_per_token)?, l?)))
}

/// Token id to majority phone, fitted on co-occurrence counts.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMap {
    pub phones: Vec<String>,
    /// `counts[token][phone]` over the fitting data.
    pub counts: BTreeMap<usize, Vec<u64>>,
    pub map: BTreeMap<usize, usize>,
    /// Globally most frequent phone, used for unseen tokens.
    pub fallback: usize,
}

impl TokenMap {
    pub fn fit(utts: &[TokenUtterance], frames_per_token: usize) -> Result<Self> {
        if frames_per_token == 0 {
            return Err(Error::InvalidArgument("frames_per_token must be positive".into()));
        }
        let phones: Vec<String> = utts
            .iter()
            .flat_map(|u| u.alignment.segments.iter().map(|s| s.phone.clone()))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let index: BTreeMap<&str, usize> = phones.iter().enumerate().map(|(i, p)| (p.as_str(), i)).collect();
        let mut counts: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
        let mut totals = vec![0u64; phones.len()];
        for u in utts {
            for (tok, ph) in token_frames(u, frames_per_token) {
                let p = index[ph];
                counts.entry(tok).or_insert_with(|| vec![0; phones.len()])[p] += 1;
                totals[p] += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Data("token map needs at least one labelled frame".into()));
        }
        let fallback = argmax_first(&totals);
        let map = counts.iter().map(|(&k, c)| (k, argmax_first(c))).collect();
        Ok(Self {
            phones,
            counts,
            map,
            fallback,
        })
    }

    pub fn predict(&self, token: usize) -> &str {
        &self.phones[*self.map.get(&token).unwrap_or(&self.fallback)]
    }

    /// `token,phone,count` rows of the fitted map.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("token,phone,frames\n");
        for (&k, &p) in &self.map {
            s.push_str(&format!("{k},{},{}\n", self.phones[p], self.counts[&k][p]));
        }
        s
    }
}

fn argmax_first(v: &[u64]) -> usize {
    let mut best = 0;
    for (i, &c) in v.iter().enumerate() {
        if c > v[best] {
            best = i;
        }
    }
    best
}

/// Correct and total labelled frames under `map`.
pub fn framewise_counts(utts: &[TokenUtterance], map: &TokenMap, frames_per_token: usize) -> (u64, u64) {
    let (mut ok, mut n) = (0, 0);
    for u in utts {
        for (tok, ph) in token_frames(u, frames_per_token) {
            n += 1;
            ok += (map.predict(tok) == ph) as u64;
        }
    }
    (ok, n)
}

pub fn framewise_accuracy(utts: &[TokenUtterance], map: &TokenMap, frames_per_token: usize) -> Result<f64> {
    let (ok, n) = framewise_counts(utts, map, frames_per_token);
    if n == 0 {
        return Err(Error::Data("no labelled frames to score".into()));
    }
    Ok(ok as f64 / n as f64)
}

/// `arccos(cosine) / pi`; 0.5 against a zero vector, 0 between two.
pub fn angular_distance(a: &[f32], b: &[f32]) -> f64 {
    // rounding in the cosine would otherwise leave ~1e-8 for equal vectors
    if a == b {
        return 0.0;
    }
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    match (aa > 0.0, bb > 0.0) {
        (false, false) => 0.0,
        (true, true) => (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0).acos() / std::f64::consts::PI,
        _ => 0.5,
    }
}

/// Minimum over monotone paths (steps (1,0), (0,1), (1,1)) of the mean
/// frame distance along the path.
pub fn dtw_distance(a: &FeatureSequence, b: &FeatureSequence) -> Result<f64> {
    dtw_with(a, b, angular_distance)
}

pub fn dtw_with(a: &FeatureSequence, b: &FeatureSequence, metric: impl Fn(&[f32], &[f32]) -> f64) -> Result<f64> {
    let (n, m) = (a.n_frames(), b.n_frames());
    if n == 0 || m == 0 {
        return Err(Error::InvalidArgument("dtw needs nonempty sequences".into()));
    }
    if a.dim != b.dim {
        return Err(Error::InvalidArgument(format!("dtw dimension mismatch {} vs {}", a.dim, b.dim)));
    }
    let d: Vec<f64> = (0..n)
        .flat_map(|i| (0..m).map(move |j| (i, j)))
        .map(|(i, j)| metric(a.frame(i), b.frame(j)))
        .collect();
    // best[i][j][len - 1]: least sum over paths to (i, j) of `len` cells
    let max_len = n + m - 1;
    let inf = f64::INFINITY;
    let mut best = vec![inf; n * m * max_len];
    let at = |i: usize, j: usize, l: usize| (i * m + j) * max_len + l;
    best[at(0, 0, 0)] = d[0];
    for i in 0..n {
        for j in 0..m {
            if i == 0 && j == 0 {
                continue;
            }
            let here = d[i * m + j];
            let lo = i.max(j);
            for l in lo..=(i + j) {
                let mut prev = inf;
                if l > 0 {
                    if i > 0 {
                        prev = prev.min(best[at(i - 1, j, l - 1)]);
                    }
                    if j > 0 {
                        prev = prev.min(best[at(i, j - 1, l - 1)]);
                    }
                    if i > 0 && j > 0 {
                        prev = prev.min(best[at(i - 1, j - 1, l - 1)]);
                    }
                }
                best[at(i, j, l)] = prev + here;
            }
        }
    }
    let end = (0..max_len)
        .map(|l| best[at(n - 1, m - 1, l)] / (l + 1) as f64)
        .fold(inf, f64::min);
    Ok(end)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Condition {
    Within,
    Across,
}

impl Condition {
    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Within => "within",
            Condition::Across => "across",
        }
    }
}

/// A three-phone excerpt of one utterance.
#[derive(Clone, Debug)]
pub struct AbxItem {
    pub speaker: usize,
    pub utterance: usize,
    pub triple: [String; 3],
    pub features: FeatureSequence,
}

/// Indices into the item list plus the cell it is scored in.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AbxTriplet {
    pub a: usize,
    pub b: usize,
    pub x: usize,
    /// Center phone of A and X, then of B.
    pub cell: (String, String),
    pub condition: Condition,
}

/// Excerpts of every consecutive phone triple of `track` from `seq`.
pub fn slice_items(
    seq: &FeatureSequence,
    track: &AlignmentTrack,
    speaker: usize,
    utterance: usize,
) -> Vec<AbxItem> {
    track
        .three_phone_windows()
        .into_iter()
        .filter_map(|(t, s, e)| {
            let (lo, hi) = frame_span(s, e, seq.frame_rate, seq.n_frames());
            (hi > lo).then(|| AbxItem {
                speaker,
                utterance,
                triple: t.map(String::from),
                features: seq.slice(lo, hi),
            })
        })
        .collect()
}

/// Minimal-pair triplets: A and X share a triple, B differs only in the
/// center phone. Within: all three from one speaker. Across: A and B from
/// one speaker, X from another. At most `max_per_cell` per (cell,
/// condition), chosen by `rng`.
pub fn build_triplets(items: &[AbxItem], max_per_cell: usize, rng: &mut impl Rng) -> Vec<AbxTriplet> {
    // (left, right, speaker) -> center -> item indices
    let mut groups: BTreeMap<(&str, &str, usize), BTreeMap<&str, Vec<usize>>> = BTreeMap::new();
    for (i, it) in items.iter().enumerate() {
        groups
            .entry((&it.triple[0], &it.triple[2], it.speaker))
            .or_default()
            .entry(&it.triple[1])
            .or_default()
            .push(i);
    }
    // (a center, b center, condition) -> (a, b, x) item indices
    type Cells = BTreeMap<(String, String, Condition), Vec<(usize, usize, usize)>>;
    let mut cells = Cells::new();
    for (&(l, r, spk), centers) in &groups {
        for (&ca, as_) in centers {
            for (&cb, bs) in centers {
                if ca == cb {
                    continue;
                }
                let key = |c| (ca.to_string(), cb.to_string(), c);
                for &a in as_ {
                    for &b in bs {
                        for &x in as_ {
                            if x != a && items[x].utterance != items[a].utterance {
                                cells.entry(key(Condition::Within)).or_default().push((a, b, x));
                            }
                        }
                    }
                }
                for (&(l2, r2, spk2), centers2) in groups.range((l, r, 0)..=(l, r, usize::MAX)) {
                    debug_assert!(l2 == l && r2 == r);
                    if spk2 == spk {
                        continue;
                    }
                    let Some(xs) = centers2.get(ca) else { continue };
                    for &a in as_ {
                        for &b in bs {
                            for &x in xs {
                                cells.entry(key(Condition::Across)).or_default().push((a, b, x));
                            }
                        }
                    }
                }
            }
        }
    }
    let mut out = Vec::new();
    for ((ca, cb, cond), mut v) in cells {
        if v.len() > max_per_cell {
            v.shuffle(rng);
            v.truncate(max_per_cell);
            v.sort_unstable();
        }
        out.extend(v.into_iter().map(|(a, b, x)| AbxTriplet {
            a,
            b,
            x,
            cell: (ca.clone(), cb.clone()),
            condition: cond,
        }));
    }
    out
}

/// 1 if A is farther from X than B, 0.5 on a tie, else 0.
pub fn triplet_error(d_ax: f64, d_bx: f64) -> f64 {
    if d_ax > d_bx {
        1.0
    } else if d_ax == d_bx {
        0.5
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AbxCell {
    pub cell: String,
    pub condition: Condition,
    pub n: usize,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AbxReport {
    pub cells: Vec<AbxCell>,
}

impl AbxReport {
    /// Aggregates `(cell, condition, d_ax, d_bx)` records: mean per cell.
    pub fn from_scores(scores: &[(String, Condition, f64, f64)]) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Data("ABX needs at least one triplet".into()));
        }
        let mut acc: BTreeMap<(Condition, &str), (usize, f64)> = BTreeMap::new();
        for (cell, cond, dax, dbx) in scores {
            let e = acc.entry((*cond, cell.as_str())).or_default();
            e.0 += 1;
            e.1 += triplet_error(*dax, *dbx);
        }
        Ok(Self {
            cells: acc
                .into_iter()
                .map(|((condition, cell), (n, s))| AbxCell {
                    cell: cell.to_string(),
                    condition,
                    n,
                    error: s / n as f64,
                })
                .collect(),
        })
    }

    /// Unweighted mean over cells, optionally of one condition.
    pub fn mean_error(&self, condition: Option<Condition>) -> Option<f64> {
        let v: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| condition.is_none_or(|k| c.condition == k))
            .map(|c| c.error)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// `cell,condition,n,error` rows followed by per-condition and overall
    /// means (cell `mean`, n = triplets).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("cell,condition,n,error\n");
        for c in &self.cells {
            s.push_str(&format!("{},{},{},{}\n", c.cell, c.condition.as_str(), c.n, c.error));
        }
        for cond in [Condition::Within, Condition::Across] {
            if let Some(m) = self.mean_error(Some(cond)) {
                let n: usize = self.cells.iter().filter(|c| c.condition == cond).map(|c| c.n).sum();
                s.push_str(&format!("mean,{},{n},{m}\n", cond.as_str()));
            }
        }
        if let Some(m) = self.mean_error(None) {
            let n: usize = self.cells.iter().map(|c| c.n).sum();
            s.push_str(&format!("mean,all,{n},{m}\n"));
        }
        s
    }
}

/// Scores every triplet with DTW on the items' features.
pub fn abx_score(items: &[AbxItem], triplets: &[AbxTriplet]) -> Result<AbxReport> {
    let mut scores = Vec::with_capacity(triplets.len());
    for t in triplets {
        let x = &items[t.x].features;
        let dax = dtw_distance(&items[t.a].features, x)?;
        let dbx = dtw_distance(&items[t.b].features, x)?;
        scores.push((format!("{}:{}", t.cell.0, t.cell.1), t.condition, dax, dbx));
    }
    AbxReport::from_scores(&scores)
}
