//! Verification scoring: cosine trials, EER, MinDCF and DET operating points.

use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pooldec::SpeakerEmbedding;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub target: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTrials {
    pub scores: Vec<f64>,
    pub targets: Vec<bool>,
}

impl ScoredTrials {
    pub fn new(scores: Vec<f64>, targets: Vec<bool>) -> Result<Self> {
        if scores.len() != targets.len() {
            return Err(Error::Shape(format!(
                "{} scores but {} labels",
                scores.len(),
                targets.len()
            )));
        }
        if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::Degenerate(format!("non-finite score {s}")));
        }
        Ok(Self { scores, targets })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn counts(&self) -> Result<(usize, usize)> {
        let n_tar = self.targets.iter().filter(|t| **t).count();
        let n_non = self.targets.len() - n_tar;
        if n_tar == 0 || n_non == 0 {
            return Err(Error::Degenerate(format!(
                "need both target and nontarget trials, got {n_tar} targets and {n_non} nontargets"
            )));
        }
        Ok((n_tar, n_non))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcfConfig {
    pub p_target: f64,
    pub c_fa: f64,
    pub c_miss: f64,
}

impl Default for DcfConfig {
    fn default() -> Self {
        Self {
            p_target: 0.01,
            c_fa: 1.0,
            c_miss: 1.0,
        }
    }
}

impl DcfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_target > 0.0 && self.p_target < 1.0) || !(self.c_fa > 0.0) || !(self.c_miss > 0.0) {
            return Err(Error::Config(format!("invalid detection cost parameters {self:?}")));
        }
        Ok(())
    }
}

/// Dot product of two unit embeddings.
pub fn cosine_score(a: &SpeakerEmbedding, b: &SpeakerEmbedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("embedding dims {} and {} differ", a.dim(), b.dim())));
    }
    let zero = |e: &SpeakerEmbedding| e.as_slice().iter().all(|v| *v == 0.0);
    if zero(a) || zero(b) {
        return Err(Error::Degenerate("cosine score of a zero embedding".into()));
    }
    Ok(a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum())
}

/// Scores every trial against an id → embedding lookup.
pub fn score_trials(trials: &[Trial], store: &HashMap<String, SpeakerEmbedding>) -> Result<ScoredTrials> {
    let lookup = |id: &str| {
        store
            .get(id)
            .ok_or_else(|| Error::Config(format!("no embedding for utterance {id:?}")))
    };
    let mut scores = Vec::with_capacity(trials.len());
    for t in trials {
        scores.push(cosine_score(lookup(&t.enroll)?, lookup(&t.test)?)?);
    }
    ScoredTrials::new(scores, trials.iter().map(|t| t.target).collect())
}

/// One point of the threshold sweep. Trials scoring above `threshold` are
/// accepted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub threshold: f64,
    pub p_fa: f64,
    pub p_miss: f64,
}

/// Thresholds at −∞, every midpoint between distinct sorted scores, and +∞.
pub fn threshold_sweep(st: &ScoredTrials) -> Result<Vec<SweepPoint>> {
    let (n_tar, n_non) = st.counts()?;
    let mut order: Vec<usize> = (0..st.len()).collect();
    order.sort_by(|&a, &b| st.scores[a].total_cmp(&st.scores[b]));
    // Counts of trials at or below the current threshold.
    let (mut tar_below, mut non_below) = (0usize, 0usize);
    let point = |t: f64, tar_below: usize, non_below: usize| SweepPoint {
        threshold: t,
        p_fa: (n_non - non_below) as f64 / n_non as f64,
        p_miss: tar_below as f64 / n_tar as f64,
    };
    let mut points = vec![point(f64::NEG_INFINITY, 0, 0)];
    let mut i = 0;
    while i < order.len() {
        let s = st.scores[order[i]];
        while i < order.len() && st.scores[order[i]] == s {
            if st.targets[order[i]] {
                tar_below += 1;
            } else {
                non_below += 1;
            }
            i += 1;
        }
        let t = if i < order.len() {
            (s + st.scores[order[i]]) / 2.0
        } else {
            f64::INFINITY
        };
        points.push(point(t, tar_below, non_below));
    }
    Ok(points)
}

/// Equal error rate and its threshold, linearly interpolated where the sign
/// of `P_fa − P_miss` changes.
pub fn compute_eer(st: &ScoredTrials) -> Result<(f64, f64)> {
    Ok(eer_from_sweep(&threshold_sweep(st)?))
}

/// Crossing rule shared by every EER estimate in the crate.
pub fn eer_from_sweep(points: &[SweepPoint]) -> (f64, f64) {
    let diff = |p: &SweepPoint| p.p_fa - p.p_miss;
    let i = points
        .iter()
        .position(|p| diff(p) <= 0.0)
        .expect("the +inf threshold always has p_fa - p_miss = -1");
    let cur = points[i];
    if diff(&cur) == 0.0 || i == 0 {
        return (cur.p_fa, cur.threshold);
    }
    let prev = points[i - 1];
    let w = diff(&prev) / (diff(&prev) - diff(&cur));
    let eer = prev.p_fa + w * (cur.p_fa - prev.p_fa);
    let threshold = match (prev.threshold.is_finite(), cur.threshold.is_finite()) {
        (true, true) => prev.threshold + w * (cur.threshold - prev.threshold),
        (true, false) => prev.threshold,
        (false, true) => cur.threshold,
        (false, false) => 0.0,
    };
    (eer, threshold)
}

/// Minimum normalized detection cost over the sweep and its threshold.
pub fn compute_min_dcf(st: &ScoredTrials, cfg: &DcfConfig) -> Result<(f64, f64)> {
    cfg.validate()?;
    Ok(min_dcf_from_sweep(&threshold_sweep(st)?, cfg))
}

pub fn min_dcf_from_sweep(points: &[SweepPoint], cfg: &DcfConfig) -> (f64, f64) {
    let norm = (cfg.c_miss * cfg.p_target).min(cfg.c_fa * (1.0 - cfg.p_target));
    let mut best = (f64::INFINITY, 0.0);
    for p in points {
        let dcf = (cfg.c_miss * cfg.p_target * p.p_miss + cfg.c_fa * (1.0 - cfg.p_target) * p.p_fa) / norm;
        if dcf < best.0 {
            best = (dcf, p.threshold);
        }
    }
    best
}

/// `(P_fa, P_miss)` per sweep threshold, from accept-all to reject-all.
pub fn det_points(st: &ScoredTrials) -> Result<Vec<(f64, f64)>> {
    Ok(threshold_sweep(st)?.into_iter().map(|p| (p.p_fa, p.p_miss)).collect())
}

pub fn det_csv(points: &[(f64, f64)]) -> String {
    let mut s = String::from("p_fa,p_miss\n");
    for (fa, miss) in points {
        s.push_str(&format!("{fa},{miss}\n"));
    }
    s
}

/// Summary numbers for one scored trial list.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerificationSummary {
    pub eer: f64,
    pub eer_threshold: f64,
    pub min_dcf: f64,
    pub min_dcf_threshold: f64,
}

pub fn summarize(st: &ScoredTrials, cfg: &DcfConfig) -> Result<VerificationSummary> {
    cfg.validate()?;
    let sweep = threshold_sweep(st)?;
    let (eer, eer_threshold) = eer_from_sweep(&sweep);
    let (min_dcf, min_dcf_threshold) = min_dcf_from_sweep(&sweep, cfg);
    Ok(VerificationSummary {
        eer,
        eer_threshold,
        min_dcf,
        min_dcf_threshold,
    })
}

/// Draws distinct unordered trial pairs from `(utterance id, speaker)` rows:
/// `n_target` same-speaker pairs followed by `n_nontarget` cross-speaker pairs.
pub fn sample_trials(utterances: &[(String, usize)], n_target: usize, n_nontarget: usize, seed: u64) -> Result<Vec<Trial>> {
    let mut by_speaker: HashMap<usize, Vec<usize>> = HashMap::new();
    for (i, (_, s)) in utterances.iter().enumerate() {
        by_speaker.entry(*s).or_default().push(i);
    }
    let mut speakers: Vec<usize> = by_speaker.keys().copied().collect();
    speakers.sort_unstable();
    let n = utterances.len();
    let target_pairs: usize = by_speaker.values().map(|v| v.len() * v.len().saturating_sub(1) / 2).sum();
    let nontarget_pairs = n * n.saturating_sub(1) / 2 - target_pairs;
    if target_pairs < n_target || nontarget_pairs < n_nontarget {
        return Err(Error::Config(format!(
            "cannot draw {n_target} target / {n_nontarget} nontarget trials from {target_pairs} / {nontarget_pairs} available pairs"
        )));
    }
    let multi: Vec<usize> = speakers.iter().copied().filter(|s| by_speaker[s].len() >= 2).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut trials = Vec::with_capacity(n_target + n_nontarget);
    let mut push = |a: usize, b: usize, target: bool, trials: &mut Vec<Trial>| {
        let key = (a.min(b), a.max(b));
        if a != b && seen.insert(key) {
            trials.push(Trial {
                enroll: utterances[key.0].0.clone(),
                test: utterances[key.1].0.clone(),
                target,
            });
        }
    };
    while trials.len() < n_target {
        let members = &by_speaker[&multi[rng.random_range(0..multi.len())]];
        let (a, b) = (rng.random_range(0..members.len()), rng.random_range(0..members.len()));
        push(members[a], members[b], true, &mut trials);
    }
    while trials.len() < n_target + n_nontarget {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        if utterances[a].1 != utterances[b].1 {
            push(a, b, false, &mut trials);
        }
    }
    Ok(trials)
}
