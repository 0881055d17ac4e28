//! Diarization error rate with boundary collars, optional overlap exclusion
//! and an optimal one-to-one speaker mapping.

use std::collections::BTreeSet;

use crate::error::{Error, Result};

/// A speaker-labelled time interval in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
    pub speaker: String,
}

impl Segment {
    pub fn new(start: f64, end: f64, speaker: impl Into<String>) -> Self {
        Self {
            start,
            end,
            speaker: speaker.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerConfig {
    /// Half-width in seconds of the unscored zone around each reference
    /// segment boundary.
    pub collar: f64,
    /// Skip time where the reference has two or more active speakers.
    pub ignore_overlap: bool,
}

impl Default for DerConfig {
    fn default() -> Self {
        Self {
            collar: 0.25,
            ignore_overlap: true,
        }
    }
}

/// Error components in seconds of scored reference speech.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerResult {
    pub der: f64,
    pub missed: f64,
    pub false_alarm: f64,
    pub confusion: f64,
    pub scored: f64,
}

impl DerResult {
    /// Time-weighted sum of several sessions.
    pub fn combine(parts: &[DerResult]) -> Option<DerResult> {
        let sum = |f: fn(&DerResult) -> f64| parts.iter().map(f).sum::<f64>();
        let scored = sum(|r| r.scored);
        if scored <= 0.0 {
            return None;
        }
        let (missed, false_alarm, confusion) = (sum(|r| r.missed), sum(|r| r.false_alarm), sum(|r| r.confusion));
        Some(DerResult {
            der: (missed + false_alarm + confusion) / scored,
            missed,
            false_alarm,
            confusion,
            scored,
        })
    }
}

fn speaker_index(names: &mut Vec<String>, name: &str) -> usize {
    names.iter().position(|n| n == name).unwrap_or_else(|| {
        names.push(name.to_string());
        names.len() - 1
    })
}

/// Scored elementary interval: duration plus active speaker indices.
struct Piece {
    dur: f64,
    refs: Vec<usize>,
    hyps: Vec<usize>,
}

pub fn compute_der(reference: &[Segment], hypothesis: &[Segment], cfg: &DerConfig) -> Result<DerResult> {
    if reference.is_empty() {
        return Err(Error::Degenerate("empty reference".into()));
    }
    if !(cfg.collar >= 0.0) {
        return Err(Error::Config(format!("collar {} must be non-negative", cfg.collar)));
    }
    for s in reference.iter().chain(hypothesis) {
        if !(s.end >= s.start) || !s.start.is_finite() || !s.end.is_finite() {
            return Err(Error::Config(format!("invalid segment [{}, {}]", s.start, s.end)));
        }
    }
    let mut ref_names = Vec::new();
    let mut hyp_names = Vec::new();
    let refs: Vec<(f64, f64, usize)> = reference
        .iter()
        .map(|s| (s.start, s.end, speaker_index(&mut ref_names, &s.speaker)))
        .collect();
    let hyps: Vec<(f64, f64, usize)> = hypothesis
        .iter()
        .map(|s| (s.start, s.end, speaker_index(&mut hyp_names, &s.speaker)))
        .collect();

    let ref_edges: Vec<f64> = refs.iter().flat_map(|r| [r.0, r.1]).collect();
    let mut cuts: Vec<f64> = ref_edges.clone();
    cuts.extend(hyps.iter().flat_map(|h| [h.0, h.1]));
    if cfg.collar > 0.0 {
        cuts.extend(ref_edges.iter().flat_map(|e| [e - cfg.collar, e + cfg.collar]));
    }
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();

    let active = |segs: &[(f64, f64, usize)], t: f64| -> Vec<usize> {
        segs.iter()
            .filter(|s| s.0 <= t && t < s.1)
            .map(|s| s.2)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    };
    let mut pieces = Vec::new();
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b <= a {
            continue;
        }
        let mid = 0.5 * (a + b);
        if cfg.collar > 0.0 && ref_edges.iter().any(|e| (mid - e).abs() < cfg.collar) {
            continue;
        }
        let r = active(&refs, mid);
        if cfg.ignore_overlap && r.len() >= 2 {
            continue;
        }
        let h = active(&hyps, mid);
        if r.is_empty() && h.is_empty() {
            continue;
        }
        pieces.push(Piece { dur: b - a, refs: r, hyps: h });
    }

    let mut overlap = vec![vec![0.0; hyp_names.len()]; ref_names.len()];
    for p in &pieces {
        for &r in &p.refs {
            for &h in &p.hyps {
                overlap[r][h] += p.dur;
            }
        }
    }
    let mapping = optimal_mapping(&overlap);

    let (mut scored, mut missed, mut fa, mut conf) = (0.0, 0.0, 0.0, 0.0);
    for p in &pieces {
        let (nr, nh) = (p.refs.len(), p.hyps.len());
        scored += p.dur * nr as f64;
        missed += p.dur * nr.saturating_sub(nh) as f64;
        fa += p.dur * nh.saturating_sub(nr) as f64;
        let correct = p
            .refs
            .iter()
            .filter(|&&r| mapping[r].is_some_and(|h| p.hyps.contains(&h)))
            .count();
        conf += p.dur * (nr.min(nh) - correct) as f64;
    }
    if scored <= 0.0 {
        return Err(Error::Degenerate("no reference speech remains after collar and overlap exclusion".into()));
    }
    Ok(DerResult {
        der: (missed + fa + conf) / scored,
        missed,
        false_alarm: fa,
        confusion: conf,
        scored,
    })
}

/// Maximum-weight one-to-one assignment of rows (reference speakers) to
/// columns (hypothesis speakers). Exhaustive search up to ten speakers on
/// the larger side, Hungarian algorithm beyond.
pub fn optimal_mapping(weights: &[Vec<f64>]) -> Vec<Option<usize>> {
    let rows = weights.len();
    let cols = weights.first().map_or(0, Vec::len);
    let m = rows.max(cols);
    if m == 0 {
        return vec![None; rows];
    }
    let w = |r: usize, c: usize| if r < rows && c < cols { weights[r][c] } else { 0.0 };
    let perm = if m <= 10 {
        exhaustive_assignment(m, &w)
    } else {
        let max = (0..m).flat_map(|r| (0..m).map(move |c| (r, c))).map(|(r, c)| w(r, c)).fold(0.0, f64::max);
        let cost: Vec<Vec<f64>> = (0..m).map(|r| (0..m).map(|c| max - w(r, c)).collect()).collect();
        hungarian(&cost)
    };
    (0..rows)
        .map(|r| {
            let c = perm[r];
            (c < cols && w(r, c) > 0.0).then_some(c)
        })
        .collect()
}

fn exhaustive_assignment(m: usize, w: &dyn Fn(usize, usize) -> f64) -> Vec<usize> {
    fn dfs(
        r: usize,
        m: usize,
        w: &dyn Fn(usize, usize) -> f64,
        used: &mut [bool],
        cur: &mut Vec<usize>,
        acc: f64,
        best: &mut (f64, Vec<usize>),
    ) {
        if r == m {
            if acc > best.0 {
                *best = (acc, cur.clone());
            }
            return;
        }
        for c in 0..m {
            if !used[c] {
                used[c] = true;
                cur.push(c);
                dfs(r + 1, m, w, used, cur, acc + w(r, c), best);
                cur.pop();
                used[c] = false;
            }
        }
    }
    let mut best = (f64::NEG_INFINITY, Vec::new());
    dfs(0, m, w, &mut vec![false; m], &mut Vec::with_capacity(m), 0.0, &mut best);
    best.1
}

/// Minimum-cost perfect matching on a square cost matrix (potential-based
/// Hungarian method). Returns the column assigned to each row.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}
