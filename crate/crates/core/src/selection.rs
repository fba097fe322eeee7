//! Turning an importance vector into `k` frame indices.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame_model::centered_indices;

/// Marks suppressed frames during Greedy-NMS. Input scores are clamped to
/// `[0, 1]`, so the sentinel never collides with a real score.
const SUPPRESSED: f64 = -1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Selector,
    SpatialLabel,
    TemporalLabel,
    Fused,
    ClipSim,
    Oracle,
    Random,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceVector {
    pub scores: Vec<f64>,
    pub provenance: Provenance,
}

impl ImportanceVector {
    pub fn new(scores: Vec<f64>, provenance: Provenance) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::domain("importance vector is empty"));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::domain(format!("importance score {i} is not finite")));
        }
        Ok(ImportanceVector { scores, provenance })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    NmsGreedy,
    Topk,
    Uniform,
    Random,
}

impl std::str::FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nms-greedy" => Ok(Policy::NmsGreedy),
            "topk" => Ok(Policy::Topk),
            "uniform" => Ok(Policy::Uniform),
            "random" => Ok(Policy::Random),
            other => Err(Error::config(format!(
                "unknown policy {other:?} (expected nms-greedy, topk, uniform or random)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Sorted, distinct candidate indices.
    pub selected: Vec<usize>,
    pub delta: usize,
    pub policy: Policy,
    /// Set when Greedy-NMS ran out of unsuppressed frames and had to fill
    /// from the lowest unselected indices.
    pub fallback: bool,
}

/// Serialized form of a selection, one JSONL line per (video, question).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionReport {
    pub video_id: String,
    pub question_id: String,
    pub policy: Policy,
    pub k: usize,
    pub delta: usize,
    pub selected: Vec<usize>,
    pub fallback: bool,
}

impl SelectionReport {
    pub fn new(video_id: &str, question_id: &str, result: &SelectionResult) -> Self {
        SelectionReport {
            video_id: video_id.to_string(),
            question_id: question_id.to_string(),
            policy: result.policy,
            k: result.selected.len(),
            delta: result.delta,
            selected: result.selected.clone(),
            fallback: result.fallback,
        }
    }
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::domain("k must be at least 1"));
    }
    if k > n {
        return Err(Error::domain(format!("cannot select {k} frames from {n} candidates")));
    }
    Ok(())
}

/// Neighbour gap `floor(n / 4k)`.
pub fn neighbor_gap(n: usize, k: usize) -> usize {
    n / (4 * k)
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn nms_greedy(scores: &ImportanceVector, k: usize) -> Result<SelectionResult> {
    check_k(scores.len(), k)?;
    nms_with_gap(scores, k, neighbor_gap(scores.len(), k))
}

pub(crate) fn nms_with_gap(scores: &ImportanceVector, k: usize, delta: usize) -> Result<SelectionResult> {
    let n = scores.len();
    check_k(n, k)?;
    let mut work: Vec<f64> = scores.scores.iter().map(|s| s.clamp(0.0, 1.0)).collect();
    let mut taken = vec![false; n];
    let mut selected = Vec::with_capacity(k);
    let mut fallback = false;

    for _ in 0..k {
        let best = argmax(&work);
        let pick = if work[best] == SUPPRESSED {
            fallback = true;
            taken.iter().position(|t| !t).expect("k <= n leaves an unselected frame")
        } else {
            best
        };
        taken[pick] = true;
        selected.push(pick);
        let lo = pick.saturating_sub(delta);
        let hi = (pick + delta).min(n - 1);
        work[lo..=hi].iter_mut().for_each(|s| *s = SUPPRESSED);
    }

    selected.sort_unstable();
    Ok(SelectionResult {
        selected,
        delta,
        policy: Policy::NmsGreedy,
        fallback,
    })
}

pub fn topk(scores: &ImportanceVector, k: usize) -> Result<SelectionResult> {
    let n = scores.len();
    check_k(n, k)?;
    let mut order: Vec<usize> = (0..n).collect();
    // stable sort keeps lower indices first among equal scores
    order.sort_by(|&a, &b| scores.scores[b].total_cmp(&scores.scores[a]));
    let mut selected: Vec<usize> = order.into_iter().take(k).collect();
    selected.sort_unstable();
    Ok(SelectionResult {
        selected,
        delta: 0,
        policy: Policy::Topk,
        fallback: false,
    })
}

pub fn uniform_k(n: usize, k: usize) -> Result<SelectionResult> {
    check_k(n, k)?;
    Ok(SelectionResult {
        selected: centered_indices(n, k),
        delta: 0,
        policy: Policy::Uniform,
        fallback: false,
    })
}

pub fn random_k<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<SelectionResult> {
    check_k(n, k)?;
    let mut selected = index::sample(rng, n, k).into_vec();
    selected.sort_unstable();
    Ok(SelectionResult {
        selected,
        delta: 0,
        policy: Policy::Random,
        fallback: false,
    })
}

/// Dispatches on `policy`. `rng` is only drawn from for [`Policy::Random`].
pub fn select<R: Rng + ?Sized>(
    policy: Policy,
    scores: &ImportanceVector,
    k: usize,
    rng: &mut R,
) -> Result<SelectionResult> {
    match policy {
        Policy::NmsGreedy => nms_greedy(scores, k),
        Policy::Topk => topk(scores, k),
        Policy::Uniform => uniform_k(scores.len(), k),
        Policy::Random => random_k(scores.len(), k, rng),
    }
}
