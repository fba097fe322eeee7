//! Synthetic evaluation: hit rate and recall of scorer/policy pairs, pool
//! size sweeps and a modeled downstream accuracy.

mod synthetic;

pub use synthetic::{
    gen_task, gen_tasks, gen_timelines, signal_pattern, SyntheticConfig, SyntheticTask, TimelineConfig, TimelineTask,
};

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::selection::{select, ImportanceVector, Policy, Provenance};
use crate::selector::{forward_with_mode, ForwardMode, LoraAdapters, SelectorParams, Tokenizer};

/// Produces an importance vector for a task.
pub trait Scorer: Sync {
    fn name(&self) -> String;
    fn score(&self, task: &SyntheticTask) -> Result<ImportanceVector>;
}

/// 1 on key frames, 0 elsewhere.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleScorer;

impl Scorer for OracleScorer {
    fn name(&self) -> String {
        "oracle".into()
    }
    fn score(&self, task: &SyntheticTask) -> Result<ImportanceVector> {
        let s = (0..task.n()).map(|i| if task.is_key(i) { 1.0 } else { 0.0 }).collect();
        ImportanceVector::new(s, Provenance::Oracle)
    }
}

/// Uniform noise, seeded per task.
#[derive(Debug, Clone, Copy)]
pub struct RandomScorer {
    pub seed: u64,
}

impl Scorer for RandomScorer {
    fn name(&self) -> String {
        "random".into()
    }
    fn score(&self, task: &SyntheticTask) -> Result<ImportanceVector> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ crate::hash64(task.question_id.as_bytes()));
        let s = (0..task.n()).map(|_| rng.random::<f64>()).collect();
        ImportanceVector::new(s, Provenance::Random)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConstantScorer {
    pub value: f64,
}

impl Scorer for ConstantScorer {
    fn name(&self) -> String {
        "constant".into()
    }
    fn score(&self, task: &SyntheticTask) -> Result<ImportanceVector> {
        ImportanceVector::new(vec![self.value; task.n()], Provenance::Constant)
    }
}

/// Cosine between each frame's mean feature and a reference vector,
/// mapped to `[0, 1]`; a training-free similarity baseline.
#[derive(Debug, Clone)]
pub struct SimilarityScorer {
    pub reference: Vec<f64>,
}

impl Scorer for SimilarityScorer {
    fn name(&self) -> String {
        "clip-sim".into()
    }
    fn score(&self, task: &SyntheticTask) -> Result<ImportanceVector> {
        let rn = self.reference.iter().map(|v| v * v).sum::<f64>().sqrt();
        let s = task
            .frames
            .iter()
            .map(|g| {
                let m = g.mean_vector();
                if m.len() != self.reference.len() {
                    return Err(Error::Shape {
                        what: "reference vector",
                        expected: m.len(),
                        got: self.reference.len(),
                    });
                }
                let mn = m.iter().map(|v| v * v).sum::<f64>().sqrt();
                let dot: f64 = m.iter().zip(&self.reference).map(|(a, b)| a * b).sum();
                Ok(if mn > 0.0 && rn > 0.0 { 0.5 * (1.0 + dot / (mn * rn)) } else { 0.5 })
            })
            .collect::<Result<Vec<_>>>()?;
        ImportanceVector::new(s, Provenance::ClipSim)
    }
}

/// The trained selector.
#[derive(Debug, Clone)]
pub struct SelectorScorer {
    pub params: SelectorParams,
    pub adapters: Option<LoraAdapters>,
    pub tokenizer: Tokenizer,
}

impl SelectorScorer {
    pub fn new(params: SelectorParams, adapters: Option<LoraAdapters>) -> Self {
        let tokenizer = Tokenizer::new(params.config.vocab);
        SelectorScorer {
            params,
            adapters,
            tokenizer,
        }
    }
}

impl Scorer for SelectorScorer {
    fn name(&self) -> String {
        "selector".into()
    }
    fn score(&self, task: &SyntheticTask) -> Result<ImportanceVector> {
        let q = self.tokenizer.question(&task.question, self.params.config.max_text);
        let t = forward_with_mode(&self.params, &task.frames, &q, self.adapters.as_ref(), ForwardMode::ScoreOnly)?;
        ImportanceVector::new(t.scores, Provenance::Selector)
    }
}

/// Stand-in for the frozen downstream video model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DownstreamClient {
    /// Accuracy `a_hit` when any key frame is selected, else `a_miss`.
    ParametricAccuracyModel { a_hit: f64, a_miss: f64 },
    /// A real video QA endpoint speaking the chat-completions protocol.
    HttpVideoqa { http: crate::pseudo_label::HttpConfig },
}

impl DownstreamClient {
    pub fn parametric(a_hit: f64, a_miss: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&a_miss) || !(0.0..=1.0).contains(&a_hit) || a_hit < a_miss {
            return Err(Error::config("parametric downstream needs 0 <= a_miss <= a_hit <= 1"));
        }
        Ok(DownstreamClient::ParametricAccuracyModel { a_hit, a_miss })
    }

    /// Expected accuracy for one task given whether a key frame was hit.
    pub fn modeled_accuracy(&self, hit: bool) -> Option<f64> {
        match *self {
            DownstreamClient::ParametricAccuracyModel { a_hit, a_miss } => Some(if hit { a_hit } else { a_miss }),
            DownstreamClient::HttpVideoqa { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scorer: String,
    pub policy: Policy,
    pub k: usize,
    pub n: usize,
    pub tasks: usize,
    pub hit_rate: f64,
    pub recall: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modeled_accuracy: Option<f64>,
    /// Wall-clock milliseconds per task; left out unless timing is asked
    /// for, so reports stay reproducible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_runtime_ms: Option<f64>,
    /// Fallback selections (suppression ran out of frames).
    pub fallbacks: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub seed: u64,
    pub exec: Exec,
    pub timing: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            seed: 0,
            exec: Exec::default(),
            timing: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskOutcome {
    pub selected: Vec<usize>,
    pub hit: bool,
    pub recall: f64,
    pub fallback: bool,
}

pub fn evaluate_task(task: &SyntheticTask, scorer: &dyn Scorer, policy: Policy, k: usize, seed: u64) -> Result<TaskOutcome> {
    if k == 0 || k > task.n() {
        return Err(Error::domain(format!("k = {k} must lie in 1..={}", task.n())));
    }
    let scores = scorer.score(task)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ crate::hash64(task.question_id.as_bytes()));
    let sel = select(policy, &scores, k, &mut rng)?;
    let found = sel.selected.iter().filter(|&&i| task.is_key(i)).count();
    Ok(TaskOutcome {
        hit: found > 0,
        recall: if task.key_set.is_empty() {
            0.0
        } else {
            found as f64 / task.key_set.len() as f64
        },
        fallback: sel.fallback,
        selected: sel.selected,
    })
}

pub fn evaluate_policy(
    tasks: &[SyntheticTask],
    scorer: &dyn Scorer,
    policy: Policy,
    k: usize,
    downstream: Option<&DownstreamClient>,
    opts: EvalOptions,
) -> Result<EvalReport> {
    let Some(first) = tasks.first() else {
        return Err(Error::domain("evaluation needs at least one task"));
    };
    let n = first.n();
    if let Some(t) = tasks.iter().find(|t| t.n() != n) {
        return Err(Error::domain(format!("task {} has {} frames, expected {n}", t.question_id, t.n())));
    }
    if k == 0 || k > n {
        return Err(Error::domain(format!("k = {k} must lie in 1..={n}")));
    }
    let start = Instant::now();
    let outcomes = opts
        .exec
        .map(tasks, |t| evaluate_task(t, scorer, policy, k, opts.seed))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let elapsed = start.elapsed().as_secs_f64() * 1e3;
    let count = outcomes.len() as f64;
    let hit_rate = outcomes.iter().filter(|o| o.hit).count() as f64 / count;
    let recall = outcomes.iter().map(|o| o.recall).sum::<f64>() / count;
    let modeled_accuracy = match downstream {
        Some(d) => outcomes
            .iter()
            .map(|o| d.modeled_accuracy(o.hit))
            .sum::<Option<f64>>()
            .map(|s| s / count),
        None => None,
    };
    Ok(EvalReport {
        scorer: scorer.name(),
        policy,
        k,
        n,
        tasks: tasks.len(),
        hit_rate,
        recall,
        modeled_accuracy,
        mean_runtime_ms: opts.timing.then_some(elapsed / count),
        fallbacks: outcomes.iter().filter(|o| o.fallback).count(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub reports: Vec<EvalReport>,
    /// Fraction of tasks hit at some pool size but missed at a larger one.
    pub violation_fraction: f64,
    /// Pool sizes the scorer could not take.
    pub skipped: Vec<usize>,
}

/// Hit rate at fixed `k` for each candidate pool drawn from the same
/// timelines. `max_pool` bounds what the scorer accepts.
pub fn sweep_pool_size(
    timelines: &[TimelineTask],
    frames: &SyntheticConfig,
    scorer: &dyn Scorer,
    pools: &[usize],
    k: usize,
    max_pool: Option<usize>,
    opts: EvalOptions,
) -> Result<SweepReport> {
    let mut pools = pools.to_vec();
    pools.sort_unstable();
    pools.dedup();
    let (usable, skipped): (Vec<usize>, Vec<usize>) =
        pools.into_iter().partition(|&n| max_pool.is_none_or(|m| n <= m));
    if usable.is_empty() {
        return Err(Error::domain("no pool size fits the scorer"));
    }
    let mut reports = Vec::new();
    let mut hits: Vec<Vec<bool>> = Vec::new();
    for &n in &usable {
        let start = Instant::now();
        let outcomes = opts
            .exec
            .map(timelines, |tl| {
                let task = tl.candidates(n, frames)?;
                evaluate_task(&task, scorer, Policy::NmsGreedy, k, opts.seed)
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let elapsed = start.elapsed().as_secs_f64() * 1e3;
        let count = outcomes.len().max(1) as f64;
        hits.push(outcomes.iter().map(|o| o.hit).collect());
        reports.push(EvalReport {
            scorer: scorer.name(),
            policy: Policy::NmsGreedy,
            k,
            n,
            tasks: outcomes.len(),
            hit_rate: outcomes.iter().filter(|o| o.hit).count() as f64 / count,
            recall: outcomes.iter().map(|o| o.recall).sum::<f64>() / count,
            modeled_accuracy: None,
            mean_runtime_ms: opts.timing.then_some(elapsed / count),
            fallbacks: outcomes.iter().filter(|o| o.fallback).count(),
        });
    }
    let violations = (0..timelines.len())
        .filter(|&t| (1..hits.len()).any(|p| (0..p).any(|q| hits[q][t] && !hits[p][t])))
        .count();
    Ok(SweepReport {
        reports,
        violation_fraction: violations as f64 / timelines.len().max(1) as f64,
        skipped,
    })
}
