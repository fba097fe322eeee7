//! Two-stage selector training.
//!
//! Stage 1 alternates instruction-following (next-token cross-entropy) and
//! importance-score (BCE) batches while training the projector, score query
//! and score head. Stage 2 trains the score task alone and adds the LoRA
//! adapters.

mod adam;
mod schedule;

pub use adam::Adam;
pub use schedule::{lr_at, warmup_steps, Schedule};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::frame_model::TokenGrid;
use crate::selector::{
    self, backward_into, forward_with_mode, instruction_loss, ForwardMode, Gradients, LoraAdapters, QuestionTokens,
    SelectorParams, Stage, Trainables,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Instruction,
    Score,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub schedule: Schedule,
    pub epochs: usize,
    pub seed: u64,
    /// Stage 1 round-robin pattern, one entry per step.
    pub task_mix: Vec<TaskKind>,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    #[serde(default)]
    pub exec: Exec,
}

impl TrainConfig {
    pub fn stage1() -> Self {
        TrainConfig {
            stage: Stage::One,
            batch_size: 8,
            peak_lr: 1e-3,
            warmup_fraction: 0.03,
            schedule: Schedule::ConstantAfterWarmup,
            epochs: 2,
            seed: 0,
            task_mix: vec![TaskKind::Instruction, TaskKind::Score],
            grad_clip: Some(1.0),
            lora_rank: 4,
            lora_alpha: 8.0,
            exec: Exec::default(),
        }
    }

    pub fn stage2() -> Self {
        TrainConfig {
            stage: Stage::Two,
            peak_lr: 2e-4,
            schedule: Schedule::Cosine,
            epochs: 5,
            task_mix: vec![TaskKind::Score],
            ..Self::stage1()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return Err(Error::config("peak_lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::config("warmup_fraction must lie in [0, 1)"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.task_mix.is_empty() {
            return Err(Error::config("task_mix must not be empty"));
        }
        if self.stage == Stage::Two && self.task_mix.iter().any(|&t| t != TaskKind::Score) {
            return Err(Error::config("stage 2 trains the score task only"));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::config("grad_clip must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreExample {
    pub frames: Vec<TokenGrid>,
    pub question: QuestionTokens,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstructionExample {
    pub frames: Vec<TokenGrid>,
    pub question: QuestionTokens,
    pub response: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainData {
    pub score: Vec<ScoreExample>,
    pub instruction: Vec<InstructionExample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub epoch: usize,
    pub task: TaskKind,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Owns the weights and optimizer state for one stage.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub params: SelectorParams,
    pub adapters: Option<LoraAdapters>,
    trainables: Trainables,
    optim: Adam,
    step: usize,
    total_steps: usize,
    epoch: usize,
}

impl Trainer {
    /// Stage 2 creates identity adapters when none are supplied.
    pub fn new(config: TrainConfig, params: SelectorParams, adapters: Option<LoraAdapters>, data: &TrainData) -> Result<Self> {
        config.validate()?;
        let trainables = Trainables { stage: config.stage };
        let adapters = match (config.stage, adapters) {
            (Stage::One, a) => a,
            (Stage::Two, Some(a)) => Some(a),
            (Stage::Two, None) => {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x10_4a);
                Some(LoraAdapters::init(&params.config, config.lora_rank, config.lora_alpha, &mut rng)?)
            }
        };
        let total_steps = config.epochs * steps_per_epoch(&config, data)?;
        let optim = Adam::new(&params, adapters.as_ref());
        Ok(Trainer {
            config,
            params,
            adapters,
            trainables,
            optim,
            step: 0,
            total_steps,
            epoch: 0,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn trainables(&self) -> Trainables {
        self.trainables
    }

    /// Runs one epoch and returns one report per optimizer step.
    pub fn run_epoch(&mut self, data: &TrainData) -> Result<Vec<LossReport>> {
        let steps = steps_per_epoch(&self.config, data)?;
        let bs = self.config.batch_size;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_mul(0x9e37_79b9).wrapping_add(self.epoch as u64));
        let mut score_order: Vec<usize> = (0..data.score.len()).collect();
        let mut instr_order: Vec<usize> = (0..data.instruction.len()).collect();
        score_order.shuffle(&mut rng);
        instr_order.shuffle(&mut rng);
        let (mut si, mut ii) = (0usize, 0usize);
        let mut reports = Vec::with_capacity(steps);
        for s in 0..steps {
            let task = self.config.task_mix[s % self.config.task_mix.len()];
            let (order, cursor) = match task {
                TaskKind::Score => (&score_order, &mut si),
                TaskKind::Instruction => (&instr_order, &mut ii),
            };
            let batch: Vec<usize> = (0..bs).map(|j| order[(*cursor + j) % order.len()]).collect();
            *cursor += bs;
            reports.push(self.train_step(data, task, &batch)?);
        }
        self.epoch += 1;
        Ok(reports)
    }

    /// One optimizer step on the given example indices.
    pub fn train_step(&mut self, data: &TrainData, task: TaskKind, batch: &[usize]) -> Result<LossReport> {
        let lr = lr_at(
            self.step,
            self.total_steps,
            self.config.peak_lr,
            self.config.warmup_fraction,
            self.config.schedule,
        );
        let scope = self.trainables.grad_scope();
        let params = &self.params;
        let adapters = self.adapters.as_ref();
        let per_example: Vec<Result<(f64, Gradients)>> = self.config.exec.map(batch, |&i| {
            let mut g = Gradients::zeros(params, adapters);
            let loss = match task {
                TaskKind::Score => {
                    let ex = &data.score[i];
                    let trace = forward_with_mode(params, &ex.frames, &ex.question, adapters, ForwardMode::ScoreOnly)?;
                    backward_into(&trace, params, adapters, &ex.target, scope, &mut g)?
                }
                TaskKind::Instruction => {
                    let ex = &data.instruction[i];
                    instruction_loss(params, &ex.frames, &ex.question, &ex.response, adapters, scope, Some(&mut g))?
                }
            };
            Ok((loss, g))
        });
        let mut total = Gradients::zeros(params, adapters);
        let mut loss = 0.0;
        let scale = 1.0 / batch.len() as f64;
        for r in per_example {
            let (l, g) = r.map_err(|e| self.tag_step(e))?;
            loss += l * scale;
            total.add_scaled(&g, scale);
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                detail: format!("{task:?} batch loss {loss}"),
            });
        }
        let grad_norm = trainable_norm(&total, self.trainables);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                detail: format!("{task:?} gradient norm {grad_norm}"),
            });
        }
        if let Some(clip) = self.config.grad_clip {
            if grad_norm > clip {
                let mut scaled = Gradients::zeros(&self.params, self.adapters.as_ref());
                scaled.add_scaled(&total, clip / grad_norm);
                total = scaled;
            }
        }
        self.optim
            .step(&mut self.params, self.adapters.as_mut(), &total, self.trainables, lr);
        let report = LossReport {
            step: self.step,
            epoch: self.epoch,
            task,
            loss,
            lr,
            grad_norm,
        };
        log::debug!("step {} {:?} loss {:.5} lr {:.2e}", report.step, task, loss, lr);
        self.step += 1;
        Ok(report)
    }

    fn tag_step(&self, e: Error) -> Error {
        match e {
            Error::NonFinite { detail, .. } => Error::NonFinite { step: self.step, detail },
            other => other,
        }
    }
}

fn steps_per_epoch(config: &TrainConfig, data: &TrainData) -> Result<usize> {
    if data.score.is_empty() {
        return Err(Error::domain("training needs at least one score example"));
    }
    let wants_instr = config.task_mix.contains(&TaskKind::Instruction);
    if wants_instr && data.instruction.is_empty() {
        return Err(Error::domain("task mix includes instruction batches but no instruction data"));
    }
    let score_batches = data.score.len().div_ceil(config.batch_size);
    let score_per_cycle = config.task_mix.iter().filter(|&&t| t == TaskKind::Score).count();
    if score_per_cycle == 0 {
        return Err(Error::config("task_mix must include the score task"));
    }
    // enough full cycles to visit every score batch once
    let cycles = score_batches.div_ceil(score_per_cycle);
    Ok(cycles * config.task_mix.len())
}

fn trainable_norm(g: &Gradients, trainables: Trainables) -> f64 {
    g.tensors()
        .iter()
        .filter(|(n, _)| trainables.contains(n))
        .map(|(_, t)| t.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// SHA-256 over every tensor outside `trainables`, for freeze checks.
pub fn frozen_digest(params: &SelectorParams, adapters: Option<&LoraAdapters>, trainables: Trainables) -> String {
    let mut bytes = Vec::new();
    let mut tensors = params.tensors();
    if let Some(a) = adapters {
        tensors.extend(a.tensors());
    }
    for (name, t) in tensors {
        if trainables.contains(&name) {
            continue;
        }
        bytes.extend_from_slice(name.as_bytes());
        for v in t.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    selector::checkpoint::hex_digest(&bytes)
}

/// Stage 1 epoch on a fresh trainer.
pub fn stage1_epoch(params: SelectorParams, data: &TrainData, config: &TrainConfig) -> Result<(SelectorParams, Vec<LossReport>)> {
    if config.stage != Stage::One {
        return Err(Error::config("stage1_epoch needs a stage 1 config"));
    }
    let mut t = Trainer::new(config.clone(), params, None, data)?;
    let reports = t.run_epoch(data)?;
    Ok((t.params, reports))
}

/// Stage 2 epoch on a fresh trainer.
pub fn stage2_epoch(
    params: SelectorParams,
    adapters: Option<LoraAdapters>,
    data: &TrainData,
    config: &TrainConfig,
) -> Result<(SelectorParams, LoraAdapters, Vec<LossReport>)> {
    if config.stage != Stage::Two {
        return Err(Error::config("stage2_epoch needs a stage 2 config"));
    }
    let mut t = Trainer::new(config.clone(), params, adapters, data)?;
    let reports = t.run_epoch(data)?;
    let adapters = t.adapters.take().expect("stage 2 trainer has adapters");
    Ok((t.params, adapters, reports))
}
