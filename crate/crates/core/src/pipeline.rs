//! End-to-end glue: label synthetic tasks through a backend, turn labels
//! into training data, and run both training stages.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::SyntheticTask;
use crate::exec::Exec;
use crate::frame_model::FramePlan;
use crate::pseudo_label::{
    binarize_temporal, caption_frames_with, normalize_spatial, prompts::CAPTION_PROMPT, spatial_label_frames, temporal_rank, ChatBackend,
    FrameInput, ImagePayload, PseudoLabelRecord, SpatialLabelRaw, TemporalLabel,
};
use crate::selection::ImportanceVector;
use crate::selector::{LoraAdapters, SelectorParams, Tokenizer};
use crate::training::{InstructionExample, LossReport, ScoreExample, TrainConfig, TrainData, Trainer};

pub fn frame_inputs(task: &SyntheticTask) -> Vec<FrameInput> {
    task.frames
        .iter()
        .map(|g| FrameInput {
            video_id: task.video_id.clone(),
            frame_index: g.frame_index,
            image: ImagePayload::from_grid(g),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialRecord {
    pub video_id: String,
    pub question_id: String,
    pub frames: Vec<SpatialLabelRaw>,
    /// Max-normalised scores.
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalRecord {
    pub video_id: String,
    pub question_id: String,
    pub n: usize,
    pub label: TemporalLabel,
    pub reply: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub video_id: String,
    pub captions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub video_id: String,
    #[serde(flatten)]
    pub plan: FramePlan,
}

/// Importance scores for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub video_id: String,
    pub question_id: String,
    #[serde(flatten)]
    pub scores: ImportanceVector,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelOptions {
    pub want: usize,
    pub exec: Exec,
    /// Backend requests in flight per task.
    pub limit: usize,
}

impl Default for LabelOptions {
    fn default() -> Self {
        LabelOptions {
            want: crate::pseudo_label::DEFAULT_WANT,
            exec: Exec::Sequential,
            limit: 4,
        }
    }
}

pub fn label_spatial(backend: &dyn ChatBackend, task: &SyntheticTask, opts: LabelOptions) -> Result<SpatialRecord> {
    let frames = spatial_label_frames(backend, &frame_inputs(task), &task.question, opts.exec, opts.limit)?;
    let raw: Vec<f64> = frames.iter().map(SpatialLabelRaw::score).collect();
    Ok(SpatialRecord {
        video_id: task.video_id.clone(),
        question_id: task.question_id.clone(),
        scores: normalize_spatial(&raw)?,
        frames,
    })
}

pub fn label_temporal(
    backend: &dyn ChatBackend,
    task: &SyntheticTask,
    opts: LabelOptions,
) -> Result<(CaptionRecord, TemporalRecord)> {
    let captions = caption_task(backend, task, CAPTION_PROMPT, opts)?;
    let temporal = rank_captions(backend, task, &captions, opts.want)?;
    Ok((captions, temporal))
}

pub fn caption_task(backend: &dyn ChatBackend, task: &SyntheticTask, prompt: &str, opts: LabelOptions) -> Result<CaptionRecord> {
    Ok(CaptionRecord {
        video_id: task.video_id.clone(),
        captions: caption_frames_with(backend, &frame_inputs(task), prompt, opts.exec, opts.limit)?,
    })
}

pub fn rank_captions(backend: &dyn ChatBackend, task: &SyntheticTask, captions: &CaptionRecord, want: usize) -> Result<TemporalRecord> {
    if captions.video_id != task.video_id || captions.captions.len() != task.n() {
        return Err(Error::domain(format!(
            "captions for {} ({} frames) do not fit {} ({} frames)",
            captions.video_id,
            captions.captions.len(),
            task.video_id,
            task.n()
        )));
    }
    let out = temporal_rank(backend, &task.video_id, &captions.captions, &task.question, want)?;
    Ok(TemporalRecord {
        video_id: task.video_id.clone(),
        question_id: task.question_id.clone(),
        n: task.n(),
        label: out.label,
        reply: out.reply,
    })
}

pub fn fuse_records(spatial: &SpatialRecord, temporal: &TemporalRecord) -> Result<PseudoLabelRecord> {
    if spatial.video_id != temporal.video_id || spatial.question_id != temporal.question_id {
        return Err(Error::domain(format!(
            "spatial labels for {}/{} paired with temporal labels for {}/{}",
            spatial.video_id, spatial.question_id, temporal.video_id, temporal.question_id
        )));
    }
    let t = binarize_temporal(&temporal.label, temporal.n);
    PseudoLabelRecord::new(&spatial.video_id, &spatial.question_id, spatial.scores.clone(), t)
}

/// Spatial, temporal and fused labels for every task, tasks in parallel.
pub fn label_tasks(
    backend: &dyn ChatBackend,
    tasks: &[SyntheticTask],
    opts: LabelOptions,
    exec: Exec,
) -> Result<Vec<PseudoLabelRecord>> {
    let per_task = LabelOptions {
        exec: Exec::Sequential,
        ..opts
    };
    exec.map(tasks, |t| {
        let s = label_spatial(backend, t, per_task)?;
        let (_, temporal) = label_temporal(backend, t, per_task)?;
        fuse_records(&s, &temporal)
    })
    .into_iter()
    .collect()
}

/// Reference response for the instruction task: names the frame the fused
/// labels rate highest.
pub fn instruction_response(fused: &[f64]) -> String {
    let best = fused
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
        .0;
    format!("frame {} shows the marked object", best + 1)
}

pub fn build_train_data(tasks: &[SyntheticTask], labels: &[PseudoLabelRecord], params: &SelectorParams) -> Result<TrainData> {
    if tasks.len() != labels.len() {
        return Err(Error::Shape {
            what: "label records",
            expected: tasks.len(),
            got: labels.len(),
        });
    }
    let tok = Tokenizer::new(params.config.vocab);
    let max_text = params.config.max_text;
    let mut data = TrainData::default();
    for (task, label) in tasks.iter().zip(labels) {
        if label.question_id != task.question_id {
            return Err(Error::domain(format!(
                "label {} does not match task {}",
                label.question_id, task.question_id
            )));
        }
        let question = tok.question(&task.question, max_text);
        let mut response = tok.encode(&instruction_response(&label.fused));
        let room = params.config.positions() - task.n() * params.config.tokens_per_frame - question.len();
        response.truncate(room.max(1));
        data.instruction.push(InstructionExample {
            frames: task.frames.clone(),
            question: question.clone(),
            response,
        });
        data.score.push(ScoreExample {
            frames: task.frames.clone(),
            question,
            target: label.fused.clone(),
        });
    }
    Ok(data)
}

pub struct TwoStageOutcome {
    pub params: SelectorParams,
    pub adapters: LoraAdapters,
    pub losses: Vec<LossReport>,
}

pub fn train_two_stage(
    params: SelectorParams,
    data: &TrainData,
    stage1: TrainConfig,
    stage2: TrainConfig,
) -> Result<TwoStageOutcome> {
    let mut losses = Vec::new();
    let mut t1 = Trainer::new(stage1, params, None, data)?;
    for _ in 0..t1.config.epochs {
        let r = t1.run_epoch(data)?;
        if let Some(last) = r.last() {
            log::info!("stage 1 epoch done, last loss {:.4}", last.loss);
        }
        losses.extend(r);
    }
    let mut t2 = Trainer::new(stage2, t1.params, None, data)?;
    for _ in 0..t2.config.epochs {
        let r = t2.run_epoch(data)?;
        if let Some(last) = r.last() {
            log::info!("stage 2 epoch done, last loss {:.4}", last.loss);
        }
        losses.extend(r);
    }
    Ok(TwoStageOutcome {
        adapters: t2.adapters.take().expect("stage 2 has adapters"),
        params: t2.params,
        losses,
    })
}
