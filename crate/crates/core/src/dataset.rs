//! Dataset records: one (video, question) pair per line, with frames either
//! regenerated from a synthetic seed or read from a fixture feature file.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{gen_task, gen_tasks, SyntheticConfig, SyntheticTask};
use crate::exec::Exec;
use crate::frame_model::fixture::{read_features, FeatureRecord};
use crate::frame_model::{pad_and_pool, plan_uniform_frames};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FrameSource {
    /// Task `index` of the synthetic stream seeded with `seed`.
    Synthetic { seed: u64, index: usize },
    /// A feature file; relative paths resolve against the dataset file.
    Fixture { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub video_id: String,
    pub question_id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub options: Vec<String>,
    pub source: FrameSource,
    /// Candidate frames per task.
    pub n: usize,
    /// Ground-truth candidate indices, when known for a fixture.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub key_set: Vec<usize>,
}

impl DatasetRecord {
    pub fn from_task(task: &SyntheticTask, seed: u64, index: usize) -> Self {
        DatasetRecord {
            video_id: task.video_id.clone(),
            question_id: task.question_id.clone(),
            question: task.question.clone(),
            answer: None,
            options: Vec::new(),
            source: FrameSource::Synthetic { seed, index },
            n: task.n(),
            key_set: Vec::new(),
        }
    }
}

/// Question ids must be unique and every `n` positive.
pub fn validate_dataset(records: &[DatasetRecord]) -> Result<()> {
    let mut seen = HashSet::new();
    for r in records {
        if !seen.insert(r.question_id.as_str()) {
            return Err(Error::domain(format!("duplicate question id {}", r.question_id)));
        }
        if r.n == 0 {
            return Err(Error::domain(format!("{} asks for zero frames", r.question_id)));
        }
        if let Some(&i) = r.key_set.iter().find(|&&i| i >= r.n) {
            return Err(Error::domain(format!("{} has key frame {i} outside 0..{}", r.question_id, r.n)));
        }
    }
    Ok(())
}

pub fn synthetic_dataset(count: usize, cfg: &SyntheticConfig, seed: u64, exec: Exec) -> Result<Vec<DatasetRecord>> {
    Ok(gen_tasks(count, cfg, seed, exec)?
        .iter()
        .enumerate()
        .map(|(i, t)| DatasetRecord::from_task(t, seed, i))
        .collect())
}

/// Candidate grids for every record, pooled to `side`. Synthetic sources
/// are regenerated and checked against the record; fixture frames are
/// sub-sampled uniformly from the file's frames for that video.
pub fn materialize(
    records: &[DatasetRecord],
    synthetic: &SyntheticConfig,
    side: usize,
    base: &Path,
    exec: Exec,
) -> Result<Vec<SyntheticTask>> {
    validate_dataset(records)?;
    let mut fixtures: BTreeMap<PathBuf, Vec<FeatureRecord>> = BTreeMap::new();
    for r in records {
        if let FrameSource::Fixture { path } = &r.source {
            let full = base.join(path);
            if !fixtures.contains_key(&full) {
                let feats = read_features(&full)?;
                fixtures.insert(full, feats);
            }
        }
    }
    exec.map(records, |r| match &r.source {
        FrameSource::Synthetic { seed, index } => {
            if r.n != synthetic.n {
                return Err(Error::domain(format!(
                    "{} wants {} frames but the synthetic config makes {}",
                    r.question_id, r.n, synthetic.n
                )));
            }
            let task = gen_task(synthetic, *seed, *index)?;
            if task.question_id != r.question_id || task.question != r.question {
                return Err(Error::domain(format!(
                    "{} does not match synthetic task {index} of seed {seed}",
                    r.question_id
                )));
            }
            Ok(task)
        }
        FrameSource::Fixture { path } => {
            fixture_task(r, &fixtures[&base.join(path)], side)
        }
    })
    .into_iter()
    .collect()
}

fn fixture_task(r: &DatasetRecord, feats: &[FeatureRecord], side: usize) -> Result<SyntheticTask> {
    let mut own: Vec<&FeatureRecord> = feats.iter().filter(|f| f.video_id == r.video_id).collect();
    if own.is_empty() {
        return Err(Error::domain(format!("fixture has no frames for video {}", r.video_id)));
    }
    own.sort_by_key(|f| f.frame_index);
    let plan = plan_uniform_frames(own.len(), r.n)?;
    let frames = plan
        .indices
        .iter()
        .map(|&i| pad_and_pool(&own[i].to_grid()?, side))
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticTask {
        video_id: r.video_id.clone(),
        question_id: r.question_id.clone(),
        question: r.question.clone(),
        frames,
        key_set: r.key_set.clone(),
        noise: 0.0,
    })
}
