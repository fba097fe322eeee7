//! Planted-key synthetic videos.
//!
//! Each task has a static scene (one random vector per raw grid cell), per
//! frame Gaussian noise, and a fixed signal pattern added to every cell of
//! its key frames. Grids are generated at `raw_side` and average-pooled to
//! `side`.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::frame_model::{centered_indices, pool_tokens, TokenGrid};

const QUESTIONS: [&str; 4] = [
    "when does the marked object appear",
    "which moment shows the marked object",
    "at what point is the marked object visible",
    "find the frame where the marked object is shown",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n: usize,
    pub key_count: usize,
    pub noise: f64,
    /// Norm of the planted signal vector.
    pub signal: f64,
    pub scene_scale: f64,
    pub raw_side: usize,
    pub side: usize,
    pub dim: usize,
    pub pattern_seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n: 32,
            key_count: 1,
            noise: 0.5,
            signal: 1.5,
            scene_scale: 1.0,
            raw_side: 6,
            side: 3,
            dim: 16,
            pattern_seed: 0x5eed,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::config("synthetic n must be at least 1"));
        }
        if self.key_count == 0 || self.key_count > self.n {
            return Err(Error::config(format!("key_count must lie in 1..={}", self.n)));
        }
        if self.side == 0 || self.raw_side % self.side != 0 {
            return Err(Error::config("raw_side must be a positive multiple of side"));
        }
        if self.dim == 0 {
            return Err(Error::config("dim must be at least 1"));
        }
        for (name, v) in [("noise", self.noise), ("signal", self.signal), ("scene_scale", self.scene_scale)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    /// The planted signal vector.
    pub fn pattern(&self) -> Vec<f64> {
        signal_pattern(self.pattern_seed, self.dim, self.signal)
    }
}

/// Random direction of norm `strength`, fixed by `seed`.
pub fn signal_pattern(seed: u64, dim: usize, strength: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    v.iter().map(|x| x * strength / norm).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub video_id: String,
    pub question_id: String,
    pub question: String,
    /// Pooled grids, one per candidate frame.
    pub frames: Vec<TokenGrid>,
    /// Ascending.
    pub key_set: Vec<usize>,
    pub noise: f64,
}

impl SyntheticTask {
    pub fn n(&self) -> usize {
        self.frames.len()
    }

    pub fn is_key(&self, i: usize) -> bool {
        self.key_set.binary_search(&i).is_ok()
    }
}

fn task_rng(seed: u64, index: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.wrapping_mul(0x1_0000_0000).wrapping_add(index as u64));
    rng
}

fn normal_vec(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng)).collect()
}

struct Scene {
    cells: Vec<f64>,
}

impl Scene {
    fn new(rng: &mut ChaCha8Rng, cfg: &SyntheticConfig) -> Self {
        Scene {
            cells: normal_vec(rng, cfg.raw_side * cfg.raw_side * cfg.dim, cfg.scene_scale),
        }
    }

    fn frame(&self, cfg: &SyntheticConfig, pattern: &[f64], index: usize, key: bool, rng: &mut ChaCha8Rng) -> Result<TokenGrid> {
        let mut values = self.cells.clone();
        for (i, v) in values.iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(rng);
            *v += cfg.noise * z;
            if key {
                *v += pattern[i % cfg.dim];
            }
        }
        let raw = TokenGrid::new(index, cfg.raw_side, cfg.dim, values)?;
        pool_tokens(&raw, cfg.side)
    }
}

/// `count` reproducible tasks. Task `i` depends only on `(seed, i)`, so the
/// result is the same for any `exec`.
pub fn gen_tasks(count: usize, cfg: &SyntheticConfig, seed: u64, exec: Exec) -> Result<Vec<SyntheticTask>> {
    cfg.validate()?;
    let pattern = cfg.pattern();
    exec.map_indexed(count, |t| build_task(cfg, &pattern, seed, t))
        .into_iter()
        .collect()
}

/// Task `index` of the stream `gen_tasks(_, cfg, seed, _)`.
pub fn gen_task(cfg: &SyntheticConfig, seed: u64, index: usize) -> Result<SyntheticTask> {
    cfg.validate()?;
    build_task(cfg, &cfg.pattern(), seed, index)
}

fn build_task(cfg: &SyntheticConfig, pattern: &[f64], seed: u64, t: usize) -> Result<SyntheticTask> {
    {
        let mut rng = task_rng(seed, t, 1);
        let scene = Scene::new(&mut rng, cfg);
        let mut key_set = index::sample(&mut rng, cfg.n, cfg.key_count).into_vec();
        key_set.sort_unstable();
        let question = QUESTIONS[rng.random_range(0..QUESTIONS.len())].to_string();
        let frames = (0..cfg.n)
            .map(|i| scene.frame(cfg, pattern, i, key_set.binary_search(&i).is_ok(), &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(SyntheticTask {
            video_id: format!("syn-{seed}-{t}"),
            question_id: format!("q-{seed}-{t}"),
            question,
            frames,
            key_set,
            noise: cfg.noise,
        })
    }
}

/// A long synthetic video: one key event covering a run of frames on a
/// timeline of `total_frames`. Frames are materialised on demand, each
/// from its own seed, so every candidate pool sees the same video.
#[derive(Debug, Clone, PartialEq)]
pub struct TimelineTask {
    pub video_id: String,
    pub question: String,
    pub total_frames: usize,
    /// Half-open frame range of the key event.
    pub key_start: usize,
    pub key_end: usize,
    seed: u64,
    index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimelineConfig {
    pub total_frames: usize,
    pub min_event: usize,
    pub max_event: usize,
}

impl Default for TimelineConfig {
    fn default() -> Self {
        TimelineConfig {
            total_frames: 1024,
            min_event: 32,
            max_event: 96,
        }
    }
}

pub fn gen_timelines(count: usize, cfg: &TimelineConfig, seed: u64) -> Result<Vec<TimelineTask>> {
    if cfg.min_event == 0 || cfg.min_event > cfg.max_event || cfg.max_event > cfg.total_frames {
        return Err(Error::config("timeline needs 1 <= min_event <= max_event <= total_frames"));
    }
    Ok((0..count)
        .map(|t| {
            let mut rng = task_rng(seed, t, 2);
            let len = rng.random_range(cfg.min_event..=cfg.max_event);
            let start = rng.random_range(0..=cfg.total_frames - len);
            TimelineTask {
                video_id: format!("tl-{seed}-{t}"),
                question: QUESTIONS[t % QUESTIONS.len()].to_string(),
                total_frames: cfg.total_frames,
                key_start: start,
                key_end: start + len,
                seed,
                index: t,
            }
        })
        .collect())
}

impl TimelineTask {
    pub fn is_key_frame(&self, frame: usize) -> bool {
        (self.key_start..self.key_end).contains(&frame)
    }

    /// Subsamples `n` candidates with the centered uniform plan.
    pub fn candidates(&self, n: usize, cfg: &SyntheticConfig) -> Result<SyntheticTask> {
        cfg.validate()?;
        let plan = centered_indices(self.total_frames, n);
        let pattern = cfg.pattern();
        let scene = Scene::new(&mut task_rng(self.seed, self.index, 3), cfg);
        let mut frames = Vec::with_capacity(n);
        let mut key_set = Vec::new();
        for (j, &f) in plan.iter().enumerate() {
            let mut rng = task_rng(self.seed ^ f as u64, self.index, 4);
            let key = self.is_key_frame(f);
            if key {
                key_set.push(j);
            }
            frames.push(scene.frame(cfg, &pattern, j, key, &mut rng)?);
        }
        Ok(SyntheticTask {
            video_id: self.video_id.clone(),
            question_id: format!("{}-n{n}", self.video_id),
            question: self.question.clone(),
            frames,
            key_set,
            noise: cfg.noise,
        })
    }
}
