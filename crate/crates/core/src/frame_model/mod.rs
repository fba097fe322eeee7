//! Videos as candidate frame sequences: uniform planning, token grids and
//! spatial pooling.

mod encoder;
pub mod fixture;

pub use encoder::{FeatureExtractor, FixtureExtractor, FrameRef, PatchEncoder, RgbFrame};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Paper-scale candidate pool.
pub const DEFAULT_CANDIDATES: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoMeta {
    pub video_id: String,
    pub total_frames: usize,
    pub fps: f64,
    pub height: u32,
    pub width: u32,
}

impl VideoMeta {
    pub fn new(video_id: impl Into<String>, total_frames: usize, fps: f64) -> Result<Self> {
        let meta = VideoMeta {
            video_id: video_id.into(),
            total_frames,
            fps,
            height: 1,
            width: 1,
        };
        meta.validate()?;
        Ok(meta)
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_frames == 0 {
            return Err(Error::domain("video has zero frames"));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::domain(format!("fps must be positive, got {}", self.fps)));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::domain("frame resolution must be positive"));
        }
        Ok(())
    }

    pub fn duration_seconds(&self) -> f64 {
        self.total_frames as f64 / self.fps
    }
}

/// Candidate frame indices into a video.
///
/// Indices are strictly increasing unless the video is shorter than the
/// requested count, in which case the tail repeats the last frame and
/// `padded` is set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FramePlan {
    pub total_frames: usize,
    pub indices: Vec<usize>,
    pub padded: bool,
}

impl FramePlan {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// `floor((j + 0.5) * total / count)` for `j in 0..count`, clamped to
/// `[0, total - 1]`. Integer arithmetic, so large videos stay exact.
pub fn centered_indices(total: usize, count: usize) -> Vec<usize> {
    let total_u = total as u128;
    let denom = 2 * count as u128;
    (0..count)
        .map(|j| {
            let idx = ((2 * j as u128 + 1) * total_u) / denom;
            (idx as usize).min(total.saturating_sub(1))
        })
        .collect()
}

pub fn plan_uniform(meta: &VideoMeta, n: usize) -> Result<FramePlan> {
    plan_uniform_frames(meta.total_frames, n)
}

pub fn plan_uniform_frames(total_frames: usize, n: usize) -> Result<FramePlan> {
    if n == 0 {
        return Err(Error::domain("candidate count must be at least 1"));
    }
    if total_frames == 0 {
        return Err(Error::domain("video has zero frames"));
    }
    let mut indices = centered_indices(total_frames, n);
    let mut padded = false;
    if total_frames < n {
        indices.dedup();
        let last = *indices.last().expect("non-empty");
        padded = indices.len() < n;
        indices.resize(n, last);
    }
    Ok(FramePlan {
        total_frames,
        indices,
        padded,
    })
}

/// A `side x side` grid of `dim`-dimensional feature vectors, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenGrid {
    pub frame_index: usize,
    pub side: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl TokenGrid {
    pub fn new(frame_index: usize, side: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if side == 0 || dim == 0 {
            return Err(Error::domain("token grid side and dim must be positive"));
        }
        if values.len() != side * side * dim {
            return Err(Error::Shape {
                what: "token grid values",
                expected: side * side * dim,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("token grid contains non-finite values"));
        }
        Ok(TokenGrid {
            frame_index,
            side,
            dim,
            values,
        })
    }

    pub fn constant(frame_index: usize, side: usize, vector: &[f64]) -> Self {
        let values = (0..side * side).flat_map(|_| vector.iter().copied()).collect();
        TokenGrid {
            frame_index,
            side,
            dim: vector.len(),
            values,
        }
    }

    pub fn tokens(&self) -> usize {
        self.side * self.side
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.side + col) * self.dim;
        &self.values[start..start + self.dim]
    }

    /// Mean over all cells, per feature dimension.
    pub fn mean_vector(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for token in self.values.chunks_exact(self.dim) {
            for (o, v) in out.iter_mut().zip(token) {
                *o += v;
            }
        }
        let cells = self.tokens() as f64;
        out.iter_mut().for_each(|o| *o /= cells);
        out
    }
}

/// Average-pools `grid` down to `side x side`. The raw side must be an
/// integer multiple of `side`.
pub fn pool_tokens(grid: &TokenGrid, side: usize) -> Result<TokenGrid> {
    if side == 0 {
        return Err(Error::domain("pooled side must be positive"));
    }
    if grid.side % side != 0 {
        return Err(Error::domain(format!(
            "cannot pool a {0}x{0} grid to {1}x{1}: {0} is not a multiple of {1}",
            grid.side, side
        )));
    }
    let win = grid.side / side;
    let dim = grid.dim;
    let norm = (win * win) as f64;
    let mut values = vec![0.0; side * side * dim];
    for r in 0..side {
        for c in 0..side {
            let out = &mut values[(r * side + c) * dim..(r * side + c + 1) * dim];
            for wr in 0..win {
                for wc in 0..win {
                    let cell = grid.cell(r * win + wr, c * win + wc);
                    for (o, v) in out.iter_mut().zip(cell) {
                        *o += v;
                    }
                }
            }
            out.iter_mut().for_each(|o| *o /= norm);
        }
    }
    Ok(TokenGrid {
        frame_index: grid.frame_index,
        side,
        dim,
        values,
    })
}

/// Edge-replicate pads a grid to `target` side, splitting the padding as
/// evenly as possible (extra row/column at the bottom/right).
pub fn pad_edge(grid: &TokenGrid, target: usize) -> Result<TokenGrid> {
    if target < grid.side {
        return Err(Error::domain(format!(
            "cannot pad a {0}x{0} grid down to {1}x{1}",
            grid.side, target
        )));
    }
    let before = (target - grid.side) / 2;
    let last = grid.side - 1;
    let mut values = Vec::with_capacity(target * target * grid.dim);
    for r in 0..target {
        let src_r = r.saturating_sub(before).min(last);
        for c in 0..target {
            let src_c = c.saturating_sub(before).min(last);
            values.extend_from_slice(grid.cell(src_r, src_c));
        }
    }
    Ok(TokenGrid {
        frame_index: grid.frame_index,
        side: target,
        dim: grid.dim,
        values,
    })
}

/// Pools to `side`, edge-padding first when the raw side is not a multiple
/// (16 -> 18 -> 3x3 with window 6).
pub fn pad_and_pool(grid: &TokenGrid, side: usize) -> Result<TokenGrid> {
    if side == 0 {
        return Err(Error::domain("pooled side must be positive"));
    }
    if grid.side % side == 0 {
        return pool_tokens(grid, side);
    }
    let target = grid.side.div_ceil(side) * side;
    pool_tokens(&pad_edge(grid, target)?, side)
}
