use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{fixture, TokenGrid};
use crate::error::{Error, Result};

/// Interleaved 8-bit RGB pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbFrame {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl RgbFrame {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if data.len() != (width as usize) * (height as usize) * 3 {
            return Err(Error::Shape {
                what: "rgb buffer",
                expected: (width as usize) * (height as usize) * 3,
                got: data.len(),
            });
        }
        Ok(RgbFrame {
            width,
            height,
            data,
        })
    }

    fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width as usize + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

pub struct FrameRef<'a> {
    pub video_id: &'a str,
    pub frame_index: usize,
    pub pixels: Option<&'a RgbFrame>,
}

/// Produces a raw (unpooled) token grid for one frame.
pub trait FeatureExtractor: Send + Sync {
    fn raw_side(&self) -> usize;
    fn dim(&self) -> usize;
    fn extract(&self, frame: &FrameRef<'_>) -> Result<TokenGrid>;
}

const PATCH_STATS: usize = 7;

/// Seeded random-projection patch encoder.
///
/// The frame is cut into `raw_side x raw_side` patches; each patch is
/// summarised by its channel means and deviations, then projected to `dim`
/// features through a fixed Gaussian matrix and squashed with `tanh`.
#[derive(Debug, Clone)]
pub struct PatchEncoder {
    raw_side: usize,
    dim: usize,
    projection: Vec<f64>,
}

impl PatchEncoder {
    pub fn new(raw_side: usize, dim: usize, seed: u64) -> Result<Self> {
        if raw_side == 0 || dim == 0 {
            return Err(Error::config("patch encoder side and dim must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (PATCH_STATS as f64).sqrt();
        let projection = (0..dim * PATCH_STATS)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        Ok(PatchEncoder {
            raw_side,
            dim,
            projection,
        })
    }

    fn patch_stats(frame: &RgbFrame, x0: usize, x1: usize, y0: usize, y1: usize) -> [f64; PATCH_STATS] {
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut count = 0.0;
        for y in y0..y1 {
            for x in x0..x1 {
                let p = frame.pixel(x, y);
                for c in 0..3 {
                    let v = p[c] as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
                count += 1.0;
            }
        }
        let mut out = [0.0; PATCH_STATS];
        for c in 0..3 {
            let mean = sum[c] / count;
            out[c] = mean * 2.0 - 1.0;
            out[3 + c] = (sq[c] / count - mean * mean).max(0.0).sqrt() * 4.0;
        }
        out[6] = 1.0;
        out
    }
}

impl FeatureExtractor for PatchEncoder {
    fn raw_side(&self) -> usize {
        self.raw_side
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, frame: &FrameRef<'_>) -> Result<TokenGrid> {
        let pixels = frame
            .pixels
            .ok_or_else(|| Error::domain("patch encoder needs frame pixels"))?;
        let (w, h) = (pixels.width as usize, pixels.height as usize);
        if w < self.raw_side || h < self.raw_side {
            return Err(Error::domain(format!(
                "frame {w}x{h} is smaller than the {0}x{0} patch grid",
                self.raw_side
            )));
        }
        let side = self.raw_side;
        let mut values = Vec::with_capacity(side * side * self.dim);
        for r in 0..side {
            let (y0, y1) = (r * h / side, (r + 1) * h / side);
            for c in 0..side {
                let (x0, x1) = (c * w / side, (c + 1) * w / side);
                let stats = Self::patch_stats(pixels, x0, x1, y0, y1);
                for row in self.projection.chunks_exact(PATCH_STATS) {
                    let z: f64 = row.iter().zip(&stats).map(|(a, b)| a * b).sum();
                    values.push(z.tanh());
                }
            }
        }
        TokenGrid::new(frame.frame_index, side, self.dim, values)
    }
}

/// Serves precomputed grids from a fixture feature file.
#[derive(Debug, Clone, Default)]
pub struct FixtureExtractor {
    side: usize,
    dim: usize,
    grids: HashMap<(String, usize), TokenGrid>,
}

impl FixtureExtractor {
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_records(fixture::read_features(path)?)
    }

    pub fn from_records(records: Vec<fixture::FeatureRecord>) -> Result<Self> {
        let mut out = FixtureExtractor::default();
        for rec in records {
            let grid = rec.to_grid()?;
            if out.grids.is_empty() {
                out.side = grid.side;
                out.dim = grid.dim;
            } else if grid.side != out.side || grid.dim != out.dim {
                return Err(Error::domain(format!(
                    "fixture grid for {}#{} has shape {}x{}x{}, expected {}x{}x{}",
                    rec.video_id, rec.frame_index, grid.side, grid.side, grid.dim, out.side, out.side, out.dim
                )));
            }
            out.grids.insert((rec.video_id, rec.frame_index), grid);
        }
        Ok(out)
    }
}

impl FeatureExtractor for FixtureExtractor {
    fn raw_side(&self) -> usize {
        self.side
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, frame: &FrameRef<'_>) -> Result<TokenGrid> {
        self.grids
            .get(&(frame.video_id.to_string(), frame.frame_index))
            .cloned()
            .ok_or_else(|| {
                Error::domain(format!(
                    "no fixture features for {}#{}",
                    frame.video_id, frame.frame_index
                ))
            })
    }
}
