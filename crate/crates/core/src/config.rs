//! Pipeline configuration, read from one TOML file.
//!
//! Every section is optional and falls back to its defaults; unknown keys
//! anywhere are rejected.
//!
//! ```toml
//! seed = 7
//! parallelism = "parallel"
//!
//! [backend]
//! kind = "mock"
//!
//! [selection]
//! k = 4
//! policy = "nms-greedy"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{DownstreamClient, SyntheticConfig, TimelineConfig};
use crate::exec::Exec;
use crate::pseudo_label::{
    prompts::CAPTION_PROMPT, CachedBackend, ChatBackend, HttpBackend, HttpConfig, MockBackend, DEFAULT_WANT,
};
use crate::selection::Policy;
use crate::selector::checkpoint::hex_digest;
use crate::selector::SelectorConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendChoice {
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockConfig {
    pub seed: u64,
    pub threshold: f64,
    pub gain: f64,
    pub jitter: f64,
}

impl Default for MockConfig {
    fn default() -> Self {
        MockConfig {
            seed: 7,
            threshold: 0.5,
            gain: 12.0,
            jitter: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    #[serde(default = "mock_choice")]
    pub kind: BackendChoice,
    #[serde(default)]
    pub mock: MockConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub http: Option<HttpConfig>,
}

fn mock_choice() -> BackendChoice {
    BackendChoice::Mock
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendChoice::Mock,
            mock: MockConfig::default(),
            http: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub k: usize,
    pub policy: Policy,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            k: 4,
            policy: Policy::NmsGreedy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelerConfig {
    /// Frames the temporal prompt asks for.
    pub want: usize,
    pub caption_prompt: String,
    /// Backend requests in flight per video.
    pub limit: usize,
}

impl Default for LabelerConfig {
    fn default() -> Self {
        LabelerConfig {
            want: DEFAULT_WANT,
            caption_prompt: CAPTION_PROMPT.to_string(),
            limit: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            stage1: TrainConfig::stage1(),
            stage2: TrainConfig::stage2(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Append-only backend response cache.
    pub cache: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Never changes results, only how fast they arrive.
    pub parallelism: Exec,
    pub backend: BackendConfig,
    pub selector: SelectorConfig,
    pub selection: SelectionConfig,
    pub labeler: LabelerConfig,
    pub synthetic: SyntheticConfig,
    pub timeline: TimelineConfig,
    pub train: TrainSection,
    pub downstream: DownstreamClient,
    pub paths: PathsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 7,
            parallelism: Exec::default(),
            backend: BackendConfig::default(),
            selector: SelectorConfig::default(),
            selection: SelectionConfig::default(),
            labeler: LabelerConfig::default(),
            synthetic: SyntheticConfig::default(),
            timeline: TimelineConfig::default(),
            train: TrainSection::default(),
            downstream: DownstreamClient::ParametricAccuracyModel { a_hit: 0.9, a_miss: 0.2 },
            paths: PathsConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.selector.validate()?;
        self.synthetic.validate()?;
        self.train.stage1.validate()?;
        self.train.stage2.validate()?;
        if self.train.stage1.stage != crate::selector::Stage::One || self.train.stage2.stage != crate::selector::Stage::Two {
            return Err(Error::config("train.stage1 and train.stage2 must be stages 1 and 2"));
        }
        if self.selection.k == 0 {
            return Err(Error::config("selection.k must be at least 1"));
        }
        if self.labeler.want == 0 || self.labeler.limit == 0 {
            return Err(Error::config("labeler.want and labeler.limit must be at least 1"));
        }
        if self.labeler.caption_prompt.trim().is_empty() {
            return Err(Error::config("labeler.caption_prompt is empty"));
        }
        if let DownstreamClient::ParametricAccuracyModel { a_hit, a_miss } = self.downstream {
            DownstreamClient::parametric(a_hit, a_miss)?;
        }
        if self.backend.kind == BackendChoice::Http && self.backend.http.is_none() {
            return Err(Error::config("backend.kind = \"http\" needs a [backend.http] table"));
        }
        let m = &self.backend.mock;
        if !(m.gain.is_finite() && m.gain > 0.0 && m.jitter.is_finite() && m.jitter >= 0.0 && m.threshold.is_finite()) {
            return Err(Error::config("backend.mock needs positive gain and non-negative jitter"));
        }
        let side = self.pooled_side();
        if self.synthetic.side != side || self.synthetic.dim != self.selector.visual_dim {
            return Err(Error::config(format!(
                "synthetic frames are {0}x{0}x{1} but the selector takes {2}x{2}x{3}",
                self.synthetic.side, self.synthetic.dim, side, self.selector.visual_dim
            )));
        }
        Ok(())
    }

    /// Grid side the selector expects after pooling.
    pub fn pooled_side(&self) -> usize {
        (self.selector.tokens_per_frame as f64).sqrt().round() as usize
    }

    /// Hex SHA-256 of the canonical JSON form. Parallelism is left out since
    /// it does not affect any output.
    pub fn config_hash(&self) -> String {
        let canonical = PipelineConfig {
            parallelism: Exec::Sequential,
            ..self.clone()
        };
        hex_digest(&serde_json::to_vec(&canonical).expect("config serializes"))
    }

    pub fn exec(&self) -> Exec {
        self.parallelism
    }

    pub fn stage_config(&self, stage: u8) -> Result<TrainConfig> {
        let mut c = match stage {
            1 => self.train.stage1.clone(),
            2 => self.train.stage2.clone(),
            other => return Err(Error::config(format!("stage must be 1 or 2, got {other}"))),
        };
        c.exec = self.parallelism;
        Ok(c)
    }

    pub fn mock_backend(&self) -> Result<MockBackend> {
        let m = &self.backend.mock;
        let mut b = MockBackend::new(m.seed, self.synthetic.pattern())?;
        b.threshold = m.threshold;
        b.gain = m.gain;
        b.jitter = m.jitter;
        Ok(b)
    }

    /// The configured backend, behind the response cache when one is set.
    pub fn backend(&self) -> Result<Box<dyn ChatBackend>> {
        let inner: Box<dyn ChatBackend> = match self.backend.kind {
            BackendChoice::Mock => Box::new(self.mock_backend()?),
            BackendChoice::Http => {
                let http = self.backend.http.clone().expect("validated");
                Box::new(HttpBackend::new(http)?)
            }
        };
        Ok(match &self.paths.cache {
            Some(p) => Box::new(CachedBackend::open(inner, p)?),
            None => inner,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(PipelineConfig::from_toml("").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["sed = 1", "[selection]\nkk = 3", "[backend.mock]\nseeds = 2", "[train.stage1]\nfoo = 1"] {
            let err = PipelineConfig::from_toml(text).unwrap_err();
            assert!(err.is_config(), "{text}: {err}");
        }
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg = PipelineConfig::from_toml("seed = 3\n[selection]\nk = 8\n[synthetic]\nnoise = 0.1").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.selection.k, 8);
        assert_eq!(cfg.selection.policy, Policy::NmsGreedy);
        assert_eq!(cfg.synthetic.noise, 0.1);
        assert_eq!(cfg.synthetic.n, 32);
    }

    #[test]
    fn toml_roundtrip_and_hash() {
        let cfg = PipelineConfig::default();
        let back = PipelineConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.config_hash(), cfg.config_hash());
        let seq = PipelineConfig {
            parallelism: Exec::Sequential,
            ..cfg.clone()
        };
        assert_eq!(seq.config_hash(), cfg.config_hash());
        let other = PipelineConfig { seed: 8, ..cfg.clone() };
        assert_ne!(other.config_hash(), cfg.config_hash());
    }

    #[test]
    fn inconsistent_shapes_are_config_errors() {
        assert!(PipelineConfig::from_toml("[synthetic]\ndim = 8").unwrap_err().is_config());
        assert!(PipelineConfig::from_toml("[backend]\nkind = \"http\"").unwrap_err().is_config());
        assert!(PipelineConfig::from_toml("[downstream]\nkind = \"parametric-accuracy-model\"\na_hit = 0.1\na_miss = 0.5")
            .unwrap_err()
            .is_config());
    }
}
