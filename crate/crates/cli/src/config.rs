//! `ctxpipe.toml` run configuration and backend selection.
//!
//! ```toml
//! schema = "schemas/fig2.json"
//! seed = 42
//!
//! [llm]
//! mock = "fixtures/listing2.mock"   # or sampling_seed = 7, or [llm.http]
//!
//! [embedding]
//! mock_dim = 256
//!
//! [eci]
//! alpha = 2.5
//! k = 5
//! ```
//!
//! Relative paths are resolved against the directory of the config file.
//! Command-line flags override every value here.

use std::path::{Path, PathBuf};

use ctxpipe::backend::http::HttpBackend;
use ctxpipe::backend::{MockEmbedder, MockScript, SamplingLlm, ScriptedLlm};
use ctxpipe::{BackendConfig, EmbeddingBackend, LlmBackend};
use serde::Deserialize;

use crate::exit::{Failure, Outcome};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: Option<PathBuf>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    #[serde(default)]
    pub llm: LlmProfile,
    #[serde(default)]
    pub embedding: EmbeddingProfile,
    #[serde(default)]
    pub eci: EciSection,
    #[serde(default)]
    pub filter: FilterSection,
    #[serde(default)]
    pub decompose: DecomposeSection,
    #[serde(default)]
    pub bench: BenchSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmProfile {
    /// Scripted mock replies.
    pub mock: Option<PathBuf>,
    /// Seed of the schema-sampling mock used when no script is given.
    pub sampling_seed: Option<u64>,
    pub http: Option<BackendConfig>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingProfile {
    pub mock_dim: Option<usize>,
    pub mock_seed: Option<u64>,
    pub http: Option<BackendConfig>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EciSection {
    pub alpha: Option<f64>,
    pub k: Option<u32>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSection {
    pub tau: Option<f64>,
    pub method: Option<String>,
    pub top_k: Option<usize>,
    pub keep_last: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecomposeSection {
    pub max_repairs: Option<u32>,
    pub resummarize: Option<bool>,
    pub temperature: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub sample_n: Option<usize>,
    pub condition: Option<String>,
    pub reference: Option<String>,
}

pub const DEFAULT_EMBED_DIM: usize = 256;

impl RunConfig {
    pub fn load(path: &Path) -> Outcome<Self> {
        let text = crate::io::read_input(path)?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut Option<PathBuf>| {
            if let Some(p) = p.as_mut().filter(|p| p.is_relative()) {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.schema);
        rebase(&mut cfg.llm.mock);
        Ok(cfg)
    }
}

/// Picks the LLM backend. HTTP profiles are used only with `live`; a mock
/// script given on the command line wins over the config file.
pub fn build_llm(
    profile: &LlmProfile,
    mock_flag: Option<&Path>,
    live: bool,
    seed: u64,
) -> Outcome<Box<dyn LlmBackend>> {
    if live {
        let cfg = profile
            .http
            .clone()
            .ok_or_else(|| Failure::usage("--live needs an [llm.http] section in the config"))?;
        return Ok(Box::new(HttpBackend::from_env(cfg)?));
    }
    if let Some(path) = mock_flag.or(profile.mock.as_deref()) {
        let script = MockScript::load(path).map_err(|e| Failure::from_core_at(e, path))?;
        return Ok(Box::new(ScriptedLlm::new(script)));
    }
    if profile.http.is_some() && profile.sampling_seed.is_none() {
        return Err(Failure::usage("the config selects an HTTP LLM backend; pass --live to use it"));
    }
    Ok(Box::new(SamplingLlm::new(profile.sampling_seed.unwrap_or(seed))))
}

pub fn build_embedder(profile: &EmbeddingProfile, dim_flag: Option<usize>, live: bool) -> Outcome<Box<dyn EmbeddingBackend>> {
    if live {
        let cfg = profile
            .http
            .clone()
            .ok_or_else(|| Failure::usage("--live needs an [embedding.http] section in the config"))?;
        return Ok(Box::new(HttpBackend::from_env(cfg)?));
    }
    if profile.http.is_some() && profile.mock_dim.is_none() && dim_flag.is_none() {
        return Err(Failure::usage("the config selects an HTTP embedding backend; pass --live to use it"));
    }
    let dim = dim_flag.or(profile.mock_dim).unwrap_or(DEFAULT_EMBED_DIM);
    if dim < 8 {
        return Err(Failure::usage("mock embedding dimension must be at least 8"));
    }
    Ok(Box::new(MockEmbedder::new(dim, profile.mock_seed.unwrap_or(0))?))
}
