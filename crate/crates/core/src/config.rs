//! Flat key/value configuration shared by the library and the CLI.
//!
//! Every key is optional; missing keys take the defaults below and unknown
//! keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::align::TrainSchedule;
use crate::asr_refine::RefineConfig;
use crate::corpus::{CorpusError, ScaleConfig};
use crate::dedup::DedupConfig;
use crate::fusion::{FusionConfig, MixingWeights};
use crate::index::{ContextWindowConfig, GraphParams, HashingEmbedder, SearchMode};
use crate::scoring::{DensityWeights, GeneralizedWeights};
use crate::select::{RerankWeights, SelectConfig, SelectionMode};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading config: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Target duration of each hierarchy level, finest first.
    pub levels_s: Vec<f64>,

    pub ngram_order: usize,
    pub ngram_k: f64,

    pub embed_dim: usize,
    pub embed_seed: u64,

    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda_neighbor: f64,
    pub mu_child: f64,

    pub dedup: bool,
    pub tau_dedup: f64,
    pub tau_length: usize,
    pub eta: f64,
    pub dedup_lambda: f64,

    pub window: usize,
    pub decay: f64,
    pub global_weight: f64,

    pub mix_caption: f64,
    pub mix_transcript: f64,
    pub mix_children: f64,
    pub mix_parent: f64,
    pub top_m: usize,
    pub attention_temperature: f64,

    pub approximate: bool,
    pub hnsw_m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub graph_seed: u64,

    pub budget: usize,
    pub k0: usize,
    pub mode: SelectionMode,
    pub coherence_tau: f64,
    pub max_retries: usize,
    pub w_cos: f64,
    pub w_lex: f64,

    pub tau_conf: f64,
    pub gap_s: f64,
    pub snap_tolerance_s: f64,

    pub align_eta: f64,
    pub align_steps: usize,
    pub align_tau: f64,
    pub align_batch: usize,
    pub align_seed: u64,
    pub align_d_out: usize,

    pub recall_k: usize,
}

impl Default for Config {
    fn default() -> Self {
        let dw = DensityWeights::default();
        let gw = GeneralizedWeights::default();
        let dd = DedupConfig::default();
        let win = ContextWindowConfig::default();
        let fu = FusionConfig::default();
        let gp = GraphParams::default();
        let sel = SelectConfig::default();
        let rf = RefineConfig::default();
        let tr = TrainSchedule::default();
        Self {
            levels_s: vec![3.0, 30.0, 180.0],
            ngram_order: crate::textmodel::DEFAULT_ORDER,
            ngram_k: crate::textmodel::DEFAULT_SMOOTHING,
            embed_dim: crate::index::DEFAULT_DIM,
            embed_seed: 0,
            alpha: dw.alpha,
            beta: dw.beta,
            gamma: dw.gamma,
            lambda_neighbor: gw.lambda_neighbor,
            mu_child: gw.mu_child,
            dedup: true,
            tau_dedup: dd.tau_dedup,
            tau_length: dd.tau_length,
            eta: dd.eta,
            dedup_lambda: dd.lambda,
            window: win.window,
            decay: win.neighbor_decay,
            global_weight: win.global_weight,
            mix_caption: fu.mixing.caption,
            mix_transcript: fu.mixing.transcript,
            mix_children: fu.mixing.children,
            mix_parent: fu.mixing.parent,
            top_m: fu.top_m,
            attention_temperature: fu.temperature,
            approximate: false,
            hnsw_m: gp.m,
            ef_construction: gp.ef_construction,
            ef_search: gp.ef_search,
            graph_seed: gp.seed,
            budget: sel.budget,
            k0: sel.k0,
            mode: sel.mode,
            coherence_tau: sel.coherence_tau,
            max_retries: sel.max_retries,
            w_cos: sel.rerank.cosine,
            w_lex: sel.rerank.lexical,
            tau_conf: rf.tau_conf,
            gap_s: rf.gap_s,
            snap_tolerance_s: rf.snap_tolerance_s,
            align_eta: tr.base_eta,
            align_steps: tr.steps,
            align_tau: tr.tau,
            align_batch: tr.batch_size,
            align_seed: tr.seed,
            align_d_out: crate::align::DEFAULT_D_OUT,
            recall_k: 5,
        }
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.scale().map_err(|e: CorpusError| ConfigError::Invalid(e.to_string()))?;
        self.dedup_config().validate().map_err(ConfigError::Invalid)?;
        if self.ngram_order == 0 {
            return bad("ngram_order must be >= 1".into());
        }
        if self.ngram_k < 0.0 {
            return bad("ngram_k must be >= 0".into());
        }
        if self.embed_dim == 0 {
            return bad("embed_dim must be >= 1".into());
        }
        if [self.alpha, self.beta, self.gamma].iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return bad("alpha, beta and gamma must be finite and non-negative".into());
        }
        if self.k0 == 0 {
            return bad("k0 must be >= 1".into());
        }
        if self.coherence_tau < 0.0 {
            return bad("coherence_tau must be >= 0".into());
        }
        if !(self.align_tau > 0.0) || !(self.align_eta > 0.0) {
            return bad("align_tau and align_eta must be > 0".into());
        }
        if self.attention_temperature <= 0.0 {
            return bad("attention_temperature must be > 0".into());
        }
        if self.recall_k == 0 {
            return bad("recall_k must be >= 1".into());
        }
        Ok(())
    }

    pub fn scale(&self) -> Result<ScaleConfig, CorpusError> {
        let s = ScaleConfig::from_durations(&self.levels_s)?;
        s.validate()?;
        Ok(s)
    }

    pub fn embedder(&self) -> HashingEmbedder {
        HashingEmbedder::new(self.embed_dim).with_seed(self.embed_seed)
    }

    pub fn density_weights(&self) -> DensityWeights {
        DensityWeights { alpha: self.alpha, beta: self.beta, gamma: self.gamma }
    }

    pub fn generalized_weights(&self) -> GeneralizedWeights {
        GeneralizedWeights { lambda_neighbor: self.lambda_neighbor, mu_child: self.mu_child }
    }

    pub fn dedup_config(&self) -> DedupConfig {
        DedupConfig { tau_dedup: self.tau_dedup, tau_length: self.tau_length, eta: self.eta, lambda: self.dedup_lambda }
    }

    pub fn window_config(&self) -> ContextWindowConfig {
        ContextWindowConfig { window: self.window, neighbor_decay: self.decay, global_weight: self.global_weight }
    }

    pub fn fusion_config(&self) -> FusionConfig {
        FusionConfig {
            mixing: MixingWeights {
                caption: self.mix_caption,
                transcript: self.mix_transcript,
                children: self.mix_children,
                parent: self.mix_parent,
            },
            top_m: self.top_m,
            temperature: self.attention_temperature,
        }
    }

    pub fn graph_params(&self) -> GraphParams {
        GraphParams { m: self.hnsw_m, ef_construction: self.ef_construction, ef_search: self.ef_search, seed: self.graph_seed }
    }

    pub fn search_mode(&self) -> SearchMode {
        if self.approximate {
            SearchMode::Approximate { ef: self.ef_search }
        } else {
            SearchMode::Exact
        }
    }

    pub fn select_config(&self) -> SelectConfig {
        SelectConfig {
            budget: self.budget,
            k0: self.k0,
            coherence_tau: self.coherence_tau,
            max_retries: self.max_retries,
            rerank: RerankWeights { cosine: self.w_cos, lexical: self.w_lex },
            mode: self.mode,
        }
    }

    pub fn refine_config(&self) -> RefineConfig {
        RefineConfig { tau_conf: self.tau_conf, gap_s: self.gap_s, snap_tolerance_s: self.snap_tolerance_s }
    }

    pub fn train_schedule(&self) -> TrainSchedule {
        TrainSchedule {
            base_eta: self.align_eta,
            steps: self.align_steps,
            tau: self.align_tau,
            batch_size: self.align_batch,
            seed: self.align_seed,
        }
    }
}
