//! Flat run configuration shared by every pipeline stage, loadable from TOML.

use serde::{Deserialize, Serialize};

use crate::aari::{FusionConfig, InfoNceMode};
use crate::cat::{CatConfig, PoolMode, RefitConfig};
use crate::cdmodels::{FitConfig, Head, ModelSpec};
use crate::corpus::{DEFAULT_CAP, DEFAULT_MIN_RESPONSES};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::raif::Stage1Config;

/// Every knob of a run. Reports echo this struct verbatim so a run can be
/// reproduced from its report alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Textual embedding width.
    pub d: usize,
    /// Token embedding width of the built-in encoder.
    pub d_lm: usize,
    pub vocab: usize,
    /// Task latent width.
    pub dt: usize,
    /// Stage-2 learning rate.
    pub lr: f64,
    pub stage1_lr: f64,
    pub epochs: usize,
    pub stage1_epochs: usize,
    pub batch: usize,
    pub lambda: f64,
    pub alpha: f64,
    pub tau: f64,
    pub infonce_mode: InfoNceMode,
    /// Per-student response cap used for attribute texts.
    pub cap: usize,
    pub checkpoints: Vec<usize>,
    /// Interaction head; each scenario has its own default when unset.
    pub head: Option<Head>,
    pub mlp_hidden: usize,
    pub linear_adapter: bool,
    /// Above this entity count alignment negatives come from the batch only.
    pub align_full_limit: usize,
    pub n_inner: usize,
    pub cat_lr: f64,
    pub cat_eval_fraction: f64,
    pub min_responses: usize,
    /// Share of target-domain responses used for zero-shot attribute texts.
    pub support_fraction: f64,
    /// Cross-subject variant: reuse source histories of students present in both domains.
    pub overlap_students: bool,
    pub include_content: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            d: 64,
            d_lm: 128,
            vocab: 1 << 16,
            dt: 64,
            lr: 5e-3,
            stage1_lr: 1e-3,
            epochs: 30,
            stage1_epochs: 20,
            batch: 256,
            lambda: 0.5,
            alpha: 0.01,
            tau: 0.05,
            infonce_mode: InfoNceMode::IncludePositive,
            cap: DEFAULT_CAP,
            checkpoints: vec![5, 10, 15],
            head: None,
            mlp_hidden: 32,
            linear_adapter: false,
            align_full_limit: 2048,
            n_inner: 20,
            cat_lr: 0.01,
            cat_eval_fraction: 0.3,
            min_responses: DEFAULT_MIN_RESPONSES,
            support_fraction: 0.5,
            overlap_students: false,
            include_content: false,
        }
    }
}

pub const LR_GRID: [f64; 5] = [1e-4, 5e-4, 1e-3, 5e-3, 1e-2];

impl RunConfig {
    /// Parses the JSON form (as echoed in reports) and validates it.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if self.alpha < 0.0 || !self.alpha.is_finite() {
            return bad(format!("alpha must be non-negative, got {}", self.alpha));
        }
        if self.tau <= 0.0 || !self.tau.is_finite() {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        for (name, v) in [("lr", self.lr), ("stage1_lr", self.stage1_lr), ("cat_lr", self.cat_lr)] {
            if v <= 0.0 || !v.is_finite() {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("d", self.d),
            ("d_lm", self.d_lm),
            ("dt", self.dt),
            ("batch", self.batch),
            ("cap", self.cap),
            ("mlp_hidden", self.mlp_hidden),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.cat_eval_fraction) || !(0.0..1.0).contains(&self.support_fraction) {
            return bad("fractions must lie in [0, 1)".into());
        }
        if self.checkpoints.windows(2).any(|w| w[0] >= w[1]) || self.checkpoints.first() == Some(&0) {
            return bad("checkpoints must be positive and strictly increasing".into());
        }
        Ok(())
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            vocab_size: self.vocab,
            d_lm: self.d_lm,
            dim: self.d,
        }
    }

    pub fn stage1(&self) -> Stage1Config {
        Stage1Config {
            encoder: self.encoder(),
            epochs: self.stage1_epochs,
            batch: self.batch,
            lr: self.stage1_lr,
            cap: self.cap,
            seed: self.seed,
            attributes: crate::attributes::AttributeOptions {
                include_content: self.include_content,
            },
        }
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            lambda: self.lambda,
            alpha: self.alpha,
            tau: self.tau,
            dt: self.dt,
            mode: self.infonce_mode,
            linear_adapter: self.linear_adapter,
            full_limit: self.align_full_limit,
        }
    }

    pub fn fit(&self) -> FitConfig {
        FitConfig {
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
            seed: self.seed,
        }
    }

    /// Applies the configured head (or `default_head`) and widths to a scenario layout.
    pub fn cat(&self, pool: PoolMode) -> CatConfig {
        CatConfig {
            checkpoints: self.checkpoints.clone(),
            refit: RefitConfig {
                n_inner: self.n_inner,
                lr: self.cat_lr,
            },
            pool,
            seed: self.seed,
        }
    }

    pub fn model_spec(&self, layout: fn(Head, FusionConfig) -> ModelSpec, default_head: Head) -> ModelSpec {
        let mut spec = layout(self.head.unwrap_or(default_head), self.fusion());
        spec.mlp_hidden = self.mlp_hidden;
        spec
    }
}
