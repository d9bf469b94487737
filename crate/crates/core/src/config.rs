//! One JSON document that drives every pipeline stage.
//!
//! A [`PipelineConfig`] fully determines a run: the synthetic dataset, the
//! projection training for both schemes, the anonymization ablations, and
//! the risk audit. It round-trips losslessly through JSON so the resolved
//! copy written next to the outputs can reproduce the run byte for byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anonymize::AnonConfig;
use crate::error::{Error, Result};
use crate::nets::{AuxTrainOpts, EmbedderConfig};
use crate::phantom::DatasetConfig;
use crate::projection::ProjectionConfig;
use crate::risk::MiaConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Loss ablations a run may request, in canonical tag form.
pub const ABLATION_TAGS: [&str; 3] = ["ut", "id", "ut+id"];

/// Evaluation-side settings: which ablations to anonymize, the auxiliary
/// embedders, and the risk-audit budgets.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EvalConfig {
    /// Base anonymization settings; `use_id`/`use_ut` are overridden per ablation.
    pub anon: AnonConfig,
    /// Ablation tags to run, each one of [`ABLATION_TAGS`].
    pub ablations: Vec<String>,
    /// Test-split images to anonymize per ablation (0 = the whole split).
    pub n_anon_test: usize,
    /// Train-split images to anonymize per ablation, used as MIA members
    /// and as anonymized utility-training variants (0 = the whole split).
    pub n_anon_train: usize,
    /// Identity embedder backbone. `n_out` is resolved at train time to the
    /// number of distinct training patients.
    pub id_embedder: EmbedderConfig,
    /// Utility embedder backbone. `n_out` is resolved at train time to the
    /// number of pathology labels.
    pub ut_embedder: EmbedderConfig,
    /// Angular-margin head settings for the identity embedder.
    pub id_margin: f64,
    pub id_scale: f64,
    /// Training budget for both auxiliary embedders.
    pub aux_opts: AuxTrainOpts,
    /// Budget for the fresh per-variant utility classifiers.
    pub utility_opts: AuxTrainOpts,
    pub mia: MiaConfig,
    /// Seed for verification-pair sampling.
    pub risk_seed: u64,
    /// Rows in the anonymization figure grid.
    pub figure_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            anon: AnonConfig::default(),
            ablations: ABLATION_TAGS.iter().map(|s| s.to_string()).collect(),
            n_anon_test: 0,
            n_anon_train: 0,
            id_embedder: EmbedderConfig::identity_default(),
            ut_embedder: EmbedderConfig::utility_default(),
            id_margin: 0.3,
            id_scale: 16.0,
            aux_opts: AuxTrainOpts::default(),
            utility_opts: AuxTrainOpts::default(),
            mia: MiaConfig::default(),
            risk_seed: 0,
            figure_samples: 3,
        }
    }
}

/// The complete recipe for one end-to-end run.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PipelineConfig {
    pub schema_version: u32,
    pub dataset: DatasetConfig,
    pub projection: ProjectionConfig,
    /// Also train the encoder-only baseline against the co-trained generator.
    pub train_etrain: bool,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            schema_version: SCHEMA_VERSION,
            dataset: DatasetConfig::default(),
            projection: ProjectionConfig::default(),
            train_etrain: true,
            eval: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// A configuration that exercises every stage in a few minutes on one
    /// CPU core: 32x32 images, slim networks, small splits.
    pub fn smoke() -> Self {
        let mut cfg = PipelineConfig::default();
        cfg.dataset = DatasetConfig {
            seed: 7,
            resolution: 32,
            n_labels: 4,
            train_patients: 8,
            valid_patients: 2,
            test_patients: 4,
            images_per_patient: 4,
            min_images_per_patient: 4,
            ..DatasetConfig::default()
        };
        cfg.projection.steps = 60;
        cfg.projection.batch_size = 2;
        cfg.projection.checkpoint_every = 50;
        cfg.projection.encoder.resolution = 32;
        cfg.projection.encoder.channels = vec![8, 12, 16, 24, 32];
        cfg.projection.encoder.d_w = 24;
        cfg.projection.generator.resolution = 32;
        cfg.projection.generator.d_w = 24;
        cfg.projection.generator.channels = vec![32, 24, 16, 12];
        cfg.projection.discriminator.resolution = 32;
        cfg.projection.discriminator.channels = vec![8, 12, 16, 24];
        let emb = EmbedderConfig {
            resolution: 32,
            channels: vec![8, 12, 16, 24],
            embed_dim: 32,
            n_out: 0,
        };
        cfg.eval.id_embedder = emb.clone();
        cfg.eval.ut_embedder = emb;
        cfg.eval.anon.steps = 30;
        cfg.eval.n_anon_test = 8;
        cfg.eval.n_anon_train = 8;
        cfg.eval.aux_opts = AuxTrainOpts { steps: 60, batch_size: 8, lr: 1e-3, seed: 0 };
        cfg.eval.utility_opts = AuxTrainOpts { steps: 60, batch_size: 8, lr: 1e-3, seed: 0 };
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.dataset.validate()?;
        self.projection.validate()?;
        self.eval.anon.validate()?;

        let res = self.dataset.resolution;
        for (what, got) in [
            ("projection networks", self.projection.encoder.resolution),
            ("identity embedder", self.eval.id_embedder.resolution),
            ("utility embedder", self.eval.ut_embedder.resolution),
        ] {
            if got != res {
                return Err(Error::Config(format!(
                    "{what} resolution {got} does not match dataset resolution {res}"
                )));
            }
        }
        // `n_out` fields are resolved at runtime, so validate the backbones
        // with a placeholder head.
        for emb in [&self.eval.id_embedder, &self.eval.ut_embedder] {
            let mut probe = emb.clone();
            probe.n_out = 1;
            probe.validate()?;
        }
        if self.projection.weights.lambda_perc > 0.0
            && self.projection.perc_layer >= self.eval.ut_embedder.channels.len()
        {
            return Err(Error::Config(format!(
                "perc_layer {} out of range for a {}-block utility embedder",
                self.projection.perc_layer,
                self.eval.ut_embedder.channels.len() - 1
            )));
        }

        if self.eval.ablations.is_empty() {
            return Err(Error::Config("eval.ablations must name at least one ablation".into()));
        }
        for tag in &self.eval.ablations {
            if !ABLATION_TAGS.contains(&tag.as_str()) {
                return Err(Error::Config(format!(
                    "unknown ablation tag {tag:?} (expected one of {ABLATION_TAGS:?})"
                )));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for tag in &self.eval.ablations {
            if !seen.insert(tag) {
                return Err(Error::Config(format!("duplicate ablation tag {tag:?}")));
            }
        }

        if !(self.eval.id_margin.is_finite() && self.eval.id_scale.is_finite())
            || self.eval.id_scale <= 0.0
            || self.eval.id_margin < 0.0
        {
            return Err(Error::Config("identity head needs margin >= 0 and scale > 0".into()));
        }
        if self.eval.aux_opts.steps == 0 || self.eval.utility_opts.steps == 0 {
            return Err(Error::Config("auxiliary training budgets need at least one step".into()));
        }
        if self.eval.mia.steps == 0 {
            return Err(Error::Config("MIA attacker needs at least one step".into()));
        }
        if self.eval.figure_samples == 0 {
            return Err(Error::Config("figure_samples must be at least 1".into()));
        }
        Ok(())
    }

    /// Applies the loss-selection flags for one ablation tag to the base
    /// anonymization settings.
    pub fn anon_for_tag(&self, tag: &str) -> Result<AnonConfig> {
        let mut cfg = self.eval.anon.clone();
        match tag {
            "ut" => {
                cfg.use_ut = true;
                cfg.use_id = false;
            }
            "id" => {
                cfg.use_ut = false;
                cfg.use_id = true;
            }
            "ut+id" => {
                cfg.use_ut = true;
                cfg.use_id = true;
            }
            _ => {
                return Err(Error::Config(format!(
                    "unknown ablation tag {tag:?} (expected one of {ABLATION_TAGS:?})"
                )))
            }
        }
        Ok(cfg)
    }

    /// Rewrites every stage seed as a distinct value derived from `seed`,
    /// so one flag reseeds the whole run deterministically.
    pub fn reseed(&mut self, seed: u64) {
        fn derive(seed: u64, k: u64) -> u64 {
            (seed ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_add(k)
        }
        self.dataset.seed = derive(seed, 1);
        self.projection.seed = derive(seed, 2);
        self.eval.anon.seed = derive(seed, 3);
        self.eval.aux_opts.seed = derive(seed, 4);
        self.eval.utility_opts.seed = derive(seed, 5);
        self.eval.risk_seed = derive(seed, 6);
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: PipelineConfig = serde_json::from_str(&text)?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Short content hash of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        crate::pipeline::short_hash(json.as_bytes())
    }
}
