//! End-to-end orchestration: dataset build, auxiliary embedders, projection
//! training, anonymization ablations, metrics, risk audit, and the final
//! report, all under one output root with a run manifest.
//!
//! Every stage records a hash of its configuration slice and of its input
//! files in `manifest.json`. Rerunning with identical hashes is a no-op
//! unless forced; a stale or forced stage rebuilds its outputs from scratch.
//! Reports are deterministic: byte-identical configs produce byte-identical
//! `report.json` and `tables.txt`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::anonymize::{optimize_latent, AnonNets};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::imgio;
use crate::metrics::{max_levels, recon_metrics, IW_LEVELS};
use crate::nets::{EmbeddingVector, Encoder, Generator, IdentityEmbedder, UtilityEmbedder};
use crate::phantom::{self, load_split, LoadedSplit, Split};
use crate::projection::{self, Scheme};
use crate::risk::{
    build_pairs, calibrate_threshold, evaluate_pairs, hidden_rate, local_cloaking, mia_eval,
    mia_features, pair_score, PairKind, RiskReport, UtilityScores, UtilityVariant,
};

// ---------------------------------------------------------------------------
// Hashing
// ---------------------------------------------------------------------------

/// First 16 hex characters of the SHA-256 digest.
pub fn short_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let d = h.finalize();
    d.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(short_hash(&bytes))
}

fn hash_json<T: Serialize>(value: &T) -> String {
    short_hash(serde_json::to_string(value).expect("serializable").as_bytes())
}

// ---------------------------------------------------------------------------
// Stages and the run manifest
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Dataset,
    Aux,
    Project,
    Anonymize,
    Metrics,
    Risk,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Dataset,
        Stage::Aux,
        Stage::Project,
        Stage::Anonymize,
        Stage::Metrics,
        Stage::Risk,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Dataset => "dataset",
            Stage::Aux => "aux",
            Stage::Project => "project",
            Stage::Anonymize => "anonymize",
            Stage::Metrics => "metrics",
            Stage::Risk => "risk",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?} (expected one of dataset, aux, project, anonymize, metrics, risk, report)")))
    }
}

/// What one completed stage recorded: hashes that decide staleness plus the
/// outputs it wrote (paths relative to the run root).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    pub input_hashes: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    fn load_or_default(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Ok(RunManifest { schema_version: crate::config::SCHEMA_VERSION, stages: BTreeMap::new() });
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: RunManifest = serde_json::from_str(&text)?;
        Ok(m)
    }

    fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Run just this stage (after verifying its inputs exist).
    pub only: Option<Stage>,
    /// Rerun stages even when their hashes match the manifest.
    pub force: bool,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    /// Names of the stages that actually executed, in run order.
    pub ran: Vec<String>,
}

// ---------------------------------------------------------------------------
// On-disk layout
// ---------------------------------------------------------------------------

fn dataset_dir(root: &Path) -> PathBuf {
    root.join("dataset")
}

fn scheme_dir(root: &Path, scheme: Scheme) -> PathBuf {
    root.join("project").join(scheme.to_string())
}

fn anon_dir(root: &Path) -> PathBuf {
    root.join("anonymize")
}

fn schemes(cfg: &PipelineConfig) -> Vec<Scheme> {
    if cfg.train_etrain {
        vec![Scheme::Cotrain, Scheme::Etrain]
    } else {
        vec![Scheme::Cotrain]
    }
}

/// Serialized index subsets selected for anonymization, as positions in the
/// split manifests.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SubsetFile {
    pub test_indices: Vec<usize>,
    pub train_indices: Vec<usize>,
}

/// Per-image anonymization outcome kept alongside the PNG artifacts.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnonRecord {
    /// Position in the split manifest.
    pub index: usize,
    pub patient_id: usize,
    pub final_loss: Option<f64>,
    pub identity_cosine: f64,
    pub utility_distance: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnonRecords {
    pub tag: String,
    pub test: Vec<AnonRecord>,
    pub train: Vec<AnonRecord>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Deterministic subset of up to `n` indices, spread round-robin across
/// patients in order of first appearance (0 means "everything").
pub fn spread_subset(patient_ids: &[usize], n: usize) -> Vec<usize> {
    if n == 0 || n >= patient_ids.len() {
        return (0..patient_ids.len()).collect();
    }
    let mut order: Vec<usize> = Vec::new();
    let mut per_patient: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &pid) in patient_ids.iter().enumerate() {
        if !per_patient.contains_key(&pid) {
            order.push(pid);
        }
        per_patient.entry(pid).or_default().push(i);
    }
    let mut picked = Vec::with_capacity(n);
    let mut round = 0;
    while picked.len() < n {
        let mut advanced = false;
        for &pid in &order {
            let imgs = &per_patient[&pid];
            if round < imgs.len() && picked.len() < n {
                picked.push(imgs[round]);
                advanced = true;
            }
        }
        if !advanced {
            break;
        }
        round += 1;
    }
    picked.sort_unstable();
    picked
}

// ---------------------------------------------------------------------------
// Stage hashing: config slices and input files
// ---------------------------------------------------------------------------

fn stage_config_hash(cfg: &PipelineConfig, stage: Stage) -> String {
    match stage {
        Stage::Dataset => hash_json(&cfg.dataset),
        Stage::Aux => hash_json(&(
            &cfg.eval.id_embedder,
            &cfg.eval.ut_embedder,
            cfg.eval.id_margin,
            cfg.eval.id_scale,
            &cfg.eval.aux_opts,
        )),
        Stage::Project => hash_json(&(&cfg.projection, cfg.train_etrain)),
        Stage::Anonymize => hash_json(&(
            &cfg.eval.anon,
            &cfg.eval.ablations,
            cfg.eval.n_anon_test,
            cfg.eval.n_anon_train,
        )),
        Stage::Metrics => hash_json(&cfg.train_etrain),
        Stage::Risk => hash_json(&(
            &cfg.eval.mia,
            cfg.eval.risk_seed,
            &cfg.eval.utility_opts,
            &cfg.eval.ablations,
            &cfg.eval.ut_embedder,
        )),
        Stage::Report => hash_json(&crate::config::SCHEMA_VERSION),
    }
}

/// Input files (relative to the run root) a stage depends on. Hashing the
/// manifests covers the rendered images transitively, since both derive
/// deterministically from the dataset seed.
fn stage_inputs(cfg: &PipelineConfig, stage: Stage) -> Vec<String> {
    let mut v: Vec<String> = Vec::new();
    let dataset = |v: &mut Vec<String>, splits: &[&str]| {
        v.push("dataset/dataset.json".into());
        for s in splits {
            v.push(format!("dataset/{s}.manifest"));
        }
    };
    match stage {
        Stage::Dataset => {}
        Stage::Aux => dataset(&mut v, &["train"]),
        Stage::Project => {
            dataset(&mut v, &["train", "valid"]);
            v.push("aux/utility.ckpt".into());
        }
        Stage::Anonymize => {
            dataset(&mut v, &["train", "test"]);
            v.push("aux/identity.ckpt".into());
            v.push("aux/utility.ckpt".into());
            v.push("project/cotrain/encoder.ckpt".into());
            v.push("project/cotrain/generator.ckpt".into());
        }
        Stage::Metrics => {
            dataset(&mut v, &["valid"]);
            v.push("aux/utility.ckpt".into());
            for s in schemes(cfg) {
                v.push(format!("project/{s}/encoder.ckpt"));
                v.push(format!("project/{s}/generator.ckpt"));
            }
        }
        Stage::Risk => {
            dataset(&mut v, &["train", "valid", "test"]);
            v.push("aux/identity.ckpt".into());
            v.push("aux/utility.ckpt".into());
            v.push("project/cotrain/encoder.ckpt".into());
            v.push("project/cotrain/generator.ckpt".into());
            v.push("anonymize/subset.json".into());
            for tag in &cfg.eval.ablations {
                v.push(format!("anonymize/{tag}/records.json"));
            }
        }
        Stage::Report => {
            dataset(&mut v, &["train", "valid", "test"]);
            v.push("metrics/reconstruction.json".into());
            v.push("risk/calibration.json".into());
            v.push("risk/utility.json".into());
            for tag in &cfg.eval.ablations {
                v.push(format!("risk/{tag}/report.json"));
            }
        }
    }
    v
}

// ---------------------------------------------------------------------------
// The driver
// ---------------------------------------------------------------------------

pub fn run_pipeline(cfg: &PipelineConfig, out_root: &Path, opts: &RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_root).map_err(|e| Error::io(out_root, e))?;
    cfg.save(&out_root.join("config.json"))?;

    let manifest_path = out_root.join("manifest.json");
    let mut manifest = RunManifest::load_or_default(&manifest_path)?;
    let mut ran = Vec::new();

    for stage in Stage::ALL {
        if let Some(only) = opts.only {
            if stage != only {
                continue;
            }
        }

        let inputs = stage_inputs(cfg, stage);
        for rel in &inputs {
            if !out_root.join(rel).exists() {
                return Err(Error::Dependency { stage: stage.name().into(), missing: rel.clone() });
            }
        }
        let config_hash = stage_config_hash(cfg, stage);
        let mut input_hashes = BTreeMap::new();
        for rel in &inputs {
            input_hashes.insert(rel.clone(), hash_file(&out_root.join(rel))?);
        }

        let up_to_date = !opts.force
            && manifest.stages.get(stage.name()).is_some_and(|rec| {
                rec.config_hash == config_hash
                    && rec.input_hashes == input_hashes
                    && rec.outputs.iter().all(|o| out_root.join(o).exists())
            });
        if up_to_date {
            continue;
        }

        let t0 = Instant::now();
        let outputs = run_stage(cfg, out_root, stage)?;
        let record = StageRecord {
            config_hash,
            input_hashes,
            outputs,
            wall_ms: t0.elapsed().as_millis() as u64,
        };
        manifest.stages.insert(stage.name().into(), record);
        manifest.save(&manifest_path)?;
        ran.push(stage.name().to_string());
    }

    Ok(RunOutcome { manifest, ran })
}

fn clear_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

fn run_stage(cfg: &PipelineConfig, root: &Path, stage: Stage) -> Result<Vec<String>> {
    match stage {
        Stage::Dataset => stage_dataset(cfg, root),
        Stage::Aux => stage_aux(cfg, root),
        Stage::Project => stage_project(cfg, root),
        Stage::Anonymize => stage_anonymize(cfg, root),
        Stage::Metrics => stage_metrics(cfg, root),
        Stage::Risk => stage_risk(cfg, root),
        Stage::Report => stage_report(cfg, root),
    }
}

// ---------------------------------------------------------------------------
// Stage bodies
// ---------------------------------------------------------------------------

fn stage_dataset(cfg: &PipelineConfig, root: &Path) -> Result<Vec<String>> {
    let dir = dataset_dir(root);
    clear_dir(&dir)?;
    phantom::build_dataset(&cfg.dataset, &dir)?;
    Ok(vec![
        "dataset/dataset.json".into(),
        "dataset/train.manifest".into(),
        "dataset/valid.manifest".into(),
        "dataset/test.manifest".into(),
    ])
}

fn stage_aux(cfg: &PipelineConfig, root: &Path) -> Result<Vec<String>> {
    let dir = root.join("aux");
    clear_dir(&dir)?;
    let train = load_split::<f32>(&dataset_dir(root), Split::Train)?;

    let (class_ids, n_classes) = train.contiguous_ids();
    let mut id_cfg = cfg.eval.id_embedder.clone();
    id_cfg.n_out = n_classes;
    let e_id = IdentityEmbedder::train(
        id_cfg,
        cfg.eval.id_margin,
        cfg.eval.id_scale,
        &train.images,
        &class_ids,
        &cfg.eval.aux_opts,
    )?;
    e_id.save(&dir.join("identity.ckpt"))?;

    let mut ut_cfg = cfg.eval.ut_embedder.clone();
    ut_cfg.n_out = train.n_labels;
    let mut ut_opts = cfg.eval.aux_opts.clone();
    ut_opts.seed = ut_opts.seed.wrapping_add(1);
    let e_ut = UtilityEmbedder::train(ut_cfg, &train.images, &train.float_labels(), &ut_opts)?;
    e_ut.save(&dir.join("utility.ckpt"))?;

    Ok(vec!["aux/identity.ckpt".into(), "aux/utility.ckpt".into()])
}

fn stage_project(cfg: &PipelineConfig, root: &Path) -> Result<Vec<String>> {
    clear_dir(&root.join("project"))?;
    let e_ut = UtilityEmbedder::<f32>::load(&root.join("aux/utility.ckpt"))?;
    let data = dataset_dir(root);

    let cotrain_dir = scheme_dir(root, Scheme::Cotrain);
    projection::train::<f32>(&cfg.projection, Scheme::Cotrain, &data, Some(&e_ut), None, &cotrain_dir, false)?;

    let mut outputs: Vec<String> = Vec::new();
    let push_scheme = |s: Scheme, outputs: &mut Vec<String>| {
        for f in ["encoder.ckpt", "generator.ckpt", "discriminator.ckpt", "trainer.ckpt", "report.json"] {
            outputs.push(format!("project/{s}/{f}"));
        }
    };
    push_scheme(Scheme::Cotrain, &mut outputs);

    if cfg.train_etrain {
        let gen_path = cotrain_dir.join("generator.ckpt");
        projection::train::<f32>(
            &cfg.projection,
            Scheme::Etrain,
            &data,
            Some(&e_ut),
            Some(&gen_path),
            &scheme_dir(root, Scheme::Etrain),
            false,
        )?;
        push_scheme(Scheme::Etrain, &mut outputs);
    }
    Ok(outputs)
}

fn load_cotrain_nets(root: &Path) -> Result<(Encoder<f32>, Generator<f32>)> {
    let enc = Encoder::<f32>::load(&scheme_dir(root, Scheme::Cotrain).join("encoder.ckpt"))?;
    let gen = Generator::<f32>::load(&scheme_dir(root, Scheme::Cotrain).join("generator.ckpt"))?;
    Ok((enc, gen))
}

fn png_name(prefix: &str, index: usize) -> String {
    format!("{prefix}_{index:04}.png")
}

fn stage_anonymize(cfg: &PipelineConfig, root: &Path) -> Result<Vec<String>> {
    let dir = anon_dir(root);
    clear_dir(&dir)?;
    let data = dataset_dir(root);
    let train = load_split::<f32>(&data, Split::Train)?;
    let test = load_split::<f32>(&data, Split::Test)?;
    let subset = SubsetFile {
        test_indices: spread_subset(&test.patient_ids, cfg.eval.n_anon_test),
        train_indices: spread_subset(&train.patient_ids, cfg.eval.n_anon_train),
    };
    write_json(&dir.join("subset.json"), &subset)?;

    let (enc, gen) = load_cotrain_nets(root)?;
    let e_id = IdentityEmbedder::<f32>::load(&root.join("aux/identity.ckpt"))?;
    let e_ut = UtilityEmbedder::<f32>::load(&root.join("aux/utility.ckpt"))?;
    let nets = AnonNets { generator: &gen, e_id: &e_id, e_ut: &e_ut };

    let splits: [(&str, &LoadedSplit<f32>, &[usize]); 2] = [
        ("test", &test, &subset.test_indices),
        ("train", &train, &subset.train_indices),
    ];

    // Reconstructions of the selected subsets; loss-independent, shared by
    // figures, the utility-preservation eval, and manual inspection.
    for (name, split, idxs) in splits {
        let sub = dir.join("recon").join(name);
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for &i in idxs {
            let x_hat = gen.generate(&enc.encode(&split.images[i])?)?;
            imgio::save_png(&sub.join(png_name("r", i)), &x_hat)?;
        }
    }

    let mut outputs: Vec<String> = vec![
        "anonymize/subset.json".into(),
        "anonymize/recon/test".into(),
        "anonymize/recon/train".into(),
    ];

    for tag in &cfg.eval.ablations {
        let acfg = cfg.anon_for_tag(tag)?;
        let mut records = AnonRecords { tag: tag.clone(), test: Vec::new(), train: Vec::new() };
        for (name, split, idxs) in splits {
            let sub = dir.join(tag).join(name);
            std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            let mut recs = Vec::with_capacity(idxs.len());
            for &i in idxs {
                let w0 = enc.encode(&split.images[i])?;
                let res = optimize_latent(&nets, &w0, &split.images[i], &acfg)?;
                if let Some(step) = res.aborted_at {
                    return Err(Error::NonFinite {
                        step,
                        context: format!("anonymize {tag}/{name} image {i}"),
                    });
                }
                imgio::save_png(&sub.join(png_name("a", i)), &res.x_a)?;
                recs.push(AnonRecord {
                    index: i,
                    patient_id: split.patient_ids[i],
                    final_loss: res.trajectory.last().copied(),
                    identity_cosine: res.achieved_identity_cosine,
                    utility_distance: res.achieved_utility_distance,
                });
            }
            match name {
                "test" => records.test = recs,
                _ => records.train = recs,
            }
            outputs.push(format!("anonymize/{tag}/{name}"));
        }
        write_json(&dir.join(tag).join("records.json"), &records)?;
        outputs.push(format!("anonymize/{tag}/records.json"));
    }
    Ok(outputs)
}

/// One row of the reconstruction-quality table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReconRow {
    pub scheme: String,
    pub psnr: f64,
    pub ssim: f64,
    pub iw_ssim: f64,
    pub perc_dist: f64,
}

fn stage_metrics(cfg: &PipelineConfig, root: &Path) -> Result<Vec<String>> {
    let dir = root.join("metrics");
    clear_dir(&dir)?;
    let data = dataset_dir(root);
    let valid_f32 = load_split::<f32>(&data, Split::Valid)?;
    let valid_f64 = load_split::<f64>(&data, Split::Valid)?;
    let e_ut = UtilityEmbedder::<f32>::load(&root.join("aux/utility.ckpt"))?;
    let levels = max_levels(valid_f64.resolution, valid_f64.resolution).min(IW_LEVELS);

    let mut rows = Vec::new();
    for scheme in schemes(cfg) {
        let enc = Encoder::<f32>::load(&scheme_dir(root, scheme).join("encoder.ckpt"))?;
        let gen = Generator::<f32>::load(&scheme_dir(root, scheme).join("generator.ckpt"))?;
        let mut sums = [0.0f64; 4];
        for (xf, x) in valid_f32.images.iter().zip(&valid_f64.images) {
            let x_hat = gen.generate(&enc.encode(xf)?)?;
            let x_hat64 = x_hat.mapv(|v| v as f64);
            let m = recon_metrics(x, &x_hat64, &e_ut, levels)?;
            sums[0] += m.psnr;
            sums[1] += m.ssim;
            sums[2] += m.iw_ssim;
            sums[3] += m.perc_dist;
        }
        let n = valid_f64.images.len() as f64;
        rows.push(ReconRow {
            scheme: scheme.to_string(),
            psnr: sums[0] / n,
            ssim: sums[1] / n,
            iw_ssim: sums[2] / n,
            perc_dist: sums[3] / n,
        });
    }
    write_json(&dir.join("reconstruction.json"), &rows)?;
    Ok(vec!["metrics/reconstruction.json".into()])
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CalibrationFile {
    threshold: f64,
}

fn embed_all(e_id: &IdentityEmbedder<f32>, images: &[ArrayD<f32>]) -> Result<Vec<EmbeddingVector>> {
    images.iter().map(|x| e_id.embed_identity(x)).collect()
}

fn load_pngs(dir: &Path, prefix: &str, indices: &[usize]) -> Result<Vec<ArrayD<f32>>> {
    indices.iter().map(|&i| imgio::load_png::<f32>(&dir.join(png_name(prefix, i)))).collect()
}

fn stage_risk(cfg: &PipelineConfig, root: &Path) -> Result<Vec<String>> {
    let dir = root.join("risk");
    clear_dir(&dir)?;
    let data = dataset_dir(root);
    let train = load_split::<f32>(&data, Split::Train)?;
    let valid = load_split::<f32>(&data, Split::Valid)?;
    let test = load_split::<f32>(&data, Split::Test)?;
    let subset: SubsetFile = read_json(&anon_dir(root).join("subset.json"))?;

    let (enc, gen) = load_cotrain_nets(root)?;
    let e_id = IdentityEmbedder::<f32>::load(&root.join("aux/identity.ckpt"))?;

    // Accept threshold calibrated once, on real-real pairs of the validation
    // split, then reused by every ablation.
    let valid_emb = embed_all(&e_id, &valid.images)?;
    let cal_pairs = build_pairs(&valid.patient_ids, PairKind::RealReal, cfg.eval.risk_seed)?;
    let mut cal_scores = Vec::with_capacity(cal_pairs.len());
    let mut cal_labels = Vec::with_capacity(cal_pairs.len());
    for p in &cal_pairs {
        cal_scores.push(pair_score(p, &valid_emb, &valid_emb)?);
        cal_labels.push(p.same_patient);
    }
    let threshold = calibrate_threshold(&cal_scores, &cal_labels)?;
    write_json(&dir.join("calibration.json"), &CalibrationFile { threshold })?;
    let mut outputs: Vec<String> = vec!["risk/calibration.json".into()];

    // Real-side galleries over the anonymization subsets.
    let test_real: Vec<ArrayD<f32>> =
        subset.test_indices.iter().map(|&i| test.images[i].clone()).collect();
    let test_pids: Vec<usize> = subset.test_indices.iter().map(|&i| test.patient_ids[i]).collect();
    let test_real_emb = embed_all(&e_id, &test_real)?;

    // MIA attacker: trained on real member/non-member features, where the
    // members are training images outside the anonymization subset and the
    // non-members are the validation split (unseen by the projection nets).
    let train_gallery = embed_all(&e_id, &train.images)?;
    let in_subset: std::collections::BTreeSet<usize> =
        subset.train_indices.iter().copied().collect();
    let mut attacker_feats = Vec::new();
    let mut attacker_labels = Vec::new();
    for (i, x) in train.images.iter().enumerate() {
        if !in_subset.contains(&i) {
            attacker_feats.push(mia_features(x, &enc, &gen, &e_id, &train_gallery)?);
            attacker_labels.push(true);
        }
    }
    for x in &valid.images {
        attacker_feats.push(mia_features(x, &enc, &gen, &e_id, &train_gallery)?);
        attacker_labels.push(false);
    }

    for tag in &cfg.eval.ablations {
        let tag_dir = anon_dir(root).join(tag);
        let anon_test = load_pngs(&tag_dir.join("test"), "a", &subset.test_indices)?;
        let anon_test_emb = embed_all(&e_id, &anon_test)?;

        let (lc_nr, lc_na) = local_cloaking(&test_real_emb, &anon_test_emb)?;
        let hr = hidden_rate(&test_real_emb, &anon_test_emb)?;

        let mut linkability = BTreeMap::new();
        for kind in [PairKind::RealReal, PairKind::Inner, PairKind::Outer] {
            let pairs = build_pairs(&test_pids, kind, cfg.eval.risk_seed)?;
            let metrics = evaluate_pairs(&pairs, &test_real_emb, &anon_test_emb, threshold)?;
            linkability.insert(kind.to_string(), metrics);
        }

        let anon_train = load_pngs(&tag_dir.join("train"), "a", &subset.train_indices)?;
        let mut target_feats = Vec::new();
        let mut target_labels = Vec::new();
        for x in &anon_train {
            target_feats.push(mia_features(x, &enc, &gen, &e_id, &train_gallery)?);
            target_labels.push(true);
        }
        for x in &anon_test {
            target_feats.push(mia_features(x, &enc, &gen, &e_id, &train_gallery)?);
            target_labels.push(false);
        }
        let mia =
            mia_eval(&attacker_feats, &attacker_labels, &target_feats, &target_labels, &cfg.eval.mia)?;

        let report = RiskReport { hr, lc_nr, lc_na, linkability, mia: Some(mia) };
        write_json(&dir.join(tag).join("report.json"), &report)?;
        outputs.push(format!("risk/{tag}/report.json"));
    }

    // Utility preservation: a fresh classifier per training variant, all
    // scored on the real test split.
    let train_sub_imgs: Vec<ArrayD<f32>> =
        subset.train_indices.iter().map(|&i| train.images[i].clone()).collect();
    let train_sub_labels: Vec<Vec<f64>> = subset
        .train_indices
        .iter()
        .map(|&i| train.labels[i].iter().map(|&b| b as f64).collect())
        .collect();
    let recon_train = load_pngs(&anon_dir(root).join("recon/train"), "r", &subset.train_indices)?;

    let mut variant_images: Vec<(String, Vec<ArrayD<f32>>)> = vec![
        ("real".into(), train_sub_imgs),
        ("recon".into(), recon_train),
    ];
    for tag in &cfg.eval.ablations {
        let imgs = load_pngs(&anon_dir(root).join(tag).join("train"), "a", &subset.train_indices)?;
        variant_images.push((tag.clone(), imgs));
    }
    let variants: Vec<UtilityVariant<'_, f32>> = variant_images
        .iter()
        .map(|(name, imgs)| UtilityVariant { name: name.clone(), images: imgs, labels: &train_sub_labels })
        .collect();
    let mut ut_cfg = cfg.eval.ut_embedder.clone();
    ut_cfg.n_out = train.n_labels;
    let utility = crate::risk::utility_preservation_eval(
        &variants,
        &test.images,
        &test.labels,
        &ut_cfg,
        &cfg.eval.utility_opts,
    )?;
    let utility_rows: Vec<UtilityRow> = utility
        .into_iter()
        .map(|(variant, scores)| UtilityRow { variant, scores })
        .collect();
    write_json(&dir.join("utility.json"), &utility_rows)?;
    outputs.push("risk/utility.json".into());

    Ok(outputs)
}

// ---------------------------------------------------------------------------
// Final report
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UtilityRow {
    pub variant: String,
    pub scores: UtilityScores,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub resolution: usize,
    pub n_labels: usize,
    pub train_patients: usize,
    pub valid_patients: usize,
    pub test_patients: usize,
    pub train_images: usize,
    pub valid_images: usize,
    pub test_images: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SinglingRow {
    pub variant: String,
    pub lc_nr: usize,
    pub lc_na: usize,
    pub hr: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LinkRow {
    pub variant: String,
    pub pairs: String,
    pub tar: f64,
    pub far: f64,
    pub acc: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MiaRow {
    pub variant: String,
    pub attacker_train_acc: f64,
    pub anon_target_acc: f64,
}

/// Consolidated run outcome: everything the tables show, nothing volatile.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FinalReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub dataset: DatasetSummary,
    pub reconstruction: Vec<ReconRow>,
    pub utility: Vec<UtilityRow>,
    pub singling_out: Vec<SinglingRow>,
    pub threshold: f64,
    pub linkability: Vec<LinkRow>,
    pub mia: Vec<MiaRow>,
}

fn stage_report(cfg: &PipelineConfig, root: &Path) -> Result<Vec<String>> {
    let data = dataset_dir(root);
    let mut sizes = [0usize; 3];
    for (k, split) in Split::ALL.into_iter().enumerate() {
        sizes[k] = phantom::load_manifest(&data, split)?.entries.len();
    }
    let dataset = DatasetSummary {
        resolution: cfg.dataset.resolution,
        n_labels: cfg.dataset.n_labels,
        train_patients: cfg.dataset.train_patients,
        valid_patients: cfg.dataset.valid_patients,
        test_patients: cfg.dataset.test_patients,
        train_images: sizes[0],
        valid_images: sizes[1],
        test_images: sizes[2],
    };

    let reconstruction: Vec<ReconRow> = read_json(&root.join("metrics/reconstruction.json"))?;
    let cal: CalibrationFile = read_json(&root.join("risk/calibration.json"))?;
    let utility: Vec<UtilityRow> = read_json(&root.join("risk/utility.json"))?;

    let mut singling_out = Vec::new();
    let mut linkability = Vec::new();
    let mut mia = Vec::new();
    for (k, tag) in cfg.eval.ablations.iter().enumerate() {
        let rep: RiskReport = read_json(&root.join("risk").join(tag).join("report.json"))?;
        singling_out.push(SinglingRow { variant: tag.clone(), lc_nr: rep.lc_nr, lc_na: rep.lc_na, hr: rep.hr });
        // The real-real row depends only on the real gallery, so report it
        // once, from the first ablation.
        if k == 0 {
            if let Some(m) = rep.linkability.get(&PairKind::RealReal.to_string()) {
                linkability.push(LinkRow {
                    variant: "real".into(),
                    pairs: PairKind::RealReal.to_string(),
                    tar: m.tar,
                    far: m.far,
                    acc: m.acc,
                    f1: m.f1,
                });
            }
        }
        for kind in [PairKind::Inner, PairKind::Outer] {
            if let Some(m) = rep.linkability.get(&kind.to_string()) {
                linkability.push(LinkRow {
                    variant: tag.clone(),
                    pairs: kind.to_string(),
                    tar: m.tar,
                    far: m.far,
                    acc: m.acc,
                    f1: m.f1,
                });
            }
        }
        if let Some(m) = rep.mia {
            mia.push(MiaRow {
                variant: tag.clone(),
                attacker_train_acc: m.train_acc,
                anon_target_acc: m.target_acc,
            });
        }
    }

    let report = FinalReport {
        schema_version: crate::config::SCHEMA_VERSION,
        config_hash: cfg.hash(),
        dataset,
        reconstruction,
        utility,
        singling_out,
        threshold: cal.threshold,
        linkability,
        mia,
    };
    write_json(&root.join("report.json"), &report)?;
    std::fs::write(root.join("tables.txt"), render_tables(&report))
        .map_err(|e| Error::io(root.join("tables.txt"), e))?;
    Ok(vec!["report.json".into(), "tables.txt".into()])
}

fn fmt4(x: f64) -> String {
    format!("{x:.4}")
}

/// Plain-text mirror of the report tables.
pub fn render_tables(r: &FinalReport) -> String {
    use std::fmt::Write;
    let mut s = String::new();
    let rule = |s: &mut String, title: &str| {
        writeln!(s, "{title}").unwrap();
        writeln!(s, "{}", "-".repeat(title.len())).unwrap();
    };

    writeln!(
        s,
        "run {} | {}x{} px | patients {}/{}/{} | images {}/{}/{} | {} labels",
        r.config_hash,
        r.dataset.resolution,
        r.dataset.resolution,
        r.dataset.train_patients,
        r.dataset.valid_patients,
        r.dataset.test_patients,
        r.dataset.train_images,
        r.dataset.valid_images,
        r.dataset.test_images,
        r.dataset.n_labels
    )
    .unwrap();
    writeln!(s).unwrap();

    rule(&mut s, "Table 1: reconstruction quality (validation split)");
    writeln!(s, "{:<10} {:>9} {:>8} {:>8} {:>10}", "scheme", "PSNR[dB]", "SSIM", "IW-SSIM", "perc-dist").unwrap();
    for row in &r.reconstruction {
        writeln!(
            s,
            "{:<10} {:>9} {:>8} {:>8} {:>10}",
            row.scheme,
            fmt4(row.psnr),
            fmt4(row.ssim),
            fmt4(row.iw_ssim),
            fmt4(row.perc_dist)
        )
        .unwrap();
    }
    writeln!(s).unwrap();

    rule(&mut s, "Table 2: utility preservation (classifiers scored on the real test split)");
    writeln!(s, "{:<12} {:>8} {:>8} {:>8} {:>8}", "trained on", "acc", "AP", "AUROC", "F1").unwrap();
    for row in &r.utility {
        writeln!(
            s,
            "{:<12} {:>8} {:>8} {:>8} {:>8}",
            row.variant,
            fmt4(row.scores.acc),
            fmt4(row.scores.ap),
            fmt4(row.scores.auroc),
            fmt4(row.scores.f1)
        )
        .unwrap();
    }
    writeln!(s).unwrap();

    rule(&mut s, "Table 3: singling out (test subset)");
    writeln!(s, "{:<10} {:>7} {:>7} {:>8}", "variant", "LC(NR)", "LC(NA)", "HR").unwrap();
    for row in &r.singling_out {
        writeln!(s, "{:<10} {:>7} {:>7} {:>8}", row.variant, row.lc_nr, row.lc_na, fmt4(row.hr)).unwrap();
    }
    writeln!(s).unwrap();

    rule(&mut s, &format!("Table 4: linkability (accept threshold {})", fmt4(r.threshold)));
    writeln!(s, "{:<10} {:<10} {:>8} {:>8} {:>8} {:>8}", "variant", "pairs", "TAR", "FAR", "acc", "F1").unwrap();
    for row in &r.linkability {
        writeln!(
            s,
            "{:<10} {:<10} {:>8} {:>8} {:>8} {:>8}",
            row.variant,
            row.pairs,
            fmt4(row.tar),
            fmt4(row.far),
            fmt4(row.acc),
            fmt4(row.f1)
        )
        .unwrap();
    }
    writeln!(s).unwrap();

    rule(&mut s, "Table 5: membership inference");
    writeln!(s, "{:<10} {:>19} {:>16}", "variant", "attacker-train-acc", "anon-target-acc").unwrap();
    for row in &r.mia {
        writeln!(
            s,
            "{:<10} {:>19} {:>16}",
            row.variant,
            fmt4(row.attacker_train_acc),
            fmt4(row.anon_target_acc)
        )
        .unwrap();
    }
    s
}

// ---------------------------------------------------------------------------
// Figures
// ---------------------------------------------------------------------------

/// Stitches rows of equally sized [1, H, W] images into one grid image with
/// 2-pixel white separators.
fn stitch_grid(rows: &[Vec<ArrayD<f64>>]) -> Result<ArrayD<f64>> {
    const PAD: usize = 2;
    if rows.is_empty() || rows[0].is_empty() {
        return Err(Error::Config("figure grid needs at least one cell".into()));
    }
    let n_cols = rows[0].len();
    let shape = rows[0][0].shape().to_vec();
    for row in rows {
        if row.len() != n_cols {
            return Err(Error::Config("figure grid rows have unequal lengths".into()));
        }
        for cell in row {
            if cell.shape() != &shape[..] {
                return Err(Error::shape(format!("{shape:?}"), format!("{:?}", cell.shape())));
            }
        }
    }
    let (h, w) = (shape[1], shape[2]);
    let gh = rows.len() * h + (rows.len() - 1) * PAD;
    let gw = n_cols * w + (n_cols - 1) * PAD;
    let mut grid = ArrayD::from_elem(ndarray::IxDyn(&[1, gh, gw]), 1.0f64);
    for (ri, row) in rows.iter().enumerate() {
        for (ci, cell) in row.iter().enumerate() {
            let y0 = ri * (h + PAD);
            let x0 = ci * (w + PAD);
            for y in 0..h {
                for x in 0..w {
                    grid[[0, y0 + y, x0 + x]] = cell[[0, y, x]];
                }
            }
        }
    }
    Ok(grid)
}

fn require(root: &Path, rel: &str) -> Result<PathBuf> {
    let p = root.join(rel);
    if !p.exists() {
        return Err(Error::Dependency { stage: "figures".into(), missing: rel.to_string() });
    }
    Ok(p)
}

/// Renders the reconstruction and anonymization grids from a completed run
/// directory. Emission is deterministic and idempotent: the same run always
/// produces byte-identical PNGs.
pub fn emit_figures(root: &Path) -> Result<Vec<PathBuf>> {
    let cfg = PipelineConfig::load(&require(root, "config.json")?)?;
    let data = dataset_dir(root);
    require(root, "dataset/valid.manifest")?;
    let fig_dir = root.join("figures");
    std::fs::create_dir_all(&fig_dir).map_err(|e| Error::io(&fig_dir, e))?;
    let mut written = Vec::new();
    let mut legend = String::new();

    // Reconstruction grid: validation samples through each trained scheme.
    {
        let valid = load_split::<f32>(&data, Split::Valid)?;
        let picks = spread_subset(&valid.patient_ids, cfg.eval.figure_samples.min(valid.len()));
        let mut nets = Vec::new();
        for scheme in schemes(&cfg) {
            require(root, &format!("project/{scheme}/encoder.ckpt"))?;
            let enc = Encoder::<f32>::load(&scheme_dir(root, scheme).join("encoder.ckpt"))?;
            let gen = Generator::<f32>::load(&scheme_dir(root, scheme).join("generator.ckpt"))?;
            nets.push((scheme, enc, gen));
        }
        let mut rows = Vec::new();
        for &i in &picks {
            let mut row = vec![valid.images[i].mapv(|v| v as f64)];
            for (_, enc, gen) in &nets {
                let x_hat = gen.generate(&enc.encode(&valid.images[i])?)?;
                row.push(x_hat.mapv(|v| imgio::quantize8(v) as f64));
            }
            rows.push(row);
        }
        let grid = stitch_grid(&rows)?;
        let path = fig_dir.join("recon_grid.png");
        imgio::save_png(&path, &grid)?;
        written.push(path);
        let mut cols = vec!["real".to_string()];
        cols.extend(nets.iter().map(|(s, _, _)| format!("recon {s}")));
        legend.push_str(&format!(
            "recon_grid.png: rows = validation samples {picks:?}, columns = {}\n",
            cols.join(" | ")
        ));
    }

    // Anonymization grid: real, reconstruction, then one column per ablation.
    {
        let subset: SubsetFile = read_json(&require(root, "anonymize/subset.json")?)?;
        let test = load_split::<f64>(&data, Split::Test)?;
        let picks: Vec<usize> = subset
            .test_indices
            .iter()
            .copied()
            .take(cfg.eval.figure_samples.min(subset.test_indices.len()))
            .collect();
        let mut rows = Vec::new();
        for &i in &picks {
            let mut row = vec![test.images[i].clone()];
            row.push(imgio::load_png::<f64>(
                &require(root, &format!("anonymize/recon/test/{}", png_name("r", i)))?,
            )?);
            for tag in &cfg.eval.ablations {
                row.push(imgio::load_png::<f64>(
                    &require(root, &format!("anonymize/{tag}/test/{}", png_name("a", i)))?,
                )?);
            }
            rows.push(row);
        }
        let grid = stitch_grid(&rows)?;
        let path = fig_dir.join("anon_grid.png");
        imgio::save_png(&path, &grid)?;
        written.push(path);
        let mut cols = vec!["real".to_string(), "recon".to_string()];
        cols.extend(cfg.eval.ablations.iter().map(|t| format!("anon {t}")));
        legend.push_str(&format!(
            "anon_grid.png: rows = test-subset samples {picks:?}, columns = {}\n",
            cols.join(" | ")
        ));
    }

    let legend_path = fig_dir.join("legend.txt");
    std::fs::write(&legend_path, legend).map_err(|e| Error::io(&legend_path, e))?;
    written.push(legend_path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro() -> PipelineConfig {
        let mut cfg = PipelineConfig::smoke();
        cfg.dataset.train_patients = 4;
        cfg.dataset.valid_patients = 2;
        cfg.dataset.test_patients = 3;
        cfg.dataset.images_per_patient = 2;
        cfg.dataset.min_images_per_patient = 2;
        cfg.projection.steps = 6;
        cfg.projection.checkpoint_every = 10;
        cfg.eval.aux_opts.steps = 10;
        cfg.eval.aux_opts.batch_size = 4;
        cfg.eval.utility_opts.steps = 10;
        cfg.eval.utility_opts.batch_size = 4;
        cfg.eval.anon.steps = 4;
        cfg.eval.n_anon_test = 6;
        cfg.eval.n_anon_train = 4;
        cfg.eval.figure_samples = 2;
        cfg.reseed(41);
        cfg
    }

    fn read_bytes(p: &Path) -> Vec<u8> {
        std::fs::read(p).unwrap()
    }

    #[test]
    fn spread_subset_is_deterministic_and_patient_balanced() {
        let pids = [7, 7, 7, 7, 9, 9, 9, 9, 11, 11, 11, 11];
        assert_eq!(spread_subset(&pids, 0), (0..12).collect::<Vec<_>>());
        assert_eq!(spread_subset(&pids, 12), (0..12).collect::<Vec<_>>());
        assert_eq!(spread_subset(&pids, 20), (0..12).collect::<Vec<_>>());
        // One image per patient first, then the second round.
        assert_eq!(spread_subset(&pids, 3), vec![0, 4, 8]);
        assert_eq!(spread_subset(&pids, 5), vec![0, 1, 4, 5, 8]);
        let a = spread_subset(&pids, 7);
        assert_eq!(a, spread_subset(&pids, 7));
        assert_eq!(a.len(), 7);
    }

    #[test]
    fn short_hash_is_stable_and_sensitive() {
        let h = short_hash(b"abc");
        assert_eq!(h.len(), 16);
        assert_eq!(h, short_hash(b"abc"));
        assert_ne!(h, short_hash(b"abd"));
    }

    #[test]
    fn stage_parsing_round_trips() {
        for s in Stage::ALL {
            assert_eq!(Stage::from_str(s.name()).unwrap(), s);
        }
        assert!(Stage::from_str("bogus").is_err());
    }

    #[test]
    fn micro_pipeline_end_to_end() {
        let cfg = micro();
        let dir1 = tempfile::tempdir().unwrap();
        let root1 = dir1.path();

        // Full run executes every stage and leaves the documented artifacts.
        let out = run_pipeline(&cfg, root1, &RunOptions::default()).unwrap();
        let all: Vec<String> = Stage::ALL.iter().map(|s| s.name().to_string()).collect();
        assert_eq!(out.ran, all);
        for rel in [
            "config.json",
            "manifest.json",
            "dataset/dataset.json",
            "aux/identity.ckpt",
            "aux/utility.ckpt",
            "project/cotrain/encoder.ckpt",
            "project/etrain/encoder.ckpt",
            "anonymize/subset.json",
            "anonymize/ut/records.json",
            "anonymize/id/records.json",
            "anonymize/ut+id/records.json",
            "metrics/reconstruction.json",
            "risk/calibration.json",
            "risk/ut/report.json",
            "risk/utility.json",
            "report.json",
            "tables.txt",
        ] {
            assert!(root1.join(rel).exists(), "missing {rel}");
        }

        // The report covers every table with the configured variants.
        let report: FinalReport = read_json(&root1.join("report.json")).unwrap();
        assert_eq!(report.reconstruction.len(), 2);
        assert_eq!(report.utility.len(), 5, "real, recon, and three ablations");
        assert_eq!(report.singling_out.len(), 3);
        assert_eq!(report.linkability.len(), 7, "one real-real row plus inner/outer per ablation");
        assert_eq!(report.mia.len(), 3);
        assert_eq!(report.config_hash, cfg.hash());
        let tables = std::fs::read_to_string(root1.join("tables.txt")).unwrap();
        for needle in ["Table 1", "Table 2", "Table 3", "Table 4", "Table 5", "cotrain", "etrain", "ut+id"] {
            assert!(tables.contains(needle), "tables.txt missing {needle:?}");
        }

        // Identical rerun is a no-op.
        let again = run_pipeline(&cfg, root1, &RunOptions::default()).unwrap();
        assert!(again.ran.is_empty(), "expected full skip, reran {:?}", again.ran);

        // A second run root reproduces the reports byte for byte.
        let dir2 = tempfile::tempdir().unwrap();
        let out2 = run_pipeline(&cfg, dir2.path(), &RunOptions::default()).unwrap();
        assert_eq!(out2.ran, all);
        for rel in ["report.json", "tables.txt", "config.json", "risk/utility.json", "metrics/reconstruction.json"] {
            assert_eq!(
                read_bytes(&root1.join(rel)),
                read_bytes(&dir2.path().join(rel)),
                "{rel} differs between identical runs"
            );
        }
        let sample_png = "anonymize/ut+id/test/a_0000.png";
        assert_eq!(read_bytes(&root1.join(sample_png)), read_bytes(&dir2.path().join(sample_png)));

        // Changing one stage's config reruns exactly the affected suffix.
        let mut cfg2 = cfg.clone();
        cfg2.eval.anon.steps += 1;
        let partial = run_pipeline(&cfg2, root1, &RunOptions::default()).unwrap();
        assert_eq!(partial.ran, vec!["anonymize", "risk", "report"]);

        // Figures are deterministic and idempotent.
        let figs = emit_figures(root1).unwrap();
        assert_eq!(figs.len(), 3);
        let first: Vec<Vec<u8>> = figs.iter().map(|p| read_bytes(p)).collect();
        let figs2 = emit_figures(root1).unwrap();
        let second: Vec<Vec<u8>> = figs2.iter().map(|p| read_bytes(p)).collect();
        assert_eq!(first, second);
        let legend = std::fs::read_to_string(root1.join("figures/legend.txt")).unwrap();
        assert!(legend.contains("anon ut+id"));

        // Forcing a single stage reruns just that stage.
        let forced = run_pipeline(&cfg2, root1, &RunOptions { only: Some(Stage::Metrics), force: true }).unwrap();
        assert_eq!(forced.ran, vec!["metrics"]);
    }

    #[test]
    fn only_with_missing_dependencies_is_a_clear_error() {
        let cfg = micro();
        let dir = tempfile::tempdir().unwrap();
        let err = run_pipeline(&cfg, dir.path(), &RunOptions { only: Some(Stage::Risk), force: false })
            .unwrap_err();
        match err {
            Error::Dependency { stage, missing } => {
                assert_eq!(stage, "risk");
                assert!(missing.contains("dataset"), "unhelpful missing path: {missing}");
            }
            other => panic!("expected dependency error, got {other:?}"),
        }
        // Figures on an empty directory fail the same way.
        let err = emit_figures(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Dependency { .. }));
    }
}
