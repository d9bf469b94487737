//! Command-line front end: each subcommand drives one pipeline stage against
//! explicit artifact paths, and `pipeline run` chains them under one output
//! root with a run manifest.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use cloak_core::anonymize::{optimize_latent, AnonNets};
use cloak_core::config::PipelineConfig;
use cloak_core::error::{Error, Result};
use cloak_core::imgio;
use cloak_core::metrics::{max_levels, perceptual_distance, psnr, ssim, iw_ssim_with, IW_LEVELS};
use cloak_core::nets::{Encoder, Generator, IdentityEmbedder, UtilityEmbedder};
use cloak_core::phantom::{self, load_split, Split};
use cloak_core::pipeline::{
    emit_figures, run_pipeline, spread_subset, AnonRecord, AnonRecords, RunOptions, Stage,
    SubsetFile,
};
use cloak_core::projection::{self, Scheme};
use cloak_core::risk::{
    build_pairs, calibrate_threshold, evaluate_pairs, hidden_rate, local_cloaking, mia_eval,
    mia_features, pair_score, PairKind, RiskReport,
};

const OUT_ROOT_ENV: &str = "CLOAK_OUT_ROOT";

#[derive(Parser)]
#[command(
    name = "cloak",
    version,
    about = "Two-stage generative image anonymization with a privacy-risk audit"
)]
struct Cli {
    /// Override the stage seed (reseeds the whole run for `pipeline run`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Phantom dataset operations.
    Dataset {
        #[command(subcommand)]
        cmd: DatasetCmd,
    },
    /// Auxiliary identity/utility embedder training.
    Aux {
        #[command(subcommand)]
        cmd: AuxCmd,
    },
    /// Latent-space projection training.
    Project {
        #[command(subcommand)]
        cmd: ProjectCmd,
    },
    /// Stage-two latent anonymization.
    Anonymize {
        #[command(subcommand)]
        cmd: AnonymizeCmd,
    },
    /// Image-quality metrics.
    Metrics {
        #[command(subcommand)]
        cmd: MetricsCmd,
    },
    /// Privacy-risk audits.
    Risk {
        #[command(subcommand)]
        cmd: RiskCmd,
    },
    /// End-to-end orchestration.
    Pipeline {
        #[command(subcommand)]
        cmd: PipelineCmd,
    },
    /// Figure grids from a completed run.
    Figures {
        #[command(subcommand)]
        cmd: FiguresCmd,
    },
}

#[derive(Subcommand)]
enum DatasetCmd {
    /// Render the synthetic splits and manifests.
    Build(DatasetBuild),
}

#[derive(Args)]
struct DatasetBuild {
    /// Pipeline config JSON supplying the dataset section (defaults otherwise).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: $CLOAK_OUT_ROOT/dataset).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum AuxCmd {
    /// Train the identity embedder on training-split patient labels.
    TrainId(AuxTrain),
    /// Train the utility embedder on training-split pathology labels.
    TrainUt(AuxTrain),
}

#[derive(Args)]
struct AuxTrain {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (default: $CLOAK_OUT_ROOT/dataset).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Checkpoint path (default: $CLOAK_OUT_ROOT/aux/<kind>.ckpt).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the training-step budget.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Subcommand)]
enum ProjectCmd {
    /// Train the encoder/generator/discriminator stack.
    Train(ProjectTrain),
}

#[derive(Args)]
struct ProjectTrain {
    /// Projection scheme: cotrain or etrain.
    #[arg(long)]
    scheme: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Utility-embedder checkpoint for the perceptual loss.
    #[arg(long)]
    utility: Option<PathBuf>,
    /// Pre-trained generator checkpoint (required for etrain).
    #[arg(long)]
    init_generator: Option<PathBuf>,
    /// Output directory (default: $CLOAK_OUT_ROOT/project/<scheme>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from an existing trainer checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Subcommand)]
enum AnonymizeCmd {
    /// Optimize latent codes for a set of split images.
    Run(AnonymizeRun),
}

#[derive(Args)]
struct AnonymizeRun {
    /// Loss selection: ut, id, or ut+id.
    #[arg(long)]
    losses: String,
    /// Identity hinge margin override.
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Which split to anonymize.
    #[arg(long, default_value = "test")]
    split: String,
    /// How many images (patient-balanced; 0 = the whole split).
    #[arg(long, default_value_t = 0)]
    count: usize,
    /// Explicit comma-separated manifest indices (overrides --count).
    #[arg(long)]
    indices: Option<String>,
    #[arg(long)]
    encoder: Option<PathBuf>,
    #[arg(long)]
    generator: Option<PathBuf>,
    #[arg(long)]
    identity: Option<PathBuf>,
    #[arg(long)]
    utility: Option<PathBuf>,
    /// Output directory (default: $CLOAK_OUT_ROOT/anonymize/<losses>/<split>).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum MetricsCmd {
    /// Reconstruction metrics between image pairs.
    Compare(MetricsCompare),
}

#[derive(Args)]
struct MetricsCompare {
    /// Reference image.
    #[arg(long, required_unless_present = "pairs", conflicts_with = "pairs")]
    a: Option<PathBuf>,
    /// Distorted image.
    #[arg(long, required_unless_present = "pairs", conflicts_with = "pairs")]
    b: Option<PathBuf>,
    /// Tab-separated file of image path pairs, one per line.
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Utility-embedder checkpoint enabling the perceptual distance column.
    #[arg(long)]
    utility: Option<PathBuf>,
    /// Write the JSON rows here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum RiskCmd {
    /// Singling-out, linkability, and (optionally) membership inference.
    Audit(RiskAudit),
}

#[derive(Args)]
struct RiskAudit {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Directory of anonymized PNGs (a_XXXX.png) for the audited split.
    #[arg(long)]
    anon: PathBuf,
    /// Split the anonymized images came from.
    #[arg(long, default_value = "test")]
    split: String,
    /// subset.json restricting indices (default: the whole split).
    #[arg(long)]
    subset: Option<PathBuf>,
    #[arg(long)]
    identity: Option<PathBuf>,
    /// Projection checkpoints plus an anonymized train-split directory
    /// enable the membership-inference attack.
    #[arg(long)]
    encoder: Option<PathBuf>,
    #[arg(long)]
    generator: Option<PathBuf>,
    #[arg(long)]
    anon_train: Option<PathBuf>,
    /// Report JSON output path.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Subcommand)]
enum PipelineCmd {
    /// Run every stage (or one stage) under the output root.
    Run(PipelineRun),
}

#[derive(Args)]
struct PipelineRun {
    /// Pipeline config JSON (default: the built-in smoke configuration).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output root (default: $CLOAK_OUT_ROOT).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run a single stage: dataset, aux, project, anonymize, metrics, risk, report.
    #[arg(long)]
    only: Option<String>,
    /// Rerun stages even when the manifest says they are up to date.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum FiguresCmd {
    /// Emit figure grids into <run>/figures.
    Emit(FiguresEmit),
}

#[derive(Args)]
struct FiguresEmit {
    /// Run directory (default: $CLOAK_OUT_ROOT).
    #[arg(long)]
    run: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn out_root(explicit: Option<PathBuf>) -> Result<PathBuf> {
    explicit
        .or_else(|| std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from))
        .ok_or_else(|| Error::Config(format!("pass --out or set {OUT_ROOT_ENV}")))
}

fn under_root(explicit: Option<PathBuf>, rel: &str) -> Result<PathBuf> {
    match explicit {
        Some(p) => Ok(p),
        None => Ok(out_root(None)?.join(rel)),
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<PipelineConfig> {
    let cfg = match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn parse_split(s: &str) -> Result<Split> {
    s.parse()
}

fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.cmd {
        Cmd::Dataset { cmd: DatasetCmd::Build(a) } => dataset_build(a, seed),
        Cmd::Aux { cmd: AuxCmd::TrainId(a) } => aux_train(a, seed, true),
        Cmd::Aux { cmd: AuxCmd::TrainUt(a) } => aux_train(a, seed, false),
        Cmd::Project { cmd: ProjectCmd::Train(a) } => project_train(a, seed),
        Cmd::Anonymize { cmd: AnonymizeCmd::Run(a) } => anonymize_run(a, seed),
        Cmd::Metrics { cmd: MetricsCmd::Compare(a) } => metrics_compare(a),
        Cmd::Risk { cmd: RiskCmd::Audit(a) } => risk_audit(a, seed),
        Cmd::Pipeline { cmd: PipelineCmd::Run(a) } => pipeline_run(a, seed),
        Cmd::Figures { cmd: FiguresCmd::Emit(a) } => figures_emit(a),
    }
}

fn dataset_build(a: DatasetBuild, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(s) = seed {
        cfg.dataset.seed = s;
    }
    let out = under_root(a.out, "dataset")?;
    let manifests = phantom::build_dataset(&cfg.dataset, &out)?;
    for m in &manifests {
        println!("{}: {} images", m.split.name(), m.entries.len());
    }
    println!("dataset written to {}", out.display());
    Ok(())
}

fn aux_train(a: AuxTrain, seed: Option<u64>, identity: bool) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let dataset = under_root(a.dataset, "dataset")?;
    let kind = if identity { "identity" } else { "utility" };
    let out = under_root(a.out, &format!("aux/{kind}.ckpt"))?;
    let train = load_split::<f32>(&dataset, Split::Train)?;

    let mut opts = cfg.eval.aux_opts.clone();
    if let Some(s) = seed {
        opts.seed = s;
    }
    if let Some(n) = a.steps {
        opts.steps = n;
    }

    if identity {
        let (class_ids, n_classes) = train.contiguous_ids();
        let mut emb_cfg = cfg.eval.id_embedder.clone();
        emb_cfg.n_out = n_classes;
        let net = IdentityEmbedder::train(
            emb_cfg.clone(),
            cfg.eval.id_margin,
            cfg.eval.id_scale,
            &train.images,
            &class_ids,
            &opts,
        )?;
        net.save(&out)?;
        let sidecar = serde_json::json!({
            "embedder": emb_cfg,
            "margin": cfg.eval.id_margin,
            "scale": cfg.eval.id_scale,
            "opts": opts,
        });
        write_json_pretty(&out.with_extension("config.json"), &sidecar)?;
    } else {
        let mut emb_cfg = cfg.eval.ut_embedder.clone();
        emb_cfg.n_out = train.n_labels;
        let net = UtilityEmbedder::train(emb_cfg.clone(), &train.images, &train.float_labels(), &opts)?;
        net.save(&out)?;
        let sidecar = serde_json::json!({ "embedder": emb_cfg, "opts": opts });
        write_json_pretty(&out.with_extension("config.json"), &sidecar)?;
    }
    println!("{kind} embedder written to {}", out.display());
    Ok(())
}

fn project_train(a: ProjectTrain, seed: Option<u64>) -> Result<()> {
    let scheme: Scheme = a.scheme.parse()?;
    let mut cfg = load_config(&a.config)?;
    if let Some(s) = seed {
        cfg.projection.seed = s;
    }
    if let Some(n) = a.steps {
        cfg.projection.steps = n;
    }
    let dataset = under_root(a.dataset, "dataset")?;
    let out = under_root(a.out, &format!("project/{scheme}"))?;

    let e_ut = match &a.utility {
        Some(p) => Some(UtilityEmbedder::<f32>::load(p)?),
        None => None,
    };
    if e_ut.is_none() && cfg.projection.weights.lambda_perc > 0.0 {
        return Err(Error::Dependency {
            stage: "project/train".into(),
            missing: "--utility checkpoint (lambda_perc > 0)".into(),
        });
    }
    let report = projection::train::<f32>(
        &cfg.projection,
        scheme,
        &dataset,
        e_ut.as_ref(),
        a.init_generator.as_deref(),
        &out,
        a.resume,
    )?;
    write_json_pretty(&out.join("config.json"), &cfg.projection)?;
    println!(
        "{scheme} trained for {} steps | val PSNR {:.3} dB | val IW-SSIM {:.4}",
        report.steps, report.val_psnr_mean, report.val_iw_ssim_mean
    );
    println!("checkpoints in {}", out.display());
    Ok(())
}

fn parse_indices(spec: &str) -> Result<Vec<usize>> {
    spec.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad index {s:?} in --indices")))
        })
        .collect()
}

fn anonymize_run(a: AnonymizeRun, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let mut acfg = cfg.anon_for_tag(&a.losses)?;
    if let Some(m) = a.margin {
        acfg.margin = m;
    }
    if let Some(n) = a.steps {
        acfg.steps = n;
    }
    if let Some(lr) = a.lr {
        acfg.lr = lr;
    }
    if let Some(s) = seed {
        acfg.seed = s;
    }
    acfg.validate()?;

    let split = parse_split(&a.split)?;
    let dataset = under_root(a.dataset, "dataset")?;
    let data = load_split::<f32>(&dataset, split)?;
    let indices = match &a.indices {
        Some(spec) => {
            let idx = parse_indices(spec)?;
            for &i in &idx {
                if i >= data.len() {
                    return Err(Error::Config(format!(
                        "index {i} out of range for {} images",
                        data.len()
                    )));
                }
            }
            idx
        }
        None => spread_subset(&data.patient_ids, a.count),
    };

    let enc = Encoder::<f32>::load(&under_root(a.encoder, "project/cotrain/encoder.ckpt")?)?;
    let gen = Generator::<f32>::load(&under_root(a.generator, "project/cotrain/generator.ckpt")?)?;
    let e_id = IdentityEmbedder::<f32>::load(&under_root(a.identity, "aux/identity.ckpt")?)?;
    let e_ut = UtilityEmbedder::<f32>::load(&under_root(a.utility, "aux/utility.ckpt")?)?;
    let nets = AnonNets { generator: &gen, e_id: &e_id, e_ut: &e_ut };

    let out = under_root(a.out, &format!("anonymize/{}/{}", acfg.losses_tag(), split.name()))?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;

    let mut records = Vec::with_capacity(indices.len());
    for &i in &indices {
        let w0 = enc.encode(&data.images[i])?;
        let res = optimize_latent(&nets, &w0, &data.images[i], &acfg)?;
        if let Some(step) = res.aborted_at {
            return Err(Error::NonFinite { step, context: format!("anonymize image {i}") });
        }
        imgio::save_png(&out.join(format!("a_{i:04}.png")), &res.x_a)?;
        records.push(AnonRecord {
            index: i,
            patient_id: data.patient_ids[i],
            final_loss: res.trajectory.last().copied(),
            identity_cosine: res.achieved_identity_cosine,
            utility_distance: res.achieved_utility_distance,
        });
    }
    let bundle = AnonRecords {
        tag: acfg.losses_tag().to_string(),
        test: if split == Split::Test { records.clone() } else { Vec::new() },
        train: if split == Split::Test { Vec::new() } else { records.clone() },
    };
    write_json_pretty(&out.join("records.json"), &bundle)?;
    write_json_pretty(&out.join("config.json"), &acfg)?;
    println!("anonymized {} {} images with losses {} into {}", records.len(), split.name(), acfg.losses_tag(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct CompareRow {
    a: String,
    b: String,
    psnr: f64,
    ssim: f64,
    iw_ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    perc_dist: Option<f64>,
}

fn metrics_compare(a: MetricsCompare) -> Result<()> {
    let pair_list: Vec<(PathBuf, PathBuf)> = match (&a.pairs, &a.a, &a.b) {
        (Some(file), _, _) => {
            let text = std::fs::read_to_string(file).map_err(|e| Error::io(file, e))?;
            let mut v = Vec::new();
            for (lineno, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let mut parts = line.split('\t');
                match (parts.next(), parts.next()) {
                    (Some(x), Some(y)) => v.push((PathBuf::from(x), PathBuf::from(y))),
                    _ => {
                        return Err(Error::Config(format!(
                            "{}:{}: expected two tab-separated paths",
                            file.display(),
                            lineno + 1
                        )))
                    }
                }
            }
            v
        }
        (None, Some(x), Some(y)) => vec![(x.clone(), y.clone())],
        _ => return Err(Error::Config("pass --a/--b or --pairs".into())),
    };

    let extractor = match &a.utility {
        Some(p) => Some(UtilityEmbedder::<f32>::load(p)?),
        None => None,
    };

    let mut rows = Vec::with_capacity(pair_list.len());
    for (pa, pb) in &pair_list {
        let x = imgio::load_png::<f64>(pa)?;
        let y = imgio::load_png::<f64>(pb)?;
        let levels = max_levels(x.shape()[1], x.shape()[2]).min(IW_LEVELS);
        rows.push(CompareRow {
            a: pa.display().to_string(),
            b: pb.display().to_string(),
            psnr: psnr(&x, &y, 1.0)?,
            ssim: ssim(&x, &y)?,
            iw_ssim: iw_ssim_with(&x, &y, levels, false)?,
            perc_dist: match &extractor {
                Some(e) => Some(perceptual_distance(&x, &y, e)?),
                None => None,
            },
        });
    }
    let text = serde_json::to_string_pretty(&rows).map_err(Error::from)?;
    println!("{text}");
    if let Some(out) = &a.out {
        write_json_pretty(out, &rows)?;
    }
    Ok(())
}

fn risk_audit(a: RiskAudit, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let risk_seed = seed.unwrap_or(cfg.eval.risk_seed);
    let dataset = under_root(a.dataset, "dataset")?;
    let split = parse_split(&a.split)?;
    let data = load_split::<f32>(&dataset, split)?;
    let valid = load_split::<f32>(&dataset, Split::Valid)?;
    let e_id = IdentityEmbedder::<f32>::load(&under_root(a.identity, "aux/identity.ckpt")?)?;

    let subset: Option<SubsetFile> = match &a.subset {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Some(serde_json::from_str(&text)?)
        }
        None => None,
    };
    let indices: Vec<usize> = match (&subset, split) {
        (Some(s), Split::Test) => s.test_indices.clone(),
        (Some(s), Split::Train) => s.train_indices.clone(),
        (Some(_), other) => {
            return Err(Error::Config(format!(
                "subset.json has no indices for the {} split",
                other.name()
            )))
        }
        (None, _) => (0..data.len()).collect(),
    };

    let real: Vec<_> = indices.iter().map(|&i| data.images[i].clone()).collect();
    let pids: Vec<usize> = indices.iter().map(|&i| data.patient_ids[i]).collect();
    let mut real_emb = Vec::with_capacity(real.len());
    for x in &real {
        real_emb.push(e_id.embed_identity(x)?);
    }
    let mut anon_imgs = Vec::with_capacity(indices.len());
    for &i in &indices {
        let p = a.anon.join(format!("a_{i:04}.png"));
        if !p.exists() {
            return Err(Error::Dependency {
                stage: "risk/audit".into(),
                missing: p.display().to_string(),
            });
        }
        anon_imgs.push(imgio::load_png::<f32>(&p)?);
    }
    let mut anon_emb = Vec::with_capacity(anon_imgs.len());
    for x in &anon_imgs {
        anon_emb.push(e_id.embed_identity(x)?);
    }

    let mut valid_emb = Vec::with_capacity(valid.len());
    for x in &valid.images {
        valid_emb.push(e_id.embed_identity(x)?);
    }
    let cal_pairs = build_pairs(&valid.patient_ids, PairKind::RealReal, risk_seed)?;
    let mut scores = Vec::with_capacity(cal_pairs.len());
    let mut labels = Vec::with_capacity(cal_pairs.len());
    for p in &cal_pairs {
        scores.push(pair_score(p, &valid_emb, &valid_emb)?);
        labels.push(p.same_patient);
    }
    let threshold = calibrate_threshold(&scores, &labels)?;

    let (lc_nr, lc_na) = local_cloaking(&real_emb, &anon_emb)?;
    let hr = hidden_rate(&real_emb, &anon_emb)?;
    let mut linkability = std::collections::BTreeMap::new();
    for kind in [PairKind::RealReal, PairKind::Inner, PairKind::Outer] {
        let pairs = build_pairs(&pids, kind, risk_seed)?;
        linkability.insert(kind.to_string(), evaluate_pairs(&pairs, &real_emb, &anon_emb, threshold)?);
    }

    let mia = match (&a.encoder, &a.generator, &a.anon_train, &subset) {
        (Some(enc_p), Some(gen_p), Some(anon_train_dir), Some(sub)) => {
            let enc = Encoder::<f32>::load(enc_p)?;
            let gen = Generator::<f32>::load(gen_p)?;
            let train = load_split::<f32>(&dataset, Split::Train)?;
            let mut gallery = Vec::with_capacity(train.len());
            for x in &train.images {
                gallery.push(e_id.embed_identity(x)?);
            }
            let members: std::collections::BTreeSet<usize> =
                sub.train_indices.iter().copied().collect();
            let mut feats = Vec::new();
            let mut labs = Vec::new();
            for (i, x) in train.images.iter().enumerate() {
                if !members.contains(&i) {
                    feats.push(mia_features(x, &enc, &gen, &e_id, &gallery)?);
                    labs.push(true);
                }
            }
            for x in &valid.images {
                feats.push(mia_features(x, &enc, &gen, &e_id, &gallery)?);
                labs.push(false);
            }
            let mut tfeats = Vec::new();
            let mut tlabs = Vec::new();
            for &i in &sub.train_indices {
                let img = imgio::load_png::<f32>(&anon_train_dir.join(format!("a_{i:04}.png")))?;
                tfeats.push(mia_features(&img, &enc, &gen, &e_id, &gallery)?);
                tlabs.push(true);
            }
            for x in &anon_imgs {
                tfeats.push(mia_features(x, &enc, &gen, &e_id, &gallery)?);
                tlabs.push(false);
            }
            Some(mia_eval(&feats, &labs, &tfeats, &tlabs, &cfg.eval.mia)?)
        }
        _ => None,
    };

    let report = RiskReport { hr, lc_nr, lc_na, linkability, mia };
    write_json_pretty(&a.report, &report)?;
    println!(
        "audited {} images | HR {:.4} | LC(NR) {} | LC(NA) {} | threshold {:.4}",
        indices.len(),
        hr,
        lc_nr,
        lc_na,
        threshold
    );
    println!("report written to {}", a.report.display());
    Ok(())
}

fn pipeline_run(a: PipelineRun, seed: Option<u64>) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::smoke(),
    };
    if let Some(s) = seed {
        cfg.reseed(s);
    }
    let root = out_root(a.out)?;
    let only = match &a.only {
        Some(s) => Some(s.parse::<Stage>()?),
        None => None,
    };
    let outcome = run_pipeline(&cfg, &root, &RunOptions { only, force: a.force })?;
    for stage in Stage::ALL {
        if let Some(rec) = outcome.manifest.stages.get(stage.name()) {
            let status = if outcome.ran.iter().any(|r| r == stage.name()) {
                format!("ran in {} ms", rec.wall_ms)
            } else {
                "up to date".to_string()
            };
            println!("{:<10} {status}", stage.name());
        }
    }
    if root.join("report.json").exists() {
        println!("report: {}", root.join("report.json").display());
        println!("tables: {}", root.join("tables.txt").display());
    }
    Ok(())
}

fn figures_emit(a: FiguresEmit) -> Result<()> {
    let root = out_root(a.run)?;
    let written = emit_figures(&root)?;
    for p in &written {
        println!("wrote {}", p.display());
    }
    Ok(())
}
