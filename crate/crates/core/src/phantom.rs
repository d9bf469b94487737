//! Synthetic "phantom radiograph" dataset with ground-truth identities and
//! pathology labels.
//!
//! Identity is carried by smooth low-frequency anatomy: a soft torso ellipse
//! and rib-like bands whose spacing, curvature, thickness and asymmetry come
//! from per-patient parameters. Pathology is carried by small bright bumps
//! with compact support, so pixels outside lesion regions are bit-identical
//! with and without lesions. Views translate the continuous coordinate frame
//! and rescale exposure, which changes pixels without changing identity.
//!
//! Identity parameters live on a quantized grid: each of the six parameters
//! takes one of five levels, and a patient's level vector is a base-5
//! bijection of its id. Per-patient jitter stays below an eighth of a level
//! gap, so two distinct patients always differ by more than half a gap in at
//! least one coordinate — that is the separation constant `delta_id` below.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::imgio;
use crate::tensor::Scalar;
use crate::{Error, Result};

pub const N_IDENTITY_PARAMS: usize = 6;
const N_LEVELS: u64 = 5;
/// Multiplier coprime with 5^6, scrambling id -> level-vector assignment.
const LEVEL_SCRAMBLE: u64 = 11587;

/// Parameter ranges: (low, high) for each identity coordinate.
const PARAM_RANGES: [(f64, f64); N_IDENTITY_PARAMS] = [
    (0.10, 0.22),  // rib spacing (normalized units per band)
    (-0.8, 0.8),   // rib curvature
    (1.5, 4.5),    // rib sharpness exponent
    (0.26, 0.42),  // torso half-width
    (0.30, 0.46),  // torso half-height
    (-0.5, 0.5),   // lateral texture asymmetry
];

/// Guaranteed minimum separation between distinct patients, in the units of
/// the widest-jitter coordinate: any two ids differ by > delta_id * range in
/// at least one normalized coordinate.
pub const DELTA_ID: f64 = 0.5 / (N_LEVELS as f64 - 1.0);

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PatientRecord {
    pub patient_id: usize,
    pub identity_params: Vec<f64>,
    pub n_images: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ViewParams {
    /// Sub-pixel translation in normalized coordinates, |dx|,|dy| <= 0.03.
    pub dx: f64,
    pub dy: f64,
    /// Exposure gain in [0.9, 1.1].
    pub gain: f64,
    pub noise_seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Lesion {
    /// Pathology class in 0..L.
    pub class: usize,
    /// Center in normalized coordinates.
    pub cx: f64,
    pub cy: f64,
    /// Support radius in normalized coordinates; intensity is exactly zero
    /// at and beyond this radius.
    pub radius: f64,
    pub intensity: f64,
}

#[derive(Clone, Debug)]
pub struct ImageSample {
    pub image: ArrayD<f64>,
    pub patient_id: usize,
    pub view_params: ViewParams,
    pub pathology_labels: Vec<u8>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetConfig {
    pub seed: u64,
    pub resolution: usize,
    /// Number of pathology classes L.
    pub n_labels: usize,
    pub train_patients: usize,
    pub valid_patients: usize,
    pub test_patients: usize,
    pub images_per_patient: usize,
    pub min_images_per_patient: usize,
    /// Independent per-class lesion probability.
    pub lesion_prob: f64,
    pub max_lesions: usize,
    pub noise_amp: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 0,
            resolution: 64,
            n_labels: 4,
            train_patients: 40,
            valid_patients: 8,
            test_patients: 16,
            images_per_patient: 20,
            min_images_per_patient: 20,
            lesion_prob: 0.3,
            max_lesions: 3,
            noise_amp: 0.01,
        }
    }
}

impl DatasetConfig {
    pub fn population(&self) -> usize {
        self.train_patients + self.valid_patients + self.test_patients
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 8 {
            return Err(Error::Config("resolution must be at least 8".into()));
        }
        if self.n_labels == 0 || self.n_labels > 4 {
            return Err(Error::Config("n_labels must be in 1..=4".into()));
        }
        if self.population() == 0 {
            return Err(Error::Config("population must be nonzero".into()));
        }
        if self.population() as u64 > N_LEVELS.pow(N_IDENTITY_PARAMS as u32) {
            return Err(Error::Config("population exceeds identity grid capacity".into()));
        }
        if self.images_per_patient < self.min_images_per_patient {
            return Err(Error::Config(format!(
                "images_per_patient {} below min_images_per_patient {}",
                self.images_per_patient, self.min_images_per_patient
            )));
        }
        if !(0.0..=1.0).contains(&self.lesion_prob) {
            return Err(Error::Config("lesion_prob must be in [0,1]".into()));
        }
        Ok(())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub path: String,
    pub patient_id: usize,
    pub split: Split,
    pub labels: Vec<u8>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
    pub dataset_seed: u64,
    pub resolution: usize,
    pub n_labels: usize,
}

fn sub_seed(seed: u64, tag: &str, a: u64, b: u64) -> u64 {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(a.to_le_bytes());
    h.update(b.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Deterministic patient identity from (dataset seed, patient id).
pub fn generate_patient(cfg: &DatasetConfig, patient_id: usize) -> Result<PatientRecord> {
    cfg.validate()?;
    if patient_id >= cfg.population() {
        return Err(Error::Config(format!(
            "patient_id {patient_id} out of range for population {}",
            cfg.population()
        )));
    }
    let modulus = N_LEVELS.pow(N_IDENTITY_PARAMS as u32);
    let mut code = (patient_id as u64).wrapping_mul(LEVEL_SCRAMBLE) % modulus;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "identity", patient_id as u64, 0));
    let mut params = Vec::with_capacity(N_IDENTITY_PARAMS);
    for range in &PARAM_RANGES {
        let level = (code % N_LEVELS) as f64;
        code /= N_LEVELS;
        let gap = (range.1 - range.0) / (N_LEVELS as f64 - 1.0);
        let jitter = rng.gen_range(-0.125..0.125) * gap;
        params.push(range.0 + level * gap + jitter);
    }
    Ok(PatientRecord { patient_id, identity_params: params, n_images: cfg.images_per_patient })
}

/// Canonical lesion center for each pathology class (one per quadrant).
const LESION_CENTERS: [(f64, f64); 4] =
    [(-0.16, -0.14), (0.16, -0.14), (-0.16, 0.16), (0.16, 0.16)];

/// Renders one sample. Anatomy depends only on `patient.identity_params` and
/// the view; lesions add compact-support bumps and set the labels.
pub fn render_image(
    cfg: &DatasetConfig,
    patient: &PatientRecord,
    view: &ViewParams,
    lesions: &[Lesion],
) -> Result<ImageSample> {
    if lesions.len() > cfg.max_lesions {
        return Err(Error::Dataset(format!(
            "lesion count {} exceeds max {}",
            lesions.len(),
            cfg.max_lesions
        )));
    }
    for l in lesions {
        if l.class >= cfg.n_labels {
            return Err(Error::Dataset(format!("lesion class {} out of range", l.class)));
        }
    }
    let p = &patient.identity_params;
    let (spacing, curvature, sharpness, torso_w, torso_h, asym) =
        (p[0], p[1], p[2], p[3], p[4], p[5]);
    let r = cfg.resolution;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(view.noise_seed);
    let mut img = ArrayD::zeros(IxDyn(&[1, r, r]));
    for i in 0..r {
        for j in 0..r {
            let x = (j as f64 + 0.5) / r as f64 - 0.5 - view.dx;
            let y = (i as f64 + 0.5) / r as f64 - 0.5 - view.dy;
            // Soft torso ellipse.
            let rho2 = (x / torso_w).powi(2) + (y / torso_h).powi(2);
            let body = 1.0 / (1.0 + ((rho2 - 1.0) / 0.08).exp());
            // Rib bands: curved periodic ridges, sharpened per identity.
            let phase = (y + curvature * x * x) / spacing;
            let band = (0.5 + 0.5 * (std::f64::consts::TAU * phase).cos()).powf(sharpness);
            let lateral = 1.0 + asym * 2.0 * x;
            let mut v = 0.22 * body + 0.38 * body * band * lateral.max(0.0);
            // Lesions: compact-support raised-cosine bumps.
            for l in lesions {
                let d2 = (x - l.cx).powi(2) + (y - l.cy).powi(2);
                if d2 < l.radius * l.radius {
                    let t = d2.sqrt() / l.radius;
                    let bump = (std::f64::consts::FRAC_PI_2 * t).cos().powi(2);
                    v += l.intensity * bump;
                }
            }
            v *= view.gain;
            v += noise_rng.gen_range(-cfg.noise_amp..cfg.noise_amp);
            img[[0, i, j]] = imgio::quantize8(v);
        }
    }
    let mut labels = vec![0u8; cfg.n_labels];
    for l in lesions {
        labels[l.class] = 1;
    }
    Ok(ImageSample {
        image: img,
        patient_id: patient.patient_id,
        view_params: view.clone(),
        pathology_labels: labels,
    })
}

/// Deterministic view parameters for image `img_idx` of a patient.
pub fn view_params(cfg: &DatasetConfig, patient_id: usize, img_idx: usize) -> ViewParams {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "view", patient_id as u64, img_idx as u64));
    ViewParams {
        dx: rng.gen_range(-0.03..0.03),
        dy: rng.gen_range(-0.03..0.03),
        gain: rng.gen_range(0.9..1.1),
        noise_seed: rng.gen::<u64>(),
    }
}

/// Fraction of each class's presence probability carried by patient-level
/// ("chronic") findings that persist, with identical geometry, across all of
/// a patient's images; the remainder appears as per-image ("acute") findings.
/// Chronic persistence keeps within-patient labels largely coherent — in the
/// source data, study-level labels are stable across the views of a study —
/// while the acute draws preserve per-image label diversity.
pub const CHRONIC_SHARE: f64 = 2.0 / 3.0;

/// Deterministic lesion specification for image `img_idx` of a patient.
pub fn lesion_spec(cfg: &DatasetConfig, patient_id: usize, img_idx: usize) -> Vec<Lesion> {
    let p_chronic = cfg.lesion_prob * CHRONIC_SHARE;
    // Acute probability solving 1 − (1−p_c)(1−p_a) = lesion_prob, so the
    // overall per-class presence rate stays exactly lesion_prob.
    let p_acute =
        if p_chronic < 1.0 { (cfg.lesion_prob - p_chronic) / (1.0 - p_chronic) } else { 0.0 };
    let mut chronic_rng =
        ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "lesion-chronic", patient_id as u64, 0));
    let mut acute_rng =
        ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "lesion", patient_id as u64, img_idx as u64));
    let mut lesions = Vec::new();
    for class in 0..cfg.n_labels {
        let (cx0, cy0) = LESION_CENTERS[class];
        // Draw both candidates unconditionally to keep the streams aligned
        // across classes regardless of presence outcomes.
        let chronic = chronic_rng.gen_range(0.0..1.0) < p_chronic;
        let c = Lesion {
            class,
            cx: cx0 + chronic_rng.gen_range(-0.04..0.04),
            cy: cy0 + chronic_rng.gen_range(-0.04..0.04),
            radius: chronic_rng.gen_range(0.07..0.12),
            intensity: chronic_rng.gen_range(0.25..0.40),
        };
        let acute = acute_rng.gen_range(0.0..1.0) < p_acute;
        let a = Lesion {
            class,
            cx: cx0 + acute_rng.gen_range(-0.04..0.04),
            cy: cy0 + acute_rng.gen_range(-0.04..0.04),
            radius: acute_rng.gen_range(0.07..0.12),
            intensity: acute_rng.gen_range(0.25..0.40),
        };
        if lesions.len() >= cfg.max_lesions {
            continue;
        }
        if chronic {
            lesions.push(c);
        } else if acute {
            lesions.push(a);
        }
    }
    lesions
}

pub fn patients_of_split(cfg: &DatasetConfig, split: Split) -> std::ops::Range<usize> {
    match split {
        Split::Train => 0..cfg.train_patients,
        Split::Valid => cfg.train_patients..cfg.train_patients + cfg.valid_patients,
        Split::Test => cfg.train_patients + cfg.valid_patients..cfg.population(),
    }
}

/// Generates every image and writes PNGs plus one manifest per split and a
/// `dataset.json` echo of the config.
pub fn build_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<[DatasetManifest; 3]> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cfg_json = serde_json::to_string_pretty(cfg).map_err(|e| Error::Serde(e.to_string()))?;
    std::fs::write(out_dir.join("dataset.json"), cfg_json)
        .map_err(|e| Error::io(out_dir.join("dataset.json"), e))?;

    let mut manifests = Vec::new();
    for split in Split::ALL {
        let mut entries = Vec::new();
        for patient_id in patients_of_split(cfg, split) {
            let patient = generate_patient(cfg, patient_id)?;
            for img_idx in 0..cfg.images_per_patient {
                let view = view_params(cfg, patient_id, img_idx);
                let lesions = lesion_spec(cfg, patient_id, img_idx);
                let sample = render_image(cfg, &patient, &view, &lesions)?;
                let rel = format!("{}/p{patient_id:04}_i{img_idx:03}.png", split.name());
                imgio::save_png(&out_dir.join(&rel), &sample.image)?;
                entries.push(ManifestEntry {
                    path: rel,
                    patient_id,
                    split,
                    labels: sample.pathology_labels,
                });
            }
        }
        let manifest = DatasetManifest {
            split,
            entries,
            dataset_seed: cfg.seed,
            resolution: cfg.resolution,
            n_labels: cfg.n_labels,
        };
        write_manifest(&manifest, out_dir)?;
        manifests.push(manifest);
    }
    Ok(manifests.try_into().map_err(|_| ()).expect("three splits"))
}

fn write_manifest(m: &DatasetManifest, out_dir: &Path) -> Result<()> {
    let mut text = String::new();
    for e in &m.entries {
        let bits = e.labels.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(",");
        writeln!(text, "{}\t{}\t{}\t{}", e.path, e.patient_id, e.split.name(), bits).unwrap();
    }
    let path = out_dir.join(format!("{}.manifest", m.split.name()));
    std::fs::write(&path, text).map_err(|e| Error::io(path, e))
}

pub fn load_manifest(dataset_dir: &Path, split: Split) -> Result<DatasetManifest> {
    let cfg_path = dataset_dir.join("dataset.json");
    let cfg_text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let cfg: DatasetConfig =
        serde_json::from_str(&cfg_text).map_err(|e| Error::Serde(e.to_string()))?;
    let path = dataset_dir.join(format!("{}.manifest", split.name()));
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = |msg: &str| Error::Dataset(format!("{}:{}: {msg}", path.display(), lineno + 1));
        if fields.len() != 4 {
            return Err(bad("expected 4 tab-separated fields"));
        }
        let patient_id = fields[1].parse().map_err(|_| bad("bad patient id"))?;
        let split: Split = fields[2].parse()?;
        let labels = fields[3]
            .split(',')
            .map(|b| match b {
                "0" => Ok(0u8),
                "1" => Ok(1u8),
                _ => Err(bad("labels must be 0 or 1")),
            })
            .collect::<Result<Vec<u8>>>()?;
        if labels.len() != cfg.n_labels {
            return Err(bad("label count differs from dataset config"));
        }
        entries.push(ManifestEntry { path: fields[0].to_string(), patient_id, split, labels });
    }
    Ok(DatasetManifest {
        split,
        entries,
        dataset_seed: cfg.seed,
        resolution: cfg.resolution,
        n_labels: cfg.n_labels,
    })
}

/// A split loaded into memory for training/evaluation.
pub struct LoadedSplit<E: Scalar> {
    pub images: Vec<ArrayD<E>>,
    pub patient_ids: Vec<usize>,
    pub labels: Vec<Vec<u8>>,
    pub paths: Vec<PathBuf>,
    pub resolution: usize,
    pub n_labels: usize,
}

impl<E: Scalar> LoadedSplit<E> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Label vectors as floats, for BCE training.
    pub fn float_labels(&self) -> Vec<Vec<f64>> {
        self.labels.iter().map(|l| l.iter().map(|&b| b as f64).collect()).collect()
    }

    /// Patient ids remapped to contiguous class indices, plus the class count.
    pub fn contiguous_ids(&self) -> (Vec<usize>, usize) {
        let mut unique: Vec<usize> = self.patient_ids.clone();
        unique.sort_unstable();
        unique.dedup();
        let index = |id: usize| unique.binary_search(&id).expect("id present");
        (self.patient_ids.iter().map(|&id| index(id)).collect(), unique.len())
    }
}

pub fn load_split<E: Scalar>(dataset_dir: &Path, split: Split) -> Result<LoadedSplit<E>> {
    let manifest = load_manifest(dataset_dir, split)?;
    let mut images = Vec::with_capacity(manifest.entries.len());
    let mut patient_ids = Vec::new();
    let mut labels = Vec::new();
    let mut paths = Vec::new();
    for e in &manifest.entries {
        let path = dataset_dir.join(&e.path);
        let img = imgio::load_png::<E>(&path)?;
        if img.shape() != [1, manifest.resolution, manifest.resolution] {
            return Err(Error::shape(
                format!("[1, {0}, {0}]", manifest.resolution),
                format!("{:?} ({})", img.shape(), path.display()),
            ));
        }
        images.push(img);
        patient_ids.push(e.patient_id);
        labels.push(e.labels.clone());
        paths.push(path);
    }
    Ok(LoadedSplit {
        images,
        patient_ids,
        labels,
        paths,
        resolution: manifest.resolution,
        n_labels: manifest.n_labels,
    })
}
