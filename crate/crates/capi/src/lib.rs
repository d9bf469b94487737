//! C ABI over the anonymization engine.
//!
//! The engine is an opaque handle bundling the four trained networks.
//! Every call returns a [`CloakStatus`]; on failure a thread-local message
//! with details is available through [`cloak_last_error`]. Pixel buffers are
//! row-major `resolution * resolution` grayscale samples in `[0, 1]`.
//!
//! The build script regenerates `include/cloak.h` with cbindgen, so the
//! header always matches this source.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use cloak_core::anonymize::{optimize_latent, AnonConfig, AnonNets};
use cloak_core::error::Error;
use cloak_core::metrics;
use cloak_core::nets::{Encoder, Generator, IdentityEmbedder, UtilityEmbedder};

/// Result codes shared by every API call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CloakStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A value or buffer shape was rejected; see `cloak_last_error`.
    InvalidArgument = 2,
    /// The filesystem said no; see `cloak_last_error`.
    Io = 3,
    /// A checkpoint was missing, malformed, or mismatched.
    BadCheckpoint = 4,
    /// Optimization produced a non-finite value and was aborted.
    NonFinite = 5,
    /// An unexpected internal failure (including caught panics).
    Internal = 6,
}

/// Knobs for one anonymization call; get defaults from
/// `cloak_anon_options_default`.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct CloakAnonOptions {
    /// Apply the utility-preservation loss.
    pub use_ut: bool,
    /// Apply the identity-removal loss.
    pub use_id: bool,
    /// Hinge margin on the identity cosine.
    pub margin: f64,
    /// Weight of the identity loss.
    pub alpha_id: f64,
    /// Weight of the utility loss.
    pub alpha_ut: f64,
    /// Optimization steps.
    pub steps: usize,
    /// Adam learning rate.
    pub lr: f64,
}

/// What one anonymization run achieved.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct CloakAnonInfo {
    /// Cosine between the original and anonymized identity embeddings.
    pub identity_cosine: f64,
    /// L2 distance between the original and anonymized utility embeddings.
    pub utility_distance: f64,
    /// Final optimization objective (NaN when zero steps were run).
    pub final_loss: f64,
}

/// Opaque bundle of the encoder, generator, and embedder networks.
pub struct CloakEngine {
    enc: Encoder<f32>,
    gen: Generator<f32>,
    e_id: IdentityEmbedder<f32>,
    e_ut: UtilityEmbedder<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().map(|c| if c == '\0' { ' ' } else { c }).collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).expect("no interior nul"));
}

fn status_of(err: &Error) -> CloakStatus {
    match err {
        Error::Io { .. } => CloakStatus::Io,
        Error::Checkpoint(_) | Error::MissingCheckpoint(_) | Error::Serde(_) => {
            CloakStatus::BadCheckpoint
        }
        Error::NonFinite { .. } => CloakStatus::NonFinite,
        _ => CloakStatus::InvalidArgument,
    }
}

fn fail(err: &Error) -> CloakStatus {
    set_error(&err.to_string());
    status_of(err)
}

fn guard(body: impl FnOnce() -> CloakStatus) -> CloakStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(s) => s,
        Err(_) => {
            set_error("internal panic");
            CloakStatus::Internal
        }
    }
}

/// # Safety
/// `ptr` must be a valid NUL-terminated string.
unsafe fn path_arg<'a>(ptr: *const c_char) -> Result<&'a Path, CloakStatus> {
    if ptr.is_null() {
        set_error("null path argument");
        return Err(CloakStatus::NullArgument);
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(CloakStatus::InvalidArgument)
        }
    }
}

fn image_from(pixels: &[f32], resolution: usize) -> Result<ArrayD<f32>, CloakStatus> {
    let expected = resolution * resolution;
    if pixels.len() != expected {
        set_error(&format!(
            "pixel buffer holds {} samples but the engine expects {expected} ({resolution}x{resolution})",
            pixels.len()
        ));
        return Err(CloakStatus::InvalidArgument);
    }
    Ok(ArrayD::from_shape_vec(IxDyn(&[1, resolution, resolution]), pixels.to_vec())
        .expect("shape matches length"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cloak_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copies the most recent error message on this thread into `buf`
/// (truncating if needed) and returns the full message length in bytes,
/// excluding the NUL terminator. Passing a null/empty buffer just queries
/// the length.
///
/// # Safety
/// `buf` must point to `cap` writable bytes, or be null with `cap == 0`.
#[no_mangle]
pub unsafe extern "C" fn cloak_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Loads the four checkpoints into a new engine. On success writes the
/// handle into `out`; free it with `cloak_engine_free`.
///
/// # Safety
/// The path arguments must be valid NUL-terminated strings and `out` must
/// be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cloak_engine_open(
    encoder: *const c_char,
    generator: *const c_char,
    identity: *const c_char,
    utility: *const c_char,
    out: *mut *mut CloakEngine,
) -> CloakStatus {
    guard(|| {
        if out.is_null() {
            set_error("null output handle");
            return CloakStatus::NullArgument;
        }
        let paths = match (path_arg(encoder), path_arg(generator), path_arg(identity), path_arg(utility)) {
            (Ok(a), Ok(b), Ok(c), Ok(d)) => (a, b, c, d),
            (Err(s), ..) | (_, Err(s), ..) | (_, _, Err(s), _) | (_, _, _, Err(s)) => return s,
        };
        let enc = match Encoder::<f32>::load(paths.0) {
            Ok(v) => v,
            Err(e) => return fail(&e),
        };
        let gen = match Generator::<f32>::load(paths.1) {
            Ok(v) => v,
            Err(e) => return fail(&e),
        };
        let e_id = match IdentityEmbedder::<f32>::load(paths.2) {
            Ok(v) => v,
            Err(e) => return fail(&e),
        };
        let e_ut = match UtilityEmbedder::<f32>::load(paths.3) {
            Ok(v) => v,
            Err(e) => return fail(&e),
        };
        let res = enc.cfg.resolution;
        if gen.cfg.resolution != res || e_id.cfg.resolution != res || e_ut.cfg.resolution != res {
            set_error(&format!(
                "checkpoint resolutions disagree: encoder {res}, generator {}, identity {}, utility {}",
                gen.cfg.resolution, e_id.cfg.resolution, e_ut.cfg.resolution
            ));
            return CloakStatus::BadCheckpoint;
        }
        if enc.cfg.d_w != gen.cfg.d_w {
            set_error(&format!(
                "latent widths disagree: encoder d_w {}, generator d_w {}",
                enc.cfg.d_w, gen.cfg.d_w
            ));
            return CloakStatus::BadCheckpoint;
        }
        let engine = Box::new(CloakEngine { enc, gen, e_id, e_ut });
        *out = Box::into_raw(engine);
        CloakStatus::Ok
    })
}

/// Releases an engine handle. Null is a no-op.
///
/// # Safety
/// `engine` must be a handle from `cloak_engine_open` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cloak_engine_free(engine: *mut CloakEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Side length of the square images the engine works on, or 0 for null.
///
/// # Safety
/// `engine` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn cloak_engine_resolution(engine: *const CloakEngine) -> usize {
    if engine.is_null() {
        return 0;
    }
    (*engine).enc.cfg.resolution
}

/// Dimension of the latent codes the engine optimizes, or 0 for null.
///
/// # Safety
/// `engine` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn cloak_engine_latent_dim(engine: *const CloakEngine) -> usize {
    if engine.is_null() {
        return 0;
    }
    (*engine).enc.cfg.d_w
}

/// Fills `out` with the default anonymization options (both losses on).
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cloak_anon_options_default(out: *mut CloakAnonOptions) -> CloakStatus {
    if out.is_null() {
        set_error("null options pointer");
        return CloakStatus::NullArgument;
    }
    let d = AnonConfig::default();
    *out = CloakAnonOptions {
        use_ut: d.use_ut,
        use_id: d.use_id,
        margin: d.margin,
        alpha_id: d.alpha_id,
        alpha_ut: d.alpha_ut,
        steps: d.steps,
        lr: d.lr,
    };
    CloakStatus::Ok
}

/// Projects `pixels` into latent space and decodes it straight back,
/// writing the reconstruction into `out_pixels`.
///
/// # Safety
/// `engine` must be a live handle; `pixels` and `out_pixels` must point to
/// `len` and `out_len` readable/writable floats respectively.
#[no_mangle]
pub unsafe extern "C" fn cloak_reconstruct(
    engine: *const CloakEngine,
    pixels: *const f32,
    len: usize,
    out_pixels: *mut f32,
    out_len: usize,
) -> CloakStatus {
    guard(|| {
        if engine.is_null() || pixels.is_null() || out_pixels.is_null() {
            set_error("null argument");
            return CloakStatus::NullArgument;
        }
        let e = &*engine;
        let input = std::slice::from_raw_parts(pixels, len);
        let x = match image_from(input, e.enc.cfg.resolution) {
            Ok(v) => v,
            Err(s) => return s,
        };
        if out_len != len {
            set_error(&format!("output buffer holds {out_len} samples, expected {len}"));
            return CloakStatus::InvalidArgument;
        }
        let w = match e.enc.encode(&x) {
            Ok(v) => v,
            Err(err) => return fail(&err),
        };
        let x_hat = match e.gen.generate(&w) {
            Ok(v) => v,
            Err(err) => return fail(&err),
        };
        let out = std::slice::from_raw_parts_mut(out_pixels, out_len);
        for (dst, src) in out.iter_mut().zip(x_hat.iter()) {
            *dst = *src;
        }
        CloakStatus::Ok
    })
}

/// Anonymizes one image: projects it, optimizes the latent code under the
/// selected losses, and writes the decoded result into `out_pixels`.
/// `info` may be null if the achieved losses are not needed.
///
/// # Safety
/// `engine` must be a live handle; `pixels`/`out_pixels` must point to
/// `len`/`out_len` floats; `opts` and `info` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn cloak_anonymize(
    engine: *const CloakEngine,
    pixels: *const f32,
    len: usize,
    opts: *const CloakAnonOptions,
    out_pixels: *mut f32,
    out_len: usize,
    info: *mut CloakAnonInfo,
) -> CloakStatus {
    guard(|| {
        if engine.is_null() || pixels.is_null() || out_pixels.is_null() {
            set_error("null argument");
            return CloakStatus::NullArgument;
        }
        let e = &*engine;
        let input = std::slice::from_raw_parts(pixels, len);
        let x = match image_from(input, e.enc.cfg.resolution) {
            Ok(v) => v,
            Err(s) => return s,
        };
        if out_len != len {
            set_error(&format!("output buffer holds {out_len} samples, expected {len}"));
            return CloakStatus::InvalidArgument;
        }

        let mut cfg = AnonConfig::default();
        if !opts.is_null() {
            let o = &*opts;
            cfg.use_ut = o.use_ut;
            cfg.use_id = o.use_id;
            cfg.margin = o.margin;
            cfg.alpha_id = o.alpha_id;
            cfg.alpha_ut = o.alpha_ut;
            cfg.steps = o.steps;
            cfg.lr = o.lr;
        }
        if let Err(err) = cfg.validate() {
            return fail(&err);
        }

        let w0 = match e.enc.encode(&x) {
            Ok(v) => v,
            Err(err) => return fail(&err),
        };
        let nets = AnonNets { generator: &e.gen, e_id: &e.e_id, e_ut: &e.e_ut };
        let res = match optimize_latent(&nets, &w0, &x, &cfg) {
            Ok(v) => v,
            Err(err) => return fail(&err),
        };
        if let Some(step) = res.aborted_at {
            set_error(&format!("optimization aborted at step {step}: non-finite value"));
            return CloakStatus::NonFinite;
        }

        let out = std::slice::from_raw_parts_mut(out_pixels, out_len);
        for (dst, src) in out.iter_mut().zip(res.x_a.iter()) {
            *dst = *src as f32;
        }
        if !info.is_null() {
            *info = CloakAnonInfo {
                identity_cosine: res.achieved_identity_cosine,
                utility_distance: res.achieved_utility_distance,
                final_loss: res.trajectory.last().copied().unwrap_or(f64::NAN),
            };
        }
        CloakStatus::Ok
    })
}

/// PSNR in dB between two same-length grayscale buffers in `[0, 1]`.
///
/// # Safety
/// `a`/`b` must point to `len` floats shaped `side * side`; `out` must be
/// a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cloak_psnr(
    a: *const f64,
    b: *const f64,
    len: usize,
    side: usize,
    out: *mut f64,
) -> CloakStatus {
    pixel_metric(a, b, len, side, out, |x, y| metrics::psnr(x, y, 1.0))
}

/// Mean SSIM between two same-length grayscale buffers in `[0, 1]`.
///
/// # Safety
/// `a`/`b` must point to `len` floats shaped `side * side`; `out` must be
/// a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cloak_ssim(
    a: *const f64,
    b: *const f64,
    len: usize,
    side: usize,
    out: *mut f64,
) -> CloakStatus {
    pixel_metric(a, b, len, side, out, metrics::ssim)
}

unsafe fn pixel_metric(
    a: *const f64,
    b: *const f64,
    len: usize,
    side: usize,
    out: *mut f64,
    f: impl Fn(&ArrayD<f64>, &ArrayD<f64>) -> cloak_core::Result<f64>,
) -> CloakStatus {
    guard(AssertUnwindSafe(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            set_error("null argument");
            return CloakStatus::NullArgument;
        }
        if side == 0 || len != side * side {
            set_error(&format!("buffer of {len} samples is not {side}x{side}"));
            return CloakStatus::InvalidArgument;
        }
        let to_img = |p: *const f64| {
            let s = std::slice::from_raw_parts(p, len);
            ArrayD::from_shape_vec(IxDyn(&[1, side, side]), s.to_vec()).expect("shape")
        };
        match f(&to_img(a), &to_img(b)) {
            Ok(v) => {
                *out = v;
                CloakStatus::Ok
            }
            Err(err) => fail(&err),
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use cloak_core::nets::{DiscriminatorConfig, EmbedderConfig, EncoderConfig, GeneratorConfig};
    use std::ffi::CString;

    fn c(s: &str) -> CString {
        CString::new(s).unwrap()
    }

    fn last_error_string() -> String {
        let mut buf = vec![0i8; 256];
        let n = unsafe { cloak_last_error(buf.as_mut_ptr() as *mut c_char, buf.len()) };
        let bytes: Vec<u8> = buf.iter().take(n.min(buf.len() - 1)).map(|&b| b as u8).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }

    /// Tiny 16x16 stack saved to disk, so `open` exercises real checkpoints.
    fn save_stack(dir: &std::path::Path) -> (CString, CString, CString, CString) {
        let enc = Encoder::<f32>::new(
            EncoderConfig { resolution: 16, channels: vec![4, 6, 8, 10], d_w: 8 },
            1,
        )
        .unwrap();
        let gen = Generator::<f32>::new(
            GeneratorConfig { resolution: 16, d_w: 8, channels: vec![10, 8, 6] },
            2,
        )
        .unwrap();
        let emb = EmbedderConfig { resolution: 16, channels: vec![4, 6, 8], embed_dim: 8, n_out: 2 };
        let e_id = IdentityEmbedder::<f32>::new(emb.clone(), 0.3, 16.0, 3).unwrap();
        let e_ut = UtilityEmbedder::<f32>::new(emb, 4).unwrap();
        let p_enc = dir.join("e.ckpt");
        let p_gen = dir.join("g.ckpt");
        let p_id = dir.join("id.ckpt");
        let p_ut = dir.join("ut.ckpt");
        enc.save(&p_enc).unwrap();
        gen.save(&p_gen).unwrap();
        e_id.save(&p_id).unwrap();
        e_ut.save(&p_ut).unwrap();
        (
            c(p_enc.to_str().unwrap()),
            c(p_gen.to_str().unwrap()),
            c(p_id.to_str().unwrap()),
            c(p_ut.to_str().unwrap()),
        )
    }

    fn open(dir: &std::path::Path) -> *mut CloakEngine {
        let (e, g, i, u) = save_stack(dir);
        let mut engine: *mut CloakEngine = std::ptr::null_mut();
        let st = unsafe { cloak_engine_open(e.as_ptr(), g.as_ptr(), i.as_ptr(), u.as_ptr(), &mut engine) };
        assert_eq!(st, CloakStatus::Ok, "open failed: {}", last_error_string());
        assert!(!engine.is_null());
        engine
    }

    #[test]
    fn version_is_a_nul_terminated_semver() {
        let v = unsafe { CStr::from_ptr(cloak_version()) };
        assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }

    #[test]
    fn open_rejects_missing_and_null_paths() {
        let missing = c("/nonexistent/enc.ckpt");
        let mut engine: *mut CloakEngine = std::ptr::null_mut();
        let st = unsafe {
            cloak_engine_open(missing.as_ptr(), missing.as_ptr(), missing.as_ptr(), missing.as_ptr(), &mut engine)
        };
        assert_eq!(st, CloakStatus::Io);
        assert!(engine.is_null());
        assert!(last_error_string().contains("enc.ckpt"));

        let st = unsafe {
            cloak_engine_open(std::ptr::null(), missing.as_ptr(), missing.as_ptr(), missing.as_ptr(), &mut engine)
        };
        assert_eq!(st, CloakStatus::NullArgument);
    }

    #[test]
    fn engine_round_trip_reconstructs_and_anonymizes() {
        let dir = tempfile::tempdir().unwrap();
        let engine = open(dir.path());
        let res = unsafe { cloak_engine_resolution(engine) };
        assert_eq!(res, 16);
        assert_eq!(unsafe { cloak_engine_latent_dim(engine) }, 8);

        let n = res * res;
        let x: Vec<f32> = (0..n).map(|i| (i % 7) as f32 / 7.0).collect();
        let mut recon = vec![0.0f32; n];
        let st = unsafe { cloak_reconstruct(engine, x.as_ptr(), n, recon.as_mut_ptr(), n) };
        assert_eq!(st, CloakStatus::Ok, "{}", last_error_string());
        assert!(recon.iter().all(|v| v.is_finite()));

        let mut opts = CloakAnonOptions {
            use_ut: false,
            use_id: false,
            margin: 0.0,
            alpha_id: 0.0,
            alpha_ut: 0.0,
            steps: 0,
            lr: 0.0,
        };
        let st = unsafe { cloak_anon_options_default(&mut opts) };
        assert_eq!(st, CloakStatus::Ok);
        assert!(opts.use_ut && opts.use_id);
        opts.steps = 3;

        let mut anon = vec![0.0f32; n];
        let mut info = CloakAnonInfo { identity_cosine: -2.0, utility_distance: -1.0, final_loss: -1.0 };
        let st = unsafe {
            cloak_anonymize(engine, x.as_ptr(), n, &opts, anon.as_mut_ptr(), n, &mut info)
        };
        assert_eq!(st, CloakStatus::Ok, "{}", last_error_string());
        assert!(anon.iter().all(|v| v.is_finite()));
        assert!(info.identity_cosine >= -1.0 && info.identity_cosine <= 1.0);
        assert!(info.utility_distance >= 0.0);
        assert!(info.final_loss.is_finite());

        // Determinism through the ABI: same inputs, same bytes.
        let mut anon2 = vec![0.0f32; n];
        let st = unsafe {
            cloak_anonymize(engine, x.as_ptr(), n, &opts, anon2.as_mut_ptr(), n, std::ptr::null_mut())
        };
        assert_eq!(st, CloakStatus::Ok);
        assert_eq!(anon, anon2);

        unsafe { cloak_engine_free(engine) };
        unsafe { cloak_engine_free(std::ptr::null_mut()) };
    }

    #[test]
    fn shape_and_null_errors_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let engine = open(dir.path());
        let res = unsafe { cloak_engine_resolution(engine) };
        let n = res * res;
        let x = vec![0.5f32; n - 1];
        let mut out = vec![0.0f32; n];
        let st = unsafe { cloak_reconstruct(engine, x.as_ptr(), x.len(), out.as_mut_ptr(), n) };
        assert_eq!(st, CloakStatus::InvalidArgument);
        assert!(last_error_string().contains("expects"), "{}", last_error_string());

        let st = unsafe {
            cloak_reconstruct(std::ptr::null(), x.as_ptr(), x.len(), out.as_mut_ptr(), n)
        };
        assert_eq!(st, CloakStatus::NullArgument);

        // Zero steps are rejected by config validation.
        let mut opts = CloakAnonOptions {
            use_ut: true,
            use_id: true,
            margin: 0.0,
            alpha_id: 1.0,
            alpha_ut: 1.0,
            steps: 0,
            lr: 0.05,
        };
        let good = vec![0.5f32; n];
        let st = unsafe {
            cloak_anonymize(engine, good.as_ptr(), n, &opts, out.as_mut_ptr(), n, std::ptr::null_mut())
        };
        assert_eq!(st, CloakStatus::InvalidArgument);

        opts.steps = 1;
        opts.lr = f64::NAN;
        let st = unsafe {
            cloak_anonymize(engine, good.as_ptr(), n, &opts, out.as_mut_ptr(), n, std::ptr::null_mut())
        };
        assert_eq!(st, CloakStatus::InvalidArgument);
        unsafe { cloak_engine_free(engine) };
    }

    #[test]
    fn pixel_metrics_match_the_core_library() {
        let side = 16;
        let n = side * side;
        let a: Vec<f64> = (0..n).map(|i| (i % 11) as f64 / 11.0).collect();
        let b: Vec<f64> = a.iter().map(|v| (v + 0.05).min(1.0)).collect();
        let mut got = 0.0f64;
        let st = unsafe { cloak_psnr(a.as_ptr(), b.as_ptr(), n, side, &mut got) };
        assert_eq!(st, CloakStatus::Ok);
        let xa = ArrayD::from_shape_vec(IxDyn(&[1, side, side]), a.clone()).unwrap();
        let xb = ArrayD::from_shape_vec(IxDyn(&[1, side, side]), b.clone()).unwrap();
        assert_eq!(got, metrics::psnr(&xa, &xb, 1.0).unwrap());

        let st = unsafe { cloak_ssim(a.as_ptr(), b.as_ptr(), n, side, &mut got) };
        assert_eq!(st, CloakStatus::Ok);
        assert_eq!(got, metrics::ssim(&xa, &xb).unwrap());

        let st = unsafe { cloak_psnr(a.as_ptr(), b.as_ptr(), n, side + 1, &mut got) };
        assert_eq!(st, CloakStatus::InvalidArgument);
    }

    #[test]
    fn generated_header_covers_the_api() {
        let header = std::fs::read_to_string(
            std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("include/cloak.h"),
        )
        .expect("cbindgen header exists after build");
        for name in [
            "cloak_engine_open",
            "cloak_engine_free",
            "cloak_anonymize",
            "cloak_reconstruct",
            "cloak_last_error",
            "cloak_psnr",
            "CLOAK_STATUS_OK",
            "typedef struct CloakEngine CloakEngine;",
        ] {
            assert!(header.contains(name), "header missing {name:?}");
        }
    }
}
