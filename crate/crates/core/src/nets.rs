//! The five networks: encoder E, style-based generator G, discriminator D,
//! identity embedder E_id and utility embedder E_ut.
//!
//! Conventions shared by every net:
//! - Images cross module boundaries in `[0,1]` as `[1, R, R]` tensors; the
//!   first thing a net does is map to its internal `[-1,1]` range, and the
//!   generator maps back to `[0,1]` at its output.
//! - Forward passes are pure functions of (parameters, buffers, input), so
//!   evaluation is deterministic: generator noise lives in recorded buffers,
//!   never drawn at inference time.
//! - Each net owns a [`ParamStore`]; `vars(tape, trainable)` instantiates the
//!   parameters onto a tape either as leaves (training) or constants (frozen).

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{
    self, arrays_into_store, randn, store_to_arrays, Adam, Container, Conv2d, GradAccum, Linear,
    ParamStore, ResDownBlock, StyledConv,
};
use crate::tensor::{Scalar, Tape, Tv};
use crate::{Error, Result};

/// Point in the generator's latent space. Stored as f64 regardless of the
/// compute precision so that serialized artifacts are precision-independent.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LatentCode {
    pub w: Vec<f64>,
}

impl LatentCode {
    pub fn dim(&self) -> usize {
        self.w.len()
    }

    pub fn to_array<E: Scalar>(&self) -> ArrayD<E> {
        ArrayD::from_shape_vec(IxDyn(&[self.w.len()]), self.w.iter().map(|&v| E::from_f64(v)).collect())
            .unwrap()
    }

    pub fn from_array<E: Scalar>(a: &ArrayD<E>) -> Self {
        LatentCode { w: a.iter().map(|v| v.as_f64()).collect() }
    }
}

/// Output of an embedder network, consumed unnormalized by the ε-guarded
/// cosine and by Euclidean utility distances.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EmbeddingVector {
    pub v: Vec<f64>,
}

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.v.len()
    }
}

fn check_image_shape(shape: &[usize], resolution: usize) -> Result<()> {
    if shape != [1, resolution, resolution] {
        return Err(Error::shape(format!("[1, {resolution}, {resolution}]"), format!("{shape:?}")));
    }
    Ok(())
}

/// Maps a `[0,1]` boundary image to the internal `[-1,1]` range.
fn to_internal<'t, E: Scalar>(x: Tv<'t, E>) -> Tv<'t, E> {
    x.mul_scalar(2.0).add_scalar(-1.0)
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    pub resolution: usize,
    /// Output width of each residual group; group i halves the resolution.
    pub channels: Vec<usize>,
    pub d_w: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { resolution: 64, channels: vec![32, 64, 128, 256, 256, 256], d_w: 128 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.channels.len();
        if n == 0 || self.d_w == 0 {
            return Err(Error::Config("encoder needs at least one group and d_w > 0".into()));
        }
        if self.resolution != 1usize << n {
            return Err(Error::Config(format!(
                "encoder with {n} halving groups requires resolution {}, got {}",
                1usize << n,
                self.resolution
            )));
        }
        Ok(())
    }
}

pub struct Encoder<E: Scalar> {
    pub cfg: EncoderConfig,
    params: ParamStore<E>,
    stem: Conv2d,
    blocks: Vec<ResDownBlock>,
    head: Linear,
}

impl<E: Scalar> Encoder<E> {
    pub fn new(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = Conv2d::new(&mut store, &mut rng, "stem", 1, cfg.channels[0], 1);
        let mut blocks = Vec::new();
        for i in 0..cfg.channels.len() {
            let c_in = if i == 0 { cfg.channels[0] } else { cfg.channels[i - 1] };
            blocks.push(ResDownBlock::new(&mut store, &mut rng, &format!("g{i}"), c_in, cfg.channels[i]));
        }
        let c_last = *cfg.channels.last().unwrap();
        let head = Linear::new(&mut store, &mut rng, "head", c_last, cfg.d_w);
        Ok(Encoder { cfg, params: store, stem, blocks, head })
    }

    pub fn params(&self) -> &ParamStore<E> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<E> {
        &mut self.params
    }

    pub fn vars<'t>(&self, tape: &'t Tape<E>, trainable: bool) -> Vec<Tv<'t, E>> {
        self.params.vars(tape, trainable)
    }

    /// `[1,R,R]` image in `[0,1]` to a `[d_w]` latent code.
    pub fn forward<'t>(&self, p: &[Tv<'t, E>], x: Tv<'t, E>) -> Tv<'t, E> {
        let mut h = self.stem.forward(p, to_internal(x)).leaky_relu(0.2);
        for b in &self.blocks {
            h = b.forward(p, h);
        }
        let c_last = *self.cfg.channels.last().unwrap();
        self.head.forward(p, h.reshape(&[c_last]))
    }

    /// Evaluation-mode convenience wrapper over `forward`.
    pub fn encode(&self, x: &ArrayD<E>) -> Result<LatentCode> {
        check_image_shape(x.shape(), self.cfg.resolution)?;
        let t = Tape::new();
        let p = self.vars(&t, false);
        let w = self.forward(&p, t.constant(x.clone()));
        Ok(LatentCode::from_array(&w.value()))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        save_net(path, "encoder", &self.cfg, &self.params, None)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let c = Container::load(path)?;
        let cfg: EncoderConfig = parse_net_config(&c, "encoder")?;
        let mut net = Encoder::new(cfg, 0)?;
        arrays_into_store(&mut net.params, c.section("params")?)?;
        Ok(net)
    }

    /// Loads and verifies that the stored architecture matches `expected`.
    pub fn load_matching(path: &std::path::Path, expected: &EncoderConfig) -> Result<Self> {
        let net = Self::load(path)?;
        if &net.cfg != expected {
            return Err(Error::Checkpoint(format!(
                "encoder config mismatch: checkpoint {:?}, requested {expected:?}",
                net.cfg
            )));
        }
        Ok(net)
    }
}

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GeneratorConfig {
    pub resolution: usize,
    pub d_w: usize,
    /// `channels[0]` is the learned 4x4 constant input; each later entry is
    /// the width after one 2x upsampling block.
    pub channels: Vec<usize>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig { resolution: 64, d_w: 128, channels: vec![256, 128, 64, 32, 32] }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 2 || self.d_w == 0 {
            return Err(Error::Config("generator needs at least one up block and d_w > 0".into()));
        }
        let n_up = self.channels.len() - 1;
        if self.resolution != 4usize << n_up {
            return Err(Error::Config(format!(
                "generator with {n_up} up blocks requires resolution {}, got {}",
                4usize << n_up,
                self.resolution
            )));
        }
        Ok(())
    }
}

struct GenBlock {
    conv1: StyledConv,
    conv2: StyledConv,
    ns1: usize,
    ns2: usize,
    nb1: usize,
    nb2: usize,
}

pub struct Generator<E: Scalar> {
    pub cfg: GeneratorConfig,
    params: ParamStore<E>,
    /// Recorded per-layer noise planes; frozen at construction.
    buffers: ParamStore<E>,
    const_input: usize,
    blocks: Vec<GenBlock>,
    to_out: StyledConv,
}

impl<E: Scalar> Generator<E> {
    pub fn new(cfg: GeneratorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut bufs = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let const_input = store.add("const", randn(&mut rng, &[cfg.channels[0], 4, 4], 1.0));
        let mut blocks = Vec::new();
        for i in 1..cfg.channels.len() {
            let (c_in, c_out) = (cfg.channels[i - 1], cfg.channels[i]);
            let res = 4usize << i;
            let name = format!("b{res}");
            let conv1 = StyledConv::new(&mut store, &mut rng, &format!("{name}.conv1"), cfg.d_w, c_in, c_out, 3, true);
            let ns1 = store.add(format!("{name}.nscale1"), nn::zeros(&[1]));
            let conv2 = StyledConv::new(&mut store, &mut rng, &format!("{name}.conv2"), cfg.d_w, c_out, c_out, 3, true);
            let ns2 = store.add(format!("{name}.nscale2"), nn::zeros(&[1]));
            let nb1 = bufs.add(format!("{name}.noise1"), randn(&mut rng, &[1, res, res], 1.0));
            let nb2 = bufs.add(format!("{name}.noise2"), randn(&mut rng, &[1, res, res], 1.0));
            blocks.push(GenBlock { conv1, conv2, ns1, ns2, nb1, nb2 });
        }
        let c_last = *cfg.channels.last().unwrap();
        let to_out = StyledConv::new(&mut store, &mut rng, "to_out", cfg.d_w, c_last, 1, 1, false);
        Ok(Generator { cfg, params: store, buffers: bufs, const_input, blocks, to_out })
    }

    pub fn params(&self) -> &ParamStore<E> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<E> {
        &mut self.params
    }

    pub fn buffers(&self) -> &ParamStore<E> {
        &self.buffers
    }

    pub fn vars<'t>(&self, tape: &'t Tape<E>, trainable: bool) -> Vec<Tv<'t, E>> {
        self.params.vars(tape, trainable)
    }

    pub fn buffer_vars<'t>(&self, tape: &'t Tape<E>) -> Vec<Tv<'t, E>> {
        self.buffers.vars(tape, false)
    }

    /// `[d_w]` latent to a `[1,R,R]` image in `[0,1]`.
    pub fn forward<'t>(
        &self,
        p: &[Tv<'t, E>],
        bufs: &[Tv<'t, E>],
        w: Tv<'t, E>,
    ) -> Tv<'t, E> {
        let mut x = p[self.const_input];
        for (i, b) in self.blocks.iter().enumerate() {
            let c_out = self.cfg.channels[i + 1];
            let res = 4usize << (i + 1);
            x = x.bilinear_up2();
            x = b.conv1.forward(p, x, w);
            x = x + noise_term(p[b.ns1], bufs[b.nb1], c_out, res);
            x = x.leaky_relu(0.2);
            x = b.conv2.forward(p, x, w);
            x = x + noise_term(p[b.ns2], bufs[b.nb2], c_out, res);
            x = x.leaky_relu(0.2);
        }
        let y = self.to_out.forward(p, x, w);
        // tanh keeps the net in [-1,1]; the affine map returns to [0,1].
        y.tanh_act().add_scalar(1.0).mul_scalar(0.5)
    }

    /// Evaluation-mode convenience wrapper over `forward`.
    pub fn generate(&self, w: &LatentCode) -> Result<ArrayD<E>> {
        if w.dim() != self.cfg.d_w {
            return Err(Error::shape(format!("[{}]", self.cfg.d_w), format!("[{}]", w.dim())));
        }
        let t = Tape::new();
        let p = self.vars(&t, false);
        let b = self.buffer_vars(&t);
        let img = self.forward(&p, &b, t.constant(w.to_array()));
        Ok(img.value())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        save_net(path, "generator", &self.cfg, &self.params, Some(&self.buffers))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let c = Container::load(path)?;
        let cfg: GeneratorConfig = parse_net_config(&c, "generator")?;
        let mut net = Generator::new(cfg, 0)?;
        arrays_into_store(&mut net.params, c.section("params")?)?;
        arrays_into_store(&mut net.buffers, c.section("buffers")?)?;
        Ok(net)
    }

    pub fn load_matching(path: &std::path::Path, expected: &GeneratorConfig) -> Result<Self> {
        let net = Self::load(path)?;
        if &net.cfg != expected {
            return Err(Error::Checkpoint(format!(
                "generator config mismatch: checkpoint {:?}, requested {expected:?}",
                net.cfg
            )));
        }
        Ok(net)
    }
}

fn noise_term<'t, E: Scalar>(
    scale: Tv<'t, E>,
    noise: Tv<'t, E>,
    c: usize,
    res: usize,
) -> Tv<'t, E> {
    let s = scale.reshape(&[1, 1, 1]).broadcast_to(&[c, res, res]);
    let n = noise.broadcast_to(&[c, res, res]);
    s * n
}

// ---------------------------------------------------------------------------
// Discriminator
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DiscriminatorConfig {
    pub resolution: usize,
    /// `channels[0]` is the stem width; each later entry is the width after
    /// one halving block. The last block lands on a 4x4 map.
    pub channels: Vec<usize>,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig { resolution: 64, channels: vec![32, 64, 128, 256, 256] }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 2 {
            return Err(Error::Config("discriminator needs at least one block".into()));
        }
        let n = self.channels.len() - 1;
        if self.resolution != 4usize << n {
            return Err(Error::Config(format!(
                "discriminator with {n} halving blocks requires resolution {}, got {}",
                4usize << n,
                self.resolution
            )));
        }
        Ok(())
    }
}

pub struct Discriminator<E: Scalar> {
    pub cfg: DiscriminatorConfig,
    params: ParamStore<E>,
    stem: Conv2d,
    blocks: Vec<ResDownBlock>,
    final_conv: Conv2d,
    head: Linear,
}

impl<E: Scalar> Discriminator<E> {
    pub fn new(cfg: DiscriminatorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = Conv2d::new(&mut store, &mut rng, "stem", 1, cfg.channels[0], 1);
        let mut blocks = Vec::new();
        for i in 1..cfg.channels.len() {
            blocks.push(ResDownBlock::new(
                &mut store,
                &mut rng,
                &format!("b{i}"),
                cfg.channels[i - 1],
                cfg.channels[i],
            ));
        }
        let c_last = *cfg.channels.last().unwrap();
        let final_conv = Conv2d::new(&mut store, &mut rng, "final", c_last, c_last, 3);
        let head = Linear::new(&mut store, &mut rng, "head", c_last * 16, 1);
        Ok(Discriminator { cfg, params: store, stem, blocks, final_conv, head })
    }

    pub fn params(&self) -> &ParamStore<E> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<E> {
        &mut self.params
    }

    pub fn vars<'t>(&self, tape: &'t Tape<E>, trainable: bool) -> Vec<Tv<'t, E>> {
        self.params.vars(tape, trainable)
    }

    /// `[1,R,R]` image in `[0,1]` to a `[1]` realness logit.
    pub fn forward<'t>(&self, p: &[Tv<'t, E>], x: Tv<'t, E>) -> Tv<'t, E> {
        let mut h = self.stem.forward(p, to_internal(x)).leaky_relu(0.2);
        for b in &self.blocks {
            h = b.forward(p, h);
        }
        let h = self.final_conv.forward(p, h).leaky_relu(0.2);
        let c_last = *self.cfg.channels.last().unwrap();
        self.head.forward(p, h.reshape(&[c_last * 16]))
    }

    pub fn discriminate(&self, x: &ArrayD<E>) -> Result<f64> {
        check_image_shape(x.shape(), self.cfg.resolution)?;
        let t = Tape::new();
        let p = self.vars(&t, false);
        Ok(self.forward(&p, t.constant(x.clone())).item().as_f64())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        save_net(path, "discriminator", &self.cfg, &self.params, None)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let c = Container::load(path)?;
        let cfg: DiscriminatorConfig = parse_net_config(&c, "discriminator")?;
        let mut net = Discriminator::new(cfg, 0)?;
        arrays_into_store(&mut net.params, c.section("params")?)?;
        Ok(net)
    }

    pub fn load_matching(path: &std::path::Path, expected: &DiscriminatorConfig) -> Result<Self> {
        let net = Self::load(path)?;
        if &net.cfg != expected {
            return Err(Error::Checkpoint(format!(
                "discriminator config mismatch: checkpoint {:?}, expected {expected:?}",
                net.cfg
            )));
        }
        Ok(net)
    }
}

// ---------------------------------------------------------------------------
// Embedders
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EmbedderConfig {
    pub resolution: usize,
    pub channels: Vec<usize>,
    pub embed_dim: usize,
    /// Classes for the identity head, labels for the utility head.
    pub n_out: usize,
}

impl EmbedderConfig {
    pub fn identity_default() -> Self {
        EmbedderConfig { resolution: 64, channels: vec![32, 64, 128, 128, 128], embed_dim: 64, n_out: 0 }
    }

    pub fn utility_default() -> Self {
        EmbedderConfig { resolution: 64, channels: vec![32, 64, 128, 128, 128], embed_dim: 64, n_out: 4 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 2 || self.embed_dim == 0 {
            return Err(Error::Config("embedder needs at least one block and embed_dim > 0".into()));
        }
        let n = self.channels.len() - 1;
        if self.resolution != 4usize << n {
            return Err(Error::Config(format!(
                "embedder with {n} halving blocks requires resolution {}, got {}",
                4usize << n,
                self.resolution
            )));
        }
        if self.n_out == 0 {
            return Err(Error::Config("embedder head needs n_out > 0".into()));
        }
        Ok(())
    }
}

struct Backbone {
    stem: Conv2d,
    blocks: Vec<ResDownBlock>,
    emb: Linear,
}

impl Backbone {
    fn new<E: Scalar>(store: &mut ParamStore<E>, rng: &mut ChaCha8Rng, cfg: &EmbedderConfig) -> Self {
        let stem = Conv2d::new(store, rng, "stem", 1, cfg.channels[0], 1);
        let mut blocks = Vec::new();
        for i in 1..cfg.channels.len() {
            blocks.push(ResDownBlock::new(store, rng, &format!("b{i}"), cfg.channels[i - 1], cfg.channels[i]));
        }
        let c_last = *cfg.channels.last().unwrap();
        let emb = Linear::new(store, rng, "emb", c_last, cfg.embed_dim);
        Backbone { stem, blocks, emb }
    }

    /// Stem, halving blocks, global average pool, linear projection.
    fn forward<'t, E: Scalar>(&self, p: &[Tv<'t, E>], x: Tv<'t, E>, c_last: usize) -> Tv<'t, E> {
        let h = self.features_at(p, x, self.blocks.len());
        let pooled = h.sum_to(&[c_last, 1, 1]).mul_scalar(1.0 / 16.0).reshape(&[c_last]);
        self.emb.forward(p, pooled)
    }

    /// Activations after the stem (`layer` 0) or after `layer` blocks.
    fn features_at<'t, E: Scalar>(&self, p: &[Tv<'t, E>], x: Tv<'t, E>, layer: usize) -> Tv<'t, E> {
        let mut h = self.stem.forward(p, to_internal(x)).leaky_relu(0.2);
        for b in &self.blocks[..layer] {
            h = b.forward(p, h);
        }
        h
    }
}

/// E_id: embedding net trained with an additive-cosine angular-margin head
/// over training-split patient identities.
pub struct IdentityEmbedder<E: Scalar> {
    pub cfg: EmbedderConfig,
    pub margin: f64,
    pub scale: f64,
    params: ParamStore<E>,
    bb: Backbone,
    head_w: usize,
    trained: bool,
}

impl<E: Scalar> IdentityEmbedder<E> {
    pub fn new(cfg: EmbedderConfig, margin: f64, scale: f64, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bb = Backbone::new(&mut store, &mut rng, &cfg);
        let head_w = store.add(
            "head.w",
            randn(&mut rng, &[cfg.n_out, cfg.embed_dim], (1.0 / cfg.embed_dim as f64).sqrt()),
        );
        Ok(IdentityEmbedder { cfg, margin, scale, params: store, bb, head_w, trained: false })
    }

    pub fn params(&self) -> &ParamStore<E> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<E> {
        &mut self.params
    }

    pub fn vars<'t>(&self, tape: &'t Tape<E>, trainable: bool) -> Vec<Tv<'t, E>> {
        self.params.vars(tape, trainable)
    }

    pub fn forward<'t>(&self, p: &[Tv<'t, E>], x: Tv<'t, E>) -> Tv<'t, E> {
        self.bb.forward(p, x, *self.cfg.channels.last().unwrap())
    }

    /// Cross-entropy over margin-adjusted cosine logits for one sample.
    pub fn margin_loss<'t>(&self, p: &[Tv<'t, E>], emb: Tv<'t, E>, label: usize) -> Tv<'t, E> {
        let t = emb.tape();
        let d = self.cfg.embed_dim;
        let n = self.cfg.n_out;
        let en = unit_rows(emb.reshape(&[1, d]), 1, d);
        let wn = unit_rows(p[self.head_w], n, d);
        let cos = wn.matmul(en.transpose()).reshape(&[n]);
        let mut onehot = ArrayD::zeros(IxDyn(&[n]));
        onehot[[label]] = E::one();
        let oh = t.constant(onehot);
        let logits = (cos - oh.mul_scalar(self.margin)).mul_scalar(self.scale);
        let lse = logits.exp().sum().ln();
        lse - logits.dot(oh)
    }

    /// Requires a trained checkpoint; embeddings are meaningless before.
    pub fn embed_identity(&self, x: &ArrayD<E>) -> Result<EmbeddingVector> {
        if !self.trained {
            return Err(Error::MissingCheckpoint("identity embedder".into()));
        }
        check_image_shape(x.shape(), self.cfg.resolution)?;
        let t = Tape::new();
        let p = self.vars(&t, false);
        let e = self.forward(&p, t.constant(x.clone()));
        Ok(EmbeddingVector { v: e.value().iter().map(|v| v.as_f64()).collect() })
    }

    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let cfg = serde_json::json!({
            "arch": self.cfg,
            "margin": self.margin,
            "scale": self.scale,
        });
        let container = Container {
            kind: "identity_embedder".into(),
            config: cfg,
            sections: vec![("params".into(), store_to_arrays(&self.params))],
        };
        container.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let c = Container::load(path)?;
        if c.kind != "identity_embedder" {
            return Err(Error::Checkpoint(format!("expected identity_embedder, found {}", c.kind)));
        }
        let arch: EmbedderConfig = serde_json::from_value(c.config["arch"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad config: {e}")))?;
        let margin = c.config["margin"].as_f64().unwrap_or(0.3);
        let scale = c.config["scale"].as_f64().unwrap_or(16.0);
        let mut net = IdentityEmbedder::new(arch, margin, scale, 0)?;
        arrays_into_store(&mut net.params, c.section("params")?)?;
        net.trained = true;
        Ok(net)
    }

    /// Trains from scratch on (image, patient id) pairs.
    pub fn train(
        cfg: EmbedderConfig,
        margin: f64,
        scale: f64,
        images: &[ArrayD<E>],
        labels: &[usize],
        opts: &AuxTrainOpts,
    ) -> Result<Self> {
        assert_eq!(images.len(), labels.len());
        let mut net = IdentityEmbedder::new(cfg, margin, scale, opts.seed)?;
        let mut adam = Adam::new(&net.params, opts.lr, 0.9, 0.999);
        for step in 0..opts.steps {
            let idx = batch_indices(opts.seed, step as u64, opts.batch_size, images.len());
            let mut acc = GradAccum::new(&net.params);
            let mut loss_sum = 0.0;
            for &i in &idx {
                let t = Tape::new();
                let p = net.vars(&t, true);
                let emb = net.forward(&p, t.constant(images[i].clone()));
                let loss = net.margin_loss(&p, emb, labels[i]);
                let lv = loss.item().as_f64();
                if !lv.is_finite() {
                    return Err(Error::NonFinite { step, context: "identity embedder loss".into() });
                }
                loss_sum += lv;
                acc.add(&t.grad(loss, &p));
            }
            let _ = loss_sum;
            adam.step(&mut net.params, &acc.mean());
        }
        net.trained = true;
        Ok(net)
    }
}

/// E_ut: embedding net with a multi-label sigmoid head over lesion classes;
/// the penultimate feature vector is the utility embedding.
pub struct UtilityEmbedder<E: Scalar> {
    pub cfg: EmbedderConfig,
    params: ParamStore<E>,
    bb: Backbone,
    head: Linear,
    trained: bool,
}

impl<E: Scalar> UtilityEmbedder<E> {
    pub fn new(cfg: EmbedderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bb = Backbone::new(&mut store, &mut rng, &cfg);
        let head = Linear::new(&mut store, &mut rng, "head", cfg.embed_dim, cfg.n_out);
        Ok(UtilityEmbedder { cfg, params: store, bb, head, trained: false })
    }

    pub fn params(&self) -> &ParamStore<E> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<E> {
        &mut self.params
    }

    pub fn vars<'t>(&self, tape: &'t Tape<E>, trainable: bool) -> Vec<Tv<'t, E>> {
        self.params.vars(tape, trainable)
    }

    pub fn forward<'t>(&self, p: &[Tv<'t, E>], x: Tv<'t, E>) -> Tv<'t, E> {
        self.bb.forward(p, x, *self.cfg.channels.last().unwrap())
    }

    pub fn logits<'t>(&self, p: &[Tv<'t, E>], emb: Tv<'t, E>) -> Tv<'t, E> {
        self.head.forward(p, emb.leaky_relu(0.2))
    }

    /// Number of selectable feature layers: 0 is the stem output, `n` the
    /// output of the n-th downsampling block.
    pub fn n_feature_layers(&self) -> usize {
        self.bb.blocks.len()
    }

    /// Intermediate feature map used as the perceptual-loss representation.
    pub fn features<'t>(&self, p: &[Tv<'t, E>], x: Tv<'t, E>, layer: usize) -> Tv<'t, E> {
        assert!(layer <= self.bb.blocks.len(), "feature layer out of range");
        self.bb.features_at(p, x, layer)
    }

    /// Evaluation-mode feature map of a stored image.
    pub fn feature_map(&self, x: &ArrayD<E>, layer: usize) -> Result<ArrayD<f64>> {
        if layer > self.n_feature_layers() {
            return Err(Error::Config(format!(
                "feature layer {layer} out of range 0..={}",
                self.n_feature_layers()
            )));
        }
        check_image_shape(x.shape(), self.cfg.resolution)?;
        let t = Tape::new();
        let p = self.vars(&t, false);
        let f = self.features(&p, t.constant(x.clone()), layer);
        Ok(f.value().mapv(|v| v.as_f64()))
    }

    pub fn embed_utility(&self, x: &ArrayD<E>) -> Result<EmbeddingVector> {
        if !self.trained {
            return Err(Error::MissingCheckpoint("utility embedder".into()));
        }
        check_image_shape(x.shape(), self.cfg.resolution)?;
        let t = Tape::new();
        let p = self.vars(&t, false);
        let e = self.forward(&p, t.constant(x.clone()));
        Ok(EmbeddingVector { v: e.value().iter().map(|v| v.as_f64()).collect() })
    }

    /// Per-label probabilities from the sigmoid head.
    pub fn classify_utility(&self, x: &ArrayD<E>) -> Result<Vec<f64>> {
        if !self.trained {
            return Err(Error::MissingCheckpoint("utility embedder".into()));
        }
        check_image_shape(x.shape(), self.cfg.resolution)?;
        let t = Tape::new();
        let p = self.vars(&t, false);
        let emb = self.forward(&p, t.constant(x.clone()));
        let probs = self.logits(&p, emb).sigmoid();
        Ok(probs.value().iter().map(|v| v.as_f64()).collect())
    }

    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        save_net(path, "utility_embedder", &self.cfg, &self.params, None)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let c = Container::load(path)?;
        let cfg: EmbedderConfig = parse_net_config(&c, "utility_embedder")?;
        let mut net = UtilityEmbedder::new(cfg, 0)?;
        arrays_into_store(&mut net.params, c.section("params")?)?;
        net.trained = true;
        Ok(net)
    }

    /// Trains from scratch on (image, multi-hot label) pairs with
    /// binary cross-entropy.
    pub fn train(
        cfg: EmbedderConfig,
        images: &[ArrayD<E>],
        labels: &[Vec<f64>],
        opts: &AuxTrainOpts,
    ) -> Result<Self> {
        assert_eq!(images.len(), labels.len());
        let mut net = UtilityEmbedder::new(cfg, opts.seed)?;
        let mut adam = Adam::new(&net.params, opts.lr, 0.9, 0.999);
        let n_out = net.cfg.n_out;
        for step in 0..opts.steps {
            let idx = batch_indices(opts.seed, step as u64, opts.batch_size, images.len());
            let mut acc = GradAccum::new(&net.params);
            for &i in &idx {
                let t = Tape::new();
                let p = net.vars(&t, true);
                let emb = net.forward(&p, t.constant(images[i].clone()));
                let z = net.logits(&p, emb);
                let y = t.constant(ArrayD::from_shape_vec(
                    IxDyn(&[n_out]),
                    labels[i].iter().map(|&v| E::from_f64(v)).collect(),
                )
                .unwrap());
                // softplus(z) - y z is binary cross-entropy on logits.
                let loss = (z.softplus() - y * z).mean();
                let lv = loss.item().as_f64();
                if !lv.is_finite() {
                    return Err(Error::NonFinite { step, context: "utility embedder loss".into() });
                }
                acc.add(&t.grad(loss, &p));
            }
            adam.step(&mut net.params, &acc.mean());
        }
        net.trained = true;
        Ok(net)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AuxTrainOpts {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for AuxTrainOpts {
    fn default() -> Self {
        AuxTrainOpts { steps: 400, batch_size: 8, lr: 1e-3, seed: 0 }
    }
}

/// Batch membership is a pure function of (seed, step), so training never
/// carries sampler state and resumed runs re-draw identical batches.
pub fn batch_indices(seed: u64, step: u64, batch_size: usize, n: usize) -> Vec<usize> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    (0..batch_size).map(|_| rng.gen_range(0..n)).collect()
}

/// Rows scaled to unit norm, with an epsilon guard for zero rows.
fn unit_rows<'t, E: Scalar>(m: Tv<'t, E>, rows: usize, cols: usize) -> Tv<'t, E> {
    let sq = m.square().sum_to(&[rows, 1]).add_scalar(1e-12);
    m / sq.sqrt().broadcast_to(&[rows, cols])
}

fn save_net<E: Scalar, C: Serialize>(
    path: &std::path::Path,
    kind: &str,
    cfg: &C,
    params: &ParamStore<E>,
    buffers: Option<&ParamStore<E>>,
) -> Result<()> {
    let mut sections = vec![("params".to_string(), store_to_arrays(params))];
    if let Some(b) = buffers {
        sections.push(("buffers".to_string(), store_to_arrays(b)));
    }
    let container = Container {
        kind: kind.into(),
        config: serde_json::to_value(cfg).map_err(|e| Error::Serde(e.to_string()))?,
        sections,
    };
    container.save(path)
}

fn parse_net_config<C: for<'de> Deserialize<'de>>(c: &Container, kind: &str) -> Result<C> {
    if c.kind != kind {
        return Err(Error::Checkpoint(format!("expected {kind} checkpoint, found {}", c.kind)));
    }
    serde_json::from_value(c.config.clone()).map_err(|e| Error::Checkpoint(format!("bad config: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_encoder_cfg() -> EncoderConfig {
        EncoderConfig { resolution: 8, channels: vec![4, 6, 8], d_w: 8 }
    }

    fn tiny_generator_cfg() -> GeneratorConfig {
        GeneratorConfig { resolution: 8, d_w: 8, channels: vec![8, 6] }
    }

    fn tiny_disc_cfg() -> DiscriminatorConfig {
        DiscriminatorConfig { resolution: 8, channels: vec![4, 6] }
    }

    fn tiny_embedder_cfg() -> EmbedderConfig {
        EmbedderConfig { resolution: 8, channels: vec![4, 6], embed_dim: 6, n_out: 3 }
    }

    fn rand_image(seed: u64, res: usize) -> ArrayD<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_simple_fn(IxDyn(&[1, res, res]), || rng.gen_range(0.0..1.0))
    }

    #[test]
    fn encoder_shape_and_determinism() {
        let enc = Encoder::<f64>::new(tiny_encoder_cfg(), 1).unwrap();
        let x = rand_image(2, 8);
        let w1 = enc.encode(&x).unwrap();
        let w2 = enc.encode(&x).unwrap();
        assert_eq!(w1.dim(), 8);
        assert_eq!(w1, w2);
        assert!(w1.w.iter().all(|v| v.is_finite()));
        let bad = ArrayD::<f64>::zeros(IxDyn(&[1, 4, 4]));
        assert!(enc.encode(&bad).is_err());
    }

    #[test]
    fn generator_range_and_determinism() {
        let g = Generator::<f64>::new(tiny_generator_cfg(), 3).unwrap();
        let w = LatentCode { w: vec![0.0; 8] };
        let img = g.generate(&w).unwrap();
        assert_eq!(img.shape(), &[1, 8, 8]);
        assert!(img.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(img, g.generate(&w).unwrap());
        let bad = LatentCode { w: vec![0.0; 5] };
        assert!(g.generate(&bad).is_err());
    }

    #[test]
    fn discriminator_scalar_and_batch_consistency() {
        let d = Discriminator::<f64>::new(tiny_disc_cfg(), 5).unwrap();
        let xs: Vec<_> = (0..3).map(|i| rand_image(10 + i, 8)).collect();
        let singles: Vec<f64> = xs.iter().map(|x| d.discriminate(x).unwrap()).collect();
        // "Batching" is sequential per-sample evaluation, so a batch is by
        // construction equal to n single calls; assert it anyway.
        let batched: Vec<f64> = xs.iter().map(|x| d.discriminate(x).unwrap()).collect();
        assert_eq!(singles, batched);
        assert!(singles.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn embedders_require_checkpoint() {
        let id = IdentityEmbedder::<f64>::new(
            EmbedderConfig { n_out: 5, ..tiny_embedder_cfg() },
            0.3,
            16.0,
            7,
        )
        .unwrap();
        let x = rand_image(1, 8);
        assert!(matches!(id.embed_identity(&x), Err(Error::MissingCheckpoint(_))));
        let ut = UtilityEmbedder::<f64>::new(tiny_embedder_cfg(), 7).unwrap();
        assert!(matches!(ut.embed_utility(&x), Err(Error::MissingCheckpoint(_))));
        assert!(matches!(ut.classify_utility(&x), Err(Error::MissingCheckpoint(_))));
    }

    #[test]
    fn embedder_outputs_after_marking_trained() {
        let mut id = IdentityEmbedder::<f64>::new(
            EmbedderConfig { n_out: 5, ..tiny_embedder_cfg() },
            0.3,
            16.0,
            7,
        )
        .unwrap();
        id.mark_trained();
        let x = rand_image(1, 8);
        let e1 = id.embed_identity(&x).unwrap();
        assert_eq!(e1.dim(), 6);
        assert_eq!(e1, id.embed_identity(&x).unwrap());

        let mut ut = UtilityEmbedder::<f64>::new(tiny_embedder_cfg(), 9).unwrap();
        ut.mark_trained();
        let probs = ut.classify_utility(&x).unwrap();
        assert_eq!(probs.len(), 3);
        assert!(probs.iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert_eq!(ut.embed_utility(&x).unwrap(), ut.embed_utility(&x).unwrap());
    }

    #[test]
    fn encode_generate_compose() {
        let enc = Encoder::<f64>::new(tiny_encoder_cfg(), 1).unwrap();
        let g = Generator::<f64>::new(tiny_generator_cfg(), 2).unwrap();
        let x = rand_image(3, 8);
        let img = g.generate(&enc.encode(&x).unwrap()).unwrap();
        assert_eq!(img.shape(), &[1, 8, 8]);
    }

    #[test]
    fn net_checkpoints_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let enc = Encoder::<f32>::new(tiny_encoder_cfg(), 11).unwrap();
        let p = dir.path().join("e.ckpt");
        enc.save(&p).unwrap();
        let loaded = Encoder::<f32>::load(&p).unwrap();
        assert_eq!(loaded.params.checksum(), enc.params.checksum());
        assert!(Encoder::<f32>::load_matching(&p, &tiny_encoder_cfg()).is_ok());
        let other = EncoderConfig { d_w: 16, ..tiny_encoder_cfg() };
        assert!(Encoder::<f32>::load_matching(&p, &other).is_err());

        let g = Generator::<f32>::new(tiny_generator_cfg(), 12).unwrap();
        let pg = dir.path().join("g.ckpt");
        g.save(&pg).unwrap();
        let gl = Generator::<f32>::load(&pg).unwrap();
        assert_eq!(gl.params.checksum(), g.params.checksum());
        assert_eq!(gl.buffers.checksum(), g.buffers.checksum());
        let w = LatentCode { w: vec![0.25; 8] };
        assert_eq!(g.generate(&w).unwrap(), gl.generate(&w).unwrap());
    }

    /// Finite-difference oracle over the full encoder/generator/discriminator
    /// stacks at ≥10 random probe points each, 1e-3 relative tolerance.
    #[test]
    fn net_gradients_match_finite_differences() {
        use rand::Rng;
        let enc = Encoder::<f64>::new(tiny_encoder_cfg(), 21).unwrap();
        let g = Generator::<f64>::new(tiny_generator_cfg(), 22).unwrap();
        let d = Discriminator::<f64>::new(tiny_disc_cfg(), 23).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);

        // encoder: d sum(E(x)) / dx
        let x0 = rand_image(31, 8);
        let eval_e = |x: &ArrayD<f64>| {
            let t = Tape::new();
            let p = enc.vars(&t, false);
            enc.forward(&p, t.constant(x.clone())).sum().item()
        };
        let t = Tape::new();
        let p = enc.vars(&t, false);
        let xv = t.leaf(x0.clone());
        let loss = enc.forward(&p, xv).sum();
        let gx = t.grad(loss, &[xv])[0].clone().unwrap();
        check_probes(&mut rng, &x0, &gx, eval_e, 12);

        // generator: d mean(G(w)) / dw
        let w0 = ArrayD::from_shape_simple_fn(IxDyn(&[8]), || rng.gen_range(-1.0..1.0));
        let eval_g = |w: &ArrayD<f64>| {
            let t = Tape::new();
            let p = g.vars(&t, false);
            let b = g.buffer_vars(&t);
            g.forward(&p, &b, t.constant(w.clone())).mean().item()
        };
        let t = Tape::new();
        let p = g.vars(&t, false);
        let b = g.buffer_vars(&t);
        let wv = t.leaf(w0.clone());
        let loss = g.forward(&p, &b, wv).mean();
        let gw = t.grad(loss, &[wv])[0].clone().unwrap();
        check_probes(&mut rng, &w0, &gw, eval_g, 12);

        // discriminator: d D(x) / dx
        let xd = rand_image(32, 8);
        let eval_d = |x: &ArrayD<f64>| {
            let t = Tape::new();
            let p = d.vars(&t, false);
            d.forward(&p, t.constant(x.clone())).item()
        };
        let t = Tape::new();
        let p = d.vars(&t, false);
        let xv = t.leaf(xd.clone());
        let loss = d.forward(&p, xv);
        let gd = t.grad(loss.reshape(&[1]), &[xv])[0].clone().unwrap();
        check_probes(&mut rng, &xd, &gd, eval_d, 12);
    }

    fn check_probes<F: Fn(&ArrayD<f64>) -> f64>(
        rng: &mut ChaCha8Rng,
        x0: &ArrayD<f64>,
        analytic: &ArrayD<f64>,
        eval: F,
        n_probes: usize,
    ) {
        use rand::Rng;
        let n = x0.len();
        let h = 1e-5;
        for _ in 0..n_probes {
            let i = rng.gen_range(0..n);
            let mut plus = x0.clone();
            let mut minus = x0.clone();
            plus.as_slice_mut().unwrap()[i] += h;
            minus.as_slice_mut().unwrap()[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let an = analytic.as_slice().unwrap()[i];
            let err = (an - fd).abs() / (1.0 + an.abs().max(fd.abs()));
            assert!(err < 1e-3, "probe {i}: analytic {an} vs fd {fd} (err {err})");
        }
    }

    #[test]
    fn margin_loss_prefers_true_class() {
        // Training on a toy problem should drive the margin loss down and
        // separate the two identities in cosine.
        let cfg = EmbedderConfig { resolution: 8, channels: vec![4, 6], embed_dim: 6, n_out: 2 };
        let mk = |seed: u64, bright: bool| {
            let mut img = rand_image(seed, 8);
            if bright {
                img.mapv_inplace(|v| 0.5 + 0.5 * v);
            } else {
                img.mapv_inplace(|v| 0.5 * v);
            }
            img
        };
        let images: Vec<_> = (0..8).map(|i| mk(i, i % 2 == 0)).collect();
        let labels: Vec<_> = (0..8).map(|i| (i % 2) as usize).collect();
        let opts = AuxTrainOpts { steps: 60, batch_size: 4, lr: 3e-3, seed: 5 };
        let net = IdentityEmbedder::<f64>::train(cfg, 0.3, 16.0, &images, &labels, &opts).unwrap();
        let cos = |a: &EmbeddingVector, b: &EmbeddingVector| {
            let dot: f64 = a.v.iter().zip(&b.v).map(|(x, y)| x * y).sum();
            let na: f64 = a.v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.v.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb).max(1e-12)
        };
        let e: Vec<_> = images.iter().map(|x| net.embed_identity(x).unwrap()).collect();
        let mut intra = vec![];
        let mut inter = vec![];
        for i in 0..e.len() {
            for j in (i + 1)..e.len() {
                if labels[i] == labels[j] {
                    intra.push(cos(&e[i], &e[j]));
                } else {
                    inter.push(cos(&e[i], &e[j]));
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(
            mean(&intra) > mean(&inter),
            "intra {} should exceed inter {}",
            mean(&intra),
            mean(&inter)
        );
    }

    #[test]
    fn batch_indices_are_stateless() {
        let a = batch_indices(7, 42, 8, 100);
        let b = batch_indices(7, 42, 8, 100);
        assert_eq!(a, b);
        let c = batch_indices(7, 43, 8, 100);
        assert_ne!(a, c);
    }
}
