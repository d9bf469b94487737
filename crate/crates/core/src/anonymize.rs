//! Latent code optimization: starting from the projected code W, minimize a
//! weighted sum of the identity hinge loss and the utility embedding
//! distance, producing the anonymized code W_A and image X_A = G(W_A).

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::nets::{EmbeddingVector, Generator, IdentityEmbedder, LatentCode, UtilityEmbedder};
use crate::nn::{Adam, ParamStore};
use crate::tensor::{Scalar, Tape, Tv};
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AnonConfig {
    /// Hinge margin m: the identity loss is zero once the embedding angle
    /// reaches or exceeds arccos(m).
    pub margin: f64,
    /// Guard of the cosine denominator.
    pub epsilon: f64,
    pub use_id: bool,
    pub use_ut: bool,
    pub alpha_id: f64,
    pub alpha_ut: f64,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for AnonConfig {
    fn default() -> Self {
        AnonConfig {
            margin: 0.0,
            epsilon: 1e-8,
            use_id: true,
            use_ut: true,
            alpha_id: 1.0,
            alpha_ut: 1.0,
            steps: 200,
            lr: 0.05,
            seed: 0,
        }
    }
}

impl AnonConfig {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.margin) {
            return Err(Error::Config("margin must be in [-1, 1]".into()));
        }
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            return Err(Error::Config("epsilon must be positive and finite".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config("lr must be non-negative and finite".into()));
        }
        if !self.alpha_id.is_finite() || !self.alpha_ut.is_finite() {
            return Err(Error::Config("loss weights must be finite".into()));
        }
        if !self.use_id && !self.use_ut {
            return Err(Error::Config("at least one loss must be enabled".into()));
        }
        Ok(())
    }

    /// Loss-toggle tag used in file names and reports: ut, id, or ut+id.
    pub fn losses_tag(&self) -> &'static str {
        match (self.use_ut, self.use_id) {
            (true, true) => "ut+id",
            (true, false) => "ut",
            (false, true) => "id",
            (false, false) => "none",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnonResult {
    pub w_init: LatentCode,
    pub w_a: LatentCode,
    /// `G(w_a)`, recomputable exactly from `w_a`.
    pub x_a: ArrayD<f64>,
    /// Total loss per completed step.
    pub trajectory: Vec<f64>,
    pub achieved_identity_cosine: f64,
    pub achieved_utility_distance: f64,
    /// Step at which a non-finite loss aborted optimization, if any; the
    /// trajectory then holds only the finite steps before it.
    pub aborted_at: Option<usize>,
}

/// `a·b / max(‖a‖‖b‖, ε)`: exactly zero for a zero vector.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector, epsilon: f64) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("[{}]", a.dim()), format!("[{}]", b.dim())));
    }
    if epsilon <= 0.0 {
        return Err(Error::Config("epsilon must be positive".into()));
    }
    let dot: f64 = a.v.iter().zip(&b.v).map(|(x, y)| x * y).sum();
    let na: f64 = a.v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.v.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(dot / (na * nb).max(epsilon))
}

/// Eq.-style hinge on the identity cosine: `max(0, cos − m)`.
pub fn identity_loss<E: Scalar>(
    x_r: &ArrayD<E>,
    x_a: &ArrayD<E>,
    e_id: &IdentityEmbedder<E>,
    margin: f64,
    epsilon: f64,
) -> Result<f64> {
    let er = e_id.embed_identity(x_r)?;
    let ea = e_id.embed_identity(x_a)?;
    Ok((cosine_similarity(&er, &ea, epsilon)? - margin).max(0.0))
}

/// `‖a − b‖₂` on raw embedding vectors.
pub fn embedding_l2(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
    a.v.iter().zip(&b.v).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Utility embedding distance between two images.
pub fn utility_loss<E: Scalar>(
    x_r: &ArrayD<E>,
    x_a: &ArrayD<E>,
    e_ut: &UtilityEmbedder<E>,
) -> Result<f64> {
    let ur = e_ut.embed_utility(x_r)?;
    let ua = e_ut.embed_utility(x_a)?;
    Ok(embedding_l2(&ur, &ua))
}

/// The frozen networks consumed by latent optimization.
pub struct AnonNets<'a, E: Scalar> {
    pub generator: &'a Generator<E>,
    pub e_id: &'a IdentityEmbedder<E>,
    pub e_ut: &'a UtilityEmbedder<E>,
}

/// On-tape guarded cosine between a constant reference embedding and the
/// current anonymized embedding. The 1e-24 norm guard only matters at
/// exactly-zero embeddings, where the hinge gradient is irrelevant anyway.
fn cosine_tv<'t, E: Scalar>(a: Tv<'t, E>, b: Tv<'t, E>) -> Tv<'t, E> {
    let na = a.square().sum().add_scalar(1e-24).sqrt();
    let nb = b.square().sum().add_scalar(1e-24).sqrt();
    a.dot(b) / (na * nb)
}

/// Builds the combined anonymization objective for the current `x_a` node.
fn objective<'t, E: Scalar>(
    nets: &AnonNets<'_, E>,
    cfg: &AnonConfig,
    p_id: &[Tv<'t, E>],
    p_ut: &[Tv<'t, E>],
    target_id: Tv<'t, E>,
    target_ut: Tv<'t, E>,
    x_a: Tv<'t, E>,
) -> Tv<'t, E> {
    let t = x_a.tape();
    let mut total = t.scalar(0.0);
    if cfg.use_id {
        let ea = nets.e_id.forward(p_id, x_a);
        let cos = cosine_tv(target_id, ea);
        let hinge = cos.add_scalar(-cfg.margin).relu();
        total = total + hinge.mul_scalar(cfg.alpha_id);
    }
    if cfg.use_ut {
        let ua = nets.e_ut.forward(p_ut, x_a);
        // sqrt has an infinite derivative at zero; the 1e-24 pad bounds it
        // while shifting the distance by at most 1e-12.
        let dist = (target_ut - ua).square().sum().add_scalar(1e-24).sqrt();
        total = total + dist.mul_scalar(cfg.alpha_ut);
    }
    total
}

/// Optimizes W_A from `w_init` for `cfg.steps` Adam iterations. All network
/// parameters are instantiated as constants: nothing but W_A can change.
pub fn optimize_latent<E: Scalar>(
    nets: &AnonNets<'_, E>,
    w_init: &LatentCode,
    x_r: &ArrayD<E>,
    cfg: &AnonConfig,
) -> Result<AnonResult> {
    cfg.validate()?;
    let g = nets.generator;
    if w_init.dim() != g.cfg.d_w {
        return Err(Error::shape(format!("[{}]", g.cfg.d_w), format!("[{}]", w_init.dim())));
    }
    let target_id_v = nets.e_id.embed_identity(x_r)?;
    let target_ut_v = nets.e_ut.embed_utility(x_r)?;

    let mut w_store = ParamStore::<E>::new();
    let w_id = w_store.add("w", w_init.to_array::<E>());
    let mut adam = Adam::new(&w_store, cfg.lr, 0.9, 0.999);
    let mut trajectory = Vec::with_capacity(cfg.steps);
    let mut aborted_at = None;

    for step in 0..cfg.steps {
        let t = Tape::new();
        let p_g = g.vars(&t, false);
        let b_g = g.buffer_vars(&t);
        let p_id = nets.e_id.vars(&t, false);
        let p_ut = nets.e_ut.vars(&t, false);
        let target_id = t.constant(to_e_array::<E>(&target_id_v.v));
        let target_ut = t.constant(to_e_array::<E>(&target_ut_v.v));
        let w = t.leaf(w_store.value(w_id).clone());
        let x_a = g.forward(&p_g, &b_g, w);
        let loss = objective(nets, cfg, &p_id, &p_ut, target_id, target_ut, x_a);
        let lv = loss.item().as_f64();
        if !lv.is_finite() {
            aborted_at = Some(step);
            break;
        }
        trajectory.push(lv);
        let grads = t.grad(loss, &[w]);
        adam.step(&mut w_store, &grads);
    }

    let w_a = LatentCode::from_array(w_store.value(w_id));
    let x_a = g.generate(&w_a)?;
    let achieved_identity_cosine = cosine_similarity(
        &target_id_v,
        &nets.e_id.embed_identity(&x_a)?,
        cfg.epsilon,
    )?;
    let achieved_utility_distance = embedding_l2(&target_ut_v, &nets.e_ut.embed_utility(&x_a)?);
    Ok(AnonResult {
        w_init: w_init.clone(),
        w_a,
        x_a: x_a.mapv(|v| v.as_f64()),
        trajectory,
        achieved_identity_cosine,
        achieved_utility_distance,
        aborted_at,
    })
}

fn to_e_array<E: Scalar>(v: &[f64]) -> ArrayD<E> {
    ArrayD::from_shape_vec(ndarray::IxDyn(&[v.len()]), v.iter().map(|&x| E::from_f64(x)).collect())
        .unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{EmbedderConfig, GeneratorConfig};
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn emb(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector { v: v.to_vec() }
    }

    #[test]
    fn cosine_basics() {
        let v = emb(&[0.3, -0.4, 1.2]);
        assert!((cosine_similarity(&v, &v, 1e-8).unwrap() - 1.0).abs() < 1e-7);
        let a = emb(&[1.0, 0.0]);
        let b = emb(&[0.0, 1.0]);
        assert_eq!(cosine_similarity(&a, &b, 1e-8).unwrap(), 0.0);
        let zero = emb(&[0.0, 0.0]);
        assert_eq!(cosine_similarity(&zero, &a, 1e-8).unwrap(), 0.0);
        assert!(cosine_similarity(&a, &emb(&[1.0, 2.0, 3.0]), 1e-8).is_err());
        assert!(cosine_similarity(&a, &b, 0.0).is_err());
    }

    struct World {
        g: Generator<f64>,
        e_id: IdentityEmbedder<f64>,
        e_ut: UtilityEmbedder<f64>,
    }

    fn tiny_world() -> World {
        let g = Generator::new(
            GeneratorConfig { resolution: 8, d_w: 6, channels: vec![8, 6] },
            1,
        )
        .unwrap();
        let ecfg = EmbedderConfig { resolution: 8, channels: vec![4, 6], embed_dim: 5, n_out: 3 };
        let mut e_id = IdentityEmbedder::new(
            EmbedderConfig { n_out: 4, ..ecfg.clone() },
            0.3,
            16.0,
            2,
        )
        .unwrap();
        e_id.mark_trained();
        let mut e_ut = UtilityEmbedder::new(ecfg, 3).unwrap();
        e_ut.mark_trained();
        World { g, e_id, e_ut }
    }

    fn rand_image(seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_simple_fn(IxDyn(&[1, 8, 8]), || rng.gen_range(0.0..1.0))
    }

    #[test]
    fn identity_loss_identical_images_and_boundary() {
        let w = tiny_world();
        let x = rand_image(10);
        // Identical images, m = 0: cos = 1, loss = 1.
        let l = identity_loss(&x, &x, &w.e_id, 0.0, 1e-8).unwrap();
        assert!((l - 1.0).abs() < 1e-9, "{l}");
        // m exactly at the achieved cosine: hinge lands on 0.
        let y = rand_image(11);
        let cos = cosine_similarity(
            &w.e_id.embed_identity(&x).unwrap(),
            &w.e_id.embed_identity(&y).unwrap(),
            1e-8,
        )
        .unwrap();
        let at_boundary = identity_loss(&x, &y, &w.e_id, cos, 1e-8).unwrap();
        assert_eq!(at_boundary, 0.0);
        // Compositional oracle: recompute the hinge step by step.
        let m = -0.5;
        let want = (cos - m).max(0.0);
        let got = identity_loss(&x, &y, &w.e_id, m, 1e-8).unwrap();
        assert_eq!(got, want);
    }

    #[test]
    fn utility_loss_cases() {
        let w = tiny_world();
        let x = rand_image(12);
        assert_eq!(utility_loss(&x, &x, &w.e_ut).unwrap(), 0.0);
        // Single-coordinate offset on raw embeddings.
        let u = emb(&[0.2, -0.7, 1.1]);
        let mut v = u.clone();
        v.v[0] += 0.35;
        assert!((embedding_l2(&u, &v) - 0.35).abs() < 1e-12);
        // Random pair equals the independently computed norm.
        let y = rand_image(13);
        let got = utility_loss(&x, &y, &w.e_ut).unwrap();
        let (a, b) = (w.e_ut.embed_utility(&x).unwrap(), w.e_ut.embed_utility(&y).unwrap());
        let want = a
            .v
            .iter()
            .zip(&b.v)
            .map(|(p, q)| (p - q).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((got - want).abs() < 1e-9);
    }

    #[test]
    fn utility_loss_triangle_bound() {
        let w = tiny_world();
        let (a, b, c) = (rand_image(14), rand_image(15), rand_image(16));
        let ab = utility_loss(&a, &b, &w.e_ut).unwrap();
        let ac = utility_loss(&a, &c, &w.e_ut).unwrap();
        let bc = utility_loss(&b, &c, &w.e_ut).unwrap();
        assert!((ac - ab).abs() <= bc + 1e-12);
    }

    fn base_cfg() -> AnonConfig {
        AnonConfig { steps: 3, lr: 0.05, ..AnonConfig::default() }
    }

    #[test]
    fn config_validation() {
        assert!(AnonConfig { margin: 1.5, ..base_cfg() }.validate().is_err());
        assert!(AnonConfig { epsilon: 0.0, ..base_cfg() }.validate().is_err());
        assert!(AnonConfig { steps: 0, ..base_cfg() }.validate().is_err());
        assert!(AnonConfig { use_id: false, use_ut: false, ..base_cfg() }.validate().is_err());
        assert!(base_cfg().validate().is_ok());
    }

    #[test]
    fn zero_lr_single_step_is_identity_on_w() {
        let w = tiny_world();
        let nets = AnonNets { generator: &w.g, e_id: &w.e_id, e_ut: &w.e_ut };
        let x = rand_image(17);
        let w0 = LatentCode { w: vec![0.1, -0.2, 0.3, 0.0, 0.5, -0.6] };
        let cfg = AnonConfig { steps: 1, lr: 0.0, ..base_cfg() };
        let res = optimize_latent(&nets, &w0, &x, &cfg).unwrap();
        assert_eq!(res.w_a, w0);
        assert_eq!(res.trajectory.len(), 1);
        assert!(res.aborted_at.is_none());
        // X_A is recomputable from W_A alone.
        let regen = w.g.generate(&res.w_a).unwrap();
        assert_eq!(regen, res.x_a);
    }

    #[test]
    fn optimization_is_deterministic_and_freezes_networks() {
        let w = tiny_world();
        let nets = AnonNets { generator: &w.g, e_id: &w.e_id, e_ut: &w.e_ut };
        let x = rand_image(18);
        let w0 = LatentCode { w: vec![0.0; 6] };
        let cfg = base_cfg();
        let before = (
            w.g.params().checksum(),
            w.g.buffers().checksum(),
            w.e_id.params().checksum(),
            w.e_ut.params().checksum(),
        );
        let r1 = optimize_latent(&nets, &w0, &x, &cfg).unwrap();
        let r2 = optimize_latent(&nets, &w0, &x, &cfg).unwrap();
        assert_eq!(r1.w_a, r2.w_a);
        assert_eq!(r1.trajectory, r2.trajectory);
        assert_eq!(r1.x_a, r2.x_a);
        let after = (
            w.g.params().checksum(),
            w.g.buffers().checksum(),
            w.e_id.params().checksum(),
            w.e_ut.params().checksum(),
        );
        assert_eq!(before, after);
        assert_eq!(r1.trajectory.len(), cfg.steps);
    }

    #[test]
    fn non_finite_input_aborts_with_partial_trajectory() {
        let w = tiny_world();
        let nets = AnonNets { generator: &w.g, e_id: &w.e_id, e_ut: &w.e_ut };
        let mut x = rand_image(19);
        x[[0, 0, 0]] = f64::NAN;
        let w0 = LatentCode { w: vec![0.0; 6] };
        let res = optimize_latent(&nets, &w0, &x, &base_cfg()).unwrap();
        assert_eq!(res.aborted_at, Some(0));
        assert!(res.trajectory.is_empty());
    }

    /// FD oracle on the combined objective in the hinge-active regime, plus
    /// the exact-zero identity gradient once cos ≤ m.
    #[test]
    fn objective_gradient_matches_fd_and_hinge_is_flat() {
        let world = tiny_world();
        let nets = AnonNets { generator: &world.g, e_id: &world.e_id, e_ut: &world.e_ut };
        let x = rand_image(20);
        let target_id = world.e_id.embed_identity(&x).unwrap();
        let target_ut = world.e_ut.embed_utility(&x).unwrap();
        let w0: Vec<f64> = {
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            (0..6).map(|_| rng.gen_range(-0.5..0.5)).collect()
        };

        let eval = |cfg: &AnonConfig, wv: &[f64]| -> f64 {
            let t = Tape::new();
            let p_g = world.g.vars(&t, false);
            let b_g = world.g.buffer_vars(&t);
            let p_id = world.e_id.vars(&t, false);
            let p_ut = world.e_ut.vars(&t, false);
            let ti = t.constant(to_e_array::<f64>(&target_id.v));
            let tu = t.constant(to_e_array::<f64>(&target_ut.v));
            let w = t.constant(to_e_array::<f64>(wv));
            let x_a = world.g.forward(&p_g, &b_g, w);
            objective(&nets, cfg, &p_id, &p_ut, ti, tu, x_a).item()
        };
        let grad_of = |cfg: &AnonConfig, wv: &[f64]| -> Vec<f64> {
            let t = Tape::new();
            let p_g = world.g.vars(&t, false);
            let b_g = world.g.buffer_vars(&t);
            let p_id = world.e_id.vars(&t, false);
            let p_ut = world.e_ut.vars(&t, false);
            let ti = t.constant(to_e_array::<f64>(&target_id.v));
            let tu = t.constant(to_e_array::<f64>(&target_ut.v));
            let w = t.leaf(to_e_array::<f64>(wv));
            let x_a = world.g.forward(&p_g, &b_g, w);
            let loss = objective(&nets, cfg, &p_id, &p_ut, ti, tu, x_a);
            t.grad(loss, &[w])[0].clone().unwrap().iter().copied().collect()
        };

        // Hinge active: margin -1 keeps cos - m positive.
        let cfg = AnonConfig { margin: -1.0, ..base_cfg() };
        let g = grad_of(&cfg, &w0);
        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..10 {
            let i = rng.gen_range(0..w0.len());
            let mut plus = w0.clone();
            let mut minus = w0.clone();
            plus[i] += h;
            minus[i] -= h;
            let fd = (eval(&cfg, &plus) - eval(&cfg, &minus)) / (2.0 * h);
            let err = (g[i] - fd).abs() / (1.0 + g[i].abs().max(fd.abs()));
            assert!(err < 1e-3, "coord {i}: analytic {} vs fd {fd}", g[i]);
        }

        // cos <= m: identity-loss gradient exactly zero.
        let cfg_flat = AnonConfig { margin: 1.0, use_ut: false, ..base_cfg() };
        let g_flat = grad_of(&cfg_flat, &w0);
        assert!(g_flat.iter().all(|&v| v == 0.0), "{g_flat:?}");
    }
}
