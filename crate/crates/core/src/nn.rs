//! Parameter stores, layers and the optimizer used by all five networks.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::tensor::{Scalar, Tape, Tv};

/// Ordered, named tensor collection. Order is fixed at construction time and
/// defines gradient/optimizer alignment and checkpoint layout.
pub struct ParamStore<E: Scalar> {
    names: Vec<String>,
    values: Vec<ArrayD<E>>,
}

impl<E: Scalar> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<E>) -> usize {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn value(&self, id: usize) -> &ArrayD<E> {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: usize) -> &mut ArrayD<E> {
        &mut self.values[id]
    }

    pub fn values(&self) -> &[ArrayD<E>] {
        &self.values
    }

    pub fn set_all(&mut self, values: Vec<ArrayD<E>>) {
        assert_eq!(values.len(), self.values.len());
        for (old, new) in self.values.iter().zip(values.iter()) {
            assert_eq!(old.shape(), new.shape(), "parameter shape changed");
        }
        self.values = values;
    }

    /// Instantiates every parameter onto `tape`, trainable or frozen.
    pub fn vars<'t>(&self, tape: &'t Tape<E>, trainable: bool) -> Vec<Tv<'t, E>> {
        self.values
            .iter()
            .map(|v| {
                if trainable {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect()
    }

    /// SHA-256 over the exact parameter bits, for freeze-contract assertions.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, v) in self.names.iter().zip(&self.values) {
            h.update(name.as_bytes());
            for x in v.iter() {
                h.update(x.as_f64().to_bits().to_le_bytes());
            }
        }
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Adam with bias correction. State arrays align with a `ParamStore`.
pub struct Adam<E: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<ArrayD<E>>,
    v: Vec<ArrayD<E>>,
}

impl<E: Scalar> Adam<E> {
    pub fn new(store: &ParamStore<E>, lr: f64, beta1: f64, beta2: f64) -> Self {
        let zeros = |s: &ParamStore<E>| {
            s.values().iter().map(|v| ArrayD::zeros(v.raw_dim())).collect::<Vec<_>>()
        };
        Adam { lr, beta1, beta2, eps: 1e-8, t: 0, m: zeros(store), v: zeros(store) }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update. `grads[i] == None` means the parameter did not appear in
    /// the graph this step; its moments decay toward zero.
    pub fn step(&mut self, store: &mut ParamStore<E>, grads: &[Option<ArrayD<E>>]) {
        assert_eq!(grads.len(), store.len());
        self.t += 1;
        let b1 = E::from_f64(self.beta1);
        let b2 = E::from_f64(self.beta2);
        let one = E::one();
        let bc1 = E::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = E::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr = E::from_f64(self.lr);
        let eps = E::from_f64(self.eps);
        for i in 0..grads.len() {
            let g_store;
            let g: &ArrayD<E> = match &grads[i] {
                Some(g) => g,
                None => {
                    g_store = ArrayD::zeros(store.value(i).raw_dim());
                    &g_store
                }
            };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| *m = *m * b1 + g * (one - b1));
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| *v = *v * b2 + g * g * (one - b2));
            let p = store.value_mut(i);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *p = *p - lr * mhat / (vhat.sqrt() + eps);
            });
        }
    }

    pub fn state(&self) -> (u64, &[ArrayD<E>], &[ArrayD<E>]) {
        (self.t, &self.m, &self.v)
    }

    pub fn restore(&mut self, t: u64, m: Vec<ArrayD<E>>, v: Vec<ArrayD<E>>) {
        assert_eq!(m.len(), self.m.len());
        assert_eq!(v.len(), self.v.len());
        self.t = t;
        self.m = m;
        self.v = v;
    }
}

pub fn randn<E: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<E> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || {
        let z: f64 = StandardNormal.sample(rng);
        E::from_f64(z * std)
    })
}

pub fn uniform<E: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> ArrayD<E> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || E::from_f64(rng.gen_range(lo..hi)))
}

pub fn zeros<E: Scalar>(shape: &[usize]) -> ArrayD<E> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn full<E: Scalar>(shape: &[usize], v: f64) -> ArrayD<E> {
    ArrayD::from_elem(IxDyn(shape), E::from_f64(v))
}

/// Plain 3x3/1x1 convolution with bias, stride 1.
pub struct Conv2d {
    pub w: usize,
    pub b: usize,
    pub k: usize,
    pub pad: usize,
    pub c_out: usize,
}

impl Conv2d {
    pub fn new<E: Scalar>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
    ) -> Self {
        let fan_in = (c_in * k * k) as f64;
        let w = store.add(format!("{name}.w"), randn(rng, &[c_out, c_in, k, k], (2.0 / fan_in).sqrt()));
        let b = store.add(format!("{name}.b"), zeros(&[c_out]));
        Conv2d { w, b, k, pad: k / 2, c_out }
    }

    pub fn forward<'t, E: Scalar>(&self, p: &[Tv<'t, E>], x: Tv<'t, E>) -> Tv<'t, E> {
        let shp = x.shape();
        assert_eq!(shp.len(), 3, "conv input must be [C,H,W]");
        let (h, w) = (shp[1], shp[2]);
        let cin_kk = shp[0] * self.k * self.k;
        let cols = x.unfold(self.k, self.pad);
        let wmat = p[self.w].reshape(&[self.c_out, cin_kk]);
        let y = wmat.matmul(cols).reshape(&[self.c_out, h, w]);
        let b = p[self.b].reshape(&[self.c_out, 1, 1]).broadcast_to(&[self.c_out, h, w]);
        y + b
    }
}

/// Fully connected layer on `[N]` vectors.
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub out_dim: usize,
    pub in_dim: usize,
}

impl Linear {
    pub fn new<E: Scalar>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = store.add(format!("{name}.w"), randn(rng, &[out_dim, in_dim], (1.0 / in_dim as f64).sqrt()));
        let b = store.add(format!("{name}.b"), zeros(&[out_dim]));
        Linear { w, b, out_dim, in_dim }
    }

    pub fn forward<'t, E: Scalar>(&self, p: &[Tv<'t, E>], x: Tv<'t, E>) -> Tv<'t, E> {
        let x2 = x.reshape(&[self.in_dim, 1]);
        let y = p[self.w].matmul(x2).reshape(&[self.out_dim]);
        y + p[self.b]
    }
}

/// Style-modulated convolution: the latent vector scales input channels of
/// the base weight, optionally followed by per-output-channel demodulation.
pub struct StyledConv {
    pub w: usize,
    pub b: usize,
    pub affine: Linear,
    pub k: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub demodulate: bool,
}

impl StyledConv {
    pub fn new<E: Scalar>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_w: usize,
        c_in: usize,
        c_out: usize,
        k: usize,
        demodulate: bool,
    ) -> Self {
        let fan_in = (c_in * k * k) as f64;
        let w = store.add(format!("{name}.w"), randn(rng, &[c_out, c_in, k, k], (1.0 / fan_in).sqrt()));
        let b = store.add(format!("{name}.b"), zeros(&[c_out]));
        let affine = Linear::new(store, rng, &format!("{name}.affine"), d_w, c_in);
        // Styles start near 1 so the layer begins as an ordinary convolution.
        store.value_mut(affine.b).fill(E::one());
        StyledConv { w, b, affine, k, c_in, c_out, demodulate }
    }

    pub fn forward<'t, E: Scalar>(
        &self,
        p: &[Tv<'t, E>],
        x: Tv<'t, E>,
        latent: Tv<'t, E>,
    ) -> Tv<'t, E> {
        let shp = x.shape();
        let (h, w) = (shp[1], shp[2]);
        let style = self.affine.forward(p, latent); // [c_in]
        let s4 = style
            .reshape(&[1, self.c_in, 1, 1])
            .broadcast_to(&[self.c_out, self.c_in, self.k, self.k]);
        let mut wmod = p[self.w] * s4;
        if self.demodulate {
            let ssq = wmod.square().sum_to(&[self.c_out, 1, 1, 1]).add_scalar(1e-8);
            let denom = ssq.sqrt().broadcast_to(&[self.c_out, self.c_in, self.k, self.k]);
            wmod = wmod / denom;
        }
        let cols = x.unfold(self.k, self.k / 2);
        let wmat = wmod.reshape(&[self.c_out, self.c_in * self.k * self.k]);
        let y = wmat.matmul(cols).reshape(&[self.c_out, h, w]);
        let bias = p[self.b].reshape(&[self.c_out, 1, 1]).broadcast_to(&[self.c_out, h, w]);
        y + bias
    }
}

/// Residual downsampling group: two 3x3 convolutions then bilinear
/// downsampling, with a bilinear-downsample + 1x1-convolution skip.
pub struct ResDownBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub skip: Conv2d,
}

impl ResDownBlock {
    pub fn new<E: Scalar>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Self {
        ResDownBlock {
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), c_in, c_in, 3),
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), c_in, c_out, 3),
            skip: Conv2d::new(store, rng, &format!("{name}.skip"), c_in, c_out, 1),
        }
    }

    pub fn forward<'t, E: Scalar>(&self, p: &[Tv<'t, E>], x: Tv<'t, E>) -> Tv<'t, E> {
        let main = self.conv1.forward(p, x).leaky_relu(0.2);
        let main = self.conv2.forward(p, main).leaky_relu(0.2);
        let main = main.avg_pool2();
        let skip = self.skip.forward(p, x.avg_pool2());
        (main + skip).mul_scalar(std::f64::consts::FRAC_1_SQRT_2)
    }
}

/// Mean squared error between two same-shape tensors, as a scalar node.
pub fn mse<'t, E: Scalar>(a: Tv<'t, E>, b: Tv<'t, E>) -> Tv<'t, E> {
    (a - b).square().mean()
}

/// Accumulates per-sample gradients in store order; `mean()` yields the
/// batch-averaged gradient. Addition order is the call order, so batch
/// reduction is deterministic.
pub struct GradAccum<E: Scalar> {
    sums: Vec<ArrayD<E>>,
    n: usize,
}

impl<E: Scalar> GradAccum<E> {
    pub fn new(store: &ParamStore<E>) -> Self {
        GradAccum {
            sums: store.values().iter().map(|v| ArrayD::zeros(v.raw_dim())).collect(),
            n: 0,
        }
    }

    pub fn add(&mut self, grads: &[Option<ArrayD<E>>]) {
        assert_eq!(grads.len(), self.sums.len());
        for (s, g) in self.sums.iter_mut().zip(grads) {
            if let Some(g) = g {
                ndarray::Zip::from(s).and(g).for_each(|s, &g| *s = *s + g);
            }
        }
        self.n += 1;
    }

    pub fn mean(mut self) -> Vec<Option<ArrayD<E>>> {
        let inv = E::from_f64(1.0 / self.n.max(1) as f64);
        for s in &mut self.sums {
            s.mapv_inplace(|x| x * inv);
        }
        self.sums.into_iter().map(Some).collect()
    }
}

// ---------------------------------------------------------------------------
// Checkpoint container
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"CLOAKCK1";

#[derive(serde::Serialize, serde::Deserialize)]
struct HeaderArray {
    name: String,
    shape: Vec<usize>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct HeaderSection {
    name: String,
    arrays: Vec<HeaderArray>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Header {
    kind: String,
    config: serde_json::Value,
    sections: Vec<HeaderSection>,
}

/// Self-describing checkpoint: a JSON header (kind + architecture config +
/// array manifest) followed by raw little-endian f64 data. `f32` models widen
/// losslessly on save and narrow back to identical bits on load.
pub struct Container {
    pub kind: String,
    pub config: serde_json::Value,
    pub sections: Vec<(String, Vec<(String, ArrayD<f64>)>)>,
}

impl Container {
    pub fn save(&self, path: &std::path::Path) -> crate::Result<()> {
        use std::io::Write;
        let header = Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            sections: self
                .sections
                .iter()
                .map(|(name, arrays)| HeaderSection {
                    name: name.clone(),
                    arrays: arrays
                        .iter()
                        .map(|(n, a)| HeaderArray { name: n.clone(), shape: a.shape().to_vec() })
                        .collect(),
                })
                .collect(),
        };
        let header_bytes = serde_json::to_vec(&header).map_err(|e| crate::Error::Serde(e.to_string()))?;
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
        }
        let mut buf = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header_bytes);
        for (_, arrays) in &self.sections {
            for (_, a) in arrays {
                for v in a.iter() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| crate::Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| crate::Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> crate::Result<Container> {
        let bytes = std::fs::read(path).map_err(|e| crate::Error::io(path, e))?;
        let fail = |msg: &str| crate::Error::Checkpoint(format!("{}: {msg}", path.display()));
        if bytes.len() < 16 || &bytes[..8] != CKPT_MAGIC {
            return Err(fail("not a checkpoint file (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = 16 + hlen;
        if bytes.len() < body {
            return Err(fail("truncated header"));
        }
        let header: Header = serde_json::from_slice(&bytes[16..body])
            .map_err(|e| fail(&format!("bad header: {e}")))?;
        let mut off = body;
        let mut sections = Vec::new();
        for sec in header.sections {
            let mut arrays = Vec::new();
            for arr in sec.arrays {
                let n: usize = arr.shape.iter().product();
                let end = off + n * 8;
                if bytes.len() < end {
                    return Err(fail("truncated payload"));
                }
                let data: Vec<f64> = bytes[off..end]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                off = end;
                let a = ArrayD::from_shape_vec(IxDyn(&arr.shape), data)
                    .map_err(|e| fail(&format!("bad array shape: {e}")))?;
                arrays.push((arr.name, a));
            }
            sections.push((sec.name, arrays));
        }
        if off != bytes.len() {
            return Err(fail("trailing bytes after payload"));
        }
        Ok(Container { kind: header.kind, config: header.config, sections })
    }

    pub fn section(&self, name: &str) -> crate::Result<&[(String, ArrayD<f64>)]> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a.as_slice())
            .ok_or_else(|| crate::Error::Checkpoint(format!("missing section {name}")))
    }
}

pub fn store_to_arrays<E: Scalar>(store: &ParamStore<E>) -> Vec<(String, ArrayD<f64>)> {
    store
        .names()
        .iter()
        .zip(store.values())
        .map(|(n, v)| (n.clone(), v.mapv(|x| x.as_f64())))
        .collect()
}

/// Fills `store` from checkpoint arrays. Names, order and shapes must match
/// the freshly constructed architecture exactly.
pub fn arrays_into_store<E: Scalar>(
    store: &mut ParamStore<E>,
    arrays: &[(String, ArrayD<f64>)],
) -> crate::Result<()> {
    if arrays.len() != store.len() {
        return Err(crate::Error::Checkpoint(format!(
            "parameter count mismatch: checkpoint has {}, architecture has {}",
            arrays.len(),
            store.len()
        )));
    }
    let mut values = Vec::with_capacity(arrays.len());
    for (i, (name, a)) in arrays.iter().enumerate() {
        if name != &store.names()[i] {
            return Err(crate::Error::Checkpoint(format!(
                "parameter {i} name mismatch: checkpoint {name}, architecture {}",
                store.names()[i]
            )));
        }
        if a.shape() != store.value(i).shape() {
            return Err(crate::Error::Checkpoint(format!(
                "parameter {name} shape mismatch: checkpoint {:?}, architecture {:?}",
                a.shape(),
                store.value(i).shape()
            )));
        }
        values.push(a.mapv(E::from_f64));
    }
    store.set_all(values);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn adam_zero_lr_is_identity() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        store.add("p", randn(&mut rng, &[4, 4], 1.0));
        let before = store.value(0).clone();
        let mut opt = Adam::new(&store, 0.0, 0.9, 0.999);
        let g = Some(randn::<f64>(&mut rng, &[4, 4], 1.0));
        opt.step(&mut store, &[g]);
        assert_eq!(store.value(0), &before);
    }

    #[test]
    fn checkpoint_roundtrips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f32>::new();
        store.add("a.w", randn(&mut rng, &[2, 3], 0.7));
        store.add("a.b", randn(&mut rng, &[3], 0.1));
        let before = store.checksum();
        let c = Container {
            kind: "test".into(),
            config: serde_json::json!({"d": 3}),
            sections: vec![("params".into(), store_to_arrays(&store))],
        };
        c.save(&path).unwrap();
        let loaded = Container::load(&path).unwrap();
        assert_eq!(loaded.kind, "test");
        assert_eq!(loaded.config["d"], 3);
        let mut store2 = ParamStore::<f32>::new();
        store2.add("a.w", zeros(&[2, 3]));
        store2.add("a.b", zeros(&[3]));
        arrays_into_store(&mut store2, loaded.section("params").unwrap()).unwrap();
        assert_eq!(store2.checksum(), before);
    }

    #[test]
    fn checkpoint_rejects_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut store = ParamStore::<f64>::new();
        store.add("w", zeros(&[4]));
        let c = Container {
            kind: "test".into(),
            config: serde_json::Value::Null,
            sections: vec![("params".into(), store_to_arrays(&store))],
        };
        c.save(&path).unwrap();
        let loaded = Container::load(&path).unwrap();
        let mut other = ParamStore::<f64>::new();
        other.add("w", zeros(&[5]));
        assert!(arrays_into_store(&mut other, loaded.section("params").unwrap()).is_err());
    }

    #[test]
    fn checksum_changes_with_params() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        store.add("p", randn(&mut rng, &[3], 1.0));
        let c1 = store.checksum();
        store.value_mut(0)[[0]] += 1.0;
        assert_ne!(c1, store.checksum());
    }
}
