//! Named parameter storage, gradient buffers, initialization and the AdamW optimizer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autograd::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of parameter matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Mat)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// SHA-256 over names, shapes and raw values of every parameter whose name
    /// starts with `prefix`.
    pub fn fingerprint(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (_, name, v) in self.iter().filter(|(_, n, _)| n.starts_with(prefix)) {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((v.nrows() as u64).to_le_bytes());
            h.update((v.ncols() as u64).to_le_bytes());
            for x in v.iter() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// One gradient matrix per parameter, aligned with a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    values: Vec<Mat>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self {
            values: params.values.iter().map(|v| Mat::zeros(v.dim())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Mat) {
        self.values[id.0] += g;
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.values {
            v.mapv_inplace(|x| x * s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.values.iter().map(|v| v.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.global_norm();
        if n > max_norm && n > 0.0 {
            self.scale(max_norm / n);
        }
        n
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Deterministic parameter initializer.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Glorot-uniform `fan_in × fan_out` weight.
    pub fn glorot(&mut self, fan_in: usize, fan_out: usize) -> Mat {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(fan_in, fan_out, a)
    }

    /// He-uniform weight for ReLU layers.
    pub fn he(&mut self, fan_in: usize, fan_out: usize) -> Mat {
        let a = (6.0 / fan_in as f64).sqrt();
        self.uniform(fan_in, fan_out, a)
    }

    pub fn uniform(&mut self, rows: usize, cols: usize, bound: f64) -> Mat {
        let rng = &mut self.rng;
        Mat::from_shape_simple_fn((rows, cols), || rng.gen_range(-bound..=bound))
    }
}

/// Adam with decoupled weight decay. Decay applies to matrices only (not to
/// bias rows, gains or scalars).
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl AdamW {
    pub fn new(params: &ParamSet, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: params.values.iter().map(|v| Mat::zeros(v.dim())).collect(),
            v: params.values.iter().map(|v| Mat::zeros(v.dim())).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .values
            .iter_mut()
            .zip(&grads.values)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let decay = if p.nrows() > 1 && p.ncols() > 1 { self.weight_decay } else { 0.0 };
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= self.lr * (mhat / (vhat.sqrt() + self.eps) + decay * *p);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprint_tracks_values_and_prefix() {
        let mut p = ParamSet::new();
        let a = p.add("enc.w", Mat::from_elem((2, 2), 1.0));
        p.add("dec.w", Mat::from_elem((2, 2), 1.0));
        let f0 = p.fingerprint("enc.");
        p.get_mut(p.id_of("dec.w").unwrap())[[0, 0]] = 5.0;
        assert_eq!(f0, p.fingerprint("enc."));
        p.get_mut(a)[[0, 0]] = 2.0;
        assert_ne!(f0, p.fingerprint("enc."));
    }

    #[test]
    fn adamw_minimizes_quadratic() {
        let mut p = ParamSet::new();
        let id = p.add("x", Mat::from_elem((2, 2), 3.0));
        let mut opt = AdamW::new(&p, 0.05, 0.0);
        for _ in 0..2000 {
            let mut g = Gradients::zeros_like(&p);
            let grad = p.get(id) * 2.0;
            g.accumulate(id, &grad);
            opt.step(&mut p, &g);
        }
        assert!(p.get(id).iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut p = ParamSet::new();
        let id = p.add("x", Mat::zeros((1, 2)));
        let mut g = Gradients::zeros_like(&p);
        g.accumulate(id, &Mat::from_shape_vec((1, 2), vec![3.0, 4.0]).unwrap());
        assert_eq!(g.clip_global_norm(1.0), 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
    }
}
