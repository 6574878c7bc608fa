//! Parameter management, layers, optimizer, and gradient verification.
//!
//! Models own [`ParamId`]s into a [`ParamStore`]; each training step opens a
//! [`Session`] that mirrors the store onto a fresh tape, builds the loss, and
//! maps gradients back to parameter ids for the optimizer.

use crate::ad::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

pub type ParamId = usize;

#[derive(Clone)]
pub struct ParamEntry<S: Scalar> {
    pub name: String,
    pub value: ArrayD<S>,
}

/// Named parameter tensors for one trainable component.
#[derive(Clone)]
pub struct ParamStore<S: Scalar> {
    entries: Vec<ParamEntry<S>>,
    by_name: HashMap<String, ParamId>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<S>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter {name}"
        );
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, value });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<S> {
        &self.entries[id].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<S> {
        &mut self.entries[id].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id].name
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<S>)> {
        self.entries.iter().enumerate()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Cast every tensor to another scalar type (used to lift f32 models to
    /// f64 for finite-difference checks).
    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for e in &self.entries {
            out.add(e.name.clone(), e.value.mapv(|x| T::lit(x.to_f64())));
        }
        out
    }
}

/// A tape with every store parameter mirrored as a leaf.
pub struct Session<S: Scalar> {
    pub tape: Tape<S>,
    vars: Vec<Var>,
}

impl<S: Scalar> Session<S> {
    pub fn new(store: &ParamStore<S>, trainable: bool) -> Self {
        let mut tape = Tape::new();
        let vars = store
            .entries
            .iter()
            .map(|e| tape.leaf(e.value.clone(), trainable))
            .collect();
        Session { tape, vars }
    }

    /// Per-parameter trainability, for frozen/fine-tuned splits.
    pub fn with_trainable(store: &ParamStore<S>, trainable: &[bool]) -> Self {
        assert_eq!(trainable.len(), store.len());
        let mut tape = Tape::new();
        let vars = store
            .entries
            .iter()
            .zip(trainable)
            .map(|(e, &t)| tape.leaf(e.value.clone(), t))
            .collect();
        Session { tape, vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id]
    }

    /// Run backward and collect gradients aligned with parameter ids.
    pub fn gradients(&self, loss: Var) -> Vec<Option<ArrayD<S>>> {
        let node_grads = self.tape.backward(loss);
        self.vars
            .iter()
            .map(|v| node_grads[v.index()].clone())
            .collect()
    }
}

pub fn mse<S: Scalar>(t: &mut Tape<S>, a: Var, b: Var) -> Var {
    let d = t.sub(a, b);
    let sq = t.mul(d, d);
    t.mean_all(sq)
}

// ---------------------------------------------------------------------------
// Initializers
// ---------------------------------------------------------------------------

pub fn kaiming_uniform<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<S> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        S::lit(rng.gen_range(-bound..bound))
    })
}

pub fn normal_init<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<S> {
    use rand_distr::{Distribution, Normal};
    let dist = Normal::new(0.0, std).unwrap();
    ArrayD::from_shape_fn(IxDyn(shape), |_| S::lit(dist.sample(rng)))
}

pub fn zeros<S: Scalar>(shape: &[usize]) -> ArrayD<S> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones<S: Scalar>(shape: &[usize]) -> ArrayD<S> {
    ArrayD::from_elem(IxDyn(shape), S::one())
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = store.add(
            format!("{prefix}.w"),
            kaiming_uniform(rng, &[in_dim, out_dim], in_dim),
        );
        let b = store.add(
            format!("{prefix}.b"),
            kaiming_uniform(rng, &[out_dim], in_dim),
        );
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<S: Scalar>(&self, s: &mut Session<S>, x: Var) -> Var {
        let w = s.var(self.w);
        let b = s.var(self.b);
        let y = s.tape.matmul(x, w);
        s.tape.add(y, b)
    }
}

#[derive(Clone, Copy)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_ch * k * k;
        let w = store.add(
            format!("{prefix}.w"),
            kaiming_uniform(rng, &[out_ch, in_ch, k, k], fan_in),
        );
        let b = store.add(
            format!("{prefix}.b"),
            kaiming_uniform(rng, &[out_ch], fan_in),
        );
        Conv2d { w, b, stride, pad }
    }

    pub fn forward<S: Scalar>(&self, s: &mut Session<S>, x: Var) -> Var {
        let w = s.var(self.w);
        let b = s.var(self.b);
        s.tape.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Copy)]
pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Self {
        let fan_in = in_ch * k * k;
        let w = store.add(
            format!("{prefix}.w"),
            kaiming_uniform(rng, &[in_ch, out_ch, k, k], fan_in),
        );
        let b = store.add(
            format!("{prefix}.b"),
            kaiming_uniform(rng, &[out_ch], fan_in),
        );
        ConvTranspose2d {
            w,
            b,
            stride,
            pad,
            out_pad,
        }
    }

    pub fn forward<S: Scalar>(&self, s: &mut Session<S>, x: Var) -> Var {
        let w = s.var(self.w);
        let b = s.var(self.b);
        s.tape
            .conv_transpose2d(x, w, Some(b), self.stride, self.pad, self.out_pad)
    }
}

/// Normalization over the last axis with learned affine, BERT style.
#[derive(Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{prefix}.g"), ones(&[dim]));
        let beta = store.add(format!("{prefix}.b"), zeros(&[dim]));
        LayerNorm { gamma, beta }
    }

    pub fn forward<S: Scalar>(&self, s: &mut Session<S>, x: Var) -> Var {
        let last = s.tape.value(x).ndim() - 1;
        let mu = s.tape.mean_axes(x, &[last]);
        let xc = s.tape.sub(x, mu);
        let sq = s.tape.mul(xc, xc);
        let var = s.tape.mean_axes(sq, &[last]);
        let eps = s.tape.scalar(S::lit(1e-5));
        let ve = s.tape.add(var, eps);
        let sd = s.tape.sqrt(ve);
        let xn = s.tape.div(xc, sd);
        let gamma = s.var(self.gamma);
        let beta = s.var(self.beta);
        let y = s.tape.mul(xn, gamma);
        s.tape.add(y, beta)
    }
}

/// Group normalization for convolutional features; statistics are per sample,
/// so single-item inference matches batched inference.
#[derive(Clone, Copy)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        channels: usize,
        groups: usize,
    ) -> Self {
        assert_eq!(channels % groups, 0);
        let gamma = store.add(format!("{prefix}.g"), ones(&[channels, 1, 1]));
        let beta = store.add(format!("{prefix}.b"), zeros(&[channels, 1, 1]));
        GroupNorm {
            gamma,
            beta,
            groups,
        }
    }

    pub fn forward<S: Scalar>(&self, s: &mut Session<S>, x: Var) -> Var {
        let shape = s.tape.value(x).shape().to_vec();
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let g = self.groups;
        let xg = s.tape.reshape(x, &[b, g, c / g * h * w]);
        let mu = s.tape.mean_axes(xg, &[2]);
        let xc = s.tape.sub(xg, mu);
        let sq = s.tape.mul(xc, xc);
        let var = s.tape.mean_axes(sq, &[2]);
        let eps = s.tape.scalar(S::lit(1e-5));
        let ve = s.tape.add(var, eps);
        let sd = s.tape.sqrt(ve);
        let xn = s.tape.div(xc, sd);
        let back = s.tape.reshape(xn, &[b, c, h, w]);
        let gamma = s.var(self.gamma);
        let beta = s.var(self.beta);
        let y = s.tape.mul(back, gamma);
        s.tape.add(y, beta)
    }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with decoupled weight decay.
pub struct AdamW<S: Scalar> {
    pub cfg: AdamWConfig,
    step: usize,
    m: Vec<ArrayD<S>>,
    v: Vec<ArrayD<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(store: &ParamStore<S>, cfg: AdamWConfig) -> Self {
        let m = store
            .entries
            .iter()
            .map(|e| ArrayD::zeros(e.value.raw_dim()))
            .collect();
        let v = store
            .entries
            .iter()
            .map(|e| ArrayD::zeros(e.value.raw_dim()))
            .collect();
        AdamW {
            cfg,
            step: 0,
            m,
            v,
        }
    }

    /// Apply one update; parameters without a gradient are left untouched
    /// (frozen parts never see decay either).
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &[Option<ArrayD<S>>]) {
        assert_eq!(grads.len(), store.len());
        self.step += 1;
        let t = self.step as f64;
        let b1 = S::lit(self.cfg.beta1);
        let b2 = S::lit(self.cfg.beta2);
        let one_m_b1 = S::lit(1.0 - self.cfg.beta1);
        let one_m_b2 = S::lit(1.0 - self.cfg.beta2);
        let bc1 = S::lit(1.0 / (1.0 - self.cfg.beta1.powi(t as i32)));
        let bc2 = S::lit(1.0 / (1.0 - self.cfg.beta2.powi(t as i32)));
        let lr = S::lit(self.cfg.lr);
        let eps = S::lit(self.cfg.eps);
        let wd = S::lit(self.cfg.weight_decay);
        for (id, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            let m = &mut self.m[id];
            let v = &mut self.v[id];
            ndarray::Zip::from(m.view_mut())
                .and(g)
                .for_each(|mi, &gi| *mi = b1 * *mi + one_m_b1 * gi);
            ndarray::Zip::from(v.view_mut())
                .and(g)
                .for_each(|vi, &gi| *vi = b2 * *vi + one_m_b2 * gi * gi);
            let theta = store.get_mut(id);
            ndarray::Zip::from(theta.view_mut())
                .and(m.view())
                .and(v.view())
                .for_each(|p, &mi, &vi| {
                    let mhat = mi * bc1;
                    let vhat = vi * bc2;
                    *p = *p - lr * (mhat / (vhat.sqrt() + eps) + wd * *p);
                });
        }
    }
}

// ---------------------------------------------------------------------------
// Gradient verification
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct GradCheckEntry {
    pub param: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Compare analytic gradients against central finite differences at `n`
/// randomly chosen parameter coordinates. `build` must construct the loss
/// from the session deterministically.
pub fn gradient_check<F>(
    store: &ParamStore<f64>,
    build: F,
    n: usize,
    seed: u64,
) -> Vec<GradCheckEntry>
where
    F: Fn(&mut Session<f64>) -> Var,
{
    let mut session = Session::new(store, true);
    let loss = build(&mut session);
    let grads = session.gradients(loss);

    let mut rng = crate::rng::substream(seed, "gradcheck");
    let mut out = Vec::with_capacity(n);
    let h = 1e-5;
    for _ in 0..n {
        let id = rng.gen_range(0..store.len());
        let flat = rng.gen_range(0..store.get(id).len());
        let analytic = grads[id]
            .as_ref()
            .map_or(0.0, |g| g.as_slice().unwrap()[flat]);

        let eval = |delta: f64, store: &ParamStore<f64>| -> f64 {
            let mut perturbed = store.clone();
            perturbed.get_mut(id).as_slice_mut().unwrap()[flat] += delta;
            let mut s = Session::new(&perturbed, false);
            let l = build(&mut s);
            s.tape.scalar_value(l)
        };
        let fp = eval(h, store);
        let fm = eval(-h, store);
        let numeric = (fp - fm) / (2.0 * h);
        // Floor keeps central-difference roundoff on near-zero gradients from
        // registering as relative error (same role as atol in torch's
        // gradcheck: differences under 1e-8 absolute always pass).
        let denom = analytic.abs().max(numeric.abs()).max(1e-4);
        out.push(GradCheckEntry {
            param: store.name(id).to_string(),
            analytic,
            numeric,
            rel_err: (analytic - numeric).abs() / denom,
        });
    }
    out
}

pub fn max_rel_err(entries: &[GradCheckEntry]) -> f64 {
    entries.iter().map(|e| e.rel_err).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn adamw_reduces_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", ndarray::arr1(&[5.0, -3.0]).into_dyn());
        let mut opt = AdamW::new(&store, AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        });
        for _ in 0..200 {
            let mut s = Session::new(&store, true);
            let xv = s.var(x);
            let sq = s.tape.mul(xv, xv);
            let loss = s.tape.sum_all(sq);
            let grads = s.gradients(loss);
            opt.step(&mut store, &grads);
        }
        assert!(store.get(x).iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn layernorm_normalizes() {
        let mut store = ParamStore::<f64>::new();
        let ln = LayerNorm::new(&mut store, "ln", 4);
        let mut s = Session::new(&store, false);
        let x = s
            .tape
            .constant(ndarray::arr2(&[[1.0, 2.0, 3.0, 4.0]]).into_dyn());
        let y = ln.forward(&mut s, x);
        let row: Vec<f64> = s.tape.value(y).iter().cloned().collect();
        let mean: f64 = row.iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-9);
    }

    #[test]
    fn linear_shapes_and_gradcheck() {
        let mut rng = substream(3, "t");
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, &mut rng, "fc", 4, 3);
        let x0 = ndarray::Array2::from_shape_fn((5, 4), |(i, j)| (i + j) as f64 * 0.1 - 0.5);
        let entries = gradient_check(
            &store,
            move |s| {
                let x = s.tape.constant(x0.clone().into_dyn());
                let y = lin.forward(s, x);
                let t = s.tape.tanh_act(y);
                s.tape.mean_all(t)
            },
            10,
            99,
        );
        assert!(max_rel_err(&entries) < 1e-4, "{entries:?}");
    }

    #[test]
    fn groupnorm_gradcheck() {
        let mut rng = substream(4, "t");
        let mut store = ParamStore::<f64>::new();
        let gn = GroupNorm::new(&mut store, "gn", 4, 2);
        let conv = Conv2d::new(&mut store, &mut rng, "c", 2, 4, 3, 1, 1);
        let mut r2 = substream(5, "x");
        let x0 = ArrayD::<f64>::from_shape_fn(IxDyn(&[2, 2, 4, 4]), |_| {
            r2.gen::<f64>() - 0.5
        });
        let entries = gradient_check(
            &store,
            move |s| {
                let x = s.tape.constant(x0.clone());
                let y = conv.forward(s, x);
                let y = gn.forward(s, y);
                let y = s.tape.relu(y);
                let sq = s.tape.mul(y, y);
                s.tape.mean_all(sq)
            },
            10,
            123,
        );
        assert!(max_rel_err(&entries) < 1e-4, "{entries:?}");
    }
}
