//! Patch autoencoder with a sliced-Wasserstein latent prior.
//!
//! A four-block strided convolutional encoder maps a 40x40 patch to a
//! 128-dim latent (the transformer's token width); the mirrored transposed
//! convolutional decoder maps it back through a final tanh. Training matches
//! the latent batch distribution to a standard normal by averaging squared
//! 1-D Wasserstein distances over random projections.

use crate::ad::{Tape, Var};
use crate::checkpoint::{
    assign_params, load_checkpoint, save_checkpoint, CheckpointMeta,
};
use crate::error::{Error, Result};
use crate::nn::{
    mse, normal_init, AdamW, AdamWConfig, Conv2d, ConvTranspose2d, Linear, ParamStore, Session,
};
use crate::rng::substream;
use crate::scalar::Scalar;
use crate::sim::patch::PATCH_SIZE;
use crate::Real;
use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Latent width; equals the transformer model width so patch tokens need no
/// extra projection.
pub const LATENT_DIM: usize = 128;

const ENC_CHANNELS: [usize; 4] = [64, 128, 256, 448];
const BOTTLENECK: usize = 448 * 3 * 3;

pub struct CodecArch {
    enc_convs: [Conv2d; 4],
    enc_fc: Linear,
    dec_fc: Linear,
    dec_convs: [ConvTranspose2d; 4],
}

impl CodecArch {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, seed: u64) -> Self {
        let mut rng = substream(seed, "codec-init");
        let c = ENC_CHANNELS;
        let enc_convs = [
            Conv2d::new(store, &mut rng, "enc.conv1", 1, c[0], 3, 2, 1),
            Conv2d::new(store, &mut rng, "enc.conv2", c[0], c[1], 3, 2, 1),
            Conv2d::new(store, &mut rng, "enc.conv3", c[1], c[2], 3, 2, 1),
            Conv2d::new(store, &mut rng, "enc.conv4", c[2], c[3], 3, 2, 1),
        ];
        let enc_fc = Linear::new(store, &mut rng, "enc.fc", BOTTLENECK, LATENT_DIM);
        let dec_fc = Linear::new(store, &mut rng, "dec.fc", LATENT_DIM, BOTTLENECK);
        let dec_convs = [
            ConvTranspose2d::new(store, &mut rng, "dec.deconv1", c[3], c[2], 3, 2, 1, 0),
            ConvTranspose2d::new(store, &mut rng, "dec.deconv2", c[2], c[1], 3, 2, 1, 1),
            ConvTranspose2d::new(store, &mut rng, "dec.deconv3", c[1], c[0], 3, 2, 1, 1),
            ConvTranspose2d::new(store, &mut rng, "dec.deconv4", c[0], 1, 3, 2, 1, 1),
        ];
        CodecArch {
            enc_convs,
            enc_fc,
            dec_fc,
            dec_convs,
        }
    }

    /// `[B, 1, 40, 40] -> [B, 128]`
    pub fn encode_graph<S: Scalar>(&self, s: &mut Session<S>, x: Var) -> Var {
        let mut h = x;
        for conv in &self.enc_convs {
            h = conv.forward(s, h);
            h = s.tape.gelu(h);
        }
        let b = s.tape.value(h).shape()[0];
        let flat = s.tape.reshape(h, &[b, BOTTLENECK]);
        self.enc_fc.forward(s, flat)
    }

    /// `[B, 128] -> [B, 1, 40, 40]`, squashed into [-1, 1].
    pub fn decode_graph<S: Scalar>(&self, s: &mut Session<S>, z: Var) -> Var {
        let b = s.tape.value(z).shape()[0];
        let h = self.dec_fc.forward(s, z);
        let h = s.tape.gelu(h);
        let mut h = s.tape.reshape(h, &[b, ENC_CHANNELS[3], 3, 3]);
        for (i, deconv) in self.dec_convs.iter().enumerate() {
            h = deconv.forward(s, h);
            if i + 1 < self.dec_convs.len() {
                h = s.tape.gelu(h);
            }
        }
        s.tape.tanh_act(h)
    }

    /// Parameter count of the encoder half (frozen during every later stage).
    pub fn encoder_param_count<S: Scalar>(&self, store: &ParamStore<S>) -> usize {
        store
            .iter()
            .filter(|(_, e)| e.name.starts_with("enc."))
            .map(|(_, e)| e.value.len())
            .sum()
    }
}

/// A codec with its parameters: the loadable, runnable unit.
pub struct Codec<S: Scalar> {
    pub store: ParamStore<S>,
    pub arch: CodecArch,
}

impl<S: Scalar> Codec<S> {
    pub fn init(seed: u64) -> Self {
        let mut store = ParamStore::new();
        let arch = CodecArch::new(&mut store, seed);
        Codec { store, arch }
    }

    pub fn cast<T: Scalar>(&self) -> Codec<T> {
        let mut store = ParamStore::new();
        let arch = CodecArch::new(&mut store, 0);
        let mut out = Codec { store, arch };
        for (_, e) in self.store.iter() {
            let id = out.store.id(&e.name).unwrap();
            *out.store.get_mut(id) = e.value.mapv(|v| T::lit(v.to_f64()));
        }
        out
    }

    /// Deterministic embedding of one patch.
    pub fn encode(&self, patch: &Array2<S>) -> Result<Array1<S>> {
        if patch.dim() != (PATCH_SIZE, PATCH_SIZE) {
            return Err(Error::Shape(format!(
                "encode expects {PATCH_SIZE}x{PATCH_SIZE}, got {:?}",
                patch.dim()
            )));
        }
        let batch = patch
            .clone()
            .into_shape_with_order((1, 1, PATCH_SIZE, PATCH_SIZE))
            .unwrap()
            .into_dyn();
        let out = self.encode_batch_dyn(batch);
        Ok(out.index_axis(Axis(0), 0).to_owned())
    }

    /// Embed a stack of patches `[B, 40, 40] -> [B, 128]`.
    pub fn encode_batch(&self, patches: &[Array2<S>]) -> Array2<S> {
        let b = patches.len();
        let mut x = ArrayD::zeros(IxDyn(&[b, 1, PATCH_SIZE, PATCH_SIZE]));
        for (i, p) in patches.iter().enumerate() {
            for r in 0..PATCH_SIZE {
                for c in 0..PATCH_SIZE {
                    x[[i, 0, r, c]] = p[[r, c]];
                }
            }
        }
        self.encode_batch_dyn(x)
    }

    fn encode_batch_dyn(&self, x: ArrayD<S>) -> Array2<S> {
        let mut s = Session::new(&self.store, false);
        let xv = s.tape.constant(x);
        let z = self.arch.encode_graph(&mut s, xv);
        let v = s.tape.value(z);
        v.to_shape((v.shape()[0], LATENT_DIM))
            .unwrap()
            .to_owned()
    }

    /// Decode a 128-dim embedding to a patch in [-1, 1].
    pub fn decode(&self, embedding: &Array1<S>) -> Result<Array2<S>> {
        if embedding.len() != LATENT_DIM {
            return Err(Error::Shape(format!(
                "decode expects a {LATENT_DIM}-dim embedding, got {}",
                embedding.len()
            )));
        }
        if !embedding.iter().all(|v| v.is_finite()) {
            return Err(Error::Data("non-finite embedding".into()));
        }
        let z = embedding
            .clone()
            .into_shape_with_order((1, LATENT_DIM))
            .unwrap()
            .into_dyn();
        let mut s = Session::new(&self.store, false);
        let zv = s.tape.constant(z);
        let x = self.arch.decode_graph(&mut s, zv);
        let v = s.tape.value(x);
        Ok(v
            .to_shape((PATCH_SIZE, PATCH_SIZE))
            .unwrap()
            .to_owned())
    }

    pub fn save(&self, meta: CheckpointMeta, path: &Path) -> Result<CheckpointMeta>
    where
        S: Scalar,
    {
        // checkpoints are float32 on disk
        let store32: ParamStore<Real> = self.store.cast();
        save_checkpoint(&store32, meta, path)
    }
}

impl Codec<Real> {
    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let (loaded, meta) = load_checkpoint(path)?;
        if meta.kind != "codec" {
            return Err(Error::Checkpoint(format!(
                "expected codec checkpoint, found kind {}",
                meta.kind
            )));
        }
        let mut codec = Codec::init(0);
        assign_params(&mut codec.store, &loaded)?;
        Ok((codec, meta))
    }
}

// ---------------------------------------------------------------------------
// Sliced Wasserstein distance
// ---------------------------------------------------------------------------

/// Unit projection directions `[dim, num_projections]`, seeded.
pub fn projection_matrix<S: Scalar>(dim: usize, num: usize, seed: u64) -> Array2<S> {
    let mut rng = substream(seed, "swd-projections");
    let mut dirs = normal_init::<f64>(&mut rng, &[dim, num], 1.0);
    for j in 0..num {
        let norm: f64 = (0..dim).map(|i| dirs[[i, j]] * dirs[[i, j]]).sum::<f64>().sqrt();
        for i in 0..dim {
            dirs[[i, j]] /= norm.max(1e-12);
        }
    }
    let d2 = dirs.into_dimensionality::<ndarray::Ix2>().unwrap();
    d2.mapv(S::lit)
}

/// Differentiable sliced distance between two same-size batches on the tape:
/// mean over projections of the mean squared difference of matched order
/// statistics.
pub fn sliced_wasserstein_graph<S: Scalar>(
    t: &mut Tape<S>,
    latents: Var,
    prior: Var,
    num_projections: usize,
    seed: u64,
) -> Var {
    let dim = t.value(latents).shape()[1];
    let dirs = t.constant(projection_matrix::<S>(dim, num_projections, seed).into_dyn());
    let px = t.matmul(latents, dirs);
    let py = t.matmul(prior, dirs);
    let sx = t.sort_cols(px);
    let sy = t.sort_cols(py);
    let d = t.sub(sx, sy);
    let sq = t.mul(d, d);
    t.mean_all(sq)
}

/// Value-level sliced distance with the spec's checks.
pub fn sliced_wasserstein_distance<S: Scalar>(
    latents: &Array2<S>,
    prior: &Array2<S>,
    num_projections: usize,
    seed: u64,
) -> Result<S> {
    if latents.nrows() != prior.nrows() {
        return Err(Error::Size(format!(
            "batch sizes differ: {} vs {}",
            latents.nrows(),
            prior.nrows()
        )));
    }
    if latents.ncols() != prior.ncols() {
        return Err(Error::Size("batch dims differ".into()));
    }
    if latents.nrows() == 0 || num_projections == 0 {
        return Err(Error::Config(
            "need at least one sample and one projection".into(),
        ));
    }
    let mut t = Tape::new();
    let a = t.constant(latents.clone().into_dyn());
    let b = t.constant(prior.clone().into_dyn());
    let d = sliced_wasserstein_graph(&mut t, a, b, num_projections, seed);
    Ok(t.scalar_value(d))
}

// ---------------------------------------------------------------------------
// PSNR
// ---------------------------------------------------------------------------

/// Peak value span of normalized patches.
pub const PSNR_RANGE: f64 = 2.0;
pub const PSNR_CAP_DB: f64 = 100.0;

/// `10 log10(range^2 / mse)`, capped at 100 dB for near-zero error.
pub fn psnr<S: Scalar>(a: &Array2<S>, b: &Array2<S>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "psnr shapes differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let n = a.len() as f64;
    let mse: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = x.to_f64() - y.to_f64();
            d * d
        })
        .sum::<f64>()
        / n;
    let range_sq = PSNR_RANGE * PSNR_RANGE;
    if mse < range_sq * 1e-10 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (range_sq / mse).log10())
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodecTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub sw_weight: f64,
    pub num_projections: usize,
    /// Use every k-th frame when harvesting patches from episodes.
    pub frame_stride: usize,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        CodecTrainConfig {
            epochs: 20,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 1e-4,
            sw_weight: 1.0,
            num_projections: 50,
            frame_stride: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct CodecTrainLog {
    /// (epoch, reconstruction term, sliced distance term)
    pub epochs: Vec<(usize, f64, f64)>,
    pub final_recon: f64,
    pub final_swd: f64,
}

/// One optimization step on a patch batch; returns (recon, swd) losses.
pub fn codec_train_step<S: Scalar>(
    codec: &mut Codec<S>,
    opt: &mut AdamW<S>,
    batch: &ArrayD<S>,
    prior: &Array2<S>,
    sw_weight: f64,
    num_projections: usize,
    proj_seed: u64,
) -> (f64, f64) {
    let mut s = Session::new(&codec.store, true);
    let x = s.tape.constant(batch.clone());
    let z = codec.arch.encode_graph(&mut s, x);
    let recon = codec.arch.decode_graph(&mut s, z);
    let rec_loss = mse(&mut s.tape, recon, x);
    let prior_var = s.tape.constant(prior.clone().into_dyn());
    let swd = sliced_wasserstein_graph(&mut s.tape, z, prior_var, num_projections, proj_seed);
    let weighted = s.tape.scale(swd, S::lit(sw_weight));
    let total = s.tape.add(rec_loss, weighted);
    let grads = s.gradients(total);
    opt.step(&mut codec.store, &grads);
    (
        s.tape.scalar_value(rec_loss).to_f64(),
        s.tape.scalar_value(swd).to_f64(),
    )
}

/// Pre-train the codec on a patch set. Deterministic for a fixed config.
pub fn train_codec(
    patches: &[Array2<Real>],
    cfg: &CodecTrainConfig,
) -> Result<(Codec<Real>, CodecTrainLog)> {
    if patches.is_empty() {
        return Err(Error::Data("no patches to train on".into()));
    }
    let mut codec = Codec::<Real>::init(cfg.seed);
    let mut opt = AdamW::new(
        &codec.store,
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    );
    let mut shuffle_rng = substream(cfg.seed, "codec-shuffle");
    let mut prior_rng = substream(cfg.seed, "codec-prior");
    let mut log = CodecTrainLog::default();
    let mut indices: Vec<usize> = (0..patches.len()).collect();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        indices.shuffle(&mut shuffle_rng);
        let mut epoch_rec = 0.0;
        let mut epoch_swd = 0.0;
        let mut batches = 0usize;
        for chunk in indices.chunks(cfg.batch_size) {
            let b = chunk.len();
            let mut x = ArrayD::<Real>::zeros(IxDyn(&[b, 1, PATCH_SIZE, PATCH_SIZE]));
            for (i, &pi) in chunk.iter().enumerate() {
                for r in 0..PATCH_SIZE {
                    for c in 0..PATCH_SIZE {
                        x[[i, 0, r, c]] = patches[pi][[r, c]];
                    }
                }
            }
            let prior = normal_init::<Real>(&mut prior_rng, &[b, LATENT_DIM], 1.0)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            let (rec, swd) = codec_train_step(
                &mut codec,
                &mut opt,
                &x,
                &prior,
                cfg.sw_weight,
                cfg.num_projections,
                crate::rng::child_seed(cfg.seed, "codec-proj", step as u64),
            );
            if !rec.is_finite() || !swd.is_finite() {
                return Err(Error::Training(format!(
                    "codec loss diverged at step {step} (recon {rec}, swd {swd})"
                )));
            }
            epoch_rec += rec;
            epoch_swd += swd;
            batches += 1;
            step += 1;
        }
        log.epochs.push((
            epoch,
            epoch_rec / batches as f64,
            epoch_swd / batches as f64,
        ));
    }
    if let Some(&(_, rec, swd)) = log.epochs.last() {
        log.final_recon = rec;
        log.final_swd = swd;
    }
    Ok((codec, log))
}

pub fn codec_meta(cfg: &CodecTrainConfig, log: &CodecTrainLog, fingerprint: &str) -> CheckpointMeta {
    let mut meta = CheckpointMeta::new("codec");
    meta.config_echo = serde_json::to_string(cfg).unwrap_or_default();
    meta.data_fingerprint = fingerprint.to_string();
    let mut losses = BTreeMap::new();
    losses.insert("final_recon_mse".to_string(), log.final_recon);
    losses.insert("final_swd".to_string(), log.final_swd);
    meta.losses = losses;
    meta
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::max_rel_err;

    #[test]
    fn parameter_budget_matches_reported_sizes() {
        let codec = Codec::<Real>::init(0);
        let total = codec.store.scalar_count();
        let enc = codec.arch.encoder_param_count(&codec.store);
        // within 15% of 3.67M total and 1.83M encoder
        assert!((total as f64 - 3.67e6).abs() / 3.67e6 < 0.15, "total {total}");
        assert!((enc as f64 - 1.83e6).abs() / 1.83e6 < 0.15, "encoder {enc}");
    }

    #[test]
    fn encode_decode_shapes_and_determinism() {
        let codec = Codec::<Real>::init(1);
        let patch = Array2::from_shape_fn((PATCH_SIZE, PATCH_SIZE), |(r, c)| {
            ((r * 7 + c) % 13) as Real * 0.1 - 0.6
        });
        let z1 = codec.encode(&patch).unwrap();
        let z2 = codec.encode(&patch).unwrap();
        assert_eq!(z1.len(), LATENT_DIM);
        assert!(z1.iter().all(|v| v.is_finite()));
        assert_eq!(z1, z2);
        let back = codec.decode(&z1).unwrap();
        assert_eq!(back.dim(), (PATCH_SIZE, PATCH_SIZE));
        assert!(back.iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn decode_zero_vector_is_valid_patch() {
        let codec = Codec::<Real>::init(2);
        let z = Array1::zeros(LATENT_DIM);
        let p = codec.decode(&z).unwrap();
        assert!(p.iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn wrong_shapes_error() {
        let codec = Codec::<Real>::init(3);
        assert!(codec.encode(&Array2::zeros((39, 40))).is_err());
        assert!(codec.decode(&Array1::zeros(127)).is_err());
    }

    #[test]
    fn swd_identical_batches_zero() {
        let a = Array2::from_shape_fn((8, 16), |(i, j)| (i * j) as f64 * 0.01);
        let d = sliced_wasserstein_distance(&a, &a.clone(), 10, 3).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn swd_hand_case_axis_projection() {
        // 1-D effective case under a single projection: matched pairs (0,1)
        // and (2,3) give squared distances 1 and 1, mean 1.0. Use dim 1 so
        // the normalized direction is exactly the axis (up to sign, which
        // sorting absorbs).
        let x = Array2::<f64>::from_shape_vec((2, 1), vec![0.0, 2.0]).unwrap();
        let y = Array2::<f64>::from_shape_vec((2, 1), vec![1.0, 3.0]).unwrap();
        let d = sliced_wasserstein_distance(&x, &y, 1, 5).unwrap();
        assert!((d - 1.0).abs() < 1e-12, "{d}");
    }

    #[test]
    fn swd_mismatched_sizes_error() {
        let x = Array2::<f64>::zeros((3, 4));
        let y = Array2::<f64>::zeros((2, 4));
        assert!(sliced_wasserstein_distance(&x, &y, 4, 0).is_err());
    }

    /// Brute-force oracle: explicit projection loop, sort, average.
    fn swd_oracle(x: &Array2<f64>, y: &Array2<f64>, num: usize, seed: u64) -> f64 {
        let dirs = projection_matrix::<f64>(x.ncols(), num, seed);
        let mut total = 0.0;
        for p in 0..num {
            let mut px: Vec<f64> = (0..x.nrows())
                .map(|i| (0..x.ncols()).map(|j| x[[i, j]] * dirs[[j, p]]).sum())
                .collect();
            let mut py: Vec<f64> = (0..y.nrows())
                .map(|i| (0..y.ncols()).map(|j| y[[i, j]] * dirs[[j, p]]).sum())
                .collect();
            px.sort_by(|a, b| a.partial_cmp(b).unwrap());
            py.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let m: f64 = px
                .iter()
                .zip(py.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / px.len() as f64;
            total += m;
        }
        total / num as f64
    }

    #[test]
    fn swd_matches_bruteforce_oracle() {
        let mut rng = substream(17, "swd-test");
        use rand::Rng;
        for trial in 0..5u64 {
            let x = Array2::from_shape_fn((8, LATENT_DIM), |_| rng.gen::<f64>() - 0.5);
            let y = Array2::from_shape_fn((8, LATENT_DIM), |_| rng.gen::<f64>() - 0.5);
            let d = sliced_wasserstein_distance(&x, &y, 4, trial).unwrap();
            let o = swd_oracle(&x, &y, 4, trial);
            assert!((d - o).abs() < 1e-6, "{d} vs {o}");
        }
    }

    #[test]
    fn psnr_analytic_and_cap() {
        let a = Array2::<f64>::zeros((PATCH_SIZE, PATCH_SIZE));
        let mut b = a.clone();
        assert_eq!(psnr(&a, &b).unwrap(), 100.0);
        b.fill(0.2); // mse = 0.04
        let v = psnr(&a, &b).unwrap();
        assert!((v - 20.0).abs() < 1e-12, "{v}");
        assert!(psnr(&a, &Array2::<f64>::zeros((2, 2))).is_err());
    }

    #[test]
    fn codec_loss_gradcheck() {
        // tiny f64 codec graph on a 2-sample batch
        let codec = Codec::<Real>::init(7).cast::<f64>();
        let mut rng = substream(8, "gc-batch");
        use rand::Rng;
        let batch = ArrayD::<f64>::from_shape_fn(
            IxDyn(&[2, 1, PATCH_SIZE, PATCH_SIZE]),
            |_| rng.gen::<f64>() * 2.0 - 1.0,
        );
        let prior = Array2::<f64>::from_shape_fn((2, LATENT_DIM), |_| rng.gen::<f64>() - 0.5);
        let arch = codec.arch;
        let entries = crate::nn::gradient_check(
            &codec.store,
            move |s| {
                let x = s.tape.constant(batch.clone());
                let z = arch.encode_graph(s, x);
                let recon = arch.decode_graph(s, z);
                let rec = mse(&mut s.tape, recon, x);
                let pv = s.tape.constant(prior.clone().into_dyn());
                let swd = sliced_wasserstein_graph(&mut s.tape, z, pv, 4, 9);
                s.tape.add(rec, swd)
            },
            10,
            42,
        );
        assert!(max_rel_err(&entries) < 1e-4, "{entries:?}");
    }

    #[test]
    fn plain_autoencoder_overfits_single_batch() {
        // sw_weight = 0 reduces to a plain autoencoder; a repeated batch must
        // be memorized quickly.
        let mut rng = substream(9, "overfit");
        use rand::Rng;
        let patches: Vec<Array2<Real>> = (0..8)
            .map(|_| {
                Array2::from_shape_fn((PATCH_SIZE, PATCH_SIZE), |_| {
                    (rng.gen::<Real>() * 2.0 - 1.0) * 0.5
                })
            })
            .collect();
        let mut codec = Codec::<Real>::init(11);
        let mut opt = AdamW::new(
            &codec.store,
            AdamWConfig {
                lr: 1e-3,
                weight_decay: 0.0,
                ..Default::default()
            },
        );
        let mut x = ArrayD::<Real>::zeros(IxDyn(&[8, 1, PATCH_SIZE, PATCH_SIZE]));
        for (i, p) in patches.iter().enumerate() {
            for r in 0..PATCH_SIZE {
                for c in 0..PATCH_SIZE {
                    x[[i, 0, r, c]] = p[[r, c]];
                }
            }
        }
        let prior = Array2::<Real>::zeros((8, LATENT_DIM));
        let mut last = f64::INFINITY;
        for step in 0..500 {
            let (rec, _) = codec_train_step(&mut codec, &mut opt, &x, &prior, 0.0, 1, 0);
            last = rec;
            if rec < 1e-3 {
                eprintln!("single-batch overfit reached {rec:.2e} at step {step}");
                break;
            }
        }
        assert!(last < 1e-3, "reconstruction stuck at {last}");
    }
}
