//! Downstream training in three modes: frozen backbone (train the small head
//! only), fine-tuned (backbone updated by the task loss), and the specialized
//! end-to-end baseline trained from scratch.

use crate::checkpoint::CheckpointMeta;
use crate::codec::Codec;
use crate::context::{
    build_window_tensors, ContextEncoder, EncoderArch, TokenOrdering, WindowFlavor,
    WindowTensors, MODEL_DIM,
};
use crate::data::{control_window_index, window_index, LoadedDataset, Split, WindowRef};
use crate::error::{Error, Result};
use crate::harness::targets::*;
use crate::heads::{head_input, Task, TaskHead};
use crate::nn::{AdamW, AdamWConfig, ParamStore, Session};
use crate::rng::substream;
use crate::sim::episode::Episode;
use crate::sim::patch::PATCH_SIZE;
use crate::Real;
use ndarray::{Array2, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Frozen,
    Finetune,
    E2e,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Frozen => "frozen",
            Mode::Finetune => "finetune",
            Mode::E2e => "e2e",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frozen" => Ok(Mode::Frozen),
            "finetune" => Ok(Mode::Finetune),
            "e2e" => Ok(Mode::E2e),
            other => Err(Error::Config(format!("unknown mode {other}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DownstreamConfig {
    pub task: Task,
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub ordering: TokenOrdering,
    /// Window stride over episode frames.
    pub stride: usize,
    pub seed: u64,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        DownstreamConfig {
            task: Task::Fkd,
            mode: Mode::Frozen,
            epochs: 50,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.0,
            ordering: TokenOrdering::Sequential,
            stride: 1,
            seed: 0,
        }
    }
}

impl DownstreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if self.batch_size > 32 {
            // larger batches drive the heads toward predicting the data mean
            eprintln!(
                "warning: downstream batch size {} exceeds 32; risks converging to the data mean",
                self.batch_size
            );
        }
        if self.task == Task::Pr && self.mode == Mode::Frozen {
            // valid: evaluation-only, nothing to train
        }
        Ok(())
    }
}

/// One metrics row: epoch, split, loss, optional psnr.
pub type MetricsRow = (usize, Split, f64, Option<f64>);

#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub task: Task,
    pub mode: Mode,
    pub train_mse: f64,
    pub test_mse: f64,
    pub test_psnr: Option<f64>,
    pub learnable_params: usize,
    pub total_params: usize,
    /// Logged to stdout only; deliberately kept out of comparable files.
    pub wall_clock_s: f64,
    pub rows: Vec<MetricsRow>,
}

pub fn write_metrics_csv(rows: &[MetricsRow], with_psnr: bool, path: &std::path::Path) -> Result<()> {
    let mut out = String::from(if with_psnr {
        "epoch,split,loss,psnr\n"
    } else {
        "epoch,split,loss\n"
    });
    for (epoch, split, loss, psnr) in rows {
        let split = match split {
            Split::Train => "train",
            Split::Test => "test",
        };
        if with_psnr {
            let p = psnr.map_or(String::new(), |v| format!("{v}"));
            out.push_str(&format!("{epoch},{split},{loss},{p}\n"));
        } else {
            out.push_str(&format!("{epoch},{split},{loss}\n"));
        }
    }
    std::fs::write(path, out).map_err(|e| Error::dataset(path, e))?;
    Ok(())
}

/// Which window flavor and index a task trains on.
pub fn task_windows(task: Task, episodes: &[Episode], stride: usize) -> Vec<WindowRef> {
    match task {
        Task::Fkd | Task::Pr => window_index(episodes, stride),
        Task::Ikd | Task::Bc => control_window_index(episodes, stride),
    }
}

pub fn task_flavor(task: Task) -> WindowFlavor {
    match task {
        Task::Fkd | Task::Pr => WindowFlavor::Standard,
        Task::Ikd | Task::Bc => WindowFlavor::Control,
    }
}

pub fn task_aux(task: Task, episodes: &[Episode], refs: &[WindowRef]) -> Option<Array2<Real>> {
    match task {
        Task::Fkd | Task::Pr => None,
        Task::Ikd => Some(ikd_aux(episodes, refs)),
        Task::Bc => Some(bc_aux(episodes, refs)),
    }
}

pub fn task_targets(task: Task, episodes: &[Episode], refs: &[WindowRef]) -> Array2<Real> {
    match task {
        Task::Fkd => fkd_targets(episodes, refs),
        Task::Ikd | Task::Bc => action_targets(episodes, refs),
        Task::Pr => next_patch_targets(episodes, refs),
    }
}

/// Evaluation-mode context vectors for every window, in chunks.
pub fn ctx_features(
    encoder: &ContextEncoder<Real>,
    codec: &Codec<Real>,
    episodes: &[Episode],
    refs: &[WindowRef],
    flavor: WindowFlavor,
    ordering: TokenOrdering,
) -> Array2<Real> {
    let embeddings = crate::context::embed_episodes(codec, episodes);
    let mut out = Array2::zeros((refs.len(), MODEL_DIM));
    let mut row = 0usize;
    for chunk in refs.chunks(64) {
        let inputs = build_window_tensors::<Real>(episodes, &embeddings, chunk, flavor);
        let ctx = encoder.encode_windows(&inputs, ordering);
        for r in 0..ctx.nrows() {
            for c in 0..MODEL_DIM {
                out[[row + r, c]] = ctx[[r, c]];
            }
        }
        row += ctx.nrows();
    }
    out
}

fn mse_value(pred: &Array2<Real>, targets: &Array2<Real>) -> f64 {
    let mut acc = 0.0;
    for (a, b) in pred.iter().zip(targets.iter()) {
        let d = (*a - *b) as f64;
        acc += d * d;
    }
    acc / pred.len().max(1) as f64
}

fn head_predictions(
    head: &TaskHead,
    store: &ParamStore<Real>,
    inputs: &Array2<Real>,
) -> Array2<Real> {
    let mut s = Session::new(store, false);
    let x = s.tape.constant(inputs.clone().into_dyn());
    let y = head.forward(&mut s, x);
    let v = s.tape.value(y);
    v.to_shape((inputs.nrows(), head.task.output_width()))
        .unwrap()
        .to_owned()
}

pub struct FrozenRun {
    pub head_store: ParamStore<Real>,
    pub head: TaskHead,
    pub report: MetricsReport,
}

/// Frozen-backbone training: context features are computed once and the tiny
/// head regresses on them. Backbone and codec parameters are never touched.
pub fn train_frozen_head(
    dataset: &LoadedDataset,
    codec: &Codec<Real>,
    encoder: &ContextEncoder<Real>,
    cfg: &DownstreamConfig,
) -> Result<FrozenRun> {
    cfg.validate()?;
    if cfg.task == Task::Pr {
        return Err(Error::Config(
            "patch reconstruction has nothing to train; evaluate it instead".into(),
        ));
    }
    let start = std::time::Instant::now();
    let flavor = task_flavor(cfg.task);
    let train_refs = task_windows(cfg.task, &dataset.train, cfg.stride);
    let test_refs = task_windows(cfg.task, &dataset.test, cfg.stride);
    if train_refs.is_empty() {
        return Err(Error::Data("no training windows".into()));
    }
    let train_ctx = ctx_features(encoder, codec, &dataset.train, &train_refs, flavor, cfg.ordering);
    let test_ctx = ctx_features(encoder, codec, &dataset.test, &test_refs, flavor, cfg.ordering);
    let train_inputs = head_input(
        &train_ctx,
        task_aux(cfg.task, &dataset.train, &train_refs).as_ref(),
    );
    let test_inputs = head_input(
        &test_ctx,
        task_aux(cfg.task, &dataset.test, &test_refs).as_ref(),
    );
    let train_targets = task_targets(cfg.task, &dataset.train, &train_refs);
    let test_targets = task_targets(cfg.task, &dataset.test, &test_refs);

    let mut store = ParamStore::<Real>::new();
    let head = TaskHead::new(&mut store, cfg.seed, cfg.task)?;
    let mut opt = AdamW::new(
        &store,
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    );
    let mut rng = substream(cfg.seed, "downstream-shuffle");
    let mut order: Vec<usize> = (0..train_refs.len()).collect();
    let mut rows = Vec::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut x = Array2::zeros((chunk.len(), train_inputs.ncols()));
            let mut t = Array2::zeros((chunk.len(), train_targets.ncols()));
            for (bi, &i) in chunk.iter().enumerate() {
                x.row_mut(bi).assign(&train_inputs.row(i));
                t.row_mut(bi).assign(&train_targets.row(i));
            }
            let mut s = Session::new(&store, true);
            let xv = s.tape.constant(x.into_dyn());
            let loss = head.loss_graph(&mut s, xv, &t);
            let lv = s.tape.scalar_value(loss) as f64;
            if !lv.is_finite() {
                return Err(Error::Training(format!(
                    "{} head loss diverged at epoch {epoch}",
                    cfg.task.name()
                )));
            }
            epoch_loss += lv;
            batches += 1;
            let grads = s.gradients(loss);
            opt.step(&mut store, &grads);
        }
        rows.push((epoch, Split::Train, epoch_loss / batches as f64, None));
        if !test_refs.is_empty() {
            let test_pred = head_predictions(&head, &store, &test_inputs);
            rows.push((epoch, Split::Test, mse_value(&test_pred, &test_targets), None));
        }
    }
    let train_pred = head_predictions(&head, &store, &train_inputs);
    let test_pred = head_predictions(&head, &store, &test_inputs);
    let report = MetricsReport {
        task: cfg.task,
        mode: Mode::Frozen,
        train_mse: mse_value(&train_pred, &train_targets),
        test_mse: mse_value(&test_pred, &test_targets),
        test_psnr: None,
        learnable_params: store.scalar_count(),
        total_params: store.scalar_count()
            + encoder.store.scalar_count()
            + codec.arch.encoder_param_count(&codec.store),
        wall_clock_s: start.elapsed().as_secs_f64(),
        rows,
    };
    Ok(FrozenRun {
        head_store: store,
        head,
        report,
    })
}

/// Mean PSNR of decoding predicted next-patch embeddings, the PR metric.
pub fn eval_pr(
    dataset: &LoadedDataset,
    codec: &Codec<Real>,
    encoder: &ContextEncoder<Real>,
    split: Split,
    ordering: TokenOrdering,
    stride: usize,
) -> Result<(f64, f64)> {
    let episodes = dataset.episodes(split);
    let refs = window_index(episodes, stride);
    if refs.is_empty() {
        return Err(Error::Data("no windows for PR evaluation".into()));
    }
    let embeddings = crate::context::embed_episodes(codec, episodes);
    let mut psnr_acc = 0.0;
    let mut mse_acc = 0.0;
    let mut n = 0usize;
    for chunk in refs.chunks(64) {
        let inputs = build_window_tensors::<Real>(episodes, &embeddings, chunk, WindowFlavor::Standard);
        let pred_emb = encoder.predict_next_embedding(&inputs, ordering);
        for (bi, r) in chunk.iter().enumerate() {
            let emb = pred_emb.row(bi).to_owned();
            let patch = codec.decode(&emb)?;
            let actual = episodes[r.episode].frames[r.end + 1].patch.mapv(|v| v as Real);
            psnr_acc += crate::codec::psnr(&patch, &actual)?;
            let d = &patch - &actual;
            mse_acc += d.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / d.len() as f64;
            n += 1;
        }
    }
    Ok((psnr_acc / n as f64, mse_acc / n as f64))
}

// ---------------------------------------------------------------------------
// Fine-tuning: backbone updated by the task loss
// ---------------------------------------------------------------------------

pub struct FinetuneRun {
    /// Combined store: encoder parameters plus head (and frozen codec for PR).
    pub store: ParamStore<Real>,
    pub report: MetricsReport,
}

pub struct FinetuneModel {
    pub store: ParamStore<Real>,
    pub encoder_arch: EncoderArch,
    pub head: Option<TaskHead>,
    pub codec_arch: Option<crate::codec::CodecArch>,
    pub trainable: Vec<bool>,
}

/// Build the joint model store: encoder (trainable, from the pretrained
/// checkpoint), task head (trainable, fresh), and for PR the frozen decoder.
pub fn build_finetune_model(
    task: Task,
    encoder: &ContextEncoder<Real>,
    codec: &Codec<Real>,
    seed: u64,
) -> Result<FinetuneModel> {
    let mut store = ParamStore::<Real>::new();
    let encoder_arch = EncoderArch::new(&mut store, seed);
    let n_encoder = store.len();
    let head = if task == Task::Pr {
        None
    } else {
        Some(TaskHead::new(&mut store, seed, task)?)
    };
    let n_with_head = store.len();
    let codec_arch = if task == Task::Pr {
        Some(crate::codec::CodecArch::new(&mut store, seed))
    } else {
        None
    };
    // copy pretrained encoder weights
    for (_, e) in encoder.store.iter() {
        let id = store.id(&e.name)?;
        store.get_mut(id).assign(&e.value);
    }
    // copy frozen codec weights for the PR decode path
    if codec_arch.is_some() {
        for (_, e) in codec.store.iter() {
            let id = store.id(&e.name)?;
            store.get_mut(id).assign(&e.value);
        }
    }
    let mut trainable = vec![true; store.len()];
    for t in trainable.iter_mut().take(store.len()).skip(n_with_head) {
        *t = false; // codec stays frozen
    }
    let _ = n_encoder;
    Ok(FinetuneModel {
        store,
        encoder_arch,
        head,
        codec_arch,
        trainable,
    })
}

impl FinetuneModel {
    /// Task loss over a window batch, flowing gradients into the backbone.
    pub fn loss_graph(
        &self,
        s: &mut Session<Real>,
        inputs: &WindowTensors<Real>,
        aux: Option<&Array2<Real>>,
        targets: &Array2<Real>,
        ordering: TokenOrdering,
    ) -> crate::ad::Var {
        let (out, _) = self.encoder_arch.forward(s, inputs, ordering, None);
        let ctx = self.encoder_arch.ctx_of(s, out);
        match (&self.head, &self.codec_arch) {
            (Some(head), _) => {
                let x = match aux {
                    Some(a) => {
                        let av = s.tape.constant(a.clone().into_dyn());
                        s.tape.concat(&[ctx, av], 1)
                    }
                    None => ctx,
                };
                head.loss_graph(s, x, targets)
            }
            (None, Some(codec_arch)) => {
                // PR: decode the predicted next-patch embedding, frozen decoder
                let pred_emb = self.encoder_arch.next_patch_prediction(s, ctx);
                let patches = codec_arch.decode_graph(s, pred_emb);
                let b = targets.nrows();
                let flat = s.tape.reshape(patches, &[b, PATCH_SIZE * PATCH_SIZE]);
                let t = s.tape.constant(targets.clone().into_dyn());
                crate::nn::mse(&mut s.tape, flat, t)
            }
            _ => unreachable!("finetune model without head or codec"),
        }
    }

    pub fn encoder_view(&self) -> ContextEncoder<Real> {
        let mut enc = ContextEncoder::<Real>::init(0);
        for (_, e) in self.store.iter() {
            if let Ok(id) = enc.store.id(&e.name) {
                enc.store.get_mut(id).assign(&e.value);
            }
        }
        enc
    }
}

pub fn train_finetune(
    dataset: &LoadedDataset,
    codec: &Codec<Real>,
    encoder: &ContextEncoder<Real>,
    cfg: &DownstreamConfig,
) -> Result<FinetuneRun> {
    cfg.validate()?;
    let start = std::time::Instant::now();
    let flavor = task_flavor(cfg.task);
    let train_refs = task_windows(cfg.task, &dataset.train, cfg.stride);
    let test_refs = task_windows(cfg.task, &dataset.test, cfg.stride);
    if train_refs.is_empty() {
        return Err(Error::Data("no training windows".into()));
    }
    let train_emb = crate::context::embed_episodes(codec, &dataset.train);
    let test_emb = crate::context::embed_episodes(codec, &dataset.test);
    let train_targets = task_targets(cfg.task, &dataset.train, &train_refs);
    let train_aux = task_aux(cfg.task, &dataset.train, &train_refs);
    let test_targets = task_targets(cfg.task, &dataset.test, &test_refs);
    let test_aux = task_aux(cfg.task, &dataset.test, &test_refs);

    let mut model = build_finetune_model(cfg.task, encoder, codec, cfg.seed)?;
    let learnable: usize = model
        .store
        .iter()
        .zip(&model.trainable)
        .filter(|(_, &t)| t)
        .map(|((_, e), _)| e.value.len())
        .sum();
    let mut opt = AdamW::new(
        &model.store,
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    );
    let mut rng = substream(cfg.seed, "finetune-shuffle");
    let mut order: Vec<usize> = (0..train_refs.len()).collect();
    let mut rows = Vec::new();
    let eval_loss = |model: &FinetuneModel,
                     episodes: &[Episode],
                     emb: &[Array2<Real>],
                     refs: &[WindowRef],
                     aux: Option<&Array2<Real>>,
                     targets: &Array2<Real>|
     -> f64 {
        let mut acc = 0.0;
        let mut n = 0usize;
        for (ci, chunk) in refs.chunks(64).enumerate() {
            let inputs = build_window_tensors::<Real>(episodes, emb, chunk, flavor);
            let aux_chunk = aux.map(|a| {
                let mut out = Array2::zeros((chunk.len(), a.ncols()));
                for (bi, _) in chunk.iter().enumerate() {
                    out.row_mut(bi).assign(&a.row(ci * 64 + bi));
                }
                out
            });
            let mut tgt = Array2::zeros((chunk.len(), targets.ncols()));
            for (bi, _) in chunk.iter().enumerate() {
                tgt.row_mut(bi).assign(&targets.row(ci * 64 + bi));
            }
            let mut s = Session::new(&model.store, false);
            let loss = model.loss_graph(&mut s, &inputs, aux_chunk.as_ref(), &tgt, cfg.ordering);
            acc += s.tape.scalar_value(loss) as f64 * chunk.len() as f64;
            n += chunk.len();
        }
        acc / n.max(1) as f64
    };
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk_ids in order.chunks(cfg.batch_size) {
            let chunk: Vec<WindowRef> = chunk_ids.iter().map(|&i| train_refs[i]).collect();
            let inputs = build_window_tensors::<Real>(&dataset.train, &train_emb, &chunk, flavor);
            let aux_chunk = train_aux.as_ref().map(|a| {
                let mut out = Array2::zeros((chunk.len(), a.ncols()));
                for (bi, &i) in chunk_ids.iter().enumerate() {
                    out.row_mut(bi).assign(&a.row(i));
                }
                out
            });
            let mut tgt = Array2::zeros((chunk.len(), train_targets.ncols()));
            for (bi, &i) in chunk_ids.iter().enumerate() {
                tgt.row_mut(bi).assign(&train_targets.row(i));
            }
            let mut s = Session::with_trainable(&model.store, &model.trainable);
            let loss = model.loss_graph(&mut s, &inputs, aux_chunk.as_ref(), &tgt, cfg.ordering);
            let lv = s.tape.scalar_value(loss) as f64;
            if !lv.is_finite() {
                return Err(Error::Training(format!(
                    "finetune loss diverged at epoch {epoch}"
                )));
            }
            epoch_loss += lv;
            batches += 1;
            let grads = s.gradients(loss);
            opt.step(&mut model.store, &grads);
        }
        rows.push((epoch, Split::Train, epoch_loss / batches as f64, None));
        if !test_refs.is_empty() {
            let tl = eval_loss(
                &model,
                &dataset.test,
                &test_emb,
                &test_refs,
                test_aux.as_ref(),
                &test_targets,
            );
            rows.push((epoch, Split::Test, tl, None));
        }
    }
    let train_mse = eval_loss(
        &model,
        &dataset.train,
        &train_emb,
        &train_refs,
        train_aux.as_ref(),
        &train_targets,
    );
    let test_mse = eval_loss(
        &model,
        &dataset.test,
        &test_emb,
        &test_refs,
        test_aux.as_ref(),
        &test_targets,
    );
    let test_psnr = if cfg.task == Task::Pr {
        let enc = model.encoder_view();
        Some(eval_pr(dataset, codec, &enc, Split::Test, cfg.ordering, cfg.stride)?.0)
    } else {
        None
    };
    let report = MetricsReport {
        task: cfg.task,
        mode: Mode::Finetune,
        train_mse,
        test_mse,
        test_psnr,
        learnable_params: learnable,
        total_params: model.store.scalar_count()
            + if cfg.task == Task::Pr {
                0
            } else {
                codec.arch.encoder_param_count(&codec.store)
            },
        wall_clock_s: start.elapsed().as_secs_f64(),
        rows,
    };
    Ok(FinetuneRun {
        store: model.store,
        report,
    })
}

// ---------------------------------------------------------------------------
// End-to-end baseline
// ---------------------------------------------------------------------------

fn e2e_aux_rows(task: Task, episodes: &[Episode], refs: &[WindowRef]) -> Array2<Real> {
    match task {
        Task::Fkd | Task::Pr => {
            let mut out = Array2::zeros((refs.len(), 8));
            for (i, r) in refs.iter().enumerate() {
                let f = &episodes[r.episode].frames[r.end];
                out[[i, 0]] = f.action[0];
                out[[i, 1]] = f.action[1];
                for k in 0..6 {
                    out[[i, 2 + k]] = f.pose[k];
                }
            }
            out
        }
        Task::Ikd => ikd_aux(episodes, refs),
        Task::Bc => bc_aux(episodes, refs),
    }
}

fn patch_batch(episodes: &[Episode], refs: &[WindowRef]) -> ArrayD<Real> {
    let mut x = ArrayD::zeros(IxDyn(&[refs.len(), 1, PATCH_SIZE, PATCH_SIZE]));
    for (bi, r) in refs.iter().enumerate() {
        let p = &episodes[r.episode].frames[r.end].patch;
        for rr in 0..PATCH_SIZE {
            for cc in 0..PATCH_SIZE {
                x[[bi, 0, rr, cc]] = p[[rr, cc]];
            }
        }
    }
    x
}

pub struct E2eRun {
    pub model: crate::e2e::E2eModel<Real>,
    pub report: MetricsReport,
}

/// MSE (and PR PSNR) of an end-to-end model over one split.
pub fn e2e_eval_split(
    model: &crate::e2e::E2eModel<Real>,
    dataset: &LoadedDataset,
    task: Task,
    split: Split,
    stride: usize,
) -> Result<(f64, Option<f64>)> {
    let episodes = dataset.episodes(split);
    let refs = task_windows(task, episodes, stride);
    if refs.is_empty() {
        return Err(Error::Data("no samples to evaluate".into()));
    }
    let targets = task_targets(task, episodes, &refs);
    let aux = e2e_aux_rows(task, episodes, &refs);
    let mut acc = 0.0;
    let mut psnr_acc = 0.0;
    let mut n = 0usize;
    for (ci, chunk) in refs.chunks(32).enumerate() {
        let x = patch_batch(episodes, chunk);
        let mut a = Array2::zeros((chunk.len(), aux.ncols()));
        for bi in 0..chunk.len() {
            a.row_mut(bi).assign(&aux.row(ci * 32 + bi));
        }
        let mut s = Session::new(&model.store, false);
        let xv = s.tape.constant(x);
        let av = s.tape.constant(a.into_dyn());
        let y = model.arch.forward(&mut s, xv, av);
        let pred = s.tape.value(y);
        for (bi, r) in chunk.iter().enumerate() {
            let row = ci * 32 + bi;
            for c in 0..targets.ncols() {
                let d = (pred[[bi, c]] - targets[[row, c]]) as f64;
                acc += d * d;
            }
            if task == Task::Pr {
                let mut patch = Array2::zeros((PATCH_SIZE, PATCH_SIZE));
                for rr in 0..PATCH_SIZE {
                    for cc in 0..PATCH_SIZE {
                        patch[[rr, cc]] = pred[[bi, rr * PATCH_SIZE + cc]];
                    }
                }
                let actual = episodes[r.episode].frames[r.end + 1].patch.mapv(|v| v as Real);
                psnr_acc += crate::codec::psnr(&patch, &actual)?;
            }
            n += 1;
        }
    }
    let mse = acc / (n * targets.ncols()).max(1) as f64;
    let psnr = (task == Task::Pr).then(|| psnr_acc / n.max(1) as f64);
    Ok((mse, psnr))
}

pub fn train_e2e(dataset: &LoadedDataset, cfg: &DownstreamConfig) -> Result<E2eRun> {
    cfg.validate()?;
    let start = std::time::Instant::now();
    let train_refs = task_windows(cfg.task, &dataset.train, cfg.stride);
    let test_refs = task_windows(cfg.task, &dataset.test, cfg.stride);
    if train_refs.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    let train_targets = task_targets(cfg.task, &dataset.train, &train_refs);
    let test_targets = task_targets(cfg.task, &dataset.test, &test_refs);
    let train_aux = e2e_aux_rows(cfg.task, &dataset.train, &train_refs);
    let test_aux = e2e_aux_rows(cfg.task, &dataset.test, &test_refs);

    let mut model = crate::e2e::E2eModel::<Real>::init(cfg.seed, cfg.task);
    let mut opt = AdamW::new(
        &model.store,
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    );
    let mut rng = substream(cfg.seed, "e2e-shuffle");
    let mut order: Vec<usize> = (0..train_refs.len()).collect();
    let mut rows = Vec::new();
    let eval_loss = |model: &crate::e2e::E2eModel<Real>,
                     episodes: &[Episode],
                     refs: &[WindowRef],
                     aux: &Array2<Real>,
                     targets: &Array2<Real>|
     -> f64 {
        let mut acc = 0.0;
        let mut n = 0usize;
        for (ci, chunk) in refs.chunks(32).enumerate() {
            let x = patch_batch(episodes, chunk);
            let mut a = Array2::zeros((chunk.len(), aux.ncols()));
            let mut t = Array2::zeros((chunk.len(), targets.ncols()));
            for bi in 0..chunk.len() {
                a.row_mut(bi).assign(&aux.row(ci * 32 + bi));
                t.row_mut(bi).assign(&targets.row(ci * 32 + bi));
            }
            let mut s = Session::new(&model.store, false);
            let xv = s.tape.constant(x);
            let av = s.tape.constant(a.into_dyn());
            let loss = model.arch.loss_graph(&mut s, xv, av, &t);
            acc += s.tape.scalar_value(loss) as f64 * chunk.len() as f64;
            n += chunk.len();
        }
        acc / n.max(1) as f64
    };
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk_ids in order.chunks(cfg.batch_size) {
            let chunk: Vec<WindowRef> = chunk_ids.iter().map(|&i| train_refs[i]).collect();
            let x = patch_batch(&dataset.train, &chunk);
            let mut a = Array2::zeros((chunk.len(), train_aux.ncols()));
            let mut t = Array2::zeros((chunk.len(), train_targets.ncols()));
            for (bi, &i) in chunk_ids.iter().enumerate() {
                a.row_mut(bi).assign(&train_aux.row(i));
                t.row_mut(bi).assign(&train_targets.row(i));
            }
            let mut s = Session::new(&model.store, true);
            let xv = s.tape.constant(x);
            let av = s.tape.constant(a.into_dyn());
            let loss = model.arch.loss_graph(&mut s, xv, av, &t);
            let lv = s.tape.scalar_value(loss) as f64;
            if !lv.is_finite() {
                return Err(Error::Training(format!("e2e loss diverged at epoch {epoch}")));
            }
            epoch_loss += lv;
            batches += 1;
            let grads = s.gradients(loss);
            opt.step(&mut model.store, &grads);
        }
        rows.push((epoch, Split::Train, epoch_loss / batches as f64, None));
        if !test_refs.is_empty() {
            let tl = eval_loss(&model, &dataset.test, &test_refs, &test_aux, &test_targets);
            rows.push((epoch, Split::Test, tl, None));
        }
    }
    let train_mse = eval_loss(&model, &dataset.train, &train_refs, &train_aux, &train_targets);
    let test_mse = eval_loss(&model, &dataset.test, &test_refs, &test_aux, &test_targets);
    let test_psnr = if cfg.task == Task::Pr {
        // MSE over patches in [-1, 1]: PSNR follows in closed form per sample;
        // evaluate properly per sample for the report.
        let mut acc = 0.0;
        let mut n = 0usize;
        for chunk in test_refs.chunks(32) {
            let x = patch_batch(&dataset.test, chunk);
            let a = {
                let full = e2e_aux_rows(cfg.task, &dataset.test, chunk);
                full
            };
            let mut s = Session::new(&model.store, false);
            let xv = s.tape.constant(x);
            let av = s.tape.constant(a.into_dyn());
            let y = model.arch.forward(&mut s, xv, av);
            let pred = s.tape.value(y);
            for (bi, r) in chunk.iter().enumerate() {
                let mut patch = Array2::zeros((PATCH_SIZE, PATCH_SIZE));
                for rr in 0..PATCH_SIZE {
                    for cc in 0..PATCH_SIZE {
                        patch[[rr, cc]] = pred[[bi, rr * PATCH_SIZE + cc]];
                    }
                }
                let actual = dataset.test[r.episode].frames[r.end + 1]
                    .patch
                    .mapv(|v| v as Real);
                acc += crate::codec::psnr(&patch, &actual)?;
                n += 1;
            }
        }
        Some(acc / n.max(1) as f64)
    } else {
        None
    };
    let total = model.store.scalar_count();
    let report = MetricsReport {
        task: cfg.task,
        mode: Mode::E2e,
        train_mse,
        test_mse,
        test_psnr,
        learnable_params: total,
        total_params: total,
        wall_clock_s: start.elapsed().as_secs_f64(),
        rows,
    };
    Ok(E2eRun { model, report })
}

// ---------------------------------------------------------------------------
// Predict-the-mean baseline
// ---------------------------------------------------------------------------

/// Mean-predictor "checkpoint": stores the per-dimension target mean of a
/// split and nothing else.
pub fn mean_predictor(
    dataset: &LoadedDataset,
    task: Task,
    split: Split,
    stride: usize,
) -> (ParamStore<Real>, CheckpointMeta) {
    let episodes = dataset.episodes(split);
    let refs = task_windows(task, episodes, stride);
    let targets = task_targets(task, episodes, refs.as_slice());
    let means = column_means(&targets);
    let mut store = ParamStore::new();
    store.add(
        "mean",
        ndarray::Array1::from_vec(means).into_dyn(),
    );
    let mut meta = CheckpointMeta::new("mean");
    meta.extra.insert("task".into(), task.name().into());
    meta.extra.insert(
        "split".into(),
        match split {
            Split::Train => "train".into(),
            Split::Test => "test".into(),
        },
    );
    (store, meta)
}

/// MSE of a mean predictor on a split: equals the per-dimension variance of
/// the split's targets when the means came from the same split.
pub fn mean_predictor_mse(
    dataset: &LoadedDataset,
    task: Task,
    split: Split,
    stride: usize,
    means: &[Real],
) -> f64 {
    let episodes = dataset.episodes(split);
    let refs = task_windows(task, episodes, stride);
    let targets = task_targets(task, episodes, &refs);
    mse_against_constant(&targets, means)
}

pub fn head_meta(
    cfg: &DownstreamConfig,
    report: &MetricsReport,
    backbone_checksum: &str,
    codec_checksum: &str,
    fingerprint: &str,
) -> CheckpointMeta {
    let mut meta = CheckpointMeta::new(match cfg.mode {
        Mode::Frozen => "head",
        Mode::Finetune => "finetuned",
        Mode::E2e => "e2e",
    });
    meta.config_echo = serde_json::to_string(cfg).unwrap_or_default();
    meta.data_fingerprint = fingerprint.to_string();
    let mut losses = BTreeMap::new();
    losses.insert("train_mse".into(), report.train_mse);
    losses.insert("test_mse".into(), report.test_mse);
    if let Some(p) = report.test_psnr {
        losses.insert("test_psnr".into(), p);
    }
    losses.insert("learnable_params".into(), report.learnable_params as f64);
    losses.insert("total_params".into(), report.total_params as f64);
    meta.losses = losses;
    meta.extra.insert("task".into(), cfg.task.name().into());
    meta.extra.insert("mode".into(), cfg.mode.name().into());
    meta.extra
        .insert("ordering".into(), serde_json::to_string(&cfg.ordering).unwrap());
    meta.extra
        .insert("aux_width".into(), cfg.task.aux_width().to_string());
    if !backbone_checksum.is_empty() {
        meta.extra
            .insert("backbone_checksum".into(), backbone_checksum.into());
    }
    if !codec_checksum.is_empty() {
        meta.extra
            .insert("codec_checksum".into(), codec_checksum.into());
    }
    meta
}
