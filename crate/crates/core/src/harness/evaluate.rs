//! Checkpoint evaluation on a dataset split. Deterministic: evaluation mode,
//! no masking, fixed iteration order.

use crate::checkpoint::{assign_params, load_checkpoint, CheckpointMeta};
use crate::codec::Codec;
use crate::context::{ContextEncoder, TokenOrdering};
use crate::data::{load_dataset, LoadedDataset, Split};
use crate::error::{Error, Result};
use crate::harness::downstream::{
    ctx_features, eval_pr, task_aux, task_flavor, task_targets, task_windows,
};
use crate::heads::{head_input, Task, TaskHead};
use crate::nn::{ParamStore, Session};
use crate::Real;
use ndarray::Array2;
use std::path::PathBuf;

#[derive(Debug, Clone)]
pub struct EvalSpec {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub split: Split,
    /// Codec checkpoint, required for head/finetuned/encoder kinds.
    pub codec: Option<PathBuf>,
    /// Backbone (encoder) checkpoint, required for frozen heads.
    pub backbone: Option<PathBuf>,
    pub stride: usize,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub task: Task,
    pub mode: String,
    pub split: Split,
    pub mse: f64,
    pub psnr: Option<f64>,
}

fn meta_task(meta: &CheckpointMeta) -> Result<Task> {
    meta.extra
        .get("task")
        .ok_or_else(|| Error::Config("checkpoint records no task".into()))?
        .parse()
}

fn meta_ordering(meta: &CheckpointMeta) -> TokenOrdering {
    meta.extra
        .get("ordering")
        .and_then(|s| serde_json::from_str(s).ok())
        .unwrap_or(TokenOrdering::Sequential)
}

fn require_codec(spec: &EvalSpec, meta: &CheckpointMeta) -> Result<(Codec<Real>, CheckpointMeta)> {
    let path = spec
        .codec
        .as_ref()
        .ok_or_else(|| Error::Config("evaluation needs --codec for this checkpoint".into()))?;
    let (codec, codec_meta) = Codec::load(path)?;
    if let Some(expect) = meta.extra.get("codec_checksum") {
        if expect != &codec_meta.content_checksum {
            return Err(Error::Integrity(format!(
                "codec checksum {} does not match the one recorded at training time {}",
                codec_meta.content_checksum, expect
            )));
        }
    }
    Ok((codec, codec_meta))
}

fn mse_rows(pred: &Array2<Real>, targets: &Array2<Real>) -> f64 {
    pred.iter()
        .zip(targets.iter())
        .map(|(a, b)| ((a - b) as f64).powi(2))
        .sum::<f64>()
        / pred.len().max(1) as f64
}

pub fn evaluate(spec: &EvalSpec) -> Result<EvalOutcome> {
    let (store, meta) = load_checkpoint(&spec.checkpoint)?;
    let dataset = load_dataset(&spec.dataset)?;
    match meta.kind.as_str() {
        "head" => eval_frozen_head(spec, &dataset, store, &meta),
        "finetuned" => eval_finetuned(spec, &dataset, store, &meta),
        "e2e" => eval_e2e(spec, &dataset, &meta),
        "encoder" => eval_encoder_pr(spec, &dataset, store, &meta),
        "mean" => eval_mean(spec, &dataset, store, &meta),
        other => Err(Error::Config(format!(
            "cannot evaluate checkpoint kind {other}"
        ))),
    }
}

fn eval_frozen_head(
    spec: &EvalSpec,
    dataset: &LoadedDataset,
    loaded: ParamStore<Real>,
    meta: &CheckpointMeta,
) -> Result<EvalOutcome> {
    let task = meta_task(meta)?;
    let ordering = meta_ordering(meta);
    let (codec, _) = require_codec(spec, meta)?;
    let backbone_path = spec
        .backbone
        .as_ref()
        .ok_or_else(|| Error::Config("frozen-head evaluation needs --backbone".into()))?;
    let (encoder, enc_meta) = ContextEncoder::load(backbone_path)?;
    if let Some(expect) = meta.extra.get("backbone_checksum") {
        if expect != &enc_meta.content_checksum {
            return Err(Error::Integrity(format!(
                "backbone checksum {} does not match the one recorded at training time {}",
                enc_meta.content_checksum, expect
            )));
        }
    }
    let mut head_store = ParamStore::new();
    let head = TaskHead::new(&mut head_store, 0, task)?;
    assign_params(&mut head_store, &loaded)?;

    let episodes = dataset.episodes(spec.split);
    let refs = task_windows(task, episodes, spec.stride);
    let ctx = ctx_features(&encoder, &codec, episodes, &refs, task_flavor(task), ordering);
    let inputs = head_input(&ctx, task_aux(task, episodes, &refs).as_ref());
    let targets = task_targets(task, episodes, &refs);
    let mut s = Session::new(&head_store, false);
    let x = s.tape.constant(inputs.into_dyn());
    let y = head.forward(&mut s, x);
    let pred = s
        .tape
        .value(y)
        .to_shape((refs.len(), task.output_width()))
        .unwrap()
        .to_owned();
    Ok(EvalOutcome {
        task,
        mode: "frozen".into(),
        split: spec.split,
        mse: mse_rows(&pred, &targets),
        psnr: None,
    })
}

fn eval_finetuned(
    spec: &EvalSpec,
    dataset: &LoadedDataset,
    loaded: ParamStore<Real>,
    meta: &CheckpointMeta,
) -> Result<EvalOutcome> {
    let task = meta_task(meta)?;
    let ordering = meta_ordering(meta);
    let (codec, _) = require_codec(spec, meta)?;
    let model = {
        let encoder = ContextEncoder::<Real>::init(0);
        let mut m = crate::harness::downstream::build_finetune_model(task, &encoder, &codec, 0)?;
        assign_params(&mut m.store, &loaded)?;
        m
    };
    let episodes = dataset.episodes(spec.split);
    let refs = task_windows(task, episodes, spec.stride);
    let embeddings = crate::context::embed_episodes(&codec, episodes);
    let targets = task_targets(task, episodes, &refs);
    let aux = task_aux(task, episodes, &refs);
    let mut acc = 0.0;
    let mut n = 0usize;
    for (ci, chunk) in refs.chunks(64).enumerate() {
        let inputs = crate::context::build_window_tensors::<Real>(
            episodes,
            &embeddings,
            chunk,
            task_flavor(task),
        );
        let aux_chunk = aux.as_ref().map(|a| {
            let mut out = Array2::zeros((chunk.len(), a.ncols()));
            for bi in 0..chunk.len() {
                out.row_mut(bi).assign(&a.row(ci * 64 + bi));
            }
            out
        });
        let mut tgt = Array2::zeros((chunk.len(), targets.ncols()));
        for bi in 0..chunk.len() {
            tgt.row_mut(bi).assign(&targets.row(ci * 64 + bi));
        }
        let mut s = Session::new(&model.store, false);
        let loss = model.loss_graph(&mut s, &inputs, aux_chunk.as_ref(), &tgt, ordering);
        acc += s.tape.scalar_value(loss) as f64 * chunk.len() as f64;
        n += chunk.len();
    }
    let psnr = if task == Task::Pr {
        let enc = model.encoder_view();
        Some(eval_pr(dataset, &codec, &enc, spec.split, ordering, spec.stride)?.0)
    } else {
        None
    };
    Ok(EvalOutcome {
        task,
        mode: "finetune".into(),
        split: spec.split,
        mse: acc / n.max(1) as f64,
        psnr,
    })
}

fn eval_e2e(spec: &EvalSpec, dataset: &LoadedDataset, meta: &CheckpointMeta) -> Result<EvalOutcome> {
    let task = meta_task(meta)?;
    let (model, _) = crate::e2e::E2eModel::load(&spec.checkpoint)?;
    let (mse, psnr) =
        crate::harness::downstream::e2e_eval_split(&model, dataset, task, spec.split, spec.stride)?;
    Ok(EvalOutcome {
        task,
        mode: "e2e".into(),
        split: spec.split,
        mse,
        psnr,
    })
}

fn eval_encoder_pr(
    spec: &EvalSpec,
    dataset: &LoadedDataset,
    loaded: ParamStore<Real>,
    meta: &CheckpointMeta,
) -> Result<EvalOutcome> {
    let (codec, _) = require_codec(spec, meta)?;
    let mut encoder = ContextEncoder::<Real>::init(0);
    assign_params(&mut encoder.store, &loaded)?;
    let ordering = meta
        .config_echo
        .contains("interleaved")
        .then_some(TokenOrdering::Interleaved)
        .unwrap_or(TokenOrdering::Sequential);
    let (psnr, emb_mse) = eval_pr(dataset, &codec, &encoder, spec.split, ordering, spec.stride)?;
    Ok(EvalOutcome {
        task: Task::Pr,
        mode: "frozen".into(),
        split: spec.split,
        mse: emb_mse,
        psnr: Some(psnr),
    })
}

fn eval_mean(
    spec: &EvalSpec,
    dataset: &LoadedDataset,
    loaded: ParamStore<Real>,
    meta: &CheckpointMeta,
) -> Result<EvalOutcome> {
    let task = meta_task(meta)?;
    let means: Vec<Real> = loaded.get(loaded.id("mean")?).iter().cloned().collect();
    let episodes = dataset.episodes(spec.split);
    let refs = task_windows(task, episodes, spec.stride);
    let targets = task_targets(task, episodes, &refs);
    if means.len() != targets.ncols() {
        return Err(Error::Config(format!(
            "mean predictor width {} does not match task {}",
            means.len(),
            task.name()
        )));
    }
    let mse = crate::harness::targets::mse_against_constant(&targets, &means);
    Ok(EvalOutcome {
        task,
        mode: "mean".into(),
        split: spec.split,
        mse,
        psnr: None,
    })
}
