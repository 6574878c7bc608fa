//! Experiment orchestration: each run loads its inputs, verifies frozen
//! dependencies by checksum, trains or evaluates, and writes checkpoint +
//! metrics files into its output directory.

pub mod ablate;
pub mod downstream;
pub mod evaluate;
pub mod report;
pub mod rollout;
pub mod targets;

pub use ablate::{run_ablation, AblationConfig, AblationKind};
pub use downstream::{DownstreamConfig, MetricsReport, Mode};
pub use evaluate::{evaluate, EvalOutcome, EvalSpec};
pub use rollout::{rollout_bc, BcPolicy, RolloutConfig, RolloutResult, RolloutSummary};

use crate::checkpoint::{manifest_fingerprint, save_checkpoint, CheckpointMeta};
use crate::codec::{train_codec, Codec, CodecTrainConfig};
use crate::context::{pretrain, ContextEncoder, PretrainConfig};
use crate::data::{load_dataset, LoadedDataset, Split};
use crate::error::{Error, Result};
use crate::heads::Task;
use crate::Real;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::dataset(dir, e))
}

/// Train the patch codec on every train-split patch (strided) and write
/// `codec.ckpt` into `out_dir`.
pub fn run_train_codec(
    dataset_dir: &Path,
    cfg: &CodecTrainConfig,
    out_dir: &Path,
) -> Result<PathBuf> {
    ensure_dir(out_dir)?;
    let dataset = load_dataset(dataset_dir)?;
    let mut patches = Vec::new();
    for ep in &dataset.train {
        for f in ep.frames.iter().step_by(cfg.frame_stride.max(1)) {
            patches.push(f.patch.mapv(|v| v as Real));
        }
    }
    let (codec, log) = train_codec(&patches, cfg)?;
    let fingerprint = manifest_fingerprint(dataset_dir)?;
    let meta = crate::codec::codec_meta(cfg, &log, &fingerprint);
    let path = out_dir.join("codec.ckpt");
    codec.save(meta, &path)?;
    let mut csv = String::from("epoch,recon_mse,swd\n");
    for (e, r, s) in &log.epochs {
        csv.push_str(&format!("{e},{r},{s}\n"));
    }
    std::fs::write(out_dir.join("codec_log.csv"), csv)
        .map_err(|e| Error::dataset(out_dir, e))?;
    Ok(path)
}

/// Pre-train the context encoder against a frozen codec; writes
/// `encoder.ckpt` and `pretext_log.csv`.
pub fn run_pretrain(
    dataset_dir: &Path,
    codec_path: &Path,
    cfg: &PretrainConfig,
    out_dir: &Path,
) -> Result<PathBuf> {
    ensure_dir(out_dir)?;
    let dataset = load_dataset(dataset_dir)?;
    let (codec, codec_meta) = Codec::load(codec_path)?;
    let outcome = pretrain(&dataset, &codec, cfg)?;
    let fingerprint = manifest_fingerprint(dataset_dir)?;
    let meta = crate::context::encoder_meta(
        cfg,
        &outcome,
        &codec_meta.content_checksum,
        &fingerprint,
    );
    let path = out_dir.join("encoder.ckpt");
    outcome.encoder.save(meta, &path)?;
    crate::context::write_pretext_log(&outcome.log, &out_dir.join("pretext_log.csv"))?;
    Ok(path)
}

/// Load the frozen pair (codec, encoder), verifying the encoder was trained
/// against exactly this codec.
pub fn load_frozen_pair(
    codec_path: &Path,
    backbone_path: &Path,
) -> Result<(Codec<Real>, CheckpointMeta, ContextEncoder<Real>, CheckpointMeta)> {
    let (codec, codec_meta) = Codec::load(codec_path)?;
    let (encoder, enc_meta) = ContextEncoder::load(backbone_path)?;
    if let Some(expect) = enc_meta.extra.get("codec_checksum") {
        if expect != &codec_meta.content_checksum {
            return Err(Error::Integrity(format!(
                "encoder {} was pre-trained against codec {expect}, but {} has checksum {}",
                backbone_path.display(),
                codec_path.display(),
                codec_meta.content_checksum
            )));
        }
    }
    Ok((codec, codec_meta, encoder, enc_meta))
}

/// Train (or for frozen PR, evaluate) one downstream task and write
/// `checkpoint.ckpt` plus `metrics_<task>_<mode>.csv` into `out_dir`.
pub fn run_train_task(
    dataset_dir: &Path,
    codec_path: Option<&Path>,
    backbone_path: Option<&Path>,
    cfg: &DownstreamConfig,
    out_dir: &Path,
) -> Result<MetricsReport> {
    ensure_dir(out_dir)?;
    let dataset = load_dataset(dataset_dir)?;
    let fingerprint = manifest_fingerprint(dataset_dir)?;
    let report = match cfg.mode {
        Mode::E2e => {
            if cfg.task == Task::Pr {
                // e2e PR is the specialized patch-prediction model
            }
            let run = downstream::train_e2e(&dataset, cfg)?;
            let meta = downstream::head_meta(cfg, &run.report, "", "", &fingerprint);
            run.model.save(meta, &out_dir.join("checkpoint.ckpt"))?;
            run.report
        }
        Mode::Frozen | Mode::Finetune => {
            let codec_path = codec_path.ok_or_else(|| {
                Error::Integrity("this mode needs a pre-trained codec checkpoint".into())
            })?;
            let backbone_path = backbone_path.ok_or_else(|| {
                Error::Integrity("this mode needs a pre-trained encoder checkpoint".into())
            })?;
            let (codec, codec_meta, encoder, enc_meta) =
                load_frozen_pair(codec_path, backbone_path)?;
            if cfg.mode == Mode::Frozen {
                if cfg.task == Task::Pr {
                    // nothing to train: the decoder head is the frozen codec
                    let start = std::time::Instant::now();
                    let (test_psnr, test_mse) = downstream::eval_pr(
                        &dataset,
                        &codec,
                        &encoder,
                        Split::Test,
                        cfg.ordering,
                        cfg.stride,
                    )?;
                    let report = MetricsReport {
                        task: cfg.task,
                        mode: cfg.mode,
                        train_mse: f64::NAN,
                        test_mse,
                        test_psnr: Some(test_psnr),
                        learnable_params: 0,
                        total_params: encoder.store.scalar_count()
                            + codec.store.scalar_count(),
                        wall_clock_s: start.elapsed().as_secs_f64(),
                        rows: vec![(0, Split::Test, test_mse, Some(test_psnr))],
                    };
                    let mut meta = downstream::head_meta(
                        cfg,
                        &report,
                        &enc_meta.content_checksum,
                        &codec_meta.content_checksum,
                        &fingerprint,
                    );
                    meta.kind = "encoder".into();
                    let store32: crate::nn::ParamStore<Real> = encoder.store.cast();
                    save_checkpoint(&store32, meta, &out_dir.join("checkpoint.ckpt"))?;
                    report
                } else {
                    let run = downstream::train_frozen_head(&dataset, &codec, &encoder, cfg)?;
                    let meta = downstream::head_meta(
                        cfg,
                        &run.report,
                        &enc_meta.content_checksum,
                        &codec_meta.content_checksum,
                        &fingerprint,
                    );
                    save_checkpoint(&run.head_store, meta, &out_dir.join("checkpoint.ckpt"))?;
                    run.report
                }
            } else {
                let run = downstream::train_finetune(&dataset, &codec, &encoder, cfg)?;
                let meta = downstream::head_meta(
                    cfg,
                    &run.report,
                    &enc_meta.content_checksum,
                    &codec_meta.content_checksum,
                    &fingerprint,
                );
                save_checkpoint(&run.store, meta, &out_dir.join("checkpoint.ckpt"))?;
                run.report
            }
        }
    };
    let with_psnr = cfg.task == Task::Pr;
    downstream::write_metrics_csv(
        &report.rows,
        with_psnr,
        &out_dir.join(format!("metrics_{}_{}.csv", cfg.task.name(), cfg.mode.name())),
    )?;
    println!(
        "{} {} done in {:.1}s: train {:.5}, test {:.5}{}",
        cfg.task.name(),
        cfg.mode.name(),
        report.wall_clock_s,
        report.train_mse,
        report.test_mse,
        report
            .test_psnr
            .map(|p| format!(", psnr {p:.2} dB"))
            .unwrap_or_default()
    );
    Ok(report)
}

/// Build the mean-baseline checkpoint for a task over a split.
pub fn run_mean_baseline(
    dataset_dir: &Path,
    task: Task,
    split: Split,
    stride: usize,
    out_dir: &Path,
) -> Result<PathBuf> {
    ensure_dir(out_dir)?;
    let dataset = load_dataset(dataset_dir)?;
    let (store, mut meta) = downstream::mean_predictor(&dataset, task, split, stride);
    meta.data_fingerprint = manifest_fingerprint(dataset_dir)?;
    let path = out_dir.join("checkpoint.ckpt");
    save_checkpoint(&store, meta, &path)?;
    Ok(path)
}

/// Run the requested ablation and write its CSV and text table.
pub fn run_ablate(
    dataset_dir: &Path,
    codec_path: &Path,
    cfg: &AblationConfig,
    out_dir: &Path,
) -> Result<Vec<ablate::ArmMetrics>> {
    ensure_dir(out_dir)?;
    let dataset = load_dataset(dataset_dir)?;
    let (codec, _) = Codec::load(codec_path)?;
    let arms = run_ablation(&dataset, &codec, cfg)?;
    let name = match cfg.which {
        AblationKind::Masking => "ablation_masking",
        AblationKind::Ordering => "ablation_ordering",
    };
    std::fs::write(out_dir.join(format!("{name}.csv")), ablate::ablation_csv(&arms))
        .map_err(|e| Error::dataset(out_dir, e))?;
    std::fs::write(
        out_dir.join(format!("{name}.txt")),
        ablate::ablation_table(cfg.which, &arms),
    )
    .map_err(|e| Error::dataset(out_dir, e))?;
    Ok(arms)
}

/// Closed-loop BC evaluation over several map seeds; writes one
/// `rollout_<seed>.json` each plus a summary.
pub fn run_rollouts(
    policy: &BcPolicy,
    map_seeds: &[u64],
    terrain: &crate::sim::terrain::TerrainConfig,
    cfg: &RolloutConfig,
    out_dir: &Path,
) -> Result<RolloutSummary> {
    ensure_dir(out_dir)?;
    let mut results = Vec::new();
    for &seed in map_seeds {
        let map = crate::sim::terrain::generate_terrain::<f64>(seed, terrain)?;
        let r = rollout_bc(policy, &map, cfg, seed)?;
        std::fs::write(
            out_dir.join(format!("rollout_{seed}.json")),
            serde_json::to_string_pretty(&r)?,
        )
        .map_err(|e| Error::dataset(out_dir, e))?;
        results.push(r);
    }
    let summary = rollout::summarize(&results);
    std::fs::write(
        out_dir.join("rollout_summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )
    .map_err(|e| Error::dataset(out_dir, e))?;
    std::fs::write(
        out_dir.join("rollout_summary.txt"),
        rollout::summary_table(&[("bc".to_string(), summary.clone())]),
    )
    .map_err(|e| Error::dataset(out_dir, e))?;
    Ok(summary)
}

/// Load the pieces of a goal-conditioned BC policy from checkpoints.
pub fn load_bc_policy(
    codec_path: &Path,
    backbone_path: &Path,
    head_path: &Path,
) -> Result<BcPolicy> {
    let (codec, codec_meta, encoder, _) = load_frozen_pair(codec_path, backbone_path)?;
    let (loaded, head_meta) = crate::checkpoint::load_checkpoint(head_path)?;
    if head_meta.kind != "head" {
        return Err(Error::Checkpoint(format!(
            "rollout needs a frozen bc head checkpoint, found {}",
            head_meta.kind
        )));
    }
    let task: Task = head_meta
        .extra
        .get("task")
        .ok_or_else(|| Error::Checkpoint("head checkpoint records no task".into()))?
        .parse()?;
    if task != Task::Bc {
        return Err(Error::Config(format!(
            "rollout needs a bc head, found {}",
            task.name()
        )));
    }
    if let Some(expect) = head_meta.extra.get("codec_checksum") {
        if expect != &codec_meta.content_checksum {
            return Err(Error::Integrity(
                "bc head was trained against a different codec".into(),
            ));
        }
    }
    let mut head_store = crate::nn::ParamStore::new();
    let head = crate::heads::TaskHead::new(&mut head_store, 0, Task::Bc)?;
    crate::checkpoint::assign_params(&mut head_store, &loaded)?;
    let ordering = head_meta
        .extra
        .get("ordering")
        .and_then(|s| serde_json::from_str(s).ok())
        .unwrap_or(crate::context::TokenOrdering::Sequential);
    Ok(BcPolicy {
        codec,
        encoder,
        head_store,
        head,
        ordering,
        mode: Mode::Frozen,
    })
}

/// Dataset target variances per task, the predict-the-mean baselines.
pub fn target_variances(
    dataset: &LoadedDataset,
    split: Split,
    stride: usize,
) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for task in [Task::Fkd, Task::Ikd, Task::Bc] {
        let episodes = dataset.episodes(split);
        let refs = downstream::task_windows(task, episodes, stride);
        let targets = downstream::task_targets(task, episodes, &refs);
        let means = targets::column_means(&targets);
        out.insert(
            task.name().to_string(),
            targets::mse_against_constant(&targets, &means),
        );
    }
    out
}
