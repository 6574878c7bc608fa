//! Controlled ablations: masking ratio and token ordering. Both arms of an
//! ablation consume identical datasets and seeds; only the ablated knob
//! differs.

use crate::codec::Codec;
use crate::context::{pretrain, PretrainConfig, TokenOrdering};
use crate::data::{LoadedDataset, Split};
use crate::error::{Error, Result};
use crate::harness::downstream::{eval_pr, train_frozen_head, DownstreamConfig, Mode};
use crate::heads::Task;
use crate::Real;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationKind {
    Masking,
    Ordering,
}

impl std::str::FromStr for AblationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "masking" => Ok(AblationKind::Masking),
            "ordering" => Ok(AblationKind::Ordering),
            other => Err(Error::Config(format!("unknown ablation {other}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationConfig {
    pub which: AblationKind,
    /// Pretraining seeds; results are averaged over them.
    pub seeds: Vec<u64>,
    pub pretrain: PretrainConfig,
    pub downstream: DownstreamConfig,
}

#[derive(Debug, Clone, Serialize)]
pub struct ArmMetrics {
    pub arm: String,
    pub fkd_train: f64,
    pub fkd_test: f64,
    pub pr_test_psnr: f64,
    pub fkd_test_std: f64,
    pub pr_test_psnr_std: f64,
    pub per_seed: Vec<(u64, f64, f64, f64)>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Pretrain, train a frozen forward-model head, and evaluate patch
/// prediction for one (config, seed) arm.
pub fn run_arm(
    dataset: &LoadedDataset,
    codec: &Codec<Real>,
    pretrain_cfg: &PretrainConfig,
    downstream_cfg: &DownstreamConfig,
    seed: u64,
) -> Result<(f64, f64, f64)> {
    let pcfg = PretrainConfig {
        seed,
        ..pretrain_cfg.clone()
    };
    let outcome = pretrain(dataset, codec, &pcfg)?;
    let dcfg = DownstreamConfig {
        task: Task::Fkd,
        mode: Mode::Frozen,
        ordering: pcfg.ordering,
        seed,
        ..downstream_cfg.clone()
    };
    let run = train_frozen_head(dataset, codec, &outcome.encoder, &dcfg)?;
    let (pr_psnr, _) = eval_pr(
        dataset,
        codec,
        &outcome.encoder,
        Split::Test,
        pcfg.ordering,
        dcfg.stride,
    )?;
    Ok((run.report.train_mse, run.report.test_mse, pr_psnr))
}

/// Run every arm of the requested ablation over every seed.
pub fn run_ablation(
    dataset: &LoadedDataset,
    codec: &Codec<Real>,
    cfg: &AblationConfig,
) -> Result<Vec<ArmMetrics>> {
    let arms: Vec<(String, PretrainConfig)> = match cfg.which {
        AblationKind::Masking => [0.75, 0.90]
            .into_iter()
            .map(|ratio| {
                (
                    format!("{}%", (ratio * 100.0) as u32),
                    PretrainConfig {
                        mask_ratio: ratio,
                        ..cfg.pretrain.clone()
                    },
                )
            })
            .collect(),
        AblationKind::Ordering => [TokenOrdering::Sequential, TokenOrdering::Interleaved]
            .into_iter()
            .map(|ordering| {
                (
                    format!("{ordering:?}").to_lowercase(),
                    PretrainConfig {
                        ordering,
                        ..cfg.pretrain.clone()
                    },
                )
            })
            .collect(),
    };
    let mut out = Vec::new();
    for (name, pcfg) in arms {
        let mut per_seed = Vec::new();
        for &seed in &cfg.seeds {
            let (tr, te, pr) = run_arm(dataset, codec, &pcfg, &cfg.downstream, seed)?;
            per_seed.push((seed, tr, te, pr));
        }
        let (fkd_train, _) = mean_std(&per_seed.iter().map(|r| r.1).collect::<Vec<_>>());
        let (fkd_test, fkd_test_std) = mean_std(&per_seed.iter().map(|r| r.2).collect::<Vec<_>>());
        let (pr_psnr, pr_std) = mean_std(&per_seed.iter().map(|r| r.3).collect::<Vec<_>>());
        out.push(ArmMetrics {
            arm: name,
            fkd_train,
            fkd_test,
            pr_test_psnr: pr_psnr,
            fkd_test_std,
            pr_test_psnr_std: pr_std,
            per_seed,
        });
    }
    Ok(out)
}

/// Two-row comparison table: arms x {FKD train, FKD test, PR test}.
pub fn ablation_csv(arms: &[ArmMetrics]) -> String {
    let mut out =
        String::from("arm,fkd_train,fkd_test,fkd_test_std,pr_test_psnr,pr_test_psnr_std\n");
    for a in arms {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            a.arm, a.fkd_train, a.fkd_test, a.fkd_test_std, a.pr_test_psnr, a.pr_test_psnr_std
        ));
    }
    out
}

pub fn ablation_table(kind: AblationKind, arms: &[ArmMetrics]) -> String {
    let label = match kind {
        AblationKind::Masking => "Mask",
        AblationKind::Ordering => "Ordering",
    };
    let mut out = format!(
        "{:<14} {:>12} {:>12} {:>14}\n",
        label, "FKD train", "FKD test", "PR test (dB)"
    );
    for a in arms {
        out.push_str(&format!(
            "{:<14} {:>12.4} {:>12.4} {:>14.3}\n",
            a.arm, a.fkd_train, a.fkd_test, a.pr_test_psnr
        ));
    }
    out
}
