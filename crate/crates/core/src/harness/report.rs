//! Consolidated downstream report: parameter counts and train/test metrics
//! per mode per task, with the generalization gap (test - train).

use crate::checkpoint::load_checkpoint;
use crate::error::Result;
use crate::harness::downstream::Mode;
use crate::heads::Task;
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub train_mse: f64,
    pub test_mse: f64,
    pub test_psnr: Option<f64>,
    pub learnable: f64,
    pub total: f64,
}

/// Scan `<root>/<task>_<mode>/checkpoint.ckpt` for every task/mode pair.
/// Missing runs are reported as absent, not failures.
pub fn collect_runs(root: &Path) -> BTreeMap<(String, String), RunSummary> {
    let mut out = BTreeMap::new();
    for mode in [Mode::E2e, Mode::Frozen, Mode::Finetune] {
        for task in Task::all() {
            let dir = root.join(format!("{}_{}", task.name(), mode.name()));
            let path = dir.join("checkpoint.ckpt");
            if let Ok((_, meta)) = load_checkpoint(&path) {
                let get = |k: &str| meta.losses.get(k).copied().unwrap_or(f64::NAN);
                out.insert(
                    (task.name().to_string(), mode.name().to_string()),
                    RunSummary {
                        train_mse: get("train_mse"),
                        test_mse: get("test_mse"),
                        test_psnr: meta.losses.get("test_psnr").copied(),
                        learnable: get("learnable_params"),
                        total: get("total_params"),
                    },
                );
            }
        }
    }
    out
}

fn fmt(v: f64) -> String {
    if v.is_nan() {
        "absent".to_string()
    } else {
        format!("{v:.4}")
    }
}

fn fmt_m(v: f64) -> String {
    if v.is_nan() {
        "absent".to_string()
    } else {
        format!("{:.2}", v / 1e6)
    }
}

/// CSV with one row per mode: parameter counts, per-task train/test metrics,
/// and the test-minus-train gap.
pub fn table1_csv(runs: &BTreeMap<(String, String), RunSummary>) -> String {
    let mut out = String::from(
        "mode,learnable_m,total_m,\
         fkd_train,fkd_test,fkd_gap,ikd_train,ikd_test,ikd_gap,\
         bc_train,bc_test,bc_gap,pr_test_psnr\n",
    );
    for mode in ["e2e", "frozen", "finetune"] {
        let lookup = |task: &str| runs.get(&(task.to_string(), mode.to_string()));
        let params = ["fkd", "ikd", "bc", "pr"]
            .iter()
            .find_map(|t| lookup(t))
            .map(|r| (r.learnable, r.total))
            .unwrap_or((f64::NAN, f64::NAN));
        out.push_str(&format!("{mode},{},{}", fmt_m(params.0), fmt_m(params.1)));
        for task in ["fkd", "ikd", "bc"] {
            match lookup(task) {
                Some(r) => out.push_str(&format!(
                    ",{},{},{}",
                    fmt(r.train_mse),
                    fmt(r.test_mse),
                    fmt(r.test_mse - r.train_mse)
                )),
                None => out.push_str(",absent,absent,absent"),
            }
        }
        match lookup("pr").and_then(|r| r.test_psnr) {
            Some(p) => out.push_str(&format!(",{p:.3}\n")),
            None => out.push_str(",absent\n"),
        }
    }
    out
}

/// Human-readable text table mirroring the CSV.
pub fn table1_text(runs: &BTreeMap<(String, String), RunSummary>) -> String {
    let mut out = format!(
        "{:<10} {:>12} {:>10} | {:>22} {:>22} {:>22} {:>12}\n",
        "Mode", "Learnable(M)", "Total(M)", "FKD train/test", "IKD train/test", "BC train/test", "PR test dB"
    );
    for mode in ["e2e", "frozen", "finetune"] {
        let lookup = |task: &str| runs.get(&(task.to_string(), mode.to_string()));
        let params = ["fkd", "ikd", "bc", "pr"]
            .iter()
            .find_map(|t| lookup(t))
            .map(|r| (r.learnable, r.total))
            .unwrap_or((f64::NAN, f64::NAN));
        let cell = |task: &str| match lookup(task) {
            Some(r) => format!("{} / {}", fmt(r.train_mse), fmt(r.test_mse)),
            None => "absent".to_string(),
        };
        let pr = lookup("pr")
            .and_then(|r| r.test_psnr)
            .map(|p| format!("{p:.3}"))
            .unwrap_or_else(|| "absent".to_string());
        out.push_str(&format!(
            "{:<10} {:>12} {:>10} | {:>22} {:>22} {:>22} {:>12}\n",
            mode,
            fmt_m(params.0),
            fmt_m(params.1),
            cell("fkd"),
            cell("ikd"),
            cell("bc"),
            pr
        ));
    }
    out
}

pub fn write_table1(root: &Path, out_dir: &Path) -> Result<(String, String)> {
    let runs = collect_runs(root);
    let csv = table1_csv(&runs);
    let text = table1_text(&runs);
    std::fs::create_dir_all(out_dir).map_err(|e| crate::error::Error::dataset(out_dir, e))?;
    std::fs::write(out_dir.join("table1.csv"), &csv)
        .map_err(|e| crate::error::Error::dataset(out_dir, e))?;
    std::fs::write(out_dir.join("table1.txt"), &text)
        .map_err(|e| crate::error::Error::dataset(out_dir, e))?;
    Ok((csv, text))
}
