//! Layered run configuration: built-in defaults, overridden by a plain-text
//! key = value file with dotted sections, overridden by command-line
//! `key=value` pairs. Unknown keys are rejected; the full configuration is
//! echoed into every output directory and an echo reloads to an identical
//! configuration.

use crate::codec::CodecTrainConfig;
use crate::context::{PretrainConfig, TokenOrdering};
use crate::error::{Error, Result};
use crate::harness::ablate::AblationKind;
use crate::harness::downstream::{DownstreamConfig, Mode};
use crate::harness::rollout::RolloutConfig;
use crate::heads::Task;
use crate::rng::child_seed;
use crate::sim::collect::DatasetConfig;
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct RolloutRunConfig {
    pub num_seeds: usize,
    /// Terrain roughness for rollout maps; 0 gives the flat sanity setting.
    pub roughness: f64,
    pub cfg: RolloutConfig,
}

impl Default for RolloutRunConfig {
    fn default() -> Self {
        RolloutRunConfig {
            num_seeds: 10,
            roughness: 1.0,
            cfg: RolloutConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    /// Terrain seed count; actual seeds are derived from the global seed.
    pub dataset_num_seeds: usize,
    pub codec: CodecTrainConfig,
    pub pretrain: PretrainConfig,
    pub downstream: DownstreamConfig,
    pub rollout: RolloutRunConfig,
    pub ablate_which: AblationKind,
    pub ablate_num_seeds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let out_dir = std::env::var("VERTIKIT_OUT")
            .map(PathBuf::from)
            .unwrap_or_else(|_| PathBuf::from("out"));
        RunConfig {
            seed: 0,
            out_dir,
            dataset: DatasetConfig::default(),
            dataset_num_seeds: 10,
            codec: CodecTrainConfig::default(),
            pretrain: PretrainConfig::default(),
            downstream: DownstreamConfig::default(),
            rollout: RolloutRunConfig::default(),
            ablate_which: AblationKind::Masking,
            ablate_num_seeds: 3,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("key {key}: cannot parse value {value:?}")))
}

fn parse_split(key: &str, value: &str) -> Result<(u32, u32)> {
    let parts: Vec<&str> = value.trim().split(':').collect();
    if parts.len() != 2 {
        return Err(Error::Config(format!(
            "key {key}: split must look like 9:1, got {value:?}"
        )));
    }
    Ok((parse(key, parts[0])?, parse(key, parts[1])?))
}

impl RunConfig {
    /// Apply one dotted-key assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),

            "dataset.num_seeds" => self.dataset_num_seeds = parse(key, v)?,
            "dataset.split" => self.dataset.split = parse_split(key, v)?,
            "dataset.episodes_per_seed" => self.dataset.episodes_per_seed = parse(key, v)?,
            "dataset.steps_per_episode" => self.dataset.steps_per_episode = parse(key, v)?,
            "dataset.dt" => self.dataset.dt = parse(key, v)?,

            "terrain.width_m" => self.dataset.terrain.width_m = parse(key, v)?,
            "terrain.height_m" => self.dataset.terrain.height_m = parse(key, v)?,
            "terrain.resolution" => self.dataset.terrain.resolution = parse(key, v)?,
            "terrain.max_height" => self.dataset.terrain.max_height = parse(key, v)?,
            "terrain.roughness" => self.dataset.terrain.roughness = parse(key, v)?,
            "terrain.rock_density" => self.dataset.terrain.rock_density = parse(key, v)?,
            "terrain.apron_m" => self.dataset.terrain.apron_m = parse(key, v)?,
            "terrain.rock_radius_min" => self.dataset.terrain.rock_radius_min = parse(key, v)?,
            "terrain.rock_radius_max" => self.dataset.terrain.rock_radius_max = parse(key, v)?,

            "vehicle.wheelbase" => self.dataset.vehicle.wheelbase = parse(key, v)?,
            "vehicle.track" => self.dataset.vehicle.track = parse(key, v)?,
            "vehicle.wheel_radius" => self.dataset.vehicle.wheel_radius = parse(key, v)?,
            "vehicle.tip_threshold" => self.dataset.vehicle.tip_threshold = parse(key, v)?,
            "vehicle.v_max" => self.dataset.vehicle.v_max = parse(key, v)?,
            "vehicle.omega_max" => self.dataset.vehicle.omega_max = parse(key, v)?,

            "patch.footprint_m" => self.dataset.patch.footprint_m = parse(key, v)?,

            "codec.epochs" => self.codec.epochs = parse(key, v)?,
            "codec.batch_size" => self.codec.batch_size = parse(key, v)?,
            "codec.lr" => self.codec.lr = parse(key, v)?,
            "codec.weight_decay" => self.codec.weight_decay = parse(key, v)?,
            "codec.sw_weight" => self.codec.sw_weight = parse(key, v)?,
            "codec.num_projections" => self.codec.num_projections = parse(key, v)?,
            "codec.frame_stride" => self.codec.frame_stride = parse(key, v)?,

            "pretrain.epochs" => self.pretrain.epochs = parse(key, v)?,
            "pretrain.batch_size" => self.pretrain.batch_size = parse(key, v)?,
            "pretrain.lr" => self.pretrain.lr = parse(key, v)?,
            "pretrain.weight_decay" => self.pretrain.weight_decay = parse(key, v)?,
            "pretrain.mask_ratio" => self.pretrain.mask_ratio = parse(key, v)?,
            "pretrain.ordering" => self.pretrain.ordering = parse(key, v)?,
            "pretrain.lambda_next" => self.pretrain.lambda_next = parse(key, v)?,
            "pretrain.lambda_mask" => self.pretrain.lambda_mask = parse(key, v)?,
            "pretrain.stride" => self.pretrain.stride = parse(key, v)?,

            "downstream.task" => self.downstream.task = parse(key, v)?,
            "downstream.mode" => self.downstream.mode = parse(key, v)?,
            "downstream.epochs" => self.downstream.epochs = parse(key, v)?,
            "downstream.batch_size" => self.downstream.batch_size = parse(key, v)?,
            "downstream.lr" => self.downstream.lr = parse(key, v)?,
            "downstream.weight_decay" => self.downstream.weight_decay = parse(key, v)?,
            "downstream.ordering" => self.downstream.ordering = parse(key, v)?,
            "downstream.stride" => self.downstream.stride = parse(key, v)?,

            "rollout.num_seeds" => self.rollout.num_seeds = parse(key, v)?,
            "rollout.roughness" => self.rollout.roughness = parse(key, v)?,
            "rollout.start_x" => self.rollout.cfg.start.0 = parse(key, v)?,
            "rollout.start_y" => self.rollout.cfg.start.1 = parse(key, v)?,
            "rollout.start_yaw" => self.rollout.cfg.start.2 = parse(key, v)?,
            "rollout.goal_x" => self.rollout.cfg.goal.0 = parse(key, v)?,
            "rollout.goal_y" => self.rollout.cfg.goal.1 = parse(key, v)?,
            "rollout.timeout_s" => self.rollout.cfg.timeout_s = parse(key, v)?,
            "rollout.success_radius" => self.rollout.cfg.success_radius = parse(key, v)?,

            "ablate.which" => self.ablate_which = parse(key, v)?,
            "ablate.num_seeds" => self.ablate_num_seeds = parse(key, v)?,

            other => {
                return Err(Error::Config(format!("unknown configuration key {other}")))
            }
        }
        Ok(())
    }

    /// Derived values and cross-field invariants; called once after all
    /// assignments.
    pub fn finalize(&mut self) -> Result<()> {
        // terrain seeds flow from the global seed
        self.dataset.terrain_seeds = (0..self.dataset_num_seeds)
            .map(|i| child_seed(self.seed, "terrain-seed", i as u64))
            .collect();
        self.dataset.seed = self.seed;
        self.codec.seed = self.seed;
        self.pretrain.seed = self.seed;
        self.downstream.seed = self.seed;
        // rollout maps share the vehicle/patch settings of the dataset
        self.rollout.cfg.dt = self.dataset.dt;
        self.rollout.cfg.vehicle = self.dataset.vehicle.clone();
        self.rollout.cfg.patch = self.dataset.patch.clone();

        self.dataset.validate()?;
        if !(0.0..=1.0).contains(&self.pretrain.mask_ratio) {
            return Err(Error::Config(format!(
                "key pretrain.mask_ratio: {} outside [0, 1]",
                self.pretrain.mask_ratio
            )));
        }
        self.downstream.validate()?;
        Ok(())
    }

    /// Every settable key with its current value, sorted — the config echo.
    pub fn echo(&self) -> String {
        let ordering = |o: TokenOrdering| match o {
            TokenOrdering::Sequential => "sequential",
            TokenOrdering::Interleaved => "interleaved",
        };
        let pairs: Vec<(String, String)> = vec![
            ("seed".into(), self.seed.to_string()),
            ("out_dir".into(), self.out_dir.display().to_string()),
            ("dataset.num_seeds".into(), self.dataset_num_seeds.to_string()),
            (
                "dataset.split".into(),
                format!("{}:{}", self.dataset.split.0, self.dataset.split.1),
            ),
            (
                "dataset.episodes_per_seed".into(),
                self.dataset.episodes_per_seed.to_string(),
            ),
            (
                "dataset.steps_per_episode".into(),
                self.dataset.steps_per_episode.to_string(),
            ),
            ("dataset.dt".into(), self.dataset.dt.to_string()),
            ("terrain.width_m".into(), self.dataset.terrain.width_m.to_string()),
            ("terrain.height_m".into(), self.dataset.terrain.height_m.to_string()),
            (
                "terrain.resolution".into(),
                self.dataset.terrain.resolution.to_string(),
            ),
            (
                "terrain.max_height".into(),
                self.dataset.terrain.max_height.to_string(),
            ),
            (
                "terrain.roughness".into(),
                self.dataset.terrain.roughness.to_string(),
            ),
            (
                "terrain.rock_density".into(),
                self.dataset.terrain.rock_density.to_string(),
            ),
            ("terrain.apron_m".into(), self.dataset.terrain.apron_m.to_string()),
            (
                "terrain.rock_radius_min".into(),
                self.dataset.terrain.rock_radius_min.to_string(),
            ),
            (
                "terrain.rock_radius_max".into(),
                self.dataset.terrain.rock_radius_max.to_string(),
            ),
            ("vehicle.wheelbase".into(), self.dataset.vehicle.wheelbase.to_string()),
            ("vehicle.track".into(), self.dataset.vehicle.track.to_string()),
            (
                "vehicle.wheel_radius".into(),
                self.dataset.vehicle.wheel_radius.to_string(),
            ),
            (
                "vehicle.tip_threshold".into(),
                self.dataset.vehicle.tip_threshold.to_string(),
            ),
            ("vehicle.v_max".into(), self.dataset.vehicle.v_max.to_string()),
            ("vehicle.omega_max".into(), self.dataset.vehicle.omega_max.to_string()),
            ("patch.footprint_m".into(), self.dataset.patch.footprint_m.to_string()),
            ("codec.epochs".into(), self.codec.epochs.to_string()),
            ("codec.batch_size".into(), self.codec.batch_size.to_string()),
            ("codec.lr".into(), self.codec.lr.to_string()),
            ("codec.weight_decay".into(), self.codec.weight_decay.to_string()),
            ("codec.sw_weight".into(), self.codec.sw_weight.to_string()),
            (
                "codec.num_projections".into(),
                self.codec.num_projections.to_string(),
            ),
            ("codec.frame_stride".into(), self.codec.frame_stride.to_string()),
            ("pretrain.epochs".into(), self.pretrain.epochs.to_string()),
            ("pretrain.batch_size".into(), self.pretrain.batch_size.to_string()),
            ("pretrain.lr".into(), self.pretrain.lr.to_string()),
            (
                "pretrain.weight_decay".into(),
                self.pretrain.weight_decay.to_string(),
            ),
            ("pretrain.mask_ratio".into(), self.pretrain.mask_ratio.to_string()),
            (
                "pretrain.ordering".into(),
                ordering(self.pretrain.ordering).to_string(),
            ),
            ("pretrain.lambda_next".into(), self.pretrain.lambda_next.to_string()),
            ("pretrain.lambda_mask".into(), self.pretrain.lambda_mask.to_string()),
            ("pretrain.stride".into(), self.pretrain.stride.to_string()),
            ("downstream.task".into(), self.downstream.task.name().to_string()),
            ("downstream.mode".into(), self.downstream.mode.name().to_string()),
            ("downstream.epochs".into(), self.downstream.epochs.to_string()),
            (
                "downstream.batch_size".into(),
                self.downstream.batch_size.to_string(),
            ),
            ("downstream.lr".into(), self.downstream.lr.to_string()),
            (
                "downstream.weight_decay".into(),
                self.downstream.weight_decay.to_string(),
            ),
            (
                "downstream.ordering".into(),
                ordering(self.downstream.ordering).to_string(),
            ),
            ("downstream.stride".into(), self.downstream.stride.to_string()),
            ("rollout.num_seeds".into(), self.rollout.num_seeds.to_string()),
            ("rollout.roughness".into(), self.rollout.roughness.to_string()),
            ("rollout.start_x".into(), self.rollout.cfg.start.0.to_string()),
            ("rollout.start_y".into(), self.rollout.cfg.start.1.to_string()),
            ("rollout.start_yaw".into(), self.rollout.cfg.start.2.to_string()),
            ("rollout.goal_x".into(), self.rollout.cfg.goal.0.to_string()),
            ("rollout.goal_y".into(), self.rollout.cfg.goal.1.to_string()),
            ("rollout.timeout_s".into(), self.rollout.cfg.timeout_s.to_string()),
            (
                "rollout.success_radius".into(),
                self.rollout.cfg.success_radius.to_string(),
            ),
            (
                "ablate.which".into(),
                match self.ablate_which {
                    AblationKind::Masking => "masking".to_string(),
                    AblationKind::Ordering => "ordering".to_string(),
                },
            ),
            ("ablate.num_seeds".into(), self.ablate_num_seeds.to_string()),
        ];
        let mut sorted = pairs;
        sorted.sort();
        let mut out = String::new();
        for (k, v) in sorted {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

/// Parse a config file body: `key = value` lines, `#` comments, blank lines.
pub fn parse_config_text(cfg: &mut RunConfig, text: &str) -> Result<()> {
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected key = value", lineno + 1))
        })?;
        cfg.set(key.trim(), value)?;
    }
    Ok(())
}

/// Defaults < file < overrides, then finalize and validate.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = path {
        let text = std::fs::read_to_string(p).map_err(|e| Error::dataset(p, e))?;
        parse_config_text(&mut cfg, &text)?;
    }
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    cfg.finalize()?;
    Ok(cfg)
}

/// Parse a `key=value` command-line override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} must be key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_defaults() {
        let cfg = load_config(None, &[]).unwrap();
        assert_eq!(cfg.downstream.batch_size, 32);
        assert_eq!(cfg.pretrain.mask_ratio, 0.75);
        assert_eq!(cfg.dataset.terrain_seeds.len(), 10);
    }

    #[test]
    fn precedence_file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        std::fs::write(&p, "pretrain.mask_ratio = 0.5\nseed = 3\n# comment\n").unwrap();
        let cfg = load_config(
            Some(&p),
            &[("pretrain.mask_ratio".into(), "0.9".into())],
        )
        .unwrap();
        assert_eq!(cfg.pretrain.mask_ratio, 0.9);
        assert_eq!(cfg.seed, 3);
    }

    #[test]
    fn unknown_key_and_bad_value_rejected() {
        let mut cfg = RunConfig::default();
        let err = cfg.set("pretrain.mask_rato", "0.5").unwrap_err();
        assert!(err.to_string().contains("mask_rato"));
        let err = cfg.set("pretrain.mask_ratio", "lots").unwrap_err();
        assert!(err.to_string().contains("mask_ratio"));
    }

    #[test]
    fn out_of_range_ratio_fails_finalize() {
        let cfg = load_config(None, &[("pretrain.mask_ratio".into(), "1.5".into())]);
        assert!(cfg.is_err());
    }

    #[test]
    fn echo_round_trips_identically() {
        let cfg = load_config(
            None,
            &[
                ("seed".into(), "42".into()),
                ("pretrain.mask_ratio".into(), "0.9".into()),
                ("downstream.task".into(), "bc".into()),
                ("dataset.split".into(), "4:1".into()),
            ],
        )
        .unwrap();
        let echo1 = cfg.echo();
        let mut cfg2 = RunConfig::default();
        parse_config_text(&mut cfg2, &echo1).unwrap();
        cfg2.finalize().unwrap();
        assert_eq!(echo1, cfg2.echo());
        assert_eq!(cfg2.seed, 42);
        assert_eq!(cfg2.downstream.task.name(), "bc");
    }

    #[test]
    fn large_batch_accepted_with_warning() {
        let cfg = load_config(None, &[("downstream.batch_size".into(), "512".into())]);
        assert!(cfg.is_ok());
        assert_eq!(cfg.unwrap().downstream.batch_size, 512);
    }

    #[test]
    fn seeds_flow_from_global_seed() {
        let a = load_config(None, &[("seed".into(), "1".into())]).unwrap();
        let b = load_config(None, &[("seed".into(), "2".into())]).unwrap();
        assert_ne!(a.dataset.terrain_seeds, b.dataset.terrain_seeds);
        assert_eq!(a.codec.seed, 1);
        assert_eq!(a.pretrain.seed, 1);
    }
}
