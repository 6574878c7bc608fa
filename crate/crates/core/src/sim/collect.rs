//! Scripted teleoperation and dataset collection.
//!
//! Episodes drive waypoint-to-waypoint across the rock bed with seeded action
//! noise, standing in for human teleoperation. Poses, actions, and patches
//! are quantized through f32 at every frame boundary so the stored `.vtb`
//! stream losslessly represents the simulator state: re-stepping a stored
//! frame reproduces the stored successor bit for bit.

use crate::error::{Error, Result};
use crate::rng::{child_seed, substream};
use crate::sim::episode::{write_vtb, Episode, Frame, MIN_FRAMES};
use crate::sim::geometry::{quantize_action, quantize_pose, wrap_angle, Action, Pose};
use crate::sim::heightmap::HeightMap;
use crate::sim::patch::{extract_patch, PatchConfig};
use crate::sim::terrain::{generate_terrain, TerrainConfig};
use crate::sim::vehicle::{settle, step_vehicle, StepStatus, VehicleConfig};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    /// Terrain seeds; the split holds out whole seeds, so test terrain is unseen.
    pub terrain_seeds: Vec<u64>,
    /// Train fraction numerator and denominator-complement, e.g. (9, 1).
    pub split: (u32, u32),
    pub episodes_per_seed: usize,
    pub steps_per_episode: usize,
    pub dt: f64,
    pub seed: u64,
    pub terrain: TerrainConfig,
    pub vehicle: VehicleConfig,
    pub patch: PatchConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            terrain_seeds: (0..10).collect(),
            split: (9, 1),
            episodes_per_seed: 4,
            steps_per_episode: 80,
            dt: 0.1,
            seed: 0,
            terrain: TerrainConfig::default(),
            vehicle: VehicleConfig::default(),
            patch: PatchConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.terrain.validate()?;
        if self.steps_per_episode < MIN_FRAMES {
            return Err(Error::Config(format!(
                "steps_per_episode must be >= {MIN_FRAMES} (one window plus a target), got {}",
                self.steps_per_episode
            )));
        }
        if self.terrain_seeds.len() < 2 {
            return Err(Error::Config("need at least 2 terrain seeds to split".into()));
        }
        if self.episodes_per_seed == 0 {
            return Err(Error::Config("episodes_per_seed must be positive".into()));
        }
        if self.split.0 == 0 || self.split.1 == 0 {
            return Err(Error::Config("split parts must be positive".into()));
        }
        if self.dt <= 0.0 {
            return Err(Error::Config("dt must be positive".into()));
        }
        Ok(())
    }

    /// Disjoint seed split; the last seeds are held out for testing.
    pub fn split_seeds(&self) -> (Vec<u64>, Vec<u64>) {
        let n = self.terrain_seeds.len();
        let test_frac = self.split.1 as f64 / (self.split.0 + self.split.1) as f64;
        let n_test = ((n as f64 * test_frac).round() as usize).clamp(1, n - 1);
        let train = self.terrain_seeds[..n - n_test].to_vec();
        let test = self.terrain_seeds[n - n_test..].to_vec();
        (train, test)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestCounts {
    pub train_episodes: usize,
    pub test_episodes: usize,
    pub frames_per_episode: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dt: f64,
    pub global_seed: u64,
    pub train_seeds: Vec<u64>,
    pub test_seeds: Vec<u64>,
    pub episodes_per_seed: usize,
    pub counts: ManifestCounts,
    pub terrain: TerrainConfig,
    pub vehicle: VehicleConfig,
    pub patch: PatchConfig,
}

impl Manifest {
    pub fn episode_file(seed: u64, idx: usize) -> String {
        format!("ep_{seed}_{idx}.vtb")
    }

    pub fn load(dir: &Path) -> Result<Manifest> {
        let path = dir.join("manifest.json");
        let bytes = std::fs::read(&path).map_err(|e| Error::dataset(&path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// Waypoint-seeking proportional controller with seeded noise.
struct TeleopPolicy {
    waypoint: (f64, f64),
    safe_lo: (f64, f64),
    safe_hi: (f64, f64),
    stuck_streak: usize,
    v_max: f64,
    omega_max: f64,
}

impl TeleopPolicy {
    fn new(map_w: f64, map_h: f64, margin: f64, v_max: f64, omega_max: f64) -> Self {
        TeleopPolicy {
            waypoint: (0.0, 0.0),
            safe_lo: (margin, margin),
            safe_hi: (map_w - margin, map_h - margin),
            stuck_streak: 0,
            v_max,
            omega_max,
        }
    }

    fn sample_waypoint(&mut self, rng: &mut ChaCha8Rng, toward_far_side: bool) {
        let x = if toward_far_side {
            rng.gen_range((self.safe_lo.0 + self.safe_hi.0) * 0.5..self.safe_hi.0)
        } else {
            rng.gen_range(self.safe_lo.0..(self.safe_lo.0 + self.safe_hi.0) * 0.5)
        };
        let y = rng.gen_range(self.safe_lo.1..self.safe_hi.1);
        self.waypoint = (x, y);
    }

    fn note_status(&mut self, status: StepStatus) {
        if status == StepStatus::Stuck {
            self.stuck_streak += 1;
        } else {
            self.stuck_streak = 0;
        }
    }

    fn act(&mut self, pose: &Pose<f64>, dt: f64, rng: &mut ChaCha8Rng) -> Action<f64> {
        let dx = self.waypoint.0 - pose.x;
        let dy = self.waypoint.1 - pose.y;
        if (dx * dx + dy * dy).sqrt() < 0.25 || self.stuck_streak > 4 {
            let far = pose.x < (self.safe_lo.0 + self.safe_hi.0) * 0.5;
            self.sample_waypoint(rng, far);
            self.stuck_streak = 0;
        }
        let dx = self.waypoint.0 - pose.x;
        let dy = self.waypoint.1 - pose.y;
        let err = wrap_angle(dy.atan2(dx) - pose.yaw);
        let mut omega = (2.5 * err).clamp(-self.omega_max, self.omega_max);
        let mut v = if err.abs() < std::f64::consts::FRAC_PI_2 {
            self.v_max * err.cos().max(0.2)
        } else {
            0.1 * self.v_max
        };
        // teleoperation-like jitter
        v *= 1.0 + rng.gen_range(-0.1..=0.1);
        omega += rng.gen_range(-0.1..=0.1);
        v = v.clamp(-self.v_max, self.v_max);
        omega = omega.clamp(-self.omega_max, self.omega_max);

        // refuse steps that would drag the patch footprint off the map
        let nx = pose.x + v * pose.yaw.cos() * dt;
        let ny = pose.y + v * pose.yaw.sin() * dt;
        if nx < self.safe_lo.0 || nx > self.safe_hi.0 || ny < self.safe_lo.1 || ny > self.safe_hi.1
        {
            v = 0.0;
        }
        Action::new(v, omega)
    }
}

/// Margin keeping the rotated patch footprint inside the map.
pub fn safe_margin(patch: &PatchConfig) -> f64 {
    patch.footprint_m * std::f64::consts::SQRT_2 / 2.0 + 0.05
}

/// Roll one scripted episode on the given terrain. Deterministic per
/// `episode_seed`.
pub fn collect_episode(
    map: &HeightMap<f64>,
    episode_seed: u64,
    cfg: &DatasetConfig,
) -> Result<Episode> {
    let mut rng = substream(episode_seed, "teleop");
    let margin = safe_margin(&cfg.patch);
    let w = map.width_m();
    let h = map.height_m();
    let mut policy = TeleopPolicy::new(w, h, margin, cfg.vehicle.v_max, cfg.vehicle.omega_max);

    let start_y = rng.gen_range(margin + 0.05..h - margin - 0.05);
    let start_yaw = rng.gen_range(-0.3..0.3);
    let mut pose = quantize_pose(settle(map, margin + 0.05, start_y, start_yaw, &cfg.vehicle)?);
    policy.sample_waypoint(&mut rng, true);

    let mut frames = Vec::with_capacity(cfg.steps_per_episode);
    for _ in 0..cfg.steps_per_episode {
        let patch = extract_patch(map, &pose, &cfg.patch)?;
        let action = quantize_action(policy.act(&pose, cfg.dt, &mut rng));
        frames.push(Frame {
            patch: patch.values.mapv(|v| v as f32),
            action: [action.linear as f32, action.angular as f32],
            pose: pose.to_array().map(|v| v as f32),
        });
        let (next, status) = step_vehicle(map, &pose, &action, cfg.dt, &cfg.vehicle)?;
        policy.note_status(status);
        pose = quantize_pose(next);
    }
    let episode = Episode {
        dt: cfg.dt as f32,
        heightmap_seed: map.seed,
        frames,
    };
    episode.validate()?;
    Ok(episode)
}

/// Generate terrains, roll episodes (in parallel; each independently seeded),
/// and write the dataset directory: `manifest.json` plus one `.vtb` per
/// episode. Output is byte-identical across reruns of the same config.
pub fn collect_dataset(cfg: &DatasetConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::dataset(out, e))?;
    let (train_seeds, test_seeds) = cfg.split_seeds();

    let jobs: Vec<(u64, usize)> = cfg
        .terrain_seeds
        .iter()
        .flat_map(|&s| (0..cfg.episodes_per_seed).map(move |i| (s, i)))
        .collect();
    let results: Vec<Result<()>> = jobs
        .par_iter()
        .map(|&(terrain_seed, idx)| {
            let map = generate_terrain::<f64>(terrain_seed, &cfg.terrain)?;
            let ep_seed = child_seed(cfg.seed, &format!("episode-{terrain_seed}"), idx as u64);
            let episode = collect_episode(&map, ep_seed, cfg)?;
            write_vtb(&out.join(Manifest::episode_file(terrain_seed, idx)), &episode)
        })
        .collect();
    for r in results {
        r?;
    }

    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        dt: cfg.dt,
        global_seed: cfg.seed,
        train_seeds: train_seeds.clone(),
        test_seeds: test_seeds.clone(),
        episodes_per_seed: cfg.episodes_per_seed,
        counts: ManifestCounts {
            train_episodes: train_seeds.len() * cfg.episodes_per_seed,
            test_episodes: test_seeds.len() * cfg.episodes_per_seed,
            frames_per_episode: cfg.steps_per_episode,
        },
        terrain: cfg.terrain.clone(),
        vehicle: cfg.vehicle.clone(),
        patch: cfg.patch.clone(),
    };
    let path = out.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, json).map_err(|e| Error::dataset(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> DatasetConfig {
        DatasetConfig {
            terrain_seeds: (0..10).collect(),
            episodes_per_seed: 1,
            steps_per_episode: 24,
            ..Default::default()
        }
    }

    #[test]
    fn split_nine_to_one() {
        let cfg = small_cfg();
        let (train, test) = cfg.split_seeds();
        assert_eq!(train.len(), 9);
        assert_eq!(test.len(), 1);
        assert!(train.iter().all(|s| !test.contains(s)));
    }

    #[test]
    fn short_episode_config_rejected() {
        let cfg = DatasetConfig {
            steps_per_episode: 20,
            ..small_cfg()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn restepping_reproduces_stored_poses_exactly() {
        let cfg = small_cfg();
        let map = generate_terrain::<f64>(4, &cfg.terrain).unwrap();
        let ep = collect_episode(&map, 77, &cfg).unwrap();
        for pair in ep.frames.windows(2) {
            let pose = Pose::from_array(pair[0].pose.map(|v| v as f64));
            let action = Action::from_array(pair[0].action.map(|v| v as f64));
            let (next, _) =
                step_vehicle(&map, &pose, &action, cfg.dt, &cfg.vehicle).unwrap();
            let stored = pair[1].pose;
            let requantized = quantize_pose(next).to_array().map(|v| v as f32);
            assert_eq!(stored, requantized);
        }
    }

    #[test]
    fn episode_patches_match_stored_poses() {
        let cfg = small_cfg();
        let map = generate_terrain::<f64>(4, &cfg.terrain).unwrap();
        let ep = collect_episode(&map, 78, &cfg).unwrap();
        for f in &ep.frames {
            let pose = Pose::from_array(f.pose.map(|v| v as f64));
            let patch = extract_patch(&map, &pose, &cfg.patch).unwrap();
            let requantized = patch.values.mapv(|v| v as f32);
            assert_eq!(f.patch, requantized);
        }
    }

    #[test]
    fn dataset_directory_is_reproducible() {
        use sha2::{Digest, Sha256};
        let cfg = DatasetConfig {
            terrain_seeds: vec![0, 1, 2],
            episodes_per_seed: 1,
            steps_per_episode: 24,
            ..Default::default()
        };
        let hash_dir = |dir: &Path| {
            let mut names: Vec<_> = std::fs::read_dir(dir)
                .unwrap()
                .map(|e| e.unwrap().file_name().into_string().unwrap())
                .collect();
            names.sort();
            let mut hasher = Sha256::new();
            for n in &names {
                hasher.update(n.as_bytes());
                hasher.update(std::fs::read(dir.join(n)).unwrap());
            }
            format!("{:x}", hasher.finalize())
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        collect_dataset(&cfg, d1.path()).unwrap();
        collect_dataset(&cfg, d2.path()).unwrap();
        assert_eq!(hash_dir(d1.path()), hash_dir(d2.path()));
    }

    #[test]
    fn flat_terrain_keeps_attitude_constant() {
        let cfg = DatasetConfig {
            terrain: TerrainConfig {
                roughness: 0.0,
                ..Default::default()
            },
            ..small_cfg()
        };
        let map = generate_terrain::<f64>(1, &cfg.terrain).unwrap();
        let ep = collect_episode(&map, 5, &cfg).unwrap();
        for f in &ep.frames {
            assert_eq!(f.pose[2], 0.0);
            assert_eq!(f.pose[3], 0.0);
            assert_eq!(f.pose[4], 0.0);
        }
    }
}
