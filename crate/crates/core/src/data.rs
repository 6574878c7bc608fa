//! Dataset loading and window bookkeeping.
//!
//! A training sample is a 20-frame observation window plus the frame after it
//! as the prediction target. Two window flavors exist:
//!
//! * standard — frame `j` carries the action taken at `j`; used by the
//!   pretext task, forward kinodynamics, and patch prediction, whose targets
//!   live strictly after the window.
//! * control — frame `j` carries the action taken at `j - 1`, so the action
//!   a head must produce is not part of its own input; used by inverse
//!   kinodynamics and the cloned controller, and matched at rollout time.

use crate::error::{Error, Result};
use crate::sim::collect::Manifest;
use crate::sim::episode::{read_vtb, Episode};
use std::path::Path;

pub const WINDOW: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub manifest: Manifest,
    pub train: Vec<Episode>,
    pub test: Vec<Episode>,
}

impl LoadedDataset {
    pub fn episodes(&self, split: Split) -> &[Episode] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

pub fn load_dataset(dir: &Path) -> Result<LoadedDataset> {
    let manifest = Manifest::load(dir)?;
    let read_split = |seeds: &[u64]| -> Result<Vec<Episode>> {
        let mut eps = Vec::new();
        for &seed in seeds {
            for idx in 0..manifest.episodes_per_seed {
                let path = dir.join(Manifest::episode_file(seed, idx));
                eps.push(read_vtb(&path, manifest.dt as f32, seed)?);
            }
        }
        Ok(eps)
    };
    Ok(LoadedDataset {
        train: read_split(&manifest.train_seeds)?,
        test: read_split(&manifest.test_seeds)?,
        manifest,
    })
}

/// Index of one sample: episode index plus the index `t` of the last window
/// frame. The target frame `t + 1` must exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowRef {
    pub episode: usize,
    pub end: usize,
}

/// All valid windows over a split, in deterministic order.
pub fn window_index(episodes: &[Episode], stride: usize) -> Vec<WindowRef> {
    assert!(stride >= 1);
    let mut out = Vec::new();
    for (ei, ep) in episodes.iter().enumerate() {
        let n = ep.frames.len();
        if n < WINDOW + 1 {
            continue;
        }
        let mut t = WINDOW - 1;
        while t + 1 < n {
            out.push(WindowRef {
                episode: ei,
                end: t,
            });
            t += stride;
        }
    }
    out
}

/// Control windows additionally need the action of frame `start - 1`, so the
/// earliest end index shifts by one.
pub fn control_window_index(episodes: &[Episode], stride: usize) -> Vec<WindowRef> {
    let mut out = Vec::new();
    for (ei, ep) in episodes.iter().enumerate() {
        let n = ep.frames.len();
        if n < WINDOW + 2 {
            continue;
        }
        let mut t = WINDOW;
        while t + 1 < n {
            out.push(WindowRef {
                episode: ei,
                end: t,
            });
            t += stride;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::collect::{collect_dataset, DatasetConfig};

    #[test]
    fn load_round_trip_and_window_counts() {
        let cfg = DatasetConfig {
            terrain_seeds: vec![0, 1, 2],
            episodes_per_seed: 1,
            steps_per_episode: 25,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        collect_dataset(&cfg, dir.path()).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.train.len(), 2);
        assert_eq!(ds.test.len(), 1);
        // 25 frames: ends at t in [19, 23] -> 5 windows per episode
        assert_eq!(window_index(&ds.train, 1).len(), 10);
        // control windows start one later
        assert_eq!(control_window_index(&ds.train, 1).len(), 8);
    }

    #[test]
    fn window_index_skips_short_episodes() {
        let eps: Vec<Episode> = Vec::new();
        assert!(window_index(&eps, 1).is_empty());
    }
}
