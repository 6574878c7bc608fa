//! Supervision targets shared by head and end-to-end training.

use crate::data::WindowRef;
use crate::scalar::Scalar;
use crate::sim::episode::Episode;
use crate::sim::geometry::Pose;
use ndarray::Array2;

/// Hindsight goal horizon: the pose this many steps ahead (clamped to the
/// episode end) stands in for the teleoperator's intent.
pub const GOAL_HORIZON: usize = 20;

/// Pose delta t -> t+1 expressed in the frame of pose t.
pub fn pose_delta(episode: &Episode, t: usize) -> [f64; 6] {
    let a = Pose::from_array(episode.frames[t].pose.map(|v| v as f64));
    let b = Pose::from_array(episode.frames[t + 1].pose.map(|v| v as f64));
    b.relative_to(&a).to_array()
}

/// Relative goal: translation of the pose `GOAL_HORIZON` steps ahead in the
/// frame of pose t.
pub fn hindsight_goal(episode: &Episode, t: usize) -> [f64; 3] {
    let a = Pose::from_array(episode.frames[t].pose.map(|v| v as f64));
    let gi = (t + GOAL_HORIZON).min(episode.frames.len() - 1);
    let g = episode.frames[gi].pose;
    a.world_to_body([g[0] as f64, g[1] as f64, g[2] as f64])
}

pub fn fkd_targets<S: Scalar>(episodes: &[Episode], refs: &[WindowRef]) -> Array2<S> {
    let mut out = Array2::zeros((refs.len(), 6));
    for (i, r) in refs.iter().enumerate() {
        let d = pose_delta(&episodes[r.episode], r.end);
        for (k, v) in d.into_iter().enumerate() {
            out[[i, k]] = S::lit(v);
        }
    }
    out
}

/// The action taken at the window's last frame (not part of a control window).
pub fn action_targets<S: Scalar>(episodes: &[Episode], refs: &[WindowRef]) -> Array2<S> {
    let mut out = Array2::zeros((refs.len(), 2));
    for (i, r) in refs.iter().enumerate() {
        let a = episodes[r.episode].frames[r.end].action;
        out[[i, 0]] = S::lit(a[0] as f64);
        out[[i, 1]] = S::lit(a[1] as f64);
    }
    out
}

pub fn ikd_aux<S: Scalar>(episodes: &[Episode], refs: &[WindowRef]) -> Array2<S> {
    fkd_targets(episodes, refs)
}

pub fn bc_aux<S: Scalar>(episodes: &[Episode], refs: &[WindowRef]) -> Array2<S> {
    let mut out = Array2::zeros((refs.len(), 3));
    for (i, r) in refs.iter().enumerate() {
        let g = hindsight_goal(&episodes[r.episode], r.end);
        for (k, v) in g.into_iter().enumerate() {
            out[[i, k]] = S::lit(v);
        }
    }
    out
}

/// Next patch flattened row-major, the patch-prediction target.
pub fn next_patch_targets<S: Scalar>(episodes: &[Episode], refs: &[WindowRef]) -> Array2<S> {
    let n = crate::sim::patch::PATCH_SIZE * crate::sim::patch::PATCH_SIZE;
    let mut out = Array2::zeros((refs.len(), n));
    for (i, r) in refs.iter().enumerate() {
        for (k, v) in episodes[r.episode].frames[r.end + 1].patch.iter().enumerate() {
            out[[i, k]] = S::lit(*v as f64);
        }
    }
    out
}

/// Per-dimension mean of rows, the predict-the-mean baseline's weights.
pub fn column_means<S: Scalar>(rows: &Array2<S>) -> Vec<S> {
    let n = rows.nrows().max(1);
    (0..rows.ncols())
        .map(|c| {
            let sum: S = (0..rows.nrows()).map(|r| rows[[r, c]]).sum();
            sum / S::lit(n as f64)
        })
        .collect()
}

/// MSE of predicting `means` for every row: the target variance when means
/// come from the same rows.
pub fn mse_against_constant<S: Scalar>(rows: &Array2<S>, means: &[S]) -> f64 {
    let mut acc = 0.0;
    for r in 0..rows.nrows() {
        for c in 0..rows.ncols() {
            let d = (rows[[r, c]] - means[c]).to_f64();
            acc += d * d;
        }
    }
    acc / (rows.nrows() * rows.ncols()).max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::collect::{collect_episode, DatasetConfig};
    use crate::sim::terrain::generate_terrain;

    #[test]
    fn flat_stationary_delta_is_zero() {
        let mut ep = {
            let cfg = DatasetConfig {
                steps_per_episode: 24,
                ..Default::default()
            };
            let map = generate_terrain::<f64>(1, &cfg.terrain).unwrap();
            collect_episode(&map, 2, &cfg).unwrap()
        };
        // force two identical consecutive poses
        let p = ep.frames[5].pose;
        ep.frames[6].pose = p;
        let d = pose_delta(&ep, 5);
        for v in d {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn mean_baseline_equals_variance() {
        let rows = Array2::from_shape_fn((50, 3), |(r, c)| ((r * 7 + c * 3) % 11) as f64 * 0.1);
        let means = column_means(&rows);
        let mse = mse_against_constant(&rows, &means);
        // closed-form variance oracle
        let mut var = 0.0;
        for c in 0..3 {
            let mu: f64 = (0..50).map(|r| rows[[r, c]]).sum::<f64>() / 50.0;
            var += (0..50).map(|r| (rows[[r, c]] - mu).powi(2)).sum::<f64>() / 50.0;
        }
        var /= 3.0;
        assert!((mse - var).abs() < 1e-12);
    }
}
