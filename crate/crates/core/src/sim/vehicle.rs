//! Quasi-static vehicle oracle: planar unicycle kinematics with the body
//! settled onto the terrain by a least-squares plane fit over the four wheel
//! contacts. Deterministic, so downstream tasks have exact ground truth.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sim::geometry::{wrap_angle, Action, Pose};
use crate::sim::heightmap::HeightMap;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VehicleConfig {
    /// Longitudinal distance between axles, meters.
    pub wheelbase: f64,
    /// Lateral distance between left and right wheels, meters.
    pub track: f64,
    pub wheel_radius: f64,
    /// Rollover threshold on |roll| and |pitch|, radians.
    pub tip_threshold: f64,
    pub v_max: f64,
    pub omega_max: f64,
}

impl Default for VehicleConfig {
    fn default() -> Self {
        VehicleConfig {
            wheelbase: 0.25,
            track: 0.18,
            wheel_radius: 0.08,
            tip_threshold: 0.52,
            v_max: 1.0,
            omega_max: 1.57,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepStatus {
    Ok,
    Stuck,
    Rollover,
}

impl VehicleConfig {
    /// Wheel contact offsets in the body frame: FL, FR, RL, RR.
    pub fn wheel_offsets(&self) -> [(f64, f64); 4] {
        let lx = self.wheelbase / 2.0;
        let ly = self.track / 2.0;
        [(lx, ly), (lx, -ly), (-lx, ly), (-lx, -ly)]
    }
}

/// Terrain heights under the four wheels for a planar pose (x, y, yaw).
fn wheel_heights<S: Scalar>(
    map: &HeightMap<S>,
    x: S,
    y: S,
    yaw: S,
    cfg: &VehicleConfig,
) -> Result<[S; 4]> {
    let (cy, sy) = (yaw.cos(), yaw.sin());
    let mut h = [S::zero(); 4];
    for (i, (bx, by)) in cfg.wheel_offsets().into_iter().enumerate() {
        let bx = S::lit(bx);
        let by = S::lit(by);
        let wx = x + bx * cy - by * sy;
        let wy = y + bx * sy + by * cy;
        h[i] = map.sample(wx, wy)?;
    }
    Ok(h)
}

/// Settle the body on the terrain: z from the fitted plane center, pitch and
/// roll from the plane slopes along the body axes.
///
/// The symmetric wheel layout makes the least-squares fit closed-form: the
/// design columns (1, bx, by) are orthogonal.
pub fn settle<S: Scalar>(
    map: &HeightMap<S>,
    x: S,
    y: S,
    yaw: S,
    cfg: &VehicleConfig,
) -> Result<Pose<S>> {
    let h = wheel_heights(map, x, y, yaw, cfg)?;
    let four = S::lit(4.0);
    let lx = S::lit(cfg.wheelbase / 2.0);
    let ly = S::lit(cfg.track / 2.0);
    let z = (h[0] + h[1] + h[2] + h[3]) / four;
    // slope along +body-x: front minus rear
    let a = ((h[0] + h[1]) - (h[2] + h[3])) / (four * lx);
    // slope along +body-y: left minus right
    let b = ((h[0] + h[2]) - (h[1] + h[3])) / (four * ly);
    let pitch = a.atan();
    let roll = b.atan();
    Ok(Pose::new(x, y, z, roll, pitch, yaw))
}

/// Advance one timestep. Returns the next pose and a status flag:
/// `Stuck` leaves the pose unchanged (a wheel faced a step taller than its
/// radius), `Rollover` advances with the tipped attitude.
pub fn step_vehicle<S: Scalar>(
    map: &HeightMap<S>,
    pose: &Pose<S>,
    action: &Action<S>,
    dt: S,
    cfg: &VehicleConfig,
) -> Result<(Pose<S>, StepStatus)> {
    if dt <= S::zero() {
        return Err(Error::Config("dt must be positive".into()));
    }
    if !map.contains(pose.x, pose.y) {
        return Err(Error::OutOfBounds(format!(
            "pose ({}, {}) outside map",
            pose.x, pose.y
        )));
    }
    let nx = pose.x + action.linear * pose.yaw.cos() * dt;
    let ny = pose.y + action.linear * pose.yaw.sin() * dt;
    let nyaw = wrap_angle(pose.yaw + action.angular * dt);

    let current = wheel_heights(map, pose.x, pose.y, pose.yaw, cfg)?;
    let next = wheel_heights(map, nx, ny, nyaw, cfg)?;
    let radius = S::lit(cfg.wheel_radius);
    for i in 0..4 {
        if next[i] - current[i] > radius {
            return Ok((*pose, StepStatus::Stuck));
        }
    }

    let settled = settle(map, nx, ny, nyaw, cfg)?;
    let tip = S::lit(cfg.tip_threshold);
    let status = if settled.roll.abs() > tip || settled.pitch.abs() > tip {
        StepStatus::Rollover
    } else {
        StepStatus::Ok
    };
    Ok((settled, status))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn flat_map() -> HeightMap<f64> {
        HeightMap::flat(201, 201, 0.02, 0.6)
    }

    #[test]
    fn flat_straight_drive() {
        let map = flat_map();
        let cfg = VehicleConfig::default();
        let pose = settle(&map, 1.0, 1.0, 0.0, &cfg).unwrap();
        let (next, status) =
            step_vehicle(&map, &pose, &Action::new(1.0, 0.0), 0.1, &cfg).unwrap();
        assert_eq!(status, StepStatus::Ok);
        assert_abs_diff_eq!(next.x, 1.1, epsilon = 1e-12);
        assert_abs_diff_eq!(next.y, 1.0, epsilon = 1e-12);
        assert_eq!(next.z, pose.z);
        assert_eq!(next.roll, 0.0);
        assert_eq!(next.pitch, 0.0);
        assert_eq!(next.yaw, 0.0);
    }

    #[test]
    fn pure_rotation_in_place() {
        let map = flat_map();
        let cfg = VehicleConfig::default();
        let pose = settle(&map, 1.0, 1.0, 0.0, &cfg).unwrap();
        let (next, status) =
            step_vehicle(&map, &pose, &Action::new(0.0, 1.0), 0.1, &cfg).unwrap();
        assert_eq!(status, StepStatus::Ok);
        assert_abs_diff_eq!(next.yaw, 0.1, epsilon = 1e-12);
        assert_eq!(next.x, 1.0);
        assert_eq!(next.y, 1.0);
    }

    #[test]
    fn ramp_pitch_matches_hand_plane_fit() {
        let mut map = flat_map();
        for r in 0..201 {
            for c in 0..201 {
                map.elevations[[r, c]] = 0.2 * (c as f64 * 0.02);
            }
        }
        map.max_height = 1.0;
        let cfg = VehicleConfig::default();
        let pose = settle(&map, 2.0, 2.0, 0.0, &cfg).unwrap();
        assert_abs_diff_eq!(pose.pitch, (0.2f64).atan(), epsilon = 1e-6);
        assert_abs_diff_eq!(pose.roll, 0.0, epsilon = 1e-12);
        // plane height at the center
        assert_abs_diff_eq!(pose.z, 0.2 * 2.0, epsilon = 1e-12);
    }

    #[test]
    fn wall_causes_stuck() {
        let mut map = flat_map();
        for r in 0..201 {
            for c in 90..201 {
                map.elevations[[r, c]] = 0.5;
            }
        }
        let cfg = VehicleConfig::default();
        let pose = settle(&map, 1.6, 2.0, 0.0, &cfg).unwrap();
        let (next, status) =
            step_vehicle(&map, &pose, &Action::new(1.0, 0.0), 0.1, &cfg).unwrap();
        assert_eq!(status, StepStatus::Stuck);
        assert_eq!(next, pose);
    }

    #[test]
    fn steep_ramp_reports_rollover() {
        let mut map = flat_map();
        for r in 0..201 {
            for c in 0..201 {
                map.elevations[[r, c]] = 0.8 * (c as f64 * 0.02);
            }
        }
        map.max_height = 4.0;
        let cfg = VehicleConfig::default();
        let pose = settle(&map, 2.0, 2.0, 0.0, &cfg).unwrap();
        let (_, status) = step_vehicle(&map, &pose, &Action::new(0.2, 0.0), 0.1, &cfg).unwrap();
        assert_eq!(status, StepStatus::Rollover);
    }

    #[test]
    fn out_of_bounds_pose_errors() {
        let map = flat_map();
        let cfg = VehicleConfig::default();
        let pose = Pose::new(-1.0, 1.0, 0.0, 0.0, 0.0, 0.0);
        assert!(step_vehicle(&map, &pose, &Action::zero(), 0.1, &cfg).is_err());
    }
}
