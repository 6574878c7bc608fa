//! Terrain patch beneath the vehicle: a 40x40 yaw-aligned crop, height
//! centered on the body and normalized by the terrain ceiling.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sim::geometry::Pose;
use crate::sim::heightmap::HeightMap;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub const PATCH_SIZE: usize = 40;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatchConfig {
    /// Metric side length of the square patch footprint.
    pub footprint_m: f64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        // 1.5x the vehicle length keeps the next step's contact area in view.
        PatchConfig { footprint_m: 0.75 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch<S: Scalar> {
    pub values: Array2<S>,
}

impl<S: Scalar> Patch<S> {
    pub fn zeros() -> Self {
        Patch {
            values: Array2::zeros((PATCH_SIZE, PATCH_SIZE)),
        }
    }

    pub fn from_values(values: Array2<S>) -> Result<Self> {
        if values.dim() != (PATCH_SIZE, PATCH_SIZE) {
            return Err(Error::Shape(format!(
                "patch must be {PATCH_SIZE}x{PATCH_SIZE}, got {:?}",
                values.dim()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::Data("non-finite patch value".into()));
        }
        Ok(Patch { values })
    }

    pub fn in_range(&self) -> bool {
        self.values
            .iter()
            .all(|&v| v >= -S::one() && v <= S::one())
    }
}

/// Sample the 40x40 footprint in the pose's yaw frame, subtract the body
/// height, normalize by the map ceiling, and clip to [-1, 1].
///
/// Column index runs along body +x, row index along body +y.
pub fn extract_patch<S: Scalar>(
    map: &HeightMap<S>,
    pose: &Pose<S>,
    cfg: &PatchConfig,
) -> Result<Patch<S>> {
    let cell = S::lit(cfg.footprint_m / PATCH_SIZE as f64);
    let (cy, sy) = (pose.yaw.cos(), pose.yaw.sin());
    let half = S::lit((PATCH_SIZE as f64 - 1.0) / 2.0);
    let mut values = Array2::zeros((PATCH_SIZE, PATCH_SIZE));
    for r in 0..PATCH_SIZE {
        let by = (S::lit(r as f64) - half) * cell;
        for c in 0..PATCH_SIZE {
            let bx = (S::lit(c as f64) - half) * cell;
            let wx = pose.x + bx * cy - by * sy;
            let wy = pose.y + bx * sy + by * cy;
            let h = map.sample(wx, wy).map_err(|_| {
                Error::OutOfBounds(format!(
                    "patch footprint at ({}, {}) yaw {} leaves the map",
                    pose.x, pose.y, pose.yaw
                ))
            })?;
            let v = (h - pose.z) / map.max_height;
            values[[r, c]] = v.max(-S::one()).min(S::one());
        }
    }
    Ok(Patch { values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::terrain::{generate_terrain, TerrainConfig};
    use crate::sim::vehicle::{settle, VehicleConfig};

    #[test]
    fn flat_map_at_contact_height_gives_zero_patch() {
        let mut map = HeightMap::<f64>::flat(201, 201, 0.02, 0.6);
        map.elevations.fill(0.3);
        let pose = Pose::new(2.0, 2.0, 0.3, 0.0, 0.0, 0.0);
        let p = extract_patch(&map, &pose, &PatchConfig::default()).unwrap();
        assert!(p.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_shape_is_40x40_and_in_range() {
        let map = generate_terrain::<f64>(5, &TerrainConfig::default()).unwrap();
        let cfg = VehicleConfig::default();
        let pose = settle(&map, 2.0, 1.2, 0.4, &cfg).unwrap();
        let p = extract_patch(&map, &pose, &PatchConfig::default()).unwrap();
        assert_eq!(p.values.dim(), (PATCH_SIZE, PATCH_SIZE));
        assert!(p.in_range());
    }

    #[test]
    fn footprint_off_map_errors() {
        let map = HeightMap::<f64>::flat(201, 201, 0.02, 0.6);
        let pose = Pose::new(0.1, 2.0, 0.0, 0.0, 0.0, 0.0);
        assert!(extract_patch(&map, &pose, &PatchConfig::default()).is_err());
    }

    /// Brute-force oracle: sample the same footprint by explicitly rotating
    /// the query points with an independently written rotation.
    fn oracle_patch(map: &HeightMap<f64>, pose: &Pose<f64>, footprint: f64) -> Array2<f64> {
        let cell = footprint / PATCH_SIZE as f64;
        let mut out = Array2::zeros((PATCH_SIZE, PATCH_SIZE));
        for r in 0..PATCH_SIZE {
            for c in 0..PATCH_SIZE {
                let bx = (c as f64 - 19.5) * cell;
                let by = (r as f64 - 19.5) * cell;
                let ang = pose.yaw;
                let wx = pose.x + bx * ang.cos() - by * ang.sin();
                let wy = pose.y + bx * ang.sin() + by * ang.cos();
                let h = map.sample(wx, wy).unwrap();
                out[[r, c]] = ((h - pose.z) / map.max_height).clamp(-1.0, 1.0);
            }
        }
        out
    }

    #[test]
    fn yaw_rotation_matches_bruteforce_oracle() {
        let map = generate_terrain::<f64>(11, &TerrainConfig::default()).unwrap();
        let cfg = PatchConfig::default();
        for &yaw in &[0.0, std::f64::consts::FRAC_PI_2, 1.1, -2.3] {
            let pose = Pose::new(2.1, 1.3, 0.1, 0.0, 0.0, yaw);
            let p = extract_patch(&map, &pose, &cfg).unwrap();
            let o = oracle_patch(&map, &pose, cfg.footprint_m);
            for (a, b) in p.values.iter().zip(o.iter()) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn quarter_turn_patch_is_rotated_axis_aligned_patch() {
        let map = generate_terrain::<f64>(13, &TerrainConfig::default()).unwrap();
        let cfg = PatchConfig::default();
        let p0 = extract_patch(&map, &Pose::new(2.0, 1.2, 0.1, 0.0, 0.0, 0.0), &cfg).unwrap();
        let p1 = extract_patch(
            &map,
            &Pose::new(2.0, 1.2, 0.1, 0.0, 0.0, std::f64::consts::FRAC_PI_2),
            &cfg,
        )
        .unwrap();
        for r in 0..PATCH_SIZE {
            for c in 0..PATCH_SIZE {
                let rotated = p0.values[[c, PATCH_SIZE - 1 - r]];
                assert!(
                    (p1.values[[r, c]] - rotated).abs() < 1e-6,
                    "mismatch at ({r}, {c})"
                );
            }
        }
    }
}
