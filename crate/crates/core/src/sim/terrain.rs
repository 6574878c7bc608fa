//! Procedural rock-bed generation: smooth seeded bumps on a flat plate with a
//! flat apron so episodes can start and end off the rocks.

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::scalar::Scalar;
use crate::sim::heightmap::HeightMap;
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TerrainConfig {
    /// World extent along x, meters.
    pub width_m: f64,
    /// World extent along y, meters.
    pub height_m: f64,
    /// Meters per grid cell.
    pub resolution: f64,
    /// Elevation ceiling, meters.
    pub max_height: f64,
    /// Amplitude scale in [0, 1]; 0 produces a flat plane.
    pub roughness: f64,
    /// Rocks per square meter of interior.
    pub rock_density: f64,
    /// Flat border width, meters.
    pub apron_m: f64,
    pub rock_radius_min: f64,
    pub rock_radius_max: f64,
}

impl Default for TerrainConfig {
    fn default() -> Self {
        TerrainConfig {
            width_m: 4.3,
            height_m: 2.5,
            resolution: 0.02,
            max_height: 0.6,
            roughness: 1.0,
            rock_density: 6.0,
            apron_m: 0.6,
            rock_radius_min: 0.12,
            rock_radius_max: 0.35,
        }
    }
}

impl TerrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width_m <= 0.0 || self.height_m <= 0.0 {
            return Err(Error::Config("terrain dims must be positive".into()));
        }
        if self.resolution <= 0.0 {
            return Err(Error::Config("terrain resolution must be positive".into()));
        }
        if self.max_height <= 0.0 {
            return Err(Error::Config("terrain max_height must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.roughness) {
            return Err(Error::Config("terrain roughness must be in [0, 1]".into()));
        }
        if self.rock_radius_min <= 0.0 || self.rock_radius_max < self.rock_radius_min {
            return Err(Error::Config("terrain rock radii invalid".into()));
        }
        if 2.0 * self.apron_m + 2.0 * self.rock_radius_max >= self.width_m.min(self.height_m) {
            return Err(Error::Config(
                "terrain interior too small for apron and rocks".into(),
            ));
        }
        Ok(())
    }
}

/// Deterministic rock bed for a seed. Rock centers stay one radius inside the
/// interior so the apron is exactly flat.
pub fn generate_terrain<S: Scalar>(seed: u64, config: &TerrainConfig) -> Result<HeightMap<S>> {
    config.validate()?;
    let cols = (config.width_m / config.resolution).floor() as usize + 1;
    let rows = (config.height_m / config.resolution).floor() as usize + 1;
    let mut elevations = Array2::<f64>::zeros((rows, cols));

    if config.roughness > 0.0 {
        let mut rng = substream(seed, "terrain");
        let interior_w = config.width_m - 2.0 * config.apron_m;
        let interior_h = config.height_m - 2.0 * config.apron_m;
        let count = (config.rock_density * interior_w * interior_h).round().max(1.0) as usize;
        for _ in 0..count {
            let radius = rng.gen_range(config.rock_radius_min..=config.rock_radius_max);
            let lo_x = config.apron_m + radius;
            let hi_x = config.width_m - config.apron_m - radius;
            let lo_y = config.apron_m + radius;
            let hi_y = config.height_m - config.apron_m - radius;
            let cx = rng.gen_range(lo_x..=hi_x);
            let cy = rng.gen_range(lo_y..=hi_y);
            let amplitude = rng.gen_range(0.4..=1.0) * config.max_height * config.roughness;
            // cos^2 bump: smooth, compact support of one radius.
            let c0 = (((cx - radius) / config.resolution).floor().max(0.0)) as usize;
            let c1 = ((((cx + radius) / config.resolution).ceil()) as usize).min(cols - 1);
            let r0 = (((cy - radius) / config.resolution).floor().max(0.0)) as usize;
            let r1 = ((((cy + radius) / config.resolution).ceil()) as usize).min(rows - 1);
            for r in r0..=r1 {
                let y = r as f64 * config.resolution;
                for c in c0..=c1 {
                    let x = c as f64 * config.resolution;
                    let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                    if d < radius {
                        let t = std::f64::consts::FRAC_PI_2 * d / radius;
                        elevations[[r, c]] += amplitude * t.cos().powi(2);
                    }
                }
            }
        }
        elevations.mapv_inplace(|v| v.min(config.max_height));
    }

    Ok(HeightMap {
        elevations: elevations.mapv(S::lit),
        resolution: S::lit(config.resolution),
        origin: (S::zero(), S::zero()),
        seed,
        max_height: S::lit(config.max_height),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_roughness_is_flat() {
        let cfg = TerrainConfig {
            roughness: 0.0,
            ..Default::default()
        };
        let m = generate_terrain::<f64>(7, &cfg).unwrap();
        assert!(m.elevations.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = TerrainConfig::default();
        let a = generate_terrain::<f64>(7, &cfg).unwrap();
        let b = generate_terrain::<f64>(7, &cfg).unwrap();
        assert_eq!(a.elevations, b.elevations);
        let c = generate_terrain::<f64>(8, &cfg).unwrap();
        assert_ne!(a.elevations, c.elevations);
    }

    #[test]
    fn respects_max_height_and_reaches_upper_half() {
        let cfg = TerrainConfig::default();
        // The lower bound of 0.5 * max_height was confirmed over 100 seeds
        // before being pinned here.
        for seed in 0..100u64 {
            let m = generate_terrain::<f64>(seed, &cfg).unwrap();
            let peak = m.elevations.iter().cloned().fold(0.0, f64::max);
            assert!(peak <= cfg.max_height + 1e-12, "seed {seed}: peak {peak}");
            assert!(peak >= 0.5 * cfg.max_height, "seed {seed}: peak {peak}");
        }
    }

    #[test]
    fn apron_stays_flat() {
        let cfg = TerrainConfig::default();
        let m = generate_terrain::<f64>(3, &cfg).unwrap();
        let apron_cells = (cfg.apron_m / cfg.resolution) as usize;
        for r in 0..m.rows() {
            for c in 0..apron_cells {
                assert_eq!(m.elevations[[r, c]], 0.0);
                assert_eq!(m.elevations[[r, m.cols() - 1 - c]], 0.0);
            }
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = TerrainConfig {
            resolution: 0.0,
            ..Default::default()
        };
        assert!(generate_terrain::<f64>(1, &cfg).is_err());
    }
}
