//! 2.5D elevation grid with bilinear sampling.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::Array2;

/// Elevation grid. Row index maps to world y, column index to world x;
/// `origin` is the world position of cell (0, 0).
#[derive(Debug, Clone)]
pub struct HeightMap<S: Scalar> {
    pub elevations: Array2<S>,
    pub resolution: S,
    pub origin: (S, S),
    pub seed: u64,
    pub max_height: S,
}

impl<S: Scalar> HeightMap<S> {
    pub fn flat(cols: usize, rows: usize, resolution: S, max_height: S) -> Self {
        HeightMap {
            elevations: Array2::zeros((rows, cols)),
            resolution,
            origin: (S::zero(), S::zero()),
            seed: 0,
            max_height,
        }
    }

    pub fn cols(&self) -> usize {
        self.elevations.ncols()
    }

    pub fn rows(&self) -> usize {
        self.elevations.nrows()
    }

    /// World extent along x.
    pub fn width_m(&self) -> S {
        S::lit((self.cols() - 1) as f64) * self.resolution
    }

    /// World extent along y.
    pub fn height_m(&self) -> S {
        S::lit((self.rows() - 1) as f64) * self.resolution
    }

    pub fn contains(&self, x: S, y: S) -> bool {
        let gx = (x - self.origin.0) / self.resolution;
        let gy = (y - self.origin.1) / self.resolution;
        gx >= S::zero()
            && gy >= S::zero()
            && gx <= S::lit((self.cols() - 1) as f64)
            && gy <= S::lit((self.rows() - 1) as f64)
    }

    /// Bilinear elevation sample at a world position.
    pub fn sample(&self, x: S, y: S) -> Result<S> {
        if !self.contains(x, y) {
            return Err(Error::OutOfBounds(format!(
                "sample at ({}, {}) outside map of {} x {} m",
                x,
                y,
                self.width_m(),
                self.height_m()
            )));
        }
        let gx = (x - self.origin.0) / self.resolution;
        let gy = (y - self.origin.1) / self.resolution;
        let max_c = self.cols() - 2;
        let max_r = self.rows() - 2;
        let c0 = (gx.floor().to_f64() as usize).min(max_c);
        let r0 = (gy.floor().to_f64() as usize).min(max_r);
        let fx = gx - S::lit(c0 as f64);
        let fy = gy - S::lit(r0 as f64);
        let e = &self.elevations;
        let h00 = e[[r0, c0]];
        let h01 = e[[r0, c0 + 1]];
        let h10 = e[[r0 + 1, c0]];
        let h11 = e[[r0 + 1, c0 + 1]];
        // Incremental form: exact for constant fields, since the correction
        // terms vanish identically instead of relying on weights summing to 1.
        Ok(h00 + fx * (h01 - h00) + fy * (h10 - h00) + fx * fy * (h00 + h11 - h01 - h10))
    }

    pub fn validate(&self) -> Result<()> {
        if !self.elevations.iter().all(|v| v.is_finite()) {
            return Err(Error::Data("non-finite elevation".into()));
        }
        if self
            .elevations
            .iter()
            .any(|&v| v < S::zero() || v > self.max_height)
        {
            return Err(Error::Data(format!(
                "elevations outside [0, {}]",
                self.max_height
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn bilinear_interpolates_linearly() {
        let mut m = HeightMap::<f64>::flat(11, 11, 0.1, 1.0);
        for r in 0..11 {
            for c in 0..11 {
                m.elevations[[r, c]] = 0.2 * (c as f64 * 0.1);
            }
        }
        // Halfway between cells the linear field must be exact.
        assert_abs_diff_eq!(m.sample(0.25, 0.4).unwrap(), 0.05, epsilon = 1e-12);
        assert_abs_diff_eq!(m.sample(1.0, 1.0).unwrap(), 0.2, epsilon = 1e-12);
    }

    #[test]
    fn sample_rejects_out_of_bounds() {
        let m = HeightMap::<f64>::flat(11, 11, 0.1, 1.0);
        assert!(m.sample(-0.01, 0.5).is_err());
        assert!(m.sample(0.5, 1.01).is_err());
        assert!(m.sample(1.0, 1.0).is_ok());
    }
}
