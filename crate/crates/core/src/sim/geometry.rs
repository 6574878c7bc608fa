//! Poses, actions, and the rotation conventions shared by the simulator and
//! the learning stack.
//!
//! World frame is z-up. Yaw rotates counterclockwise about +z, pitch is
//! positive nose-up, roll follows the right-hand rule about the body x axis.
//! Angles are wrapped to (-pi, pi].

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose<S: Scalar> {
    pub x: S,
    pub y: S,
    pub z: S,
    pub roll: S,
    pub pitch: S,
    pub yaw: S,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Action<S: Scalar> {
    /// Linear velocity, m/s.
    pub linear: S,
    /// Angular velocity, rad/s.
    pub angular: S,
}

impl<S: Scalar> Action<S> {
    pub fn new(linear: S, angular: S) -> Self {
        Action { linear, angular }
    }

    pub fn zero() -> Self {
        Action {
            linear: S::zero(),
            angular: S::zero(),
        }
    }

    pub fn to_array(self) -> [S; 2] {
        [self.linear, self.angular]
    }

    pub fn from_array(a: [S; 2]) -> Self {
        Action {
            linear: a[0],
            angular: a[1],
        }
    }

    pub fn clamp(self, v_max: S, omega_max: S) -> Self {
        Action {
            linear: self.linear.max(-v_max).min(v_max),
            angular: self.angular.max(-omega_max).min(omega_max),
        }
    }
}

/// Wrap an angle to (-pi, pi].
pub fn wrap_angle<S: Scalar>(a: S) -> S {
    let two_pi = S::lit(std::f64::consts::TAU);
    let pi = S::lit(std::f64::consts::PI);
    let mut w = a % two_pi;
    if w > pi {
        w = w - two_pi;
    } else if w <= -pi {
        w = w + two_pi;
    }
    w
}

type Mat3<S> = [[S; 3]; 3];

fn mat_mul<S: Scalar>(a: &Mat3<S>, b: &Mat3<S>) -> Mat3<S> {
    let mut out = [[S::zero(); 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            for k in 0..3 {
                *cell = *cell + a[i][k] * b[k][j];
            }
        }
    }
    out
}

fn transpose<S: Scalar>(a: &Mat3<S>) -> Mat3<S> {
    let mut out = [[S::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

impl<S: Scalar> Pose<S> {
    pub fn new(x: S, y: S, z: S, roll: S, pitch: S, yaw: S) -> Self {
        Pose {
            x,
            y,
            z,
            roll: wrap_angle(roll),
            pitch: wrap_angle(pitch),
            yaw: wrap_angle(yaw),
        }
    }

    pub fn origin() -> Self {
        Pose::new(S::zero(), S::zero(), S::zero(), S::zero(), S::zero(), S::zero())
    }

    pub fn to_array(self) -> [S; 6] {
        [self.x, self.y, self.z, self.roll, self.pitch, self.yaw]
    }

    pub fn from_array(a: [S; 6]) -> Self {
        Pose::new(a[0], a[1], a[2], a[3], a[4], a[5])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Body-to-world rotation: Rz(yaw) * Ry(-pitch) * Rx(roll), so positive
    /// pitch lifts the nose.
    pub fn rotation(&self) -> Mat3<S> {
        let (cr, sr) = (self.roll.cos(), self.roll.sin());
        let (cp, sp) = (self.pitch.cos(), self.pitch.sin());
        let (cy, sy) = (self.yaw.cos(), self.yaw.sin());
        let z = S::zero();
        let o = S::one();
        let rz = [[cy, -sy, z], [sy, cy, z], [z, z, o]];
        let ry = [[cp, z, -sp], [z, o, z], [sp, z, cp]];
        let rx = [[o, z, z], [z, cr, -sr], [z, sr, cr]];
        mat_mul(&rz, &mat_mul(&ry, &rx))
    }

    fn from_rotation_translation(r: &Mat3<S>, t: [S; 3]) -> Self {
        let pitch = r[2][0].max(-S::one()).min(S::one()).asin();
        let yaw = r[1][0].atan2(r[0][0]);
        let roll = r[2][1].atan2(r[2][2]);
        Pose::new(t[0], t[1], t[2], roll, pitch, yaw)
    }

    /// Express `self` in the frame of `reference`: T_ref^{-1} * T_self.
    pub fn relative_to(&self, reference: &Pose<S>) -> Pose<S> {
        let r_ref = reference.rotation();
        let r_self = self.rotation();
        let r_rel = mat_mul(&transpose(&r_ref), &r_self);
        let d = [
            self.x - reference.x,
            self.y - reference.y,
            self.z - reference.z,
        ];
        let rt = transpose(&r_ref);
        let mut t = [S::zero(); 3];
        for (i, ti) in t.iter_mut().enumerate() {
            *ti = rt[i][0] * d[0] + rt[i][1] * d[1] + rt[i][2] * d[2];
        }
        Pose::from_rotation_translation(&r_rel, t)
    }

    /// Rotate a world-frame offset into this pose's body frame.
    pub fn world_to_body(&self, p: [S; 3]) -> [S; 3] {
        let rt = transpose(&self.rotation());
        let d = [p[0] - self.x, p[1] - self.y, p[2] - self.z];
        [
            rt[0][0] * d[0] + rt[0][1] * d[1] + rt[0][2] * d[2],
            rt[1][0] * d[0] + rt[1][1] * d[1] + rt[1][2] * d[2],
            rt[2][0] * d[0] + rt[2][1] * d[1] + rt[2][2] * d[2],
        ]
    }
}

/// Round every field through f32, so stored frames losslessly represent the
/// simulator state they came from.
pub fn quantize_pose(p: Pose<f64>) -> Pose<f64> {
    let q = |v: f64| v as f32 as f64;
    Pose {
        x: q(p.x),
        y: q(p.y),
        z: q(p.z),
        roll: q(p.roll),
        pitch: q(p.pitch),
        yaw: q(p.yaw),
    }
}

pub fn quantize_action(a: Action<f64>) -> Action<f64> {
    Action {
        linear: a.linear as f32 as f64,
        angular: a.angular as f32 as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    #[test]
    fn wrap_covers_boundaries() {
        assert_abs_diff_eq!(wrap_angle(3.0 * PI), PI, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(-3.0 * PI), PI, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(0.5), 0.5, epsilon = 1e-15);
        assert!(wrap_angle(PI) > 0.0);
    }

    #[test]
    fn relative_to_self_is_identity() {
        let p = Pose::new(1.0, 2.0, 0.3, 0.1, -0.2, 0.7);
        let rel = p.relative_to(&p);
        for v in rel.to_array() {
            assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn relative_translation_rotates_into_frame() {
        let a = Pose::new(0.0, 0.0, 0.0, 0.0, 0.0, PI / 2.0);
        let b = Pose::new(0.0, 1.0, 0.0, 0.0, 0.0, PI / 2.0);
        let rel = b.relative_to(&a);
        // One meter along world +y is one meter along body +x after a 90 deg yaw.
        assert_abs_diff_eq!(rel.x, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rel.y, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rel.yaw, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn euler_round_trip_through_rotation() {
        let p = Pose::new(0.0, 0.0, 0.0, 0.21, -0.35, 2.5);
        let rel = p.relative_to(&Pose::origin());
        assert_abs_diff_eq!(rel.roll, 0.21, epsilon = 1e-12);
        assert_abs_diff_eq!(rel.pitch, -0.35, epsilon = 1e-12);
        assert_abs_diff_eq!(rel.yaw, 2.5, epsilon = 1e-12);
    }

    #[test]
    fn positive_pitch_lifts_nose() {
        let p = Pose::new(0.0, 0.0, 0.0, 0.0, 0.3, 0.0);
        let r = p.rotation();
        // Body x axis should gain positive world z.
        assert!(r[2][0] > 0.0);
    }
}
