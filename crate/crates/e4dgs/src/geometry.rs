//! Camera models, poses, and continuous-time trajectory interpolation.
//!
//! Conventions (fixed once, used everywhere):
//! - Poses are world-to-camera with a right-handed, z-forward camera frame.
//! - Quaternions are stored (w, x, y, z) and kept unit-norm.
//! - Timestamps are double-precision seconds in memory; files store integer
//!   microseconds.

use crate::error::{E4dgsError, Result};
use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Pinhole intrinsics, all quantities in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(E4dgsError::InvalidArgument(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        if cx < 0.0 || cx >= width as f64 || cy < 0.0 || cy >= height as f64 {
            return Err(E4dgsError::InvalidArgument(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} sensor"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }
}

/// World-to-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    /// Unit quaternion rotating world-frame vectors into the camera frame.
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// World point -> camera-frame point.
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Camera center in world coordinates.
    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation.inverse() * self.translation)
    }

    /// Pose looking from `eye` at `target` with the given up hint.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        // Rows of R are the camera axes expressed in world coordinates
        // (x right, y down, z forward).
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let rotation = UnitQuaternion::from_matrix(&r);
        let translation = -(rotation * eye);
        Self {
            rotation,
            translation,
        }
    }
}

/// Timestamped poses with interpolation.
#[derive(Debug, Clone)]
pub struct CameraTrajectory {
    keyframes: Vec<(f64, Pose)>,
}

impl CameraTrajectory {
    pub fn new(keyframes: Vec<(f64, Pose)>) -> Result<Self> {
        if keyframes.len() < 2 {
            return Err(E4dgsError::InvalidArgument(format!(
                "trajectory needs at least 2 keyframes, got {}",
                keyframes.len()
            )));
        }
        for pair in keyframes.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(E4dgsError::InvalidArgument(format!(
                    "keyframe timestamps must be strictly increasing ({} then {})",
                    pair[0].0, pair[1].0
                )));
            }
        }
        Ok(Self { keyframes })
    }

    pub fn keyframes(&self) -> &[(f64, Pose)] {
        &self.keyframes
    }

    pub fn span(&self) -> (f64, f64) {
        (
            self.keyframes[0].0,
            self.keyframes[self.keyframes.len() - 1].0,
        )
    }

    /// Pose at time `t`: translation lerped, rotation slerped (shortest arc).
    pub fn interpolate_pose(&self, t: f64) -> Result<Pose> {
        let (start, end) = self.span();
        if t < start || t > end {
            return Err(E4dgsError::OutOfRange { t, start, end });
        }
        // Bracketing keyframe pair.
        let idx = match self
            .keyframes
            .binary_search_by(|(kt, _)| kt.partial_cmp(&t).unwrap())
        {
            Ok(i) => return Ok(self.keyframes[i].1),
            Err(i) => i - 1, // t > keyframes[0].0 here, so i >= 1
        };
        let (t0, p0) = self.keyframes[idx];
        let (t1, p1) = self.keyframes[idx + 1];
        let u = (t - t0) / (t1 - t0);
        let translation = p0.translation.lerp(&p1.translation, u);
        let rotation = slerp_shortest(&p0.rotation, &p1.rotation, u);
        Ok(Pose {
            rotation,
            translation,
        })
    }
}

/// SLERP taking the shortest arc: the second quaternion is negated when the
/// dot product is negative. Falls back to nlerp for nearly parallel inputs.
pub fn slerp_shortest(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>, u: f64) -> UnitQuaternion<f64> {
    let qa = a.into_inner();
    let mut qb = b.into_inner();
    let mut dot = qa.dot(&qb);
    if dot < 0.0 {
        qb = -qb;
        dot = -dot;
    }
    let raw = if dot > 1.0 - 1e-10 {
        qa.lerp(&qb, u)
    } else {
        let theta = dot.min(1.0).acos();
        let sin_theta = theta.sin();
        let wa = ((1.0 - u) * theta).sin() / sin_theta;
        let wb = (u * theta).sin() / sin_theta;
        qa * wa + qb * wb
    };
    UnitQuaternion::from_quaternion(raw)
}

/// Pinhole projection of a world point. Returns the pixel and camera-frame
/// depth, or `None` when the point is behind the camera (caller culls).
pub fn project_point(
    intr: &CameraIntrinsics,
    pose: &Pose,
    p: &Vector3<f64>,
) -> Option<(Vector2<f64>, f64)> {
    let cam = pose.transform_point(p);
    if cam.z <= 0.0 {
        return None;
    }
    let px = intr.fx * cam.x / cam.z + intr.cx;
    let py = intr.fy * cam.y / cam.z + intr.cy;
    Some((Vector2::new(px, py), cam.z))
}

// ---------------------------------------------------------------------------
// Trajectory file I/O (JSON; timestamps as integer microseconds on disk)
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct TrajectoryRecord {
    t_us: u64,
    q: [f64; 4], // (w, x, y, z)
    tr: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct TrajectoryFile {
    intrinsics: CameraIntrinsics,
    keyframes: Vec<TrajectoryRecord>,
}

pub fn write_trajectory(
    path: &Path,
    intrinsics: &CameraIntrinsics,
    traj: &CameraTrajectory,
) -> Result<()> {
    let file = TrajectoryFile {
        intrinsics: *intrinsics,
        keyframes: traj
            .keyframes()
            .iter()
            .map(|(t, pose)| {
                let q = pose.rotation.into_inner();
                TrajectoryRecord {
                    t_us: (t * 1e6).round() as u64,
                    q: [q.w, q.i, q.j, q.k],
                    tr: [pose.translation.x, pose.translation.y, pose.translation.z],
                }
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&file)
        .map_err(|e| E4dgsError::parse(path, e.to_string()))?;
    std::fs::write(path, json).map_err(|e| E4dgsError::io(path, e))
}

pub fn read_trajectory(path: &Path) -> Result<(CameraIntrinsics, CameraTrajectory)> {
    let text = std::fs::read_to_string(path).map_err(|e| E4dgsError::io(path, e))?;
    let file: TrajectoryFile =
        serde_json::from_str(&text).map_err(|e| E4dgsError::parse(path, e.to_string()))?;
    let keyframes = file
        .keyframes
        .iter()
        .map(|r| {
            let q = Quaternion::new(r.q[0], r.q[1], r.q[2], r.q[3]);
            if (q.norm() - 1.0).abs() > 1e-6 {
                return Err(E4dgsError::parse(
                    path,
                    format!("non-unit quaternion at t_us={}", r.t_us),
                ));
            }
            Ok((
                r.t_us as f64 * 1e-6,
                Pose {
                    rotation: UnitQuaternion::from_quaternion(q),
                    translation: Vector3::new(r.tr[0], r.tr[1], r.tr[2]),
                },
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((file.intrinsics, CameraTrajectory::new(keyframes)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rot_z(angle: f64) -> UnitQuaternion<f64> {
        UnitQuaternion::from_axis_angle(&Vector3::z_axis(), angle)
    }

    fn two_key_traj() -> CameraTrajectory {
        CameraTrajectory::new(vec![
            (0.0, Pose::identity()),
            (
                1.0,
                Pose::new(
                    rot_z(std::f64::consts::FRAC_PI_2),
                    Vector3::new(4.0, 0.0, 0.0),
                ),
            ),
        ])
        .unwrap()
    }

    #[test]
    fn interpolate_at_keyframe_is_exact() {
        let traj = two_key_traj();
        let p = traj.interpolate_pose(0.0).unwrap();
        assert_eq!(p.translation, Vector3::zeros());
        assert_abs_diff_eq!(p.rotation.angle(), 0.0, epsilon = 1e-12);
        let p = traj.interpolate_pose(1.0).unwrap();
        assert_eq!(p.translation, Vector3::new(4.0, 0.0, 0.0));
    }

    #[test]
    fn slerp_midpoint_bisects_90_degrees() {
        let traj = two_key_traj();
        let p = traj.interpolate_pose(0.5).unwrap();
        assert_abs_diff_eq!(p.rotation.angle(), std::f64::consts::FRAC_PI_4, epsilon = 1e-12);
        assert_abs_diff_eq!(p.rotation.axis().unwrap().z, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn translation_lerp_at_quarter() {
        let traj = two_key_traj();
        let p = traj.interpolate_pose(0.25).unwrap();
        assert_abs_diff_eq!(p.translation.x, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn out_of_span_errors() {
        let traj = two_key_traj();
        assert!(matches!(
            traj.interpolate_pose(1.5),
            Err(E4dgsError::OutOfRange { .. })
        ));
        assert!(traj.interpolate_pose(-0.1).is_err());
    }

    #[test]
    fn slerp_takes_shortest_arc() {
        // b is a's 90-degree rotation stored with flipped sign; the midpoint
        // must still be the 45-degree rotation, not a 360-detour.
        let a = UnitQuaternion::identity();
        let b = UnitQuaternion::from_quaternion(-rot_z(std::f64::consts::FRAC_PI_2).into_inner());
        let mid = slerp_shortest(&a, &b, 0.5);
        assert_abs_diff_eq!(mid.angle(), std::f64::consts::FRAC_PI_4, epsilon = 1e-12);
    }

    #[test]
    fn interpolated_rotation_is_unit_norm_and_continuous() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..1000 {
            let n = rng.gen_range(2..6);
            let mut t = 0.0;
            let keys: Vec<(f64, Pose)> = (0..n)
                .map(|_| {
                    t += rng.gen_range(0.05..1.0);
                    let axis = Vector3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5);
                    let rot = UnitQuaternion::from_scaled_axis(axis * rng.gen_range(0.0..3.0));
                    (t, Pose::new(rot, Vector3::new(rng.gen(), rng.gen(), rng.gen())))
                })
                .collect();
            let (start, end) = (keys[0].0, keys[keys.len() - 1].0);
            let traj = CameraTrajectory::new(keys).unwrap();
            let tq = rng.gen_range(start..end);
            let pose = traj.interpolate_pose(tq).unwrap();
            assert!((pose.rotation.into_inner().norm() - 1.0).abs() < 1e-9);

            // Continuity: a 1e-6 step moves the pose by O(step / keyframe gap).
            let delta = 1e-6;
            if tq + delta < end {
                let pose2 = traj.interpolate_pose(tq + delta).unwrap();
                let dt_min = traj
                    .keyframes()
                    .windows(2)
                    .map(|w| w[1].0 - w[0].0)
                    .fold(f64::INFINITY, f64::min);
                // Lipschitz bound: rotations move at most pi per keyframe gap,
                // translations at most their spacing (coords in [0,1] here).
                let lipschitz = (std::f64::consts::PI + 2.0) / dt_min;
                let dq = (pose.rotation.into_inner() - pose2.rotation.into_inner()).norm();
                let dtr = (pose.translation - pose2.translation).norm();
                assert!(dq + dtr <= lipschitz * delta * 2.0 + 1e-12);
            }
        }
    }

    #[test]
    fn project_principal_point() {
        let intr = CameraIntrinsics::new(100.0, 100.0, 50.0, 40.0, 100, 80).unwrap();
        let (px, depth) = project_point(&intr, &Pose::identity(), &Vector3::new(0.0, 0.0, 3.0)).unwrap();
        assert_abs_diff_eq!(px.x, 50.0, epsilon = 1e-12);
        assert_abs_diff_eq!(px.y, 40.0, epsilon = 1e-12);
        assert_abs_diff_eq!(depth, 3.0, epsilon = 1e-12);
    }

    #[test]
    fn project_hand_evaluated_pixel() {
        // fx=100, cx=50, p=(1,0,1): pixel x = 100*1/1 + 50 = 150.
        let intr = CameraIntrinsics::new(100.0, 100.0, 50.0, 40.0, 200, 80).unwrap();
        let (px, _) = project_point(&intr, &Pose::identity(), &Vector3::new(1.0, 0.0, 1.0)).unwrap();
        assert_abs_diff_eq!(px.x, 150.0, epsilon = 1e-12);
    }

    #[test]
    fn behind_camera_is_culled() {
        let intr = CameraIntrinsics::new(100.0, 100.0, 50.0, 40.0, 100, 80).unwrap();
        assert!(project_point(&intr, &Pose::identity(), &Vector3::new(0.0, 0.0, -1.0)).is_none());
    }

    #[test]
    fn projection_invariant_under_common_rigid_transform() {
        let mut rng = StdRng::seed_from_u64(3);
        let intr = CameraIntrinsics::new(120.0, 110.0, 32.0, 24.0, 64, 48).unwrap();
        for _ in 0..100 {
            let pose = Pose::new(
                UnitQuaternion::from_scaled_axis(Vector3::new(rng.gen(), rng.gen(), rng.gen())),
                Vector3::new(rng.gen(), rng.gen(), rng.gen()),
            );
            let p = Vector3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() + 2.0);

            // Common rigid transform g applied to the world: point moves by g,
            // pose composes with g^-1.
            let g_rot = UnitQuaternion::from_scaled_axis(Vector3::new(rng.gen(), rng.gen(), rng.gen()));
            let g_tr = Vector3::new(rng.gen(), rng.gen(), rng.gen());
            let p2 = g_rot * p + g_tr;
            let pose2 = Pose::new(
                pose.rotation * g_rot.inverse(),
                pose.translation - pose.rotation * g_rot.inverse() * g_tr,
            );

            match (
                project_point(&intr, &pose, &p),
                project_point(&intr, &pose2, &p2),
            ) {
                (Some((a, da)), Some((b, db))) => {
                    assert_abs_diff_eq!(a.x, b.x, epsilon = 1e-8);
                    assert_abs_diff_eq!(a.y, b.y, epsilon = 1e-8);
                    assert_abs_diff_eq!(da, db, epsilon = 1e-9);
                }
                (None, None) => {}
                _ => panic!("culling disagreed under rigid transform"),
            }
        }
    }

    #[test]
    fn trajectory_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trajectory.json");
        let intr = CameraIntrinsics::new(100.0, 100.0, 32.0, 32.0, 64, 64).unwrap();
        let traj = two_key_traj();
        write_trajectory(&path, &intr, &traj).unwrap();
        let (intr2, traj2) = read_trajectory(&path).unwrap();
        assert_eq!(intr, intr2);
        assert_eq!(traj.keyframes().len(), traj2.keyframes().len());
        let p = traj2.interpolate_pose(0.5).unwrap();
        assert_abs_diff_eq!(p.translation.x, 2.0, epsilon = 1e-9);
    }
}
