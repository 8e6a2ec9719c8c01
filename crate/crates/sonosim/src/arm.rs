//! 7-DOF serial-arm model: kinematics, Jacobian and the damped
//! pseudo-inverse used by the null-space projector.
//!
//! The chain is a list of revolute joints; each joint carries a fixed
//! transform from its parent link frame followed by a rotation about a unit
//! axis. Link inertial data lives alongside for the dynamics algorithms in
//! [`crate::dynamics`].

use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Rigid transform of the probe/end-effector. Orientation is kept as a unit
/// quaternion; helpers convert to/from rotation matrices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            position: Vector3::zeros(),
            orientation: UnitQuaternion::identity(),
        }
    }

    pub fn new(position: Vector3<f64>, orientation: UnitQuaternion<f64>) -> Self {
        Pose {
            position,
            orientation,
        }
    }

    pub fn from_rotation(position: Vector3<f64>, rot: &Rotation3<f64>) -> Self {
        Pose {
            position,
            orientation: UnitQuaternion::from_rotation_matrix(rot),
        }
    }

    pub fn rotation(&self) -> Rotation3<f64> {
        self.orientation.to_rotation_matrix()
    }

    /// `self * other`: first apply `other` in this pose's frame.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            position: self.position + self.orientation * other.position,
            orientation: self.orientation * other.orientation,
        }
    }

    /// Map a point from this pose's frame into the parent frame.
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.position + self.orientation * p
    }

    /// Map a vector from the parent frame into this pose's frame.
    pub fn inverse_transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.orientation.inverse() * v
    }

    /// Serialize as (position, quaternion wxyz) — 7 numbers.
    pub fn to_array(&self) -> [f64; 7] {
        let q = self.orientation.quaternion();
        [
            self.position.x,
            self.position.y,
            self.position.z,
            q.w,
            q.i,
            q.j,
            q.k,
        ]
    }

    /// Inverse of [`Pose::to_array`]; bitwise-exact for stored unit
    /// quaternions (no renormalization).
    pub fn from_array(a: &[f64; 7]) -> Pose {
        let q = nalgebra::Quaternion::new(a[3], a[4], a[5], a[6]);
        debug_assert!((q.norm() - 1.0).abs() < 1e-6, "stored quaternion not unit");
        Pose {
            position: Vector3::new(a[0], a[1], a[2]),
            orientation: UnitQuaternion::new_unchecked(q),
        }
    }
}

/// Frame a wrench is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WrenchFrame {
    Probe,
    Base,
}

/// 6-vector of force and torque with an explicit frame tag.
///
/// Convention used throughout: the measured contact wrench `F_e` (and the
/// desired `F_d`) denote the wrench the probe applies to the environment,
/// so steady pressing along the probe axis reads as a positive `force.z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wrench {
    pub force: Vector3<f64>,
    pub torque: Vector3<f64>,
    pub frame: WrenchFrame,
}

impl Wrench {
    pub fn zero(frame: WrenchFrame) -> Self {
        Wrench {
            force: Vector3::zeros(),
            torque: Vector3::zeros(),
            frame,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.force.iter().all(|v| v.is_finite()) && self.torque.iter().all(|v| v.is_finite())
    }

    pub fn as_vector6(&self) -> nalgebra::Vector6<f64> {
        nalgebra::Vector6::new(
            self.force.x,
            self.force.y,
            self.force.z,
            self.torque.x,
            self.torque.y,
            self.torque.z,
        )
    }

    pub fn as_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(self.as_vector6().as_slice())
    }

    pub fn from_vector6(v: &nalgebra::Vector6<f64>, frame: WrenchFrame) -> Self {
        Wrench {
            force: Vector3::new(v[0], v[1], v[2]),
            torque: Vector3::new(v[3], v[4], v[5]),
            frame,
        }
    }

    pub fn from_slice(v: &[f64], frame: WrenchFrame) -> Self {
        Wrench {
            force: Vector3::new(v[0], v[1], v[2]),
            torque: Vector3::new(v[3], v[4], v[5]),
            frame,
        }
    }

    /// Rotate a probe-frame wrench into the base frame (same reference
    /// point, so only the rotation acts).
    pub fn to_base(&self, probe_in_base: &UnitQuaternion<f64>) -> Wrench {
        match self.frame {
            WrenchFrame::Base => *self,
            WrenchFrame::Probe => Wrench {
                force: probe_in_base * self.force,
                torque: probe_in_base * self.torque,
                frame: WrenchFrame::Base,
            },
        }
    }

    pub fn to_probe(&self, probe_in_base: &UnitQuaternion<f64>) -> Wrench {
        match self.frame {
            WrenchFrame::Probe => *self,
            WrenchFrame::Base => Wrench {
                force: probe_in_base.inverse() * self.force,
                torque: probe_in_base.inverse() * self.torque,
                frame: WrenchFrame::Probe,
            },
        }
    }
}

/// One revolute joint plus the rigid link it moves.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Link {
    /// Fixed translation from the parent link frame to this joint's pivot.
    pub offset: [f64; 3],
    /// Unit rotation axis in the pivot frame.
    pub axis: [f64; 3],
    /// Link mass, kg.
    pub mass: f64,
    /// Center of mass in the link frame, m.
    pub com: [f64; 3],
    /// Principal inertia about the COM in the link frame, kg m^2
    /// (diagonal; the generic chain uses symmetric links).
    pub inertia_diag: [f64; 3],
}

impl Link {
    pub fn axis_vec(&self) -> Unit<Vector3<f64>> {
        Unit::new_normalize(Vector3::new(self.axis[0], self.axis[1], self.axis[2]))
    }

    pub fn offset_vec(&self) -> Vector3<f64> {
        Vector3::new(self.offset[0], self.offset[1], self.offset[2])
    }

    pub fn com_vec(&self) -> Vector3<f64> {
        Vector3::new(self.com[0], self.com[1], self.com[2])
    }

    pub fn inertia_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::new(
            self.inertia_diag[0],
            self.inertia_diag[1],
            self.inertia_diag[2],
        ))
    }
}

/// Serial-chain arm model: joint/link table, tool transform, gravity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmModel {
    pub links: Vec<Link>,
    /// Fixed transform from the last link frame to the probe tip.
    pub tool_offset: [f64; 3],
    /// Gravity vector in the base frame, m/s^2.
    pub gravity: [f64; 3],
    /// Symmetric joint limit, rad (applies to every joint).
    pub joint_limit: f64,
    /// Reflected rotor inertia per joint, kg m^2; enters the mass-matrix
    /// diagonal (gear-side gravity/Coriolis contributions are neglected).
    pub rotor_inertia: f64,
}

impl ArmModel {
    pub fn dof(&self) -> usize {
        self.links.len()
    }

    pub fn gravity_vec(&self) -> Vector3<f64> {
        Vector3::new(self.gravity[0], self.gravity[1], self.gravity[2])
    }

    pub fn tool_vec(&self) -> Vector3<f64> {
        Vector3::new(self.tool_offset[0], self.tool_offset[1], self.tool_offset[2])
    }

    pub fn validate(&self) -> Result<()> {
        if self.links.is_empty() {
            return Err(Error::Config("arm model has no links".into()));
        }
        for (i, l) in self.links.iter().enumerate() {
            if l.mass <= 0.0 {
                return Err(Error::Config(format!("link {i} mass must be > 0")));
            }
            if l.inertia_diag.iter().any(|v| *v <= 0.0) {
                return Err(Error::Config(format!(
                    "link {i} inertia must be positive definite"
                )));
            }
        }
        Ok(())
    }

    /// Generic 7-DOF research-arm stand-in: alternating z/y axes,
    /// ~0.3 m links, total mass ~18 kg, tool pointing along the last axis.
    pub fn default_7dof() -> ArmModel {
        let axes = [
            [0.0, 0.0, 1.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
        ];
        let offsets = [
            [0.0, 0.0, 0.15],
            [0.0, 0.0, 0.10],
            [0.0, 0.0, 0.25],
            [0.0, 0.0, 0.25],
            [0.0, 0.0, 0.25],
            [0.0, 0.0, 0.20],
            [0.0, 0.0, 0.10],
        ];
        let masses = [4.0, 3.5, 3.0, 2.5, 2.0, 1.5, 1.0];
        let lengths = [0.10, 0.25, 0.25, 0.25, 0.20, 0.10, 0.10];
        let links = (0..7)
            .map(|i| {
                let m = masses[i];
                let l = lengths[i];
                let r = 0.045;
                // solid-cylinder approximation along the link's z
                let ixx = m * (3.0 * r * r + l * l) / 12.0;
                let izz = m * r * r / 2.0;
                Link {
                    offset: offsets[i],
                    axis: axes[i],
                    mass: m,
                    com: [0.0, 0.0, l / 2.0],
                    inertia_diag: [ixx, ixx, izz],
                }
            })
            .collect();
        ArmModel {
            links,
            tool_offset: [0.0, 0.0, 0.10],
            gravity: [0.0, 0.0, -9.81],
            joint_limit: 2.9,
            rotor_inertia: 0.05,
        }
    }
}

/// Joint positions and velocities.
#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    pub q: DVector<f64>,
    pub dq: DVector<f64>,
}

impl JointState {
    pub fn zero(dof: usize) -> Self {
        JointState {
            q: DVector::zeros(dof),
            dq: DVector::zeros(dof),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().all(|v| v.is_finite()) && self.dq.iter().all(|v| v.is_finite())
    }

    pub fn within_limits(&self, model: &ArmModel) -> bool {
        self.q.iter().all(|v| v.abs() <= model.joint_limit)
    }
}

/// Poses of every joint pivot plus the end effector, all in the base frame.
pub struct FrameChain {
    /// `joint_poses[i]` is the pose of link i's frame (after its joint
    /// rotation) in the base frame.
    pub joint_poses: Vec<Pose>,
    pub ee: Pose,
}

/// Forward kinematics for every link frame; cheap enough to recompute.
pub fn frame_chain(model: &ArmModel, q: &DVector<f64>) -> FrameChain {
    assert_eq!(q.len(), model.dof(), "q dimension mismatch");
    let mut pose = Pose::identity();
    let mut joint_poses = Vec::with_capacity(model.dof());
    for (i, link) in model.links.iter().enumerate() {
        let local = Pose {
            position: link.offset_vec(),
            orientation: UnitQuaternion::from_axis_angle(&link.axis_vec(), q[i]),
        };
        pose = pose.compose(&local);
        joint_poses.push(pose);
    }
    let ee = pose.compose(&Pose {
        position: model.tool_vec(),
        orientation: UnitQuaternion::identity(),
    });
    FrameChain { joint_poses, ee }
}

/// End-effector pose in the base frame.
pub fn forward_kinematics(model: &ArmModel, q: &DVector<f64>) -> Pose {
    frame_chain(model, q).ee
}

/// Geometric Jacobian mapping `dq` to the end-effector twist
/// `(linear; angular)` in the base frame. 6 x n.
pub fn jacobian(model: &ArmModel, q: &DVector<f64>) -> DMatrix<f64> {
    let chain = frame_chain(model, q);
    let p_ee = chain.ee.position;
    let n = model.dof();
    let mut j = DMatrix::zeros(6, n);
    for i in 0..n {
        let jp = &chain.joint_poses[i];
        let z = jp.orientation * model.links[i].axis_vec().into_inner();
        let lin = z.cross(&(p_ee - jp.position));
        for r in 0..3 {
            j[(r, i)] = lin[r];
            j[(r + 3, i)] = z[r];
        }
    }
    j
}

/// Damped pseudo-inverse `J^T (J J^T + lambda^2 I)^-1` (n x 6).
///
/// At `lambda = 0` and full row rank this is the Moore-Penrose
/// pseudo-inverse; `lambda > 0` keeps it finite at singularities.
pub fn damped_pseudo_inverse(j: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    assert!(lambda >= 0.0, "damping must be non-negative");
    let jt = j.transpose();
    let mut jjt = j * &jt;
    for i in 0..jjt.nrows() {
        jjt[(i, i)] += lambda * lambda;
    }
    let inv = jjt.clone().try_inverse().unwrap_or_else(|| {
        jjt.svd(true, true)
            .pseudo_inverse(1e-12)
            .expect("svd pseudo inverse")
    });
    jt * inv
}

/// Damped least-squares inverse kinematics. Internal placement helper used
/// to realize Cartesian start poses as joint states; not a control path.
pub fn solve_ik(
    model: &ArmModel,
    target: &Pose,
    q_seed: &DVector<f64>,
    iters: usize,
) -> Result<DVector<f64>> {
    let mut q = q_seed.clone();
    for _ in 0..iters {
        let pose = forward_kinematics(model, &q);
        let e_pos = target.position - pose.position;
        let rel = pose.orientation.inverse() * target.orientation;
        let e_rot = pose.orientation * rel.scaled_axis();
        let err = DVector::from_column_slice(&[
            e_pos.x, e_pos.y, e_pos.z, e_rot.x, e_rot.y, e_rot.z,
        ]);
        if err.norm() < 1e-10 {
            break;
        }
        let j = jacobian(model, &q);
        let jinv = damped_pseudo_inverse(&j, 1e-4);
        let dq = jinv * err;
        for i in 0..q.len() {
            q[i] += 0.7 * dq[i];
        }
    }
    let pose = forward_kinematics(model, &q);
    let e = (target.position - pose.position).norm();
    if e > 1e-6 {
        return Err(Error::Domain(format!(
            "IK did not converge: residual position error {e:.2e} m"
        )));
    }
    if !q.iter().all(|v| v.abs() <= model.joint_limit) {
        return Err(Error::Domain("IK solution violates joint limits".into()));
    }
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_q(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.gen_range(-1.2..1.2))
    }

    #[test]
    fn fk_home_pose_is_stacked_links() {
        let model = ArmModel::default_7dof();
        let pose = forward_kinematics(&model, &DVector::zeros(7));
        // all offsets along +z plus the tool
        let total: f64 = model.links.iter().map(|l| l.offset[2]).sum::<f64>() + 0.10;
        assert_relative_eq!(pose.position.z, total, epsilon = 1e-12);
        assert_relative_eq!(pose.position.x, 0.0, epsilon = 1e-12);
        assert!(pose.orientation.angle() < 1e-12);
    }

    #[test]
    fn fk_base_rotation_by_pi_mirrors_position() {
        let model = ArmModel::default_7dof();
        let mut q = DVector::zeros(7);
        q[1] = 0.5; // bend so the EE leaves the base axis
        let p = forward_kinematics(&model, &q).position;
        q[0] = std::f64::consts::PI;
        let p2 = forward_kinematics(&model, &q).position;
        assert_relative_eq!(p2.x, -p.x, epsilon = 1e-9);
        assert_relative_eq!(p2.y, -p.y, epsilon = 1e-9);
        assert_relative_eq!(p2.z, p.z, epsilon = 1e-9);
    }

    #[test]
    fn fk_is_continuous() {
        let model = ArmModel::default_7dof();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let q = random_q(&mut rng, 7);
            let p0 = forward_kinematics(&model, &q).position;
            let mut qd = q.clone();
            for i in 0..7 {
                qd[i] += 1e-8;
            }
            let p1 = forward_kinematics(&model, &qd).position;
            assert!((p1 - p0).norm() < 1e-6);
        }
    }

    #[test]
    fn jacobian_position_rows_match_finite_differences() {
        let model = ArmModel::default_7dof();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-6;
        let mut max_err: f64 = 0.0;
        for _ in 0..100 {
            let q = random_q(&mut rng, 7);
            let j = jacobian(&model, &q);
            for i in 0..7 {
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp[i] += h;
                qm[i] -= h;
                let pp = forward_kinematics(&model, &qp).position;
                let pm = forward_kinematics(&model, &qm).position;
                let fd = (pp - pm) / (2.0 * h);
                for r in 0..3 {
                    max_err = max_err.max((j[(r, i)] - fd[r]).abs());
                }
            }
        }
        assert!(max_err < 1e-6, "max |J - FD| = {max_err:.2e}");
    }

    #[test]
    fn jacobian_times_basis_is_column() {
        let model = ArmModel::default_7dof();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random_q(&mut rng, 7);
        let j = jacobian(&model, &q);
        for i in 0..7 {
            let mut e = DVector::zeros(7);
            e[i] = 1.0;
            let col = &j * &e;
            for r in 0..6 {
                assert_relative_eq!(col[r], j[(r, i)], epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn stretched_configuration_is_singular() {
        let model = ArmModel::default_7dof();
        let j = jacobian(&model, &DVector::zeros(7));
        let svd = j.svd(false, false);
        let rank = svd.singular_values.iter().filter(|s| **s > 1e-9).count();
        assert!(rank < 6, "straight-up configuration should be singular, rank {rank}");
    }

    #[test]
    fn damped_pinv_is_right_inverse_at_full_rank() {
        let model = ArmModel::default_7dof();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random_q(&mut rng, 7);
        let j = jacobian(&model, &q);
        let jinv = damped_pseudo_inverse(&j, 0.0);
        let prod = &j * &jinv;
        for r in 0..6 {
            for c in 0..6 {
                let want = if r == c { 1.0 } else { 0.0 };
                assert!((prod[(r, c)] - want).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn projector_is_idempotent() {
        let model = ArmModel::default_7dof();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = random_q(&mut rng, 7);
        let j = jacobian(&model, &q);
        let jinv = damped_pseudo_inverse(&j, 0.0);
        let n = DMatrix::identity(7, 7) - j.transpose() * jinv.transpose();
        let diff = (&n * &n) - &n;
        assert!(diff.norm() < 1e-8);
    }

    #[test]
    fn damped_pinv_finite_at_singularity() {
        let model = ArmModel::default_7dof();
        // straight configuration is rank deficient
        let j = jacobian(&model, &DVector::zeros(7));
        let jinv = damped_pseudo_inverse(&j, 1e-3);
        assert!(jinv.iter().all(|v| v.is_finite()));
        assert!(jinv.norm() < 1e6);
    }

    #[test]
    fn ik_reaches_reachable_pose() {
        let model = ArmModel::default_7dof();
        let mut q0 = DVector::zeros(7);
        q0[1] = 0.7;
        q0[3] = 1.5;
        q0[5] = 0.9;
        let target = forward_kinematics(&model, &q0);
        let mut seed = q0.clone();
        seed[1] += 0.2;
        seed[3] -= 0.15;
        let q = solve_ik(&model, &target, &seed, 200).unwrap();
        let reached = forward_kinematics(&model, &q);
        assert!((reached.position - target.position).norm() < 1e-6);
    }

    #[test]
    fn pose_roundtrip_array() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let p = Pose {
                position: Vector3::new(rng.gen(), rng.gen(), rng.gen()),
                orientation: UnitQuaternion::from_euler_angles(
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-1.5..1.5),
                    rng.gen_range(-3.0..3.0),
                ),
            };
            let q = Pose::from_array(&p.to_array());
            assert!((p.position - q.position).norm() < 1e-12);
            assert!(p.orientation.angle_to(&q.orientation) < 1e-12);
        }
    }
}
