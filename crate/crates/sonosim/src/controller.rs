//! Hybrid force-impedance control law.
//!
//! Selected Cartesian axes (probe z) are force controlled, the complement is
//! impedance controlled; a null-space posture task acts through the damped
//! pseudo-inverse projector, and gravity/Coriolis are compensated from the
//! arm model. Navigation targets arrive at 10 Hz and are smoothed by a
//! first-order low-pass before the 1 kHz loop consumes them.

use nalgebra::{DMatrix, DVector, Matrix6, UnitQuaternion, Vector6};
use serde::{Deserialize, Serialize};

use crate::arm::{
    damped_pseudo_inverse, forward_kinematics, jacobian, ArmModel, JointState, Pose, Wrench,
    WrenchFrame,
};
use crate::dynamics::bias_terms;
use crate::{Error, Result};

/// Controller gain set. `k1/d1` act on the Cartesian impedance error,
/// `k2/d2` on the null-space posture, `kf` on the force error.
#[derive(Debug, Clone)]
pub struct Gains {
    pub k1: Matrix6<f64>,
    pub d1: Matrix6<f64>,
    pub k2: DMatrix<f64>,
    pub d2: DMatrix<f64>,
    pub kf: Matrix6<f64>,
    /// Damping for the pseudo-inverse in the null-space projector.
    pub pinv_damping: f64,
}

/// Serializable diagonal form used in run configs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GainsConfig {
    pub k1_diag: [f64; 6],
    pub d1_diag: [f64; 6],
    pub k2: f64,
    pub d2: f64,
    pub kf: f64,
    pub pinv_damping: f64,
}

impl Default for GainsConfig {
    fn default() -> Self {
        GainsConfig {
            k1_diag: [800.0, 800.0, 800.0, 30.0, 30.0, 30.0],
            // critically damped against a ~3 kg effective end-effector mass
            d1_diag: [98.0, 98.0, 98.0, 3.5, 3.5, 3.5],
            k2: 10.0,
            d2: 2.0,
            kf: 0.5,
            pinv_damping: 1e-3,
        }
    }
}

impl GainsConfig {
    pub fn build(&self, dof: usize) -> Gains {
        Gains {
            k1: Matrix6::from_diagonal(&Vector6::from_row_slice(&self.k1_diag)),
            d1: Matrix6::from_diagonal(&Vector6::from_row_slice(&self.d1_diag)),
            k2: DMatrix::identity(dof, dof) * self.k2,
            d2: DMatrix::identity(dof, dof) * self.d2,
            kf: Matrix6::identity() * self.kf,
            pinv_damping: self.pinv_damping,
        }
    }
}

impl Gains {
    pub fn validate(&self) -> Result<()> {
        let sym = |m: &Matrix6<f64>| (m - m.transpose()).norm() < 1e-9;
        if !sym(&self.k1) || !sym(&self.d1) || !sym(&self.kf) {
            return Err(Error::Config("gain matrices must be symmetric".into()));
        }
        let psd6 = |m: &Matrix6<f64>| m.symmetric_eigenvalues().iter().all(|e| *e >= -1e-9);
        if !psd6(&self.k1) || !psd6(&self.d1) {
            return Err(Error::Config("K1/D1 must be positive semi-definite".into()));
        }
        let psd = |m: &DMatrix<f64>| m.clone().symmetric_eigenvalues().iter().all(|e| *e >= -1e-9);
        if !psd(&self.k2) || !psd(&self.d2) {
            return Err(Error::Config("K2/D2 must be positive semi-definite".into()));
        }
        Ok(())
    }
}

/// Complementary 0/1 diagonal selections, given in the probe frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionMatrices {
    pub ee_si_diag: [f64; 6],
    pub ee_sf_diag: [f64; 6],
}

impl Default for SelectionMatrices {
    fn default() -> Self {
        // probe-frame z force controlled, the rest impedance controlled
        SelectionMatrices {
            ee_si_diag: [1.0, 1.0, 0.0, 1.0, 1.0, 1.0],
            ee_sf_diag: [0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
        }
    }
}

impl SelectionMatrices {
    pub fn ee_si(&self) -> Matrix6<f64> {
        Matrix6::from_diagonal(&Vector6::from_row_slice(&self.ee_si_diag))
    }

    pub fn ee_sf(&self) -> Matrix6<f64> {
        Matrix6::from_diagonal(&Vector6::from_row_slice(&self.ee_sf_diag))
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..6 {
            let s = self.ee_si_diag[i] + self.ee_sf_diag[i];
            if (s - 1.0).abs() > 1e-12 {
                return Err(Error::Config(
                    "selection matrices must sum to the identity".into(),
                ));
            }
            for v in [self.ee_si_diag[i], self.ee_sf_diag[i]] {
                if v != 0.0 && v != 1.0 {
                    return Err(Error::Config("selection diagonals must be 0/1".into()));
                }
            }
        }
        Ok(())
    }
}

/// Similarity transform of a probe-frame selection matrix into the base
/// frame: `blockdiag(R,R) * S * blockdiag(R,R)^T`.
pub fn selection_to_base(r: &UnitQuaternion<f64>, ee_s: &Matrix6<f64>) -> Result<Matrix6<f64>> {
    let rm = r.to_rotation_matrix();
    let rmat = rm.matrix();
    if (rmat * rmat.transpose() - nalgebra::Matrix3::identity()).norm() > 1e-9 {
        return Err(Error::Domain("rotation must be orthonormal".into()));
    }
    let mut block = Matrix6::zeros();
    block.fixed_view_mut::<3, 3>(0, 0).copy_from(rmat);
    block.fixed_view_mut::<3, 3>(3, 3).copy_from(rmat);
    Ok(block * ee_s * block.transpose())
}

/// Desired pose, desired contact wrench and null-space rest posture.
#[derive(Debug, Clone)]
pub struct TrackingTarget {
    pub pose: Pose,
    /// Desired contact wrench, probe frame (the wrench the probe should
    /// apply to the skin).
    pub wrench: Wrench,
    pub q_rest: DVector<f64>,
}

impl TrackingTarget {
    pub fn hold(pose: Pose, q_rest: DVector<f64>) -> TrackingTarget {
        TrackingTarget {
            pose,
            wrench: Wrench::zero(WrenchFrame::Probe),
            q_rest,
        }
    }
}

/// Cartesian pose error `x - x_d` as a 6-vector: translation difference and
/// the rotation vector of `R_d^-1 R` mapped into the base frame.
pub fn pose_error(x: &Pose, x_d: &Pose) -> Vector6<f64> {
    let e_pos = x.position - x_d.position;
    let rel = x_d.orientation.inverse() * x.orientation;
    let e_rot = x_d.orientation * rel.scaled_axis();
    Vector6::new(e_pos.x, e_pos.y, e_pos.z, e_rot.x, e_rot.y, e_rot.z)
}

/// Main-task torque: impedance on the selected axes plus direct force
/// control with feedforward on the complement.
pub fn main_task_torque(
    gains: &Gains,
    j: &DMatrix<f64>,
    s_i: &Matrix6<f64>,
    s_f: &Matrix6<f64>,
    x_err: &Vector6<f64>,
    xdot: &Vector6<f64>,
    f_d: &Vector6<f64>,
    f_e: &Vector6<f64>,
) -> DVector<f64> {
    let imp = s_i * (-gains.k1 * x_err - gains.d1 * xdot);
    let frc = s_f * (f_d + gains.kf * (f_d - f_e));
    let total = imp + frc;
    j.transpose() * DVector::from_column_slice(total.as_slice())
}

/// Null-space posture torque through the projector `I - J^T J^{+T}`.
pub fn null_space_torque(
    gains: &Gains,
    j: &DMatrix<f64>,
    j_pinv: &DMatrix<f64>,
    q_err: &DVector<f64>,
    dq: &DVector<f64>,
) -> DVector<f64> {
    let n = q_err.len();
    let proj = DMatrix::identity(n, n) - j.transpose() * j_pinv.transpose();
    proj * (-&gains.k2 * q_err - &gains.d2 * dq)
}

/// Full control torque: main task + null-space task + gravity and Coriolis
/// compensation. `f_e` is the measured contact wrench in the probe frame.
pub fn control_torque(
    model: &ArmModel,
    state: &JointState,
    target: &TrackingTarget,
    gains: &Gains,
    selections: &SelectionMatrices,
    f_e: &Wrench,
) -> Result<DVector<f64>> {
    let pose = forward_kinematics(model, &state.q);
    let j = jacobian(model, &state.q);
    let xdot_v = &j * &state.dq;
    let xdot = Vector6::from_column_slice(xdot_v.as_slice());
    let x_err = pose_error(&pose, &target.pose);

    let s_i = selection_to_base(&pose.orientation, &selections.ee_si())?;
    let s_f = selection_to_base(&pose.orientation, &selections.ee_sf())?;
    let f_d_base = target.wrench.to_base(&pose.orientation).as_vector6();
    let f_e_base = f_e.to_base(&pose.orientation).as_vector6();

    let tau_m = main_task_torque(gains, &j, &s_i, &s_f, &x_err, &xdot, &f_d_base, &f_e_base);
    let j_pinv = damped_pseudo_inverse(&j, gains.pinv_damping);
    let q_err = &state.q - &target.q_rest;
    let tau_n = null_space_torque(gains, &j, &j_pinv, &q_err, &state.dq);
    let (coriolis, gravity) = bias_terms(model, &state.q, &state.dq);

    for (name, v) in [
        ("main-task torque", &tau_m),
        ("null-space torque", &tau_n),
        ("coriolis compensation", &coriolis),
        ("gravity compensation", &gravity),
    ] {
        if !v.iter().all(|x| x.is_finite()) {
            return Err(Error::Fault(format!("non-finite {name}")));
        }
    }
    Ok(tau_m + tau_n + coriolis + gravity)
}

/// First-order low-pass between navigation targets: exponential smoothing
/// with `beta = 1 - exp(-2 pi f dt)` on position and desired wrench, and
/// spherical interpolation on the rotation manifold.
pub fn lowpass(
    prev: &TrackingTarget,
    raw: &TrackingTarget,
    cutoff_hz: f64,
    dt: f64,
) -> TrackingTarget {
    assert!(cutoff_hz > 0.0 && dt > 0.0);
    let beta = 1.0 - (-2.0 * std::f64::consts::PI * cutoff_hz * dt).exp();
    let position = prev.pose.position + beta * (raw.pose.position - prev.pose.position);
    let orientation = prev
        .pose
        .orientation
        .try_slerp(&raw.pose.orientation, beta, 1e-12)
        .unwrap_or(raw.pose.orientation);
    let force = prev.wrench.force + beta * (raw.wrench.force - prev.wrench.force);
    let torque = prev.wrench.torque + beta * (raw.wrench.torque - prev.wrench.torque);
    TrackingTarget {
        pose: Pose::new(position, orientation),
        wrench: Wrench {
            force,
            torque,
            frame: raw.wrench.frame,
        },
        q_rest: raw.q_rest.clone(),
    }
}
