//! Rigid-body dynamics for the serial arm.
//!
//! Inverse dynamics uses the recursive Newton-Euler algorithm; the mass
//! matrix comes from the composite-rigid-body algorithm. The Coriolis
//! vector is obtained as inverse dynamics with gravity off and zero
//! acceleration, which keeps every term independently oracle-checkable.

use nalgebra::{DMatrix, DVector, Matrix3, UnitQuaternion, Vector3};

use crate::arm::{frame_chain, jacobian, ArmModel, JointState, Wrench, WrenchFrame};
use crate::{Error, Result};

/// Inverse dynamics: torques that realize `qdd` at state `(q, dq)`.
/// `with_gravity = false` drops the gravitational field (used to isolate
/// the Coriolis/centrifugal term).
pub fn rnea(
    model: &ArmModel,
    q: &DVector<f64>,
    dq: &DVector<f64>,
    qdd: &DVector<f64>,
    with_gravity: bool,
) -> DVector<f64> {
    let n = model.dof();
    assert!(q.len() == n && dq.len() == n && qdd.len() == n);

    // Forward pass, all quantities expressed in each link's own frame.
    let mut omega = vec![Vector3::zeros(); n];
    let mut alpha = vec![Vector3::zeros(); n];
    let mut acc = vec![Vector3::zeros(); n]; // linear acceleration of link origin
    let mut rot = Vec::with_capacity(n); // R_{parent<-link i}

    let a_base = if with_gravity {
        -model.gravity_vec()
    } else {
        Vector3::zeros()
    };

    for i in 0..n {
        let link = &model.links[i];
        let axis = link.axis_vec().into_inner();
        let r_pi = UnitQuaternion::from_axis_angle(&link.axis_vec(), q[i]);
        let r_ip = r_pi.inverse();
        let p = link.offset_vec();

        let (om_p, al_p, a_p) = if i == 0 {
            (Vector3::zeros(), Vector3::zeros(), a_base)
        } else {
            (omega[i - 1], alpha[i - 1], acc[i - 1])
        };

        let om_p_in_i = r_ip * om_p;
        omega[i] = om_p_in_i + axis * dq[i];
        alpha[i] = r_ip * al_p + axis * qdd[i] + om_p_in_i.cross(&(axis * dq[i]));
        acc[i] = r_ip * (a_p + al_p.cross(&p) + om_p.cross(&om_p.cross(&p)));
        rot.push(r_pi);
    }

    // Net force/moment on each link about its COM.
    let mut f_net = vec![Vector3::zeros(); n];
    let mut n_net = vec![Vector3::zeros(); n];
    for i in 0..n {
        let link = &model.links[i];
        let c = link.com_vec();
        let a_c = acc[i] + alpha[i].cross(&c) + omega[i].cross(&omega[i].cross(&c));
        let ic = link.inertia_matrix();
        f_net[i] = link.mass * a_c;
        n_net[i] = ic * alpha[i] + omega[i].cross(&(ic * omega[i]));
    }

    // Backward pass: joint reaction forces/moments about link origins.
    let mut tau = DVector::zeros(n);
    let mut f_child = Vector3::zeros();
    let mut n_child = Vector3::zeros();
    for i in (0..n).rev() {
        let link = &model.links[i];
        let c = link.com_vec();
        let mut f = f_net[i];
        let mut m = n_net[i] + c.cross(&f_net[i]);
        if i + 1 < n {
            let child_off = model.links[i + 1].offset_vec();
            f += f_child;
            m += n_child + child_off.cross(&f_child);
        }
        // hand off to the parent expressed in the parent frame
        let axis = link.axis_vec().into_inner();
        tau[i] = axis.dot(&m);
        f_child = rot[i] * f;
        n_child = rot[i] * m;
    }
    tau
}

/// `(C(q,dq)·dq, g(q))`.
pub fn bias_terms(
    model: &ArmModel,
    q: &DVector<f64>,
    dq: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let zero = DVector::zeros(model.dof());
    let coriolis = rnea(model, q, dq, &zero, false);
    let gravity = rnea(model, q, &zero, &zero, true);
    (coriolis, gravity)
}

#[derive(Clone, Copy)]
struct SpatialInertia {
    mass: f64,
    com: Vector3<f64>,
    i_com: Matrix3<f64>,
}

impl SpatialInertia {
    fn transformed(&self, r: &UnitQuaternion<f64>, p: &Vector3<f64>) -> SpatialInertia {
        let rm = r.to_rotation_matrix();
        SpatialInertia {
            mass: self.mass,
            com: rm * self.com + p,
            i_com: rm.matrix() * self.i_com * rm.matrix().transpose(),
        }
    }

    fn merge(&self, other: &SpatialInertia) -> SpatialInertia {
        let mass = self.mass + other.mass;
        let com = (self.com * self.mass + other.com * other.mass) / mass;
        let shift = |si: &SpatialInertia| -> Matrix3<f64> {
            let d = si.com - com;
            si.i_com + si.mass * (Matrix3::identity() * d.dot(&d) - d * d.transpose())
        };
        SpatialInertia {
            mass,
            com,
            i_com: shift(self) + shift(other),
        }
    }

    /// Inertia about the frame origin.
    fn about_origin(&self) -> Matrix3<f64> {
        let c = self.com;
        self.i_com + self.mass * (Matrix3::identity() * c.dot(&c) - c * c.transpose())
    }
}

/// Composite-rigid-body mass matrix, n x n symmetric positive definite.
pub fn mass_matrix(model: &ArmModel, q: &DVector<f64>) -> DMatrix<f64> {
    let n = model.dof();
    let mut comp: Vec<SpatialInertia> = model
        .links
        .iter()
        .map(|l| SpatialInertia {
            mass: l.mass,
            com: l.com_vec(),
            i_com: l.inertia_matrix(),
        })
        .collect();
    let rot: Vec<UnitQuaternion<f64>> = model
        .links
        .iter()
        .enumerate()
        .map(|(i, l)| UnitQuaternion::from_axis_angle(&l.axis_vec(), q[i]))
        .collect();

    // subtree composites, built leaf-to-root
    let mut subtree = vec![comp[n - 1]; n];
    for i in (0..n).rev() {
        subtree[i] = comp[i];
        if i > 0 {
            let in_parent = comp[i].transformed(&rot[i], &model.links[i].offset_vec());
            comp[i - 1] = comp[i - 1].merge(&in_parent);
        }
    }

    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        let axis_i = model.links[i].axis_vec().into_inner();
        // spatial force of the subtree under unit angular acceleration
        // about joint i's axis (zero linear): f = m (axis x c), n = I_o axis
        let si = &subtree[i];
        let mut f = si.mass * axis_i.cross(&si.com);
        let mut mom = si.about_origin() * axis_i;
        m[(i, i)] = axis_i.dot(&mom) + model.rotor_inertia;
        let mut k = i;
        while k > 0 {
            // move the force into the parent frame of link k
            f = rot[k] * f;
            mom = rot[k] * mom + model.links[k].offset_vec().cross(&f);
            k -= 1;
            let axis_k = model.links[k].axis_vec().into_inner();
            m[(k, i)] = axis_k.dot(&mom);
            m[(i, k)] = m[(k, i)];
        }
    }
    m
}

/// Sum of per-link kinetic energies computed from link twists; independent
/// of [`mass_matrix`] and used as its oracle.
pub fn kinetic_energy(model: &ArmModel, state: &JointState) -> f64 {
    let n = model.dof();
    let mut omega = Vector3::zeros();
    let mut vel = Vector3::zeros();
    let mut ke = 0.0;
    for i in 0..n {
        let link = &model.links[i];
        let axis = link.axis_vec().into_inner();
        let r_ip = UnitQuaternion::from_axis_angle(&link.axis_vec(), state.q[i]).inverse();
        let p = link.offset_vec();
        vel = r_ip * (vel + omega.cross(&p));
        omega = r_ip * omega + axis * state.dq[i];
        let v_com = vel + omega.cross(&link.com_vec());
        ke += 0.5 * link.mass * v_com.dot(&v_com)
            + 0.5 * omega.dot(&(link.inertia_matrix() * omega))
            + 0.5 * model.rotor_inertia * state.dq[i] * state.dq[i];
    }
    ke
}

/// Gravitational potential energy; its q-gradient is the gravity vector.
pub fn potential_energy(model: &ArmModel, q: &DVector<f64>) -> f64 {
    let chain = frame_chain(model, q);
    let g = model.gravity_vec();
    let mut pe = 0.0;
    for (i, link) in model.links.iter().enumerate() {
        let com_world = chain.joint_poses[i].transform_point(&link.com_vec());
        pe -= link.mass * g.dot(&com_world);
    }
    pe
}

/// Advance the state by one semi-implicit Euler step of
/// `M qdd = tau + tau_e - C dq - g`.
pub fn step_dynamics(
    model: &ArmModel,
    state: &JointState,
    tau: &DVector<f64>,
    tau_e: &DVector<f64>,
    dt: f64,
) -> Result<JointState> {
    assert!(dt > 0.0, "dt must be positive");
    if !tau.iter().all(|v| v.is_finite()) {
        return Err(Error::Fault("non-finite control torque".into()));
    }
    if !tau_e.iter().all(|v| v.is_finite()) {
        return Err(Error::Fault("non-finite external torque".into()));
    }
    let (c, g) = bias_terms(model, &state.q, &state.dq);
    let m = mass_matrix(model, &state.q);
    let rhs = tau + tau_e - c - g;
    let qdd = m
        .cholesky()
        .ok_or_else(|| Error::Fault("mass matrix not positive definite".into()))?
        .solve(&rhs);
    let dq = &state.dq + qdd * dt;
    let q = &state.q + &dq * dt;
    let next = JointState { q, dq };
    if !next.is_finite() {
        return Err(Error::Fault("state diverged to non-finite values".into()));
    }
    Ok(next)
}

/// Joint torques equivalent to a base-frame wrench applied at the
/// end effector: `tau_e = J^T w`.
pub fn joint_torques_from_ee_wrench(
    model: &ArmModel,
    q: &DVector<f64>,
    wrench_on_ee: &Wrench,
) -> DVector<f64> {
    assert_eq!(
        wrench_on_ee.frame,
        WrenchFrame::Base,
        "external wrench must be in the base frame"
    );
    let j = jacobian(model, q);
    j.transpose() * wrench_on_ee.as_dvector()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arm::Link;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_state(rng: &mut ChaCha8Rng, n: usize) -> JointState {
        JointState {
            q: DVector::from_fn(n, |_, _| rng.gen_range(-1.2..1.2)),
            dq: DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0)),
        }
    }

    #[test]
    fn mass_matrix_symmetric_positive_definite() {
        let model = ArmModel::default_7dof();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let s = random_state(&mut rng, 7);
            let m = mass_matrix(&model, &s.q);
            let asym = (&m - m.transpose()).norm();
            assert!(asym < 1e-10, "asymmetry {asym:.2e}");
            let eig = m.symmetric_eigenvalues();
            assert!(eig.iter().all(|l| *l > 0.0), "eigenvalues {eig:?}");
        }
    }

    #[test]
    fn mass_matrix_matches_kinetic_energy() {
        let model = ArmModel::default_7dof();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..50 {
            let s = random_state(&mut rng, 7);
            let m = mass_matrix(&model, &s.q);
            let quad = 0.5 * s.dq.dot(&(&m * &s.dq));
            let ke = kinetic_energy(&model, &s);
            assert_relative_eq!(quad, ke, epsilon = 1e-8, max_relative = 1e-8);
        }
    }

    #[test]
    fn single_link_inertia_matches_hand_formula() {
        // one revolute joint about y, point-ish link: M = m r^2 + Iyy
        let link = Link {
            offset: [0.0, 0.0, 0.0],
            axis: [0.0, 1.0, 0.0],
            mass: 2.0,
            com: [0.3, 0.0, 0.0],
            inertia_diag: [0.01, 0.02, 0.01],
        };
        let model = ArmModel {
            links: vec![link],
            tool_offset: [0.0, 0.0, 0.0],
            gravity: [0.0, 0.0, -9.81],
            joint_limit: 10.0,
            rotor_inertia: 0.0,
        };
        let m = mass_matrix(&model, &DVector::zeros(1));
        assert_relative_eq!(m[(0, 0)], 2.0 * 0.09 + 0.02, epsilon = 1e-12);
    }

    #[test]
    fn coriolis_vanishes_at_rest() {
        let model = ArmModel::default_7dof();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let q = DVector::from_fn(7, |_, _| rng.gen_range(-1.0..1.0));
        let (c, _) = bias_terms(&model, &q, &DVector::zeros(7));
        assert!(c.norm() < 1e-12);
    }

    #[test]
    fn gravity_matches_potential_gradient() {
        let model = ArmModel::default_7dof();
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let h = 1e-6;
        for _ in 0..20 {
            let q = DVector::from_fn(7, |_, _| rng.gen_range(-1.2..1.2));
            let (_, g) = bias_terms(&model, &q, &DVector::zeros(7));
            for i in 0..7 {
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp[i] += h;
                qm[i] -= h;
                let fd = (potential_energy(&model, &qp) - potential_energy(&model, &qm)) / (2.0 * h);
                assert!(
                    (g[i] - fd).abs() < 1e-6,
                    "joint {i}: g {} vs fd {}",
                    g[i],
                    fd
                );
            }
        }
    }

    #[test]
    fn gravity_compensation_holds_still() {
        let model = ArmModel::default_7dof();
        let mut q = DVector::zeros(7);
        q[1] = 0.8;
        q[3] = 1.1;
        let state = JointState {
            q: q.clone(),
            dq: DVector::zeros(7),
        };
        let (_, g) = bias_terms(&model, &q, &state.dq);
        let next = step_dynamics(&model, &state, &g, &DVector::zeros(7), 1e-3).unwrap();
        assert!((next.q - q).norm() < 1e-9);
        assert!(next.dq.norm() < 1e-9);
    }

    #[test]
    fn free_motion_energy_conserved_without_gravity() {
        let mut model = ArmModel::default_7dof();
        model.gravity = [0.0, 0.0, 0.0];
        let mut state = JointState {
            q: DVector::zeros(7),
            dq: DVector::from_vec(vec![0.4, -0.3, 0.5, 0.2, -0.4, 0.3, 0.1]),
        };
        state.q[1] = 0.6;
        state.q[3] = 1.0;
        let e0 = kinetic_energy(&model, &state);
        let zero = DVector::zeros(7);
        for _ in 0..1000 {
            state = step_dynamics(&model, &state, &zero, &zero, 1e-3).unwrap();
        }
        let e1 = kinetic_energy(&model, &state);
        assert!(
            (e1 - e0).abs() / e0 < 0.01,
            "energy drift {:.3}%",
            100.0 * (e1 - e0).abs() / e0
        );
    }

    #[test]
    fn free_fall_energy_drift_small() {
        // swing released near the hanging equilibrium; drift is measured
        // against the peak kinetic energy actually exchanged
        let model = ArmModel::default_7dof();
        let mut state = JointState::zero(7);
        state.q[1] = 2.5;
        state.q[3] = 0.25;
        state.q[5] = 0.1;
        let e0 = kinetic_energy(&model, &state) + potential_energy(&model, &state.q);
        let zero = DVector::zeros(7);
        let mut max_drift: f64 = 0.0;
        let mut max_ke: f64 = 0.0;
        for _ in 0..1000 {
            state = step_dynamics(&model, &state, &zero, &zero, 1e-3).unwrap();
            let ke = kinetic_energy(&model, &state);
            let e = ke + potential_energy(&model, &state.q);
            max_drift = max_drift.max((e - e0).abs());
            max_ke = max_ke.max(ke);
        }
        assert!(
            max_drift / max_ke < 0.01,
            "free-fall energy drift {:.3}% of peak KE {max_ke:.2} J",
            100.0 * max_drift / max_ke
        );
    }

    #[test]
    fn ee_wrench_path_equivalent_to_joint_torques() {
        let model = ArmModel::default_7dof();
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let s = random_state(&mut rng, 7);
        let w = Wrench {
            force: Vector3::new(1.5, -2.0, 3.0),
            torque: Vector3::new(0.2, 0.1, -0.3),
            frame: WrenchFrame::Base,
        };
        let tau_e = joint_torques_from_ee_wrench(&model, &s.q, &w);
        // accelerations must match whether the wrench enters as tau_e or as
        // an equivalent torque added to tau
        let zero = DVector::zeros(7);
        let a = step_dynamics(&model, &s, &zero, &tau_e, 1e-3).unwrap();
        let b = step_dynamics(&model, &s, &tau_e, &zero, 1e-3).unwrap();
        assert!((a.dq - b.dq).norm() < 1e-12);
    }

    #[test]
    fn non_finite_torque_faults() {
        let model = ArmModel::default_7dof();
        let state = JointState::zero(7);
        let mut tau = DVector::zeros(7);
        tau[2] = f64::NAN;
        let err = step_dynamics(&model, &state, &tau, &DVector::zeros(7), 1e-3);
        assert!(matches!(err, Err(Error::Fault(_))));
    }
}
