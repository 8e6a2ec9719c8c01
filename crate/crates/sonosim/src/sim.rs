//! Closed-loop simulation: the arm under the hybrid controller in contact
//! with a placed phantom, stepped at the control rate with navigation
//! targets held and low-pass filtered between ticks.
//!
//! The 10 Hz navigation producer and the 1 kHz consumer are simulated
//! synchronously: each navigation tick publishes one raw target which the
//! control loop smooths over the following window (last-value-wins).

use nalgebra::{DVector, UnitQuaternion, Vector3};

use crate::arm::{
    forward_kinematics, jacobian, solve_ik, ArmModel, JointState, Pose, Wrench,
};
use crate::config::RunConfig;
use crate::controller::{control_torque, lowpass, Gains, SelectionMatrices, TrackingTarget};
use crate::dynamics::{joint_torques_from_ee_wrench, step_dynamics};
use crate::imaging::{render, render_probe_view, CameraModel, LandmarkTruth, ProbeModel, UltrasoundFrame};
use crate::phantom::{ContactState, PhantomSpec, PlacedPhantom};
use crate::Result;

/// Immutable world description for one simulation.
pub struct SimWorld {
    pub model: ArmModel,
    pub phantom: PlacedPhantom,
    pub probe: ProbeModel,
    pub camera: CameraModel,
    pub gains: Gains,
    pub selections: SelectionMatrices,
    pub control_dt: f64,
    pub nav_dt: f64,
    pub cutoff_hz: f64,
    pub q_rest: DVector<f64>,
}

impl SimWorld {
    pub fn from_config(cfg: &RunConfig, spec: PhantomSpec) -> SimWorld {
        SimWorld {
            model: cfg.arm.clone(),
            phantom: PlacedPhantom {
                spec,
                origin: cfg.phantom_origin,
            },
            probe: cfg.probe.clone(),
            camera: cfg.camera.clone(),
            gains: cfg.control.gains.build(cfg.arm.dof()),
            selections: cfg.control.selections.clone(),
            control_dt: cfg.control.control_dt,
            nav_dt: cfg.control.nav_dt,
            cutoff_hz: cfg.control.cutoff_hz,
            q_rest: cfg.q_rest_vec(),
        }
    }

    pub fn substeps_per_tick(&self) -> usize {
        (self.nav_dt / self.control_dt).round() as usize
    }
}

/// Mutable simulation state.
pub struct SimState {
    pub joints: JointState,
    pub t: f64,
    /// Low-pass filtered target consumed by the control loop.
    pub filtered: TrackingTarget,
    /// Contact at the most recent control step.
    pub contact: ContactState,
}

/// Sensor readouts at a navigation tick.
pub struct SensorFrame {
    pub ultrasound: UltrasoundFrame,
    pub truth: LandmarkTruth,
    pub probe_view: UltrasoundFrame,
    pub pose: Pose,
    /// Measured contact wrench (probe frame).
    pub wrench: Wrench,
    pub in_contact: bool,
}

impl SimWorld {
    pub fn probe_pose(&self, joints: &JointState) -> Pose {
        forward_kinematics(&self.model, &joints.q)
    }

    pub fn probe_twist(&self, joints: &JointState) -> [f64; 6] {
        let j = jacobian(&self.model, &joints.q);
        let v = j * &joints.dq;
        [v[0], v[1], v[2], v[3], v[4], v[5]]
    }

    /// Initial state with the probe placed at `pose` (via IK from the rest
    /// posture) and the filter primed on a hold-in-place target.
    pub fn init_state(&self, pose: &Pose) -> Result<SimState> {
        let q = solve_ik(&self.model, pose, &self.q_rest, 400)?;
        let joints = JointState {
            q,
            dq: DVector::zeros(self.model.dof()),
        };
        let actual = self.probe_pose(&joints);
        let contact = self
            .phantom
            .contact_wrench(&actual, &self.probe_twist(&joints));
        Ok(SimState {
            t: 0.0,
            filtered: TrackingTarget::hold(actual, self.q_rest.clone()),
            contact,
            joints,
        })
    }

    /// One control-rate step against `raw` (the zero-order-held navigation
    /// target). Updates the filter, contact and joint state.
    pub fn control_step(&self, state: &mut SimState, raw: &TrackingTarget) -> Result<()> {
        state.filtered = lowpass(&state.filtered, raw, self.cutoff_hz, self.control_dt);
        let pose = self.probe_pose(&state.joints);
        let twist = self.probe_twist(&state.joints);
        let contact = self.phantom.contact_wrench(&pose, &twist);
        let f_e = contact.measured_wrench();
        let tau = control_torque(
            &self.model,
            &state.joints,
            &state.filtered,
            &self.gains,
            &self.selections,
            &f_e,
        )?;
        let reaction = contact.wrench_on_probe.to_base(&pose.orientation);
        let tau_e = joint_torques_from_ee_wrench(&self.model, &state.joints.q, &reaction);
        state.joints = step_dynamics(&self.model, &state.joints, &tau, &tau_e, self.control_dt)?;
        state.t += self.control_dt;
        state.contact = contact;
        Ok(())
    }

    /// Run one navigation window (all control substeps under one target).
    pub fn nav_window(&self, state: &mut SimState, raw: &TrackingTarget) -> Result<()> {
        for _ in 0..self.substeps_per_tick() {
            self.control_step(state, raw)?;
        }
        Ok(())
    }

    /// Sensor readouts for the current state; deterministic given the seed.
    pub fn sense(&self, state: &SimState, rng_seed: u64) -> SensorFrame {
        let pose = self.probe_pose(&state.joints);
        let contact = self
            .phantom
            .contact_wrench(&pose, &self.probe_twist(&state.joints));
        let (ultrasound, truth) = render(
            &self.phantom,
            &pose,
            &contact,
            &self.probe,
            state.t,
            rng_seed,
        );
        let probe_view = render_probe_view(
            &self.phantom,
            &pose,
            &self.camera,
            rng_seed.wrapping_add(1),
        );
        SensorFrame {
            ultrasound,
            truth,
            probe_view,
            pose,
            wrench: contact.measured_wrench(),
            in_contact: contact.in_contact,
        }
    }

    /// Scan start pose above the phantom: arc-length `s`, lateral offset
    /// from the artery, hover height above the skin surface, small tilt
    /// about the probe x-axis.
    pub fn start_pose(&self, s: f64, lateral_offset: f64, height: f64, tilt: f64) -> Pose {
        let artery_y = self.phantom.origin[1] + self.phantom.spec.lateral_offset(s);
        let position = Vector3::new(
            self.phantom.origin[0] + s,
            artery_y + lateral_offset,
            self.phantom.crest_z() + height,
        );
        let orientation = crate::phantom::scan_orientation()
            * UnitQuaternion::from_axis_angle(&Vector3::x_axis(), tilt);
        Pose::new(position, orientation)
    }
}
