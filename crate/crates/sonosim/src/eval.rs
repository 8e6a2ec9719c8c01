//! Closed-loop rollout execution, the metric suite (success rate, landmark
//! centering, force rate, SSIM against expert references) and the
//! baselines: a direct-regression BC policy and a rule-based visual servo
//! with parameters calibrated on the training phantoms only.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::arm::{Pose, Wrench, WrenchFrame};
use crate::config::{derive_seed, RunConfig};
use crate::controller::TrackingTarget;
use crate::expert::{Expert, ExpertParams};
use crate::imaging::UltrasoundFrame;
use crate::io::{ByteReader, ByteWriter};
use crate::perception::EncoderParams;
use crate::phantom::sample_phantom;
use crate::policy::{
    apply_step, ActionChunk, ActionStep, BcBundle, GuidanceConfig, Observation, PolicyBundle,
    ACTION_DIM,
};
use crate::sim::{SensorFrame, SimWorld};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// SSIM

/// Mean structural similarity between two equal-size grayscale images on
/// the [0,1] range: sliding 8x8 uniform windows, c1 = 0.01^2, c2 = 0.03^2.
pub fn ssim(a: &[u8], b: &[u8], width: usize, height: usize) -> f64 {
    assert_eq!(a.len(), width * height);
    assert_eq!(b.len(), width * height);
    const WIN: usize = 8;
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    // integral images for sum, square sums and cross sum
    let iw = width + 1;
    let ih = height + 1;
    let mut sa = vec![0.0f64; iw * ih];
    let mut sb = vec![0.0f64; iw * ih];
    let mut saa = vec![0.0f64; iw * ih];
    let mut sbb = vec![0.0f64; iw * ih];
    let mut sab = vec![0.0f64; iw * ih];
    for r in 0..height {
        for c in 0..width {
            let va = a[r * width + c] as f64 / 255.0;
            let vb = b[r * width + c] as f64 / 255.0;
            let i = (r + 1) * iw + (c + 1);
            let up = r * iw + (c + 1);
            let left = (r + 1) * iw + c;
            let diag = r * iw + c;
            sa[i] = va + sa[up] + sa[left] - sa[diag];
            sb[i] = vb + sb[up] + sb[left] - sb[diag];
            saa[i] = va * va + saa[up] + saa[left] - saa[diag];
            sbb[i] = vb * vb + sbb[up] + sbb[left] - sbb[diag];
            sab[i] = va * vb + sab[up] + sab[left] - sab[diag];
        }
    }
    let window_sum = |s: &[f64], r: usize, c: usize| -> f64 {
        s[(r + WIN) * iw + (c + WIN)] - s[r * iw + (c + WIN)] - s[(r + WIN) * iw + c]
            + s[r * iw + c]
    };
    let n = (WIN * WIN) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..=(height - WIN) {
        for c in 0..=(width - WIN) {
            let mu_a = window_sum(&sa, r, c) / n;
            let mu_b = window_sum(&sb, r, c) / n;
            let var_a = (window_sum(&saa, r, c) / n - mu_a * mu_a).max(0.0);
            let var_b = (window_sum(&sbb, r, c) / n - mu_b * mu_b).max(0.0);
            let cov = window_sum(&sab, r, c) / n - mu_a * mu_b;
            let s = ((2.0 * mu_a * mu_b + C1) * (2.0 * cov + C2))
                / ((mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2));
            total += s;
            count += 1;
        }
    }
    total / count as f64
}

/// Per-frame SSIM after linear time alignment of the two sequences,
/// averaged.
pub fn ssim_sequences(a: &[Vec<u8>], b: &[Vec<u8>], width: usize, height: usize) -> f64 {
    assert!(!a.is_empty() && !b.is_empty());
    let n = a.len().min(b.len());
    let pick = |len: usize, i: usize| -> usize {
        if n == 1 {
            0
        } else {
            ((i as f64) * (len - 1) as f64 / (n - 1) as f64).round() as usize
        }
    };
    let mut total = 0.0;
    for i in 0..n {
        total += ssim(&a[pick(a.len(), i)], &b[pick(b.len(), i)], width, height);
    }
    total / n as f64
}

// ---------------------------------------------------------------------------
// Bifurcation detector (navigation-side stop signal for learned policies)

/// Counts dark vessel blobs in the artery depth band; two blobs for a few
/// consecutive ticks signal the bifurcation. Degradation-blacked columns
/// are ignored by requiring a bright near-field above the blob.
#[derive(Debug, Clone)]
pub struct BifurcationDetector {
    consecutive: usize,
    needed: usize,
}

impl BifurcationDetector {
    pub fn new(needed: usize) -> BifurcationDetector {
        BifurcationDetector {
            consecutive: 0,
            needed,
        }
    }

    pub fn vessels_in_frame(frame: &UltrasoundFrame) -> usize {
        let w = frame.width;
        let h = frame.height;
        let band0 = h * 12 / 64;
        let band1 = h * 44 / 64;
        let top0 = h / 64;
        let top1 = h * 6 / 64;
        let mut dark = vec![false; w];
        for (c, d) in dark.iter_mut().enumerate() {
            let mut dark_px = 0usize;
            for r in band0..band1 {
                if frame.get(r, c) < 0.22 {
                    dark_px += 1;
                }
            }
            let mut top_sum = 0.0f32;
            for r in top0..top1 {
                top_sum += frame.get(r, c);
            }
            let top_mean = top_sum / (top1 - top0) as f32;
            *d = dark_px >= 3 && top_mean > 0.35;
        }
        // count dark runs (>= 2 wide) separated by >= 3 bright columns
        let mut blobs = 0usize;
        let mut run = 0usize;
        let mut gap = usize::MAX / 2;
        for c in 0..w {
            if dark[c] {
                run += 1;
                if run == 2 && gap >= 3 {
                    blobs += 1;
                }
                if run >= 2 {
                    gap = 0;
                }
            } else {
                if run < 2 && gap < usize::MAX / 2 {
                    // narrow speckle run; keep previous gap counting
                }
                gap = gap.saturating_add(1);
                run = 0;
            }
        }
        blobs
    }

    /// Feed one frame; returns true when the stop condition fires.
    pub fn observe(&mut self, frame: &UltrasoundFrame) -> bool {
        if Self::vessels_in_frame(frame) >= 2 {
            self.consecutive += 1;
        } else {
            self.consecutive = 0;
        }
        self.consecutive >= self.needed
    }
}

// ---------------------------------------------------------------------------
// Rollout logs and metrics

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminalReason {
    BifurcationStop,
    Timeout,
    SafetyFault,
    SimFault,
}

impl TerminalReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            TerminalReason::BifurcationStop => "bifurcation_stop",
            TerminalReason::Timeout => "timeout",
            TerminalReason::SafetyFault => "safety_fault",
            TerminalReason::SimFault => "sim_fault",
        }
    }

    fn to_u8(self) -> u8 {
        match self {
            TerminalReason::BifurcationStop => 0,
            TerminalReason::Timeout => 1,
            TerminalReason::SafetyFault => 2,
            TerminalReason::SimFault => 3,
        }
    }

    fn from_u8(v: u8) -> TerminalReason {
        match v {
            0 => TerminalReason::BifurcationStop,
            1 => TerminalReason::Timeout,
            2 => TerminalReason::SafetyFault,
            _ => TerminalReason::SimFault,
        }
    }
}

/// One navigation-tick record.
#[derive(Debug, Clone)]
pub struct TickRecord {
    pub t: f64,
    pub frame: Vec<u8>,
    pub truth_visible: bool,
    pub truth_l: f64,
    pub truth_n: u8,
    pub pred_prob: f32,
    pub pred_l: f32,
    pub pose: Pose,
    pub x_d: Pose,
    pub f_e: [f64; 6],
    pub f_d: [f64; 6],
    pub in_contact: bool,
    pub action: [f32; ACTION_DIM],
}

/// Complete rollout trace.
#[derive(Debug, Clone)]
pub struct RolloutLog {
    pub policy_name: String,
    pub phantom_seed: u64,
    pub trial_seed: u64,
    pub config_hash: [u8; 32],
    pub image_width_px: usize,
    pub image_height_px: usize,
    pub nav_dt: f64,
    pub bifurcation_s: f64,
    /// Arc-length along the phantom at termination.
    pub stop_s: f64,
    pub terminal: TerminalReason,
    pub ticks: Vec<TickRecord>,
}

/// Scalar metrics for one rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub success: bool,
    /// Mean |l - 0.5| * W over visible ticks; NaN when never visible.
    pub centering_px: f64,
    /// Mean |dF_d,z| / dt, N/s.
    pub force_rate: f64,
    /// Mean position tracking error, m.
    pub tracking_error_m: f64,
    /// NaN until paired against an expert reference log.
    pub ssim_vs_expert: f64,
    pub loss_of_contact: bool,
    pub terminal: TerminalReason,
}

/// Success: a centered transverse view on more than 60% of in-contact
/// ticks, and termination by a bifurcation stop within tolerance of the
/// true bifurcation.
pub fn success(log: &RolloutLog, center_tol_px: f64, stop_tol_m: f64) -> bool {
    let in_contact: Vec<&TickRecord> = log.ticks.iter().filter(|t| t.in_contact).collect();
    if in_contact.is_empty() {
        return false;
    }
    let centered = in_contact
        .iter()
        .filter(|t| {
            t.truth_visible
                && (t.truth_l - 0.5).abs() * log.image_width_px as f64 <= center_tol_px
        })
        .count();
    let frac = centered as f64 / in_contact.len() as f64;
    frac > 0.60
        && log.terminal == TerminalReason::BifurcationStop
        && (log.stop_s - log.bifurcation_s).abs() <= stop_tol_m
}

/// Mean landmark distance to the image center in pixels over visible
/// ticks; None when the landmark is never visible.
pub fn centering_distance(log: &RolloutLog) -> Option<f64> {
    let visible: Vec<&TickRecord> = log.ticks.iter().filter(|t| t.truth_visible).collect();
    if visible.is_empty() {
        return None;
    }
    Some(
        visible
            .iter()
            .map(|t| (t.truth_l - 0.5).abs() * log.image_width_px as f64)
            .sum::<f64>()
            / visible.len() as f64,
    )
}

/// Mean absolute change rate of the desired z-force, N/s.
pub fn force_rate(log: &RolloutLog) -> f64 {
    if log.ticks.len() < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for w in log.ticks.windows(2) {
        total += (w[1].f_d[2] - w[0].f_d[2]).abs();
    }
    total / ((log.ticks.len() - 1) as f64 * log.nav_dt)
}

/// Mean position tracking error against the published target, m.
pub fn tracking_error(log: &RolloutLog) -> f64 {
    if log.ticks.is_empty() {
        return 0.0;
    }
    log.ticks
        .iter()
        .map(|t| (t.pose.position - t.x_d.position).norm())
        .sum::<f64>()
        / log.ticks.len() as f64
}

/// Contact-loss classification: acoustic coupling lost (normal force below
/// the imaging threshold) on at least a quarter of the ticks, or at the
/// final tick.
pub fn loss_of_contact(log: &RolloutLog, min_contact_force: f64) -> bool {
    if log.ticks.is_empty() {
        return true;
    }
    let low = log
        .ticks
        .iter()
        .filter(|t| t.f_e[2] < min_contact_force)
        .count();
    let frac = low as f64 / log.ticks.len() as f64;
    frac >= 0.25 || log.ticks.last().unwrap().f_e[2] < min_contact_force
}

/// SSIM between two rollouts' frame sequences after time alignment; the
/// logs must come from the same phantom.
pub fn ssim_vs_expert(log: &RolloutLog, expert_log: &RolloutLog) -> Result<f64> {
    if log.phantom_seed != expert_log.phantom_seed {
        return Err(Error::Domain(
            "SSIM reference must come from the same phantom".into(),
        ));
    }
    let a: Vec<Vec<u8>> = log.ticks.iter().map(|t| t.frame.clone()).collect();
    let b: Vec<Vec<u8>> = expert_log.ticks.iter().map(|t| t.frame.clone()).collect();
    if a.is_empty() || b.is_empty() {
        return Ok(0.0);
    }
    Ok(ssim_sequences(
        &a,
        &b,
        log.image_width_px,
        log.image_height_px,
    ))
}

/// All single-log metrics (SSIM left NaN).
pub fn compute_metrics(log: &RolloutLog, cfg: &RunConfig) -> Metrics {
    Metrics {
        success: success(log, cfg.eval.center_tol_px, cfg.eval.stop_tol_m),
        centering_px: centering_distance(log).unwrap_or(f64::NAN),
        force_rate: force_rate(log),
        tracking_error_m: tracking_error(log),
        ssim_vs_expert: f64::NAN,
        loss_of_contact: loss_of_contact(log, cfg.probe.min_contact_force),
        terminal: log.terminal,
    }
}

// ---------------------------------------------------------------------------
// Navigation policies

/// Visual-servo calibration, averaged over the training phantoms only.
#[derive(Debug, Clone, Copy)]
pub struct VsCalibration {
    /// Mean skin crest height, base frame z.
    pub crest_z: f64,
    /// Mean bifurcation arc-length (the rule-based stop position).
    pub stop_s: f64,
}

pub fn calibrate_vs(cfg: &RunConfig) -> Result<VsCalibration> {
    let mut crest = 0.0;
    let mut stop = 0.0;
    let seeds = cfg.train_phantom_seeds();
    for seed in &seeds {
        let spec = sample_phantom(*seed, &cfg.phantom)?;
        crest += cfg.phantom_origin[2] + spec.skin_radius;
        stop += spec.bifurcation_s;
    }
    Ok(VsCalibration {
        crest_z: crest / seeds.len() as f64,
        stop_s: stop / seeds.len() as f64,
    })
}

/// The policies a rollout can run.
#[derive(Clone)]
pub enum NavPolicyKind {
    /// Guided diffusion policy (the system under test).
    Diffusion {
        bundle: Arc<PolicyBundle>,
        encoder: Arc<EncoderParams>,
        rho: f64,
        n_exec: usize,
    },
    /// Direct-regression baseline on the same data and encoders.
    Bc {
        bundle: Arc<BcBundle>,
        encoder: Arc<EncoderParams>,
        n_exec: usize,
    },
    /// Rule-based visual servo with geometry calibrated on the training
    /// phantoms.
    VisualServo {
        encoder: Arc<EncoderParams>,
        calib: VsCalibration,
    },
    /// Scripted expert (ground-truth access); the oracle upper bound and
    /// the SSIM reference.
    Expert,
    /// Uniform random actions; sanity lower bound.
    Random,
}

impl NavPolicyKind {
    pub fn name(&self) -> &'static str {
        match self {
            NavPolicyKind::Diffusion { rho, .. } => {
                if *rho > 0.0 {
                    "diffusion"
                } else {
                    "diffusion-unguided"
                }
            }
            NavPolicyKind::Bc { .. } => "bc",
            NavPolicyKind::VisualServo { .. } => "vs",
            NavPolicyKind::Expert => "expert",
            NavPolicyKind::Random => "random",
        }
    }
}

enum NavState {
    Chunked {
        /// Remaining steps of the current chunk (front = next).
        queue: Vec<(Pose, ActionStep)>,
        detector: BifurcationDetector,
        history: Vec<SensorFrame>,
        x_d: Pose,
        last_f: f64,
    },
    Vs {
        x_d: Pose,
        started: bool,
    },
    Expert(Box<Expert>),
    Random(ChaCha8Rng),
}

/// Run one closed-loop rollout.
pub fn rollout(
    cfg: &RunConfig,
    kind: &NavPolicyKind,
    phantom_seed: u64,
    trial_seed: u64,
) -> Result<RolloutLog> {
    let spec = sample_phantom(phantom_seed, &cfg.phantom)?;
    let bifurcation_s = spec.bifurcation_s;
    let world = SimWorld::from_config(cfg, spec);

    // start state: off-center, slightly above the skin, small tilt
    let mut srng = ChaCha8Rng::seed_from_u64(derive_seed(trial_seed, "start", 0));
    let s0 = srng.gen_range(cfg.eval.start_s[0]..=cfg.eval.start_s[1]);
    let lat_mag = srng.gen_range(cfg.eval.start_lateral_mag[0]..=cfg.eval.start_lateral_mag[1]);
    let lat = if srng.gen_bool(0.5) { lat_mag } else { -lat_mag };
    let height = srng.gen_range(cfg.eval.start_height[0]..=cfg.eval.start_height[1]);
    let tilt_mag = srng.gen_range(cfg.eval.start_tilt_mag[0]..=cfg.eval.start_tilt_mag[1]);
    let tilt = if srng.gen_bool(0.5) { tilt_mag } else { -tilt_mag };
    let start = world.start_pose(s0, lat, height, tilt);
    let mut state = world.init_state(&start)?;

    let q_rest = cfg.q_rest_vec();
    let mut nav = match kind {
        NavPolicyKind::Diffusion { .. } | NavPolicyKind::Bc { .. } => NavState::Chunked {
            queue: Vec::new(),
            detector: BifurcationDetector::new(cfg.eval.detect_ticks),
            history: Vec::new(),
            x_d: Pose::new(start.position, crate::phantom::scan_orientation()),
            last_f: 0.0,
        },
        NavPolicyKind::VisualServo { .. } => NavState::Vs {
            x_d: Pose::new(start.position, crate::phantom::scan_orientation()),
            started: false,
        },
        NavPolicyKind::Expert => {
            let params = ExpertParams::sample(&cfg.expert, derive_seed(trial_seed, "exp", 0));
            NavState::Expert(Box::new(Expert::new(
                cfg.expert.clone(),
                params,
                cfg.probe.clone(),
                q_rest.clone(),
                cfg.control.nav_dt,
                start,
            )))
        }
        NavPolicyKind::Random => {
            NavState::Random(ChaCha8Rng::seed_from_u64(derive_seed(trial_seed, "rand", 0)))
        }
    };

    let max_ticks = (cfg.eval.timeout_s / cfg.control.nav_dt) as usize;
    let mut ticks: Vec<TickRecord> = Vec::new();
    let mut terminal = TerminalReason::Timeout;
    let mut stop_s = 0.0;
    for tick in 0..max_ticks {
        let sensors = world.sense(&state, derive_seed(trial_seed, "render", tick as u64));
        let s_now = sensors.pose.position.x - world.phantom.origin[0];
        stop_s = s_now;

        // safety envelope
        let f_norm = sensors.wrench.force.norm();
        let t_norm = sensors.wrench.torque.norm();
        if f_norm > cfg.eval.safety_force || t_norm > cfg.eval.safety_torque {
            terminal = TerminalReason::SafetyFault;
            break;
        }

        let (target, stop, pred, action) =
            nav_tick(cfg, kind, &mut nav, &sensors, tick, trial_seed, s_now, &q_rest);

        ticks.push(TickRecord {
            t: state.t,
            frame: sensors.ultrasound.to_u8(),
            truth_visible: sensors.truth.visible,
            truth_l: sensors.truth.l,
            truth_n: sensors.truth.n_vessels as u8,
            pred_prob: pred.0,
            pred_l: pred.1,
            pose: sensors.pose,
            x_d: target.pose,
            f_e: *sensors.wrench.as_vector6().as_slice().try_into().as_ref().unwrap(),
            f_d: *target.wrench.as_vector6().as_slice().try_into().as_ref().unwrap(),
            in_contact: sensors.in_contact,
            action,
        });

        if stop {
            terminal = TerminalReason::BifurcationStop;
            break;
        }
        match world.nav_window(&mut state, &target) {
            Ok(()) => {}
            Err(Error::Fault(_)) => {
                terminal = TerminalReason::SimFault;
                break;
            }
            Err(e) => return Err(e),
        }
    }

    Ok(RolloutLog {
        policy_name: kind.name().to_string(),
        phantom_seed,
        trial_seed,
        config_hash: cfg.data_hash(),
        image_width_px: cfg.probe.image_width_px,
        image_height_px: cfg.probe.image_height_px,
        nav_dt: cfg.control.nav_dt,
        bifurcation_s,
        stop_s,
        terminal,
        ticks,
    })
}

#[allow(clippy::too_many_arguments)]
fn nav_tick(
    cfg: &RunConfig,
    kind: &NavPolicyKind,
    nav: &mut NavState,
    sensors: &SensorFrame,
    tick: usize,
    trial_seed: u64,
    s_now: f64,
    q_rest: &nalgebra::DVector<f64>,
) -> (TrackingTarget, bool, (f32, f32), [f32; ACTION_DIM]) {
    match (kind, nav) {
        (NavPolicyKind::Expert, NavState::Expert(expert)) => {
            let (target, stop) = expert.step(&sensors.truth, &sensors.pose, &sensors.wrench, s_now);
            (target, stop, (f32::NAN, f32::NAN), [0.0; ACTION_DIM])
        }
        (NavPolicyKind::Random, NavState::Random(rng)) => {
            let dx = rng.gen_range(-0.01..0.01);
            let dy = rng.gen_range(-0.01..0.01);
            let fz = rng.gen_range(-1.0..5.0);
            let mut pose = sensors.pose;
            pose.position.x += dx;
            pose.position.y += dy;
            let target = TrackingTarget {
                pose,
                wrench: Wrench {
                    force: nalgebra::Vector3::new(0.0, 0.0, fz),
                    torque: nalgebra::Vector3::zeros(),
                    frame: WrenchFrame::Probe,
                },
                q_rest: q_rest.clone(),
            };
            (target, false, (f32::NAN, f32::NAN), [0.0; ACTION_DIM])
        }
        (
            NavPolicyKind::VisualServo { encoder, calib },
            NavState::Vs { x_d, started },
        ) => {
            let pred = encoder
                .predict(&sensors.ultrasound)
                .unwrap_or(crate::perception::LandmarkPrediction {
                    present_prob: 0.0,
                    l_hat: 0.5,
                });
            // position-referenced force law against the calibrated height
            let z_tgt = calib.crest_z - cfg.eval.vs_press_depth;
            let f_cmd = (cfg.eval.vs_stiffness * (sensors.pose.position.z - z_tgt))
                .clamp(0.0, 4.5);
            if sensors.wrench.force.z > 1.0 {
                *started = true;
            }
            if *started {
                x_d.position.x += 0.010 * cfg.control.nav_dt;
                if pred.present_prob > 0.5 {
                    let du = (pred.l_hat as f64 - 0.5) * cfg.probe.image_width_px as f64;
                    let dy = -cfg.eval.vs_lateral_gain * cfg.probe.a() * du;
                    let shift = x_d.orientation * nalgebra::Vector3::new(0.0, dy, 0.0);
                    x_d.position += shift;
                }
            }
            let stop = *started && s_now >= calib.stop_s;
            let target = TrackingTarget {
                pose: *x_d,
                wrench: Wrench {
                    force: nalgebra::Vector3::new(0.0, 0.0, f_cmd),
                    torque: nalgebra::Vector3::zeros(),
                    frame: WrenchFrame::Probe,
                },
                q_rest: q_rest.clone(),
            };
            (target, stop, (pred.present_prob, pred.l_hat), [0.0; ACTION_DIM])
        }
        (kind @ (NavPolicyKind::Diffusion { .. } | NavPolicyKind::Bc { .. }), NavState::Chunked {
            queue,
            detector,
            history,
            x_d,
            last_f,
        }) => {
            let obs_horizon = cfg.dataset.obs_horizon;
            history.push(clone_sensors(sensors));
            if history.len() > obs_horizon {
                let drop = history.len() - obs_horizon;
                history.drain(..drop);
            }
            let (encoder, n_exec) = match kind {
                NavPolicyKind::Diffusion { encoder, n_exec, .. } => (encoder, *n_exec),
                NavPolicyKind::Bc { encoder, n_exec, .. } => (encoder, *n_exec),
                _ => unreachable!(),
            };
            let pred = encoder
                .predict(&sensors.ultrasound)
                .unwrap_or(crate::perception::LandmarkPrediction {
                    present_prob: 0.0,
                    l_hat: 0.5,
                });
            let stop = detector.observe(&sensors.ultrasound);

            if queue.is_empty() {
                let obs = Observation::from_history(history, obs_horizon);
                let chunk: ActionChunk = match kind {
                    NavPolicyKind::Diffusion { bundle, rho, .. } => {
                        let guidance = GuidanceConfig::from_probe(&cfg.probe, *rho);
                        let l_now = (pred.present_prob > 0.5).then_some(pred.l_hat as f64);
                        bundle.act(
                            &obs,
                            &guidance,
                            l_now,
                            derive_seed(trial_seed, "sample", tick as u64),
                        )
                    }
                    NavPolicyKind::Bc { bundle, .. } => bundle.act(&obs),
                    _ => unreachable!(),
                };
                // anchor the chunk on the measured pose
                let mut anchor = sensors.pose;
                for step in chunk.steps.iter().take(n_exec) {
                    anchor = match apply_step(&anchor, step) {
                        Ok(p) => p,
                        Err(_) => anchor,
                    };
                    queue.push((anchor, *step));
                }
            }

            let (pose_target, step) = queue.remove(0);
            *x_d = pose_target;
            let fz = step.wrench[2];
            *last_f = fz;
            let action: [f32; ACTION_DIM] = {
                let arr = step.to_array();
                let mut out = [0.0f32; ACTION_DIM];
                for (o, v) in out.iter_mut().zip(arr.iter()) {
                    *o = *v as f32;
                }
                out
            };
            let target = TrackingTarget {
                pose: *x_d,
                wrench: Wrench {
                    force: nalgebra::Vector3::new(step.wrench[0], step.wrench[1], fz),
                    torque: nalgebra::Vector3::new(step.wrench[3], step.wrench[4], step.wrench[5]),
                    frame: WrenchFrame::Probe,
                },
                q_rest: q_rest.clone(),
            };
            (target, stop, (pred.present_prob, pred.l_hat), action)
        }
        _ => unreachable!("nav state does not match policy kind"),
    }
}

fn clone_sensors(s: &SensorFrame) -> SensorFrame {
    SensorFrame {
        ultrasound: s.ultrasound.clone(),
        truth: s.truth,
        probe_view: s.probe_view.clone(),
        pose: s.pose,
        wrench: s.wrench,
        in_contact: s.in_contact,
    }
}

// ---------------------------------------------------------------------------
// Comparison suite

/// One evaluated rollout within the suite.
#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub row: String,
    pub phantom_seed: u64,
    pub trial: usize,
    pub metrics: Metrics,
}

/// Run `n_heldout x trials` rollouts for each named policy row, pairing
/// start conditions across policies. Expert reference rollouts per phantom
/// feed the SSIM column. Trials run in parallel deterministically.
pub fn run_suite(
    cfg: &RunConfig,
    kinds: &[(String, NavPolicyKind)],
    out_dir: Option<&Path>,
) -> Result<Vec<TrialOutcome>> {
    let phantom_seeds = cfg.heldout_phantom_seeds();
    // expert references, one per held-out phantom
    let refs: Vec<RolloutLog> = phantom_seeds
        .par_iter()
        .map(|ps| {
            rollout(
                cfg,
                &NavPolicyKind::Expert,
                *ps,
                derive_seed(cfg.seed, "expert-ref", *ps),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        for (i, log) in refs.iter().enumerate() {
            save_log(log, &dir.join(format!("expert-ref-{i}.bin")))?;
        }
    }

    let mut jobs = Vec::new();
    for (name, kind) in kinds {
        for (pi, ps) in phantom_seeds.iter().enumerate() {
            for trial in 0..cfg.eval.trials_per_phantom {
                let trial_seed =
                    derive_seed(cfg.seed, "trial", (pi * cfg.eval.trials_per_phantom + trial) as u64);
                jobs.push((name.clone(), kind.clone(), *ps, pi, trial, trial_seed));
            }
        }
    }
    let outcomes: Vec<(RolloutLog, TrialOutcome)> = jobs
        .par_iter()
        .map(|(name, kind, ps, pi, trial, trial_seed)| {
            let log = rollout(cfg, kind, *ps, *trial_seed)?;
            let mut metrics = compute_metrics(&log, cfg);
            metrics.ssim_vs_expert = ssim_vs_expert(&log, &refs[*pi])?;
            Ok((
                log,
                TrialOutcome {
                    row: name.clone(),
                    phantom_seed: *ps,
                    trial: *trial,
                    metrics,
                },
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    if let Some(dir) = out_dir {
        for (log, outcome) in &outcomes {
            let path = dir.join(format!(
                "{}-p{}-t{}.bin",
                outcome.row, log.phantom_seed, outcome.trial
            ));
            save_log_with_metrics(log, &outcome.metrics, &path)?;
        }
    }
    Ok(outcomes.into_iter().map(|(_, o)| o).collect())
}

/// Aggregate per-row summary mirroring the comparison-table columns.
#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub name: String,
    pub successes: usize,
    pub trials: usize,
    pub centering_px: f64,
    pub ssim: f64,
    pub force_rate: f64,
    /// Among failures, the fraction classified as loss of contact.
    pub contact_loss_failure_frac: f64,
}

pub fn summarize(outcomes: &[TrialOutcome]) -> Vec<SummaryRow> {
    let mut names: Vec<String> = Vec::new();
    for o in outcomes {
        if !names.contains(&o.row) {
            names.push(o.row.clone());
        }
    }
    names
        .iter()
        .map(|name| {
            let rows: Vec<&TrialOutcome> = outcomes.iter().filter(|o| &o.row == name).collect();
            let successes = rows.iter().filter(|o| o.metrics.success).count();
            let failures: Vec<&&TrialOutcome> =
                rows.iter().filter(|o| !o.metrics.success).collect();
            let contact_loss = failures
                .iter()
                .filter(|o| o.metrics.loss_of_contact)
                .count();
            let mean = |f: &dyn Fn(&Metrics) -> f64| -> f64 {
                let vals: Vec<f64> = rows
                    .iter()
                    .map(|o| f(&o.metrics))
                    .filter(|v| v.is_finite())
                    .collect();
                if vals.is_empty() {
                    f64::NAN
                } else {
                    vals.iter().sum::<f64>() / vals.len() as f64
                }
            };
            SummaryRow {
                name: name.clone(),
                successes,
                trials: rows.len(),
                centering_px: mean(&|m| m.centering_px),
                ssim: mean(&|m| m.ssim_vs_expert),
                force_rate: mean(&|m| m.force_rate),
                contact_loss_failure_frac: if failures.is_empty() {
                    0.0
                } else {
                    contact_loss as f64 / failures.len() as f64
                },
            }
        })
        .collect()
}

pub fn format_summary(rows: &[SummaryRow]) -> String {
    let mut s = String::new();
    s.push_str(
        "policy             success  centering_px  ssim    force_rate  contact_loss_failures\n",
    );
    for r in rows {
        s.push_str(&format!(
            "{:<18} {:>3}/{:<3}  {:>10.2}  {:>6.4}  {:>8.4}    {:>6.2}\n",
            r.name, r.successes, r.trials, r.centering_px, r.ssim, r.force_rate,
            r.contact_loss_failure_frac
        ));
    }
    s
}

/// Per-rollout metrics CSV (one row per trial).
pub fn write_metrics_csv(path: &Path, outcomes: &[TrialOutcome]) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    writeln!(
        f,
        "policy,phantom_seed,trial,success,centering_px,force_rate,tracking_error_m,ssim_vs_expert,loss_of_contact,terminal"
    )?;
    for o in outcomes {
        let m = &o.metrics;
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{},{}",
            o.row,
            o.phantom_seed,
            o.trial,
            m.success,
            m.centering_px,
            m.force_rate,
            m.tracking_error_m,
            m.ssim_vs_expert,
            m.loss_of_contact,
            m.terminal.as_str()
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Rollout log files

const LOG_MAGIC: &[u8; 4] = b"SSLG";

pub fn save_log(log: &RolloutLog, path: &Path) -> Result<()> {
    save_log_inner(log, None, path)
}

pub fn save_log_with_metrics(log: &RolloutLog, metrics: &Metrics, path: &Path) -> Result<()> {
    save_log_inner(log, Some(metrics), path)
}

fn save_log_inner(log: &RolloutLog, metrics: Option<&Metrics>, path: &Path) -> Result<()> {
    let mut w = ByteWriter::new();
    w.magic(LOG_MAGIC);
    w.u32(1);
    w.str(&log.policy_name);
    w.u64(log.phantom_seed);
    w.u64(log.trial_seed);
    w.bytes(&log.config_hash);
    w.u32(log.image_width_px as u32);
    w.u32(log.image_height_px as u32);
    w.f64(log.nav_dt);
    w.f64(log.bifurcation_s);
    w.f64(log.stop_s);
    w.u8(log.terminal.to_u8());
    w.u32(log.ticks.len() as u32);
    for t in &log.ticks {
        w.f64(t.t);
        w.bytes(&t.frame);
        w.u8(t.truth_visible as u8);
        w.f64(t.truth_l);
        w.u8(t.truth_n);
        w.f32(t.pred_prob);
        w.f32(t.pred_l);
        w.f64_slice(&t.pose.to_array());
        w.f64_slice(&t.x_d.to_array());
        w.f64_slice(&t.f_e);
        w.f64_slice(&t.f_d);
        w.u8(t.in_contact as u8);
        w.f32_slice(&t.action);
    }
    match metrics {
        Some(m) => {
            w.u8(1);
            w.u8(m.success as u8);
            w.f64(m.centering_px);
            w.f64(m.force_rate);
            w.f64(m.tracking_error_m);
            w.f64(m.ssim_vs_expert);
            w.u8(m.loss_of_contact as u8);
            w.u8(m.terminal.to_u8());
        }
        None => w.u8(0),
    }
    w.save(path)
}

pub fn load_log(path: &Path) -> Result<(RolloutLog, Option<Metrics>)> {
    let data = std::fs::read(path)?;
    let mut r = ByteReader::new(&data);
    r.expect_magic(LOG_MAGIC, "rollout log")?;
    let _v = r.u32()?;
    let policy_name = r.str()?;
    let phantom_seed = r.u64()?;
    let trial_seed = r.u64()?;
    let config_hash: [u8; 32] = r.bytes(32)?.try_into().unwrap();
    let image_width_px = r.u32()? as usize;
    let image_height_px = r.u32()? as usize;
    let nav_dt = r.f64()?;
    let bifurcation_s = r.f64()?;
    let stop_s = r.f64()?;
    let terminal = TerminalReason::from_u8(r.u8()?);
    let n_ticks = r.u32()? as usize;
    let mut ticks = Vec::with_capacity(n_ticks);
    for _ in 0..n_ticks {
        let t = r.f64()?;
        let frame = r.bytes(image_width_px * image_height_px)?.to_vec();
        let truth_visible = r.u8()? != 0;
        let truth_l = r.f64()?;
        let truth_n = r.u8()?;
        let pred_prob = r.f32()?;
        let pred_l = r.f32()?;
        let pose_arr: [f64; 7] = r.f64_vec(7)?.try_into().unwrap();
        let xd_arr: [f64; 7] = r.f64_vec(7)?.try_into().unwrap();
        let f_e: [f64; 6] = r.f64_vec(6)?.try_into().unwrap();
        let f_d: [f64; 6] = r.f64_vec(6)?.try_into().unwrap();
        let in_contact = r.u8()? != 0;
        let action_v = r.f32_vec(ACTION_DIM)?;
        let mut action = [0.0f32; ACTION_DIM];
        action.copy_from_slice(&action_v);
        ticks.push(TickRecord {
            t,
            frame,
            truth_visible,
            truth_l,
            truth_n,
            pred_prob,
            pred_l,
            pose: Pose::from_array(&pose_arr),
            x_d: Pose::from_array(&xd_arr),
            f_e,
            f_d,
            in_contact,
            action,
        });
    }
    let metrics = if r.u8()? == 1 {
        let success = r.u8()? != 0;
        let centering_px = r.f64()?;
        let force_rate = r.f64()?;
        let tracking_error_m = r.f64()?;
        let ssim_v = r.f64()?;
        let loss = r.u8()? != 0;
        let term = TerminalReason::from_u8(r.u8()?);
        Some(Metrics {
            success,
            centering_px,
            force_rate,
            tracking_error_m,
            ssim_vs_expert: ssim_v,
            loss_of_contact: loss,
            terminal: term,
        })
    } else {
        None
    };
    Ok((
        RolloutLog {
            policy_name,
            phantom_seed,
            trial_seed,
            config_hash,
            image_width_px,
            image_height_px,
            nav_dt,
            bifurcation_s,
            stop_s,
            terminal,
            ticks,
        },
        metrics,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{scan_orientation, PhantomSpec, PlacedPhantom};
    use approx::assert_relative_eq;

    #[test]
    fn ssim_identity_and_inversion() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img: Vec<u8> = (0..64 * 64).map(|_| rng.gen()).collect();
        assert_relative_eq!(ssim(&img, &img, 64, 64), 1.0, epsilon = 1e-9);
        let inv: Vec<u8> = img.iter().map(|v| 255 - v).collect();
        let s = ssim(&img, &inv, 64, 64);
        assert!(s < 0.3, "anti-correlated SSIM {s}");
    }

    #[test]
    fn ssim_sequences_aligns_lengths() {
        let a: Vec<Vec<u8>> = (0..10).map(|i| vec![(i * 20) as u8; 64 * 64]).collect();
        let b: Vec<Vec<u8>> = (0..5).map(|i| vec![(i * 40) as u8; 64 * 64]).collect();
        let s = ssim_sequences(&a, &b, 64, 64);
        // aligned frames have matched intensities
        assert!(s > 0.98, "aligned sequence ssim {s}");
    }

    fn synthetic_log(ls: &[f64], f_d: &[f64], terminal: TerminalReason) -> RolloutLog {
        let ticks = ls
            .iter()
            .zip(f_d.iter())
            .enumerate()
            .map(|(i, (l, f))| TickRecord {
                t: i as f64 * 0.1,
                frame: vec![128; 64 * 64],
                truth_visible: true,
                truth_l: *l,
                truth_n: 1,
                pred_prob: 1.0,
                pred_l: *l as f32,
                pose: Pose::identity(),
                x_d: Pose::identity(),
                f_e: [0.0, 0.0, 2.5, 0.0, 0.0, 0.0],
                f_d: [0.0, 0.0, *f, 0.0, 0.0, 0.0],
                in_contact: true,
                action: [0.0; ACTION_DIM],
            })
            .collect();
        RolloutLog {
            policy_name: "test".into(),
            phantom_seed: 1,
            trial_seed: 2,
            config_hash: [0; 32],
            image_width_px: 64,
            image_height_px: 64,
            nav_dt: 0.1,
            bifurcation_s: 0.13,
            stop_s: 0.132,
            terminal,
            ticks,
        }
    }

    #[test]
    fn centering_and_force_rate_arithmetic() {
        let log = synthetic_log(&[0.6; 50], &[2.5; 50], TerminalReason::BifurcationStop);
        assert_relative_eq!(centering_distance(&log).unwrap(), 6.4, epsilon = 1e-9);
        assert_relative_eq!(force_rate(&log), 0.0, epsilon = 1e-12);
        // 2 -> 4 N over 10 s at 10 Hz
        let n = 101;
        let fd: Vec<f64> = (0..n).map(|i| 2.0 + 2.0 * i as f64 / (n - 1) as f64).collect();
        let log = synthetic_log(&vec![0.5; n], &fd, TerminalReason::BifurcationStop);
        assert_relative_eq!(force_rate(&log), 0.2, epsilon = 1e-9);
    }

    #[test]
    fn success_boundary_and_conjunction() {
        let cfg = RunConfig::default();
        let tol = cfg.eval.center_tol_px;
        let make = |centered_frac: f64, terminal: TerminalReason| -> RolloutLog {
            let n = 100;
            let n_centered = (centered_frac * n as f64).round() as usize;
            let ls: Vec<f64> = (0..n)
                .map(|i| if i < n_centered { 0.5 } else { 0.95 })
                .collect();
            synthetic_log(&ls, &vec![2.5; n], terminal)
        };
        let log61 = make(0.61, TerminalReason::BifurcationStop);
        assert!(success(&log61, tol, cfg.eval.stop_tol_m));
        let log59 = make(0.59, TerminalReason::BifurcationStop);
        assert!(!success(&log59, tol, cfg.eval.stop_tol_m));
        // fully centered but timed out
        let log_timeout = make(1.0, TerminalReason::Timeout);
        assert!(!success(&log_timeout, tol, cfg.eval.stop_tol_m));
        // stop position out of tolerance
        let mut log_far = make(1.0, TerminalReason::BifurcationStop);
        log_far.stop_s = log_far.bifurcation_s + 0.05;
        assert!(!success(&log_far, tol, cfg.eval.stop_tol_m));
    }

    #[test]
    fn success_monotone_in_center_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let n = 40;
            let ls: Vec<f64> = (0..n).map(|_| rng.gen_range(0.3..0.7)).collect();
            let log = synthetic_log(&ls, &vec![2.5; n], TerminalReason::BifurcationStop);
            let mut prev = false;
            for tol in [1.0, 2.0, 4.0, 8.0, 16.0, 32.0] {
                let s = success(&log, tol, 0.01);
                assert!(!prev || s, "enlarging tolerance flipped success off");
                prev = s;
            }
        }
    }

    #[test]
    fn loss_of_contact_classification() {
        let mut log = synthetic_log(&[0.5; 40], &[2.5; 40], TerminalReason::Timeout);
        assert!(!loss_of_contact(&log, 0.5));
        for i in 0..15 {
            log.ticks[i].f_e[2] = 0.1;
        }
        assert!(loss_of_contact(&log, 0.5)); // 37% of ticks below threshold
        let mut log2 = synthetic_log(&[0.5; 40], &[2.5; 40], TerminalReason::Timeout);
        log2.ticks.last_mut().unwrap().f_e[2] = 0.0;
        assert!(loss_of_contact(&log2, 0.5)); // ended out of contact
    }

    #[test]
    fn ssim_requires_same_phantom() {
        let a = synthetic_log(&[0.5; 5], &[2.5; 5], TerminalReason::Timeout);
        let mut b = a.clone();
        b.phantom_seed = 99;
        assert!(matches!(ssim_vs_expert(&a, &b), Err(Error::Domain(_))));
        let s = ssim_vs_expert(&a, &a.clone()).unwrap();
        assert_relative_eq!(s, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn detector_counts_vessels_on_rendered_frames() {
        let cfg = RunConfig::default();
        let spec = PhantomSpec::default_bench();
        let ph = PlacedPhantom {
            spec: spec.clone(),
            origin: cfg.phantom_origin,
        };
        let render_at = |s: f64, seed: u64| -> UltrasoundFrame {
            let pose = Pose::new(
                nalgebra::Vector3::new(
                    ph.origin[0] + s,
                    ph.origin[1] + spec.lateral_offset(s),
                    ph.crest_z() - 0.005,
                ),
                scan_orientation(),
            );
            let contact = ph.contact_wrench(&pose, &[0.0; 6]);
            let (frame, _) = crate::imaging::render(&ph, &pose, &contact, &cfg.probe, 0.0, seed);
            frame
        };
        // single vessel before the bifurcation
        let mut ok_single = 0;
        for seed in 0..10 {
            let f = render_at(0.06, seed);
            if BifurcationDetector::vessels_in_frame(&f) == 1 {
                ok_single += 1;
            }
        }
        assert!(ok_single >= 8, "single vessel detected {ok_single}/10");
        // two vessels well past the bifurcation
        let mut ok_double = 0;
        for seed in 0..10 {
            let f = render_at(spec.bifurcation_s + 0.012, seed);
            if BifurcationDetector::vessels_in_frame(&f) >= 2 {
                ok_double += 1;
            }
        }
        assert!(ok_double >= 8, "double vessel detected {ok_double}/10");
    }

    #[test]
    fn expert_rollout_succeeds_and_random_fails() {
        let mut cfg = RunConfig::default();
        cfg.seed = 404;
        let phantom_seed = cfg.train_phantom_seeds()[0];
        let log = rollout(&cfg, &NavPolicyKind::Expert, phantom_seed, 11).unwrap();
        let m = compute_metrics(&log, &cfg);
        assert!(
            m.success,
            "expert rollout failed: terminal {:?}, centering {:.2}, stop {:.3} vs bif {:.3}",
            m.terminal, m.centering_px, log.stop_s, log.bifurcation_s
        );
        assert!(m.centering_px < 4.0);
        // identical seeds give identical logs
        let log2 = rollout(&cfg, &NavPolicyKind::Expert, phantom_seed, 11).unwrap();
        assert_eq!(log.ticks.len(), log2.ticks.len());
        assert_eq!(log.ticks[5].frame, log2.ticks[5].frame);
        assert_eq!(log.ticks[5].f_e, log2.ticks[5].f_e);
        // random policy cannot succeed
        let rand_log = rollout(&cfg, &NavPolicyKind::Random, phantom_seed, 12).unwrap();
        let rm = compute_metrics(&rand_log, &cfg);
        assert!(!rm.success);
    }

    #[test]
    fn log_roundtrip_and_metric_equality() {
        let mut cfg = RunConfig::default();
        cfg.seed = 405;
        cfg.eval.timeout_s = 6.0;
        let phantom_seed = cfg.heldout_phantom_seeds()[0];
        let log = rollout(&cfg, &NavPolicyKind::Expert, phantom_seed, 3).unwrap();
        let metrics = compute_metrics(&log, &cfg);
        let dir = std::env::temp_dir().join("sonosim-eval-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("log.bin");
        save_log_with_metrics(&log, &metrics, &path).unwrap();
        let (back, stored) = load_log(&path).unwrap();
        let stored = stored.unwrap();
        // recomputed metrics from the loaded log equal the stored ones
        let recomputed = compute_metrics(&back, &cfg);
        assert_eq!(recomputed.success, stored.success);
        assert_eq!(recomputed.centering_px.to_bits(), stored.centering_px.to_bits());
        assert_eq!(recomputed.force_rate.to_bits(), stored.force_rate.to_bits());
        assert_eq!(
            recomputed.tracking_error_m.to_bits(),
            stored.tracking_error_m.to_bits()
        );
        // truncated log reports the byte offset
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() / 2]).unwrap();
        match load_log(&path) {
            Err(Error::Parse { offset, .. }) => assert!(offset > 0),
            other => panic!("expected parse error, got {:?}", other.map(|_| ())),
        }
    }
}
