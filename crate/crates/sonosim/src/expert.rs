//! Scripted expert demonstrator and the demonstration dataset pipeline.
//!
//! The expert stands in for the sonographer: it presses to a per-trajectory
//! target force, servos the artery to the image center from the ground
//! truth landmark, advances along the neck (slowing ahead of the expected
//! bifurcation region) and stops when two vessels appear. Demonstrations
//! are recorded at the navigation rate, quality-gated, augmented with
//! Cartesian transform noise and paired into observation-action windows.

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::arm::{Pose, Wrench, WrenchFrame};
use crate::config::{derive_seed, ExpertConfig, RunConfig};
use crate::controller::TrackingTarget;
use crate::imaging::{pixel_to_lateral, LandmarkTruth, ProbeModel};
use crate::io::{ByteReader, ByteWriter};
use crate::phantom::{sample_phantom, scan_orientation, PhantomSpec};
use crate::policy::{make_pair, pose_to_vec9, ActionStep, Observation, PairSource, ACTION_DIM};
use crate::sim::SimWorld;
use crate::{Error, Result};

/// Per-trajectory expert parameters, sampled once per demonstration.
#[derive(Debug, Clone)]
pub struct ExpertParams {
    pub scan_speed: f64,
    pub force_start: f64,
    pub force_end: f64,
    pub start_s: f64,
    pub start_lateral: f64,
    pub start_height: f64,
    pub start_tilt: f64,
}

impl ExpertParams {
    pub fn sample(cfg: &ExpertConfig, seed: u64) -> ExpertParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scan_speed = rng.gen_range(cfg.scan_speed[0]..=cfg.scan_speed[1]);
        let force_start = rng.gen_range(cfg.force_target[0]..=cfg.force_target[1]);
        let drift = rng.gen_range(-cfg.force_drift_amp..=cfg.force_drift_amp);
        let force_end = (force_start + drift).clamp(cfg.force_target[0], cfg.force_target[1]);
        ExpertParams {
            scan_speed,
            force_start,
            force_end,
            start_s: rng.gen_range(cfg.start_s[0]..=cfg.start_s[1]),
            start_lateral: rng.gen_range(cfg.start_lateral[0]..=cfg.start_lateral[1]),
            start_height: rng.gen_range(cfg.start_height[0]..=cfg.start_height[1]),
            start_tilt: rng.gen_range(cfg.start_tilt[0]..=cfg.start_tilt[1]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Press,
    Scan,
}

/// Stateful scripted expert (one instance per demonstration).
pub struct Expert {
    cfg: ExpertConfig,
    params: ExpertParams,
    probe: ProbeModel,
    q_rest: nalgebra::DVector<f64>,
    nav_dt: f64,
    phase: Phase,
    /// Desired-pose integrator (the expert commands motion on this, not on
    /// the measured pose, so tracking error does not feed back).
    x_d: Pose,
    f_cmd: f64,
    t: f64,
}

impl Expert {
    pub fn new(
        cfg: ExpertConfig,
        params: ExpertParams,
        probe: ProbeModel,
        q_rest: nalgebra::DVector<f64>,
        nav_dt: f64,
        start_pose: Pose,
    ) -> Expert {
        Expert {
            cfg,
            params,
            probe,
            q_rest,
            nav_dt,
            phase: Phase::Press,
            x_d: Pose::new(start_pose.position, scan_orientation()),
            f_cmd: 0.0,
            t: 0.0,
        }
    }

    fn force_target_now(&self) -> f64 {
        let frac = (self.t / self.cfg.force_drift_period).min(1.0);
        self.params.force_start + (self.params.force_end - self.params.force_start) * frac
    }

    /// One navigation tick: returns the tracking target and the stop flag.
    /// `s_now` is the probe's arc-length along the phantom.
    pub fn step(
        &mut self,
        truth: &LandmarkTruth,
        _probe_pose: &Pose,
        f_e: &Wrench,
        s_now: f64,
    ) -> (TrackingTarget, bool) {
        self.t += self.nav_dt;
        let target_f = self.force_target_now();

        // press until the measured force reaches the target band; the
        // command lands exponentially to avoid overshoot transients
        match self.phase {
            Phase::Press => {
                let linear = self.f_cmd + self.cfg.force_ramp_rate * self.nav_dt;
                let exp_land = self.f_cmd + 0.35 * (target_f - self.f_cmd);
                self.f_cmd = linear.min(exp_land).min(target_f);
                if f_e.force.z >= 0.8 * target_f {
                    self.phase = Phase::Scan;
                }
            }
            Phase::Scan => {
                // follow the slow drift exactly; the ramp is done
                self.f_cmd = target_f;
                let v = if s_now < self.cfg.decel_s {
                    self.params.scan_speed
                } else {
                    self.cfg.slow_speed
                };
                self.x_d.position.x += v * self.nav_dt;
            }
        }

        // lateral centering from the ground-truth landmark
        if truth.visible {
            let du = (truth.l - 0.5) * self.probe.image_width_px as f64;
            let dy = -self.cfg.lateral_gain * pixel_to_lateral(&self.probe, du);
            let shift = self.x_d.orientation * Vector3::new(0.0, dy, 0.0);
            self.x_d.position += shift;
        }

        let stop = truth.n_vessels >= 2;
        let target = TrackingTarget {
            pose: self.x_d,
            wrench: Wrench {
                force: Vector3::new(0.0, 0.0, self.f_cmd),
                torque: Vector3::zeros(),
                frame: WrenchFrame::Probe,
            },
            q_rest: self.q_rest.clone(),
        };
        (target, stop)
    }
}

/// One recorded navigation-rate sample.
#[derive(Debug, Clone)]
pub struct DemoSample {
    pub t: f64,
    pub frame: Vec<u8>,
    pub view: Vec<u8>,
    pub pose: Pose,
    pub wrench: [f64; 6],
    pub truth_l: f64,
    pub truth_visible: bool,
}

/// One accepted demonstration trajectory.
#[derive(Debug, Clone)]
pub struct Demonstration {
    pub samples: Vec<DemoSample>,
    pub phantom_seed: u64,
    pub expert_seed: u64,
    pub spec: PhantomSpec,
}

/// Quality/provenance statistics for the manifest.
#[derive(Debug, Clone)]
pub struct DemoStats {
    pub accepted: bool,
    pub reason: String,
    pub n_samples: usize,
    pub mean_force: f64,
    pub max_force: f64,
    pub force_rate: f64,
    pub mean_center_px: f64,
}

/// Run one scripted demonstration. Deterministic given the seeds; rejected
/// runs return the stats with `accepted = false`.
pub fn collect(
    cfg: &RunConfig,
    phantom_seed: u64,
    expert_seed: u64,
) -> Result<(Option<Demonstration>, DemoStats)> {
    let spec = sample_phantom(phantom_seed, &cfg.phantom)?;
    let world = SimWorld::from_config(cfg, spec.clone());
    let params = ExpertParams::sample(&cfg.expert, derive_seed(expert_seed, "params", 0));
    let start = world.start_pose(
        params.start_s,
        params.start_lateral,
        params.start_height,
        params.start_tilt,
    );
    let mut state = world.init_state(&start)?;
    let mut expert = Expert::new(
        cfg.expert.clone(),
        params,
        cfg.probe.clone(),
        cfg.q_rest_vec(),
        cfg.control.nav_dt,
        start,
    );

    let max_ticks = (cfg.expert.max_duration_s / cfg.control.nav_dt) as usize;
    let mut samples: Vec<DemoSample> = Vec::new();
    let mut stopped = false;
    for tick in 0..max_ticks {
        let sensors = world.sense(&state, derive_seed(expert_seed, "render", tick as u64));
        let s_now = sensors.pose.position.x - world.phantom.origin[0];
        let (target, stop) = expert.step(&sensors.truth, &sensors.pose, &sensors.wrench, s_now);
        samples.push(DemoSample {
            t: state.t,
            frame: sensors.ultrasound.to_u8(),
            view: sensors.probe_view.to_u8(),
            pose: sensors.pose,
            wrench: *sensors.wrench.as_vector6().as_slice().try_into().as_ref().unwrap(),
            truth_l: sensors.truth.l,
            truth_visible: sensors.truth.visible,
        });
        if stop {
            stopped = true;
            break;
        }
        world.nav_window(&mut state, &target)?;
    }

    let stats = assess(&samples, cfg, stopped);
    if stats.accepted {
        Ok((
            Some(Demonstration {
                samples,
                phantom_seed,
                expert_seed,
                spec,
            }),
            stats,
        ))
    } else {
        Ok((None, stats))
    }
}

fn assess(samples: &[DemoSample], cfg: &RunConfig, stopped: bool) -> DemoStats {
    let n = samples.len();
    let mut mean_force = 0.0;
    let mut max_force: f64 = 0.0;
    let mut force_rate = 0.0;
    for (i, s) in samples.iter().enumerate() {
        let f = s.wrench[2];
        mean_force += f;
        max_force = max_force.max(f.abs());
        if i > 0 {
            force_rate += (f - samples[i - 1].wrench[2]).abs();
        }
    }
    mean_force /= n.max(1) as f64;
    force_rate /= ((n.saturating_sub(1)) as f64).max(1.0) * cfg.control.nav_dt;

    // centering over the last 80% of the trajectory
    let tail_start = n / 5;
    let tail = &samples[tail_start.min(n.saturating_sub(1))..];
    let visible: Vec<&DemoSample> = tail.iter().filter(|s| s.truth_visible).collect();
    let mean_center_px = if visible.is_empty() {
        f64::INFINITY
    } else {
        visible
            .iter()
            .map(|s| (s.truth_l - 0.5).abs() * cfg.probe.image_width_px as f64)
            .sum::<f64>()
            / visible.len() as f64
    };
    let visible_frac = visible.len() as f64 / tail.len().max(1) as f64;

    let wrench_ok = samples.iter().all(|s| {
        let f = Vector3::new(s.wrench[0], s.wrench[1], s.wrench[2]).norm();
        let tq = Vector3::new(s.wrench[3], s.wrench[4], s.wrench[5]).norm();
        f <= 10.0 && tq <= 1.0
    });

    let reason = if n < 2 {
        "too short"
    } else if !stopped {
        "no bifurcation stop before timeout"
    } else if mean_center_px >= 4.0 {
        "failed to center"
    } else if visible_frac < 0.9 {
        "landmark lost"
    } else if !wrench_ok {
        "safety envelope exceeded"
    } else {
        "ok"
    };
    DemoStats {
        accepted: reason == "ok",
        reason: reason.to_string(),
        n_samples: n,
        mean_force,
        max_force,
        force_rate,
        mean_center_px,
    }
}

/// Cartesian-noise augmentation. Per-trajectory mode applies one rigid
/// transform to every pose (relative actions invariant); per-sample mode
/// jitters each pose independently (actions change). Wrenches and frames
/// are untouched.
pub fn augment(
    demo: &Demonstration,
    sigma_t: f64,
    sigma_r: f64,
    per_sample: bool,
    n_copies: usize,
    rng_seed: u64,
) -> Vec<Demonstration> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut gauss = |s: f64| -> f64 {
        let v: f64 = StandardNormal.sample(&mut rng);
        v * s
    };
    let mut out = Vec::with_capacity(n_copies);
    for _ in 0..n_copies {
        let mut copy = demo.clone();
        if per_sample {
            for s in copy.samples.iter_mut() {
                let dp = Vector3::new(gauss(sigma_t), gauss(sigma_t), gauss(sigma_t));
                let axis = Vector3::new(gauss(1.0), gauss(1.0), gauss(1.0));
                let rot = small_rotation(axis, gauss(sigma_r));
                s.pose = Pose::new(rot * s.pose.position + dp, rot * s.pose.orientation);
            }
        } else {
            let dp = Vector3::new(gauss(sigma_t), gauss(sigma_t), gauss(sigma_t));
            let axis = Vector3::new(gauss(1.0), gauss(1.0), gauss(1.0));
            let rot = small_rotation(axis, gauss(sigma_r));
            for s in copy.samples.iter_mut() {
                s.pose = Pose::new(rot * s.pose.position + dp, rot * s.pose.orientation);
            }
        }
        out.push(copy);
    }
    out
}

fn small_rotation(axis: Vector3<f64>, angle: f64) -> UnitQuaternion<f64> {
    if axis.norm() < 1e-12 || angle == 0.0 {
        UnitQuaternion::identity()
    } else {
        UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle)
    }
}

/// Materialized observation-action pairs for one demonstration (the
/// training path uses the indexed [`DemoDataset`] view instead).
pub fn build_pairs(
    demo: &Demonstration,
    obs_horizon: usize,
    action_horizon: usize,
) -> Vec<(Observation, Vec<f64>)> {
    let t_n = demo.samples.len();
    if t_n < obs_horizon + action_horizon {
        return Vec::new();
    }
    let ds = DemoDataset {
        demos: vec![demo.clone()],
        obs_horizon,
        action_horizon,
        us_w: 0,
        us_h: 0,
        pv_w: 0,
        pv_h: 0,
        seed: 0,
        config_hash: [0; 32],
        windows: windows_for(&[demo.clone()], obs_horizon, action_horizon),
    };
    (0..ds.windows.len()).map(|i| ds.pair(i)).collect()
}

fn windows_for(
    demos: &[Demonstration],
    obs_horizon: usize,
    action_horizon: usize,
) -> Vec<(usize, usize)> {
    let mut windows = Vec::new();
    for (d, demo) in demos.iter().enumerate() {
        let t_n = demo.samples.len();
        if t_n < obs_horizon + action_horizon {
            continue;
        }
        // obs-end index ranges so that t + action_horizon stays in range
        for t in (obs_horizon - 1)..(t_n - action_horizon) {
            windows.push((d, t));
        }
    }
    windows
}

/// Demonstration dataset with the sliding-window pair view.
pub struct DemoDataset {
    pub demos: Vec<Demonstration>,
    pub obs_horizon: usize,
    pub action_horizon: usize,
    pub us_w: usize,
    pub us_h: usize,
    pub pv_w: usize,
    pub pv_h: usize,
    pub seed: u64,
    pub config_hash: [u8; 32],
    windows: Vec<(usize, usize)>,
}

impl DemoDataset {
    pub fn new(
        demos: Vec<Demonstration>,
        cfg: &RunConfig,
    ) -> DemoDataset {
        let windows = windows_for(&demos, cfg.dataset.obs_horizon, cfg.dataset.action_horizon);
        DemoDataset {
            demos,
            obs_horizon: cfg.dataset.obs_horizon,
            action_horizon: cfg.dataset.action_horizon,
            us_w: cfg.probe.image_width_px,
            us_h: cfg.probe.image_height_px,
            pv_w: cfg.camera.image_width_px,
            pv_h: cfg.camera.image_height_px,
            seed: cfg.seed,
            config_hash: cfg.data_hash(),
            windows,
        }
    }

    pub fn n_pairs(&self) -> usize {
        self.windows.len()
    }

    pub fn n_demos(&self) -> usize {
        self.demos.len()
    }
}

impl PairSource for DemoDataset {
    fn len(&self) -> usize {
        self.windows.len()
    }

    fn obs_horizon(&self) -> usize {
        self.obs_horizon
    }

    fn action_horizon(&self) -> usize {
        self.action_horizon
    }

    fn pair(&self, idx: usize) -> (Observation, Vec<f64>) {
        let (d, t) = self.windows[idx];
        let demo = &self.demos[d];
        let mut frames = Vec::with_capacity(self.obs_horizon);
        let mut views = Vec::with_capacity(self.obs_horizon);
        let mut poses = Vec::with_capacity(self.obs_horizon);
        let mut wrenches = Vec::with_capacity(self.obs_horizon);
        for i in 0..self.obs_horizon {
            let s = &demo.samples[t + 1 - self.obs_horizon + i];
            frames.push(s.frame.iter().map(|b| *b as f32 / 255.0).collect());
            views.push(s.view.iter().map(|b| *b as f32 / 255.0).collect());
            poses.push(pose_to_vec9(&s.pose));
            wrenches.push(s.wrench);
        }
        let mut chunk = vec![0.0f64; self.action_horizon * ACTION_DIM];
        for j in 0..self.action_horizon {
            let a = &demo.samples[t + j];
            let b = &demo.samples[t + j + 1];
            let w = Wrench::from_slice(&a.wrench, WrenchFrame::Probe);
            let step = make_pair(&a.pose, &b.pose, &w);
            chunk[j * ACTION_DIM..(j + 1) * ACTION_DIM].copy_from_slice(&step.to_array());
        }
        (
            Observation {
                frames,
                views,
                poses,
                wrenches,
            },
            chunk,
        )
    }

    fn pair_meta(&self, idx: usize) -> (Vec<[f64; 9]>, Vec<[f64; 6]>, Vec<f64>) {
        let (d, t) = self.windows[idx];
        let demo = &self.demos[d];
        let mut poses = Vec::with_capacity(self.obs_horizon);
        let mut wrenches = Vec::with_capacity(self.obs_horizon);
        for i in 0..self.obs_horizon {
            let s = &demo.samples[t + 1 - self.obs_horizon + i];
            poses.push(pose_to_vec9(&s.pose));
            wrenches.push(s.wrench);
        }
        let mut chunk = vec![0.0f64; self.action_horizon * ACTION_DIM];
        for j in 0..self.action_horizon {
            let a = &demo.samples[t + j];
            let b = &demo.samples[t + j + 1];
            let w = Wrench::from_slice(&a.wrench, WrenchFrame::Probe);
            let step = make_pair(&a.pose, &b.pose, &w);
            chunk[j * ACTION_DIM..(j + 1) * ACTION_DIM].copy_from_slice(&step.to_array());
        }
        (poses, wrenches, chunk)
    }
}

const DATASET_MAGIC: &[u8; 4] = b"SSDS";

impl DemoDataset {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut w = ByteWriter::new();
        w.magic(DATASET_MAGIC);
        w.u32(1);
        w.u64(self.seed);
        w.bytes(&self.config_hash);
        w.u32(self.us_w as u32);
        w.u32(self.us_h as u32);
        w.u32(self.pv_w as u32);
        w.u32(self.pv_h as u32);
        w.u32(self.obs_horizon as u32);
        w.u32(self.action_horizon as u32);
        w.u32(self.demos.len() as u32);
        for demo in &self.demos {
            w.u64(demo.phantom_seed);
            w.u64(demo.expert_seed);
            let spec = toml::to_string(&demo.spec)
                .map_err(|e| Error::Config(format!("serialize spec: {e}")))?;
            w.str(&spec);
            w.u32(demo.samples.len() as u32);
            for s in &demo.samples {
                let record_len = 8
                    + self.us_w * self.us_h
                    + self.pv_w * self.pv_h
                    + 7 * 8
                    + 6 * 8
                    + 8
                    + 1;
                w.u32(record_len as u32);
                w.f64(s.t);
                w.bytes(&s.frame);
                w.bytes(&s.view);
                w.f64_slice(&s.pose.to_array());
                w.f64_slice(&s.wrench);
                w.f64(s.truth_l);
                w.u8(s.truth_visible as u8);
            }
        }
        w.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<DemoDataset> {
        let data = std::fs::read(path)?;
        let mut r = ByteReader::new(&data);
        r.expect_magic(DATASET_MAGIC, "demonstration dataset")?;
        let _v = r.u32()?;
        let seed = r.u64()?;
        let config_hash: [u8; 32] = r.bytes(32)?.try_into().unwrap();
        let us_w = r.u32()? as usize;
        let us_h = r.u32()? as usize;
        let pv_w = r.u32()? as usize;
        let pv_h = r.u32()? as usize;
        let obs_horizon = r.u32()? as usize;
        let action_horizon = r.u32()? as usize;
        let n_demos = r.u32()? as usize;
        let mut demos = Vec::with_capacity(n_demos);
        for _ in 0..n_demos {
            let phantom_seed = r.u64()?;
            let expert_seed = r.u64()?;
            let spec_text = r.str()?;
            let spec: PhantomSpec = toml::from_str(&spec_text).map_err(|e| Error::Parse {
                offset: r.offset(),
                msg: format!("bad phantom spec: {e}"),
            })?;
            let n_samples = r.u32()? as usize;
            let mut samples = Vec::with_capacity(n_samples);
            for _ in 0..n_samples {
                let _len = r.u32()?;
                let t = r.f64()?;
                let frame = r.bytes(us_w * us_h)?.to_vec();
                let view = r.bytes(pv_w * pv_h)?.to_vec();
                let pose_arr: [f64; 7] = r.f64_vec(7)?.try_into().unwrap();
                let wrench: [f64; 6] = r.f64_vec(6)?.try_into().unwrap();
                let truth_l = r.f64()?;
                let truth_visible = r.u8()? != 0;
                samples.push(DemoSample {
                    t,
                    frame,
                    view,
                    pose: Pose::from_array(&pose_arr),
                    wrench,
                    truth_l,
                    truth_visible,
                });
            }
            demos.push(Demonstration {
                samples,
                phantom_seed,
                expert_seed,
                spec,
            });
        }
        let windows = windows_for(&demos, obs_horizon, action_horizon);
        Ok(DemoDataset {
            demos,
            obs_horizon,
            action_horizon,
            us_w,
            us_h,
            pv_w,
            pv_h,
            seed,
            config_hash,
            windows,
        })
    }
}

/// Full data-collection pipeline: expert demonstrations over the training
/// phantoms, augmentation, dataset assembly. Returns the dataset and the
/// per-demonstration manifest rows (including rejected runs).
pub fn collect_dataset(cfg: &RunConfig) -> Result<(DemoDataset, Vec<(u64, u64, DemoStats)>)> {
    let mut demos = Vec::new();
    let mut manifest = Vec::new();
    let mut rejected = 0usize;
    let mut total = 0usize;
    let mut demo_idx = 0u64;
    for phantom_seed in cfg.train_phantom_seeds() {
        for _ in 0..cfg.dataset.demos_per_phantom {
            let expert_seed = derive_seed(cfg.seed, "expert", demo_idx);
            demo_idx += 1;
            total += 1;
            let (demo, stats) = collect(cfg, phantom_seed, expert_seed)?;
            manifest.push((phantom_seed, expert_seed, stats));
            match demo {
                Some(d) => {
                    let aug = augment(
                        &d,
                        cfg.dataset.augment_sigma_t,
                        cfg.dataset.augment_sigma_r,
                        cfg.dataset.augment_per_sample,
                        cfg.dataset.augment_copies,
                        derive_seed(cfg.seed, "augment", demo_idx),
                    );
                    demos.push(d);
                    demos.extend(aug);
                }
                None => rejected += 1,
            }
        }
    }
    if rejected * 2 > total {
        return Err(Error::Fault(format!(
            "{rejected}/{total} demonstrations rejected; aborting data generation"
        )));
    }
    Ok((DemoDataset::new(demos, cfg), manifest))
}

/// Write the manifest CSV.
pub fn write_manifest(
    path: &std::path::Path,
    manifest: &[(u64, u64, DemoStats)],
) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    writeln!(
        f,
        "phantom_seed,expert_seed,accepted,reason,n_samples,mean_force,max_force,force_rate,mean_center_px"
    )?;
    for (ps, es, st) in manifest {
        writeln!(
            f,
            "{ps},{es},{},{},{},{:.6},{:.6},{:.6},{:.6}",
            st.accepted, st.reason, st.n_samples, st.mean_force, st.max_force, st.force_rate, st.mean_center_px
        )?;
    }
    Ok(())
}
