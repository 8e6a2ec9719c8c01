//! Conditional DDPM policy with landmark-centering guidance.
//!
//! Actions are receding-horizon chunks of (pose diff, wrench) steps; poses
//! use the 6D rotation representation. The noise-prediction network
//! conditions on stacked multi-modal observations (ultrasound frame, probe
//! view, pose, wrench) encoded by small convolutional trunks; the
//! ultrasound trunk is initialized from the pretrained landmark encoder.
//! Sampling runs ancestral denoising with an optional guidance gradient
//! that pushes the chunk's lateral translations toward a centered artery
//! through the probe's linear pixel map. A direct-regression variant of
//! the same encoders serves as the BC baseline.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::arm::{Pose, Wrench, WrenchFrame};
use crate::config::{derive_seed, PolicyConfig, PretrainConfig};
use crate::imaging::ProbeModel;
use crate::io::{Checkpoint, CheckpointKind};
use crate::nn::{
    clip_grad_norm, init_params, parallel_grad, relu, relu_backward, Adam, ConvOp, DenseOp,
    Layout,
};
use crate::perception::{EncoderParams, TrunkActs, UsTrunk, GRAD_CHUNKS};
use crate::sim::SensorFrame;
use crate::{Error, Result};

/// Dimensions of one action step: translation (3), 6D rotation diff (6),
/// wrench (6).
pub const ACTION_DIM: usize = 15;
/// Index of the lateral (probe-y) translation inside a step.
pub const LATERAL_INDEX: usize = 1;
pub const TIME_EMB_DIM: usize = 16;

// ---------------------------------------------------------------------------
// 6D rotation representation

/// First two columns of the rotation matrix.
pub fn rot_to_6d(r: &UnitQuaternion<f64>) -> [f64; 6] {
    let m = r.to_rotation_matrix();
    let m = m.matrix();
    [
        m[(0, 0)],
        m[(1, 0)],
        m[(2, 0)],
        m[(0, 1)],
        m[(1, 1)],
        m[(2, 1)],
    ]
}

/// Gram-Schmidt decode: orthonormalize the two 3-vectors, complete with
/// their cross product. Near-parallel inputs are degenerate.
pub fn sixd_to_rot(v: &[f64; 6]) -> Result<UnitQuaternion<f64>> {
    let a = Vector3::new(v[0], v[1], v[2]);
    let b = Vector3::new(v[3], v[4], v[5]);
    let na = a.norm();
    if na < 1e-9 {
        return Err(Error::Domain("6D rotation: first column is null".into()));
    }
    let x = a / na;
    let proj = b - b.dot(&x) * x;
    let z = x.cross(&proj);
    if z.norm() < 1e-9 {
        return Err(Error::Domain(
            "6D rotation: columns are parallel (degenerate)".into(),
        ));
    }
    let y = proj / proj.norm();
    let z = z / z.norm();
    let m = Matrix3::from_columns(&[x, y, z]);
    Ok(UnitQuaternion::from_rotation_matrix(
        &nalgebra::Rotation3::from_matrix_unchecked(m),
    ))
}

// ---------------------------------------------------------------------------
// Action steps and chunks

/// One relative action: translation and rotation diff expressed in the
/// source pose's frame, plus the wrench channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionStep {
    pub translation: Vector3<f64>,
    pub rotation6d: [f64; 6],
    pub wrench: [f64; 6],
}

impl ActionStep {
    pub fn to_array(&self) -> [f64; ACTION_DIM] {
        let mut a = [0.0; ACTION_DIM];
        a[0] = self.translation.x;
        a[1] = self.translation.y;
        a[2] = self.translation.z;
        a[3..9].copy_from_slice(&self.rotation6d);
        a[9..15].copy_from_slice(&self.wrench);
        a
    }

    pub fn from_slice(v: &[f64]) -> ActionStep {
        ActionStep {
            translation: Vector3::new(v[0], v[1], v[2]),
            rotation6d: v[3..9].try_into().unwrap(),
            wrench: v[9..15].try_into().unwrap(),
        }
    }

    pub fn identity() -> ActionStep {
        ActionStep {
            translation: Vector3::zeros(),
            rotation6d: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            wrench: [0.0; 6],
        }
    }
}

/// Relative action from consecutive poses: translation in `x_t`'s frame,
/// rotation diff `R_t^T R_{t+1}`, wrench copied.
pub fn make_pair(x_t: &Pose, x_next: &Pose, w_t: &Wrench) -> ActionStep {
    let translation = x_t.orientation.inverse() * (x_next.position - x_t.position);
    let rel = x_t.orientation.inverse() * x_next.orientation;
    ActionStep {
        translation,
        rotation6d: rot_to_6d(&rel),
        wrench: *w_t.as_vector6().as_slice().try_into().as_ref().unwrap(),
    }
}

/// Compose a pose with a relative action step.
pub fn apply_step(x_t: &Pose, step: &ActionStep) -> Result<Pose> {
    let rot = sixd_to_rot(&step.rotation6d)?;
    Ok(Pose {
        position: x_t.position + x_t.orientation * step.translation,
        orientation: x_t.orientation * rot,
    })
}

/// Receding-horizon sequence of action steps.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk {
    pub steps: Vec<ActionStep>,
}

impl ActionChunk {
    pub fn flat(&self) -> Vec<f64> {
        self.steps.iter().flat_map(|s| s.to_array()).collect()
    }

    pub fn from_flat(v: &[f64]) -> ActionChunk {
        ActionChunk {
            steps: v.chunks_exact(ACTION_DIM).map(ActionStep::from_slice).collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Observations

/// Stacked multi-modal observation over the observation horizon (oldest
/// first). Frames hold raw [0,1] pixels; poses are position + 6D rotation.
#[derive(Debug, Clone)]
pub struct Observation {
    pub frames: Vec<Vec<f32>>,
    pub views: Vec<Vec<f32>>,
    pub poses: Vec<[f64; 9]>,
    pub wrenches: Vec<[f64; 6]>,
}

pub fn pose_to_vec9(pose: &Pose) -> [f64; 9] {
    let r = rot_to_6d(&pose.orientation);
    [
        pose.position.x,
        pose.position.y,
        pose.position.z,
        r[0],
        r[1],
        r[2],
        r[3],
        r[4],
        r[5],
    ]
}

impl Observation {
    /// Build from the newest `horizon` sensor frames (repeating the oldest
    /// when history is short).
    pub fn from_history(history: &[SensorFrame], horizon: usize) -> Observation {
        assert!(!history.is_empty());
        let mut frames = Vec::with_capacity(horizon);
        let mut views = Vec::with_capacity(horizon);
        let mut poses = Vec::with_capacity(horizon);
        let mut wrenches = Vec::with_capacity(horizon);
        for i in 0..horizon {
            let idx = (history.len() + i).saturating_sub(horizon).min(history.len() - 1);
            let s = &history[idx];
            frames.push(s.ultrasound.pixels.clone());
            views.push(s.probe_view.pixels.clone());
            poses.push(pose_to_vec9(&s.pose));
            wrenches.push(*s.wrench.as_vector6().as_slice().try_into().as_ref().unwrap());
        }
        Observation {
            frames,
            views,
            poses,
            wrenches,
        }
    }
}

// ---------------------------------------------------------------------------
// Per-dimension normalization

/// Min-max normalizer mapping data into [-1, 1] with a scale floor for
/// near-constant dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalizer {
    pub fn fit(rows: impl Iterator<Item = Vec<f64>>, dim: usize) -> Normalizer {
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        let mut any = false;
        for row in rows {
            assert_eq!(row.len(), dim);
            any = true;
            for i in 0..dim {
                lo[i] = lo[i].min(row[i]);
                hi[i] = hi[i].max(row[i]);
            }
        }
        assert!(any, "cannot fit a normalizer on no data");
        // stats live on the f32 grid so checkpoint roundtrips are exact
        let center: Vec<f64> = lo
            .iter()
            .zip(&hi)
            .map(|(a, b)| (0.5 * (a + b)) as f32 as f64)
            .collect();
        let scale: Vec<f64> = lo
            .iter()
            .zip(&hi)
            .map(|(a, b)| ((0.5 * (b - a)).max(1e-4)) as f32 as f64)
            .collect();
        Normalizer { center, scale }
    }

    pub fn identity(dim: usize) -> Normalizer {
        Normalizer {
            center: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn normalize(&self, v: &[f64]) -> Vec<f32> {
        v.iter()
            .enumerate()
            .map(|(i, x)| {
                ((x - self.center[i % self.center.len()]) / self.scale[i % self.scale.len()]) as f32
            })
            .collect()
    }

    pub fn denormalize(&self, v: &[f32]) -> Vec<f64> {
        v.iter()
            .enumerate()
            .map(|(i, x)| {
                *x as f64 * self.scale[i % self.scale.len()] + self.center[i % self.center.len()]
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Noise schedule

/// DDPM coefficients: increasing linear betas, their cumulative products,
/// and the ancestral-sampling coefficients used by the denoising update
/// `a_{k-1} = alpha_k (a_k + rho g_k - gamma_k eps + sigma_k z)`.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(k_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
        if k_steps == 0 || beta_start <= 0.0 || beta_end >= 1.0 || beta_start > beta_end {
            return Err(Error::Config("invalid noise schedule".into()));
        }
        let betas: Vec<f64> = (0..k_steps)
            .map(|i| {
                if k_steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (k_steps - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(k_steps);
        let mut prod = 1.0;
        for a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn k_steps(&self) -> usize {
        self.betas.len()
    }

    /// Scaling applied to the whole parenthesized update, `1/sqrt(alpha_k)`.
    pub fn alpha_coef(&self, k: usize) -> f64 {
        1.0 / self.alphas[k - 1].sqrt()
    }

    /// Noise-removal coefficient `(1 - alpha_k)/sqrt(1 - alpha_bar_k)`.
    pub fn gamma(&self, k: usize) -> f64 {
        (1.0 - self.alphas[k - 1]) / (1.0 - self.alpha_bars[k - 1]).sqrt()
    }

    /// Per-step noise scale `sqrt(beta_k)`; the final step is noiseless.
    pub fn sigma(&self, k: usize) -> f64 {
        if k <= 1 {
            0.0
        } else {
            self.betas[k - 1].sqrt()
        }
    }

    /// Forward corruption `a_k = sqrt(abar_k) a0 + sqrt(1-abar_k) eps`.
    pub fn corrupt(&self, a0: &[f32], eps: &[f32], k: usize) -> Vec<f32> {
        let ab = self.alpha_bars[k - 1];
        let c0 = ab.sqrt() as f32;
        let c1 = (1.0 - ab).sqrt() as f32;
        a0.iter()
            .zip(eps.iter())
            .map(|(a, e)| c0 * a + c1 * e)
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Probe-view trunk (2 conv stages + 1 dense)

#[derive(Debug, Clone)]
pub struct PvTrunk {
    pub conv1: ConvOp,
    pub conv2: ConvOp,
    pub dense: DenseOp,
    pub in_h: usize,
    pub in_w: usize,
    pub feature_dim: usize,
}

#[derive(Debug, Clone, Default)]
pub struct PvActs {
    pub c1: Vec<f32>,
    pub c2: Vec<f32>,
    pub feature: Vec<f32>,
}

impl PvTrunk {
    pub fn build(layout: &mut Layout, prefix: &str, in_h: usize, in_w: usize, feature_dim: usize) -> PvTrunk {
        let conv1 = ConvOp::new(layout, &format!("{prefix}.conv1"), 1, 8, in_h, in_w);
        let conv2 = ConvOp::new(
            layout,
            &format!("{prefix}.conv2"),
            8,
            16,
            conv1.out_h(),
            conv1.out_w(),
        );
        let dense = DenseOp::new(layout, &format!("{prefix}.dense"), conv2.out_len(), feature_dim);
        PvTrunk {
            conv1,
            conv2,
            dense,
            in_h,
            in_w,
            feature_dim,
        }
    }

    pub fn alloc_acts(&self) -> PvActs {
        PvActs {
            c1: vec![0.0; self.conv1.out_len()],
            c2: vec![0.0; self.conv2.out_len()],
            feature: vec![0.0; self.feature_dim],
        }
    }

    pub fn forward(&self, p: &[f32], image: &[f32], acts: &mut PvActs) {
        self.conv1.forward(p, image, &mut acts.c1);
        relu(&mut acts.c1);
        self.conv2.forward(p, &acts.c1, &mut acts.c2);
        relu(&mut acts.c2);
        self.dense.forward(p, &acts.c2, &mut acts.feature);
    }

    pub fn backward(&self, p: &[f32], image: &[f32], acts: &PvActs, d_feature: &[f32], g: &mut [f32]) {
        let mut d_c2 = vec![0.0f32; self.conv2.out_len()];
        self.dense.backward(p, &acts.c2, d_feature, Some(&mut d_c2), g);
        relu_backward(&acts.c2, &mut d_c2);
        let mut d_c1 = vec![0.0f32; self.conv1.out_len()];
        self.conv2.backward(p, &acts.c1, &d_c2, Some(&mut d_c1), g);
        relu_backward(&acts.c1, &mut d_c1);
        self.conv1.backward(p, image, &d_c1, None, g);
    }
}

// ---------------------------------------------------------------------------
// Observation encoder shared by the diffusion policy and the BC baseline

/// Preprocessed observation ready for the encoders: centered frame inputs
/// and normalized pose/wrench vectors.
pub struct ObsInput {
    pub frames: Vec<Vec<f32>>,
    pub views: Vec<Vec<f32>>,
    pub poses: Vec<Vec<f32>>,
    pub wrenches: Vec<Vec<f32>>,
}

#[derive(Debug, Clone)]
pub struct ObsEncoder {
    pub us: UsTrunk,
    pub pv: PvTrunk,
    pub obs_horizon: usize,
    pub use_pose: bool,
    pub use_wrench: bool,
}

pub struct ObsActs {
    us: Vec<TrunkActs>,
    pv: Vec<PvActs>,
}

impl ObsEncoder {
    pub fn build(
        layout: &mut Layout,
        pretrain: &PretrainConfig,
        us_h: usize,
        us_w: usize,
        pv_h: usize,
        pv_w: usize,
        pv_feature: usize,
        obs_horizon: usize,
        use_pose: bool,
        use_wrench: bool,
    ) -> ObsEncoder {
        let us = UsTrunk::build(
            layout,
            "us",
            us_h,
            us_w,
            pretrain.conv_channels,
            pretrain.feature_dim,
        );
        let pv = PvTrunk::build(layout, "pv", pv_h, pv_w, pv_feature);
        ObsEncoder {
            us,
            pv,
            obs_horizon,
            use_pose,
            use_wrench,
        }
    }

    pub fn per_tick_dim(&self) -> usize {
        self.us.feature_dim
            + self.pv.feature_dim
            + if self.use_pose { 9 } else { 0 }
            + if self.use_wrench { 6 } else { 0 }
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_horizon * self.per_tick_dim()
    }

    pub fn alloc_acts(&self) -> ObsActs {
        ObsActs {
            us: (0..self.obs_horizon).map(|_| self.us.alloc_acts()).collect(),
            pv: (0..self.obs_horizon).map(|_| self.pv.alloc_acts()).collect(),
        }
    }

    /// Preprocess a raw observation with the bundle normalizers.
    pub fn prepare(
        &self,
        obs: &Observation,
        pose_norm: &Normalizer,
        wrench_norm: &Normalizer,
    ) -> ObsInput {
        ObsInput {
            frames: obs
                .frames
                .iter()
                .map(|f| f.iter().map(|p| p - 0.5).collect())
                .collect(),
            views: obs
                .views
                .iter()
                .map(|f| f.iter().map(|p| p - 0.5).collect())
                .collect(),
            poses: obs.poses.iter().map(|p| pose_norm.normalize(p)).collect(),
            wrenches: obs
                .wrenches
                .iter()
                .map(|w| wrench_norm.normalize(w))
                .collect(),
        }
    }

    pub fn forward(&self, p: &[f32], input: &ObsInput, acts: &mut ObsActs, out: &mut [f32]) {
        debug_assert_eq!(out.len(), self.obs_dim());
        let mut at = 0usize;
        for t in 0..self.obs_horizon {
            self.us.forward(p, &input.frames[t], &mut acts.us[t]);
            out[at..at + self.us.feature_dim].copy_from_slice(&acts.us[t].feature);
            at += self.us.feature_dim;
            self.pv.forward(p, &input.views[t], &mut acts.pv[t]);
            out[at..at + self.pv.feature_dim].copy_from_slice(&acts.pv[t].feature);
            at += self.pv.feature_dim;
            if self.use_pose {
                out[at..at + 9].copy_from_slice(&input.poses[t]);
                at += 9;
            }
            if self.use_wrench {
                out[at..at + 6].copy_from_slice(&input.wrenches[t]);
                at += 6;
            }
        }
    }

    /// Backward from the gradient of the concatenated observation vector.
    pub fn backward(
        &self,
        p: &[f32],
        input: &ObsInput,
        acts: &ObsActs,
        d_out: &[f32],
        g: &mut [f32],
    ) {
        let mut at = 0usize;
        for t in 0..self.obs_horizon {
            let d_us = &d_out[at..at + self.us.feature_dim];
            at += self.us.feature_dim;
            self.us.backward(p, &input.frames[t], &acts.us[t], d_us, g);
            let d_pv = &d_out[at..at + self.pv.feature_dim];
            at += self.pv.feature_dim;
            self.pv.backward(p, &input.views[t], &acts.pv[t], d_pv, g);
            if self.use_pose {
                at += 9;
            }
            if self.use_wrench {
                at += 6;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Noise-prediction network

pub fn time_embedding(k: usize, k_max: usize, out: &mut [f32]) {
    debug_assert_eq!(out.len(), TIME_EMB_DIM);
    let t = k as f32 / k_max as f32;
    for i in 0..TIME_EMB_DIM / 2 {
        let f = (2.0f32).powi(i as i32) * std::f32::consts::PI;
        out[2 * i] = (f * t).sin();
        out[2 * i + 1] = (f * t).cos();
    }
}

/// The conditional denoiser: obs encoder + MLP over (obs, time, chunk).
#[derive(Debug, Clone)]
pub struct PolicyNet {
    pub encoder: ObsEncoder,
    pub fc1: DenseOp,
    pub fc2: DenseOp,
    pub fc3: DenseOp,
    pub layout: Layout,
    pub params: Vec<f32>,
    pub action_horizon: usize,
}

impl PolicyNet {
    pub fn chunk_dim(&self) -> usize {
        self.action_horizon * ACTION_DIM
    }

    #[allow(clippy::too_many_arguments)]
    pub fn build(
        pretrain: &PretrainConfig,
        policy: &PolicyConfig,
        us_h: usize,
        us_w: usize,
        pv_h: usize,
        pv_w: usize,
        obs_horizon: usize,
        action_horizon: usize,
        init_seed: u64,
    ) -> PolicyNet {
        let mut layout = Layout::default();
        let encoder = ObsEncoder::build(
            &mut layout,
            pretrain,
            us_h,
            us_w,
            pv_h,
            pv_w,
            policy.probe_view_feature_dim,
            obs_horizon,
            policy.use_pose,
            policy.use_wrench,
        );
        let chunk_dim = action_horizon * ACTION_DIM;
        let in_dim = encoder.obs_dim() + TIME_EMB_DIM + chunk_dim;
        let fc1 = DenseOp::new(&mut layout, "denoiser.fc1", in_dim, policy.hidden_dim);
        let fc2 = DenseOp::new(&mut layout, "denoiser.fc2", policy.hidden_dim, policy.hidden_dim);
        let fc3 = DenseOp::new(&mut layout, "denoiser.fc3", policy.hidden_dim, chunk_dim);
        let params = init_params(&layout, init_seed);
        PolicyNet {
            encoder,
            fc1,
            fc2,
            fc3,
            layout,
            params,
            action_horizon,
        }
    }

    /// Copy pretrained landmark-encoder trunk weights (matched by tensor
    /// name) as the initialization of the ultrasound encoder.
    pub fn init_from_encoder(&mut self, enc: &EncoderParams) -> Result<()> {
        for t in &self.layout.tensors {
            if !t.name.starts_with("us.") {
                continue;
            }
            let src = enc
                .layout
                .find(&t.name)
                .ok_or_else(|| Error::Config(format!("encoder tensor {} missing", t.name)))?;
            if src.dims != t.dims {
                return Err(Error::Config(format!(
                    "encoder tensor {} shape mismatch",
                    t.name
                )));
            }
            self.params[t.offset..t.offset + t.len()]
                .copy_from_slice(&enc.params[src.offset..src.offset + src.len()]);
        }
        Ok(())
    }

    /// Predict the noise for chunk `a_k` at step `k` given the encoded
    /// observation vector.
    pub fn eps(
        &self,
        p: &[f32],
        obs_vec: &[f32],
        a_k: &[f32],
        k: usize,
        k_max: usize,
        out: &mut [f32],
    ) {
        let mut input = vec![0.0f32; self.fc1.in_dim];
        let obs_dim = self.encoder.obs_dim();
        input[..obs_dim].copy_from_slice(obs_vec);
        time_embedding(k, k_max, &mut input[obs_dim..obs_dim + TIME_EMB_DIM]);
        input[obs_dim + TIME_EMB_DIM..].copy_from_slice(a_k);
        let mut h1 = vec![0.0f32; self.fc1.out_dim];
        self.fc1.forward(p, &input, &mut h1);
        relu(&mut h1);
        let mut h2 = vec![0.0f32; self.fc2.out_dim];
        self.fc2.forward(p, &h1, &mut h2);
        relu(&mut h2);
        self.fc3.forward(p, &h2, out);
    }

    /// Forward + backward of the epsilon-prediction MSE for one sample;
    /// returns the summed squared error loss and accumulates parameter
    /// gradients (including through the observation encoder).
    #[allow(clippy::too_many_arguments)]
    pub fn loss_and_grad(
        &self,
        input: &ObsInput,
        a0_norm: &[f32],
        eps: &[f32],
        k: usize,
        k_max: usize,
        schedule: &NoiseSchedule,
        g: &mut [f32],
    ) -> f64 {
        let p = &self.params;
        let mut acts = self.encoder.alloc_acts();
        let mut obs_vec = vec![0.0f32; self.encoder.obs_dim()];
        self.encoder.forward(p, input, &mut acts, &mut obs_vec);

        let a_k = schedule.corrupt(a0_norm, eps, k);
        let mut net_in = vec![0.0f32; self.fc1.in_dim];
        let obs_dim = self.encoder.obs_dim();
        net_in[..obs_dim].copy_from_slice(&obs_vec);
        time_embedding(k, k_max, &mut net_in[obs_dim..obs_dim + TIME_EMB_DIM]);
        net_in[obs_dim + TIME_EMB_DIM..].copy_from_slice(&a_k);

        let mut h1 = vec![0.0f32; self.fc1.out_dim];
        self.fc1.forward(p, &net_in, &mut h1);
        relu(&mut h1);
        let mut h2 = vec![0.0f32; self.fc2.out_dim];
        self.fc2.forward(p, &h1, &mut h2);
        relu(&mut h2);
        let mut pred = vec![0.0f32; self.chunk_dim()];
        self.fc3.forward(p, &h2, &mut pred);

        let mut loss = 0.0f64;
        let mut d_pred = vec![0.0f32; pred.len()];
        for i in 0..pred.len() {
            let e = pred[i] - eps[i];
            loss += (e as f64) * (e as f64);
            d_pred[i] = 2.0 * e;
        }

        let mut d_h2 = vec![0.0f32; self.fc2.out_dim];
        self.fc3.backward(p, &h2, &d_pred, Some(&mut d_h2), g);
        relu_backward(&h2, &mut d_h2);
        let mut d_h1 = vec![0.0f32; self.fc1.out_dim];
        self.fc2.backward(p, &h1, &d_h2, Some(&mut d_h1), g);
        relu_backward(&h1, &mut d_h1);
        let mut d_in = vec![0.0f32; self.fc1.in_dim];
        self.fc1.backward(p, &net_in, &d_h1, Some(&mut d_in), g);
        self.encoder
            .backward(p, input, &acts, &d_in[..obs_dim], g);
        loss
    }
}

// ---------------------------------------------------------------------------
// Guidance

/// Landmark-centering guidance configuration (the probe's linear map plus
/// the scaling factor).
#[derive(Debug, Clone)]
pub struct GuidanceConfig {
    /// Guidance scale rho (>= 0); 0 disables guidance exactly.
    pub rho: f64,
    /// Lateral meters per pixel.
    pub a_m_per_px: f64,
    /// Image width in pixels (so `a * width` is the footprint in meters).
    pub image_width_px: usize,
    /// Normalized target landmark position.
    pub target_l: f64,
}

impl GuidanceConfig {
    pub fn from_probe(probe: &ProbeModel, rho: f64) -> GuidanceConfig {
        GuidanceConfig {
            rho,
            a_m_per_px: probe.a(),
            image_width_px: probe.image_width_px,
            target_l: 0.5,
        }
    }

    fn footprint_m(&self) -> f64 {
        self.a_m_per_px * self.image_width_px as f64
    }
}

/// Gradient of the centering objective with respect to the normalized
/// action chunk. The objective scores the predicted landmark after every
/// step through the linear map: `u = -1/2 sum_i (l_now + c_i / W - t)^2`
/// with `c_i` the cumulative lateral translation. Only lateral translation
/// components receive gradient; everything else is exactly zero.
pub fn guidance_gradient(
    cfg: &GuidanceConfig,
    l_now: Option<f64>,
    chunk_norm: &[f32],
    act_norm: &Normalizer,
    horizon: usize,
) -> Vec<f32> {
    let mut g = vec![0.0f32; chunk_norm.len()];
    let Some(l_now) = l_now else {
        return g;
    };
    let w = cfg.footprint_m();
    let phys = act_norm.denormalize(chunk_norm);
    // predicted landmark after each step
    let mut l = vec![0.0f64; horizon];
    let mut cum = 0.0;
    for i in 0..horizon {
        cum += phys[i * ACTION_DIM + LATERAL_INDEX];
        l[i] = l_now + cum / w;
    }
    // d u / d dy_i = -sum_{j>=i} (l_j - t) / w, then into normalized coords
    let mut suffix = 0.0;
    for i in (0..horizon).rev() {
        suffix += l[i] - cfg.target_l;
        let scale = act_norm.scale[(i * ACTION_DIM + LATERAL_INDEX) % act_norm.scale.len()];
        g[i * ACTION_DIM + LATERAL_INDEX] = (-suffix / w * scale) as f32;
    }
    g
}

// ---------------------------------------------------------------------------
// Sampling

/// Ancestral denoising from unit Gaussian noise, optionally guided. The
/// guidance term enters inside the update as
/// `a_{k-1} = alpha_k (a_k + rho_k g_k - gamma_k eps + N(0, sigma_k^2))`
/// with `rho_k = rho * gamma_k` so the guidance-to-denoise ratio stays
/// constant across steps. Deterministic given the seed.
pub fn sample_chunk(
    net: &PolicyNet,
    obs_vec: &[f32],
    schedule: &NoiseSchedule,
    guidance: &GuidanceConfig,
    l_now: Option<f64>,
    act_norm: &Normalizer,
    rng_seed: u64,
) -> ActionChunk {
    let chunk_norm = sample_chunk_normalized(net, obs_vec, schedule, guidance, l_now, act_norm, rng_seed);
    let phys = act_norm.denormalize(&chunk_norm);
    ActionChunk::from_flat(&phys)
}

/// Normalized-space sampler, exposed for diagnostics and tests.
pub fn sample_chunk_normalized(
    net: &PolicyNet,
    obs_vec: &[f32],
    schedule: &NoiseSchedule,
    guidance: &GuidanceConfig,
    l_now: Option<f64>,
    act_norm: &Normalizer,
    rng_seed: u64,
) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let dim = net.chunk_dim();
    let k_max = schedule.k_steps();
    let mut a: Vec<f32> = (0..dim)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v as f32
        })
        .collect();
    let mut eps = vec![0.0f32; dim];
    for k in (1..=k_max).rev() {
        net.eps(&net.params, obs_vec, &a, k, k_max, &mut eps);
        let alpha = schedule.alpha_coef(k) as f32;
        let gamma = schedule.gamma(k) as f32;
        let sigma = schedule.sigma(k) as f32;
        let g = if guidance.rho > 0.0 {
            guidance_gradient(guidance, l_now, &a, act_norm, net.action_horizon)
        } else {
            vec![0.0f32; dim]
        };
        let rho_k = (guidance.rho as f32) * gamma;
        for i in 0..dim {
            let z: f64 = StandardNormal.sample(&mut rng);
            a[i] = alpha * (a[i] + rho_k * g[i] - gamma * eps[i] + sigma * z as f32);
        }
    }
    a
}

// ---------------------------------------------------------------------------
// Training

/// Source of observation-action training pairs.
pub trait PairSource: Sync {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn obs_horizon(&self) -> usize;
    fn action_horizon(&self) -> usize;
    /// Materialize one pair: full observation plus the flat physical chunk.
    fn pair(&self, idx: usize) -> (Observation, Vec<f64>);
    /// Poses, wrenches and chunk only (normalizer fitting).
    fn pair_meta(&self, idx: usize) -> (Vec<[f64; 9]>, Vec<[f64; 6]>, Vec<f64>);
}

/// Everything needed to run the trained policy.
pub struct PolicyBundle {
    pub net: PolicyNet,
    pub schedule: NoiseSchedule,
    pub act_norm: Normalizer,
    pub pose_norm: Normalizer,
    pub wrench_norm: Normalizer,
    pub config_hash: [u8; 32],
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// (step, mean per-sample loss) every log interval.
    pub losses: Vec<(usize, f64)>,
    pub final_loss: f64,
}

fn fit_normalizers(pairs: &dyn PairSource) -> (Normalizer, Normalizer, Normalizer) {
    let n = pairs.len();
    let acts = (0..n).flat_map(|i| {
        let (_, _, chunk) = pairs.pair_meta(i);
        chunk
            .chunks_exact(ACTION_DIM)
            .map(|c| c.to_vec())
            .collect::<Vec<_>>()
    });
    let act_norm = Normalizer::fit(acts, ACTION_DIM);
    let poses = (0..n).flat_map(|i| {
        let (p, _, _) = pairs.pair_meta(i);
        p.into_iter().map(|r| r.to_vec()).collect::<Vec<_>>()
    });
    let pose_norm = Normalizer::fit(poses, 9);
    let wrenches = (0..n).flat_map(|i| {
        let (_, w, _) = pairs.pair_meta(i);
        w.into_iter().map(|r| r.to_vec()).collect::<Vec<_>>()
    });
    let wrench_norm = Normalizer::fit(wrenches, 6);
    (act_norm, pose_norm, wrench_norm)
}

/// Train the diffusion policy with epsilon-prediction MSE. Deterministic
/// given the seed; faults on divergence with the last-good parameters
/// restored into the returned state.
#[allow(clippy::too_many_arguments)]
pub fn train_policy(
    pairs: &dyn PairSource,
    pretrain_cfg: &PretrainConfig,
    policy_cfg: &PolicyConfig,
    dims: ImageDims,
    pretrained: Option<&EncoderParams>,
    config_hash: [u8; 32],
    seed: u64,
) -> Result<(PolicyBundle, TrainReport)> {
    if pairs.is_empty() {
        return Err(Error::Config("no training pairs".into()));
    }
    let schedule = NoiseSchedule::linear(
        policy_cfg.denoise_steps,
        policy_cfg.beta_start,
        policy_cfg.beta_end,
    )?;
    let (act_norm, pose_norm, wrench_norm) = fit_normalizers(pairs);
    let mut net = PolicyNet::build(
        pretrain_cfg,
        policy_cfg,
        dims.us_h,
        dims.us_w,
        dims.pv_h,
        dims.pv_w,
        pairs.obs_horizon(),
        pairs.action_horizon(),
        derive_seed(seed, "policy-init", 0),
    );
    if let Some(enc) = pretrained {
        net.init_from_encoder(enc)?;
    }

    let mut optim = Adam::new(net.layout.len, policy_cfg.lr as f32);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "policy-train", 0));
    let k_max = schedule.k_steps();
    let chunk_dim = net.chunk_dim();
    let mut losses = Vec::new();
    let mut last_good = net.params.clone();
    let mut final_loss = f64::NAN;
    for step in 0..policy_cfg.train_steps {
        // sample the batch plan on the main thread so draws are ordered
        let plan: Vec<(usize, usize, Vec<f32>)> = (0..policy_cfg.batch)
            .map(|_| {
                let idx = rng.gen_range(0..pairs.len());
                let k = rng.gen_range(1..=k_max);
                let eps: Vec<f32> = (0..chunk_dim)
                    .map(|_| {
                        let v: f64 = StandardNormal.sample(&mut rng);
                        v as f32
                    })
                    .collect();
                (idx, k, eps)
            })
            .collect();
        let (mut grads, loss_sum) = parallel_grad(
            &plan,
            GRAD_CHUNKS,
            net.layout.len,
            |(idx, k, eps), g| {
                let (obs, chunk) = pairs.pair(*idx);
                let input = net.encoder.prepare(&obs, &pose_norm, &wrench_norm);
                let a0 = act_norm.normalize(&chunk);
                net.loss_and_grad(&input, &a0, eps, *k, k_max, &schedule, g)
            },
        );
        let loss = loss_sum / policy_cfg.batch as f64;
        if !loss.is_finite() {
            net.params = last_good;
            return Err(Error::Fault(format!(
                "policy training diverged at step {step}"
            )));
        }
        let inv = 1.0 / policy_cfg.batch as f32;
        grads.iter_mut().for_each(|g| *g *= inv);
        clip_grad_norm(&mut grads, 100.0);
        optim.step(&mut net.params, &grads);
        if step % 200 == 0 || step + 1 == policy_cfg.train_steps {
            losses.push((step, loss));
            last_good = net.params.clone();
        }
        final_loss = loss;
    }
    Ok((
        PolicyBundle {
            net,
            schedule,
            act_norm,
            pose_norm,
            wrench_norm,
            config_hash,
            seed,
        },
        TrainReport { losses, final_loss },
    ))
}

/// Image dimensions threaded to network construction.
#[derive(Debug, Clone, Copy)]
pub struct ImageDims {
    pub us_h: usize,
    pub us_w: usize,
    pub pv_h: usize,
    pub pv_w: usize,
}

fn norm_tensors(
    layout: &mut Layout,
    params: &mut Vec<f32>,
    name: &str,
    norm: &Normalizer,
) {
    layout.alloc(&format!("norm.{name}.center"), &[norm.center.len()]);
    params.extend(norm.center.iter().map(|v| *v as f32));
    layout.alloc(&format!("norm.{name}.scale"), &[norm.scale.len()]);
    params.extend(norm.scale.iter().map(|v| *v as f32));
}

fn read_norm(ck: &Checkpoint, name: &str, dim: usize) -> Result<Normalizer> {
    let read = |suffix: &str| -> Result<Vec<f64>> {
        let t = ck
            .layout
            .find(&format!("norm.{name}.{suffix}"))
            .ok_or_else(|| Error::Config(format!("checkpoint missing norm.{name}.{suffix}")))?;
        if t.len() != dim {
            return Err(Error::Config(format!("norm.{name} has wrong length")));
        }
        Ok(ck.params[t.offset..t.offset + t.len()]
            .iter()
            .map(|v| *v as f64)
            .collect())
    };
    Ok(Normalizer {
        center: read("center")?,
        scale: read("scale")?,
    })
}

impl PolicyBundle {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut layout = self.net.layout.clone();
        let mut params = self.net.params.clone();
        norm_tensors(&mut layout, &mut params, "act", &self.act_norm);
        norm_tensors(&mut layout, &mut params, "pose", &self.pose_norm);
        norm_tensors(&mut layout, &mut params, "wrench", &self.wrench_norm);
        layout.alloc("schedule.kbb", &[3]);
        params.extend([
            self.schedule.k_steps() as f32,
            self.schedule.betas[0] as f32,
            *self.schedule.betas.last().unwrap() as f32,
        ]);
        Checkpoint {
            kind: CheckpointKind::DiffusionPolicy,
            seed: self.seed,
            config_hash: self.config_hash,
            use_pose: self.net.encoder.use_pose,
            use_wrench: self.net.encoder.use_wrench,
            layout,
            params,
        }
        .save(path)
    }

    /// Rebuild from a checkpoint; the architecture comes from the configs,
    /// which must match the stored tensor shapes.
    #[allow(clippy::too_many_arguments)]
    pub fn load(
        path: &std::path::Path,
        pretrain_cfg: &PretrainConfig,
        policy_cfg: &PolicyConfig,
        dims: ImageDims,
        obs_horizon: usize,
        action_horizon: usize,
    ) -> Result<PolicyBundle> {
        let ck = Checkpoint::load(path)?;
        if ck.kind != CheckpointKind::DiffusionPolicy {
            return Err(Error::Config("not a diffusion policy checkpoint".into()));
        }
        let mut cfg = policy_cfg.clone();
        cfg.use_pose = ck.use_pose;
        cfg.use_wrench = ck.use_wrench;
        let mut net = PolicyNet::build(
            pretrain_cfg,
            &cfg,
            dims.us_h,
            dims.us_w,
            dims.pv_h,
            dims.pv_w,
            obs_horizon,
            action_horizon,
            0,
        );
        for t in &net.layout.tensors {
            let src = ck.layout.find(&t.name).ok_or_else(|| {
                Error::Config(format!("checkpoint missing tensor {}", t.name))
            })?;
            if src.dims != t.dims {
                return Err(Error::Config(format!("tensor {} shape mismatch", t.name)));
            }
            net.params[t.offset..t.offset + t.len()]
                .copy_from_slice(&ck.params[src.offset..src.offset + src.len()]);
        }
        let act_norm = read_norm(&ck, "act", ACTION_DIM)?;
        let pose_norm = read_norm(&ck, "pose", 9)?;
        let wrench_norm = read_norm(&ck, "wrench", 6)?;
        let sch = ck
            .layout
            .find("schedule.kbb")
            .ok_or_else(|| Error::Config("checkpoint missing schedule".into()))?;
        let k = ck.params[sch.offset] as usize;
        if k != policy_cfg.denoise_steps
            || (ck.params[sch.offset + 1] - policy_cfg.beta_start as f32).abs() > 1e-9
            || (ck.params[sch.offset + 2] - policy_cfg.beta_end as f32).abs() > 1e-9
        {
            return Err(Error::Config(
                "checkpoint schedule does not match the configured schedule".into(),
            ));
        }
        let schedule = NoiseSchedule::linear(k, policy_cfg.beta_start, policy_cfg.beta_end)?;
        Ok(PolicyBundle {
            net,
            schedule,
            act_norm,
            pose_norm,
            wrench_norm,
            config_hash: ck.config_hash,
            seed: ck.seed,
        })
    }

    /// Encode an observation into the conditioning vector.
    pub fn encode_obs(&self, obs: &Observation) -> Vec<f32> {
        let input = self
            .net
            .encoder
            .prepare(obs, &self.pose_norm, &self.wrench_norm);
        let mut acts = self.net.encoder.alloc_acts();
        let mut out = vec![0.0f32; self.net.encoder.obs_dim()];
        self.net.encoder.forward(&self.net.params, &input, &mut acts, &mut out);
        out
    }

    /// Sample one action chunk for an observation.
    pub fn act(
        &self,
        obs: &Observation,
        guidance: &GuidanceConfig,
        l_now: Option<f64>,
        rng_seed: u64,
    ) -> ActionChunk {
        let obs_vec = self.encode_obs(obs);
        sample_chunk(
            &self.net,
            &obs_vec,
            &self.schedule,
            guidance,
            l_now,
            &self.act_norm,
            rng_seed,
        )
    }
}

// ---------------------------------------------------------------------------
// BC baseline: same encoders, direct chunk regression

pub struct BcNet {
    pub encoder: ObsEncoder,
    pub fc1: DenseOp,
    pub fc2: DenseOp,
    pub fc3: DenseOp,
    pub layout: Layout,
    pub params: Vec<f32>,
    pub action_horizon: usize,
}

impl BcNet {
    pub fn chunk_dim(&self) -> usize {
        self.action_horizon * ACTION_DIM
    }

    #[allow(clippy::too_many_arguments)]
    pub fn build(
        pretrain: &PretrainConfig,
        policy: &PolicyConfig,
        dims: ImageDims,
        obs_horizon: usize,
        action_horizon: usize,
        init_seed: u64,
    ) -> BcNet {
        let mut layout = Layout::default();
        let encoder = ObsEncoder::build(
            &mut layout,
            pretrain,
            dims.us_h,
            dims.us_w,
            dims.pv_h,
            dims.pv_w,
            policy.probe_view_feature_dim,
            obs_horizon,
            policy.use_pose,
            policy.use_wrench,
        );
        let chunk_dim = action_horizon * ACTION_DIM;
        let fc1 = DenseOp::new(&mut layout, "bc.fc1", encoder.obs_dim(), policy.hidden_dim);
        let fc2 = DenseOp::new(&mut layout, "bc.fc2", policy.hidden_dim, policy.hidden_dim);
        let fc3 = DenseOp::new(&mut layout, "bc.fc3", policy.hidden_dim, chunk_dim);
        let params = init_params(&layout, init_seed);
        BcNet {
            encoder,
            fc1,
            fc2,
            fc3,
            layout,
            params,
            action_horizon,
        }
    }

    pub fn init_from_encoder(&mut self, enc: &EncoderParams) -> Result<()> {
        for t in &self.layout.tensors {
            if !t.name.starts_with("us.") {
                continue;
            }
            let src = enc
                .layout
                .find(&t.name)
                .ok_or_else(|| Error::Config(format!("encoder tensor {} missing", t.name)))?;
            if src.dims != t.dims {
                return Err(Error::Config(format!("encoder tensor {} mismatch", t.name)));
            }
            self.params[t.offset..t.offset + t.len()]
                .copy_from_slice(&enc.params[src.offset..src.offset + src.len()]);
        }
        Ok(())
    }

    /// Predict the normalized chunk from an encoded observation.
    pub fn predict(&self, obs_vec: &[f32]) -> Vec<f32> {
        let mut h1 = vec![0.0f32; self.fc1.out_dim];
        self.fc1.forward(&self.params, obs_vec, &mut h1);
        relu(&mut h1);
        let mut h2 = vec![0.0f32; self.fc2.out_dim];
        self.fc2.forward(&self.params, &h1, &mut h2);
        relu(&mut h2);
        let mut out = vec![0.0f32; self.chunk_dim()];
        self.fc3.forward(&self.params, &h2, &mut out);
        out
    }

    fn loss_and_grad(&self, input: &ObsInput, a0_norm: &[f32], g: &mut [f32]) -> f64 {
        let p = &self.params;
        let mut acts = self.encoder.alloc_acts();
        let mut obs_vec = vec![0.0f32; self.encoder.obs_dim()];
        self.encoder.forward(p, input, &mut acts, &mut obs_vec);
        let mut h1 = vec![0.0f32; self.fc1.out_dim];
        self.fc1.forward(p, &obs_vec, &mut h1);
        relu(&mut h1);
        let mut h2 = vec![0.0f32; self.fc2.out_dim];
        self.fc2.forward(p, &h1, &mut h2);
        relu(&mut h2);
        let mut pred = vec![0.0f32; self.chunk_dim()];
        self.fc3.forward(p, &h2, &mut pred);
        let mut loss = 0.0f64;
        let mut d_pred = vec![0.0f32; pred.len()];
        for i in 0..pred.len() {
            let e = pred[i] - a0_norm[i];
            loss += (e as f64) * (e as f64);
            d_pred[i] = 2.0 * e;
        }
        let mut d_h2 = vec![0.0f32; self.fc2.out_dim];
        self.fc3.backward(p, &h2, &d_pred, Some(&mut d_h2), g);
        relu_backward(&h2, &mut d_h2);
        let mut d_h1 = vec![0.0f32; self.fc1.out_dim];
        self.fc2.backward(p, &h1, &d_h2, Some(&mut d_h1), g);
        relu_backward(&h1, &mut d_h1);
        let mut d_obs = vec![0.0f32; self.encoder.obs_dim()];
        self.fc1.backward(p, &obs_vec, &d_h1, Some(&mut d_obs), g);
        self.encoder.backward(p, input, &acts, &d_obs, g);
        loss
    }
}

/// Trained BC baseline bundle.
pub struct BcBundle {
    pub net: BcNet,
    pub act_norm: Normalizer,
    pub pose_norm: Normalizer,
    pub wrench_norm: Normalizer,
    pub config_hash: [u8; 32],
    pub seed: u64,
}

impl BcBundle {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut layout = self.net.layout.clone();
        let mut params = self.net.params.clone();
        norm_tensors(&mut layout, &mut params, "act", &self.act_norm);
        norm_tensors(&mut layout, &mut params, "pose", &self.pose_norm);
        norm_tensors(&mut layout, &mut params, "wrench", &self.wrench_norm);
        Checkpoint {
            kind: CheckpointKind::BcPolicy,
            seed: self.seed,
            config_hash: self.config_hash,
            use_pose: self.net.encoder.use_pose,
            use_wrench: self.net.encoder.use_wrench,
            layout,
            params,
        }
        .save(path)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn load(
        path: &std::path::Path,
        pretrain_cfg: &PretrainConfig,
        policy_cfg: &PolicyConfig,
        dims: ImageDims,
        obs_horizon: usize,
        action_horizon: usize,
    ) -> Result<BcBundle> {
        let ck = Checkpoint::load(path)?;
        if ck.kind != CheckpointKind::BcPolicy {
            return Err(Error::Config("not a BC checkpoint".into()));
        }
        let mut cfg = policy_cfg.clone();
        cfg.use_pose = ck.use_pose;
        cfg.use_wrench = ck.use_wrench;
        let mut net = BcNet::build(pretrain_cfg, &cfg, dims, obs_horizon, action_horizon, 0);
        for t in &net.layout.tensors {
            let src = ck
                .layout
                .find(&t.name)
                .ok_or_else(|| Error::Config(format!("checkpoint missing tensor {}", t.name)))?;
            if src.dims != t.dims {
                return Err(Error::Config(format!("tensor {} shape mismatch", t.name)));
            }
            net.params[t.offset..t.offset + t.len()]
                .copy_from_slice(&ck.params[src.offset..src.offset + src.len()]);
        }
        Ok(BcBundle {
            act_norm: read_norm(&ck, "act", ACTION_DIM)?,
            pose_norm: read_norm(&ck, "pose", 9)?,
            wrench_norm: read_norm(&ck, "wrench", 6)?,
            config_hash: ck.config_hash,
            seed: ck.seed,
            net,
        })
    }

    /// Deterministic action prediction (no sampling).
    pub fn act(&self, obs: &Observation) -> ActionChunk {
        let input = self
            .net
            .encoder
            .prepare(obs, &self.pose_norm, &self.wrench_norm);
        let mut acts = self.net.encoder.alloc_acts();
        let mut obs_vec = vec![0.0f32; self.net.encoder.obs_dim()];
        self.net
            .encoder
            .forward(&self.net.params, &input, &mut acts, &mut obs_vec);
        let chunk_norm = self.net.predict(&obs_vec);
        ActionChunk::from_flat(&self.act_norm.denormalize(&chunk_norm))
    }
}

/// Train the BC baseline on the same pairs with plain MSE regression.
#[allow(clippy::too_many_arguments)]
pub fn train_bc(
    pairs: &dyn PairSource,
    pretrain_cfg: &PretrainConfig,
    policy_cfg: &PolicyConfig,
    dims: ImageDims,
    pretrained: Option<&EncoderParams>,
    config_hash: [u8; 32],
    seed: u64,
) -> Result<(BcBundle, TrainReport)> {
    if pairs.is_empty() {
        return Err(Error::Config("no training pairs".into()));
    }
    let (act_norm, pose_norm, wrench_norm) = fit_normalizers(pairs);
    let mut net = BcNet::build(
        pretrain_cfg,
        policy_cfg,
        dims,
        pairs.obs_horizon(),
        pairs.action_horizon(),
        derive_seed(seed, "bc-init", 0),
    );
    if let Some(enc) = pretrained {
        net.init_from_encoder(enc)?;
    }
    let mut optim = Adam::new(net.layout.len, policy_cfg.bc_lr as f32);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "bc-train", 0));
    let mut losses = Vec::new();
    let mut last_good = net.params.clone();
    let mut final_loss = f64::NAN;
    for step in 0..policy_cfg.bc_train_steps {
        let plan: Vec<usize> = (0..policy_cfg.batch)
            .map(|_| rng.gen_range(0..pairs.len()))
            .collect();
        let (mut grads, loss_sum) =
            parallel_grad(&plan, GRAD_CHUNKS, net.layout.len, |idx, g| {
                let (obs, chunk) = pairs.pair(*idx);
                let input = net.encoder.prepare(&obs, &pose_norm, &wrench_norm);
                let a0 = act_norm.normalize(&chunk);
                net.loss_and_grad(&input, &a0, g)
            });
        let loss = loss_sum / policy_cfg.batch as f64;
        if !loss.is_finite() {
            net.params = last_good;
            return Err(Error::Fault(format!("BC training diverged at step {step}")));
        }
        let inv = 1.0 / policy_cfg.batch as f32;
        grads.iter_mut().for_each(|g| *g *= inv);
        clip_grad_norm(&mut grads, 100.0);
        optim.step(&mut net.params, &grads);
        if step % 200 == 0 || step + 1 == policy_cfg.bc_train_steps {
            losses.push((step, loss));
            last_good = net.params.clone();
        }
        final_loss = loss;
    }
    Ok((
        BcBundle {
            net,
            act_norm,
            pose_norm,
            wrench_norm,
            config_hash,
            seed,
        },
        TrainReport { losses, final_loss },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn random_rotation(rng: &mut ChaCha8Rng) -> UnitQuaternion<f64> {
        UnitQuaternion::from_euler_angles(
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-1.5..1.5),
            rng.gen_range(-3.0..3.0),
        )
    }

    #[test]
    fn sixd_identity_and_roundtrip() {
        let id = rot_to_6d(&UnitQuaternion::identity());
        assert_eq!(id, [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let back = sixd_to_rot(&id).unwrap();
        assert!(back.angle() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let r = random_rotation(&mut rng);
            let v = rot_to_6d(&r);
            let r2 = sixd_to_rot(&v).unwrap();
            let m1 = r.to_rotation_matrix();
            let m2 = r2.to_rotation_matrix();
            assert!((m1.matrix() - m2.matrix()).norm() < 1e-9);
        }
    }

    #[test]
    fn sixd_gram_schmidt_on_skew_input() {
        // non-orthogonal second column gets orthonormalized
        let v = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
        let r = sixd_to_rot(&v).unwrap();
        let m = r.to_rotation_matrix();
        let m = m.matrix();
        assert_relative_eq!(m[(0, 0)], 1.0, epsilon = 1e-12);
        assert_relative_eq!(m[(1, 1)], 1.0, epsilon = 1e-12);
        // parallel columns are degenerate
        let bad = [1.0, 0.0, 0.0, 2.0, 1e-12, 0.0];
        assert!(sixd_to_rot(&bad).is_err());
    }

    #[test]
    fn make_pair_identity_and_translation() {
        let x = Pose::new(Vector3::new(0.1, 0.2, 0.3), UnitQuaternion::identity());
        let w = Wrench::zero(WrenchFrame::Probe);
        let step = make_pair(&x, &x, &w);
        assert_eq!(step.translation, Vector3::zeros());
        assert_eq!(step.rotation6d, [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        // +5 mm base-frame x translation with identity orientation
        let mut x2 = x;
        x2.position.x += 0.005;
        let step = make_pair(&x, &x2, &w);
        assert_relative_eq!(step.translation.x, 0.005, epsilon = 1e-12);
        assert_relative_eq!(step.translation.y, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn make_pair_respects_source_frame() {
        // with the probe rotated, a base-frame translation shows up rotated
        // into the source frame
        let rot = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), std::f64::consts::FRAC_PI_2);
        let x = Pose::new(Vector3::zeros(), rot);
        let x2 = Pose::new(Vector3::new(0.005, 0.0, 0.0), rot);
        let step = make_pair(&x, &x2, &Wrench::zero(WrenchFrame::Probe));
        // base +x is the source frame's -y after a +90 deg z rotation
        assert_relative_eq!(step.translation.y, -0.005, epsilon = 1e-12);
        assert!(step.translation.x.abs() < 1e-12);
    }

    #[test]
    fn compose_inverts_make_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let a = Pose::new(
                Vector3::new(rng.gen(), rng.gen(), rng.gen()),
                random_rotation(&mut rng),
            );
            let b = Pose::new(
                Vector3::new(rng.gen(), rng.gen(), rng.gen()),
                random_rotation(&mut rng),
            );
            let step = make_pair(&a, &b, &Wrench::zero(WrenchFrame::Probe));
            let back = apply_step(&a, &step).unwrap();
            assert!((back.position - b.position).norm() < 1e-9);
            assert!(back.orientation.angle_to(&b.orientation) < 1e-9);
        }
    }

    #[test]
    fn schedule_invariants_and_degenerate_unroll() {
        let s = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        assert_eq!(s.k_steps(), 50);
        for w in s.betas.windows(2) {
            assert!(w[0] < w[1]);
        }
        assert!(s.alpha_bars[49] < s.alpha_bars[0]);
        assert_eq!(s.sigma(1), 0.0);
        // K=1, eps=0, rho=0: output is the alpha coefficient times the
        // initial noise
        let s1 = NoiseSchedule::linear(1, 1e-4, 0.02).unwrap();
        let mut layout = Layout::default();
        let _sink = layout.alloc("sink", &[1]);
        let pretrain = PretrainConfig {
            conv_channels: [2, 2, 2],
            feature_dim: 4,
            ..PretrainConfig::default()
        };
        let policy = PolicyConfig {
            hidden_dim: 8,
            probe_view_feature_dim: 2,
            ..PolicyConfig::default()
        };
        let mut net = PolicyNet::build(&pretrain, &policy, 16, 16, 16, 16, 1, 1, 5);
        // zero the entire network so eps_theta == 0
        net.params.iter_mut().for_each(|p| *p = 0.0);
        let obs = vec![0.0f32; net.encoder.obs_dim()];
        let gcfg = GuidanceConfig {
            rho: 0.0,
            a_m_per_px: 6.25e-4,
            image_width_px: 64,
            target_l: 0.5,
        };
        let norm = Normalizer::identity(ACTION_DIM);
        let out = sample_chunk_normalized(&net, &obs, &s1, &gcfg, None, &norm, 77);
        // reproduce the initial noise draw
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let init: Vec<f32> = (0..net.chunk_dim())
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v as f32
            })
            .collect();
        let alpha = s1.alpha_coef(1) as f32;
        for i in 0..out.len() {
            assert_relative_eq!(out[i], alpha * init[i], epsilon = 1e-6);
        }
    }

    #[test]
    fn corruption_approaches_unit_gaussian() {
        let s = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 10_000;
        let mut sum = 0.0f64;
        let mut sumsq = 0.0f64;
        for _ in 0..n {
            let a0 = [(rng.gen::<f64>() * 2.0 - 1.0) as f32];
            let eps = [{
                let v: f64 = StandardNormal.sample(&mut rng);
                v as f32
            }];
            let ak = s.corrupt(&a0, &eps, 50);
            sum += ak[0] as f64;
            sumsq += (ak[0] as f64) * (ak[0] as f64);
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.03, "mean {mean}");
        // data variance 1/3 (uniform) keeps total variance near
        // abar/3 + (1-abar) which is within a few percent of 1
        let abar = s.alpha_bars[49];
        let expected = abar / 3.0 + (1.0 - abar);
        assert!((var - expected).abs() < 0.03 * expected.max(1.0), "var {var} vs {expected}");
    }

    #[test]
    fn normalizer_roundtrip_and_floor() {
        let rows = vec![
            vec![1.0, -2.0, 5.0],
            vec![3.0, -2.0, 5.0],
            vec![2.0, -2.0, 5.0],
        ];
        let norm = Normalizer::fit(rows.clone().into_iter(), 3);
        // constant dims get the floor scale and map to zero
        let n = norm.normalize(&rows[0]);
        assert_relative_eq!(n[1], 0.0);
        assert_relative_eq!(n[2], 0.0);
        assert_relative_eq!(n[0], -1.0);
        let back = norm.denormalize(&n);
        for (a, b) in back.iter().zip(rows[0].iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-6);
        }
    }

    fn tiny_net() -> (PolicyNet, Normalizer) {
        let pretrain = PretrainConfig {
            conv_channels: [2, 2, 2],
            feature_dim: 4,
            ..PretrainConfig::default()
        };
        let policy = PolicyConfig {
            hidden_dim: 16,
            probe_view_feature_dim: 2,
            ..PolicyConfig::default()
        };
        let net = PolicyNet::build(&pretrain, &policy, 16, 16, 16, 16, 1, 4, 5);
        (net, Normalizer::identity(ACTION_DIM))
    }

    #[test]
    fn guidance_zero_when_centered_and_local_to_lateral() {
        let (net, norm) = tiny_net();
        let cfg = GuidanceConfig {
            rho: 1.0,
            a_m_per_px: 6.25e-4,
            image_width_px: 64,
            target_l: 0.5,
        };
        let chunk = vec![0.0f32; net.chunk_dim()];
        let g = guidance_gradient(&cfg, Some(0.5), &chunk, &norm, 4);
        assert!(g.iter().all(|v| *v == 0.0));
        // off-center: gradient only on lateral dims, pushing toward center
        let g = guidance_gradient(&cfg, Some(0.7), &chunk, &norm, 4);
        for (i, v) in g.iter().enumerate() {
            if i % ACTION_DIM == LATERAL_INDEX {
                assert!(*v < 0.0, "lateral dim {i} should push negative");
            } else {
                assert_eq!(*v, 0.0, "non-lateral dim {i} must be exactly zero");
            }
        }
        // missing landmark: zero gradient
        let g = guidance_gradient(&cfg, None, &chunk, &norm, 4);
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn guidance_matches_finite_differences_of_objective() {
        let (net, _) = tiny_net();
        let cfg = GuidanceConfig {
            rho: 1.0,
            a_m_per_px: 6.25e-4,
            image_width_px: 64,
            target_l: 0.5,
        };
        // non-identity normalizer to exercise the chain rule
        let mut act_norm = Normalizer::identity(ACTION_DIM);
        act_norm.scale[LATERAL_INDEX] = 0.004;
        act_norm.center[LATERAL_INDEX] = 0.0005;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let chunk: Vec<f32> = (0..net.chunk_dim()).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let l_now = 0.67;
        let horizon = 4;
        let u_of = |c: &[f32]| -> f64 {
            let phys = act_norm.denormalize(c);
            let w = cfg.a_m_per_px * 64.0;
            let mut cum = 0.0;
            let mut u = 0.0;
            for i in 0..horizon {
                cum += phys[i * ACTION_DIM + LATERAL_INDEX];
                let l = l_now + cum / w;
                u -= 0.5 * (l - cfg.target_l) * (l - cfg.target_l);
            }
            u
        };
        let g = guidance_gradient(&cfg, Some(l_now), &chunk, &act_norm, horizon);
        for i in 0..chunk.len() {
            let mut cp = chunk.clone();
            let h = 1e-3f32;
            cp[i] += h;
            let up = u_of(&cp);
            cp[i] -= 2.0 * h;
            let um = u_of(&cp);
            let fd = (up - um) / (2.0 * h as f64);
            assert!(
                (g[i] as f64 - fd).abs() < 1e-6,
                "dim {i}: analytic {} vs fd {}",
                g[i],
                fd
            );
        }
    }

    #[test]
    fn sampler_is_deterministic() {
        let (net, norm) = tiny_net();
        let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let obs = vec![0.1f32; net.encoder.obs_dim()];
        let cfg = GuidanceConfig {
            rho: 0.5,
            a_m_per_px: 6.25e-4,
            image_width_px: 64,
            target_l: 0.5,
        };
        let a = sample_chunk(&net, &obs, &s, &cfg, Some(0.6), &norm, 33);
        let b = sample_chunk(&net, &obs, &s, &cfg, Some(0.6), &norm, 33);
        assert_eq!(a, b);
        let c = sample_chunk(&net, &obs, &s, &cfg, Some(0.6), &norm, 34);
        assert_ne!(a, c);
    }

    #[test]
    fn zeroed_net_initial_loss_matches_noise_power() {
        // eps_theta == 0 makes the expected summed squared error equal the
        // chunk dimension
        let (mut net, _) = tiny_net();
        net.params.iter_mut().for_each(|p| *p = 0.0);
        let s = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let input = ObsInput {
            frames: vec![vec![0.0; 16 * 16]],
            views: vec![vec![0.0; 16 * 16]],
            poses: vec![vec![0.0; 9]],
            wrenches: vec![vec![0.0; 6]],
        };
        let mut g = vec![0.0f32; net.layout.len];
        let mut total = 0.0;
        let n = 1024;
        for _ in 0..n {
            let a0: Vec<f32> = (0..net.chunk_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let eps: Vec<f32> = (0..net.chunk_dim())
                .map(|_| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    v as f32
                })
                .collect();
            let k = rng.gen_range(1..=50);
            total += net.loss_and_grad(&input, &a0, &eps, k, 50, &s, &mut g);
        }
        let mean = total / n as f64;
        let expected = net.chunk_dim() as f64;
        assert!(
            (mean - expected).abs() < 0.05 * expected,
            "initial loss {mean:.2} vs {expected}"
        );
    }

    #[test]
    fn denoiser_gradcheck() {
        let (net, _) = tiny_net();
        let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let input = ObsInput {
            frames: vec![(0..256).map(|i| ((i % 7) as f32) / 7.0 - 0.5).collect()],
            views: vec![(0..256).map(|i| ((i % 5) as f32) / 5.0 - 0.5).collect()],
            poses: vec![(0..9).map(|i| 0.1 * i as f32).collect()],
            wrenches: vec![(0..6).map(|i| -0.1 * i as f32).collect()],
        };
        let a0: Vec<f32> = (0..net.chunk_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let eps: Vec<f32> = (0..net.chunk_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = vec![0.0f32; net.layout.len];
        net.loss_and_grad(&input, &a0, &eps, 5, 10, &s, &mut g);
        let mut net2 = net.clone();
        // a few parameters across all submodules
        let idxs = [
            net.layout.find("us.conv1.w").unwrap().offset + 1,
            net.layout.find("pv.conv2.w").unwrap().offset + 3,
            net.layout.find("denoiser.fc1.w").unwrap().offset + 10,
            net.layout.find("denoiser.fc3.b").unwrap().offset + 2,
        ];
        for idx in idxs {
            let h = 1e-2f32;
            let orig = net2.params[idx];
            net2.params[idx] = orig + h;
            let mut gg = vec![0.0f32; net2.layout.len];
            let lp = net2.loss_and_grad(&input, &a0, &eps, 5, 10, &s, &mut gg);
            net2.params[idx] = orig - h;
            gg.fill(0.0);
            let lm = net2.loss_and_grad(&input, &a0, &eps, 5, 10, &s, &mut gg);
            net2.params[idx] = orig;
            let fd = ((lp - lm) / (2.0 * h as f64)) as f32;
            assert!(
                (g[idx] - fd).abs() <= 2e-2 * fd.abs().max(0.1),
                "idx {idx}: analytic {} vs fd {}",
                g[idx],
                fd
            );
        }
    }

    /// Constant observation, bimodal lateral actions.
    pub struct BimodalPairs {
        pub horizon: usize,
        pub delta: f64,
        pub n: usize,
    }

    impl PairSource for BimodalPairs {
        fn len(&self) -> usize {
            self.n
        }
        fn obs_horizon(&self) -> usize {
            1
        }
        fn action_horizon(&self) -> usize {
            self.horizon
        }
        fn pair(&self, idx: usize) -> (Observation, Vec<f64>) {
            let obs = Observation {
                frames: vec![vec![0.2; 16 * 16]],
                views: vec![vec![0.1; 16 * 16]],
                poses: vec![[0.0; 9]],
                wrenches: vec![[0.0; 6]],
            };
            let sign = if idx % 2 == 0 { 1.0 } else { -1.0 };
            let mut chunk = vec![0.0f64; self.horizon * ACTION_DIM];
            for i in 0..self.horizon {
                let mut step = ActionStep::identity();
                step.translation.y = sign * self.delta;
                step.wrench[2] = 2.5;
                chunk[i * ACTION_DIM..(i + 1) * ACTION_DIM].copy_from_slice(&step.to_array());
            }
            (obs, chunk)
        }
        fn pair_meta(&self, idx: usize) -> (Vec<[f64; 9]>, Vec<[f64; 6]>, Vec<f64>) {
            let (obs, chunk) = self.pair(idx);
            (obs.poses, obs.wrenches, chunk)
        }
    }

    /// Train tiny diffusion and BC policies on the bimodal set and compare
    /// how they represent the two modes.
    #[test]
    fn diffusion_keeps_modes_bc_averages() {
        let pairs = BimodalPairs {
            horizon: 4,
            delta: 0.004,
            n: 256,
        };
        let pretrain = PretrainConfig {
            conv_channels: [2, 2, 2],
            feature_dim: 4,
            ..PretrainConfig::default()
        };
        let policy_cfg = PolicyConfig {
            hidden_dim: 48,
            probe_view_feature_dim: 2,
            denoise_steps: 25,
            train_steps: 1500,
            batch: 16,
            lr: 2e-3,
            bc_train_steps: 300,
            bc_lr: 2e-3,
            ..PolicyConfig::default()
        };
        let dims = ImageDims {
            us_h: 16,
            us_w: 16,
            pv_h: 16,
            pv_w: 16,
        };
        let (bundle, report) =
            train_policy(&pairs, &pretrain, &policy_cfg, dims, None, [0u8; 32], 42).unwrap();
        assert!(report.final_loss.is_finite());
        let (obs, _) = pairs.pair(0);
        let obs_vec = bundle.encode_obs(&obs);
        let gcfg = GuidanceConfig {
            rho: 0.0,
            a_m_per_px: 6.25e-4,
            image_width_px: 64,
            target_l: 0.5,
        };
        let mut lo = 0usize;
        let mut hi = 0usize;
        let mut mid = 0usize;
        let n_samples = 400;
        for s in 0..n_samples {
            let chunk = sample_chunk(
                &bundle.net,
                &obs_vec,
                &bundle.schedule,
                &gcfg,
                None,
                &bundle.act_norm,
                1000 + s as u64,
            );
            let mean_lat: f64 = chunk
                .steps
                .iter()
                .map(|st| st.translation.y)
                .sum::<f64>()
                / chunk.steps.len() as f64;
            if mean_lat > 0.002 {
                hi += 1;
            } else if mean_lat < -0.002 {
                lo += 1;
            } else {
                mid += 1;
            }
        }
        let mid_frac = mid as f64 / n_samples as f64;
        assert!(
            mid_frac < 0.05,
            "between-mode mass {mid_frac:.3} (lo {lo} hi {hi} mid {mid})"
        );
        assert!(lo > n_samples / 6 && hi > n_samples / 6, "lost a mode: lo {lo} hi {hi}");

        // same data through the BC regressor: the deterministic prediction
        // lands between the modes
        let (bc, _) = train_bc(&pairs, &pretrain, &policy_cfg, dims, None, [0u8; 32], 43).unwrap();
        let chunk = bc.act(&obs);
        let mean_lat: f64 = chunk.steps.iter().map(|st| st.translation.y).sum::<f64>()
            / chunk.steps.len() as f64;
        assert!(
            mean_lat.abs() < 0.002,
            "BC should average the modes, got {mean_lat:.5}"
        );
    }

    #[test]
    fn policy_checkpoint_roundtrip() {
        let pairs = BimodalPairs {
            horizon: 4,
            delta: 0.004,
            n: 32,
        };
        let pretrain = PretrainConfig {
            conv_channels: [2, 2, 2],
            feature_dim: 4,
            ..PretrainConfig::default()
        };
        let policy_cfg = PolicyConfig {
            hidden_dim: 16,
            probe_view_feature_dim: 2,
            denoise_steps: 8,
            train_steps: 10,
            batch: 8,
            ..PolicyConfig::default()
        };
        let dims = ImageDims {
            us_h: 16,
            us_w: 16,
            pv_h: 16,
            pv_w: 16,
        };
        let (bundle, _) =
            train_policy(&pairs, &pretrain, &policy_cfg, dims, None, [3u8; 32], 7).unwrap();
        let dir = std::env::temp_dir().join("sonosim-policy-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("p.bin");
        bundle.save(&path).unwrap();
        let back = PolicyBundle::load(&path, &pretrain, &policy_cfg, dims, 1, 4).unwrap();
        assert_eq!(back.net.params, bundle.net.params);
        assert_eq!(back.act_norm, bundle.act_norm);
        assert_eq!(back.schedule.k_steps(), 8);
        assert_eq!(back.config_hash, [3u8; 32]);
        // identical sampling behavior after reload
        let (obs, _) = pairs.pair(0);
        let g = GuidanceConfig {
            rho: 0.0,
            a_m_per_px: 6.25e-4,
            image_width_px: 64,
            target_l: 0.5,
        };
        let a = bundle.act(&obs, &g, None, 5);
        let b = back.act(&obs, &g, None, 5);
        assert_eq!(a, b);

        let (bcb, _) = train_bc(&pairs, &pretrain, &policy_cfg, dims, None, [3u8; 32], 8).unwrap();
        let bc_path = dir.join("bc.bin");
        bcb.save(&bc_path).unwrap();
        let bc2 = BcBundle::load(&bc_path, &pretrain, &policy_cfg, dims, 1, 4).unwrap();
        assert_eq!(bc2.net.params, bcb.net.params);
        assert_eq!(bc2.act(&obs), bcb.act(&obs));
    }

    #[test]
    fn training_is_deterministic() {
        let pairs = BimodalPairs {
            horizon: 2,
            delta: 0.004,
            n: 16,
        };
        let pretrain = PretrainConfig {
            conv_channels: [2, 2, 2],
            feature_dim: 4,
            ..PretrainConfig::default()
        };
        let policy_cfg = PolicyConfig {
            hidden_dim: 16,
            probe_view_feature_dim: 2,
            denoise_steps: 8,
            train_steps: 30,
            batch: 8,
            ..PolicyConfig::default()
        };
        let dims = ImageDims {
            us_h: 16,
            us_w: 16,
            pv_h: 16,
            pv_w: 16,
        };
        let (a, ra) = train_policy(&pairs, &pretrain, &policy_cfg, dims, None, [0u8; 32], 9).unwrap();
        let (b, rb) = train_policy(&pairs, &pretrain, &policy_cfg, dims, None, [0u8; 32], 9).unwrap();
        assert_eq!(a.net.params, b.net.params);
        assert_eq!(ra.losses, rb.losses);
    }

    #[test]
    fn observation_history_padding() {
        use crate::imaging::UltrasoundFrame;
        let frame = |v: f32| UltrasoundFrame {
            pixels: vec![v; 4],
            width: 2,
            height: 2,
            timestamp: 0.0,
        };
        let sf = |v: f32| SensorFrame {
            ultrasound: frame(v),
            truth: crate::imaging::LandmarkTruth::none(),
            probe_view: frame(v),
            pose: Pose::identity(),
            wrench: Wrench::zero(WrenchFrame::Probe),
            in_contact: false,
        };
        let history = vec![sf(1.0)];
        let obs = Observation::from_history(&history, 2);
        assert_eq!(obs.frames.len(), 2);
        assert_eq!(obs.frames[0], obs.frames[1]);
        let history = vec![sf(1.0), sf(2.0), sf(3.0)];
        let obs = Observation::from_history(&history, 2);
        assert_eq!(obs.frames[0][0], 2.0);
        assert_eq!(obs.frames[1][0], 3.0);
    }
}
