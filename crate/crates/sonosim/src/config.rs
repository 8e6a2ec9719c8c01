//! Run configuration: one human-readable TOML file covering every stage,
//! with CLI flag overrides. All randomness flows from the single top-level
//! seed through named sub-streams; data-affecting sections are hashed and
//! the hash is embedded in every artifact for provenance checks.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use crate::arm::ArmModel;
use crate::controller::{GainsConfig, SelectionMatrices};
use crate::imaging::{CameraModel, ProbeModel};
use crate::phantom::PhantomRanges;
use crate::{Error, Result};

/// Derive a child seed from a parent seed, a stream label and an index.
pub fn derive_seed(parent: u64, label: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(parent.to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControlConfig {
    pub gains: GainsConfig,
    pub selections: SelectionMatrices,
    /// Inner control-loop period, s (1 kHz).
    pub control_dt: f64,
    /// Navigation period, s (10 Hz).
    pub nav_dt: f64,
    /// Low-pass cutoff between navigation and control, Hz.
    pub cutoff_hz: f64,
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig {
            gains: GainsConfig::default(),
            selections: SelectionMatrices::default(),
            control_dt: 1e-3,
            nav_dt: 0.1,
            cutoff_hz: 2.0,
        }
    }
}

/// Scripted-expert behavior; ranges are sampled once per trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpertConfig {
    /// Scan speed along the neck axis before the deceleration point, m/s.
    pub scan_speed: [f64; 2],
    /// Speed after the deceleration point, m/s.
    pub slow_speed: f64,
    /// Arc-length where the expert slows ahead of the expected bifurcation
    /// region, m.
    pub decel_s: f64,
    /// Per-trajectory target contact force range, N.
    pub force_target: [f64; 2],
    /// Force ramp rate while establishing contact, N/s.
    pub force_ramp_rate: f64,
    /// Slow within-trajectory force drift amplitude, N.
    pub force_drift_amp: f64,
    /// Drift period, s.
    pub force_drift_period: f64,
    /// Fraction of the pixel error corrected per navigation tick.
    pub lateral_gain: f64,
    /// Start state ranges: hover height above skin, lateral offset from the
    /// artery, tilt, arc-length.
    pub start_height: [f64; 2],
    pub start_lateral: [f64; 2],
    pub start_tilt: [f64; 2],
    pub start_s: [f64; 2],
    /// Reject a demonstration that has not centered within this time, s.
    pub center_timeout_s: f64,
    pub max_duration_s: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        ExpertConfig {
            scan_speed: [0.007, 0.010],
            slow_speed: 0.0045,
            decel_s: 0.095,
            force_target: [2.0, 3.2],
            force_ramp_rate: 1.2,
            force_drift_amp: 0.3,
            force_drift_period: 9.0,
            lateral_gain: 0.35,
            start_height: [0.001, 0.003],
            start_lateral: [-0.003, 0.003],
            start_tilt: [-0.05, 0.05],
            start_s: [0.006, 0.018],
            center_timeout_s: 4.0,
            max_duration_s: 30.0,
        }
    }
}

/// Demonstration dataset assembly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_train_phantoms: usize,
    pub demos_per_phantom: usize,
    /// Augmented copies per accepted demonstration.
    pub augment_copies: usize,
    /// Rigid-transform noise: translation sigma (m) and rotation sigma (rad).
    pub augment_sigma_t: f64,
    pub augment_sigma_r: f64,
    /// Per-sample jitter mode instead of per-trajectory rigid transforms.
    pub augment_per_sample: bool,
    pub obs_horizon: usize,
    pub action_horizon: usize,
    /// Chunk steps executed before re-sampling (receding horizon).
    pub n_exec: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_train_phantoms: 8,
            demos_per_phantom: 5,
            augment_copies: 3,
            augment_sigma_t: 0.004,
            augment_sigma_r: 0.015,
            augment_per_sample: false,
            obs_horizon: 2,
            action_horizon: 8,
            n_exec: 4,
        }
    }
}

/// Landmark-encoder pretraining.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub n_pairs: usize,
    pub val_frac: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Momentum gradient descent with a fixed step.
    pub lr: f64,
    pub momentum: f64,
    /// Conv stage output channels (stride 2 each) and dense feature width.
    pub conv_channels: [usize; 3],
    pub feature_dim: usize,
    /// Weight of the masked regression loss against the classification loss.
    pub regression_weight: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            n_pairs: 6000,
            val_frac: 0.1,
            epochs: 20,
            batch: 64,
            lr: 0.02,
            momentum: 0.9,
            conv_channels: [8, 16, 16],
            feature_dim: 64,
            regression_weight: 4.0,
        }
    }
}

/// Diffusion policy and BC baseline training/sampling.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyConfig {
    /// Denoising steps K and the linear beta schedule endpoints.
    pub denoise_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Denoiser MLP width and probe-view feature width.
    pub hidden_dim: usize,
    pub probe_view_feature_dim: usize,
    pub train_steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Guidance scale (rho); per-step it is annealed with the gamma
    /// coefficient so the guidance-to-denoise ratio stays constant.
    pub rho: f64,
    /// Observation modality flags (ablations).
    pub use_pose: bool,
    pub use_wrench: bool,
    pub bc_train_steps: usize,
    pub bc_lr: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            denoise_steps: 50,
            beta_start: 1e-4,
            beta_end: 0.5,
            hidden_dim: 256,
            probe_view_feature_dim: 32,
            train_steps: 5000,
            batch: 32,
            lr: 1e-3,
            rho: 1.0,
            use_pose: true,
            use_wrench: true,
            bc_train_steps: 4000,
            bc_lr: 1e-3,
        }
    }
}

/// Rollout evaluation and the 20-trial comparison suite.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_heldout_phantoms: usize,
    pub trials_per_phantom: usize,
    pub timeout_s: f64,
    /// Pixel tolerance defining a "centered" tick.
    pub center_tol_px: f64,
    /// Stop-position tolerance along the neck axis, m.
    pub stop_tol_m: f64,
    /// Safety envelope: rollout faults beyond these.
    pub safety_force: f64,
    pub safety_torque: f64,
    /// Rollout start-state ranges (lateral offset is a magnitude with
    /// random sign).
    pub start_height: [f64; 2],
    pub start_lateral_mag: [f64; 2],
    pub start_tilt_mag: [f64; 2],
    pub start_s: [f64; 2],
    /// Bifurcation detector: consecutive two-vessel detections required.
    pub detect_ticks: usize,
    /// Visual-servo baseline: virtual stiffness (N/m) of its height-error
    /// force law and its lateral gain.
    pub vs_stiffness: f64,
    pub vs_lateral_gain: f64,
    /// Desired press depth used to calibrate the VS height target, m.
    pub vs_press_depth: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_heldout_phantoms: 4,
            trials_per_phantom: 5,
            timeout_s: 40.0,
            center_tol_px: 8.0,
            stop_tol_m: 0.010,
            safety_force: 10.0,
            safety_torque: 1.0,
            start_height: [0.001, 0.003],
            start_lateral_mag: [0.005, 0.010],
            start_tilt_mag: [0.02, 0.06],
            start_s: [0.012, 0.030],
            detect_ticks: 2,
            vs_stiffness: 800.0,
            vs_lateral_gain: 0.5,
            vs_press_depth: 0.008,
        }
    }
}

/// Whole-run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    /// Top-level seed; every stage derives named sub-seeds from it.
    pub seed: u64,
    /// Phantom placement: neck-axis start point in the base frame.
    pub phantom_origin: [f64; 3],
    pub phantom: PhantomRanges,
    pub probe: ProbeModel,
    pub camera: CameraModel,
    pub arm: ArmModel,
    /// Null-space rest posture (also the IK seed for start placement).
    pub q_rest: Vec<f64>,
    pub control: ControlConfig,
    pub expert: ExpertConfig,
    pub dataset: DatasetConfig,
    pub pretrain: PretrainConfig,
    pub policy: PolicyConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 20260810,
            phantom_origin: [0.35, 0.0, 0.19],
            phantom: PhantomRanges::default(),
            probe: ProbeModel::default(),
            camera: CameraModel::default(),
            arm: ArmModel::default_7dof(),
            q_rest: vec![0.0, 0.7, 0.0, 1.5, 0.0, 0.94, 0.0],
            control: ControlConfig::default(),
            expert: ExpertConfig::default(),
            dataset: DatasetConfig::default(),
            pretrain: PretrainConfig::default(),
            policy: PolicyConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{path:?}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serialize config: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.arm.validate()?;
        self.control.gains.build(self.arm.dof()).validate()?;
        self.control.selections.validate()?;
        if self.q_rest.len() != self.arm.dof() {
            return Err(Error::Config("q_rest length must match arm dof".into()));
        }
        if self.dataset.obs_horizon < 1 || self.dataset.action_horizon < 1 {
            return Err(Error::Config("horizons must be >= 1".into()));
        }
        if self.dataset.n_exec > self.dataset.action_horizon {
            return Err(Error::Config(
                "n_exec cannot exceed the action horizon".into(),
            ));
        }
        if self.policy.denoise_steps < 1 {
            return Err(Error::Config("need at least one denoising step".into()));
        }
        if !(self.policy.beta_start > 0.0
            && self.policy.beta_start < self.policy.beta_end
            && self.policy.beta_end < 1.0)
        {
            return Err(Error::Config(
                "beta schedule must satisfy 0 < start < end < 1".into(),
            ));
        }
        Ok(())
    }

    pub fn q_rest_vec(&self) -> nalgebra::DVector<f64> {
        nalgebra::DVector::from_column_slice(&self.q_rest)
    }

    /// Hash of the data-generating sections (seed, phantom, probe, camera,
    /// arm, control, expert, dataset). Checkpoints additionally record
    /// their modality flags; training-only hyperparameters do not feed the
    /// hash so a retrained variant can evaluate against the same dataset.
    pub fn data_hash(&self) -> [u8; 32] {
        #[derive(Serialize)]
        struct DataView<'a> {
            seed: u64,
            phantom_origin: [f64; 3],
            phantom: &'a PhantomRanges,
            probe: &'a ProbeModel,
            camera: &'a CameraModel,
            arm: &'a ArmModel,
            q_rest: &'a Vec<f64>,
            control: &'a ControlConfig,
            expert: &'a ExpertConfig,
            dataset: &'a DatasetConfig,
        }
        let view = DataView {
            seed: self.seed,
            phantom_origin: self.phantom_origin,
            phantom: &self.phantom,
            probe: &self.probe,
            camera: &self.camera,
            arm: &self.arm,
            q_rest: &self.q_rest,
            control: &self.control,
            expert: &self.expert,
            dataset: &self.dataset,
        };
        let text = toml::to_string(&view).expect("config serializes");
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        h.finalize().into()
    }

    /// Training phantom seeds (stream "phantom-train").
    pub fn train_phantom_seeds(&self) -> Vec<u64> {
        (0..self.dataset.n_train_phantoms)
            .map(|i| derive_seed(self.seed, "phantom-train", i as u64))
            .collect()
    }

    /// Held-out phantom seeds (stream "phantom-heldout").
    pub fn heldout_phantom_seeds(&self) -> Vec<u64> {
        (0..self.eval.n_heldout_phantoms)
            .map(|i| derive_seed(self.seed, "phantom-heldout", i as u64))
            .collect()
    }
}

pub fn hash_hex(hash: &[u8; 32]) -> String {
    hash.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_seed_stable_and_distinct() {
        let a = derive_seed(1, "phantom", 0);
        assert_eq!(a, derive_seed(1, "phantom", 0));
        assert_ne!(a, derive_seed(1, "phantom", 1));
        assert_ne!(a, derive_seed(1, "expert", 0));
        assert_ne!(a, derive_seed(2, "phantom", 0));
    }

    #[test]
    fn default_config_valid_and_roundtrips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg.data_hash(), back.data_hash());
    }

    #[test]
    fn data_hash_ignores_training_hyperparameters() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        b.policy.train_steps = 1;
        b.pretrain.epochs = 1;
        assert_eq!(a.data_hash(), b.data_hash());
        let mut c = RunConfig::default();
        c.expert.force_target = [2.2, 3.0];
        assert_ne!(a.data_hash(), c.data_hash());
        let mut d = RunConfig::default();
        d.seed += 1;
        assert_ne!(a.data_hash(), d.data_hash());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = RunConfig::default();
        cfg.q_rest = vec![0.0; 5];
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.dataset.n_exec = 99;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.policy.beta_start = 0.5;
        cfg.policy.beta_end = 0.1;
        assert!(cfg.validate().is_err());
    }
}
