//! Command implementations behind the `sonosim` binary: the end-to-end
//! pipeline is gen-data -> pretrain -> train -> evaluate, plus replay for
//! stored rollout logs. Every artifact embeds the data-config hash and the
//! stage commands refuse to run on mismatched artifacts.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::config::{hash_hex, RunConfig};
use crate::eval::{
    calibrate_vs, compute_metrics, load_log, run_suite, ssim_vs_expert, summarize, write_metrics_csv,
    NavPolicyKind, SummaryRow, TrialOutcome,
};
use crate::expert::{collect_dataset, write_manifest, DemoDataset};
use crate::io::write_pgm;
use crate::perception::{generate_landmark_dataset, pretrain, EncoderParams, LandmarkDataset};
use crate::policy::{train_bc, train_policy, BcBundle, ImageDims, PolicyBundle};
use crate::{Error, Result};

/// Observation-modality ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    NoWrench,
    NoPose,
}

impl Ablation {
    pub fn parse(s: &str) -> Result<Ablation> {
        match s {
            "no-wrench" => Ok(Ablation::NoWrench),
            "no-pose" => Ok(Ablation::NoPose),
            _ => Err(Error::Config(format!(
                "unknown ablation '{s}' (expected no-wrench or no-pose)"
            ))),
        }
    }

    pub fn suffix(&self) -> &'static str {
        match self {
            Ablation::NoWrench => "no-wrench",
            Ablation::NoPose => "no-pose",
        }
    }
}

/// Standard artifact locations inside the output directory.
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn new(dir: &Path) -> Artifacts {
        Artifacts {
            dir: dir.to_path_buf(),
        }
    }

    pub fn demos(&self) -> PathBuf {
        self.dir.join("demos.bin")
    }

    pub fn manifest(&self) -> PathBuf {
        self.dir.join("demos-manifest.csv")
    }

    pub fn landmarks(&self) -> PathBuf {
        self.dir.join("landmarks.bin")
    }

    pub fn encoder(&self) -> PathBuf {
        self.dir.join("encoder.bin")
    }

    pub fn policy(&self, ablate: Option<Ablation>) -> PathBuf {
        match ablate {
            None => self.dir.join("policy.bin"),
            Some(a) => self.dir.join(format!("policy-{}.bin", a.suffix())),
        }
    }

    pub fn bc(&self) -> PathBuf {
        self.dir.join("bc.bin")
    }

    pub fn metrics_csv(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }

    pub fn summary(&self) -> PathBuf {
        self.dir.join("summary.txt")
    }

    pub fn logs_dir(&self) -> PathBuf {
        self.dir.join("logs")
    }

    pub fn config_snapshot(&self) -> PathBuf {
        self.dir.join("run-config.toml")
    }
}

/// Load the run config, applying the CLI seed override.
pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn image_dims(cfg: &RunConfig) -> ImageDims {
    ImageDims {
        us_h: cfg.probe.image_height_px,
        us_w: cfg.probe.image_width_px,
        pv_h: cfg.camera.image_height_px,
        pv_w: cfg.camera.image_width_px,
    }
}

/// gen-data: expert demonstrations + augmentation + the landmark
/// pretraining set; writes the dataset, the manifest and a config snapshot.
pub fn cmd_gen_data(cfg: &RunConfig, out_dir: &Path) -> Result<(usize, usize)> {
    std::fs::create_dir_all(out_dir)?;
    let art = Artifacts::new(out_dir);
    cfg.save(&art.config_snapshot())?;

    let (dataset, manifest) = collect_dataset(cfg)?;
    dataset.save(&art.demos())?;
    write_manifest(&art.manifest(), &manifest)?;

    let landmarks = generate_landmark_dataset(cfg, cfg.seed)?;
    landmarks.save(&art.landmarks())?;

    Ok((dataset.n_demos(), dataset.n_pairs()))
}

/// pretrain: landmark encoder on the generated set; refuses on hash
/// mismatch; writes the encoder checkpoint and a training-curve CSV.
pub fn cmd_pretrain(cfg: &RunConfig, out_dir: &Path) -> Result<crate::perception::PretrainReport> {
    let art = Artifacts::new(out_dir);
    let ds = LandmarkDataset::load(&art.landmarks())?;
    if ds.config_hash != cfg.data_hash() {
        return Err(Error::HashMismatch(
            "landmark dataset was generated under a different data config".into(),
        ));
    }
    let (enc, report) = pretrain(&ds, &cfg.pretrain, cfg.seed)?;
    enc.save(&art.encoder())?;
    let mut curve = String::from("epoch,train_loss,val_mae\n");
    for (i, (loss, mae)) in report.epochs.iter().enumerate() {
        curve.push_str(&format!("{i},{loss},{mae}\n"));
    }
    std::fs::write(out_dir.join("pretrain-curve.csv"), curve)?;
    Ok(report)
}

/// train: diffusion policy (default), BC baseline (`bc = true`) or an
/// ablated diffusion variant. Requires the demos and the pretrained
/// encoder; refuses on hash mismatches.
pub fn cmd_train(
    cfg: &RunConfig,
    out_dir: &Path,
    bc: bool,
    ablate: Option<Ablation>,
) -> Result<PathBuf> {
    let art = Artifacts::new(out_dir);
    let dataset = DemoDataset::load(&art.demos())?;
    let hash = cfg.data_hash();
    if dataset.config_hash != hash {
        return Err(Error::HashMismatch(
            "demonstration dataset was generated under a different data config".into(),
        ));
    }
    let enc = EncoderParams::load(
        &art.encoder(),
        &cfg.pretrain,
        cfg.probe.image_height_px,
        cfg.probe.image_width_px,
    )?;
    if enc.config_hash != hash {
        return Err(Error::HashMismatch(
            "encoder checkpoint was trained under a different data config".into(),
        ));
    }

    let mut policy_cfg = cfg.policy.clone();
    match ablate {
        Some(Ablation::NoWrench) => policy_cfg.use_wrench = false,
        Some(Ablation::NoPose) => policy_cfg.use_pose = false,
        None => {}
    }
    let dims = image_dims(cfg);
    let curve_name: String;
    let path = if bc {
        if ablate.is_some() {
            return Err(Error::Config(
                "ablations apply to the diffusion policy, not the BC baseline".into(),
            ));
        }
        let (bundle, report) = train_bc(
            &dataset,
            &cfg.pretrain,
            &policy_cfg,
            dims,
            Some(&enc),
            hash,
            cfg.seed,
        )?;
        let p = art.bc();
        bundle.save(&p)?;
        curve_name = "bc-curve.csv".into();
        write_curve(out_dir, &curve_name, &report)?;
        p
    } else {
        let (bundle, report) = train_policy(
            &dataset,
            &cfg.pretrain,
            &policy_cfg,
            dims,
            Some(&enc),
            hash,
            cfg.seed,
        )?;
        let p = art.policy(ablate);
        bundle.save(&p)?;
        curve_name = match ablate {
            None => "policy-curve.csv".into(),
            Some(a) => format!("policy-{}-curve.csv", a.suffix()),
        };
        write_curve(out_dir, &curve_name, &report)?;
        p
    };
    Ok(path)
}

fn write_curve(out_dir: &Path, name: &str, report: &crate::policy::TrainReport) -> Result<()> {
    let mut curve = String::from("step,loss\n");
    for (s, l) in &report.losses {
        curve.push_str(&format!("{s},{l}\n"));
    }
    std::fs::write(out_dir.join(name), curve)?;
    Ok(())
}

/// Which rows to evaluate.
#[derive(Debug, Clone, Default)]
pub struct EvalSelection {
    /// Evaluate the main diffusion policy checkpoint.
    pub policy: bool,
    /// Explicit policy checkpoint path (defaults to `policy.bin`).
    pub policy_path: Option<PathBuf>,
    pub bc: bool,
    pub vs: bool,
    pub ablations: Vec<Ablation>,
}

/// evaluate: the held-out comparison suite for the selected rows; writes
/// per-rollout metrics CSV, the summary table and replayable logs.
pub fn cmd_evaluate(
    cfg: &RunConfig,
    out_dir: &Path,
    selection: &EvalSelection,
) -> Result<(Vec<TrialOutcome>, Vec<SummaryRow>)> {
    let art = Artifacts::new(out_dir);
    let hash = cfg.data_hash();
    let dims = image_dims(cfg);
    let enc = Arc::new(EncoderParams::load(
        &art.encoder(),
        &cfg.pretrain,
        cfg.probe.image_height_px,
        cfg.probe.image_width_px,
    )?);
    if enc.config_hash != hash {
        return Err(Error::HashMismatch(
            "encoder checkpoint was trained under a different data config".into(),
        ));
    }

    let mut kinds: Vec<(String, NavPolicyKind)> = Vec::new();
    if selection.policy {
        let path = selection
            .policy_path
            .clone()
            .unwrap_or_else(|| art.policy(None));
        let bundle = PolicyBundle::load(
            &path,
            &cfg.pretrain,
            &cfg.policy,
            dims,
            cfg.dataset.obs_horizon,
            cfg.dataset.action_horizon,
        )?;
        if bundle.config_hash != hash {
            return Err(Error::HashMismatch(
                "policy checkpoint was trained under a different data config".into(),
            ));
        }
        kinds.push((
            "diffusion".into(),
            NavPolicyKind::Diffusion {
                bundle: Arc::new(bundle),
                encoder: enc.clone(),
                rho: cfg.policy.rho,
                n_exec: cfg.dataset.n_exec,
            },
        ));
    }
    for a in &selection.ablations {
        let mut pc = cfg.policy.clone();
        match a {
            Ablation::NoWrench => pc.use_wrench = false,
            Ablation::NoPose => pc.use_pose = false,
        }
        let bundle = PolicyBundle::load(
            &art.policy(Some(*a)),
            &cfg.pretrain,
            &pc,
            dims,
            cfg.dataset.obs_horizon,
            cfg.dataset.action_horizon,
        )?;
        if bundle.config_hash != hash {
            return Err(Error::HashMismatch(format!(
                "{} checkpoint was trained under a different data config",
                a.suffix()
            )));
        }
        let expected_flags = match a {
            Ablation::NoWrench => (true, false),
            Ablation::NoPose => (false, true),
        };
        if (bundle.net.encoder.use_pose, bundle.net.encoder.use_wrench) != expected_flags {
            return Err(Error::Config(format!(
                "checkpoint modality flags do not match the {} ablation",
                a.suffix()
            )));
        }
        kinds.push((
            format!("diffusion-{}", a.suffix()),
            NavPolicyKind::Diffusion {
                bundle: Arc::new(bundle),
                encoder: enc.clone(),
                rho: cfg.policy.rho,
                n_exec: cfg.dataset.n_exec,
            },
        ));
    }
    if selection.vs {
        kinds.push((
            "vs".into(),
            NavPolicyKind::VisualServo {
                encoder: enc.clone(),
                calib: calibrate_vs(cfg)?,
            },
        ));
    }
    if selection.bc {
        let bundle = BcBundle::load(
            &art.bc(),
            &cfg.pretrain,
            &cfg.policy,
            dims,
            cfg.dataset.obs_horizon,
            cfg.dataset.action_horizon,
        )?;
        if bundle.config_hash != hash {
            return Err(Error::HashMismatch(
                "BC checkpoint was trained under a different data config".into(),
            ));
        }
        kinds.push((
            "bc".into(),
            NavPolicyKind::Bc {
                bundle: Arc::new(bundle),
                encoder: enc.clone(),
                n_exec: cfg.dataset.n_exec,
            },
        ));
    }
    if kinds.is_empty() {
        return Err(Error::Config(
            "nothing to evaluate: select a policy checkpoint or baselines".into(),
        ));
    }

    let outcomes = run_suite(cfg, &kinds, Some(&art.logs_dir()))?;
    write_metrics_csv(&art.metrics_csv(), &outcomes)?;
    let summary = summarize(&outcomes);
    std::fs::write(&art.summary(), crate::eval::format_summary(&summary))?;
    Ok((outcomes, summary))
}

/// replay: re-derive metrics from a stored log (bitwise equality against
/// the stored metrics) and dump the frames as PGM files.
pub fn cmd_replay(
    log_path: &Path,
    out_dir: &Path,
    expert_log: Option<&Path>,
    cfg: &RunConfig,
) -> Result<crate::eval::Metrics> {
    let (log, stored) = load_log(log_path)?;
    std::fs::create_dir_all(out_dir)?;
    let mut recomputed = compute_metrics(&log, cfg);
    if let Some(ep) = expert_log {
        let (elog, _) = load_log(ep)?;
        recomputed.ssim_vs_expert = ssim_vs_expert(&log, &elog)?;
    }
    if let Some(stored) = stored {
        let same = recomputed.success == stored.success
            && recomputed.centering_px.to_bits() == stored.centering_px.to_bits()
            && recomputed.force_rate.to_bits() == stored.force_rate.to_bits()
            && recomputed.tracking_error_m.to_bits() == stored.tracking_error_m.to_bits()
            && recomputed.loss_of_contact == stored.loss_of_contact
            && (expert_log.is_none()
                || recomputed.ssim_vs_expert.to_bits() == stored.ssim_vs_expert.to_bits());
        if !same {
            return Err(Error::Fault(format!(
                "replay metrics do not match stored metrics: {recomputed:?} vs {stored:?}"
            )));
        }
    }
    for (i, tick) in log.ticks.iter().enumerate() {
        write_pgm(
            &out_dir.join(format!("frame-{i:04}.pgm")),
            &tick.frame,
            log.image_width_px,
            log.image_height_px,
        )?;
    }
    Ok(recomputed)
}

/// Short human-readable provenance line for logs and stdout.
pub fn provenance(cfg: &RunConfig) -> String {
    format!("seed {} data-hash {}", cfg.seed, &hash_hex(&cfg.data_hash())[..12])
}
