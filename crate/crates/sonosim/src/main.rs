use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};

use sonosim::cli::{
    self, cmd_evaluate, cmd_gen_data, cmd_pretrain, cmd_replay, cmd_train, Ablation, EvalSelection,
};
use sonosim::eval::format_summary;

/// Desk-scale autonomous ultrasound-scanning simulator: scripted-expert
/// data collection, landmark-encoder pretraining, guided diffusion-policy
/// training and the held-out comparison suite.
#[derive(Parser)]
#[command(name = "sonosim", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Collect expert demonstrations, augment them and generate the
    /// landmark pretraining set.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        /// Override the number of training phantoms.
        #[arg(long)]
        phantoms: Option<usize>,
        /// Override demonstrations per phantom.
        #[arg(long)]
        demos: Option<usize>,
    },
    /// Pretrain the landmark encoder on the generated set.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Train the diffusion policy (default), an ablated variant, or the
    /// BC baseline.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        /// Train a baseline instead: "bc".
        #[arg(long)]
        baseline: Option<String>,
        /// Observation ablation: "no-wrench" or "no-pose".
        #[arg(long)]
        ablate: Option<String>,
    },
    /// Run the held-out comparison suite for the selected rows.
    Evaluate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        /// Evaluate a diffusion checkpoint (defaults to out/policy.bin
        /// when no other row is selected).
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Baselines to evaluate: repeat for "bc" and/or "vs".
        #[arg(long)]
        baseline: Vec<String>,
        /// Ablated checkpoints to evaluate: "no-wrench" / "no-pose".
        #[arg(long)]
        ablate: Vec<String>,
    },
    /// Replay a rollout log: recompute metrics (bitwise check against the
    /// stored values) and dump frames as PGM.
    Replay {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out/replay")]
        out_dir: PathBuf,
        /// Expert reference log for the SSIM column.
        #[arg(long)]
        expert_log: Option<PathBuf>,
    },
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().cmd {
        Cmd::GenData {
            config,
            seed,
            out_dir,
            phantoms,
            demos,
        } => {
            let mut cfg = cli::load_config(config.as_deref(), seed)?;
            if let Some(p) = phantoms {
                cfg.dataset.n_train_phantoms = p;
            }
            if let Some(d) = demos {
                cfg.dataset.demos_per_phantom = d;
            }
            println!("gen-data: {}", cli::provenance(&cfg));
            let (n_demos, n_pairs) =
                cmd_gen_data(&cfg, &out_dir).context("data generation failed")?;
            println!("wrote {n_demos} trajectories ({n_pairs} pairs) to {out_dir:?}");
        }
        Cmd::Pretrain {
            config,
            seed,
            out_dir,
        } => {
            let cfg = cli::load_config(config.as_deref(), seed)?;
            println!("pretrain: {}", cli::provenance(&cfg));
            let report = cmd_pretrain(&cfg, &out_dir)?;
            println!(
                "encoder: val MAE {:.4} ({:.2} px), presence accuracy {:.3}, best epoch {}",
                report.val_mae_l,
                report.val_mae_l * cfg.probe.image_width_px as f64,
                report.val_accuracy,
                report.best_epoch
            );
        }
        Cmd::Train {
            config,
            seed,
            out_dir,
            baseline,
            ablate,
        } => {
            let cfg = cli::load_config(config.as_deref(), seed)?;
            let bc = match baseline.as_deref() {
                None => false,
                Some("bc") => true,
                Some(other) => anyhow::bail!("unknown training baseline '{other}' (expected bc)"),
            };
            let ablation = ablate.as_deref().map(Ablation::parse).transpose()?;
            println!("train: {}", cli::provenance(&cfg));
            let path = cmd_train(&cfg, &out_dir, bc, ablation)?;
            println!("wrote checkpoint {path:?}");
        }
        Cmd::Evaluate {
            config,
            seed,
            out_dir,
            policy,
            baseline,
            ablate,
        } => {
            let cfg = cli::load_config(config.as_deref(), seed)?;
            let mut selection = EvalSelection {
                policy: policy.is_some(),
                policy_path: policy,
                ..Default::default()
            };
            for b in &baseline {
                match b.as_str() {
                    "bc" => selection.bc = true,
                    "vs" => selection.vs = true,
                    other => anyhow::bail!("unknown baseline '{other}' (expected bc or vs)"),
                }
            }
            for a in &ablate {
                selection.ablations.push(Ablation::parse(a)?);
            }
            if !selection.policy && !selection.bc && !selection.vs && selection.ablations.is_empty()
            {
                selection.policy = true; // default: evaluate out/policy.bin
            }
            println!("evaluate: {}", cli::provenance(&cfg));
            let (_outcomes, summary) = cmd_evaluate(&cfg, &out_dir, &selection)?;
            print!("{}", format_summary(&summary));
            println!("metrics CSV and logs written under {out_dir:?}");
        }
        Cmd::Replay {
            log,
            config,
            seed,
            out_dir,
            expert_log,
        } => {
            let cfg = cli::load_config(config.as_deref(), seed)?;
            let metrics = cmd_replay(&log, &out_dir, expert_log.as_deref(), &cfg)?;
            println!(
                "replayed {log:?}: success {}, centering {:.2} px, force rate {:.4} N/s, terminal {}",
                metrics.success,
                metrics.centering_px,
                metrics.force_rate,
                metrics.terminal.as_str()
            );
            println!("frames dumped to {out_dir:?}");
        }
    }
    Ok(())
}
