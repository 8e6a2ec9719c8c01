// temporary pipeline probes; removed before release
use sonosim::cli::*;
use sonosim::config::RunConfig;
use std::path::Path;

fn cfgd() -> RunConfig {
    let mut cfg = RunConfig::default();
    if let Ok(v) = std::env::var("RHO") { cfg.policy.rho = v.parse().unwrap(); }
    if let Ok(v) = std::env::var("STEPS") { cfg.policy.train_steps = v.parse().unwrap(); }
    cfg
}

fn dir() -> std::path::PathBuf {
    Path::new("/root/work/probe-full").to_path_buf()
}

#[test]
#[ignore]
fn stage_gendata() {
    let cfg = cfgd();
    std::fs::create_dir_all(dir()).unwrap();
    let t = std::time::Instant::now();
    let (n_demos, n_pairs) = cmd_gen_data(&cfg, &dir()).unwrap();
    println!("gen-data: {n_demos} demos, {n_pairs} pairs in {:?}", t.elapsed());
    let manifest = std::fs::read_to_string(Artifacts::new(&dir()).manifest()).unwrap();
    println!("{manifest}");
}

#[test]
#[ignore]
fn stage_pretrain() {
    let cfg = cfgd();
    let t = std::time::Instant::now();
    let report = cmd_pretrain(&cfg, &dir()).unwrap();
    println!(
        "pretrain in {:?}: val mae {:.4} ({:.2}px) acc {:.3} best_epoch {}",
        t.elapsed(),
        report.val_mae_l,
        report.val_mae_l * 64.0,
        report.val_accuracy,
        report.best_epoch
    );
}

#[test]
#[ignore]
fn stage_train_policy() {
    let cfg = cfgd();
    let t = std::time::Instant::now();
    cmd_train(&cfg, &dir(), false, None).unwrap();
    println!("policy trained in {:?}", t.elapsed());
    let curve = std::fs::read_to_string(dir().join("policy-curve.csv")).unwrap();
    let lines: Vec<&str> = curve.lines().collect();
    for l in lines.iter().skip(1).step_by(3) { println!("{l}"); }
}

#[test]
#[ignore]
fn stage_eval_dp() {
    let cfg = cfgd();
    let t = std::time::Instant::now();
    let sel = EvalSelection { policy: true, policy_path: None, bc: false, vs: false, ablations: vec![] };
    let (outcomes, summary) = cmd_evaluate(&cfg, &dir(), &sel).unwrap();
    println!("eval in {:?}", t.elapsed());
    println!("{}", sonosim::eval::format_summary(&summary));
    for o in &outcomes {
        println!(
            "p{} t{}: success {} centering {:.2} force_rate {:.3} terminal {:?} contact_loss {}",
            o.phantom_seed, o.trial, o.metrics.success, o.metrics.centering_px,
            o.metrics.force_rate, o.metrics.terminal, o.metrics.loss_of_contact
        );
    }
}


#[test]
#[ignore]
fn probe_force_tv() {
    use sonosim::expert::DemoDataset;
    let ds = DemoDataset::load(&Artifacts::new(&dir()).demos()).unwrap();
    for demo in ds.demos.iter().take(3) {
        let f: Vec<f64> = demo.samples.iter().map(|s| s.wrench[2]).collect();
        let n = f.len();
        let press_end = f.iter().position(|v| *v > 0.95 * f[n/2]).unwrap_or(20) + 5;
        let tv = |s: &[f64]| s.windows(2).map(|w| (w[1]-w[0]).abs()).sum::<f64>();
        let tv_press = tv(&f[..press_end.min(n)]);
        let tv_scan = tv(&f[press_end.min(n)..]);
        let per_tick: f64 = tv(&f[press_end.min(n)..]) / (n - press_end.min(n)) as f64;
        println!(
            "demo n={n} press_end={press_end} tv_press={tv_press:.2} tv_scan={tv_scan:.2} scan_per_tick={per_tick:.4} total_rate={:.3}",
            (tv_press + tv_scan) / ((n - 1) as f64 * 0.1)
        );
    }
}
