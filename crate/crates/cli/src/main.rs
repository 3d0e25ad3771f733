use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedhp_core::config::{Algorithm, ExperimentConfig};
use fedhp_core::dataio::{build_dataset, save_tensor, Checkpoint, CheckpointWriter};
use fedhp_core::federation::{
    comm_cost, evaluate_trials, models_from_checkpoint, pipeline_grad_check, pretrain_client,
    run_with, save_checkpoint, Experiment, MaskKind, RunOptions, Split,
};
use fedhp_core::learncore::{GradCheckOptions, GroupKind};
use fedhp_core::{Error, Result};
use serde_json::json;

const CONFIG_FILE: &str = "config.json";

#[derive(Parser)]
#[command(
    name = "fedhp",
    version,
    about = "Federated hardware-prompt learning for snapshot spectral imaging"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON). Defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config's `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config algorithm.
    #[arg(long, global = true)]
    algorithm: Option<Algorithm>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train and test cubes as tensor files.
    GenData,
    /// Write every client's hardware masks and its unseen evaluation masks.
    GenMasks,
    /// Pre-train one backbone per client and checkpoint them.
    Pretrain,
    /// Run the configured algorithm; writes metrics.csv and a checkpoint.
    Federate,
    /// Mean±std test quality over freshly drawn masks.
    Evaluate {
        /// Checkpoint directory (default `<out>/checkpoint`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Finite-difference check of the pipeline gradients.
    Gradcheck {
        /// Largest acceptable relative error.
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
    /// Per-round parameter counts of every algorithm.
    Commcost,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = classify(&e);
            eprintln!(
                "{}",
                json!({"error": kind, "code": code, "message": e.to_string()})
            );
            ExitCode::from(code)
        }
    }
}

/// Exit code and error kind. Clap uses 2 for usage errors.
fn classify(e: &Error) -> (&'static str, u8) {
    match e.root() {
        Error::Io { source, .. } if source.kind() == ErrorKind::NotFound => ("missing-file", 3),
        Error::Config(_) | Error::Json(_) => ("schema", 4),
        Error::NonFinite(_) | Error::Numerical(_) => ("numerical", 5),
        Error::InvalidInput(_) | Error::ShapeMismatch { .. } | Error::UnknownGroup(_) => {
            ("invalid-input", 6)
        }
        Error::Format { .. } => ("corrupt-file", 7),
        Error::Io { .. } => ("io", 8),
        Error::Stage { .. } => unreachable!("root strips stage context"),
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(alg) = common.algorithm {
        cfg.algorithm = alg;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_resolved(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    write(&dir.join(CONFIG_FILE), &cfg.resolved_json())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Evaluate { checkpoint, trials } => evaluate(&cli.common, checkpoint, trials),
        command => {
            let cfg = load_config(&cli.common)?;
            let out = cfg.output_dir.clone();
            match command {
                Command::GenData => gen_data(&cfg, &out),
                Command::GenMasks => gen_masks(&cfg, &out),
                Command::Pretrain => pretrain(&cfg, &out),
                Command::Federate => federate(&cfg, &out),
                Command::Gradcheck { tolerance } => gradcheck(&cfg, tolerance),
                Command::Commcost => commcost(&cfg),
                Command::Evaluate { .. } => unreachable!(),
            }
        }
    }
}

fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let data = build_dataset(&cfg.data, cfg.seed)?;
    for (split, cubes) in [("train", &data.train), ("test", &data.test)] {
        for (i, c) in cubes.iter().enumerate() {
            save_tensor(
                out.join("data").join(split).join(format!("cube{i:04}.fht")),
                &c.to_tensor(),
            )?;
        }
    }
    write_resolved(cfg, out)?;
    println!(
        "wrote {} train and {} test cubes to {}",
        data.train.len(),
        data.test.len(),
        out.join("data").display()
    );
    Ok(())
}

fn gen_masks(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let exp = Experiment::new(cfg)?;
    let dir = out.join("masks");
    let mut clients = Vec::new();
    for (c, cm) in exp.scenario.clients.iter().enumerate() {
        for (k, m) in cm.masks.iter().enumerate() {
            save_tensor(dir.join(format!("client{c}/m{k}.fht")), &m.to_tensor())?;
        }
        for (k, m) in exp.unseen[c].iter().enumerate() {
            save_tensor(
                dir.join(format!("client{c}/unseen/m{k}.fht")),
                &m.to_tensor(),
            )?;
        }
        clients.push(json!({
            "client": c,
            "distribution_index": cm.distribution_index,
            "distribution": cm.distribution,
            "masks": cm.masks.len(),
            "unseen": exp.unseen[c].len(),
            "open_fraction": cm.masks.iter().map(|m| m.mean()).collect::<Vec<_>>(),
        }));
    }
    let index = json!({"kind": exp.scenario.kind, "clients": clients});
    write(
        &dir.join("scenario.json"),
        &serde_json::to_string_pretty(&index)?,
    )?;
    write_resolved(cfg, out)?;
    println!(
        "wrote masks for {} clients to {}",
        clients.len(),
        dir.display()
    );
    Ok(())
}

fn pretrain(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let exp = Experiment::new(cfg)?;
    let tc = &cfg.training;
    let dir = out.join("pretrain");
    let mut w = CheckpointWriter::new(&dir, 0, cfg.hash())?;
    println!("client,iterations,first_loss,last_loss");
    for mut client in exp.clients()? {
        let id = client.id;
        let (theta, rep) = pretrain_client(
            &mut client,
            tc.pretrain_iters,
            &exp.ctx,
            tc.backbone_schedule(),
        )
        .map_err(|e| e.at_stage(0, id))?;
        let owner = format!("client{id}");
        w.add_group(&owner, &theta)?;
        if let Some(st) = client.optimizers.get(&GroupKind::Backbone) {
            w.add_optimizer(&owner, GroupKind::Backbone, st)?;
        }
        let first = rep.losses.first().copied().unwrap_or(f64::NAN);
        let last = rep.losses.last().copied().unwrap_or(f64::NAN);
        println!("{id},{},{first:.6},{last:.6}", rep.losses.len());
    }
    w.finish()?;
    write_resolved(cfg, &dir)?;
    write_resolved(cfg, out)?;
    Ok(())
}

fn federate(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let exp = Experiment::new(cfg)?;
    let outcome = run_with(&exp, &RunOptions::default())?;
    write(&out.join("metrics.csv"), &outcome.history.to_csv())?;
    let ckpt = out.join("checkpoint");
    save_checkpoint(&outcome, &exp, &ckpt)?;
    write_resolved(cfg, &ckpt)?;
    write_resolved(cfg, out)?;

    let h = &outcome.history;
    if let Some(last) = h.rounds().checked_sub(1) {
        println!("algorithm {} after {} rounds:", cfg.algorithm, h.rounds());
        for split in [Split::Train, Split::Test] {
            for kind in [MaskKind::Seen, MaskKind::Unseen] {
                let psnr = h.mean_at(last, split, kind, |r| r.psnr_db);
                let ssim = h.mean_at(last, split, kind, |r| r.ssim);
                if let (Some(p), Some(s)) = (psnr, ssim) {
                    println!("  {split:5} {kind:6} psnr {p:.3} dB  ssim {s:.4}");
                }
            }
        }
    }
    println!("wrote {}", out.join("metrics.csv").display());
    Ok(())
}

fn evaluate(common: &Common, checkpoint: Option<PathBuf>, trials: usize) -> Result<()> {
    // The checkpoint carries the resolved config it was produced with; an
    // explicit --config takes precedence.
    let base = common
        .out
        .clone()
        .unwrap_or_else(|| ExperimentConfig::default().output_dir);
    let dir = checkpoint.unwrap_or_else(|| base.join("checkpoint"));
    let ckpt = Checkpoint::load(&dir)?;
    let mut cfg = match &common.config {
        Some(_) => load_config(common)?,
        None => {
            let path = dir.join(CONFIG_FILE);
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            ExperimentConfig::from_json(&text)?
        }
    };
    if common.config.is_none() {
        if let Some(out) = &common.out {
            cfg.output_dir = out.clone();
        }
        cfg.seed = common.seed.unwrap_or(cfg.seed);
        cfg.algorithm = common.algorithm.unwrap_or(cfg.algorithm);
    }
    let exp = Experiment::new(&cfg)?;
    let models = models_from_checkpoint(&ckpt, &exp)?;
    let rows = evaluate_trials(&exp, &models, trials)?;

    let mut csv = String::from("client,trials,psnr_mean,psnr_std,ssim_mean,ssim_std\n");
    println!("{} on {trials} trials of fresh masks", cfg.algorithm);
    println!("{:>6}  {:>18}  {:>18}", "client", "PSNR (dB)", "SSIM");
    for r in &rows {
        let client = r.client.map_or("all".to_string(), |c| c.to_string());
        println!(
            "{client:>6}  {:>9.3} ± {:<6.3}  {:>9.4} ± {:<6.4}",
            r.psnr_mean, r.psnr_std, r.ssim_mean, r.ssim_std
        );
        csv.push_str(&format!(
            "{client},{trials},{},{},{},{}\n",
            fedhp_core::federation::sig6(r.psnr_mean),
            fedhp_core::federation::sig6(r.psnr_std),
            fedhp_core::federation::sig6(r.ssim_mean),
            fedhp_core::federation::sig6(r.ssim_std)
        ));
    }
    write(&cfg.output_dir.join("evaluation.csv"), &csv)?;
    Ok(())
}

fn gradcheck(cfg: &ExperimentConfig, tolerance: f64) -> Result<()> {
    let exp = Experiment::new(cfg)?;
    let report = pipeline_grad_check(
        &exp,
        &GradCheckOptions {
            seed: cfg.seed,
            ..Default::default()
        },
    )?;
    println!("group,coordinates,max_rel_error,max_abs_error");
    for (kind, c) in &report.groups {
        println!(
            "{kind},{},{:.3e},{:.3e}",
            c.coordinates, c.max_rel_error, c.max_abs_error
        );
    }
    let worst = report.max_rel_error();
    println!("max relative error {worst:.3e} (tolerance {tolerance:e})");
    if !(worst <= tolerance) {
        return Err(Error::Numerical(format!(
            "gradient check error {worst:e} above tolerance {tolerance:e}"
        )));
    }
    Ok(())
}

fn commcost(cfg: &ExperimentConfig) -> Result<()> {
    let spec = cfg.model_spec();
    let participants = cfg.participants();
    let fedavg = comm_cost(Algorithm::Fedavg, &spec, participants).upload_per_round();
    println!("algorithm,upload_per_client,download_per_client,upload_per_round,download_per_round,upload_vs_fedavg");
    for alg in Algorithm::ALL {
        let c = comm_cost(alg, &spec, participants);
        println!(
            "{alg},{},{},{},{},{:.4}",
            c.upload_per_client,
            c.download_per_client,
            c.upload_per_round(),
            c.download_per_round(),
            c.upload_per_round() as f64 / fedavg as f64
        );
    }
    Ok(())
}
