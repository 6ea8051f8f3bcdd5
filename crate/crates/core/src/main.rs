use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use latseg_core::checkpoint::Checkpoint;
use latseg_core::config::{DataSource, RunConfig};
use latseg_core::data;
use latseg_core::gradcheck::{self, Problem};
use latseg_core::train;
use latseg_core::{Components, Error, Result};

#[derive(Parser)]
#[command(name = "latseg", version, about = "Train, evaluate and ablate the lattice segmentation decoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint, log and validation report.
    Train(Common),
    /// Evaluate a checkpoint on the validation data of its config.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and evaluate the five incremental variants.
    Ablate(Common),
    /// Check whole-model gradients against finite differences.
    Gradcheck(Common),
    /// Write synthetic images, masks and a manifest.
    SynthData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 16)]
        count: usize,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    capr_k: Option<usize>,
    #[arg(long)]
    capr_iters: Option<usize>,
    #[arg(long)]
    capr_off: bool,
    #[arg(long)]
    bbl_off: bool,
    #[arg(long)]
    gltr_off: bool,
    #[arg(long)]
    rad_off: bool,
    #[arg(long)]
    biou_band: Option<usize>,
}

impl Common {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(k) = self.capr_k {
            cfg.capr.k = Some(k);
        }
        if let Some(n) = self.capr_iters {
            cfg.capr.iterations = n;
        }
        if let Some(b) = self.biou_band {
            cfg.metrics.biou_band = b;
        }
        self.apply_toggles(&mut cfg.ablation);
    }

    fn apply_toggles(&self, c: &mut Components) {
        c.capr &= !self.capr_off;
        c.bbl &= !self.bbl_off;
        c.gltr &= !self.gltr_off;
        c.rad &= !self.rad_off;
    }

    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        self.apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out)?;
        Ok(&self.out)
    }
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json value serializes"));
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(common) => {
            let cfg = common.run_config()?;
            let out = common.out_dir()?;
            fs::write(out.join("config.json"), cfg.to_json())?;
            let start = Instant::now();
            let mut lines = String::new();
            let result = train::train(&cfg, |e| {
                let line = serde_json::to_string(e).expect("epoch log serializes");
                eprintln!("{line}");
                lines.push_str(&line);
                lines.push('\n');
            })?;
            fs::write(out.join("train_log.jsonl"), &lines)?;
            result.checkpoint.save(&out.join("checkpoint.bin"))?;
            let val = train::load_source(&cfg.data.val)?;
            let eval = train::evaluate(&result.model, &val, cfg.metrics.biou_band)?;
            eval.write_csv(&out.join("val_report.csv"))?;
            print_json(&json!({
                "checkpoint": out.join("checkpoint.bin"),
                "epochs": cfg.epochs,
                "seconds": start.elapsed().as_secs_f64(),
                "val": eval.aggregate,
            }));
            Ok(true)
        }
        Command::Eval { common, checkpoint } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let mut cfg = match &common.config {
                Some(p) => RunConfig::load(p)?,
                None => ckpt.config.clone(),
            };
            common.apply(&mut cfg);
            let mut model = ckpt.model()?;
            let mut comps = model.components();
            common.apply_toggles(&mut comps);
            model.set_components(comps);
            let data = train::load_source(&cfg.data.val)?;
            let eval = train::evaluate(&model, &data, cfg.metrics.biou_band)?;
            let out = common.out_dir()?;
            eval.write_csv(&out.join("eval_report.csv"))?;
            print_json(&json!({ "components": comps, "report": eval.aggregate }));
            Ok(true)
        }
        Command::Ablate(common) => {
            let cfg = common.run_config()?;
            let out = common.out_dir()?;
            let train_set = train::load_source(&cfg.data.train)?;
            let val_set = train::load_source(&cfg.data.val)?;
            let eval_set = if val_set.is_empty() { &train_set } else { &val_set };
            let rows = train::ablate(&cfg, &train_set, eval_set, |name, e| {
                eprintln!("{name}: {}", serde_json::to_string(e).expect("epoch log serializes"));
            })?;
            let csv = train::ablation_csv(&rows);
            fs::write(out.join("ablation.csv"), &csv)?;
            print!("{csv}");
            Ok(true)
        }
        Command::Gradcheck(common) => {
            let mut comps = Components::ALL;
            common.apply_toggles(&mut comps);
            let mut problem = Problem::tiny(common.seed.unwrap_or(0), comps)?;
            let start = Instant::now();
            let report = gradcheck::run(&mut problem, None)?;
            print_json(&json!({
                "passed": report.passed(),
                "seconds": start.elapsed().as_secs_f64(),
                "report": report,
            }));
            Ok(report.passed())
        }
        Command::SynthData { common, count } => {
            let cfg = common.run_config()?;
            let DataSource::Synthetic { spec, .. } = &cfg.data.train else {
                return Err(Error::Config("synth-data needs a synthetic training source".into()));
            };
            let manifest = data::write_synthetic(common.out_dir()?, spec, count)?;
            print_json(&json!({ "manifest": manifest, "count": count, "spec_hash": spec.hash() }));
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::from(2)
        }
    }
}
