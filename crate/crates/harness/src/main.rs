use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cat_core::gradcheck::suite;
use clap::{Parser, Subcommand};

use cat_harness::ablation;
use cat_harness::eval::{evaluate, export_mesh};
use cat_harness::{Checkpoint, HarnessError, Result, RunConfig, Split, Trainer, World};

#[derive(Parser)]
#[command(name = "cat", version, about = "Component-aware transformer: train, evaluate and verify on synthetic people")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train from a config file, or continue a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on freshly synthesized samples.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        /// Comma-separated subset of ops.
        #[arg(long, value_delimiter = ',')]
        ops: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write synthetic samples as PPM images plus JSON targets.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Config supplying template and image settings (toy preset if omitted).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train with and without the component decoder per seed and compare
    /// hand-parameter error on held-out samples.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export the predicted mesh for one evaluation sample as OBJ.
    Export {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        sample: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let HarnessError::Numerical { checkpoint: Some(p), .. } = &e {
                eprintln!("last good checkpoint: {p}");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train { config, resume } => {
            let cfg = RunConfig::load(&config)?.with_env_seed()?;
            let mut trainer = match resume {
                Some(p) => Trainer::resume(Checkpoint::load(&p)?, Some(cfg))?,
                None => Trainer::new(cfg)?,
            };
            let out = trainer.config.out_dir.clone();
            write(&out.join("config.txt"), &trainer.config.to_text())?;
            let total = trainer.total_steps();
            eprintln!(
                "training {} parameters for {} steps into {}",
                trainer.model.params.num_scalars(),
                total,
                out.display()
            );
            trainer.run(Some(&out), |e| {
                let l = &e.loss;
                eprintln!(
                    "step {:>6}/{total} lr {:.3e} loss {:.5} (smplx {:.4} kpt3d {:.4} kpt2d {:.4} bbox {:.4})",
                    e.step, e.lr, l.total, l.smplx, l.kpt3d, l.kpt2d, l.bbox
                );
            })?;
            eprintln!("wrote {}", cat_harness::train::final_checkpoint(&out).display());
            Ok(())
        }
        Cmd::Eval { ckpt, n, seed, out } => {
            let c = Checkpoint::load(&ckpt)?;
            let model = c.model()?;
            let world = World::from_config(&c.config)?;
            let samples = world.dataset(seed, Split::Eval, n)?;
            let report = evaluate(&model, &world, &samples, c.config.eval.match_radius)?;
            let json = report.to_json()?;
            write(&out, &json)?;
            println!("{json}");
            Ok(())
        }
        Cmd::Gradcheck { ops, seed, out } => {
            let names: Vec<&str> = ops.iter().map(|s| s.as_str()).collect();
            let report = suite::run(&names, None, seed)?;
            for o in &report.ops {
                println!(
                    "{:<20} {:>3} instances  max rel err {:.3e}  {}",
                    o.op,
                    o.instances,
                    o.max_rel_err,
                    if o.passed { "PASS" } else { "FAIL" }
                );
            }
            if let Some(p) = out {
                let json = serde_json::to_string_pretty(&report).map_err(|e| HarnessError::Checkpoint(e.to_string()))?;
                write(&p, &json)?;
            }
            if report.passed() {
                Ok(())
            } else {
                Err(HarnessError::Config(format!("gradient check failed for {}", report.failures().join(", "))))
            }
        }
        Cmd::Synth { n, seed, out, config } => {
            let cfg = match config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::toy(),
            };
            let world = World::from_config(&cfg)?;
            std::fs::create_dir_all(&out).map_err(|e| HarnessError::io(&out, e))?;
            for s in world.dataset(seed, Split::Train, n)? {
                let stem = out.join(format!("sample_{:05}", s.id));
                let ppm = stem.with_extension("ppm");
                std::fs::write(&ppm, cat_harness::synth::to_ppm(&s.image)).map_err(|e| HarnessError::io(&ppm, e))?;
                let json = serde_json::to_string(&s.gt).map_err(|e| HarnessError::Synth(e.to_string()))?;
                write(&stem.with_extension("json"), &json)?;
            }
            eprintln!("wrote {n} samples to {}", out.display());
            Ok(())
        }
        Cmd::Ablate { config, seeds, out } => {
            let base = RunConfig::load(&config)?;
            let mut rows = Vec::new();
            for seed in seeds {
                let r = ablation::run_seed(&base, seed)?;
                println!(
                    "seed {seed}: hand L1 full {:.5} disabled {:.5}  {}",
                    r.full.param_l1.hands,
                    r.disabled.param_l1.hands,
                    if r.decoder_helps_hands() { "decoder helps" } else { "decoder does not help" }
                );
                rows.push(r);
            }
            if let Some(p) = out {
                let json = serde_json::to_string_pretty(&rows).map_err(|e| HarnessError::Synth(e.to_string()))?;
                write(&p, &json)?;
            }
            Ok(())
        }
        Cmd::Export { ckpt, sample, out } => {
            let c = Checkpoint::load(&ckpt)?;
            let model = c.model()?;
            let world = World::from_config(&c.config)?;
            let s = world.sample(c.config.data.seed, Split::Eval, sample)?;
            let pred = model.predict(&s.image)?;
            export_mesh(&world, &pred.params, &out)?;
            eprintln!("wrote {}", out.display());
            Ok(())
        }
    }
}
