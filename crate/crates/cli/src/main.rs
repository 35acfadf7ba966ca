//! `hcf` — train cascade models and run the evaluation studies.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hcf::config::ExperimentConfig;
use hcf::container::{load_model, save_model};
use hcf::experiments::{self, TrainReport};
use hcf::{Error, Result};
use log::info;

#[derive(Parser)]
#[command(name = "hcf", version, about = "Hierarchical cascade image compression experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Model file; defaults to `model.hcf` in the output directory.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Report directory; overrides `output.directory`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides both the training and the evaluation seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: logical cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the codec family and transform modules; writes the model file.
    Train(Common),
    /// Evaluate every policy per target and quantization count, scored by RQSI.
    Sweep(Common),
    /// HCF vs DRF vs SSF rate-distortion and cost.
    Compare(Common),
    /// Shorter vs longer compression paths to the same target.
    Adapt(Common),
    /// Complete module bank vs single-kind variants.
    Ablate(Common),
    /// Differential-entropy trajectories of the cascade.
    Entropy(Common),
    /// Write a deterministic synthetic grayscale corpus.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

struct Context {
    cfg: ExperimentConfig,
    out: PathBuf,
    model: PathBuf,
}

fn prepare(c: &Common) -> Result<Context> {
    if let Some(jobs) = c.jobs {
        if jobs == 0 {
            return Err(Error::Config("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::Config(format!("--jobs: {e}")))?;
    }
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.training.seed = seed;
        cfg.evaluation.seed = seed;
    }
    let out = c.out.clone().unwrap_or_else(|| cfg.output.directory.clone());
    let model = c.model.clone().unwrap_or_else(|| out.join("model.hcf"));
    Ok(Context { cfg, out, model })
}

fn report(files: Vec<PathBuf>) {
    for f in files {
        println!("wrote {}", f.display());
    }
}

fn run(cli: Cli) -> Result<()> {
    let common = match &cli.command {
        Command::GenCorpus { out, count, size, seed } => {
            let paths = hcf::synth::write_corpus(out, *count, *size, *seed)?;
            println!("wrote {} images to {}", paths.len(), out.display());
            return Ok(());
        }
        Command::Train(c)
        | Command::Sweep(c)
        | Command::Compare(c)
        | Command::Adapt(c)
        | Command::Ablate(c)
        | Command::Entropy(c) => c,
    };
    let ctx = prepare(common)?;
    let (cfg, out) = (&ctx.cfg, ctx.out.as_path());
    let formats = &cfg.output.formats;
    if let Command::Train(_) = cli.command {
        let model = experiments::train(cfg)?;
        if let Some(dir) = ctx.model.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        save_model(&ctx.model, &model.family, &model.bank)?;
        let rep = TrainReport::new(&model, cfg);
        println!("{:>5} {:>6} {:>12} {:>12} {:>12}", "level", "kind", "mse", "zero_map", "identity");
        for m in &rep.modules {
            println!("{:>5} {:>6} {:>12.4e} {:>12.4e} {:>12.4e}", m.level, m.kind, m.mse, m.zero_map_mse, m.identity_map_mse);
        }
        for s in &rep.synthesis {
            println!("synthesis {}: {:.4e} -> {:.4e}", s.level, s.mse_before, s.mse_after);
        }
        for v in &rep.violations {
            println!("warning: {v}");
        }
        report(rep.write(out, formats)?);
        println!("wrote {}", ctx.model.display());
        return Ok(());
    }

    let (family, bank) = load_model(&ctx.model)?;
    if family.max_level() < cfg.evaluation.source {
        return Err(Error::Config(format!(
            "evaluation.source {} exceeds the model's top level {}",
            cfg.evaluation.source,
            family.max_level()
        )));
    }
    let images = experiments::load_corpus(&cfg.evaluation.corpus)?;
    info!("evaluating {} images from {}", images.len(), cfg.evaluation.corpus.display());
    let files = match cli.command {
        Command::Sweep(_) => {
            let r = experiments::sweep(cfg, &family, &bank, &images)?;
            for s in &r.summary {
                let flag = if s.edge_is_min { "" } else { "  [edge policy not minimal]" };
                println!(
                    "target {} n_q {}: min eta_psnr {}{flag}",
                    s.target,
                    s.n_q,
                    s.psnr_minimizer.as_deref().unwrap_or("-")
                );
            }
            r.write(out, formats)?
        }
        Command::Compare(_) => {
            let r = experiments::compare(cfg, &family, &bank, &images)?;
            for b in &r.bd {
                println!(
                    "target {} n_q {} {:>3}: BD-rate {:+.2}% / BD-PSNR {:+.3} dB",
                    b.target, b.n_q, b.framework, b.bd_rate_psnr, b.bd_psnr
                );
            }
            r.write(out, formats)?
        }
        Command::Adapt(_) => {
            let r = experiments::adapt(cfg, &family, &bank, &images)?;
            for a in &r.rows {
                println!(
                    "{}->{} vs {}->{}: BD-rate {:+.2}%",
                    a.shorter_source, a.target, a.longer_source, a.target, a.bd_rate_psnr
                );
            }
            r.write(out, formats)?
        }
        Command::Ablate(_) => {
            let r = experiments::ablate(cfg, &family, &bank, &images)?;
            println!("complete bank dominates or ties {}/{} points", r.dominated, r.evaluated);
            r.write(out, formats)?
        }
        Command::Entropy(_) => {
            let r = experiments::entropy(cfg, &family, &bank, &images)?;
            for s in &r.summary {
                println!("{}: total increment {:.3} bits", s.policy, s.total_increment);
            }
            if !r.edge_smallest {
                println!("note: edge policy does not have the smallest increment");
            }
            r.write(out, formats)?
        }
        Command::Train(_) | Command::GenCorpus { .. } => unreachable!(),
    };
    report(files);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
