use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lstcl::config::ExperimentConfig;
use lstcl::corpus;
use lstcl::exec::RayonExecutor;
use lstcl::pipeline::{self, Layout, PretrainOptions};
use lstcl::Result;

/// Long-short temporal contrastive learning on synthetic video.
#[derive(Parser)]
#[command(name = "lstcl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the pretraining, probe and finetuning seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for checkpoints, metrics and reports.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Corpus directory.
    #[arg(long, env = "LSTCL_DATA_DIR", default_value = "data")]
    data_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train and test corpora.
    Gen(Common),
    /// Contrastive pretraining.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many optimizer steps in total.
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Linear probe on the frozen pretrained backbone.
    Probe(Common),
    /// Supervised finetuning.
    Finetune(Common),
    /// Evaluate a classifier checkpoint with multi-clip inference.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint path without extension; defaults to the finetuned classifier.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Pretrain and probe every point of the [sweep] grid.
    Sweep(Common),
}

fn setup(c: &Common) -> Result<(ExperimentConfig, RayonExecutor, Layout)> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        cfg = cfg.with_seed(seed);
    }
    Ok((cfg, RayonExecutor::new(c.threads)?, Layout::new(&c.out)))
}

fn data(cfg: &ExperimentConfig, dir: &Path) -> Result<corpus::Splits> {
    corpus::load_dir(cfg, dir)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(c) => {
            let (cfg, exec, _) = setup(&c)?;
            let m = exec.install(|| pipeline::gen(&cfg, &c.data_dir))?;
            println!(
                "wrote {} train and {} test videos to {} (config {})",
                m.train_videos,
                m.test_videos,
                c.data_dir.display(),
                &m.config_hash[..12]
            );
        }
        Command::Pretrain { common: c, resume, max_steps } => {
            let (cfg, exec, out) = setup(&c)?;
            let d = data(&cfg, &c.data_dir)?;
            let r = pipeline::pretrain(&cfg, &d.train, &out, PretrainOptions { resume, max_steps }, &exec)?;
            if let Some(s) = r.resumed_from {
                println!("resumed at step {s}");
            }
            println!("step {}/{} checkpoint {}", r.state.step, r.total_steps, &r.checkpoint_hash[..16]);
        }
        Command::Probe(c) => {
            let (cfg, exec, out) = setup(&c)?;
            let d = data(&cfg, &c.data_dir)?;
            let r = pipeline::probe(&cfg, &d, &out, &exec)?;
            println!("probe top-1 train {:.4} test {:.4}", r.train.top1, r.test.top1);
        }
        Command::Finetune(c) => {
            let (cfg, exec, out) = setup(&c)?;
            let d = data(&cfg, &c.data_dir)?;
            let r = pipeline::finetune(&cfg, &d, &out, &exec)?;
            let from = if r.pretrained { "pretrained" } else { "scratch" };
            println!("finetune ({from}, {} steps) test top-1 {:.4}", r.steps, r.report.top1);
        }
        Command::Eval { common: c, checkpoint } => {
            let (cfg, exec, out) = setup(&c)?;
            let stem = checkpoint.unwrap_or_else(|| out.finetune_classifier());
            let d = data(&cfg, &c.data_dir)?;
            let r = pipeline::eval(&cfg, &d, &stem, &out, &exec)?;
            println!("eval top-1 {:.4} over {} videos ({} clips at stride {})", r.top1, r.n_videos, r.n_clips, r.stride);
        }
        Command::Sweep(c) => {
            let (cfg, exec, out) = setup(&c)?;
            let d = data(&cfg, &c.data_dir)?;
            let rows = pipeline::sweep(&cfg, &d, &out, &exec, |r| {
                println!(
                    "cell {} short {} long {} {} {} seed {}: {} test {:.4} ({:.0}s)",
                    r.cell,
                    r.point.short_stride,
                    r.point.long_stride,
                    r.point.strategy.name(),
                    r.point.framework.name(),
                    r.point.seed,
                    r.status,
                    r.probe_test,
                    r.wall_s
                )
            })?;
            print!("{}", pipeline::summary(&cfg, &rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
