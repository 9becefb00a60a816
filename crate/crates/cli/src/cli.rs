//! Argument parsing and dispatch.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::commands::{self, RunDir, PRETRAIN_STAGE};
use crate::config::RunConfig;
use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "hdno", version, about = "Hierarchical option-based dialogue policy experiments")]
pub struct Cli {
    /// TOML file layered over the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// desk or paper-2.0 (default: the file's `preset`, else desk).
    #[arg(long, global = true)]
    pub preset: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// `section.key=value`, applied after the file; repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Output directory (default: runs/<preset>-seed<seed>).
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus and vocabulary.
    GenCorpus {
        /// Replace existing corpus files.
        #[arg(long)]
        force: bool,
    },
    /// Variational pretraining, with the discriminator alongside.
    Pretrain,
    /// Fine-tune the pretrained checkpoint with hierarchical REINFORCE.
    Hrl {
        /// Update both levels on the same schedule instead of alternating.
        #[arg(long)]
        synchron: bool,
        /// Output directory name under the run directory.
        #[arg(long, default_value = "hrl")]
        stage: String,
    },
    /// Decode and score the test split.
    Evaluate {
        #[arg(long, default_value = "hrl")]
        stage: String,
        /// 1 (greedy), 2 or 5.
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Check update monotonicity on tabular instances and replay the witness.
    VerifyProps {
        /// Witness JSON to replay instead of the shipped fixture.
        #[arg(long)]
        witness: Option<PathBuf>,
    },
    /// Cluster and project the latent acts of the test split.
    Latents {
        #[arg(long, default_value = "hrl")]
        stage: String,
        #[arg(long)]
        k: Option<usize>,
    },
}

impl Cli {
    pub fn resolve_config(&self) -> Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        match &self.command {
            Command::Hrl { synchron: true, .. } => overrides.push("rl.synchron=true".into()),
            Command::Evaluate { beam: Some(b), .. } => overrides.push(format!("eval.beam_width={b}")),
            Command::VerifyProps { witness: Some(p) } => {
                overrides.push(format!("verify.witness={}", toml::Value::String(p.display().to_string())))
            }
            Command::Latents { k: Some(k), .. } => overrides.push(format!("eval.latent_k={k}")),
            _ => {}
        }
        let mut cfg = RunConfig::resolve(self.preset.as_deref(), self.config.as_deref(), &overrides)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }

    pub fn run_dir(&self, cfg: &RunConfig) -> RunDir {
        RunDir::new(self.run_dir.clone().unwrap_or_else(|| PathBuf::from(format!("runs/{}-seed{}", cfg.preset, cfg.seed))))
    }
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: &Cli) -> Result<i32> {
    let cfg = cli.resolve_config()?;
    let run = cli.run_dir(&cfg);
    match &cli.command {
        Command::GenCorpus { force } => {
            let s = commands::gen_corpus(&cfg, &run, *force)?;
            println!("vocabulary {} tokens; train {} / valid {} / test {} dialogues", s.vocab, s.train, s.valid, s.test);
            println!("wrote {}", run.corpus().display());
        }
        Command::Pretrain => {
            let s = commands::cmd_pretrain(&cfg, &run)?;
            println!(
                "best epoch {}: val loss {:.4}, nll/token {:.4} (add-one unigram {:.4})",
                s.best_epoch, s.best_val_loss, s.best_val_nll_per_token, s.unigram_nll_per_token
            );
            println!("wrote {}", run.stage(PRETRAIN_STAGE).display());
        }
        Command::Hrl { stage, .. } => {
            let s = commands::cmd_hrl(&cfg, &run, stage)?;
            println!(
                "best epoch {} after {} dialogues ({} high / {} low updates)",
                s.best_epoch, s.dialogues_seen, s.high_updates, s.low_updates
            );
            println!("wrote {}", run.stage(stage).display());
        }
        Command::Evaluate { stage, .. } => {
            let r = commands::cmd_evaluate(&cfg, &run, stage)?;
            println!("inform {:.2} success {:.2} bleu {:.2} total {:.2}", r.inform, r.success, r.bleu, r.total);
            println!("wrote {}.{{json,csv}}", run.eval_stem(stage, cfg.eval.beam_width).display());
        }
        Command::VerifyProps { .. } => {
            let s = commands::verify_props(&cfg)?;
            let path = run.root.join("verify").join("async_seeds.csv");
            commands::write_verify_csv(&s, &path)?;
            println!("seed  max_violation  final_change  monotone");
            for c in &s.seeds {
                println!("{:>4}  {:>13.3e}  {:>12.3e}  {}", c.seed, c.max_violation.amount, c.final_change, c.monotone);
            }
            let bad: Vec<u64> = s.seeds.iter().filter(|c| !c.monotone).map(|c| c.seed).collect();
            println!(
                "async monotone on {}/{} instances{}",
                s.seeds.len() - bad.len(),
                s.seeds.len(),
                if bad.is_empty() { String::new() } else { format!(" (failing seeds {bad:?})") }
            );
            let w = &s.witness;
            println!(
                "witness (instance {}, lr {}): sync decrease {:.3e} at step {} state {}; async max decrease {:.3e} at step {}",
                w.seed,
                w.lr,
                s.witness_check.sync_decrease,
                w.step,
                w.state,
                s.witness_check.async_max_decrease.amount,
                s.witness_check.async_max_decrease.step
            );
            if !s.witness_holds {
                println!("witness does not hold at step {}", w.step);
            }
            println!("wrote {}", path.display());
            if !s.passed() {
                return Err(CliError::Verification(format!(
                    "async monotone: {}, witness holds: {}",
                    s.async_monotone(),
                    s.witness_holds
                )));
            }
            println!("pass");
        }
        Command::Latents { stage, .. } => {
            let s = commands::cmd_latents(&cfg, &run, stage)?;
            println!(
                "k {} over {} turns: NMI {:.4} (permutation mean {:.4}), purity {:.4}",
                s.k, s.turns, s.nmi, s.permutation_mean_nmi, s.purity
            );
            println!("wrote {}", run.latents(stage).display());
        }
    }
    Ok(0)
}
