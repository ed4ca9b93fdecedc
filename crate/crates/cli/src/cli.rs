//! Command-line surface: argument definitions and dispatch.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands;
use crate::config::{resolve_config, Overrides};
use dpcpl::error::Result;

#[derive(Parser, Debug)]
#[command(
    name = "dpcpl",
    version,
    about = "Multi-behavior sequential recommendation: denoising pre-training and customized prompt tuning",
    propagate_version = true
)]
pub struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Master seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Data directory holding interactions.tsv (synth writes here).
    #[arg(long, global = true, value_name = "DIR")]
    pub data: Option<PathBuf>,

    /// Output root for run directories.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Args, Debug, Default)]
pub struct AblationFlags {
    /// Replace every frequency filter with the identity map.
    #[arg(long = "no-ds")]
    pub no_ds: bool,

    /// Use free learned prompt tokens instead of the per-user generator.
    #[arg(long = "no-ps")]
    pub no_ps: bool,

    /// Inject prompts only at the first encoder layer.
    #[arg(long = "no-pg")]
    pub no_pg: bool,

    /// Drop the compactness regularizer.
    #[arg(long = "no-ct")]
    pub no_ct: bool,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Generate the synthetic multi-behavior corpus.
    Synth,

    /// Denoising pre-training of the backbone on the early split.
    Pretrain {
        /// Replace every frequency filter with the identity map.
        #[arg(long = "no-ds")]
        no_ds: bool,

        /// Learning rate.
        #[arg(long)]
        lr: Option<f64>,

        /// Epoch cap.
        #[arg(long)]
        epochs: Option<usize>,
    },

    /// Prompt tuning on the recent split against a frozen backbone.
    Tune {
        /// Pre-trained backbone checkpoint (.dpcx).
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,

        #[command(flatten)]
        ablation: AblationFlags,

        /// Train the backbone too, instead of prompts only.
        #[arg(long = "full-finetune")]
        full_finetune: bool,

        /// Compactness weight.
        #[arg(long)]
        lambda: Option<f64>,

        /// Learning rate.
        #[arg(long)]
        lr: Option<f64>,

        /// Epoch cap.
        #[arg(long)]
        epochs: Option<usize>,
    },

    /// Ranking evaluation of a checkpoint, optionally through tuned prompts.
    Eval {
        /// Backbone checkpoint (.dpcx).
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,

        /// Tuned prompt artifact (.dppx); omit to evaluate the raw backbone.
        #[arg(long, value_name = "FILE")]
        prompts: Option<PathBuf>,

        #[command(flatten)]
        ablation: AblationFlags,

        /// Target behavior index to rank.
        #[arg(long = "target-behavior")]
        target_behavior: Option<usize>,

        /// Restrict to cold-start users.
        #[arg(long = "cold-start")]
        cold_start: bool,

        /// Cutoffs K (repeatable).
        #[arg(long = "k", value_name = "K")]
        ks: Vec<usize>,

        /// Sampled negatives per evaluated user.
        #[arg(long = "n-neg")]
        n_negatives: Option<usize>,
    },

    /// Dump per-user prompt internals (information vectors, banks, tokens).
    ExportPrompts {
        /// Backbone checkpoint (.dpcx).
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,

        /// Tuned prompt artifact (.dppx).
        #[arg(long, value_name = "FILE")]
        prompts: PathBuf,

        /// Maximum users to export.
        #[arg(long, default_value_t = 64)]
        users: usize,

        #[command(flatten)]
        ablation: AblationFlags,
    },

    /// Check analytic gradients against central differences on a small model.
    Gradcheck,

    /// Parameter census and kernel timing table.
    Bench {
        /// Smaller sizes and fewer repetitions.
        #[arg(long)]
        quick: bool,
    },
}

impl Cli {
    /// Collapse global flags and subcommand flags into config overrides.
    fn overrides(&self) -> Overrides {
        let mut o = Overrides {
            seed: self.seed,
            data: self.data.clone(),
            out: self.out.clone(),
            ..Overrides::default()
        };
        match &self.cmd {
            Cmd::Synth | Cmd::Gradcheck | Cmd::Bench { .. } => {}
            Cmd::Pretrain { no_ds, lr, epochs } => {
                o.no_ds = *no_ds;
                o.lr = *lr;
                o.epochs = *epochs;
            }
            Cmd::Tune { ablation, full_finetune, lambda, lr, epochs, .. } => {
                apply_ablation(&mut o, ablation);
                o.full_finetune = *full_finetune;
                o.lambda = *lambda;
                o.lr = *lr;
                o.epochs = *epochs;
            }
            Cmd::Eval { ablation, target_behavior, cold_start, ks, n_negatives, .. } => {
                apply_ablation(&mut o, ablation);
                o.target_behavior = *target_behavior;
                o.cold_start = *cold_start;
                if !ks.is_empty() {
                    o.eval_ks = Some(ks.clone());
                }
                o.n_negatives = *n_negatives;
            }
            Cmd::ExportPrompts { ablation, .. } => {
                apply_ablation(&mut o, ablation);
            }
        }
        o
    }

    /// Resolve the config and run the selected command.
    pub fn execute(&self) -> Result<()> {
        let cfg = resolve_config(self.config.as_deref(), &self.overrides())?;
        match &self.cmd {
            Cmd::Synth => commands::cmd_synth(&cfg),
            Cmd::Pretrain { .. } => commands::cmd_pretrain(&cfg),
            Cmd::Tune { checkpoint, .. } => commands::cmd_tune(&cfg, checkpoint),
            Cmd::Eval { checkpoint, prompts, .. } => {
                commands::cmd_eval(&cfg, checkpoint, prompts.as_deref())
            }
            Cmd::ExportPrompts { checkpoint, prompts, users, .. } => {
                commands::cmd_export_prompts(&cfg, checkpoint, prompts, *users)
            }
            Cmd::Gradcheck => commands::cmd_gradcheck(),
            Cmd::Bench { quick } => commands::cmd_bench(&cfg, *quick),
        }
    }
}

fn apply_ablation(o: &mut Overrides, a: &AblationFlags) {
    o.no_ds = a.no_ds;
    o.no_ps = a.no_ps;
    o.no_pg = a.no_pg;
    o.no_ct = a.no_ct;
}

/// Parse `args` and run: 0 on success, 1 on user error, 2 on internal error.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests print through clap and succeed.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match cli.execute() {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                1
            } else {
                2
            }
        }
    }
}
