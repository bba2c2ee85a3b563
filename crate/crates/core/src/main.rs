// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ctxdetox::app::{
    cmd_all, cmd_compare, cmd_corpus, cmd_eval, cmd_train, RunConfig, Target, METHODS,
};
use ctxdetox::Result;

#[derive(Parser)]
#[command(
    name = "ctxdetox",
    version,
    about = "Context-dependent detoxification with hierarchical prefixes"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args)]
struct Common {
    /// TOML run config; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Run directory, overriding the config file.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Verb {
    /// Generate the synthetic corpus.
    Corpus,
    /// Train one target: base, reference, toxicity, ours, prefix_tuning,
    /// contrastive, clsgen or ablation:<no_Ls|no_Lc|no_both>.
    Train { target: String },
    /// Evaluate methods on the test split (all of them by default).
    Eval {
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
    },
    /// Tabulate existing reports.
    Compare {
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
    },
    /// Run the whole pipeline.
    All,
    /// Print the resolved config as TOML.
    Config,
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(d) = &common.run_dir {
        cfg.run_dir = d.clone();
    }
    cfg.resolve()
}

fn method_list(given: &[String]) -> Vec<&str> {
    if given.is_empty() {
        METHODS.to_vec()
    } else {
        given.iter().map(String::as_str).collect()
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve(&cli.common)?;
    let force = cli.common.force;
    match &cli.verb {
        Verb::Corpus => print!("{}", cmd_corpus(&cfg, force)?),
        Verb::Train { target } => {
            let o = cmd_train(&cfg, Target::parse(target)?, force)?;
            println!("{} -> {} ({})", o.target, o.path.display(), o.hash);
        }
        Verb::Eval { methods } => {
            for r in cmd_eval(&cfg, &method_list(methods), force)? {
                println!("{}", r.render());
            }
        }
        Verb::Compare { methods } => {
            print!("{}", cmd_compare(&cfg, &method_list(methods))?.render())
        }
        Verb::All => {
            let c = cmd_all(&cfg, force, |line| eprintln!("{}", line.trim_end()))?;
            print!("{}", c.render());
        }
        Verb::Config => print!("{}", cfg.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
