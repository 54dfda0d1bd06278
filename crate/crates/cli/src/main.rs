mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, CommandFactory, Parser, Subcommand};
use serde_json::{json, Value};

use config::{CampaignConfig, ConfigError, ModelConfig, TargetSpec};
use slicefuzz::dataset::{
    construct_dataset, read_records, split_dataset, verify_records, write_records, DatasetOptions, DEFAULT_CAP,
    DEFAULT_TRAIN_RATIO,
};
use slicefuzz::eval::{ablation_trace, pass_at_k, EvalOptions};
use slicefuzz::fuzzloop::{load_seed_dir, read_stats, Campaign, CampaignOptions, Provenance};
use slicefuzz::modelclient::ScriptEntry;
use slicefuzz::reward::RewardService;
use slicefuzz::slicer::{PromptMode, DEFAULT_PROMPT_BUDGET};
use slicefuzz::targets::default_seeds;
use slicefuzz::{b64_encode, TargetAdapter};

#[derive(Parser)]
#[command(name = "slicefuzz", version, about = "Branch-targeted fuzzing with a language model in the loop")]
struct Cli {
    /// Print the command tree as JSON and exit.
    #[arg(long, global = true)]
    help_json: bool,
    /// Log verbosity (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Build, split and inspect question datasets.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Run fuzzing campaigns.
    #[command(subcommand)]
    Fuzz(FuzzCmd),
    /// Evaluate a model on a dataset.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Serve rewards over HTTP.
    #[command(subcommand)]
    Reward(RewardCmd),
    /// Show campaign results.
    #[command(subcommand)]
    Stats(StatsCmd),
}

#[derive(Args, Clone)]
struct TargetArgs {
    /// Built-in target (mini-calc, mini-json) or path to an instrumented program.
    #[arg(long)]
    target: String,
    /// Program index sidecar for external targets.
    #[arg(long)]
    index: Option<PathBuf>,
    /// Argument for an external target; `@@` is replaced by the input file.
    #[arg(long = "target-arg", allow_hyphen_values = true)]
    target_args: Vec<String>,
    /// Per-execution time limit in milliseconds.
    #[arg(long, default_value_t = 1000)]
    time_limit_ms: u64,
}

impl TargetArgs {
    fn spec(&self) -> TargetSpec {
        TargetSpec {
            target: self.target.clone(),
            index: self.index.clone(),
            args: self.target_args.clone(),
        }
    }

    fn time_limit(&self) -> anyhow::Result<Duration> {
        if self.time_limit_ms == 0 {
            bail!(ConfigError::new("time-limit-ms", "must be positive"));
        }
        Ok(Duration::from_millis(self.time_limit_ms))
    }
}

#[derive(Subcommand)]
enum DatasetCmd {
    /// Harvest questions from a seed corpus into a JSONL file.
    Build {
        #[command(flatten)]
        target: TargetArgs,
        /// Directory of seed files; built-in targets default to their own seeds.
        #[arg(long)]
        seeds: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Maximum number of seeds sampled from the corpus.
        #[arg(long, default_value_t = DEFAULT_CAP)]
        cap: usize,
        /// Keep questions without answer seeds.
        #[arg(long)]
        no_filter: bool,
        #[arg(long, default_value_t = PromptMode::FullTrace)]
        mode: PromptMode,
        #[arg(long, default_value_t = 0)]
        rng_seed: u64,
        #[arg(long, default_value_t = DEFAULT_PROMPT_BUDGET)]
        prompt_budget: usize,
    },
    /// Split a dataset into training and test files.
    Split {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TRAIN_RATIO)]
        ratio: f64,
        #[arg(long, default_value_t = 0)]
        rng_seed: u64,
    },
    /// Re-execute every answer seed and check it covers its branch.
    Verify {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        target: TargetArgs,
    },
    /// Write a scripted-model file that answers each question with its first answer seed.
    Script {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum FuzzCmd {
    /// Run a campaign described by a TOML config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's iteration budget.
        #[arg(long)]
        iterations: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum EvalCmd {
    /// pass@1 and pass@k over a dataset.
    Passk(EvalArgs),
    /// Full-trace versus no-trace prompts on the same questions.
    Ablation(EvalArgs),
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// oracle[:budget], scripted:<path> or http:<model-name>.
    #[arg(long)]
    model: String,
    /// Chat-completions base URL for http models.
    #[arg(long, env = config::MODEL_URL_ENV)]
    model_url: Option<String>,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Target to run answers on; defaults to the dataset's built-in target.
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long = "target-arg", allow_hyphen_values = true)]
    target_args: Vec<String>,
    #[arg(long, default_value_t = 1000)]
    time_limit_ms: u64,
    /// Write the JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Subcommand)]
enum RewardCmd {
    /// Serve /reward and /reward_raw for a dataset.
    Serve {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        target: TargetArgs,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        /// Concurrent executions.
        #[arg(long, default_value_t = 4)]
        pool: usize,
    },
}

#[derive(Subcommand)]
enum StatsCmd {
    /// Summarize a campaign output directory or stats.json file.
    Show {
        path: PathBuf,
        /// Print the raw JSON instead.
        #[arg(long)]
        json: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::new().parse_filters(&cli.log).init();
    if cli.help_json {
        use std::io::Write;
        let text = serde_json::to_string_pretty(&describe(&Cli::command())).expect("json");
        let _ = writeln!(std::io::stdout().lock(), "{text}");
        return ExitCode::SUCCESS;
    }
    let Some(command) = cli.command else {
        let _ = Cli::command().print_help();
        return ExitCode::from(2);
    };
    match run(command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn describe(cmd: &clap::Command) -> Value {
    let args: Vec<Value> = cmd
        .get_arguments()
        .filter(|a| !a.is_hide_set())
        .map(|a| {
            json!({
                "name": a.get_id().as_str(),
                "long": a.get_long(),
                "positional": a.is_positional(),
                "required": a.is_required_set(),
                "default": a.get_default_values().iter().map(|v| v.to_string_lossy()).collect::<Vec<_>>(),
                "help": a.get_help().map(|h| h.to_string()),
            })
        })
        .collect();
    json!({
        "name": cmd.get_name(),
        "version": cmd.get_version(),
        "about": cmd.get_about().map(|s| s.to_string()),
        "args": args,
        "subcommands": cmd.get_subcommands().filter(|c| c.get_name() != "help").map(describe).collect::<Vec<_>>(),
    })
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Dataset(cmd) => dataset(cmd),
        Command::Fuzz(FuzzCmd::Run { config, iterations, out }) => fuzz_run(&config, iterations, out),
        Command::Eval(EvalCmd::Passk(args)) => eval(args, false),
        Command::Eval(EvalCmd::Ablation(args)) => eval(args, true),
        Command::Reward(RewardCmd::Serve {
            dataset,
            target,
            addr,
            pool,
        }) => serve(&dataset, &target, &addr, pool),
        Command::Stats(StatsCmd::Show { path, json }) => {
            let file = if path.is_dir() { path.join("stats.json") } else { path };
            let stats = read_stats(&file)?;
            if json {
                println!("{}", stats.to_json());
            } else {
                print!("{}", stats.render());
            }
            Ok(())
        }
    }
}

fn seeds_for(target: &dyn TargetAdapter, dir: Option<&Path>) -> anyhow::Result<Vec<Vec<u8>>> {
    match dir {
        Some(d) => {
            if !d.is_dir() {
                bail!(ConfigError::new("seeds", format!("{} is not a directory", d.display())));
            }
            load_seed_dir(d).with_context(|| format!("reading {}", d.display()))
        }
        None => match default_seeds(target.name()) {
            Some(s) => Ok(s.iter().map(|s| s.as_bytes().to_vec()).collect()),
            None => bail!(ConfigError::new("seeds", "required for external targets")),
        },
    }
}

fn dataset(cmd: DatasetCmd) -> anyhow::Result<()> {
    match cmd {
        DatasetCmd::Build {
            target,
            seeds,
            out,
            cap,
            no_filter,
            mode,
            rng_seed,
            prompt_budget,
        } => {
            let t = target.spec().build()?;
            let corpus = seeds_for(t.as_ref(), seeds.as_deref())?;
            let opts = DatasetOptions {
                cap,
                filter_answerable: !no_filter,
                mode,
                rng_seed,
                prompt_budget,
                time_limit: target.time_limit()?,
            };
            let records = construct_dataset(t.as_ref(), &corpus, &opts)?;
            write_records(&records, &out)?;
            let answered = records.iter().filter(|r| !r.answer_seeds.is_empty()).count();
            println!(
                "wrote {} questions ({} with answer seeds) from {} of {} seeds to {}",
                records.len(),
                answered,
                corpus.len().min(cap),
                corpus.len(),
                out.display()
            );
        }
        DatasetCmd::Split {
            dataset,
            train,
            test,
            ratio,
            rng_seed,
        } => {
            let records = read_records(&dataset)?;
            let (tr, te) = split_dataset(&records, ratio, rng_seed)?;
            write_records(&tr, &train)?;
            write_records(&te, &test)?;
            println!("train {} -> {}, test {} -> {}", tr.len(), train.display(), te.len(), test.display());
        }
        DatasetCmd::Verify { dataset, target } => {
            let records = read_records(&dataset)?;
            let t = target.spec().build()?;
            verify_records(&records, t.as_ref(), target.time_limit()?, false).map_err(anyhow::Error::msg)?;
            let seeds: usize = records.iter().map(|r| r.answer_seeds.len()).sum();
            println!("ok: {} questions, {} answer seeds verified", records.len(), seeds);
        }
        DatasetCmd::Script { dataset, out } => {
            let records = read_records(&dataset)?;
            let entries: Vec<ScriptEntry> = records
                .iter()
                .map(|r| ScriptEntry {
                    question_id: r.question.id.clone(),
                    answers_b64: r.answer_seeds.iter().take(1).map(|s| b64_encode(s)).collect(),
                })
                .collect();
            slicefuzz::modelclient::ScriptedClient::save(&entries, &out)?;
            println!("wrote {} script entries to {}", entries.len(), out.display());
        }
    }
    Ok(())
}

/// Sets `flag` on SIGINT or SIGTERM.
fn watch_signals(flag: Arc<AtomicBool>) {
    std::thread::spawn(move || {
        let Ok(rt) = tokio::runtime::Builder::new_current_thread().enable_all().build() else {
            return;
        };
        rt.block_on(shutdown_signal());
        log::warn!("shutdown requested; finishing the current step");
        flag.store(true, Ordering::SeqCst);
    });
}

async fn shutdown_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        match signal(SignalKind::terminate()) {
            Ok(mut term) => {
                tokio::select! {
                    _ = tokio::signal::ctrl_c() => {}
                    _ = term.recv() => {}
                }
            }
            Err(_) => {
                let _ = tokio::signal::ctrl_c().await;
            }
        }
    }
    #[cfg(not(unix))]
    {
        let _ = tokio::signal::ctrl_c().await;
    }
}

fn fuzz_run(path: &Path, iterations: Option<u64>, out: Option<PathBuf>) -> anyhow::Result<()> {
    let mut cfg = CampaignConfig::load(path)?;
    if let Some(n) = iterations {
        cfg.iterations = n;
    }
    if let Some(o) = out {
        cfg.output = o;
    }
    cfg.validate()?;
    let target = cfg.target_spec().build()?;
    let model = match (&cfg.model, cfg.lm_enabled) {
        (Some(m), true) => Some(m.build(&target)?),
        _ => None,
    };
    let opts = CampaignOptions {
        iterations: cfg.iterations,
        max_duration: cfg.max_duration_secs.map(Duration::from_secs),
        rng_seed: cfg.rng_seed,
        lm_enabled: cfg.lm_enabled,
        queue_mode: cfg.queue_mode(),
        prompt_mode: cfg.mode,
        prompt_budget: cfg.prompt_budget,
        attempt_cap: cfg.attempt_cap,
        consumer_interval: cfg.consumer_interval,
        threaded: cfg.threaded,
        time_limit: cfg.time_limit(),
        completion: cfg
            .model
            .as_ref()
            .map(ModelConfig::completion_params)
            .unwrap_or_default(),
    };
    let campaign = Campaign::new(target.clone(), model, opts)?;
    let seeds = seeds_for(target.as_ref(), cfg.corpus.as_deref())?;
    std::fs::create_dir_all(&cfg.output)?;

    if cfg.leakage_injection {
        let train = match &cfg.training_dataset {
            Some(p) => read_records(p)?,
            None => {
                let dopts = DatasetOptions {
                    filter_answerable: cfg.filter_answerable,
                    mode: cfg.mode,
                    rng_seed: cfg.rng_seed,
                    prompt_budget: cfg.prompt_budget,
                    time_limit: cfg.time_limit(),
                    ..DatasetOptions::default()
                };
                let records = construct_dataset(target.as_ref(), &seeds, &dopts)?;
                let (train, test) = split_dataset(&records, cfg.train_ratio, cfg.rng_seed)?;
                write_records(&train, &cfg.output.join("train.jsonl"))?;
                write_records(&test, &cfg.output.join("test.jsonl"))?;
                train
            }
        };
        campaign.inject_training_answers(&train)?;
        log::info!("injected answers for {} training questions", train.len());
    }
    campaign.add_seeds(&seeds, Provenance::Initial)?;

    watch_signals(campaign.stop_handle());
    let stats = campaign.run();
    campaign.persist(&cfg.output)?;
    print!("{}", stats.render());
    println!("artifacts written to {}", cfg.output.display());
    Ok(())
}

fn eval(args: EvalArgs, ablation: bool) -> anyhow::Result<()> {
    if args.k == 0 {
        bail!(ConfigError::new("k", "must be at least 1"));
    }
    if args.time_limit_ms == 0 {
        bail!(ConfigError::new("time-limit-ms", "must be positive"));
    }
    let records = read_records(&args.dataset)?;
    let Some(first) = records.first() else {
        bail!("{} holds no records", args.dataset.display());
    };
    let spec = TargetSpec {
        target: args.target.clone().unwrap_or_else(|| first.target.clone()),
        index: args.index.clone(),
        args: args.target_args.clone(),
    };
    let target = spec.build()?;
    let mut model_cfg = ModelConfig::from_spec(&args.model)?;
    model_cfg.url = args.model_url.clone();
    model_cfg.temperature = args.temperature;
    model_cfg.validate("model.")?;
    let model = model_cfg.build(&target)?;
    let opts = EvalOptions {
        k: args.k,
        temperature: args.temperature,
        time_limit: Duration::from_millis(args.time_limit_ms),
        ..EvalOptions::default()
    };
    let targets = [target];
    let (json, table) = if ablation {
        let r = ablation_trace(&records, model.as_ref(), &targets, &opts)?;
        (r.to_json(), r.render_table())
    } else {
        let r = pass_at_k(&records, model.as_ref(), &targets, &opts)?;
        (r.to_json(), r.render_table())
    };
    print!("{table}");
    if let Some(p) = &args.report {
        std::fs::write(p, json)?;
        println!("report written to {}", p.display());
    }
    Ok(())
}

fn serve(dataset: &Path, target: &TargetArgs, addr: &str, pool: usize) -> anyhow::Result<()> {
    if pool == 0 {
        bail!(ConfigError::new("pool", "must be at least 1"));
    }
    let records = read_records(dataset)?;
    let t = target.spec().build()?;
    let service = RewardService::new(t, &records, pool, target.time_limit()?);
    let bound = service.bind(addr).with_context(|| format!("binding {addr}"))?;
    println!("serving {} questions on http://{}", records.len(), bound.local_addr()?);
    bound.run(shutdown_signal())?;
    Ok(())
}
