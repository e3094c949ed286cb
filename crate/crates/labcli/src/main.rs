use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use zrl_core::checkpoint;
use zrl_core::experiment::{self, ExperimentConfig};
use zrl_core::graphtask::{build_mixture, parse_mixture, Dataset, DEFAULT_LABEL_MAX, DEFAULT_LABEL_MIN};
use zrl_core::policy::SamplingSettings;
use zrl_core::trainer::{evaluate, RunOptions, SuccessRates};
use zrl_core::Error;

mod plot;

#[derive(Parser)]
#[command(name = "zrl", version, about = "Outcome-reward RL experiments on star-graph search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/test dataset files from a difficulty mixture.
    GenData {
        /// Mixture such as `d2p5:0.25,d5p2:0.75`.
        #[arg(long)]
        mix: String,
        /// Training instances.
        #[arg(long)]
        n: usize,
        /// Held-out instances.
        #[arg(long, default_value_t = 200)]
        test_n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_LABEL_MIN)]
        label_min: u32,
        #[arg(long, default_value_t = DEFAULT_LABEL_MAX)]
        label_max: u32,
        /// Directory receiving `train.jsonl` and `test.jsonl`.
        #[arg(long)]
        out: PathBuf,
        /// Overwrite existing files.
        #[arg(long)]
        force: bool,
    },
    /// Run an experiment from a config file or a shipped preset.
    Train {
        /// Experiment TOML file.
        #[arg(required_unless_present = "preset", conflicts_with = "preset")]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        /// Overrides `output_dir`.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Stamp metrics with elapsed seconds.
        #[arg(long)]
        wall_clock: bool,
    },
    /// Success rates of a checkpoint on a dataset file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Experiment whose architecture the checkpoint must match.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0.6)]
        temperature: f64,
        #[arg(long, default_value_t = 0.999)]
        top_p: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the per-instance report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw metrics curves as SVG.
    Plot {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        /// Series label per file, in order; defaults to file stems.
        #[arg(long = "label")]
        labels: Vec<String>,
        #[arg(long, value_enum, default_value_t = plot::Panel::Success)]
        panel: plot::Panel,
        /// Restrict to one difficulty; the mean over difficulties otherwise.
        #[arg(long)]
        difficulty: Option<String>,
        #[arg(long, value_enum, default_value_t = Decoding::Sampled)]
        decoding: Decoding,
        #[arg(long, short)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Decoding {
    Greedy,
    Sampled,
}

/// Failure classes, mapped to exit codes 2 and 3.
enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::ArchMismatch { .. } | Error::Encoding(_) => Failure::Config(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData {
            mix,
            n,
            test_n,
            seed,
            label_min,
            label_max,
            out,
            force,
        } => gen_data(&mix, n, test_n, seed, label_min, label_max, &out, force),
        Command::Train {
            config,
            preset,
            output_dir,
            wall_clock,
        } => train(config.as_deref(), preset.as_deref(), output_dir, wall_clock),
        Command::Eval {
            checkpoint,
            data,
            config,
            temperature,
            top_p,
            seed,
            out,
        } => eval(&checkpoint, &data, config.as_deref(), temperature, top_p, seed, out.as_deref()),
        Command::Plot {
            metrics,
            labels,
            panel,
            difficulty,
            decoding,
            out,
        } => plot_cmd(&metrics, &labels, panel, difficulty.as_deref(), decoding, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

fn print_histogram(name: &str, ds: &Dataset) {
    let counts: Vec<String> = ds.histogram().iter().map(|(t, c)| format!("{t}={c}")).collect();
    println!("{name}: {} instances ({})", ds.len(), counts.join(", "));
}

#[allow(clippy::too_many_arguments)]
fn gen_data(
    mix: &str,
    n: usize,
    test_n: usize,
    seed: u64,
    label_min: u32,
    label_max: u32,
    out: &Path,
    force: bool,
) -> Result<(), Failure> {
    let components = parse_mixture(mix, label_min, label_max)?;
    let train_path = out.join("train.jsonl");
    let test_path = out.join("test.jsonl");
    if !force {
        for p in [&train_path, &test_path] {
            if p.exists() {
                return Err(Failure::Config(format!(
                    "{} already exists (pass --force to overwrite)",
                    p.display()
                )));
            }
        }
    }
    let train = build_mixture(&components, n, experiment::train_seed(seed))?;
    let test = build_mixture(&components, test_n, experiment::test_seed(seed))?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    train.save(&train_path)?;
    test.save(&test_path)?;
    print_histogram("train", &train);
    print_histogram("test", &test);
    Ok(())
}

fn print_rates(rates: &BTreeMap<String, SuccessRates>) {
    for (tag, r) in rates {
        println!(
            "{tag}: greedy {:.3} sampled {:.3} (n={})",
            r.greedy, r.sampled, r.count
        );
    }
}

fn train(
    config: Option<&Path>,
    preset: Option<&str>,
    output_dir: Option<PathBuf>,
    wall_clock: bool,
) -> Result<(), Failure> {
    let seed = experiment::seed_from_env()?;
    let mut cfg = match (config, preset) {
        (Some(path), _) => ExperimentConfig::load(path, seed)?,
        (None, Some(name)) => {
            let mut c = experiment::preset(name)?;
            if let Some(s) = seed {
                c.train.seed = s;
            }
            c
        }
        (None, None) => return Err(Failure::Config("give a config file or --preset".into())),
    };
    if let Some(dir) = output_dir {
        cfg.output_dir = dir;
    }
    cfg.validate()?;
    let options = RunOptions {
        record_wall_clock: wall_clock,
    };
    let outcome = cfg.execute(options, |rec| {
        if let Some(r) = rec.mean_train_reward {
            if rec.success.is_empty() {
                return;
            }
            println!("iter {:>6}  train reward {r:.3}", rec.iteration);
        }
    })?;
    println!("metrics: {}", outcome.metrics_path.display());
    println!("checkpoint: {}", outcome.checkpoint_path.display());
    if let Some(rates) = outcome.final_success() {
        print_rates(rates);
    }
    Ok(())
}

fn eval(
    ckpt: &Path,
    data: &Path,
    config: Option<&Path>,
    temperature: f64,
    top_p: f64,
    seed: u64,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let expected = match config {
        Some(p) => Some(ExperimentConfig::load(p, None)?.train.arch()),
        None => None,
    };
    let (params, _) = checkpoint::load(ckpt, expected.as_ref())?;
    let dataset = Dataset::load(data)?;
    if dataset.is_empty() {
        return Err(Failure::Config(format!("{} holds no instances", data.display())));
    }
    if !(temperature > 0.0 && top_p > 0.0 && top_p <= 1.0) {
        return Err(Failure::Config("need temperature > 0 and top_p in (0, 1]".into()));
    }
    let sampling = SamplingSettings {
        temperature,
        top_p,
        max_response_len: params.arch().max_response_len,
    };
    let items: Vec<_> = dataset.items.iter().collect();
    let report = evaluate(&params, &items, &sampling, seed, 0)?;
    print_rates(&report.rates);
    if let Some(path) = out {
        let text = serde_json::to_string_pretty(&report).map_err(|e| Failure::Runtime(e.to_string()))?;
        fs::write(path, text).map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

fn plot_cmd(
    files: &[PathBuf],
    labels: &[String],
    panel: plot::Panel,
    difficulty: Option<&str>,
    decoding: Decoding,
    out: &Path,
) -> Result<(), Failure> {
    if !labels.is_empty() && labels.len() != files.len() {
        return Err(Failure::Config(format!(
            "{} labels for {} metrics files",
            labels.len(),
            files.len()
        )));
    }
    let mut warnings = 0usize;
    let mut series = Vec::new();
    for (i, path) in files.iter().enumerate() {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let (records, bad) = plot::parse_metrics(&text);
        for line in &bad {
            eprintln!("warning: {}:{line}: malformed metrics line skipped", path.display());
        }
        warnings += bad.len();
        let label = labels.get(i).cloned().unwrap_or_else(|| {
            path.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("run {}", i + 1))
        });
        let points = plot::extract(&records, panel, difficulty, matches!(decoding, Decoding::Greedy));
        series.push(plot::Series { label, points });
    }
    let svg = plot::render(&series, panel);
    fs::write(out, svg).map_err(|e| io_err(out, e))?;
    println!("wrote {} ({} series, {warnings} warnings)", out.display(), series.len());
    Ok(())
}
