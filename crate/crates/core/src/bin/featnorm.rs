//! Command-line driver for scenario generation, training and the DG experiments.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use featnorm::datagen::Scenario;
use featnorm::harness::{
    default_category_shift, default_scenario_params, evaluate_accuracy, export_embeddings,
    run_category_shift_experiment, run_dg_experiment, run_sensitivity_sweep, sources_for, sweep_table_csv,
    ExperimentConfig, ShiftMap, TrainTemplate, DEFAULT_SEEDS, DEFAULT_TARGET,
};
use featnorm::network::ModelParams;
use featnorm::trainer::{train, Regime};

/// Environment variable naming the default output directory.
const OUT_DIR_ENV: &str = "FEATNORM_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "featnorm-out";

#[derive(Parser, Debug)]
#[command(
    name = "featnorm",
    version,
    about = "Feature-norm domain generalization on synthetic data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the scenario file.
    Generate(Common),
    /// Train one regime with one seed; writes the step log and a checkpoint.
    Train(Common),
    /// Leave-one-domain-out experiment over regimes and seeds.
    Dg(Common),
    /// Category-shift experiment (classes removed from each source).
    Catshift(Common),
    /// Delta-r sensitivity sweep.
    Sweep(Common),
    /// Dump penultimate features of a checkpoint for every sample.
    Embed(Common),
}

#[derive(Args, Debug, Default)]
struct Common {
    /// key = value file; flags given on the command line win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: $FEATNORM_OUT_DIR or ./featnorm-out).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Load the scenario from a file instead of generating the default one.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long)]
    scenario_seed: Option<u64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    target: Option<usize>,
    /// Comma-separated; repeatable.
    #[arg(long, value_delimiter = ',')]
    regime: Vec<Regime>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    delta_r: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    delta_r_values: Vec<f64>,
    /// Hidden layer widths, e.g. `64,32`; `none` for a linear extractor.
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    feature_dim: Option<usize>,
    /// Experiment id, also the stem of the metrics files.
    #[arg(long)]
    id: Option<String>,
    /// Checkpoint for `embed`; without one a model is trained first.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output file for `generate` and `embed`.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    /// Bad flags, config file or option values: exit 1.
    Usage(String),
    /// Anything that went wrong after the configuration was accepted: exit 2.
    Runtime(String),
}

impl From<featnorm::Error> for Failure {
    fn from(e: featnorm::Error) -> Self {
        match e {
            featnorm::Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CliResult<T> = Result<T, Failure>;

const CONFIG_KEYS: &[&str] = &[
    "out_dir",
    "scenario",
    "scenario_seed",
    "noise",
    "target",
    "regime",
    "seed",
    "seeds",
    "epochs",
    "batch_size",
    "learning_rate",
    "momentum",
    "gamma",
    "delta_r",
    "delta_r_values",
    "hidden",
    "feature_dim",
    "id",
    "checkpoint",
    "output",
];

#[derive(Default)]
struct ConfigFile(BTreeMap<String, String>);

impl ConfigFile {
    fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut map = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Failure::Usage(format!("config line {}: expected key = value", n + 1)))?;
            let key = k.trim().replace('-', "_");
            if !CONFIG_KEYS.contains(&key.as_str()) {
                return Err(Failure::Usage(format!("config line {}: unknown key '{key}'", n + 1)));
            }
            map.insert(key, v.trim().to_string());
        }
        Ok(Self(map))
    }

    fn get<T: FromStr>(&self, key: &str) -> CliResult<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.0
            .get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| Failure::Usage(format!("config key {key}: {e}")))
            })
            .transpose()
    }

    fn list<T: FromStr>(&self, key: &str) -> CliResult<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.0.get(key) {
            None => Ok(Vec::new()),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<T>()
                        .map_err(|e| Failure::Usage(format!("config key {key}: {e}")))
                })
                .collect(),
        }
    }
}

/// Flags merged with the config file.
struct Settings {
    args: Common,
    file: ConfigFile,
}

impl Settings {
    fn new(args: Common) -> CliResult<Self> {
        let file = match &args.config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        Ok(Self { args, file })
    }

    fn pick<T: FromStr>(&self, flag: Option<T>, key: &str) -> CliResult<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.file.get(key),
        }
    }

    fn pick_list<T: FromStr + Clone>(&self, flag: &[T], key: &str) -> CliResult<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        if flag.is_empty() {
            self.file.list(key)
        } else {
            Ok(flag.to_vec())
        }
    }

    fn out_dir(&self) -> CliResult<PathBuf> {
        if let Some(p) = self.pick(self.args.out_dir.clone(), "out_dir")? {
            return Ok(p);
        }
        Ok(std::env::var_os(OUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| DEFAULT_OUT_DIR.into()))
    }

    fn scenario(&self) -> CliResult<Scenario> {
        if let Some(path) = self.pick(self.args.scenario.clone(), "scenario")? {
            let f = File::open(&path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
            return Ok(Scenario::read_from(BufReader::new(f))?);
        }
        let mut params = default_scenario_params();
        if let Some(s) = self.pick(self.args.scenario_seed, "scenario_seed")? {
            params.seed = s;
        }
        if let Some(sigma) = self.pick(self.args.noise, "noise")? {
            params = params.with_noise(sigma);
        }
        Ok(params.generate()?)
    }

    fn target(&self) -> CliResult<usize> {
        Ok(self.pick(self.args.target, "target")?.unwrap_or(DEFAULT_TARGET))
    }

    fn regimes(&self) -> CliResult<Vec<Regime>> {
        let r = self.pick_list(&self.args.regime, "regime")?;
        Ok(if r.is_empty() { Regime::ALL.to_vec() } else { r })
    }

    fn template(&self) -> CliResult<TrainTemplate> {
        let mut t = TrainTemplate::default();
        if let Some(v) = self.pick(self.args.epochs, "epochs")? {
            t.epochs = v;
        }
        if let Some(v) = self.pick(self.args.batch_size, "batch_size")? {
            t.batch_size = v;
        }
        if let Some(v) = self.pick(self.args.learning_rate, "learning_rate")? {
            t.learning_rate = v;
        }
        if let Some(v) = self.pick(self.args.momentum, "momentum")? {
            t.momentum = v;
        }
        if let Some(v) = self.pick(self.args.gamma, "gamma")? {
            t.gamma = v;
        }
        if let Some(v) = self.pick(self.args.delta_r, "delta_r")? {
            t.delta_r = v;
        }
        if let Some(v) = self.pick(self.args.feature_dim, "feature_dim")? {
            t.feature_dim = v;
        }
        if let Some(h) = self.pick(self.args.hidden.clone(), "hidden")? {
            t.hidden_dims = parse_hidden(&h)?;
        }
        Ok(t)
    }

    fn experiment(&self, default_id: &str) -> CliResult<ExperimentConfig> {
        let id = self
            .pick(self.args.id.clone(), "id")?
            .unwrap_or_else(|| default_id.to_string());
        if id.is_empty() || id.contains(['/', '\\']) {
            return Err(Failure::Usage(format!("invalid experiment id '{id}'")));
        }
        let mut cfg = ExperimentConfig::new(id, self.target()?, self.regimes()?);
        let seeds = self.pick_list(&self.args.seeds, "seeds")?;
        cfg.seeds = if seeds.is_empty() {
            DEFAULT_SEEDS.to_vec()
        } else {
            seeds
        };
        cfg.train = self.template()?;
        Ok(cfg)
    }
}

fn parse_hidden(s: &str) -> CliResult<Vec<usize>> {
    let s = s.trim();
    if s.is_empty() || s == "none" {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|w| {
            w.trim()
                .parse::<usize>()
                .map_err(|e| Failure::Usage(format!("hidden width '{w}': {e}")))
        })
        .collect()
}

fn write_metrics(report: &featnorm::harness::MetricsReport, dir: &Path, stem: &str) -> CliResult<()> {
    report.write_files(dir, stem)?;
    println!("wrote {}", dir.join(format!("{stem}.csv")).display());
    for s in &report.summaries {
        println!(
            "{:<12} shift={} delta_r={} mean_accuracy={:.4} std={:.4}",
            s.regime.as_str(),
            s.category_shift,
            s.delta_r,
            s.mean_accuracy,
            s.std_accuracy
        );
    }
    Ok(())
}

fn cmd_generate(st: &Settings) -> CliResult<()> {
    let scenario = st.scenario()?;
    let path = match st.pick(st.args.output.clone(), "output")? {
        Some(p) => p,
        None => st.out_dir()?.join("scenario.txt"),
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(File::create(&path)?);
    scenario.write_to(&mut w)?;
    w.flush()?;
    println!("wrote {} ({} samples)", path.display(), scenario.samples.len());
    Ok(())
}

fn train_one(st: &Settings, scenario: &Scenario) -> CliResult<(Regime, u64, featnorm::trainer::TrainResult)> {
    let regimes = st.pick_list(&st.args.regime, "regime")?;
    let regime = match regimes.as_slice() {
        [] => Regime::Fnn,
        [r] => *r,
        _ => return Err(Failure::Usage("train takes a single --regime".into())),
    };
    let seed = st.pick(st.args.seed, "seed")?.unwrap_or(DEFAULT_SEEDS[0]);
    let target = st.target()?;
    if target >= scenario.domains.len() {
        return Err(Failure::Usage(format!("target domain {target} out of range")));
    }
    let t = st.template()?;
    let cfg = t.config(scenario, regime, seed, t.delta_r);
    cfg.validate()?;
    let result = train(scenario, &sources_for(scenario, target), &cfg)?;
    if result.samples_seen(target) != 0 {
        return Err(Failure::Runtime("target samples leaked into training".into()));
    }
    Ok((regime, seed, result))
}

fn cmd_train(st: &Settings) -> CliResult<()> {
    let scenario = st.scenario()?;
    let (regime, seed, result) = train_one(st, &scenario)?;
    let dir = st.out_dir()?;
    std::fs::create_dir_all(&dir)?;
    let stem = format!("train_{}_seed{seed}", regime.as_str());
    let log_path = dir.join(format!("{stem}.log"));
    let mut log = BufWriter::new(File::create(&log_path)?);
    for line in result.log_lines() {
        writeln!(log, "{line}")?;
    }
    log.flush()?;
    let ckpt_path = dir.join(format!("{stem}.ckpt"));
    let mut ck = BufWriter::new(File::create(&ckpt_path)?);
    result.reported().write_checkpoint(&mut ck)?;
    ck.flush()?;
    let acc = evaluate_accuracy(result.reported(), &scenario, st.target()?)?;
    println!(
        "regime={} seed={seed} steps={} target_accuracy={acc:.4}",
        regime.as_str(),
        result.steps()
    );
    println!("wrote {} and {}", log_path.display(), ckpt_path.display());
    Ok(())
}

fn cmd_dg(st: &Settings) -> CliResult<()> {
    let scenario = st.scenario()?;
    let cfg = st.experiment("dg")?;
    let report = run_dg_experiment(&cfg, &scenario)?;
    write_metrics(&report, &st.out_dir()?, &cfg.experiment_id)
}

fn cmd_catshift(st: &Settings) -> CliResult<()> {
    let scenario = st.scenario()?;
    let mut cfg = st.experiment("catshift")?;
    let shift: ShiftMap = default_category_shift()
        .into_iter()
        .map(|(d, classes)| (if d >= cfg.target_domain { d + 1 } else { d }, classes))
        .collect();
    cfg.category_shift = Some(shift);
    let report = run_category_shift_experiment(&cfg, &scenario)?;
    write_metrics(&report, &st.out_dir()?, &cfg.experiment_id)
}

fn cmd_sweep(st: &Settings) -> CliResult<()> {
    let scenario = st.scenario()?;
    let mut cfg = st.experiment("sweep")?;
    if st.pick_list(&st.args.regime, "regime")?.is_empty() {
        cfg.regimes = vec![Regime::Fnn, Regime::Cfnn];
    }
    let values = st.pick_list(&st.args.delta_r_values, "delta_r_values")?;
    cfg.delta_r_values = if values.is_empty() { vec![0.5, 1.0, 1.5] } else { values };
    let (report, rows) = run_sensitivity_sweep(&cfg, &scenario)?;
    let dir = st.out_dir()?;
    write_metrics(&report, &dir, &cfg.experiment_id)?;
    std::fs::write(
        dir.join(format!("{}_table.csv", cfg.experiment_id)),
        sweep_table_csv(&rows),
    )?;
    Ok(())
}

fn cmd_embed(st: &Settings) -> CliResult<()> {
    let scenario = st.scenario()?;
    let params = match st.pick(st.args.checkpoint.clone(), "checkpoint")? {
        Some(path) => {
            let f = File::open(&path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
            ModelParams::read_checkpoint(BufReader::new(f))?
        }
        None => train_one(st, &scenario)?.2.reported().clone(),
    };
    if params.spec.input_dim != scenario.input_dim {
        return Err(Failure::Usage(format!(
            "checkpoint expects input width {}, scenario has {}",
            params.spec.input_dim, scenario.input_dim
        )));
    }
    let path = match st.pick(st.args.output.clone(), "output")? {
        Some(p) => p,
        None => {
            let dir = st.out_dir()?;
            std::fs::create_dir_all(&dir)?;
            dir.join("embeddings.csv")
        }
    };
    export_embeddings(&params, &scenario, &path)?;
    println!("wrote {} ({} rows)", path.display(), scenario.samples.len());
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(&Settings::new(a)?),
        Command::Train(a) => cmd_train(&Settings::new(a)?),
        Command::Dg(a) => cmd_dg(&Settings::new(a)?),
        Command::Catshift(a) => cmd_catshift(&Settings::new(a)?),
        Command::Sweep(a) => cmd_sweep(&Settings::new(a)?),
        Command::Embed(a) => cmd_embed(&Settings::new(a)?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
