//! Evaluation protocols.
//!
//! Every experiment trains on all domains except the target and scores the
//! reported model on the target. Independent `(regime, seed, delta_r, shift)`
//! cells run in parallel, each with its own tape and parameters; reports are
//! assembled afterwards in a fixed order so output is seed-determined.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{apply_category_shift, fmt17, generate_scenario, DomainSpec, Scenario, DEFAULT_NOISE_SIGMA};
use crate::error::{Error, Result};
use crate::losses::NormLossConfig;
use crate::network::{parse_num, ModelParams, NetworkSpec};
use crate::trainer::{train, Regime, TrainConfig, DEFAULT_LEARNING_RATE, DEFAULT_MOMENTUM};

/// Classes removed per source domain.
pub type ShiftMap = BTreeMap<usize, BTreeSet<usize>>;

pub const DEFAULT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

/// Inputs to [`generate_scenario`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioParams {
    pub num_classes: usize,
    pub input_dim: usize,
    pub n_per_class: usize,
    pub seed: u64,
    pub domains: Vec<DomainSpec>,
}

impl ScenarioParams {
    pub fn generate(&self) -> Result<Scenario> {
        generate_scenario(
            self.num_classes,
            self.input_dim,
            self.n_per_class,
            &self.domains,
            self.seed,
        )
    }

    /// Overrides every domain's noise level.
    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.domains.iter_mut().for_each(|d| d.noise_sigma = sigma);
        self
    }
}

/// Five classes in four dimensions; three shifted sources and a target (domain 3).
pub fn default_scenario_params() -> ScenarioParams {
    let (k, d) = (5, 4);
    let domain = |angle: f64, scale: f64, translation: [f64; 4]| DomainSpec {
        rotation_angle: angle,
        scale,
        translation: translation.to_vec(),
        noise_sigma: DEFAULT_NOISE_SIGMA,
        present_classes: (0..k).collect(),
    };
    ScenarioParams {
        num_classes: k,
        input_dim: d,
        n_per_class: 200,
        seed: 2024,
        domains: vec![
            domain(0.0, 0.5, [0.34, 0.21, 0.74, 0.54]),
            domain(0.2, 0.5, [-0.05, -0.41, 0.64, -0.65]),
            domain(-0.2, 0.5, [0.8, -0.13, 0.43, 0.4]),
            // Target: shrunk toward the origin, so its features start out small.
            domain(0.0, 0.2, [0.0, 0.0, 0.0, 0.0]),
        ],
    }
}

pub const DEFAULT_TARGET: usize = 3;

/// Two classes removed from each source, all subsets distinct.
pub fn default_category_shift() -> ShiftMap {
    [(0, [3, 4].into()), (1, [1, 2].into()), (2, [0, 4].into())].into()
}

/// Everything in a [`TrainConfig`] except regime, seed and input/output widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainTemplate {
    pub learning_rate: f64,
    pub momentum: f64,
    pub gamma: f64,
    pub delta_r: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
}

impl Default for TrainTemplate {
    fn default() -> Self {
        let norm = NormLossConfig::default();
        Self {
            learning_rate: DEFAULT_LEARNING_RATE,
            momentum: DEFAULT_MOMENTUM,
            gamma: norm.gamma,
            delta_r: norm.delta_r,
            epochs: 4,
            batch_size: 30,
            hidden_dims: vec![64],
            feature_dim: 32,
        }
    }
}

impl TrainTemplate {
    pub fn config(&self, scenario: &Scenario, regime: Regime, seed: u64, delta_r: f64) -> TrainConfig {
        let network = NetworkSpec::new(
            scenario.input_dim,
            self.hidden_dims.clone(),
            self.feature_dim,
            scenario.num_classes,
        );
        let mut cfg = TrainConfig::new(regime, network, self.epochs, self.batch_size, seed);
        cfg.learning_rate = self.learning_rate;
        cfg.momentum = self.momentum;
        cfg.gamma = self.gamma;
        cfg.delta_r = delta_r;
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment_id: String,
    pub target_domain: usize,
    pub regimes: Vec<Regime>,
    pub category_shift: Option<ShiftMap>,
    pub seeds: Vec<u64>,
    /// Sweep grid; empty outside sensitivity sweeps.
    pub delta_r_values: Vec<f64>,
    pub train: TrainTemplate,
}

impl ExperimentConfig {
    pub fn new(experiment_id: impl Into<String>, target_domain: usize, regimes: Vec<Regime>) -> Self {
        Self {
            experiment_id: experiment_id.into(),
            target_domain,
            regimes,
            category_shift: None,
            seeds: DEFAULT_SEEDS.to_vec(),
            delta_r_values: Vec::new(),
            train: TrainTemplate::default(),
        }
    }

    pub fn validate(&self, scenario: &Scenario) -> Result<()> {
        if self.target_domain >= scenario.domains.len() {
            return Err(Error::config(format!(
                "target domain {} out of range for {} domains",
                self.target_domain,
                scenario.domains.len()
            )));
        }
        if scenario.domains.len() < 2 {
            return Err(Error::config("need at least one source domain besides the target"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed required"));
        }
        if self.regimes.is_empty() {
            return Err(Error::config("at least one regime required"));
        }
        let n_sources = scenario.domains.len() - 1;
        if !self.train.batch_size.is_multiple_of(n_sources) {
            return Err(Error::config(format!(
                "batch_size {} is not divisible by {n_sources} source domains",
                self.train.batch_size
            )));
        }
        if let Some(shift) = &self.category_shift {
            apply_category_shift(scenario, shift, self.target_domain)?;
        }
        let probe = self
            .train
            .config(scenario, self.regimes[0], self.seeds[0], self.train.delta_r);
        probe.validate()?;
        for &dr in &self.delta_r_values {
            NormLossConfig {
                gamma: self.train.gamma,
                delta_r: dr,
            }
            .validate()?;
        }
        let present: BTreeSet<usize> = scenario.domain_samples(self.target_domain).map(|s| s.label).collect();
        if present.len() != scenario.num_classes {
            return Err(Error::config(format!(
                "target domain {} does not cover all {} classes",
                self.target_domain, scenario.num_classes
            )));
        }
        Ok(())
    }
}

/// All domains except the target, in index order.
pub fn sources_for(scenario: &Scenario, target: usize) -> Vec<usize> {
    (0..scenario.domains.len()).filter(|&d| d != target).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_index: usize,
    pub label: usize,
    pub predicted: usize,
}

fn target_inputs(scenario: &Scenario, target: usize) -> Result<(Vec<usize>, crate::Tensor)> {
    let idx: Vec<usize> = scenario
        .samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.domain == target)
        .map(|(i, _)| i)
        .collect();
    if idx.is_empty() {
        return Err(Error::contract(format!("target domain {target} has no samples")));
    }
    let rows: Vec<&[f64]> = idx.iter().map(|&i| scenario.samples[i].features.as_slice()).collect();
    Ok((idx, crate::Tensor::from_rows(&rows)))
}

/// Argmax prediction for every target sample, ties to the lowest class.
pub fn predictions(params: &ModelParams, scenario: &Scenario, target: usize) -> Result<Vec<Prediction>> {
    let (idx, x) = target_inputs(scenario, target)?;
    let logits = params.logits(&x)?;
    Ok(idx
        .iter()
        .enumerate()
        .map(|(row, &i)| Prediction {
            sample_index: i,
            label: scenario.samples[i].label,
            predicted: logits.argmax_row(row),
        })
        .collect())
}

/// `(correct, total)` over the target domain.
pub fn count_correct(params: &ModelParams, scenario: &Scenario, target: usize) -> Result<(usize, usize)> {
    let (idx, x) = target_inputs(scenario, target)?;
    let logits = params.logits(&x)?;
    let correct = idx
        .iter()
        .enumerate()
        .filter(|&(row, &i)| logits.argmax_row(row) == scenario.samples[i].label)
        .count();
    Ok((correct, idx.len()))
}

pub fn evaluate_accuracy(params: &ModelParams, scenario: &Scenario, target: usize) -> Result<f64> {
    let (correct, total) = count_correct(params, scenario, target)?;
    Ok(correct as f64 / total as f64)
}

/// Raw outcome of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub regime: Regime,
    pub seed: u64,
    pub delta_r: f64,
    pub category_shift: bool,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    /// Category-shift runs only: accuracy minus the same run without shift.
    pub degraded_accuracy: Option<f64>,
    /// Category-shift runs only: accuracy minus source-only with the same seed.
    pub transfer_gain: Option<f64>,
    /// Target samples fed to the optimizer; always 0.
    pub target_samples_seen: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeSummary {
    pub regime: Regime,
    pub delta_r: f64,
    pub category_shift: bool,
    pub runs: usize,
    pub mean_accuracy: f64,
    /// Sample standard deviation across seeds (0 for a single seed).
    pub std_accuracy: f64,
    pub degraded_accuracy: Option<f64>,
    pub transfer_gain: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub experiment_id: String,
    pub target_domain: usize,
    pub runs: Vec<RunRecord>,
    pub summaries: Vec<RegimeSummary>,
}

pub const CSV_HEADER: &str =
    "experiment_id,regime,seed,target_domain,category_shift_flag,delta_r,accuracy,degraded_accuracy,transfer_gain";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsReport {
    pub fn summary(&self, regime: Regime, category_shift: bool, delta_r: f64) -> Option<&RegimeSummary> {
        self.summaries
            .iter()
            .find(|s| s.regime == regime && s.category_shift == category_shift && s.delta_r == delta_r)
    }

    /// First summary for `regime` without category shift.
    pub fn mean_accuracy(&self, regime: Regime) -> Option<f64> {
        self.summaries
            .iter()
            .find(|s| s.regime == regime && !s.category_shift)
            .map(|s| s.mean_accuracy)
    }

    /// Per-run rows; the CSV is the machine contract for downstream checks.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.runs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                self.experiment_id,
                r.regime,
                r.seed,
                self.target_domain,
                u8::from(r.category_shift),
                r.delta_r,
                r.accuracy,
                opt(r.degraded_accuracy),
                opt(r.transfer_gain)
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write_files(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        std::fs::write(dir.join(format!("{stem}.json")), self.to_json())?;
        Ok(())
    }
}

/// Parsed metrics CSV row.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvRow {
    pub experiment_id: String,
    pub regime: Regime,
    pub seed: u64,
    pub target_domain: usize,
    pub category_shift: bool,
    pub delta_r: f64,
    pub accuracy: f64,
    pub degraded_accuracy: Option<f64>,
    pub transfer_gain: Option<f64>,
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::parse("unexpected metrics CSV header"));
    }
    let opt_num = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            parse_num(s).map(Some)
        }
    };
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(Error::parse(format!("bad metrics row: {line}")));
            }
            Ok(CsvRow {
                experiment_id: f[0].to_string(),
                regime: f[1].parse()?,
                seed: parse_num(f[2])?,
                target_domain: parse_num(f[3])?,
                category_shift: f[4] == "1",
                delta_r: parse_num(f[5])?,
                accuracy: parse_num(f[6])?,
                degraded_accuracy: opt_num(f[7])?,
                transfer_gain: opt_num(f[8])?,
            })
        })
        .collect()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

#[derive(Clone, Copy, Debug)]
struct Cell {
    regime: Regime,
    seed: u64,
    delta_r: f64,
    shifted: bool,
}

fn run_cell(scenario: &Scenario, cfg: &ExperimentConfig, cell: Cell) -> Result<RunRecord> {
    let sources = sources_for(scenario, cfg.target_domain);
    let tcfg = cfg.train.config(scenario, cell.regime, cell.seed, cell.delta_r);
    let result = train(scenario, &sources, &tcfg)?;
    let target_samples_seen = result.samples_seen(cfg.target_domain);
    if target_samples_seen != 0 {
        return Err(Error::contract(format!(
            "{target_samples_seen} target samples reached the optimizer"
        )));
    }
    if let Some(bad) = result.loss_history.iter().position(|l| !l.is_finite()) {
        return Err(Error::contract(format!("non-finite loss at step {bad}")));
    }
    let (correct, total) = count_correct(result.reported(), scenario, cfg.target_domain)?;
    Ok(RunRecord {
        regime: cell.regime,
        seed: cell.seed,
        delta_r: cell.delta_r,
        category_shift: cell.shifted,
        correct,
        total,
        accuracy: correct as f64 / total as f64,
        degraded_accuracy: None,
        transfer_gain: None,
        target_samples_seen,
    })
}

fn run_cells(
    full: &Scenario,
    shifted: Option<&Scenario>,
    cfg: &ExperimentConfig,
    cells: &[Cell],
) -> Result<Vec<RunRecord>> {
    cells
        .par_iter()
        .map(|&cell| {
            let scenario = if cell.shifted {
                shifted.expect("shifted scenario prepared")
            } else {
                full
            };
            run_cell(scenario, cfg, cell)
        })
        .collect()
}

fn summarize(runs: &[RunRecord], regime: Regime, delta_r: f64, shifted: bool) -> RegimeSummary {
    let accs: Vec<f64> = runs
        .iter()
        .filter(|r| r.regime == regime && r.delta_r == delta_r && r.category_shift == shifted)
        .map(|r| r.accuracy)
        .collect();
    RegimeSummary {
        regime,
        delta_r,
        category_shift: shifted,
        runs: accs.len(),
        mean_accuracy: mean(&accs),
        std_accuracy: sample_std(&accs),
        degraded_accuracy: None,
        transfer_gain: None,
    }
}

fn dedup_regimes(regimes: &[Regime]) -> Vec<Regime> {
    let mut seen = BTreeSet::new();
    regimes.iter().copied().filter(|r| seen.insert(*r)).collect()
}

/// Leave-one-domain-out accuracy for every regime and seed.
pub fn run_dg_experiment(cfg: &ExperimentConfig, scenario: &Scenario) -> Result<MetricsReport> {
    cfg.validate(scenario)?;
    let regimes = dedup_regimes(&cfg.regimes);
    let dr = cfg.train.delta_r;
    let cells: Vec<Cell> = regimes
        .iter()
        .flat_map(|&regime| {
            cfg.seeds.iter().map(move |&seed| Cell {
                regime,
                seed,
                delta_r: dr,
                shifted: false,
            })
        })
        .collect();
    let runs = run_cells(scenario, None, cfg, &cells)?;
    let summaries = regimes.iter().map(|&r| summarize(&runs, r, dr, false)).collect();
    Ok(MetricsReport {
        experiment_id: cfg.experiment_id.clone(),
        target_domain: cfg.target_domain,
        runs,
        summaries,
    })
}

/// Runs every regime (plus source-only) with and without category shift.
pub fn run_category_shift_experiment(cfg: &ExperimentConfig, scenario: &Scenario) -> Result<MetricsReport> {
    let shift = cfg
        .category_shift
        .as_ref()
        .ok_or_else(|| Error::config("category shift experiment needs a removal map"))?;
    cfg.validate(scenario)?;
    let shifted = apply_category_shift(scenario, shift, cfg.target_domain)?;
    let mut regimes = vec![Regime::SourceOnly];
    regimes.extend(cfg.regimes.iter().copied());
    let regimes = dedup_regimes(&regimes);
    let dr = cfg.train.delta_r;

    let cells: Vec<Cell> = [false, true]
        .iter()
        .flat_map(|&shifted| {
            regimes.iter().flat_map(move |&regime| {
                cfg.seeds.iter().map(move |&seed| Cell {
                    regime,
                    seed,
                    delta_r: dr,
                    shifted,
                })
            })
        })
        .collect();
    let mut runs = run_cells(scenario, Some(&shifted), cfg, &cells)?;

    let lookup = |runs: &[RunRecord], regime: Regime, seed: u64, shifted: bool| -> f64 {
        runs.iter()
            .find(|r| r.regime == regime && r.seed == seed && r.category_shift == shifted)
            .map(|r| r.accuracy)
            .expect("every cell ran")
    };
    let snapshot = runs.clone();
    for r in runs.iter_mut().filter(|r| r.category_shift) {
        r.degraded_accuracy = Some(r.accuracy - lookup(&snapshot, r.regime, r.seed, false));
        r.transfer_gain = Some(r.accuracy - lookup(&snapshot, Regime::SourceOnly, r.seed, true));
    }

    let mut summaries = Vec::new();
    for flag in [false, true] {
        for &regime in &regimes {
            summaries.push(summarize(&runs, regime, dr, flag));
        }
    }
    let mean_of = |s: &[RegimeSummary], regime: Regime, flag: bool| -> f64 {
        s.iter()
            .find(|x| x.regime == regime && x.category_shift == flag)
            .map(|x| x.mean_accuracy)
            .expect("summary present")
    };
    let snapshot = summaries.clone();
    for s in summaries.iter_mut().filter(|s| s.category_shift) {
        s.degraded_accuracy = Some(s.mean_accuracy - mean_of(&snapshot, s.regime, false));
        s.transfer_gain = Some(s.mean_accuracy - mean_of(&snapshot, Regime::SourceOnly, true));
    }

    Ok(MetricsReport {
        experiment_id: cfg.experiment_id.clone(),
        target_domain: cfg.target_domain,
        runs,
        summaries,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub delta_r: f64,
    pub regime: Regime,
    pub mean_accuracy: f64,
}

/// One leave-one-domain-out experiment per `delta_r` value, same seeds throughout.
pub fn run_sensitivity_sweep(cfg: &ExperimentConfig, scenario: &Scenario) -> Result<(MetricsReport, Vec<SweepRow>)> {
    if cfg.delta_r_values.len() < 2 {
        return Err(Error::config("a sweep needs at least two delta_r values"));
    }
    cfg.validate(scenario)?;
    let regimes = dedup_regimes(&cfg.regimes);
    let cells: Vec<Cell> = cfg
        .delta_r_values
        .iter()
        .flat_map(|&delta_r| {
            regimes.iter().flat_map(move |&regime| {
                cfg.seeds.iter().map(move |&seed| Cell {
                    regime,
                    seed,
                    delta_r,
                    shifted: false,
                })
            })
        })
        .collect();
    let runs = run_cells(scenario, None, cfg, &cells)?;
    let mut summaries = Vec::new();
    let mut rows = Vec::new();
    for &dr in &cfg.delta_r_values {
        for &regime in &regimes {
            let s = summarize(&runs, regime, dr, false);
            rows.push(SweepRow {
                delta_r: dr,
                regime,
                mean_accuracy: s.mean_accuracy,
            });
            summaries.push(s);
        }
    }
    Ok((
        MetricsReport {
            experiment_id: cfg.experiment_id.clone(),
            target_domain: cfg.target_domain,
            runs,
            summaries,
        },
        rows,
    ))
}

pub fn sweep_table_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("delta_r,regime,mean_accuracy\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.delta_r, r.regime, r.mean_accuracy));
    }
    out
}

/// One embedding dump line.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub sample_index: usize,
    pub domain: usize,
    pub label: usize,
    pub features: Vec<f64>,
}

/// Writes `index,domain,label,f_1..f_m` for every sample in storage order.
pub fn export_embeddings(params: &ModelParams, scenario: &Scenario, path: &Path) -> Result<()> {
    let features = params.features(&scenario.all_inputs())?;
    let mut w = BufWriter::new(File::create(path)?);
    for (i, s) in scenario.samples.iter().enumerate() {
        let vals: Vec<String> = features.row(i).iter().map(|&v| fmt17(v)).collect();
        writeln!(w, "{i},{},{},{}", s.domain, s.label, vals.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let r = BufReader::new(File::open(path)?);
    r.lines()
        .map(|line| {
            let line = line?;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() < 4 {
                return Err(Error::parse(format!("bad embedding line: {line}")));
            }
            Ok(EmbeddingRecord {
                sample_index: parse_num(f[0])?,
                domain: parse_num(f[1])?,
                label: parse_num(f[2])?,
                features: f[3..].iter().map(|v| parse_num(v)).collect::<Result<_>>()?,
            })
        })
        .collect()
}
