//! Training loops for the three regimes.
//!
//! All regimes use mini-batch SGD with heavy-ball momentum
//! (`v <- m v + g; theta <- theta - lr v`) over balanced mixed-domain batches.
//! A fresh tape is built for every batch.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::datagen::{make_batches, Batch, Scenario};
use crate::error::{Error, Result};
use crate::losses::{cfnn_total, fnn_total, source_only_total, LossValues, NormLossConfig};
use crate::network::{init_params, ModelParams, NetworkSpec};

pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    SourceOnly,
    Fnn,
    Cfnn,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::SourceOnly, Regime::Fnn, Regime::Cfnn];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::SourceOnly => "source_only",
            Regime::Fnn => "fnn",
            Regime::Cfnn => "cfnn",
        }
    }

    /// Whether the feature-norm term (and hence `delta_r`) matters.
    pub fn uses_norm_loss(self) -> bool {
        !matches!(self, Regime::SourceOnly)
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "source_only" | "source-only" => Ok(Regime::SourceOnly),
            "fnn" => Ok(Regime::Fnn),
            "cfnn" => Ok(Regime::Cfnn),
            other => Err(Error::config(format!("unknown regime '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub regime: Regime,
    pub learning_rate: f64,
    pub momentum: f64,
    pub gamma: f64,
    pub delta_r: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub network: NetworkSpec,
}

impl TrainConfig {
    /// Defaults: lr 1e-3, momentum 0.9, gamma 0.05, delta_r 1.0.
    pub fn new(regime: Regime, network: NetworkSpec, epochs: usize, batch_size: usize, seed: u64) -> Self {
        let norm = NormLossConfig::default();
        Self {
            regime,
            learning_rate: DEFAULT_LEARNING_RATE,
            momentum: DEFAULT_MOMENTUM,
            gamma: norm.gamma,
            delta_r: norm.delta_r,
            epochs,
            batch_size,
            seed,
            network,
        }
    }

    pub fn norm_loss(&self) -> NormLossConfig {
        NormLossConfig {
            gamma: self.gamma,
            delta_r: self.delta_r,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        self.norm_loss().validate()?;
        self.network.validate()
    }
}

/// Velocity buffers mirroring the parameter shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Tensor>,
}

impl OptimizerState {
    pub fn zeros_like<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        Self {
            velocity: params.into_iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect(),
        }
    }
}

/// `v <- momentum * v + g; theta <- theta - lr * v`, tensor by tensor.
pub fn sgd_momentum_step<'a>(
    params: impl IntoIterator<Item = &'a mut Tensor>,
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    let params: Vec<&mut Tensor> = params.into_iter().collect();
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::contract(format!(
            "optimizer got {} params, {} grads, {} velocity buffers",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for (i, ((p, g), v)) in params.into_iter().zip(grads).zip(&mut state.velocity).enumerate() {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::contract(format!(
                "parameter {i}: shape {:?}, gradient {:?}, velocity {:?}",
                p.shape(),
                g.shape(),
                v.shape()
            )));
        }
        for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = momentum * *vv + gv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainResult {
    /// One model, or two for the collaborative regime (reported model first).
    pub final_params: Vec<ModelParams>,
    /// Loss terms of the reported model at every step.
    pub loss_history: Vec<LossValues>,
    /// Mean batch feature norm of the reported model, before each step.
    pub norm_trace: Vec<f64>,
    /// Loss terms of the peer network (collaborative regime only).
    pub peer_loss_history: Vec<LossValues>,
    /// Samples consumed per domain over the whole run.
    pub domain_sample_counts: BTreeMap<usize, usize>,
}

impl TrainResult {
    pub fn steps(&self) -> usize {
        self.loss_history.len()
    }

    /// The model evaluated at test time.
    pub fn reported(&self) -> &ModelParams {
        &self.final_params[0]
    }

    /// Samples from `domain` consumed during training.
    pub fn samples_seen(&self, domain: usize) -> usize {
        self.domain_sample_counts.get(&domain).copied().unwrap_or(0)
    }
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((epoch as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9))
        ^ 0x94D0_49BB_1331_11EB
}

fn mean_row_norm(t: &Tensor) -> f64 {
    let total: f64 = (0..t.rows())
        .map(|r| t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum();
    total / t.rows() as f64
}

fn check_regime(cfg: &TrainConfig, expected: Regime) -> Result<()> {
    if cfg.regime != expected {
        return Err(Error::config(format!(
            "config regime {} used with the {} trainer",
            cfg.regime, expected
        )));
    }
    Ok(())
}

fn check_network(scenario: &Scenario, spec: &NetworkSpec) -> Result<()> {
    if spec.input_dim != scenario.input_dim || spec.num_classes != scenario.num_classes {
        return Err(Error::config(format!(
            "network expects {} inputs / {} classes, scenario has {} / {}",
            spec.input_dim, spec.num_classes, scenario.input_dim, scenario.num_classes
        )));
    }
    Ok(())
}

/// Runs `step` over every batch of every epoch.
fn run_epochs(
    scenario: &Scenario,
    sources: &[usize],
    cfg: &TrainConfig,
    mut step: impl FnMut(&Batch) -> Result<()>,
) -> Result<BTreeMap<usize, usize>> {
    let mut counts = BTreeMap::new();
    for epoch in 0..cfg.epochs {
        let batches = make_batches(scenario, sources, cfg.batch_size, epoch_seed(cfg.seed, epoch))?;
        for batch in &batches {
            for &d in &batch.domain_indices {
                *counts.entry(d).or_insert(0) += 1;
            }
            step(batch)?;
        }
    }
    Ok(counts)
}

/// One network trained on cross-entropy, optionally plus the feature-norm term.
fn train_single(scenario: &Scenario, sources: &[usize], cfg: &TrainConfig, with_norm: bool) -> Result<TrainResult> {
    cfg.validate()?;
    check_network(scenario, &cfg.network)?;
    let mut params = init_params(&cfg.network, cfg.seed)?;
    let mut state = OptimizerState::zeros_like(params.parameters());
    let mut loss_history = Vec::new();
    let mut norm_trace = Vec::new();
    let norm_cfg = cfg.norm_loss();

    let counts = run_epochs(scenario, sources, cfg, |batch| {
        let mut tape = Tape::new();
        let model = params.bind(&mut tape);
        let x = tape.constant(batch.inputs.clone());
        let f = model.forward_features(&mut tape, x)?;
        let z = model.forward_logits(&mut tape, f)?;
        let terms = if with_norm {
            fnn_total(&mut tape, z, &batch.labels, f, norm_cfg)?
        } else {
            source_only_total(&mut tape, z, &batch.labels)?
        };
        norm_trace.push(mean_row_norm(tape.value(f)));
        loss_history.push(terms.values(&tape));
        let grads = tape.backward(terms.total)?;
        let g: Vec<Tensor> = model.parameters().iter().map(|&v| grads.wrt(v).clone()).collect();
        sgd_momentum_step(params.parameters_mut(), &g, &mut state, cfg.learning_rate, cfg.momentum)
    })?;

    Ok(TrainResult {
        final_params: vec![params],
        loss_history,
        norm_trace,
        peer_loss_history: Vec::new(),
        domain_sample_counts: counts,
    })
}

/// Cross-entropy only over pooled source batches.
pub fn train_source_only(scenario: &Scenario, sources: &[usize], cfg: &TrainConfig) -> Result<TrainResult> {
    check_regime(cfg, Regime::SourceOnly)?;
    train_single(scenario, sources, cfg, false)
}

/// Cross-entropy plus adaptive-radius feature-norm loss.
pub fn train_fnn(scenario: &Scenario, sources: &[usize], cfg: &TrainConfig) -> Result<TrainResult> {
    check_regime(cfg, Regime::Fnn)?;
    train_single(scenario, sources, cfg, true)
}

/// Two networks initialized from `cfg.seed` and `cfg.seed + 1`.
pub fn train_cfnn(scenario: &Scenario, sources: &[usize], cfg: &TrainConfig) -> Result<TrainResult> {
    train_cfnn_with_seeds(scenario, sources, cfg, cfg.seed, cfg.seed.wrapping_add(1))
}

/// Collaborative training with explicit initialization seeds. Batch order still
/// follows `cfg.seed`. Both networks are updated from the same forward pass, each
/// mimicking the other's detached predictions.
pub fn train_cfnn_with_seeds(
    scenario: &Scenario,
    sources: &[usize],
    cfg: &TrainConfig,
    seed_a: u64,
    seed_b: u64,
) -> Result<TrainResult> {
    check_regime(cfg, Regime::Cfnn)?;
    cfg.validate()?;
    check_network(scenario, &cfg.network)?;
    let mut nets = [init_params(&cfg.network, seed_a)?, init_params(&cfg.network, seed_b)?];
    let mut states = [
        OptimizerState::zeros_like(nets[0].parameters()),
        OptimizerState::zeros_like(nets[1].parameters()),
    ];
    let mut loss_history = Vec::new();
    let mut peer_loss_history = Vec::new();
    let mut norm_trace = Vec::new();
    let norm_cfg = cfg.norm_loss();

    let counts = run_epochs(scenario, sources, cfg, |batch| {
        let mut tape = Tape::new();
        let models = [nets[0].bind(&mut tape), nets[1].bind(&mut tape)];
        let x = tape.constant(batch.inputs.clone());
        let f1 = models[0].forward_features(&mut tape, x)?;
        let z1 = models[0].forward_logits(&mut tape, f1)?;
        let f2 = models[1].forward_features(&mut tape, x)?;
        let z2 = models[1].forward_logits(&mut tape, f2)?;
        let p1 = tape.softmax_rows(z1);
        let p2 = tape.softmax_rows(z2);
        let t1 = cfnn_total(&mut tape, z1, &batch.labels, f1, p2, norm_cfg)?;
        let t2 = cfnn_total(&mut tape, z2, &batch.labels, f2, p1, norm_cfg)?;
        norm_trace.push(mean_row_norm(tape.value(f1)));
        loss_history.push(t1.values(&tape));
        peer_loss_history.push(t2.values(&tape));
        // peers are detached, so each total only reaches its own network
        let joint = tape.add(t1.total, t2.total)?;
        let grads = tape.backward(joint)?;
        for (k, (net, state)) in nets.iter_mut().zip(states.iter_mut()).enumerate() {
            let g: Vec<Tensor> = models[k].parameters().iter().map(|&v| grads.wrt(v).clone()).collect();
            sgd_momentum_step(net.parameters_mut(), &g, state, cfg.learning_rate, cfg.momentum)?;
        }
        Ok(())
    })?;

    Ok(TrainResult {
        final_params: nets.to_vec(),
        loss_history,
        norm_trace,
        peer_loss_history,
        domain_sample_counts: counts,
    })
}

/// Dispatches on `cfg.regime`.
pub fn train(scenario: &Scenario, sources: &[usize], cfg: &TrainConfig) -> Result<TrainResult> {
    match cfg.regime {
        Regime::SourceOnly => train_source_only(scenario, sources, cfg),
        Regime::Fnn => train_fnn(scenario, sources, cfg),
        Regime::Cfnn => train_cfnn(scenario, sources, cfg),
    }
}

/// One step of the training log as `key=value` pairs.
pub fn format_log_line(step: usize, losses: &LossValues, mean_feature_norm: f64) -> String {
    format!(
        "step={step} class_loss={:e} domain_loss={:e} mimicry_loss={:e} total={:e} mean_feature_norm={:e}",
        losses.class_loss, losses.domain_loss, losses.mimicry_loss, losses.total, mean_feature_norm
    )
}

/// Inverse of [`format_log_line`].
pub fn parse_log_line(line: &str) -> Result<(usize, LossValues, f64)> {
    let mut fields = BTreeMap::new();
    for tok in line.split_whitespace() {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| Error::parse(format!("bad log token '{tok}'")))?;
        fields.insert(k, v);
    }
    let get = |k: &str| -> Result<f64> {
        fields
            .get(k)
            .ok_or_else(|| Error::parse(format!("log line missing {k}")))
            .and_then(|v| crate::network::parse_num(v))
    };
    let step = fields
        .get("step")
        .ok_or_else(|| Error::parse("log line missing step"))
        .and_then(|v| crate::network::parse_num(v))?;
    Ok((
        step,
        LossValues {
            class_loss: get("class_loss")?,
            domain_loss: get("domain_loss")?,
            mimicry_loss: get("mimicry_loss")?,
            total: get("total")?,
        },
        get("mean_feature_norm")?,
    ))
}

impl TrainResult {
    /// Training log of the reported model, one line per step.
    pub fn log_lines(&self) -> impl Iterator<Item = String> + '_ {
        self.loss_history
            .iter()
            .zip(&self.norm_trace)
            .enumerate()
            .map(|(i, (l, n))| format_log_line(i, l, *n))
    }
}
