//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use featnorm::gradcheck::{random_tensor, relative_error, FD_STEP};
use featnorm::harness::{
    default_category_shift, default_scenario_params, run_category_shift_experiment, run_dg_experiment,
    run_sensitivity_sweep, sources_for, ExperimentConfig, MetricsReport, TrainTemplate, DEFAULT_SEEDS, DEFAULT_TARGET,
};
use featnorm::losses::{cfnn_total, cross_entropy, feature_norm_loss, fnn_total, kl_mimicry, NormLossConfig};
use featnorm::network::{init_params, ModelParams, NetworkSpec};
use featnorm::trainer::{train, Regime, DEFAULT_LEARNING_RATE, DEFAULT_MOMENTUM};
use featnorm::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

// ---------------------------------------------------------------------------
// Plain-f64 reference forward, shares nothing with the tape.

type Rows = Vec<Vec<f64>>;

/// Features, logits and the smallest |pre-activation| feeding a ReLU.
fn ref_forward(p: &ModelParams, x: &Rows) -> (Rows, Rows, f64) {
    let depth = p.layers.len() - 1;
    let affine = |h: &Rows, w: &Tensor, b: &Tensor| -> Rows {
        h.iter()
            .map(|row| {
                (0..w.cols())
                    .map(|j| b.get(0, j) + row.iter().enumerate().map(|(i, v)| v * w.get(i, j)).sum::<f64>())
                    .collect()
            })
            .collect()
    };
    let mut h = x.clone();
    let mut kink = f64::INFINITY;
    for (i, l) in p.layers[..depth].iter().enumerate() {
        if i > 0 {
            kink = h.iter().flatten().fold(kink, |m, v| m.min(v.abs()));
            h = h.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect();
        }
        h = affine(&h, &l.weight, &l.bias);
    }
    let c = &p.layers[depth];
    let z = affine(&h, &c.weight, &c.bias);
    (h, z, kink)
}

fn ref_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn norm(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Loss of one network with the radius and the peer distribution held fixed.
fn ref_loss(p: &ModelParams, x: &Rows, y: &[usize], cfg: NormLossConfig, radius: &[f64], peer: Option<&Rows>) -> f64 {
    let (f, z, _) = ref_forward(p, x);
    let n = x.len() as f64;
    let mut ce = 0.0;
    let mut nl = 0.0;
    let mut kl = 0.0;
    for i in 0..x.len() {
        let prob = ref_softmax(&z[i]);
        ce -= prob[y[i]].ln();
        nl += (norm(&f[i]) - radius[i]).powi(2);
        if let Some(q) = peer {
            kl += q[i].iter().zip(&prob).map(|(a, b)| a * (a.ln() - b.ln())).sum::<f64>();
        }
    }
    ce / n + cfg.gamma * nl / n + kl / n
}

fn frozen_radius(p: &ModelParams, x: &Rows, dr: f64) -> Vec<f64> {
    ref_forward(p, x).0.iter().map(|r| norm(r) + dr).collect()
}

fn frozen_probs(p: &ModelParams, x: &Rows) -> Rows {
    ref_forward(p, x).1.iter().map(|z| ref_softmax(z)).collect()
}

/// Central differences of `f` over every parameter of `nets[which]`.
fn fd_grads(nets: &[ModelParams], which: usize, f: &dyn Fn(&[ModelParams]) -> f64) -> Vec<f64> {
    let mut work = nets.to_vec();
    let mut out = Vec::new();
    let count = work[which].parameters().len();
    for t in 0..count {
        let len = work[which].parameters()[t].len();
        for j in 0..len {
            let orig = work[which].parameters()[t].data()[j];
            work[which].parameters_mut()[t].data_mut()[j] = orig + FD_STEP;
            let plus = f(&work);
            work[which].parameters_mut()[t].data_mut()[j] = orig - FD_STEP;
            let minus = f(&work);
            work[which].parameters_mut()[t].data_mut()[j] = orig;
            out.push((plus - minus) / (2.0 * FD_STEP));
        }
    }
    out
}

struct GradCase {
    nets: Vec<ModelParams>,
    x: Rows,
    y: Vec<usize>,
    cfg: NormLossConfig,
}

fn random_case(rng: &mut ChaCha8Rng) -> GradCase {
    let d = rng.gen_range(2..=6);
    let fd = rng.gen_range(2..=8);
    let k = rng.gen_range(2..=5);
    let n = rng.gen_range(2..=12);
    let hidden: Vec<usize> = (0..rng.gen_range(0..=2)).map(|_| rng.gen_range(2..=8)).collect();
    let spec = NetworkSpec::new(d, hidden, fd, k);
    let cfg = NormLossConfig {
        gamma: rng.gen_range(0.01..0.5),
        delta_r: rng.gen_range(0.1..2.0),
    };
    loop {
        let seed: u64 = rng.gen();
        let nets: Vec<ModelParams> = (0..2)
            .map(|s| {
                let mut p = init_params(&spec, seed + s).unwrap();
                for l in &mut p.layers {
                    l.bias = random_tensor(rng, 1, l.bias.cols(), 0.2);
                }
                p
            })
            .collect();
        let xt = random_tensor(rng, n, d, 1.0);
        let x: Rows = (0..n).map(|i| xt.row(i).to_vec()).collect();
        let y: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let clear = nets.iter().all(|p| ref_forward(p, &x).2 > 1e-3);
        if clear {
            return GradCase { nets, x, y, cfg };
        }
    }
}

fn tape_grads(case: &GradCase, collaborative: bool) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let xt = Tensor::from_rows(&case.x);
    let x = tape.constant(xt);
    let used = if collaborative { 2 } else { 1 };
    let bound: Vec<_> = case.nets[..used].iter().map(|p| p.bind(&mut tape)).collect();
    let mut feats = Vec::new();
    let mut logits = Vec::new();
    for b in &bound {
        let f = b.forward_features(&mut tape, x).unwrap();
        logits.push(b.forward_logits(&mut tape, f).unwrap());
        feats.push(f);
    }
    let root = if collaborative {
        let p0 = tape.softmax_rows(logits[0]);
        let p1 = tape.softmax_rows(logits[1]);
        let t0 = cfnn_total(&mut tape, logits[0], &case.y, feats[0], p1, case.cfg).unwrap();
        let t1 = cfnn_total(&mut tape, logits[1], &case.y, feats[1], p0, case.cfg).unwrap();
        tape.add(t0.total, t1.total).unwrap()
    } else {
        fnn_total(&mut tape, logits[0], &case.y, feats[0], case.cfg)
            .unwrap()
            .total
    };
    let grads = tape.backward(root).unwrap();
    bound
        .iter()
        .map(|b| {
            b.parameters()
                .iter()
                .flat_map(|&v| grads.wrt(v).data().to_vec())
                .collect()
        })
        .collect()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    for _ in 0..20 {
        let case = random_case(&mut rng);
        let (x, y, cfg) = (&case.x, &case.y, case.cfg);

        let analytic = tape_grads(&case, false);
        let r0 = frozen_radius(&case.nets[0], x, cfg.delta_r);
        let numeric = fd_grads(&case.nets, 0, &|n| ref_loss(&n[0], x, y, cfg, &r0, None));
        for (a, b) in analytic[0].iter().zip(&numeric) {
            worst = worst.max(relative_error(*a, *b));
        }
        checked += numeric.len();

        let analytic = tape_grads(&case, true);
        let r1 = frozen_radius(&case.nets[1], x, cfg.delta_r);
        let q0 = frozen_probs(&case.nets[0], x);
        let q1 = frozen_probs(&case.nets[1], x);
        let joint =
            |n: &[ModelParams]| ref_loss(&n[0], x, y, cfg, &r0, Some(&q1)) + ref_loss(&n[1], x, y, cfg, &r1, Some(&q0));
        for (which, grads) in analytic.iter().enumerate() {
            let numeric = fd_grads(&case.nets, which, &joint);
            for (a, b) in grads.iter().zip(&numeric) {
                worst = worst.max(relative_error(*a, *b));
            }
            checked += numeric.len();
        }
    }
    let elapsed = start.elapsed();
    Outcome::new(
        worst < 1e-4 && elapsed < Duration::from_secs(30),
        format!(
            "max rel err {worst:.2e} over {checked} partials, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut value_err: f64 = 0.0;
    let mut grad_err: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.gen_range(1..=32);
        let m = rng.gen_range(1..=16);
        let cfg = NormLossConfig {
            gamma: rng.gen_range(0.001..1.0),
            delta_r: rng.gen_range(0.05..3.0),
        };
        let scale = rng.gen_range(0.1..5.0);
        let f = random_tensor(&mut rng, n, m, scale);
        let mut tape = Tape::new();
        let fv = tape.param(f.clone());
        let loss = feature_norm_loss(&mut tape, fv, cfg).unwrap();
        let expected = cfg.gamma * cfg.delta_r * cfg.delta_r;
        value_err = value_err.max((tape.value(loss).item() - expected).abs());
        let g = tape.backward(loss).unwrap();
        let g = g.wrt(fv);
        for i in 0..n {
            let r = norm(f.row(i));
            for j in 0..m {
                let closed = -(2.0 * cfg.gamma * cfg.delta_r / n as f64) * f.get(i, j) / r;
                grad_err = grad_err.max((g.get(i, j) - closed).abs());
            }
        }
    }
    Outcome::new(
        value_err <= 1e-12 && grad_err <= 1e-8,
        format!("value err {value_err:.2e}, gradient err {grad_err:.2e}"),
    )
}

fn criterion_3() -> Outcome {
    let scenario = default_scenario_params().generate().unwrap();
    let sources = sources_for(&scenario, DEFAULT_TARGET);
    let t = TrainTemplate::default();
    let pinned = t.gamma == 0.05 && t.delta_r == 1.0 && t.learning_rate == 1e-3 && t.momentum == 0.9;
    let mut good = 0;
    let mut notes = Vec::new();
    for &seed in &DEFAULT_SEEDS {
        let cfg = t.config(&scenario, Regime::Fnn, seed, 1.0);
        let r = train(&scenario, &sources, &cfg).unwrap();
        if r.norm_trace.len() < 100 {
            notes.push(format!("seed {seed}: only {} steps", r.norm_trace.len()));
            continue;
        }
        let windows: Vec<f64> = r.norm_trace[..100]
            .chunks(20)
            .map(|c| c.iter().sum::<f64>() / 20.0)
            .collect();
        if windows.windows(2).all(|w| w[1] >= w[0]) {
            good += 1;
        } else {
            notes.push(format!("seed {seed}: {windows:.3?}"));
        }
    }
    Outcome::new(
        pinned && good == DEFAULT_SEEDS.len(),
        format!(
            "{good}/{} seeds nondecreasing{}",
            DEFAULT_SEEDS.len(),
            if notes.is_empty() {
                String::new()
            } else {
                format!(": {}", notes.join("; "))
            }
        ),
    )
}

fn criterion_4(report: &MetricsReport, elapsed: Duration) -> Outcome {
    let so = report.mean_accuracy(Regime::SourceOnly).unwrap();
    let fnn = report.mean_accuracy(Regime::Fnn).unwrap();
    let cfnn = report.mean_accuracy(Regime::Cfnn).unwrap();
    Outcome::new(
        fnn >= so + 0.02 && cfnn >= fnn - 0.01 && cfnn >= so + 0.02 && elapsed < Duration::from_secs(600),
        format!(
            "source_only {so:.4}, fnn {fnn:.4}, cfnn {cfnn:.4}, {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_5(report: &MetricsReport) -> Outcome {
    let gain = |r: Regime| report.summary(r, true, 1.0).and_then(|s| s.transfer_gain);
    let (so, fnn, cfnn) = (gain(Regime::SourceOnly), gain(Regime::Fnn), gain(Regime::Cfnn));
    let so_runs_zero = report
        .runs
        .iter()
        .filter(|r| r.category_shift && r.regime == Regime::SourceOnly)
        .all(|r| r.transfer_gain == Some(0.0));
    let pass = so == Some(0.0) && so_runs_zero && fnn.is_some_and(|g| g > 0.0) && cfnn.is_some_and(|g| g > 0.0);
    let show = |g: Option<f64>| g.map_or("missing".to_string(), |v| format!("{v:.4}"));
    Outcome::new(
        pass,
        format!(
            "transfer gain source_only {}, fnn {}, cfnn {}",
            show(so),
            show(fnn),
            show(cfnn)
        ),
    )
}

fn criterion_6(rows: &[featnorm::harness::SweepRow]) -> Outcome {
    let spread = |r: Regime| {
        let v: Vec<f64> = rows.iter().filter(|x| x.regime == r).map(|x| x.mean_accuracy).collect();
        v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min)
    };
    let (a, b) = (spread(Regime::Fnn), spread(Regime::Cfnn));
    Outcome::new(a < 0.05 && b < 0.05, format!("spread fnn {a:.4}, cfnn {b:.4}"))
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut self_kl: f64 = 0.0;
    let mut min_kl = f64::INFINITY;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=8);
        let k = rng.gen_range(2..=6);
        let mut tape = Tape::new();
        let za = tape.constant(random_tensor(&mut rng, n, k, 2.0));
        let zb = tape.constant(random_tensor(&mut rng, n, k, 2.0));
        let pa = tape.softmax_rows(za);
        let pb = tape.softmax_rows(zb);
        let same = kl_mimicry(&mut tape, pa, pa).unwrap();
        let diff = kl_mimicry(&mut tape, pa, pb).unwrap();
        self_kl = self_kl.max(tape.value(same).item().abs());
        min_kl = min_kl.min(tape.value(diff).item());
    }
    let mut ce_uniform_err: f64 = 0.0;
    let mut ce_perfect: f64 = 0.0;
    for k in 2..=10 {
        let n = 7;
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        let mut tape = Tape::new();
        let flat = tape.constant(Tensor::filled(n, k, 0.3));
        let ce = cross_entropy(&mut tape, flat, &labels).unwrap();
        ce_uniform_err = ce_uniform_err.max((tape.value(ce).item() - (k as f64).ln()).abs());
        let mut sharp = Tensor::zeros(n, k);
        for (i, &y) in labels.iter().enumerate() {
            sharp.set(i, y, 60.0);
        }
        let sharp = tape.constant(sharp);
        let ce = cross_entropy(&mut tape, sharp, &labels).unwrap();
        ce_perfect = ce_perfect.max(tape.value(ce).item());
    }
    Outcome::new(
        self_kl == 0.0 && min_kl >= 0.0 && ce_uniform_err <= 1e-9 && ce_perfect < 1e-9,
        format!(
            "kl(p,p) max {self_kl:.1e}, min kl {min_kl:.2e}, ce uniform err {ce_uniform_err:.1e}, ce perfect {ce_perfect:.1e}"
        ),
    )
}

fn cli_dg(dir: &Path) -> Vec<u8> {
    let status = Command::new(env!("CARGO_BIN_EXE_featnorm"))
        .args(["dg", "--seeds", "1,2", "--id", "det", "--out-dir"])
        .arg(dir)
        .output()
        .expect("spawn featnorm");
    assert!(
        status.status.success(),
        "dg failed: {}",
        String::from_utf8_lossy(&status.stderr)
    );
    std::fs::read(dir.join("det.csv")).expect("metrics csv")
}

fn criterion_8() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let a = cli_dg(&tmp.path().join("a"));
    let b = cli_dg(&tmp.path().join("b"));
    let scenario = default_scenario_params().generate().unwrap();
    let sources = sources_for(&scenario, DEFAULT_TARGET);
    let t = TrainTemplate::default();
    let mut bitwise = true;
    for regime in Regime::ALL {
        let cfg = t.config(&scenario, regime, 11, t.delta_r);
        let r1 = train(&scenario, &sources, &cfg).unwrap();
        let r2 = train(&scenario, &sources, &cfg).unwrap();
        let bits = |r: &featnorm::trainer::TrainResult| -> Vec<u64> {
            r.loss_history
                .iter()
                .flat_map(|l| [l.class_loss, l.domain_loss, l.mimicry_loss, l.total])
                .map(f64::to_bits)
                .collect()
        };
        bitwise &= bits(&r1) == bits(&r2) && r1.final_params == r2.final_params;
    }
    Outcome::new(
        a == b && !a.is_empty() && bitwise,
        format!(
            "csv identical {} ({} bytes), loss histories bitwise {bitwise}",
            a == b,
            a.len()
        ),
    )
}

fn criterion_9(reports: &[&MetricsReport]) -> Outcome {
    let scenario = default_scenario_params().generate().unwrap();
    let t = TrainTemplate::default();
    let mut direct = 0;
    for target in 0..scenario.domains.len() {
        for regime in Regime::ALL {
            let cfg = t.config(&scenario, regime, 3, t.delta_r);
            let r = train(&scenario, &sources_for(&scenario, target), &cfg).unwrap();
            direct += r.samples_seen(target);
        }
    }
    let cells: usize = reports.iter().map(|r| r.runs.len()).sum();
    let leaked: usize = reports
        .iter()
        .flat_map(|r| &r.runs)
        .map(|r| r.target_samples_seen)
        .sum();
    Outcome::new(
        leaked == 0 && direct == 0 && cells > 0,
        format!("{cells} experiment cells, {leaked} target samples; every-target direct runs: {direct}"),
    )
}

fn main() {
    assert_eq!(DEFAULT_LEARNING_RATE, 1e-3);
    assert_eq!(DEFAULT_MOMENTUM, 0.9);
    let scenario = default_scenario_params().generate().unwrap();
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();

    results.push((1, "gradient correctness", criterion_1()));
    results.push((2, "feature-norm closed form", criterion_2()));
    results.push((3, "norm growth", criterion_3()));

    let start = Instant::now();
    let dg_cfg = ExperimentConfig::new("acceptance_dg", DEFAULT_TARGET, Regime::ALL.to_vec());
    let dg = run_dg_experiment(&dg_cfg, &scenario).unwrap();
    results.push((4, "dg improvement", criterion_4(&dg, start.elapsed())));

    let mut cs_cfg = ExperimentConfig::new("acceptance_catshift", DEFAULT_TARGET, vec![Regime::Fnn, Regime::Cfnn]);
    cs_cfg.category_shift = Some(default_category_shift());
    let cs = run_category_shift_experiment(&cs_cfg, &scenario).unwrap();
    results.push((5, "category-shift transfer gain", criterion_5(&cs)));

    let mut sw_cfg = ExperimentConfig::new("acceptance_sweep", DEFAULT_TARGET, vec![Regime::Fnn, Regime::Cfnn]);
    sw_cfg.delta_r_values = vec![0.5, 1.0, 1.5];
    let (sw, rows) = run_sensitivity_sweep(&sw_cfg, &scenario).unwrap();
    results.push((6, "delta_r sensitivity", criterion_6(&rows)));

    results.push((7, "kl and cross-entropy oracles", criterion_7()));
    results.push((8, "determinism", criterion_8()));
    results.push((9, "target isolation", criterion_9(&[&dg, &cs, &sw])));

    let mut failed = 0;
    for (id, name, o) in &results {
        println!(
            "criterion {id} {name}: {} ({})",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        if !o.pass {
            failed += 1;
        }
    }
    println!("acceptance: {}/{} passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
