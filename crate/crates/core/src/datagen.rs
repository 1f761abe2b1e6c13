//! Synthetic multi-domain classification scenarios.
//!
//! Every class has a prototype on a sphere of radius [`PROTOTYPE_RADIUS`],
//! shared by all domains. A domain draws `prototype + N(0, sigma^2 I)`, scales
//! it, rotates the first two coordinates and translates. Category shift removes
//! classes from individual source domains.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::network::parse_num;

pub const PROTOTYPE_RADIUS: f64 = 3.0;
pub const DEFAULT_NOISE_SIGMA: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    /// Radians, applied in the plane of the first two coordinates.
    pub rotation_angle: f64,
    pub scale: f64,
    pub translation: Vec<f64>,
    pub noise_sigma: f64,
    pub present_classes: BTreeSet<usize>,
}

impl DomainSpec {
    /// No shift; all `k` classes present.
    pub fn identity(k: usize, d: usize, noise_sigma: f64) -> Self {
        Self {
            rotation_angle: 0.0,
            scale: 1.0,
            translation: vec![0.0; d],
            noise_sigma,
            present_classes: (0..k).collect(),
        }
    }

    fn validate(&self, index: usize, k: usize, d: usize) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::config(format!("domain {index}: scale must be > 0")));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config(format!("domain {index}: noise_sigma must be >= 0")));
        }
        if !self.rotation_angle.is_finite() || self.translation.iter().any(|t| !t.is_finite()) {
            return Err(Error::config(format!("domain {index}: non-finite transform")));
        }
        if self.translation.len() != d {
            return Err(Error::config(format!(
                "domain {index}: translation has {} entries, expected {d}",
                self.translation.len()
            )));
        }
        if self.present_classes.is_empty() {
            return Err(Error::config(format!("domain {index}: present_classes is empty")));
        }
        if let Some(&c) = self.present_classes.iter().find(|&&c| c >= k) {
            return Err(Error::config(format!(
                "domain {index}: class {c} out of range for {k} classes"
            )));
        }
        Ok(())
    }

    fn transform(&self, z: &[f64]) -> Vec<f64> {
        let mut v: Vec<f64> = z.iter().map(|x| self.scale * x).collect();
        let (s, c) = self.rotation_angle.sin_cos();
        let (a, b) = (v[0], v[1]);
        v[0] = c * a - s * b;
        v[1] = s * a + c * b;
        for (x, t) in v.iter_mut().zip(&self.translation) {
            *x += t;
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
    pub domain: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub num_classes: usize,
    pub input_dim: usize,
    pub n_per_class: usize,
    pub class_prototypes: Vec<Vec<f64>>,
    pub domains: Vec<DomainSpec>,
    pub samples: Vec<Sample>,
    pub generation_seed: u64,
}

/// Draws a scenario. Samples are ordered by domain, then class, then draw.
pub fn generate_scenario(
    num_classes: usize,
    input_dim: usize,
    n_per_class: usize,
    domains: &[DomainSpec],
    seed: u64,
) -> Result<Scenario> {
    if num_classes < 2 {
        return Err(Error::config("at least 2 classes required"));
    }
    if input_dim < 2 {
        return Err(Error::config("input_dim must be >= 2"));
    }
    if n_per_class == 0 {
        return Err(Error::config("n_per_class must be >= 1"));
    }
    if domains.is_empty() {
        return Err(Error::config("at least one domain required"));
    }
    for (i, d) in domains.iter().enumerate() {
        d.validate(i, num_classes, input_dim)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let class_prototypes: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..input_dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| PROTOTYPE_RADIUS * x / norm).collect()
        })
        .collect();

    let mut samples = Vec::new();
    for (di, spec) in domains.iter().enumerate() {
        for &label in &spec.present_classes {
            let proto = &class_prototypes[label];
            for _ in 0..n_per_class {
                let z: Vec<f64> = proto
                    .iter()
                    .map(|p| p + spec.noise_sigma * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                samples.push(Sample {
                    features: spec.transform(&z),
                    label,
                    domain: di,
                });
            }
        }
    }

    Ok(Scenario {
        num_classes,
        input_dim,
        n_per_class,
        class_prototypes,
        domains: domains.to_vec(),
        samples,
        generation_seed: seed,
    })
}

/// Removes classes from source domains. The target domain may not be named.
pub fn apply_category_shift(
    scenario: &Scenario,
    removed: &BTreeMap<usize, BTreeSet<usize>>,
    target_domain: usize,
) -> Result<Scenario> {
    let mut out = scenario.clone();
    for (&domain, classes) in removed {
        if domain == target_domain {
            if classes.is_empty() {
                continue;
            }
            return Err(Error::config(format!(
                "category shift may not modify the target domain {domain}"
            )));
        }
        let spec = out
            .domains
            .get_mut(domain)
            .ok_or_else(|| Error::config(format!("category shift names unknown domain {domain}")))?;
        if let Some(&c) = classes.iter().find(|&&c| c >= scenario.num_classes) {
            return Err(Error::config(format!("category shift names unknown class {c}")));
        }
        spec.present_classes.retain(|c| !classes.contains(c));
        if spec.present_classes.is_empty() {
            return Err(Error::config(format!(
                "category shift removes every class from domain {domain}"
            )));
        }
    }
    out.samples
        .retain(|s| out.domains[s.domain].present_classes.contains(&s.label));
    Ok(out)
}

/// One balanced mixed-domain mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub domain_indices: Vec<usize>,
    /// Positions in [`Scenario::samples`].
    pub sample_indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Splits the source samples into batches holding `batch_size / sources.len()`
/// samples from every source domain. Trailing partial batches are dropped.
pub fn make_batches(
    scenario: &Scenario,
    sources: &[usize],
    batch_size: usize,
    shuffle_seed: u64,
) -> Result<Vec<Batch>> {
    if sources.is_empty() {
        return Err(Error::config("no source domains"));
    }
    let unique: BTreeSet<usize> = sources.iter().copied().collect();
    if unique.len() != sources.len() {
        return Err(Error::config("duplicate source domain"));
    }
    if let Some(&d) = sources.iter().find(|&&d| d >= scenario.domains.len()) {
        return Err(Error::config(format!("unknown source domain {d}")));
    }
    if batch_size == 0 || !batch_size.is_multiple_of(sources.len()) {
        return Err(Error::config(format!(
            "batch_size {batch_size} is not a positive multiple of {} source domains",
            sources.len()
        )));
    }
    let per_domain = batch_size / sources.len();

    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    let pools: Vec<Vec<usize>> = sources
        .iter()
        .map(|&d| {
            let mut idx: Vec<usize> = scenario
                .samples
                .iter()
                .enumerate()
                .filter(|(_, s)| s.domain == d)
                .map(|(i, _)| i)
                .collect();
            idx.shuffle(&mut rng);
            idx
        })
        .collect();
    let n_batches = pools.iter().map(|p| p.len() / per_domain).min().unwrap_or(0);
    if n_batches == 0 {
        return Err(Error::config(format!(
            "a source domain has fewer than {per_domain} samples"
        )));
    }

    let d = scenario.input_dim;
    let batches = (0..n_batches)
        .map(|b| {
            let sample_indices: Vec<usize> = pools
                .iter()
                .flat_map(|p| p[b * per_domain..(b + 1) * per_domain].iter().copied())
                .collect();
            let mut data = Vec::with_capacity(batch_size * d);
            let mut labels = Vec::with_capacity(batch_size);
            let mut domain_indices = Vec::with_capacity(batch_size);
            for &i in &sample_indices {
                let s = &scenario.samples[i];
                data.extend_from_slice(&s.features);
                labels.push(s.label);
                domain_indices.push(s.domain);
            }
            Batch {
                inputs: Tensor::new(batch_size, d, data).expect("consistent batch"),
                labels,
                domain_indices,
                sample_indices,
            }
        })
        .collect();
    Ok(batches)
}

impl Scenario {
    pub fn domain_samples(&self, domain: usize) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.domain == domain)
    }

    /// Inputs and labels of one domain.
    pub fn domain_tensor(&self, domain: usize) -> Option<(Tensor, Vec<usize>)> {
        let (data, labels): (Vec<Vec<f64>>, Vec<usize>) = self
            .domain_samples(domain)
            .map(|s| (s.features.clone(), s.label))
            .unzip();
        if data.is_empty() {
            return None;
        }
        Some((Tensor::from_rows(&data), labels))
    }

    /// All samples as one matrix, in storage order.
    pub fn all_inputs(&self) -> Tensor {
        let rows: Vec<&[f64]> = self.samples.iter().map(|s| s.features.as_slice()).collect();
        Tensor::from_rows(&rows)
    }

    pub fn label_histogram(&self, domain: usize) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for s in self.domain_samples(domain) {
            h[s.label] += 1;
        }
        h
    }

    /// Writes the scenario as delimited text with 17 significant digits.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "featnorm-scenario 1")?;
        writeln!(
            w,
            "header {} {} {} {} {}",
            self.num_classes,
            self.input_dim,
            self.domains.len(),
            self.generation_seed,
            self.n_per_class
        )?;
        for (i, d) in self.domains.iter().enumerate() {
            let present: Vec<String> = d.present_classes.iter().map(|c| c.to_string()).collect();
            writeln!(
                w,
                "domain {i} {} {} {} {} {}",
                fmt17(d.rotation_angle),
                fmt17(d.scale),
                fmt17(d.noise_sigma),
                join17(&d.translation),
                present.join(",")
            )?;
        }
        for (k, p) in self.class_prototypes.iter().enumerate() {
            writeln!(w, "prototype {k} {}", join17(p))?;
        }
        writeln!(w, "samples {}", self.samples.len())?;
        for s in &self.samples {
            writeln!(w, "{},{},{}", s.domain, s.label, join17(&s.features))?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| Error::parse("unexpected end of scenario file"))?
                .map_err(Error::from)
        };
        if next()?.trim() != "featnorm-scenario 1" {
            return Err(Error::parse("missing scenario header"));
        }
        let header = next()?;
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 6 || h[0] != "header" {
            return Err(Error::parse(format!("bad header line: {header}")));
        }
        let num_classes: usize = parse_num(h[1])?;
        let input_dim: usize = parse_num(h[2])?;
        let n_domains: usize = parse_num(h[3])?;
        let generation_seed: u64 = parse_num(h[4])?;
        let n_per_class: usize = parse_num(h[5])?;

        let mut domains = Vec::with_capacity(n_domains);
        for i in 0..n_domains {
            let line = next()?;
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 7 || f[0] != "domain" || parse_num::<usize>(f[1])? != i {
                return Err(Error::parse(format!("bad domain line: {line}")));
            }
            let translation = split_f64(f[5])?;
            if translation.len() != input_dim {
                return Err(Error::parse(format!("domain {i}: translation length")));
            }
            let present_classes = f[6]
                .split(',')
                .map(parse_num::<usize>)
                .collect::<Result<BTreeSet<_>>>()?;
            domains.push(DomainSpec {
                rotation_angle: parse_num(f[2])?,
                scale: parse_num(f[3])?,
                noise_sigma: parse_num(f[4])?,
                translation,
                present_classes,
            });
        }
        let mut class_prototypes = Vec::with_capacity(num_classes);
        for k in 0..num_classes {
            let line = next()?;
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 3 || f[0] != "prototype" || parse_num::<usize>(f[1])? != k {
                return Err(Error::parse(format!("bad prototype line: {line}")));
            }
            class_prototypes.push(split_f64(f[2])?);
        }
        let count_line = next()?;
        let count: usize = count_line
            .strip_prefix("samples ")
            .ok_or_else(|| Error::parse("missing samples line"))
            .and_then(parse_num)?;
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            let line = next()?;
            let mut it = line.split(',');
            let domain: usize = parse_num(it.next().unwrap_or(""))?;
            let label: usize = parse_num(it.next().unwrap_or(""))?;
            let features = it.map(parse_num::<f64>).collect::<Result<Vec<_>>>()?;
            if features.len() != input_dim || domain >= n_domains || label >= num_classes {
                return Err(Error::parse(format!("bad sample line: {line}")));
            }
            samples.push(Sample {
                features,
                label,
                domain,
            });
        }
        Ok(Self {
            num_classes,
            input_dim,
            n_per_class,
            class_prototypes,
            domains,
            samples,
            generation_seed,
        })
    }
}

pub(crate) fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

fn join17(v: &[f64]) -> String {
    v.iter().map(|&x| fmt17(x)).collect::<Vec<_>>().join(",")
}

fn split_f64(s: &str) -> Result<Vec<f64>> {
    s.split(',').map(parse_num::<f64>).collect()
}
