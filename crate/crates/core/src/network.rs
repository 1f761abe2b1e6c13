//! Feature extractor and linear classifier head.
//!
//! The extractor is a stack of fully connected layers with ReLU between them and
//! no activation after the last one, so feature norms are unbounded. The head is
//! a single linear layer producing logits; softmax lives in [`crate::losses`].

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    /// Hidden widths of the feature extractor; may be empty.
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl NetworkSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, feature_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden_dims,
            feature_dim,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.feature_dim == 0 || self.num_classes == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::config(format!("all network dimensions must be >= 1: {self:?}")));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every layer, extractor first, head last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.hidden_dims);
        widths.push(self.feature_dim);
        widths.push(self.num_classes);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// Number of layers belonging to the feature extractor.
    pub fn extractor_depth(&self) -> usize {
        self.hidden_dims.len() + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `fan_in x fan_out`
    pub weight: Tensor,
    /// `1 x fan_out`
    pub bias: Tensor,
}

/// Weights of one extractor + head pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub spec: NetworkSpec,
    pub init_seed: u64,
    /// Extractor layers followed by the classifier layer.
    pub layers: Vec<Layer>,
}

/// Scaled-uniform (Glorot) weights, zero biases, fully determined by `seed`.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> Result<ModelParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = spec
        .layer_dims()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
            Layer {
                weight: Tensor::new(fan_in, fan_out, data).expect("positive dims"),
                bias: Tensor::zeros(1, fan_out),
            }
        })
        .collect();
    Ok(ModelParams {
        spec: spec.clone(),
        init_seed: seed,
        layers,
    })
}

impl ModelParams {
    /// Weight/bias tensors in optimizer order: `W0, b0, W1, b1, ...`.
    pub fn parameters(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Registers every parameter on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let layers = self
            .layers
            .iter()
            .map(|l| (tape.param(l.weight.clone()), tape.param(l.bias.clone())))
            .collect();
        BoundModel {
            layers,
            extractor_depth: self.spec.extractor_depth(),
        }
    }

    /// Registers parameters as constants, for inference.
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundModel {
        let layers = self
            .layers
            .iter()
            .map(|l| (tape.constant(l.weight.clone()), tape.constant(l.bias.clone())))
            .collect();
        BoundModel {
            layers,
            extractor_depth: self.spec.extractor_depth(),
        }
    }

    /// Feature matrix for `x` without recording gradients.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let model = self.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let f = model.forward_features(&mut tape, xv)?;
        Ok(tape.value(f).clone())
    }

    /// Logits for `x` without recording gradients.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let model = self.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let f = model.forward_features(&mut tape, xv)?;
        let z = model.forward_logits(&mut tape, f)?;
        Ok(tape.value(z).clone())
    }

    /// Writes a textual checkpoint that reloads bit-for-bit.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let hidden = self
            .spec
            .hidden_dims
            .iter()
            .map(|h| h.to_string())
            .collect::<Vec<_>>()
            .join(",");
        writeln!(w, "featnorm-checkpoint 1")?;
        writeln!(
            w,
            "spec {} [{}] {} {}",
            self.spec.input_dim, hidden, self.spec.feature_dim, self.spec.num_classes
        )?;
        writeln!(w, "seed {}", self.init_seed)?;
        for t in self.parameters() {
            writeln!(w, "tensor {} {}", t.rows(), t.cols())?;
            let vals: Vec<String> = t.data().iter().map(|v| format!("{v:e}")).collect();
            writeln!(w, "{}", vals.join(" "))?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| Error::parse("unexpected end of checkpoint"))?
                .map_err(Error::from)
        };
        if next()?.trim() != "featnorm-checkpoint 1" {
            return Err(Error::parse("missing checkpoint header"));
        }
        let spec_line = next()?;
        let parts: Vec<&str> = spec_line.split_whitespace().collect();
        if parts.len() != 5 || parts[0] != "spec" {
            return Err(Error::parse(format!("bad spec line: {spec_line}")));
        }
        let hidden_str = parts[2].trim_start_matches('[').trim_end_matches(']');
        let hidden_dims = if hidden_str.is_empty() {
            Vec::new()
        } else {
            hidden_str
                .split(',')
                .map(parse_num::<usize>)
                .collect::<Result<Vec<_>>>()?
        };
        let spec = NetworkSpec {
            input_dim: parse_num(parts[1])?,
            hidden_dims,
            feature_dim: parse_num(parts[3])?,
            num_classes: parse_num(parts[4])?,
        };
        spec.validate().map_err(|e| Error::parse(e.to_string()))?;
        let seed_line = next()?;
        let init_seed = seed_line
            .strip_prefix("seed ")
            .ok_or_else(|| Error::parse("missing seed line"))
            .and_then(|s| parse_num(s.trim()))?;

        let mut layers = Vec::new();
        for (fan_in, fan_out) in spec.layer_dims() {
            let weight = read_tensor(&mut next, (fan_in, fan_out))?;
            let bias = read_tensor(&mut next, (1, fan_out))?;
            layers.push(Layer { weight, bias });
        }
        Ok(Self {
            spec,
            init_seed,
            layers,
        })
    }
}

fn read_tensor(next: &mut impl FnMut() -> Result<String>, shape: (usize, usize)) -> Result<Tensor> {
    let header = next()?;
    let dims: Vec<usize> = header
        .strip_prefix("tensor ")
        .ok_or_else(|| Error::parse(format!("expected tensor header, got {header}")))?
        .split_whitespace()
        .map(parse_num)
        .collect::<Result<_>>()?;
    if dims != [shape.0, shape.1] {
        return Err(Error::parse(format!(
            "tensor shape {dims:?} does not match spec {shape:?}"
        )));
    }
    let values = next()?
        .split_whitespace()
        .map(parse_num::<f64>)
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(shape.0, shape.1, values).map_err(|e| Error::parse(e.to_string()))
}

pub(crate) fn parse_num<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::parse(format!("invalid number '{s}'")))
}

/// Parameters of a [`ModelParams`] registered on a tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    layers: Vec<(Var, Var)>,
    extractor_depth: usize,
}

impl BoundModel {
    /// Tape handles in the same order as [`ModelParams::parameters`].
    pub fn parameters(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// `F(x)`: linear layers with ReLU between them, none after the last.
    pub fn forward_features(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, &(w, b)) in self.layers[..self.extractor_depth].iter().enumerate() {
            if i > 0 {
                h = tape.relu(h);
            }
            let z = tape.matmul(h, w)?;
            h = tape.add_bias(z, b)?;
        }
        Ok(h)
    }

    /// `C(f)`: a single linear layer.
    pub fn forward_logits(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let (w, b) = self.layers[self.extractor_depth];
        let z = tape.matmul(features, w)?;
        tape.add_bias(z, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::matmul_raw;
    use crate::gradcheck::{check_gradients, random_tensor};
    use crate::losses::cross_entropy;

    fn spec_2_8_4_3() -> NetworkSpec {
        NetworkSpec::new(2, vec![8], 4, 3)
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let spec = spec_2_8_4_3();
        assert_eq!(init_params(&spec, 1).unwrap(), init_params(&spec, 1).unwrap());
        let a = init_params(&spec, 1).unwrap();
        let b = init_params(&spec, 2).unwrap();
        assert!(a.parameters().iter().zip(b.parameters()).any(|(x, y)| x != &y));
    }

    #[test]
    fn shapes_chain() {
        let p = init_params(&spec_2_8_4_3(), 0).unwrap();
        let shapes: Vec<_> = p.parameters().iter().map(|t| t.shape()).collect();
        assert_eq!(shapes, vec![(2, 8), (1, 8), (8, 4), (1, 4), (4, 3), (1, 3)]);
        for l in &p.layers {
            assert!(l.bias.data().iter().all(|&v| v == 0.0));
            let bound = (6.0 / (l.weight.rows() + l.weight.cols()) as f64).sqrt();
            assert!(l.weight.data().iter().all(|v| v.abs() <= bound));
        }
    }

    #[test]
    fn rejects_zero_dims() {
        assert!(init_params(&NetworkSpec::new(2, vec![0], 4, 3), 0).is_err());
        assert!(init_params(&NetworkSpec::new(0, vec![], 4, 3), 0).is_err());
    }

    #[test]
    fn parameters_are_ordered_and_trainable() {
        let p = init_params(&spec_2_8_4_3(), 0).unwrap();
        assert_eq!(p.parameters().len(), 6);
        assert_eq!(p.parameters(), p.parameters());
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let vars = bound.parameters();
        assert_eq!(vars.len(), 6);
        for (v, t) in vars.iter().zip(p.parameters()) {
            assert!(tape.requires_grad(*v));
            assert_eq!(tape.value(*v), t);
        }
    }

    #[test]
    fn zero_network_gives_zero_features_and_uniform_logits() {
        let mut p = init_params(&spec_2_8_4_3(), 0).unwrap();
        for t in p.parameters_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = Tensor::from_rows(&[[1.0, -2.0], [0.5, 3.0]]);
        assert!(p.features(&x).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(p.logits(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_extractor_reproduces_inputs() {
        let spec = NetworkSpec::new(3, vec![], 3, 2);
        let mut p = init_params(&spec, 0).unwrap();
        p.layers[0].weight = Tensor::identity(3);
        let x = Tensor::from_rows(&[[1.0, -2.0, 0.25], [7.0, 0.0, -1.5]]);
        assert_eq!(p.features(&x).unwrap(), x);
    }

    #[test]
    fn doubling_linear_extractor_doubles_norms() {
        let spec = NetworkSpec::new(3, vec![], 4, 2);
        let p = init_params(&spec, 5).unwrap();
        let mut p2 = p.clone();
        p2.layers[0].weight = p.layers[0].weight.map(|v| 2.0 * v);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&mut rng, 5, 3, 1.0);
        let f1 = p.features(&x).unwrap();
        let f2 = p2.features(&x).unwrap();
        for r in 0..5 {
            let n1: f64 = f1.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            let n2: f64 = f2.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert_eq!(n2, 2.0 * n1);
        }
    }

    #[test]
    fn single_class_head() {
        let p = init_params(&NetworkSpec::new(2, vec![3], 2, 1), 0).unwrap();
        let z = p.logits(&Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]])).unwrap();
        assert_eq!(z.shape(), (2, 1));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let p = init_params(&spec_2_8_4_3(), 0).unwrap();
        assert!(matches!(p.features(&Tensor::zeros(2, 3)), Err(Error::Shape { .. })));
    }

    #[test]
    fn matches_monolithic_forward() {
        let spec = NetworkSpec::new(3, vec![6, 5], 4, 3);
        let p = init_params(&spec, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor(&mut rng, 7, 3, 1.0);
        let mut h = x.clone();
        let depth = spec.extractor_depth();
        for (i, l) in p.layers.iter().enumerate() {
            if i > 0 && i < depth {
                h = h.map(|v| v.max(0.0));
            }
            h = matmul_raw(&h, &l.weight);
            for r in 0..h.rows() {
                for c in 0..h.cols() {
                    h.set(r, c, h.get(r, c) + l.bias.get(0, c));
                }
            }
        }
        assert_eq!(p.logits(&x).unwrap(), h);
    }

    #[test]
    fn end_to_end_cross_entropy_gradient() {
        let spec = NetworkSpec::new(3, vec![5], 4, 3);
        let mut p = init_params(&spec, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for t in p.parameters_mut() {
            if t.rows() == 1 {
                *t = random_tensor(&mut rng, 1, t.cols(), 0.1);
            }
        }
        let x = random_tensor(&mut rng, 6, 3, 1.0);
        let labels = vec![0, 1, 2, 0, 1, 2];
        let inputs: Vec<Tensor> = p.parameters().into_iter().cloned().collect();
        let depth = spec.extractor_depth();
        let err = check_gradients(&inputs, |tape, v| {
            let model = BoundModel {
                layers: v.chunks(2).map(|c| (c[0], c[1])).collect(),
                extractor_depth: depth,
            };
            let xv = tape.constant(x.clone());
            let f = model.forward_features(tape, xv)?;
            let z = model.forward_logits(tape, f)?;
            cross_entropy(tape, z, &labels)
        });
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        for spec in [spec_2_8_4_3(), NetworkSpec::new(4, vec![], 3, 2)] {
            let mut p = init_params(&spec, 123).unwrap();
            p.layers[0].bias.data_mut()[0] = 1.0 / 3.0;
            let mut buf = Vec::new();
            p.write_checkpoint(&mut buf).unwrap();
            let q = ModelParams::read_checkpoint(buf.as_slice()).unwrap();
            assert_eq!(p, q);
        }
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(ModelParams::read_checkpoint("nope\n".as_bytes()).is_err());
    }
}
