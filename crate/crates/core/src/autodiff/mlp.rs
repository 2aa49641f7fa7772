use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::graph::{Graph, Gradients, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub type Rng = ChaCha8Rng;

pub fn seed_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub const DEFAULT_SLOPE: f64 = 0.01;

/// Fully connected network shape. Hidden layers use a leaky rectifier with
/// negative slope `slope`; the last layer is linear.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub slope: f64,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        let spec = Self {
            layer_sizes,
            slope: DEFAULT_SLOPE,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 || self.layer_sizes.contains(&0) {
            return Err(Error::Config(format!(
                "MLP needs at least two positive layer sizes, got {:?}",
                self.layer_sizes
            )));
        }
        if !(self.slope > 0.0 && self.slope < 1.0) {
            return Err(Error::Config(format!("leaky slope {} outside (0,1)", self.slope)));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_sizes.last().expect("validated")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `fan_in x fan_out`.
    pub weight: Tensor,
    /// `1 x fan_out`.
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<Linear>,
}

/// Parameter leaves of an [`Mlp`] registered on a graph.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    vars: Vec<Var>,
}

impl BoundMlp {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Mlp {
    /// All weights and biases zero.
    pub fn zeros(spec: MlpSpec) -> Self {
        let layers = spec
            .layer_sizes
            .windows(2)
            .map(|w| Linear {
                weight: Tensor::zeros(w[0], w[1]),
                bias: Tensor::zeros(1, w[1]),
            })
            .collect();
        Self { spec, layers }
    }

    /// Weights drawn from `N(0, 1/fan_in)`, biases zero.
    pub fn gaussian(spec: MlpSpec, rng: &mut Rng) -> Self {
        let mut mlp = Self::zeros(spec);
        for layer in &mut mlp.layers {
            let scale = 1.0 / (layer.weight.rows() as f64).sqrt();
            for w in layer.weight.data_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *w = z * scale;
            }
        }
        mlp
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameters in a fixed order: `w0, b0, w1, b1, ...`.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn bind(&self, g: &mut Graph) -> BoundMlp {
        BoundMlp {
            vars: self.params().into_iter().map(|t| g.leaf(t.clone())).collect(),
        }
    }

    /// Bind parameters as constants (no gradient).
    pub fn bind_frozen(&self, g: &mut Graph) -> BoundMlp {
        BoundMlp {
            vars: self.params().into_iter().map(|t| g.constant(t.clone())).collect(),
        }
    }

    fn check_input(&self, shape: (usize, usize)) -> Result<()> {
        if shape.1 != self.spec.input_width() {
            return Err(Error::Shape {
                op: "mlp_forward",
                lhs: shape,
                rhs: (1, self.spec.input_width()),
            });
        }
        Ok(())
    }

    /// Recorded forward pass over the rows of `x`.
    pub fn forward_graph(&self, bound: &BoundMlp, g: &mut Graph, x: Var) -> Result<Var> {
        self.check_input(g.shape(x))?;
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, pair) in bound.vars.chunks(2).enumerate() {
            h = g.matmul(h, pair[0])?;
            h = g.add(h, pair[1])?;
            if i < last {
                h = g.leaky_relu(h, self.spec.slope)?;
            }
        }
        Ok(h)
    }

    /// Unrecorded forward pass.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x.shape())?;
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let slope = (i < last).then_some(self.spec.slope);
            h = h.affine(&l.weight, &l.bias, slope)?;
        }
        Ok(h)
    }

    pub fn grads(&self, bound: &BoundMlp, grads: &Gradients) -> Vec<Tensor> {
        bound
            .vars
            .iter()
            .zip(self.params())
            .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
            .collect()
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("{prefix}.{i}.weight"), l.weight.clone()),
                    (format!("{prefix}.{i}.bias"), l.bias.clone()),
                ]
            })
            .collect()
    }

    /// Overwrite parameters from `(name, tensor)` records written by
    /// [`Mlp::named_params`] with the same prefix.
    pub fn load_named(&mut self, prefix: &str, records: &[(String, Tensor)]) -> Result<()> {
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (suffix, slot) in [("weight", &mut l.weight), ("bias", &mut l.bias)] {
                let name = format!("{prefix}.{i}.{suffix}");
                let (_, t) = records
                    .iter()
                    .find(|(n, _)| *n == name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing record {name}")))?;
                if t.shape() != slot.shape() {
                    return Err(Error::Checkpoint(format!(
                        "record {name} has shape {:?}, expected {:?}",
                        t.shape(),
                        slot.shape()
                    )));
                }
                *slot = t.clone();
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn spec(sizes: &[usize]) -> MlpSpec {
        MlpSpec::new(sizes.to_vec()).unwrap()
    }

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(vec![3]).is_err());
        assert!(MlpSpec::new(vec![3, 0]).is_err());
        let mut s = spec(&[2, 2]);
        s.slope = 1.5;
        assert!(s.validate().is_err());
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mlp = Mlp::zeros(spec(&[4, 8, 2]));
        let x = Tensor::new(2, 4, vec![1., 2., 3., 4., -1., 0., 0.5, 9.]).unwrap();
        assert!(mlp.forward(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_single_layer() {
        let mut mlp = Mlp::zeros(spec(&[3, 3]));
        mlp.layers[0].weight = Tensor::identity(3);
        let x = Tensor::new(1, 3, vec![0.5, -2.0, 7.0]).unwrap();
        assert_eq!(mlp.forward(&x).unwrap(), x);
    }

    #[test]
    fn width_mismatch() {
        let mlp = Mlp::zeros(spec(&[3, 2]));
        assert!(mlp.forward(&Tensor::zeros(1, 4)).is_err());
    }

    #[test]
    fn matches_straight_line_recomputation() {
        let mut rng = seed_rng(11);
        let mlp = Mlp::gaussian(spec(&[4, 8, 2]), &mut rng);
        let input: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        // Independent recomputation with explicit loops.
        let layer = |x: &[f64], l: &Linear, act: bool| -> Vec<f64> {
            (0..l.weight.cols())
                .map(|j| {
                    let mut s = l.bias.get(0, j);
                    for (i, xi) in x.iter().enumerate() {
                        s += xi * l.weight.get(i, j);
                    }
                    if act && s < 0.0 {
                        0.01 * s
                    } else {
                        s
                    }
                })
                .collect()
        };
        let h = layer(&input, &mlp.layers[0], true);
        let expected = layer(&h, &mlp.layers[1], false);
        let got = mlp.forward(&Tensor::row(input.clone())).unwrap();
        for (a, b) in got.data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut g = Graph::new();
        let b = mlp.bind(&mut g);
        let x = g.constant(Tensor::row(input));
        let y = mlp.forward_graph(&b, &mut g, x).unwrap();
        assert_eq!(g.value(y), &got);
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let a = Mlp::gaussian(spec(&[5, 7, 3]), &mut seed_rng(3));
        let b = Mlp::gaussian(spec(&[5, 7, 3]), &mut seed_rng(3));
        let c = Mlp::gaussian(spec(&[5, 7, 3]), &mut seed_rng(4));
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.layers.iter().all(|l| l.bias.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn init_variance_scales_with_fan_in() {
        // 256 x 400 = 102400 weights.
        let mlp = Mlp::gaussian(spec(&[256, 400]), &mut seed_rng(9));
        let w = mlp.layers[0].weight.data();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!((var * 256.0 - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = seed_rng(5);
        let mut mlp = Mlp::gaussian(spec(&[3, 6, 6, 2]), &mut rng);
        for p in mlp.params_mut() {
            for v in p.data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        let x = Tensor::new(2, 3, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let loss_of = |m: &Mlp| -> f64 {
            let y = m.forward(&x).unwrap();
            y.data().iter().map(|v| v * v).sum::<f64>() / 4.0
        };
        let mut g = Graph::new();
        let b = mlp.bind(&mut g);
        let xv = g.constant(x.clone());
        let y = mlp.forward_graph(&b, &mut g, xv).unwrap();
        let sq = g.square(y).unwrap();
        let loss = g.mean(sq).unwrap();
        let grads = mlp.grads(&b, &g.backward(loss).unwrap());
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for pi in 0..grads.len() {
            for k in 0..grads[pi].len() {
                let mut plus = mlp.clone();
                plus.params_mut()[pi].data_mut()[k] += h;
                let mut minus = mlp.clone();
                minus.params_mut()[pi].data_mut()[k] -= h;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let ad = grads[pi].data()[k];
                worst = worst.max((ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-4));
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }
}
