//! Network architectures and parameters: plain feedforward stacks, highway
//! layers with tied transform/carry gates, and residual (ungated skip)
//! layers, plus initialization and exact parameter counting.
//!
//! Layer 1 always maps `input_dim -> hidden_dim` as a plain projection;
//! highway and residual connections apply to layers 2..=L where input and
//! output widths match. The two gate weight matrices are shared by all
//! highway layers, so gating costs at most `2n^2` extra parameters.

mod checkpoint;
mod net;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint};
pub use net::{
    backward_network, forward_hidden_layer, forward_network, ForwardTrace, LayerTrace,
};
pub(crate) use net::{forward_network_hooked, ForwardHook};

use serde::{Deserialize, Serialize};

use crate::data::Prng;
use crate::error::{Error, Result};
use crate::linalg::{Activation, Matrix};

/// How a gate behaves. Fixed modes replace the gate with a constant and
/// carry no weights; `Constrained` couples the carry gate to the transform
/// gate as `C = 1 - T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateMode {
    Learned,
    FixedOne,
    FixedZero,
    Constrained,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Plain,
    Highway,
    Residual,
}

/// Architecture description: everything needed to size, initialize and run
/// a network.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_hidden_layers: usize,
    pub output_dim: usize,
    pub layer_kind: LayerKind,
    /// Ignored unless `layer_kind == Highway`.
    pub transform_mode: GateMode,
    /// Ignored unless `layer_kind == Highway`.
    pub carry_mode: GateMode,
    pub activation: Activation,
    pub dropout_rate: f64,
    /// Residual skip length: 1 for per-layer skips, 2 for two-weight-layer
    /// blocks. Ignored unless `layer_kind == Residual`.
    pub residual_span: u8,
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config("all dimensions must be positive".into()));
        }
        if self.num_hidden_layers < 1 {
            return Err(Error::Config("need at least one hidden layer".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.residual_span != 1 && self.residual_span != 2 {
            return Err(Error::Config(format!(
                "residual_span {} must be 1 or 2",
                self.residual_span
            )));
        }
        if self.layer_kind == LayerKind::Highway {
            match self.transform_mode {
                GateMode::Learned | GateMode::FixedOne => {}
                m => {
                    return Err(Error::Config(format!(
                        "transform gate cannot be {m:?}; use learned or fixed-one"
                    )))
                }
            }
            if self.carry_mode == GateMode::Constrained
                && self.transform_mode != GateMode::Learned
            {
                return Err(Error::Config(
                    "constrained carry requires a learned transform gate".into(),
                ));
            }
        }
        Ok(())
    }

    /// True when the model carries a transform gate weight matrix.
    pub fn has_transform_gate(&self) -> bool {
        self.layer_kind == LayerKind::Highway && self.transform_mode == GateMode::Learned
    }

    /// True when the model carries a carry gate weight matrix. The
    /// constrained mode reuses the transform gate and owns no weights.
    pub fn has_carry_gate(&self) -> bool {
        self.layer_kind == LayerKind::Highway && self.carry_mode == GateMode::Learned
    }

    /// Exact number of trainable scalars.
    pub fn count_params(&self) -> u64 {
        let n = self.hidden_dim as u64;
        let l = self.num_hidden_layers as u64;
        let input = self.input_dim as u64;
        let output = self.output_dim as u64;
        let mut count = input * n + (l - 1) * n * n; // layer weights
        count += l * n; // hidden biases
        count += n * output + output; // output layer
        if self.has_transform_gate() {
            count += n * n;
        }
        if self.has_carry_gate() {
            count += n * n;
        }
        count
    }
}

/// Exact number of trainable scalars for the architecture.
pub fn count_params(arch: &ArchSpec) -> u64 {
    arch.count_params()
}

/// Identifies one parameter tensor. The enum order is the canonical field
/// order used for initialization draws, checkpoint layout, optimizer updates
/// and gradient reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamField {
    LayerWeight(usize),
    LayerBias(usize),
    TransformGate,
    CarryGate,
    OutputWeight,
    OutputBias,
}

impl std::fmt::Display for ParamField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParamField::LayerWeight(l) => write!(f, "w{l}"),
            ParamField::LayerBias(l) => write!(f, "b{l}"),
            ParamField::TransformGate => write!(f, "w_t"),
            ParamField::CarryGate => write!(f, "w_c"),
            ParamField::OutputWeight => write!(f, "w_out"),
            ParamField::OutputBias => write!(f, "b_out"),
        }
    }
}

/// All trainable tensors of one network.
///
/// `layer_weights[0]` is `input_dim x n`; deeper layers are `n x n`. The two
/// gate matrices are present only when the architecture learns them, and
/// there is exactly one of each no matter how deep the network is.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layer_weights: Vec<Matrix>,
    pub layer_biases: Vec<Matrix>,
    pub transform_gate: Option<Matrix>,
    pub carry_gate: Option<Matrix>,
    pub output_weight: Matrix,
    pub output_bias: Matrix,
}

impl ModelParams {
    pub fn num_hidden_layers(&self) -> usize {
        self.layer_weights.len()
    }

    /// Tensors in canonical field order: layer weights 1..=L, layer biases
    /// 1..=L, transform gate, carry gate, output weight, output bias.
    pub fn fields(&self) -> Vec<(ParamField, &Matrix)> {
        let mut out = Vec::new();
        for (i, w) in self.layer_weights.iter().enumerate() {
            out.push((ParamField::LayerWeight(i + 1), w));
        }
        for (i, b) in self.layer_biases.iter().enumerate() {
            out.push((ParamField::LayerBias(i + 1), b));
        }
        if let Some(t) = &self.transform_gate {
            out.push((ParamField::TransformGate, t));
        }
        if let Some(c) = &self.carry_gate {
            out.push((ParamField::CarryGate, c));
        }
        out.push((ParamField::OutputWeight, &self.output_weight));
        out.push((ParamField::OutputBias, &self.output_bias));
        out
    }

    pub fn fields_mut(&mut self) -> Vec<(ParamField, &mut Matrix)> {
        let mut out = Vec::new();
        for (i, w) in self.layer_weights.iter_mut().enumerate() {
            out.push((ParamField::LayerWeight(i + 1), w));
        }
        for (i, b) in self.layer_biases.iter_mut().enumerate() {
            out.push((ParamField::LayerBias(i + 1), b));
        }
        if let Some(t) = &mut self.transform_gate {
            out.push((ParamField::TransformGate, t));
        }
        if let Some(c) = &mut self.carry_gate {
            out.push((ParamField::CarryGate, c));
        }
        out.push((ParamField::OutputWeight, &mut self.output_weight));
        out.push((ParamField::OutputBias, &mut self.output_bias));
        out
    }

    pub fn num_scalars(&self) -> u64 {
        self.fields()
            .iter()
            .map(|(_, m)| (m.rows() * m.cols()) as u64)
            .sum()
    }
}

/// Gradient of the loss with respect to every tensor in [`ModelParams`],
/// shape for shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layer_weights: Vec<Matrix>,
    pub layer_biases: Vec<Matrix>,
    pub transform_gate: Option<Matrix>,
    pub carry_gate: Option<Matrix>,
    pub output_weight: Matrix,
    pub output_bias: Matrix,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let zero = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Gradients {
            layer_weights: params.layer_weights.iter().map(zero).collect(),
            layer_biases: params.layer_biases.iter().map(zero).collect(),
            transform_gate: params.transform_gate.as_ref().map(zero),
            carry_gate: params.carry_gate.as_ref().map(zero),
            output_weight: zero(&params.output_weight),
            output_bias: zero(&params.output_bias),
        }
    }

    pub fn fields(&self) -> Vec<(ParamField, &Matrix)> {
        let mut out = Vec::new();
        for (i, w) in self.layer_weights.iter().enumerate() {
            out.push((ParamField::LayerWeight(i + 1), w));
        }
        for (i, b) in self.layer_biases.iter().enumerate() {
            out.push((ParamField::LayerBias(i + 1), b));
        }
        if let Some(t) = &self.transform_gate {
            out.push((ParamField::TransformGate, t));
        }
        if let Some(c) = &self.carry_gate {
            out.push((ParamField::CarryGate, c));
        }
        out.push((ParamField::OutputWeight, &self.output_weight));
        out.push((ParamField::OutputBias, &self.output_bias));
        out
    }

    pub fn fields_mut(&mut self) -> Vec<(ParamField, &mut Matrix)> {
        let mut out = Vec::new();
        for (i, w) in self.layer_weights.iter_mut().enumerate() {
            out.push((ParamField::LayerWeight(i + 1), w));
        }
        for (i, b) in self.layer_biases.iter_mut().enumerate() {
            out.push((ParamField::LayerBias(i + 1), b));
        }
        if let Some(t) = &mut self.transform_gate {
            out.push((ParamField::TransformGate, t));
        }
        if let Some(c) = &mut self.carry_gate {
            out.push((ParamField::CarryGate, c));
        }
        out.push((ParamField::OutputWeight, &mut self.output_weight));
        out.push((ParamField::OutputBias, &mut self.output_bias));
        out
    }
}

/// Draws all weights i.i.d. uniform in [-0.5, 0.5) from the seeded stream
/// and zeroes all biases. Weight tensors are filled row-major in the
/// canonical order: layer 1, layers 2..=L, transform gate, carry gate,
/// output weights. Gate matrices that the architecture does not learn are
/// skipped and consume no draws.
pub fn init_params(arch: &ArchSpec, seed: u64) -> Result<ModelParams> {
    let mut rng = Prng::new(seed);
    init_params_with(arch, &mut rng)
}

/// Same as [`init_params`] but continuing an existing stream.
pub fn init_params_with(arch: &ArchSpec, rng: &mut Prng) -> Result<ModelParams> {
    arch.validate()?;
    let n = arch.hidden_dim;
    let mut draw = |rows: usize, cols: usize| -> Matrix {
        let data = (0..rows * cols).map(|_| rng.uniform(-0.5, 0.5)).collect();
        Matrix::from_vec(rows, cols, data)
    };
    let mut layer_weights = vec![draw(arch.input_dim, n)];
    for _ in 1..arch.num_hidden_layers {
        layer_weights.push(draw(n, n));
    }
    let transform_gate = arch.has_transform_gate().then(|| draw(n, n));
    let carry_gate = arch.has_carry_gate().then(|| draw(n, n));
    let output_weight = draw(n, arch.output_dim);
    let layer_biases = (0..arch.num_hidden_layers)
        .map(|_| Matrix::zeros(1, n))
        .collect();
    Ok(ModelParams {
        layer_weights,
        layer_biases,
        transform_gate,
        carry_gate,
        output_weight,
        output_bias: Matrix::zeros(1, arch.output_dim),
    })
}

/// Row-wise softmax with the max-shift stabilization, so arbitrarily large
/// logits never overflow.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        let mut exps = vec![0.0; row.len()];
        for (e, &z) in exps.iter_mut().zip(row) {
            *e = (z - m).exp();
            sum += *e;
        }
        for (j, e) in exps.into_iter().enumerate() {
            out.set(i, j, e / sum);
        }
    }
    out
}

/// Inverted-scaling dropout: each mask entry is 0 with probability `p`,
/// otherwise `1/(1-p)`, drawn row-major; returns the masked matrix and the
/// mask itself so backward passes can replay it.
pub fn apply_dropout(h: &Matrix, p: f64, rng: &mut Prng) -> Result<(Matrix, Matrix)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
    }
    if p == 0.0 {
        return Ok((h.clone(), Matrix::filled(h.rows(), h.cols(), 1.0)));
    }
    let keep = 1.0 / (1.0 - p);
    let mut mask = Matrix::zeros(h.rows(), h.cols());
    for v in mask.as_mut_slice() {
        *v = if rng.uniform(0.0, 1.0) < p { 0.0 } else { keep };
    }
    let dropped = h.hadamard(&mask)?;
    Ok((dropped, mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_arch(kind: LayerKind) -> ArchSpec {
        ArchSpec {
            input_dim: 3,
            hidden_dim: 4,
            num_hidden_layers: 2,
            output_dim: 2,
            layer_kind: kind,
            transform_mode: GateMode::Learned,
            carry_mode: GateMode::Learned,
            activation: Activation::Sigmoid,
            dropout_rate: 0.0,
            residual_span: 1,
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let arch = small_arch(LayerKind::Highway);
        let a = init_params(&arch, 9).unwrap();
        let b = init_params(&arch, 9).unwrap();
        assert_eq!(a, b);
        for b in &a.layer_biases {
            assert!(b.as_slice().iter().all(|&v| v == 0.0));
        }
        assert!(a.output_bias.as_slice().iter().all(|&v| v == 0.0));
        assert!(a.transform_gate.is_some() && a.carry_gate.is_some());
    }

    #[test]
    fn init_weight_statistics() {
        // ~1e6 weights through a single wide layer.
        let arch = ArchSpec {
            input_dim: 1000,
            hidden_dim: 1000,
            num_hidden_layers: 1,
            output_dim: 2,
            layer_kind: LayerKind::Plain,
            transform_mode: GateMode::Learned,
            carry_mode: GateMode::Learned,
            activation: Activation::Sigmoid,
            dropout_rate: 0.0,
            residual_span: 1,
        };
        let p = init_params(&arch, 123).unwrap();
        let w = p.layer_weights[0].as_slice();
        let mean: f64 = w.iter().sum::<f64>() / w.len() as f64;
        let min = w.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(mean.abs() < 0.002, "mean {mean}");
        assert!(min >= -0.5);
        assert!(max < 0.5);
    }

    #[test]
    fn gate_presence_follows_modes() {
        let mut arch = small_arch(LayerKind::Highway);
        arch.transform_mode = GateMode::FixedOne;
        arch.carry_mode = GateMode::Constrained;
        assert!(arch.validate().is_err()); // constrained needs learned transform

        arch.transform_mode = GateMode::Learned;
        let p = init_params(&arch, 1).unwrap();
        assert!(p.transform_gate.is_some());
        assert!(p.carry_gate.is_none()); // constrained carry owns no weights

        let plain = small_arch(LayerKind::Plain);
        let p = init_params(&plain, 1).unwrap();
        assert!(p.transform_gate.is_none() && p.carry_gate.is_none());
    }

    #[test]
    fn transform_mode_rejects_fixed_zero() {
        let mut arch = small_arch(LayerKind::Highway);
        arch.transform_mode = GateMode::FixedZero;
        assert!(arch.validate().is_err());
    }

    #[test]
    fn count_params_examples() {
        let mut arch = ArchSpec {
            input_dim: 3,
            hidden_dim: 4,
            num_hidden_layers: 1,
            output_dim: 2,
            layer_kind: LayerKind::Plain,
            transform_mode: GateMode::Learned,
            carry_mode: GateMode::Learned,
            activation: Activation::Sigmoid,
            dropout_rate: 0.0,
            residual_span: 1,
        };
        assert_eq!(count_params(&arch), 26);

        arch = ArchSpec {
            input_dim: 600,
            hidden_dim: 1024,
            num_hidden_layers: 10,
            output_dim: 3972,
            layer_kind: LayerKind::Highway,
            ..arch
        };
        assert_eq!(count_params(&arch), 16_230_276);

        arch.layer_kind = LayerKind::Plain;
        arch.hidden_dim = 2048;
        arch.num_hidden_layers = 6;
        assert_eq!(count_params(&arch), 30_351_236);

        arch.layer_kind = LayerKind::Highway;
        arch.hidden_dim = 512;
        arch.num_hidden_layers = 10;
        arch.carry_mode = GateMode::Constrained;
        assert_eq!(count_params(&arch), 4_971_396);
        arch.carry_mode = GateMode::Learned;
        assert_eq!(count_params(&arch), 5_233_540);
    }

    #[test]
    fn gate_overhead_is_exactly_quadratic() {
        for n in [3usize, 16, 64] {
            let mut arch = small_arch(LayerKind::Plain);
            arch.hidden_dim = n;
            arch.num_hidden_layers = 4;
            let plain = count_params(&arch);
            arch.layer_kind = LayerKind::Highway;
            let highway = count_params(&arch);
            assert_eq!(highway - plain, 2 * (n * n) as u64);
            arch.carry_mode = GateMode::Constrained;
            assert_eq!(count_params(&arch) - plain, (n * n) as u64);
        }
    }

    #[test]
    fn softmax_basics() {
        let m = softmax(&Matrix::from_rows(&[&[0.0, 0.0]]));
        assert_eq!(m.as_slice(), &[0.5, 0.5]);

        for c in [-7.5, 0.0, 3e4] {
            let m = softmax(&Matrix::from_rows(&[&[c, c, c]]));
            for &v in m.as_slice() {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }

        let m = softmax(&Matrix::from_rows(&[&[1000.0, 0.0]]));
        assert_eq!(m.get(0, 0), 1.0);
        assert!(m.get(0, 1).abs() < 1e-300);
        assert!(m.as_slice().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_match_log_space_oracle() {
        let mut rng = Prng::new(6);
        let data: Vec<f64> = (0..40).map(|_| rng.uniform(-30.0, 30.0)).collect();
        let logits = Matrix::from_vec(5, 8, data);
        let probs = softmax(&logits);
        for i in 0..5 {
            let sum: f64 = probs.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            // Independent log-space route: exp(z - m - ln(sum(exp(z - m)))).
            let row = logits.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
            for (j, &z) in row.iter().enumerate() {
                let oracle = (z - m - lse).exp();
                assert!((probs.get(i, j) - oracle).abs() < 1e-15);
                assert!(probs.get(i, j) > 0.0 && probs.get(i, j) < 1.0);
            }
        }
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let mut rng = Prng::new(3);
        let h = Matrix::from_rows(&[&[1.0, -2.0], &[0.5, 4.0]]);
        let (out, mask) = apply_dropout(&h, 0.0, &mut rng).unwrap();
        assert_eq!(out, h);
        assert!(mask.as_slice().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn dropout_scales_survivors_exactly() {
        let mut rng = Prng::new(8);
        let h = Matrix::filled(20, 20, 3.0);
        let p = 0.3;
        let (out, mask) = apply_dropout(&h, p, &mut rng).unwrap();
        for (&o, &m) in out.as_slice().iter().zip(mask.as_slice()) {
            assert!(o == 0.0 || o == 3.0 / (1.0 - p));
            assert!(m == 0.0 || m == 1.0 / (1.0 - p));
        }
        assert!(apply_dropout(&h, 1.0, &mut rng).is_err());
    }

    #[test]
    fn dropout_zeroed_fraction_concentrates() {
        let mut rng = Prng::new(21);
        let h = Matrix::filled(1000, 1000, 1.0);
        let (_, mask) = apply_dropout(&h, 0.5, &mut rng).unwrap();
        let zeroed = mask.as_slice().iter().filter(|&&v| v == 0.0).count();
        let frac = zeroed as f64 / 1e6;
        assert!((frac - 0.5).abs() < 0.002, "zeroed fraction {frac}");
    }
}
