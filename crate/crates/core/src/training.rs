//! Cross-entropy training: SGD with the delayed momentum schedule, the epoch
//! loop, and CE/FER evaluation.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{minibatches, Prng};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{
    backward_network, forward_network, init_params, ArchSpec, Gradients, ModelParams,
};

/// Learning-rate schedule: fixed, or halved whenever validation CE worsens
/// relative to the previous epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrHalving {
    Off,
    HalveWhenValidCeWorsens,
}

/// Optimizer hyperparameters for one training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Momentum used from epoch 2 on; epoch 1 always runs without momentum.
    pub momentum_after_first_epoch: f64,
    pub batch_size: usize,
    pub num_epochs: usize,
    pub seed: u64,
    pub lr_halving: LrHalving,
    /// Forwarded into the architecture for the training forward passes.
    pub dropout_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            momentum_after_first_epoch: 0.9,
            batch_size: 128,
            num_epochs: 20,
            seed: 1,
            lr_halving: LrHalving::Off,
            dropout_rate: 0.0,
        }
    }
}

/// Momentum accumulator, shape-mirroring the parameters.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    velocity: Gradients,
}

impl OptimizerState {
    pub fn zeros_like(params: &ModelParams) -> Self {
        OptimizerState {
            velocity: Gradients::zeros_like(params),
        }
    }
}

/// Metrics for one finished epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_ce: f64,
    pub valid_ce: f64,
    pub valid_fer: f64,
    pub seconds: f64,
}

/// A spliced feature matrix with one label per row; the form training and
/// evaluation consume.
#[derive(Debug, Clone)]
pub struct LabeledFrames {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl LabeledFrames {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Data(format!(
                "{} labels for {} feature rows",
                labels.len(),
                features.rows()
            )));
        }
        Ok(LabeledFrames { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Mean negative log-probability of the target classes. Probabilities are
/// clamped below at 1e-300 before the log.
pub fn cross_entropy(probs: &Matrix, targets: &[usize]) -> Result<f64> {
    if probs.rows() != targets.len() {
        return Err(Error::Data(format!(
            "{} targets for {} probability rows",
            targets.len(),
            probs.rows()
        )));
    }
    let mut sum = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t >= probs.cols() {
            return Err(Error::LabelOutOfRange {
                frame: r,
                label: t as u64,
                num_classes: probs.cols(),
            });
        }
        sum += -(probs.get(r, t).max(1e-300)).ln();
    }
    Ok(sum / targets.len() as f64)
}

/// 0 for the first epoch, the configured momentum afterwards.
pub fn momentum_for_epoch(epoch: usize, momentum_after_first_epoch: f64) -> f64 {
    assert!(epoch >= 1, "epochs are 1-based");
    if epoch == 1 {
        0.0
    } else {
        momentum_after_first_epoch
    }
}

/// Classical momentum update, applied tensor by tensor in canonical field
/// order: `v <- mu*v - lr*g; theta <- theta + v`.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut OptimizerState,
    lr: f64,
    mu: f64,
) -> Result<()> {
    let mut p_fields = params.fields_mut();
    let g_fields = grads.fields();
    let mut v_fields = state.velocity.fields_mut();
    if p_fields.len() != g_fields.len() || p_fields.len() != v_fields.len() {
        return Err(Error::Config(
            "gradient or velocity fields do not mirror the parameters".into(),
        ));
    }
    for ((pf, gf), vf) in p_fields.iter_mut().zip(&g_fields).zip(v_fields.iter_mut()) {
        if pf.0 != gf.0 || pf.0 != vf.0 || pf.1.shape() != gf.1.shape() {
            return Err(Error::shape("sgd_step", pf.1.shape(), gf.1.shape()));
        }
        let p = pf.1.as_mut_slice();
        let g = gf.1.as_slice();
        let v = vf.1.as_mut_slice();
        for i in 0..p.len() {
            v[i] = mu * v[i] - lr * g[i];
            p[i] += v[i];
        }
    }
    Ok(())
}

/// Mean CE and frame error rate of the model on a dataset, dropout inactive.
/// The argmax tie-break goes to the lowest class index. Frames are processed
/// in fixed-size chunks in order, so the result is independent of chunking.
pub fn evaluate(params: &ModelParams, arch: &ArchSpec, frames: &LabeledFrames) -> Result<(f64, f64)> {
    const CHUNK: usize = 512;
    if frames.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    if frames.features.cols() != arch.input_dim {
        return Err(Error::shape(
            "evaluate",
            frames.features.shape(),
            (frames.features.rows(), arch.input_dim),
        ));
    }
    let n = frames.len();
    let mut sum_nll = 0.0;
    let mut errors = 0usize;
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let chunk = frames.features.slice_rows(start, end);
        let (probs, _) = forward_network(params, arch, &chunk, false, None)?;
        for r in 0..probs.rows() {
            let t = frames.labels[start + r];
            if t >= arch.output_dim {
                return Err(Error::LabelOutOfRange {
                    frame: start + r,
                    label: t as u64,
                    num_classes: arch.output_dim,
                });
            }
            sum_nll += -(probs.get(r, t).max(1e-300)).ln();
            if probs.argmax_row(r) != t {
                errors += 1;
            }
        }
        start = end;
    }
    Ok((sum_nll / n as f64, errors as f64 / n as f64))
}

// Decorrelates the trainer's epoch seeds from the init stream, which also
// starts at config.seed.
const TRAINER_STREAM_SALT: u64 = 0x517C_C1B7_2722_0A95;

/// Runs the full training loop: per epoch, a seeded reshuffle into
/// minibatches (the final short batch included), forward/backward/update
/// with the epoch's momentum, then evaluation of both sets. Deterministic
/// given the config, architecture and data.
pub fn run_training(
    arch: &ArchSpec,
    train: &LabeledFrames,
    valid: &LabeledFrames,
    config: &TrainConfig,
) -> Result<(Vec<EpochReport>, ModelParams)> {
    let mut arch = arch.clone();
    arch.dropout_rate = config.dropout_rate;
    arch.validate()?;
    if config.batch_size < 1 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&config.momentum_after_first_epoch) {
        return Err(Error::Config(format!(
            "momentum {} outside [0, 1)",
            config.momentum_after_first_epoch
        )));
    }
    if config.learning_rate < 0.0 {
        return Err(Error::Config("learning_rate must not be negative".into()));
    }
    for (name, set) in [("training", train), ("validation", valid)] {
        if set.is_empty() {
            return Err(Error::Data(format!("{name} set is empty")));
        }
        if set.features.cols() != arch.input_dim {
            return Err(Error::Config(format!(
                "{name} feature dim {} does not match input_dim {}",
                set.features.cols(),
                arch.input_dim
            )));
        }
        if let Some(&bad) = set.labels.iter().find(|&&l| l >= arch.output_dim) {
            return Err(Error::Config(format!(
                "{name} label {bad} out of range for output_dim {}",
                arch.output_dim
            )));
        }
    }

    let mut params = init_params(&arch, config.seed)?;
    let mut state = OptimizerState::zeros_like(&params);
    let mut lr = config.learning_rate;
    let mut seq = Prng::new(config.seed.wrapping_add(TRAINER_STREAM_SALT));
    let mut reports: Vec<EpochReport> = Vec::with_capacity(config.num_epochs);

    for epoch in 1..=config.num_epochs {
        let started = Instant::now();
        let shuffle_seed = seq.next_u64();
        let dropout_seed = seq.next_u64();
        let mut dropout_rng = Prng::new(dropout_seed);
        let mu = momentum_for_epoch(epoch, config.momentum_after_first_epoch);

        for (batch, targets) in
            minibatches(&train.features, &train.labels, config.batch_size, shuffle_seed)
        {
            let (_, trace) =
                forward_network(&params, &arch, &batch, true, Some(&mut dropout_rng))?;
            let grads = backward_network(&params, &arch, &trace, &targets)?;
            sgd_step(&mut params, &grads, &mut state, lr, mu)?;
        }

        let (train_ce, _) = evaluate(&params, &arch, train)?;
        let (valid_ce, valid_fer) = evaluate(&params, &arch, valid)?;
        if config.lr_halving == LrHalving::HalveWhenValidCeWorsens {
            if let Some(prev) = reports.last() {
                if valid_ce > prev.valid_ce {
                    lr *= 0.5;
                }
            }
        }
        reports.push(EpochReport {
            epoch,
            train_ce,
            valid_ce,
            valid_fer,
            seconds: started.elapsed().as_secs_f64(),
        });
    }

    Ok((reports, params))
}

/// Renders the training log CSV: header then one row per epoch, CE and FER
/// with six decimals.
pub fn format_log_csv(reports: &[EpochReport]) -> String {
    let mut out = String::from("epoch,train_ce,valid_ce,valid_fer,seconds\n");
    for r in reports {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.3}\n",
            r.epoch, r.train_ce, r.valid_ce, r.valid_fer, r.seconds
        ));
    }
    out
}

pub fn write_log_csv(path: &Path, reports: &[EpochReport]) -> Result<()> {
    fs::write(path, format_log_csv(reports))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, splice, split_at, SpliceConfig};
    use crate::linalg::Activation;
    use crate::model::{GateMode, LayerKind};

    fn toy_sets() -> (LabeledFrames, LabeledFrames) {
        let ds = generate_synthetic(5, 4, 500, 4.0, 0.2, 314).unwrap();
        let (train, valid) = split_at(&ds, 400).unwrap();
        let cfg = SpliceConfig { context: 1 };
        (
            LabeledFrames::new(splice(&train, &cfg), train.labels.clone()).unwrap(),
            LabeledFrames::new(splice(&valid, &cfg), valid.labels.clone()).unwrap(),
        )
    }

    fn toy_arch(kind: LayerKind) -> ArchSpec {
        ArchSpec {
            input_dim: 12,
            hidden_dim: 8,
            num_hidden_layers: 3,
            output_dim: 5,
            layer_kind: kind,
            transform_mode: GateMode::Learned,
            carry_mode: GateMode::Learned,
            activation: Activation::Sigmoid,
            dropout_rate: 0.0,
            residual_span: 1,
        }
    }

    #[test]
    fn cross_entropy_hand_values() {
        let p = Matrix::from_rows(&[&[0.5, 0.5]]);
        let ce = cross_entropy(&p, &[0]).unwrap();
        assert!((ce - std::f64::consts::LN_2).abs() < 1e-12);

        let p = Matrix::from_rows(&[&[0.0, 1.0]]);
        assert_eq!(cross_entropy(&p, &[1]).unwrap(), 0.0);

        let p = Matrix::from_rows(&[&[0.25, 0.75], &[0.5, 0.5]]);
        let ce = cross_entropy(&p, &[1, 0]).unwrap();
        let expect = (-(0.75f64.ln()) + std::f64::consts::LN_2) / 2.0;
        assert!((ce - expect).abs() < 1e-12);
        assert!((ce - 0.490415).abs() < 1e-6);

        assert!(cross_entropy(&p, &[2, 0]).is_err());
        // Clamp keeps the loss finite even for a zero probability.
        let p = Matrix::from_rows(&[&[0.0, 1.0]]);
        assert!(cross_entropy(&p, &[0]).unwrap().is_finite());
    }

    #[test]
    fn momentum_schedule() {
        assert_eq!(momentum_for_epoch(1, 0.9), 0.0);
        assert_eq!(momentum_for_epoch(2, 0.9), 0.9);
        assert_eq!(momentum_for_epoch(100, 0.9), 0.9);
        assert_eq!(momentum_for_epoch(1, 0.5), 0.0);
    }

    /// Two-step hand trace of the update recurrence: theta0=1, g=1, lr=0.1
    /// gives 0.9 after the epoch-1 step and 0.71 after the epoch-2 step.
    #[test]
    fn sgd_two_step_hand_trace() {
        let mut arch = toy_arch(LayerKind::Plain);
        arch.input_dim = 1;
        arch.hidden_dim = 1;
        arch.num_hidden_layers = 1;
        arch.output_dim = 1;
        let mut params = init_params(&arch, 0).unwrap();
        for (_, m) in params.fields_mut() {
            for v in m.as_mut_slice() {
                *v = 1.0;
            }
        }
        let mut ones = Gradients::zeros_like(&params);
        for (_, m) in ones.fields_mut() {
            for v in m.as_mut_slice() {
                *v = 1.0;
            }
        }
        let mut state = OptimizerState::zeros_like(&params);
        sgd_step(&mut params, &ones, &mut state, 0.1, momentum_for_epoch(1, 0.9)).unwrap();
        assert_eq!(params.output_bias.get(0, 0), 0.9);
        sgd_step(&mut params, &ones, &mut state, 0.1, momentum_for_epoch(2, 0.9)).unwrap();
        assert_eq!(params.output_bias.get(0, 0), 0.71);
    }

    #[test]
    fn sgd_zero_gradient_is_a_fixed_point() {
        let arch = toy_arch(LayerKind::Highway);
        let mut params = init_params(&arch, 5).unwrap();
        let before = params.clone();
        let zeros = Gradients::zeros_like(&params);
        let mut state = OptimizerState::zeros_like(&params);
        sgd_step(&mut params, &zeros, &mut state, 0.1, 0.9).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn training_is_deterministic() {
        let (train, valid) = toy_sets();
        let arch = toy_arch(LayerKind::Highway);
        let config = TrainConfig {
            num_epochs: 3,
            batch_size: 32,
            ..TrainConfig::default()
        };
        let (r1, p1) = run_training(&arch, &train, &valid, &config).unwrap();
        let (r2, p2) = run_training(&arch, &train, &valid, &config).unwrap();
        assert_eq!(p1, p2);
        for (a, b) in r1.iter().zip(&r2) {
            assert_eq!(a.train_ce.to_bits(), b.train_ce.to_bits());
            assert_eq!(a.valid_ce.to_bits(), b.valid_ce.to_bits());
            assert_eq!(a.valid_fer.to_bits(), b.valid_fer.to_bits());
        }
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let (train, valid) = toy_sets();
        let arch = toy_arch(LayerKind::Plain);
        let config = TrainConfig {
            learning_rate: 0.0,
            num_epochs: 2,
            batch_size: 64,
            ..TrainConfig::default()
        };
        let (_, params) = run_training(&arch, &train, &valid, &config).unwrap();
        assert_eq!(params, init_params(&arch, config.seed).unwrap());
    }

    #[test]
    fn training_ce_decreases_on_toy_task() {
        let (train, valid) = toy_sets();
        for kind in [LayerKind::Plain, LayerKind::Highway, LayerKind::Residual] {
            let arch = toy_arch(kind);
            let mut wins = 0;
            for seed in 1..=5 {
                let config = TrainConfig {
                    learning_rate: 1e-3,
                    batch_size: train.len(),
                    num_epochs: 5,
                    seed,
                    ..TrainConfig::default()
                };
                let (reports, _) = run_training(&arch, &train, &valid, &config).unwrap();
                let monotone = reports.windows(2).all(|w| w[1].train_ce <= w[0].train_ce);
                if monotone {
                    wins += 1;
                }
            }
            assert!(wins >= 4, "{kind:?}: only {wins}/5 seeds non-increasing");
        }
    }

    #[test]
    fn evaluate_matches_loop_oracle_and_tie_breaks_low() {
        let (train, _) = toy_sets();
        let arch = toy_arch(LayerKind::Highway);
        let params = init_params(&arch, 17).unwrap();
        let (ce, fer) = evaluate(&params, &arch, &train).unwrap();

        // Independent scorer: full forward in one piece, per-row loops.
        let (probs, _) = forward_network(&params, &arch, &train.features, false, None).unwrap();
        let mut nll = 0.0;
        let mut errors = 0;
        for r in 0..probs.rows() {
            let t = train.labels[r];
            nll += -(probs.get(r, t).max(1e-300)).ln();
            let mut best = 0;
            for j in 1..probs.cols() {
                if probs.get(r, j) > probs.get(r, best) {
                    best = j;
                }
            }
            if best != t {
                errors += 1;
            }
        }
        assert_eq!(ce.to_bits(), (nll / probs.rows() as f64).to_bits());
        assert_eq!(fer, errors as f64 / probs.rows() as f64);

        // Uniform probabilities, labels all 1: argmax ties break to 0.
        let mut zero_arch = toy_arch(LayerKind::Plain);
        zero_arch.input_dim = 2;
        zero_arch.output_dim = 2;
        zero_arch.num_hidden_layers = 1;
        let mut zp = init_params(&zero_arch, 0).unwrap();
        for (_, m) in zp.fields_mut() {
            for v in m.as_mut_slice() {
                *v = 0.0;
            }
        }
        let frames = LabeledFrames::new(Matrix::filled(4, 2, 0.3), vec![1; 4]).unwrap();
        let (_, fer) = evaluate(&zp, &zero_arch, &frames).unwrap();
        assert_eq!(fer, 1.0);

        let empty = LabeledFrames {
            features: Matrix::zeros(1, 12),
            labels: vec![],
        };
        assert!(evaluate(&params, &arch, &empty).is_err());
    }

    #[test]
    fn mismatched_dimensions_rejected_before_epoch_one() {
        let (train, valid) = toy_sets();
        let mut arch = toy_arch(LayerKind::Plain);
        arch.input_dim = 99;
        let config = TrainConfig::default();
        assert!(run_training(&arch, &train, &valid, &config).is_err());
    }

    #[test]
    fn log_csv_format() {
        let reports = vec![EpochReport {
            epoch: 1,
            train_ce: 1.23456789,
            valid_ce: 2.0,
            valid_fer: 0.5,
            seconds: 3.14159,
        }];
        let csv = format_log_csv(&reports);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "epoch,train_ce,valid_ce,valid_fer,seconds");
        assert_eq!(lines.next().unwrap(), "1,1.234568,2.000000,0.500000,3.142");
        assert!(lines.next().is_none());
    }
}
