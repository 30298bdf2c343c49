//! Configuration file handling and the command implementations behind the
//! `hdnn` binary. Everything here returns `Result` so callers (the binary,
//! the C API) decide how to report and exit.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    generate_synthetic, read_dataset, splice, split_at, write_dataset, FrameDataset, SpliceConfig,
};
use crate::error::{Error, Result};
use crate::linalg::Activation;
use crate::model::{
    read_checkpoint, write_checkpoint, ArchSpec, GateMode, LayerKind, ModelParams,
};
use crate::training::{
    evaluate, run_training, write_log_csv, EpochReport, LabeledFrames, LrHalving, TrainConfig,
};

/// Raw training configuration as read from JSON. Unknown keys are rejected;
/// missing keys fall back to the documented defaults.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub train_data: Option<String>,
    pub valid_data: Option<String>,
    pub out_dir: Option<String>,
    pub context: Option<usize>,
    pub input_dim: Option<usize>,
    pub output_dim: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub num_hidden_layers: Option<usize>,
    pub layer_kind: Option<LayerKind>,
    pub transform_mode: Option<GateMode>,
    pub carry_mode: Option<GateMode>,
    pub activation: Option<Activation>,
    pub dropout_rate: Option<f64>,
    pub residual_span: Option<u8>,
    pub learning_rate: Option<f64>,
    pub momentum_after_first_epoch: Option<f64>,
    pub batch_size: Option<usize>,
    pub num_epochs: Option<usize>,
    pub seed: Option<u64>,
    pub lr_halving: Option<LrHalving>,
}

/// Fully resolved configuration: every default filled in. Serialized as the
/// `resolved_config.json` run record, which can be fed back to `train` to
/// reproduce the identical run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResolvedConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_data: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid_data: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
    pub context: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dim: Option<usize>,
    pub hidden_dim: usize,
    pub num_hidden_layers: usize,
    pub layer_kind: LayerKind,
    pub transform_mode: GateMode,
    pub carry_mode: GateMode,
    pub activation: Activation,
    pub dropout_rate: f64,
    pub residual_span: u8,
    pub learning_rate: f64,
    pub momentum_after_first_epoch: f64,
    pub batch_size: usize,
    pub num_epochs: usize,
    pub seed: u64,
    pub lr_halving: LrHalving,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)?;
        RunConfig::from_json(&text)
    }

    /// Fills in the documented defaults.
    pub fn resolve(self) -> ResolvedConfig {
        ResolvedConfig {
            train_data: self.train_data,
            valid_data: self.valid_data,
            out_dir: self.out_dir,
            context: self.context.unwrap_or(3),
            input_dim: self.input_dim,
            output_dim: self.output_dim,
            hidden_dim: self.hidden_dim.unwrap_or(32),
            num_hidden_layers: self.num_hidden_layers.unwrap_or(8),
            layer_kind: self.layer_kind.unwrap_or(LayerKind::Highway),
            transform_mode: self.transform_mode.unwrap_or(GateMode::Learned),
            carry_mode: self.carry_mode.unwrap_or(GateMode::Learned),
            activation: self.activation.unwrap_or(Activation::Sigmoid),
            dropout_rate: self.dropout_rate.unwrap_or(0.0),
            residual_span: self.residual_span.unwrap_or(1),
            learning_rate: self.learning_rate.unwrap_or(0.1),
            momentum_after_first_epoch: self.momentum_after_first_epoch.unwrap_or(0.9),
            batch_size: self.batch_size.unwrap_or(128),
            num_epochs: self.num_epochs.unwrap_or(20),
            seed: self.seed.unwrap_or(1),
            lr_halving: self.lr_halving.unwrap_or(LrHalving::Off),
        }
    }
}

impl ResolvedConfig {
    /// The architecture this config describes. `input_dim`/`output_dim`
    /// must be present (explicitly or derived from data by the caller).
    pub fn arch(&self) -> Result<ArchSpec> {
        let input_dim = self
            .input_dim
            .ok_or_else(|| Error::Config("input_dim is not set and no dataset provides it".into()))?;
        let output_dim = self
            .output_dim
            .ok_or_else(|| Error::Config("output_dim is not set and no dataset provides it".into()))?;
        let arch = ArchSpec {
            input_dim,
            hidden_dim: self.hidden_dim,
            num_hidden_layers: self.num_hidden_layers,
            output_dim,
            layer_kind: self.layer_kind,
            transform_mode: self.transform_mode,
            carry_mode: self.carry_mode,
            activation: self.activation,
            dropout_rate: self.dropout_rate,
            residual_span: self.residual_span,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            momentum_after_first_epoch: self.momentum_after_first_epoch,
            batch_size: self.batch_size,
            num_epochs: self.num_epochs,
            seed: self.seed,
            lr_halving: self.lr_halving,
            dropout_rate: self.dropout_rate,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Parses an architecture from a JSON document using the config keys;
/// `input_dim` and `output_dim` are required here.
pub fn arch_from_json(text: &str) -> Result<ArchSpec> {
    RunConfig::from_json(text)?.resolve().arch()
}

/// Architecture from a config file. When `input_dim`/`output_dim` are not
/// given but `train_data` is, they are derived from the dataset and the
/// splice context, exactly as `train` would.
pub fn arch_from_config_file(path: &Path) -> Result<ArchSpec> {
    let mut cfg = RunConfig::from_file(path)?.resolve();
    if cfg.input_dim.is_none() || cfg.output_dim.is_none() {
        if let Some(train) = cfg.train_data.clone() {
            let ds = read_dataset(Path::new(&train))?;
            let derived = SpliceConfig {
                context: cfg.context,
            }
            .spliced_dim(ds.feat_dim());
            cfg.input_dim.get_or_insert(derived);
            cfg.output_dim.get_or_insert(ds.num_classes);
        }
    }
    cfg.arch()
}

/// Flags for dataset generation.
#[derive(Debug, Clone)]
pub struct GenerateArgs {
    pub out: PathBuf,
    pub frames: usize,
    pub classes: usize,
    pub dim: usize,
    pub seed: u64,
    pub noise: f64,
    pub mean_dur: f64,
    /// Optional held-out split: `valid_frames` extra frames are generated in
    /// the same stream (sharing the class prototypes) and written here.
    pub valid_out: Option<PathBuf>,
    pub valid_frames: usize,
}

/// Generates and writes a dataset (and optionally a validation split drawn
/// from the same prototypes). Returns one summary line per file written.
pub fn cmd_generate_data(args: &GenerateArgs) -> Result<Vec<String>> {
    let mut lines = Vec::new();
    if let Some(valid_out) = &args.valid_out {
        if args.valid_frames == 0 {
            return Err(Error::Config(
                "valid-frames must be positive when valid-out is given".into(),
            ));
        }
        let total = args.frames + args.valid_frames;
        let ds = generate_synthetic(
            args.classes,
            args.dim,
            total,
            args.mean_dur,
            args.noise,
            args.seed,
        )?;
        let (train, valid) = split_at(&ds, args.frames)?;
        write_dataset(&args.out, &train)?;
        lines.push(summary_line(&args.out, &train));
        write_dataset(valid_out, &valid)?;
        lines.push(summary_line(valid_out, &valid));
    } else {
        let ds = generate_synthetic(
            args.classes,
            args.dim,
            args.frames,
            args.mean_dur,
            args.noise,
            args.seed,
        )?;
        write_dataset(&args.out, &ds)?;
        lines.push(summary_line(&args.out, &ds));
    }
    Ok(lines)
}

fn summary_line(path: &Path, ds: &FrameDataset) -> String {
    format!(
        "wrote {}: frames={} classes={} dim={} segments={}",
        path.display(),
        ds.num_frames(),
        ds.num_classes,
        ds.feat_dim(),
        ds.segments.len()
    )
}

/// Everything a finished training run produced.
pub struct TrainOutput {
    pub out_dir: PathBuf,
    pub reports: Vec<EpochReport>,
    pub arch: ArchSpec,
    pub params: ModelParams,
}

fn spliced_frames(ds: &FrameDataset, context: usize) -> Result<LabeledFrames> {
    LabeledFrames::new(splice(ds, &SpliceConfig { context }), ds.labels.clone())
}

/// Runs a training job from a resolved config: load both datasets, splice,
/// train, then write `log.csv`, `final.hwnn` and `resolved_config.json`
/// into the output directory.
pub fn train_from_config(config: &ResolvedConfig) -> Result<TrainOutput> {
    let mut config = config.clone();
    let train_path = config
        .train_data
        .clone()
        .ok_or_else(|| Error::Config("train_data is required".into()))?;
    let valid_path = config
        .valid_data
        .clone()
        .ok_or_else(|| Error::Config("valid_data is required".into()))?;
    let out_dir = PathBuf::from(
        config
            .out_dir
            .clone()
            .ok_or_else(|| Error::Config("out_dir is required".into()))?,
    );

    let train_ds = read_dataset(Path::new(&train_path))?;
    let valid_ds = read_dataset(Path::new(&valid_path))?;
    if valid_ds.feat_dim() != train_ds.feat_dim() || valid_ds.num_classes != train_ds.num_classes {
        return Err(Error::Config(format!(
            "validation data ({} dims, {} classes) does not match training data ({} dims, {} classes)",
            valid_ds.feat_dim(),
            valid_ds.num_classes,
            train_ds.feat_dim(),
            train_ds.num_classes
        )));
    }

    let derived_input = SpliceConfig {
        context: config.context,
    }
    .spliced_dim(train_ds.feat_dim());
    match config.input_dim {
        None => config.input_dim = Some(derived_input),
        Some(given) if given != derived_input => {
            return Err(Error::Config(format!(
                "input_dim {given} does not match spliced dimension {derived_input} \
                 (feat_dim {} with context {})",
                train_ds.feat_dim(),
                config.context
            )))
        }
        Some(_) => {}
    }
    match config.output_dim {
        None => config.output_dim = Some(train_ds.num_classes),
        Some(given) if given != train_ds.num_classes => {
            return Err(Error::Config(format!(
                "output_dim {given} does not match the dataset's {} classes",
                train_ds.num_classes
            )))
        }
        Some(_) => {}
    }

    let arch = config.arch()?;
    let train = spliced_frames(&train_ds, config.context)?;
    let valid = spliced_frames(&valid_ds, config.context)?;
    let (reports, params) = run_training(&arch, &train, &valid, &config.train_config())?;

    fs::create_dir_all(&out_dir)?;
    write_log_csv(&out_dir.join("log.csv"), &reports)?;
    write_checkpoint(&out_dir.join("final.hwnn"), &arch, &params)?;
    fs::write(out_dir.join("resolved_config.json"), config.to_json())?;

    Ok(TrainOutput {
        out_dir,
        reports,
        arch,
        params,
    })
}

pub fn cmd_train(config_path: &Path) -> Result<TrainOutput> {
    let config = RunConfig::from_file(config_path)?.resolve();
    train_from_config(&config)
}

/// Loads a checkpoint and a dataset, derives the splice context from the
/// checkpoint's input width, and returns (mean CE, FER).
pub fn cmd_eval(model_path: &Path, data_path: &Path) -> Result<(f64, f64)> {
    let (arch, params) = read_checkpoint(model_path)?;
    let ds = read_dataset(data_path)?;
    evaluate_model_on_dataset(&arch, &params, &ds)
}

/// Shared by the CLI and the C API: splice a raw dataset to the model's
/// input width and evaluate.
pub fn evaluate_model_on_dataset(
    arch: &ArchSpec,
    params: &ModelParams,
    ds: &FrameDataset,
) -> Result<(f64, f64)> {
    if ds.num_classes != arch.output_dim {
        return Err(Error::Config(format!(
            "dataset has {} classes but the model outputs {}",
            ds.num_classes, arch.output_dim
        )));
    }
    let d = ds.feat_dim();
    if arch.input_dim % d != 0 || (arch.input_dim / d) % 2 == 0 {
        return Err(Error::Config(format!(
            "model input width {} is not an odd multiple of the feature dim {d}",
            arch.input_dim
        )));
    }
    let context = (arch.input_dim / d - 1) / 2;
    let frames = spliced_frames(ds, context)?;
    evaluate(params, arch, &frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_json(r#"{"hidden_dims": 32}"#).unwrap_err();
        assert!(err.to_string().contains("hidden_dims"), "{err}");
    }

    #[test]
    fn defaults_are_resolved_and_echoed() {
        let cfg = RunConfig::from_json("{}").unwrap().resolve();
        assert_eq!(cfg.context, 3);
        assert_eq!(cfg.hidden_dim, 32);
        assert_eq!(cfg.num_hidden_layers, 8);
        assert_eq!(cfg.layer_kind, LayerKind::Highway);
        assert_eq!(cfg.learning_rate, 0.1);
        assert_eq!(cfg.momentum_after_first_epoch, 0.9);
        assert_eq!(cfg.batch_size, 128);
        assert_eq!(cfg.num_epochs, 20);
        assert_eq!(cfg.lr_halving, LrHalving::Off);
        let json = cfg.to_json();
        for key in [
            "context",
            "hidden_dim",
            "num_hidden_layers",
            "layer_kind",
            "learning_rate",
            "momentum_after_first_epoch",
            "batch_size",
            "num_epochs",
            "seed",
            "lr_halving",
        ] {
            assert!(json.contains(key), "missing {key} in resolved dump");
        }
        // The dump parses back without defaults changing anything.
        let again = RunConfig::from_json(&json).unwrap().resolve();
        assert_eq!(again.hidden_dim, cfg.hidden_dim);
        assert_eq!(again.seed, cfg.seed);
    }

    #[test]
    fn enums_use_kebab_case() {
        let cfg = RunConfig::from_json(
            r#"{
                "layer_kind": "residual",
                "transform_mode": "fixed-one",
                "carry_mode": "constrained",
                "activation": "relu",
                "lr_halving": "halve-when-valid-ce-worsens"
            }"#,
        )
        .unwrap()
        .resolve();
        assert_eq!(cfg.layer_kind, LayerKind::Residual);
        assert_eq!(cfg.transform_mode, GateMode::FixedOne);
        assert_eq!(cfg.carry_mode, GateMode::Constrained);
        assert_eq!(cfg.activation, Activation::Relu);
        assert_eq!(cfg.lr_halving, LrHalving::HalveWhenValidCeWorsens);
    }

    #[test]
    fn arch_requires_dims() {
        let cfg = RunConfig::from_json(r#"{"hidden_dim": 8}"#).unwrap().resolve();
        assert!(cfg.arch().is_err());
        let arch = arch_from_json(r#"{"input_dim": 10, "output_dim": 4, "hidden_dim": 8}"#).unwrap();
        assert_eq!(arch.input_dim, 10);
        assert_eq!(arch.output_dim, 4);
        assert_eq!(arch.hidden_dim, 8);
    }

    #[test]
    fn invalid_gate_combination_is_a_config_error() {
        let err = arch_from_json(
            r#"{
                "input_dim": 10, "output_dim": 4,
                "layer_kind": "highway",
                "transform_mode": "fixed-one",
                "carry_mode": "constrained"
            }"#,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
