use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hdnn::cli::{arch_from_config_file, cmd_eval, cmd_generate_data, cmd_train, GenerateArgs};
use hdnn::error::Error;
use hdnn::linalg::Activation;
use hdnn::model::{count_params, ArchSpec, GateMode, LayerKind};
use hdnn::verification::grad_check;

// Exit codes: 0 success, 1 usage/config error, 2 data error, 3 verification
// failure.
const EXIT_CONFIG: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_VERIFY: u8 = 3;

#[derive(Parser)]
#[command(
    name = "hdnn",
    version,
    about = "Train and evaluate highway deep neural networks on frame-classification data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic frame-classification dataset (FDS1 file).
    GenerateData {
        /// Output dataset path.
        #[arg(long)]
        out: PathBuf,
        /// Number of frames.
        #[arg(long)]
        frames: usize,
        /// Number of classes (at least 2).
        #[arg(long)]
        classes: usize,
        /// Feature dimension per frame.
        #[arg(long)]
        dim: usize,
        /// Generator seed.
        #[arg(long)]
        seed: u64,
        /// Gaussian noise scale around each class prototype.
        #[arg(long, default_value_t = 0.3)]
        noise: f64,
        /// Mean segment duration in frames.
        #[arg(long, default_value_t = 8.0)]
        mean_dur: f64,
        /// Also write a validation split (same prototypes) to this path.
        #[arg(long)]
        valid_out: Option<PathBuf>,
        /// Frames in the validation split.
        #[arg(long, default_value_t = 0)]
        valid_frames: usize,
    },
    /// Train a model from a JSON config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset; prints mean CE and FER.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Print the exact trainable-parameter count of an architecture.
    CountParams {
        /// JSON config describing the architecture (needs input_dim and
        /// output_dim). Alternatively use the inline flags below.
        #[arg(long, conflicts_with = "arch")]
        config: Option<PathBuf>,
        #[command(flatten)]
        arch: ArchFlags,
    },
    /// Compare analytic gradients against central differences.
    GradCheck {
        #[command(flatten)]
        arch: ArchFlags,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Relative-error tolerance.
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
    },
}

#[derive(Args)]
struct ArchFlags {
    #[arg(long, default_value_t = 600)]
    input_dim: usize,
    #[arg(long, default_value_t = 3972)]
    output_dim: usize,
    #[arg(long, default_value_t = 32)]
    hidden_dim: usize,
    #[arg(long, default_value_t = 8)]
    num_hidden_layers: usize,
    #[arg(long, value_enum, default_value_t = LayerKindFlag::Highway)]
    layer_kind: LayerKindFlag,
    #[arg(long, value_enum, default_value_t = GateModeFlag::Learned)]
    transform_mode: GateModeFlag,
    #[arg(long, value_enum, default_value_t = GateModeFlag::Learned)]
    carry_mode: GateModeFlag,
    #[arg(long, value_enum, default_value_t = ActivationFlag::Sigmoid)]
    activation: ActivationFlag,
    #[arg(long, default_value_t = 1)]
    residual_span: u8,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum LayerKindFlag {
    Plain,
    Highway,
    Residual,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum GateModeFlag {
    Learned,
    FixedOne,
    FixedZero,
    Constrained,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ActivationFlag {
    Sigmoid,
    Relu,
}

impl ArchFlags {
    fn to_arch(&self) -> Result<ArchSpec, Error> {
        let arch = ArchSpec {
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
            num_hidden_layers: self.num_hidden_layers,
            output_dim: self.output_dim,
            layer_kind: match self.layer_kind {
                LayerKindFlag::Plain => LayerKind::Plain,
                LayerKindFlag::Highway => LayerKind::Highway,
                LayerKindFlag::Residual => LayerKind::Residual,
            },
            transform_mode: gate_mode(self.transform_mode),
            carry_mode: gate_mode(self.carry_mode),
            activation: match self.activation {
                ActivationFlag::Sigmoid => Activation::Sigmoid,
                ActivationFlag::Relu => Activation::Relu,
            },
            dropout_rate: 0.0,
            residual_span: self.residual_span,
        };
        arch.validate()?;
        Ok(arch)
    }
}

fn gate_mode(flag: GateModeFlag) -> GateMode {
    match flag {
        GateModeFlag::Learned => GateMode::Learned,
        GateModeFlag::FixedOne => GateMode::FixedOne,
        GateModeFlag::FixedZero => GateMode::FixedZero,
        GateModeFlag::Constrained => GateMode::Constrained,
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        _ => EXIT_DATA,
    }
}

fn run(command: Command) -> Result<u8, Error> {
    match command {
        Command::GenerateData {
            out,
            frames,
            classes,
            dim,
            seed,
            noise,
            mean_dur,
            valid_out,
            valid_frames,
        } => {
            let lines = cmd_generate_data(&GenerateArgs {
                out,
                frames,
                classes,
                dim,
                seed,
                noise,
                mean_dur,
                valid_out,
                valid_frames,
            })?;
            for line in lines {
                println!("{line}");
            }
            Ok(0)
        }
        Command::Train { config } => {
            let output = cmd_train(&config)?;
            for r in &output.reports {
                println!(
                    "epoch {}: train_ce={:.6} valid_ce={:.6} valid_fer={:.6} ({:.3}s)",
                    r.epoch, r.train_ce, r.valid_ce, r.valid_fer, r.seconds
                );
            }
            println!(
                "wrote {}/log.csv, final.hwnn, resolved_config.json",
                output.out_dir.display()
            );
            Ok(0)
        }
        Command::Eval { model, data } => {
            let (ce, fer) = cmd_eval(&model, &data)?;
            println!("ce={ce:.6} fer={fer:.6}");
            Ok(0)
        }
        Command::CountParams { config, arch } => {
            let arch = match config {
                Some(path) => arch_from_config_file(&path)?,
                None => arch.to_arch()?,
            };
            let count = count_params(&arch);
            println!("params={count} ({:.2}M)", count as f64 / 1e6);
            Ok(0)
        }
        Command::GradCheck { arch, seed, tol } => {
            let arch = arch.to_arch()?;
            let report = grad_check(&arch, seed, tol)?;
            println!("{report}");
            Ok(if report.pass { 0 } else { EXIT_VERIFY })
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_CONFIG,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
