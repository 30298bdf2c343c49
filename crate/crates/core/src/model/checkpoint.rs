//! HWNN model checkpoints.
//!
//! Layout, all integers little-endian: magic "HWNN", format version u32,
//! the architecture (input_dim u32, hidden_dim u32, num_hidden_layers u32,
//! output_dim u32, layer_kind u8, transform_mode u8, carry_mode u8,
//! activation u8, residual_span u8, dropout_rate f64), then every parameter
//! matrix in canonical field order as rows u32, cols u32, row-major f64.
//! The f64 payload is written bit for bit, so round trips are lossless.

use std::fs;
use std::path::Path;

use crate::data::ByteReader;
use crate::error::{Error, Result};
use crate::linalg::{Activation, Matrix};

use super::{ArchSpec, GateMode, LayerKind, ModelParams};

const CHECKPOINT_MAGIC: &[u8; 4] = b"HWNN";
const CHECKPOINT_VERSION: u32 = 1;

fn layer_kind_tag(kind: LayerKind) -> u8 {
    match kind {
        LayerKind::Plain => 0,
        LayerKind::Highway => 1,
        LayerKind::Residual => 2,
    }
}

fn layer_kind_from(tag: u8) -> Result<LayerKind> {
    match tag {
        0 => Ok(LayerKind::Plain),
        1 => Ok(LayerKind::Highway),
        2 => Ok(LayerKind::Residual),
        t => Err(Error::Data(format!("unknown layer kind tag {t}"))),
    }
}

fn gate_mode_tag(mode: GateMode) -> u8 {
    match mode {
        GateMode::Learned => 0,
        GateMode::FixedZero => 1,
        GateMode::FixedOne => 2,
        GateMode::Constrained => 3,
    }
}

fn gate_mode_from(tag: u8) -> Result<GateMode> {
    match tag {
        0 => Ok(GateMode::Learned),
        1 => Ok(GateMode::FixedZero),
        2 => Ok(GateMode::FixedOne),
        3 => Ok(GateMode::Constrained),
        t => Err(Error::Data(format!("unknown gate mode tag {t}"))),
    }
}

fn activation_tag(a: Activation) -> u8 {
    match a {
        Activation::Sigmoid => 0,
        Activation::Relu => 1,
    }
}

fn activation_from(tag: u8) -> Result<Activation> {
    match tag {
        0 => Ok(Activation::Sigmoid),
        1 => Ok(Activation::Relu),
        t => Err(Error::Data(format!("unknown activation tag {t}"))),
    }
}

fn push_matrix(out: &mut Vec<u8>, m: &Matrix) {
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for &v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(arch: &ArchSpec, params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(arch.input_dim as u32).to_le_bytes());
    out.extend_from_slice(&(arch.hidden_dim as u32).to_le_bytes());
    out.extend_from_slice(&(arch.num_hidden_layers as u32).to_le_bytes());
    out.extend_from_slice(&(arch.output_dim as u32).to_le_bytes());
    out.push(layer_kind_tag(arch.layer_kind));
    out.push(gate_mode_tag(arch.transform_mode));
    out.push(gate_mode_tag(arch.carry_mode));
    out.push(activation_tag(arch.activation));
    out.push(arch.residual_span);
    out.extend_from_slice(&arch.dropout_rate.to_le_bytes());
    for (_, m) in params.fields() {
        push_matrix(&mut out, m);
    }
    out
}

fn read_matrix(r: &mut ByteReader<'_>, expect: (usize, usize), what: &'static str) -> Result<Matrix> {
    let rows = r.u32(what)? as usize;
    let cols = r.u32(what)? as usize;
    if (rows, cols) != expect {
        return Err(Error::Data(format!(
            "checkpoint tensor {what} is {rows}x{cols} but the architecture expects {}x{}",
            expect.0, expect.1
        )));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(r.f64(what)?);
    }
    Ok(Matrix::from_vec(rows, cols, data))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ArchSpec, ModelParams)> {
    let mut r = ByteReader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: "HWNN",
            found: magic.try_into().unwrap(),
        });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let input_dim = r.u32("input_dim")? as usize;
    let hidden_dim = r.u32("hidden_dim")? as usize;
    let num_hidden_layers = r.u32("num_hidden_layers")? as usize;
    let output_dim = r.u32("output_dim")? as usize;
    let layer_kind = layer_kind_from(r.u8("layer_kind")?)?;
    let transform_mode = gate_mode_from(r.u8("transform_mode")?)?;
    let carry_mode = gate_mode_from(r.u8("carry_mode")?)?;
    let activation = activation_from(r.u8("activation")?)?;
    let residual_span = r.u8("residual_span")?;
    let dropout_rate = r.f64("dropout_rate")?;
    let arch = ArchSpec {
        input_dim,
        hidden_dim,
        num_hidden_layers,
        output_dim,
        layer_kind,
        transform_mode,
        carry_mode,
        activation,
        dropout_rate,
        residual_span,
    };
    arch.validate()?;

    let n = hidden_dim;
    let mut layer_weights = vec![read_matrix(&mut r, (input_dim, n), "layer weight")?];
    for _ in 1..num_hidden_layers {
        layer_weights.push(read_matrix(&mut r, (n, n), "layer weight")?);
    }
    let mut layer_biases = Vec::with_capacity(num_hidden_layers);
    for _ in 0..num_hidden_layers {
        layer_biases.push(read_matrix(&mut r, (1, n), "layer bias")?);
    }
    let transform_gate = if arch.has_transform_gate() {
        Some(read_matrix(&mut r, (n, n), "transform gate")?)
    } else {
        None
    };
    let carry_gate = if arch.has_carry_gate() {
        Some(read_matrix(&mut r, (n, n), "carry gate")?)
    } else {
        None
    };
    let output_weight = read_matrix(&mut r, (n, output_dim), "output weight")?;
    let output_bias = read_matrix(&mut r, (1, output_dim), "output bias")?;
    if !r.done() {
        return Err(Error::Data("trailing bytes after parameters".into()));
    }
    Ok((
        arch,
        ModelParams {
            layer_weights,
            layer_biases,
            transform_gate,
            carry_gate,
            output_weight,
            output_bias,
        },
    ))
}

pub fn write_checkpoint(path: &Path, arch: &ArchSpec, params: &ModelParams) -> Result<()> {
    fs::write(path, encode_checkpoint(arch, params))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(ArchSpec, ModelParams)> {
    decode_checkpoint(&fs::read(path)?)
}
