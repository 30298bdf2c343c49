//! Forward and backward propagation for plain, highway and residual stacks.
//!
//! The backward pass is hand-derived reverse-mode differentiation of the
//! mean cross-entropy loss. Tied-gate gradients accumulate per-layer
//! contributions in descending layer order; dropout masks recorded during
//! the forward pass are replayed exactly.

use crate::data::Prng;
use crate::error::{Error, Result};
use crate::linalg::{Activation, Matrix};

use super::{apply_dropout, softmax, ArchSpec, GateMode, Gradients, LayerKind, ModelParams};

/// What a hidden layer does at its position in the stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LayerRole {
    /// Layer 1: the plain input_dim -> n projection, whatever the kind.
    InputProjection,
    Plain,
    Highway,
    /// Residual skip over a single layer: h = act(z) + input.
    ResidualSingle,
    /// First weight layer of a two-layer residual block.
    ResidualPairFirst,
    /// Second weight layer of a two-layer residual block; the skip joins
    /// before the final activation.
    ResidualPairSecond,
}

fn layer_role(arch: &ArchSpec, layer: usize) -> LayerRole {
    if layer == 1 {
        return LayerRole::InputProjection;
    }
    match arch.layer_kind {
        LayerKind::Plain => LayerRole::Plain,
        LayerKind::Highway => LayerRole::Highway,
        LayerKind::Residual => {
            if arch.residual_span == 1 {
                LayerRole::ResidualSingle
            } else if (layer - 2) % 2 == 0 {
                if layer < arch.num_hidden_layers {
                    LayerRole::ResidualPairFirst
                } else {
                    // Odd tail of the pairing falls back to a one-layer skip.
                    LayerRole::ResidualSingle
                }
            } else {
                LayerRole::ResidualPairSecond
            }
        }
    }
}

/// Test instrumentation for the forward pass.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct ForwardHook {
    /// Replace every transform gate output with this constant.
    pub force_transform: Option<f64>,
    /// Swap the transform and carry gates (negative control).
    pub swap_gates: bool,
}

/// Test instrumentation for the backward pass.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct BackwardHook {
    /// Accumulate tied-gate gradients only at this layer, leaving the rest
    /// of the backward flow untouched.
    pub only_gate_layer: Option<usize>,
}

/// A gate is either a materialized sigmoid output or a fixed constant.
enum Gate {
    Mat(Matrix),
    Const(f64),
}

impl Gate {
    fn apply(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            Gate::Mat(m) => x.hadamard(m),
            Gate::Const(c) if *c == 1.0 => Ok(x.clone()),
            Gate::Const(c) => Ok(x.scale(*c)),
        }
    }

    fn into_stored(self) -> Option<Matrix> {
        match self {
            Gate::Mat(m) => Some(m),
            Gate::Const(_) => None,
        }
    }
}

/// Everything one hidden layer contributes to the forward trace.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// Pre-activation; for the closing layer of a residual pair this is the
    /// skip-augmented value the activation saw.
    pub pre_act: Matrix,
    /// Layer output before dropout. For the opening layer of a residual
    /// pair this is the intermediate activation.
    pub output: Matrix,
    /// The activated transform `f` when it differs from `output`
    /// (highway and single-layer residual).
    pub func: Option<Matrix>,
    /// Transform gate output, when materialized.
    pub gate_t: Option<Matrix>,
    /// Carry gate output, when materialized (learned or constrained).
    pub gate_c: Option<Matrix>,
}

/// Per-batch record of everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    input: Matrix,
    pre_acts: Vec<Matrix>,
    outputs: Vec<Matrix>,
    funcs: Vec<Option<Matrix>>,
    gate_t: Vec<Option<Matrix>>,
    gate_c: Vec<Option<Matrix>>,
    masks: Vec<Option<Matrix>>,
    dropped: Vec<Option<Matrix>>,
    probs: Matrix,
}

impl ForwardTrace {
    /// Hidden layers plus the output layer.
    pub fn depth(&self) -> usize {
        self.outputs.len() + 1
    }

    pub fn probs(&self) -> &Matrix {
        &self.probs
    }

    pub fn batch_rows(&self) -> usize {
        self.input.rows()
    }

    pub fn layer_output(&self, layer: usize) -> &Matrix {
        &self.outputs[layer - 1]
    }

    /// Gate outputs recorded at a layer, if any were materialized there.
    pub fn gate_outputs(&self, layer: usize) -> (Option<&Matrix>, Option<&Matrix>) {
        (self.gate_t[layer - 1].as_ref(), self.gate_c[layer - 1].as_ref())
    }

    pub fn dropout_mask(&self, layer: usize) -> Option<&Matrix> {
        self.masks[layer - 1].as_ref()
    }

    pub(crate) fn pre_activation(&self, layer: usize) -> &Matrix {
        &self.pre_acts[layer - 1]
    }

    /// The value that fed layer `layer` (1..=L+1, where L+1 is the output
    /// layer): the previous layer's post-dropout output.
    pub(crate) fn feed(&self, layer: usize) -> &Matrix {
        if layer == 1 {
            &self.input
        } else {
            self.dropped[layer - 2]
                .as_ref()
                .unwrap_or(&self.outputs[layer - 2])
        }
    }

    fn pre(&self, layer: usize) -> &Matrix {
        &self.pre_acts[layer - 1]
    }

    fn func(&self, layer: usize) -> &Matrix {
        self.funcs[layer - 1]
            .as_ref()
            .unwrap_or(&self.outputs[layer - 1])
    }
}

fn check_params_match(arch: &ArchSpec, params: &ModelParams) -> Result<()> {
    let n = arch.hidden_dim;
    let l = arch.num_hidden_layers;
    if params.layer_weights.len() != l || params.layer_biases.len() != l {
        return Err(Error::Config(format!(
            "parameters hold {} hidden layers but the architecture declares {l}",
            params.layer_weights.len()
        )));
    }
    for (i, w) in params.layer_weights.iter().enumerate() {
        let expect = if i == 0 { (arch.input_dim, n) } else { (n, n) };
        if w.shape() != expect {
            return Err(Error::Config(format!(
                "layer {} weight is {}x{} but the architecture expects {}x{}",
                i + 1,
                w.rows(),
                w.cols(),
                expect.0,
                expect.1
            )));
        }
    }
    for (i, b) in params.layer_biases.iter().enumerate() {
        if b.shape() != (1, n) {
            return Err(Error::Config(format!(
                "layer {} bias is {}x{} but the architecture expects 1x{n}",
                i + 1,
                b.rows(),
                b.cols()
            )));
        }
    }
    if params.transform_gate.is_some() != arch.has_transform_gate()
        || params.carry_gate.is_some() != arch.has_carry_gate()
    {
        return Err(Error::Config(
            "gate weight presence does not match the architecture's gate modes".into(),
        ));
    }
    for g in [&params.transform_gate, &params.carry_gate].into_iter().flatten() {
        if g.shape() != (n, n) {
            return Err(Error::Config(format!(
                "gate weight is {}x{} but the architecture expects {n}x{n}",
                g.rows(),
                g.cols()
            )));
        }
    }
    if params.output_weight.shape() != (n, arch.output_dim)
        || params.output_bias.shape() != (1, arch.output_dim)
    {
        return Err(Error::Config(format!(
            "output layer is {}x{} but the architecture expects {n}x{}",
            params.output_weight.rows(),
            params.output_weight.cols(),
            arch.output_dim
        )));
    }
    Ok(())
}

fn affine(p: &Matrix, w: &Matrix, b: &Matrix) -> Result<Matrix> {
    p.matmul(w)?.add_row_broadcast(b)
}

fn act_deriv(kind: Activation, pre: &Matrix, act: &Matrix) -> Matrix {
    match kind {
        Activation::Sigmoid => act.map(|v| v * (1.0 - v)),
        // Subgradient at the kink is 0.
        Activation::Relu => pre.map(|v| if v > 0.0 { 1.0 } else { 0.0 }),
    }
}

/// Computes one hidden layer. Layer 1 is always the plain projection;
/// highway layers mix the transformed path and the gated input; residual
/// layers add the input back ungated. Two-layer residual blocks are
/// assembled by [`forward_network`], not here.
pub fn forward_hidden_layer(
    h_prev: &Matrix,
    layer_index: usize,
    params: &ModelParams,
    arch: &ArchSpec,
) -> Result<(Matrix, LayerTrace)> {
    let trace = forward_hidden_layer_hooked(h_prev, layer_index, params, arch, &ForwardHook::default())?;
    Ok((trace.output.clone(), trace))
}

pub(crate) fn forward_hidden_layer_hooked(
    h_prev: &Matrix,
    layer_index: usize,
    params: &ModelParams,
    arch: &ArchSpec,
    hook: &ForwardHook,
) -> Result<LayerTrace> {
    if layer_index < 1 || layer_index > arch.num_hidden_layers {
        return Err(Error::Config(format!(
            "layer index {layer_index} outside 1..={}",
            arch.num_hidden_layers
        )));
    }
    let w = &params.layer_weights[layer_index - 1];
    let b = &params.layer_biases[layer_index - 1];
    if h_prev.cols() != w.rows() {
        return Err(Error::shape("forward_hidden_layer", h_prev.shape(), w.shape()));
    }
    let role = layer_role(arch, layer_index);
    let pre_act = affine(h_prev, w, b)?;
    let f = pre_act.activate(arch.activation);
    match role {
        LayerRole::InputProjection | LayerRole::Plain | LayerRole::ResidualPairFirst => {
            Ok(LayerTrace {
                pre_act,
                output: f,
                func: None,
                gate_t: None,
                gate_c: None,
            })
        }
        LayerRole::ResidualSingle => {
            let output = f.add(h_prev)?;
            Ok(LayerTrace {
                pre_act,
                output,
                func: Some(f),
                gate_t: None,
                gate_c: None,
            })
        }
        LayerRole::Highway => {
            // Gate sigmoids carry no bias term.
            let transform = if let Some(v) = hook.force_transform {
                Gate::Const(v)
            } else {
                match arch.transform_mode {
                    GateMode::Learned => {
                        let wt = params
                            .transform_gate
                            .as_ref()
                            .ok_or_else(|| Error::Config("missing transform gate weights".into()))?;
                        Gate::Mat(h_prev.matmul(wt)?.activate(Activation::Sigmoid))
                    }
                    GateMode::FixedOne => Gate::Const(1.0),
                    _ => return Err(Error::Config("invalid transform mode".into())),
                }
            };
            let carry = match arch.carry_mode {
                GateMode::Learned => {
                    let wc = params
                        .carry_gate
                        .as_ref()
                        .ok_or_else(|| Error::Config("missing carry gate weights".into()))?;
                    Gate::Mat(h_prev.matmul(wc)?.activate(Activation::Sigmoid))
                }
                GateMode::FixedOne => Gate::Const(1.0),
                GateMode::FixedZero => Gate::Const(0.0),
                GateMode::Constrained => match &transform {
                    Gate::Mat(t) => Gate::Mat(t.map(|v| 1.0 - v)),
                    Gate::Const(c) => Gate::Const(1.0 - c),
                },
            };
            let (transform, carry) = if hook.swap_gates {
                (carry, transform)
            } else {
                (transform, carry)
            };
            let gated_f = transform.apply(&f)?;
            let output = match &carry {
                Gate::Const(c) if *c == 0.0 => gated_f,
                _ => gated_f.add(&carry.apply(h_prev)?)?,
            };
            Ok(LayerTrace {
                pre_act,
                output,
                func: Some(f),
                gate_t: transform.into_stored(),
                gate_c: carry.into_stored(),
            })
        }
        LayerRole::ResidualPairSecond => Err(Error::Config(
            "two-layer residual blocks are assembled by forward_network".into(),
        )),
    }
}

/// Runs the whole network on a batch: hidden layers 1..=L (with inverted
/// dropout after each when training and the rate is positive), then the
/// affine output layer and softmax.
pub fn forward_network(
    params: &ModelParams,
    arch: &ArchSpec,
    batch: &Matrix,
    training: bool,
    rng: Option<&mut Prng>,
) -> Result<(Matrix, ForwardTrace)> {
    forward_network_hooked(params, arch, batch, training, rng, &ForwardHook::default())
}

pub(crate) fn forward_network_hooked(
    params: &ModelParams,
    arch: &ArchSpec,
    batch: &Matrix,
    training: bool,
    mut rng: Option<&mut Prng>,
    hook: &ForwardHook,
) -> Result<(Matrix, ForwardTrace)> {
    arch.validate()?;
    check_params_match(arch, params)?;
    if batch.cols() != arch.input_dim {
        return Err(Error::shape(
            "forward_network",
            batch.shape(),
            (batch.rows(), arch.input_dim),
        ));
    }
    let use_dropout = training && arch.dropout_rate > 0.0;
    if use_dropout && rng.is_none() {
        return Err(Error::Config("dropout requires a random stream".into()));
    }

    let l_total = arch.num_hidden_layers;
    let mut pre_acts = Vec::with_capacity(l_total);
    let mut outputs: Vec<Matrix> = Vec::with_capacity(l_total);
    let mut funcs = Vec::with_capacity(l_total);
    let mut gate_t = Vec::with_capacity(l_total);
    let mut gate_c = Vec::with_capacity(l_total);
    let mut masks: Vec<Option<Matrix>> = Vec::with_capacity(l_total);
    let mut dropped: Vec<Option<Matrix>> = Vec::with_capacity(l_total);

    for layer in 1..=l_total {
        let trace = {
            let feed = |i: usize| -> &Matrix {
                if i == 1 {
                    batch
                } else {
                    dropped[i - 2].as_ref().unwrap_or(&outputs[i - 2])
                }
            };
            let p = feed(layer);
            match layer_role(arch, layer) {
                LayerRole::ResidualPairSecond => {
                    // Skip joins the block input before the activation.
                    let block_input = feed(layer - 1);
                    let w = &params.layer_weights[layer - 1];
                    let b = &params.layer_biases[layer - 1];
                    let pre_act = affine(p, w, b)?.add(block_input)?;
                    let output = pre_act.activate(arch.activation);
                    LayerTrace {
                        pre_act,
                        output,
                        func: None,
                        gate_t: None,
                        gate_c: None,
                    }
                }
                _ => forward_hidden_layer_hooked(p, layer, params, arch, hook)?,
            }
        };
        pre_acts.push(trace.pre_act);
        funcs.push(trace.func);
        gate_t.push(trace.gate_t);
        gate_c.push(trace.gate_c);
        if use_dropout {
            let rng = rng.as_mut().expect("checked above");
            let (hd, mask) = apply_dropout(&trace.output, arch.dropout_rate, rng)?;
            masks.push(Some(mask));
            dropped.push(Some(hd));
        } else {
            masks.push(None);
            dropped.push(None);
        }
        outputs.push(trace.output);
    }

    let top = dropped[l_total - 1].as_ref().unwrap_or(&outputs[l_total - 1]);
    let logits = affine(top, &params.output_weight, &params.output_bias)?;
    let probs = softmax(&logits);

    Ok((
        probs.clone(),
        ForwardTrace {
            input: batch.clone(),
            pre_acts,
            outputs,
            funcs,
            gate_t,
            gate_c,
            masks,
            dropped,
            probs,
        },
    ))
}

/// Exact gradient of the mean cross-entropy over the batch with respect to
/// every parameter tensor. Tied gate gradients are the sum of per-layer
/// contributions, accumulated from layer L down to layer 2.
pub fn backward_network(
    params: &ModelParams,
    arch: &ArchSpec,
    trace: &ForwardTrace,
    targets: &[usize],
) -> Result<Gradients> {
    backward_network_hooked(params, arch, trace, targets, &BackwardHook::default())
}

pub(crate) fn backward_network_hooked(
    params: &ModelParams,
    arch: &ArchSpec,
    trace: &ForwardTrace,
    targets: &[usize],
    hook: &BackwardHook,
) -> Result<Gradients> {
    arch.validate()?;
    check_params_match(arch, params)?;
    let l_total = arch.num_hidden_layers;
    if trace.outputs.len() != l_total || trace.input.cols() != arch.input_dim {
        return Err(Error::Data(
            "forward trace does not match the architecture".into(),
        ));
    }
    let batch_rows = trace.batch_rows();
    if targets.len() != batch_rows {
        return Err(Error::Data(format!(
            "{} targets for a batch of {batch_rows} rows",
            targets.len()
        )));
    }
    for (frame, &t) in targets.iter().enumerate() {
        if t >= arch.output_dim {
            return Err(Error::LabelOutOfRange {
                frame,
                label: t as u64,
                num_classes: arch.output_dim,
            });
        }
    }

    let mut grads = Gradients::zeros_like(params);

    // Softmax + cross-entropy: d(logits) = (y - onehot) / batch.
    let mut dlogits = trace.probs.clone();
    for (r, &t) in targets.iter().enumerate() {
        dlogits.set(r, t, dlogits.get(r, t) - 1.0);
    }
    let dlogits = dlogits.scale(1.0 / batch_rows as f64);

    grads.output_weight = trace.feed(l_total + 1).transpose().matmul(&dlogits)?;
    grads.output_bias = dlogits.col_sums();
    let mut dh = dlogits.matmul(&params.output_weight.transpose())?;

    let mut layer = l_total;
    loop {
        // dh arrives as the gradient at the post-dropout value; replaying
        // the mask converts it to the layer's own output.
        if let Some(mask) = trace.dropout_mask(layer) {
            dh = dh.hadamard(mask)?;
        }
        match layer_role(arch, layer) {
            LayerRole::InputProjection => {
                let dz = dh.hadamard(&act_deriv(arch.activation, trace.pre(1), trace.func(1)))?;
                grads.layer_weights[0] = trace.feed(1).transpose().matmul(&dz)?;
                grads.layer_biases[0] = dz.col_sums();
                break;
            }
            LayerRole::Plain | LayerRole::ResidualPairFirst => {
                let p = trace.feed(layer);
                let dz =
                    dh.hadamard(&act_deriv(arch.activation, trace.pre(layer), trace.func(layer)))?;
                grads.layer_weights[layer - 1] = p.transpose().matmul(&dz)?;
                grads.layer_biases[layer - 1] = dz.col_sums();
                dh = dz.matmul(&params.layer_weights[layer - 1].transpose())?;
                layer -= 1;
            }
            LayerRole::ResidualSingle => {
                let p = trace.feed(layer);
                let dz =
                    dh.hadamard(&act_deriv(arch.activation, trace.pre(layer), trace.func(layer)))?;
                grads.layer_weights[layer - 1] = p.transpose().matmul(&dz)?;
                grads.layer_biases[layer - 1] = dz.col_sums();
                dh = dz.matmul(&params.layer_weights[layer - 1].transpose())?.add(&dh)?;
                layer -= 1;
            }
            LayerRole::Highway => {
                let p = trace.feed(layer);
                let f = trace.func(layer);
                let (t_opt, c_opt) = trace.gate_outputs(layer);
                let accumulate_gates = hook.only_gate_layer.map_or(true, |only| only == layer);

                let df = match t_opt {
                    Some(t) => dh.hadamard(t)?,
                    None => dh.clone(),
                };
                let dz = df.hadamard(&act_deriv(arch.activation, trace.pre(layer), f))?;
                grads.layer_weights[layer - 1] = p.transpose().matmul(&dz)?;
                grads.layer_biases[layer - 1] = dz.col_sums();
                let mut dh_prev = dz.matmul(&params.layer_weights[layer - 1].transpose())?;

                match arch.carry_mode {
                    GateMode::Learned => {
                        let c = c_opt.ok_or_else(|| {
                            Error::Data("trace is missing carry gate values".into())
                        })?;
                        dh_prev = dh_prev.add(&dh.hadamard(c)?)?;
                        let dcpre =
                            dh.hadamard(p)?.hadamard(&c.map(|v| v * (1.0 - v)))?;
                        if accumulate_gates {
                            let g = grads.carry_gate.as_mut().expect("carry gate gradient slot");
                            *g = g.add(&p.transpose().matmul(&dcpre)?)?;
                        }
                        let wc = params.carry_gate.as_ref().expect("carry gate weights");
                        dh_prev = dh_prev.add(&dcpre.matmul(&wc.transpose())?)?;
                    }
                    GateMode::FixedOne => {
                        dh_prev = dh_prev.add(&dh)?;
                    }
                    GateMode::FixedZero => {}
                    GateMode::Constrained => {
                        let c = c_opt.ok_or_else(|| {
                            Error::Data("trace is missing constrained carry values".into())
                        })?;
                        dh_prev = dh_prev.add(&dh.hadamard(c)?)?;
                    }
                }

                if arch.transform_mode == GateMode::Learned {
                    let t = t_opt
                        .ok_or_else(|| Error::Data("trace is missing transform gate values".into()))?;
                    let mut dt = dh.hadamard(f)?;
                    if arch.carry_mode == GateMode::Constrained {
                        // C = 1 - T couples the carry path into the gate.
                        dt = dt.sub(&dh.hadamard(p)?)?;
                    }
                    let dtpre = dt.hadamard(&t.map(|v| v * (1.0 - v)))?;
                    if accumulate_gates {
                        let g = grads
                            .transform_gate
                            .as_mut()
                            .expect("transform gate gradient slot");
                        *g = g.add(&p.transpose().matmul(&dtpre)?)?;
                    }
                    let wt = params.transform_gate.as_ref().expect("transform gate weights");
                    dh_prev = dh_prev.add(&dtpre.matmul(&wt.transpose())?)?;
                }

                dh = dh_prev;
                layer -= 1;
            }
            LayerRole::ResidualPairSecond => {
                let ds = dh.hadamard(&act_deriv(
                    arch.activation,
                    trace.pre(layer),
                    trace.layer_output(layer),
                ))?;
                let u_fed = trace.feed(layer);
                grads.layer_weights[layer - 1] = u_fed.transpose().matmul(&ds)?;
                grads.layer_biases[layer - 1] = ds.col_sums();
                let mut du = ds.matmul(&params.layer_weights[layer - 1].transpose())?;
                if let Some(mask) = trace.dropout_mask(layer - 1) {
                    du = du.hadamard(mask)?;
                }
                let dz1 = du.hadamard(&act_deriv(
                    arch.activation,
                    trace.pre(layer - 1),
                    trace.layer_output(layer - 1),
                ))?;
                let p = trace.feed(layer - 1);
                grads.layer_weights[layer - 2] = p.transpose().matmul(&dz1)?;
                grads.layer_biases[layer - 2] = dz1.col_sums();
                // The skip feeds the block input directly.
                dh = dz1
                    .matmul(&params.layer_weights[layer - 2].transpose())?
                    .add(&ds)?;
                layer -= 2;
            }
        }
    }

    Ok(grads)
}
