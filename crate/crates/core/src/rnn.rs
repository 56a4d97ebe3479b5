//! Recurrent cells (plain RNN, LSTM, GRU and a bidirectional wrapper) used as
//! single-timestep layers between global pooling and the classifier.
//!
//! Batched layout throughout: inputs are `[b, d]`, states `[b, u]`, hidden
//! weights `[u, u]`, input weights `[d, u]`, so every pre-activation is
//! `h_prev · W_h + x · W_x + bias`.

use std::fmt;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{glorot_limit, join, param_tree, Dense, ParamTree};
use crate::tensor::Tensor;

/// Hidden weight, input weight and bias of one gate.
#[derive(Clone, Debug, PartialEq)]
pub struct Gate<T = Tensor> {
    pub hidden: T,
    pub input: T,
    pub bias: T,
}
param_tree!(Gate { leaves: [hidden, input, bias] });

impl Gate<Tensor> {
    pub fn init(inputs: usize, units: usize, rng: &mut impl Rng) -> Self {
        Gate {
            hidden: Tensor::uniform([units, units], glorot_limit(units, units), rng),
            input: Tensor::uniform([inputs, units], glorot_limit(inputs, units), rng),
            bias: Tensor::zeros([units]),
        }
    }

    pub fn zeros(inputs: usize, units: usize) -> Self {
        Gate {
            hidden: Tensor::zeros([units, units]),
            input: Tensor::zeros([inputs, units]),
            bias: Tensor::zeros([units]),
        }
    }

    pub fn units(&self) -> usize {
        self.bias.len()
    }

    pub fn inputs(&self) -> usize {
        self.input.shape()[0]
    }
}

impl Gate<Var> {
    fn pre_activation(&self, tape: &mut Tape, x: Var, h: Var) -> Result<Var> {
        let hw = tape.matmul(h, self.hidden)?;
        let xw = tape.matmul(x, self.input)?;
        let s = tape.add(hw, xw)?;
        tape.add_bias(s, self.bias)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RnnParams<T = Tensor> {
    pub gate: Gate<T>,
    /// Optional softmax read-out `softmax(h · W_y + b_y)`; the pipeline head does not use it.
    pub output: Option<Dense<T>>,
}
param_tree!(RnnParams { leaves: [], nested: [gate, output] });

#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams<T = Tensor> {
    pub forget: Gate<T>,
    pub input: Gate<T>,
    pub candidate: Gate<T>,
    pub output: Gate<T>,
}
param_tree!(LstmParams { leaves: [], nested: [forget, input, candidate, output] });

#[derive(Clone, Debug, PartialEq)]
pub struct GruParams<T = Tensor> {
    pub reset: Gate<T>,
    pub update: Gate<T>,
    /// Carries its own bias rather than reusing the update gate's.
    pub candidate: Gate<T>,
}
param_tree!(GruParams { leaves: [], nested: [reset, update, candidate] });

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CellKind {
    Rnn,
    Lstm,
    Gru,
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CellKind::Rnn => "RNN",
            CellKind::Lstm => "LSTM",
            CellKind::Gru => "GRU",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CellParams<T = Tensor> {
    Rnn(RnnParams<T>),
    Lstm(LstmParams<T>),
    Gru(GruParams<T>),
}

impl<T> ParamTree<T> for CellParams<T> {
    type Of<U> = CellParams<U>;

    fn map_leaves<U>(&self, f: &mut dyn FnMut(&T) -> U) -> CellParams<U> {
        match self {
            CellParams::Rnn(p) => CellParams::Rnn(p.map_leaves(f)),
            CellParams::Lstm(p) => CellParams::Lstm(p.map_leaves(f)),
            CellParams::Gru(p) => CellParams::Gru(p.map_leaves(f)),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        match self {
            CellParams::Rnn(p) => p.visit(&join(prefix, "rnn"), f),
            CellParams::Lstm(p) => p.visit(&join(prefix, "lstm"), f),
            CellParams::Gru(p) => p.visit(&join(prefix, "gru"), f),
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        match self {
            CellParams::Rnn(p) => p.visit_mut(&join(prefix, "rnn"), f),
            CellParams::Lstm(p) => p.visit_mut(&join(prefix, "lstm"), f),
            CellParams::Gru(p) => p.visit_mut(&join(prefix, "gru"), f),
        }
    }
}

impl<T> CellParams<T> {
    pub fn kind(&self) -> CellKind {
        match self {
            CellParams::Rnn(_) => CellKind::Rnn,
            CellParams::Lstm(_) => CellKind::Lstm,
            CellParams::Gru(_) => CellKind::Gru,
        }
    }
}

impl CellParams<Tensor> {
    pub fn init(kind: CellKind, inputs: usize, units: usize, rng: &mut impl Rng) -> Self {
        match kind {
            CellKind::Rnn => CellParams::Rnn(RnnParams {
                gate: Gate::init(inputs, units, rng),
                output: None,
            }),
            CellKind::Lstm => CellParams::Lstm(LstmParams {
                forget: Gate::init(inputs, units, rng),
                input: Gate::init(inputs, units, rng),
                candidate: Gate::init(inputs, units, rng),
                output: Gate::init(inputs, units, rng),
            }),
            CellKind::Gru => CellParams::Gru(GruParams {
                reset: Gate::init(inputs, units, rng),
                update: Gate::init(inputs, units, rng),
                candidate: Gate::init(inputs, units, rng),
            }),
        }
    }

    pub fn zeros(kind: CellKind, inputs: usize, units: usize) -> Self {
        let g = || Gate::zeros(inputs, units);
        match kind {
            CellKind::Rnn => CellParams::Rnn(RnnParams { gate: g(), output: None }),
            CellKind::Lstm => CellParams::Lstm(LstmParams {
                forget: g(),
                input: g(),
                candidate: g(),
                output: g(),
            }),
            CellKind::Gru => CellParams::Gru(GruParams {
                reset: g(),
                update: g(),
                candidate: g(),
            }),
        }
    }

    fn first_gate(&self) -> &Gate<Tensor> {
        match self {
            CellParams::Rnn(p) => &p.gate,
            CellParams::Lstm(p) => &p.forget,
            CellParams::Gru(p) => &p.reset,
        }
    }

    pub fn units(&self) -> usize {
        self.first_gate().units()
    }

    pub fn inputs(&self) -> usize {
        self.first_gate().inputs()
    }
}

/// Per-step projection `softmax(h · W_yh + z · W_yz + b_y)` over both directions.
#[derive(Clone, Debug, PartialEq)]
pub struct BiOutput<T = Tensor> {
    pub forward_weight: T,
    pub backward_weight: T,
    pub bias: T,
}
param_tree!(BiOutput { leaves: [forward_weight, backward_weight, bias] });

#[derive(Clone, Debug, PartialEq)]
pub struct BiParams<T = Tensor> {
    pub forward: CellParams<T>,
    pub backward: CellParams<T>,
    pub output: Option<BiOutput<T>>,
}
param_tree!(BiParams { leaves: [], nested: [forward, backward, output] });

impl BiParams<Tensor> {
    pub fn init(kind: CellKind, inputs: usize, units: usize, rng: &mut impl Rng) -> Self {
        BiParams {
            forward: CellParams::init(kind, inputs, units, rng),
            backward: CellParams::init(kind, inputs, units, rng),
            output: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (f, b) = (&self.forward, &self.backward);
        if f.kind() != b.kind() || f.units() != b.units() || f.inputs() != b.inputs() {
            return Err(Error::Config(format!(
                "bidirectional cells disagree: forward {} ({}→{}), backward {} ({}→{})",
                f.kind(),
                f.inputs(),
                f.units(),
                b.kind(),
                b.inputs(),
                b.units()
            )));
        }
        Ok(())
    }
}

/// Recurrent state on a tape; `cell` is present for LSTMs only.
#[derive(Clone, Copy, Debug)]
pub struct HiddenState {
    pub h: Var,
    pub cell: Option<Var>,
}

impl HiddenState {
    /// Zero state for a sequence start.
    pub fn zeros(tape: &mut Tape, kind: CellKind, batch: usize, units: usize) -> Self {
        let h = tape.zeros([batch, units]);
        let cell = (kind == CellKind::Lstm).then(|| tape.zeros([batch, units]));
        HiddenState { h, cell }
    }
}

/// `h_t = σ(h_prev · W_h + x_t · W_x + b)`.
pub fn rnn_step(tape: &mut Tape, p: &RnnParams<Var>, x: Var, h_prev: Var) -> Result<Var> {
    let z = p.gate.pre_activation(tape, x, h_prev)?;
    Ok(tape.sigmoid(z))
}

/// Softmax read-out of an RNN state; errors when the cell has no output projection.
pub fn rnn_output(tape: &mut Tape, p: &RnnParams<Var>, h: Var) -> Result<Var> {
    let out = p
        .output
        .as_ref()
        .ok_or_else(|| Error::Contract("rnn_output: cell has no output projection".into()))?;
    let z = out.forward(tape, h)?;
    tape.softmax_rows(z)
}

pub fn lstm_step(tape: &mut Tape, p: &LstmParams<Var>, x: Var, state: HiddenState) -> Result<HiddenState> {
    let c_prev = state
        .cell
        .ok_or_else(|| Error::Contract("lstm_step: state has no cell component".into()))?;
    let f = p.forget.pre_activation(tape, x, state.h)?;
    let f = tape.sigmoid(f);
    let i = p.input.pre_activation(tape, x, state.h)?;
    let i = tape.sigmoid(i);
    let cand = p.candidate.pre_activation(tape, x, state.h)?;
    let cand = tape.tanh(cand);
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, cand)?;
    let c = tape.add(keep, write)?;
    let o = p.output.pre_activation(tape, x, state.h)?;
    let o = tape.sigmoid(o);
    let squashed = tape.tanh(c);
    let h = tape.mul(o, squashed)?;
    Ok(HiddenState { h, cell: Some(c) })
}

pub fn gru_step(tape: &mut Tape, p: &GruParams<Var>, x: Var, h_prev: Var) -> Result<Var> {
    let r = p.reset.pre_activation(tape, x, h_prev)?;
    let r = tape.sigmoid(r);
    let z = p.update.pre_activation(tape, x, h_prev)?;
    let z = tape.sigmoid(z);
    let gated = tape.mul(r, h_prev)?;
    let cand = p.candidate.pre_activation(tape, x, gated)?;
    let cand = tape.tanh(cand);
    let ones = tape.constant(Tensor::ones(tape.shape(z).to_vec()));
    let carry = tape.sub(ones, z)?;
    let kept = tape.mul(carry, h_prev)?;
    let fresh = tape.mul(z, cand)?;
    tape.add(kept, fresh)
}

/// One step of any cell variant.
pub fn cell_step(tape: &mut Tape, p: &CellParams<Var>, x: Var, state: HiddenState) -> Result<HiddenState> {
    match p {
        CellParams::Rnn(p) => Ok(HiddenState {
            h: rnn_step(tape, p, x, state.h)?,
            cell: None,
        }),
        CellParams::Lstm(p) => lstm_step(tape, p, x, state),
        CellParams::Gru(p) => Ok(HiddenState {
            h: gru_step(tape, p, x, state.h)?,
            cell: None,
        }),
    }
}

fn run_direction(tape: &mut Tape, p: &CellParams<Var>, seq: Var, units: usize, reverse: bool) -> Result<Vec<Var>> {
    let (b, steps) = (tape.shape(seq)[0], tape.shape(seq)[1]);
    let mut state = HiddenState::zeros(tape, p.kind(), b, units);
    let mut out = vec![None; steps];
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..steps).rev())
    } else {
        Box::new(0..steps)
    };
    for t in order {
        let x = tape.time_step(seq, t)?;
        state = cell_step(tape, p, x, state)?;
        out[t] = Some(state.h);
    }
    Ok(out.into_iter().map(Option::unwrap).collect())
}

/// Runs `p.forward` left-to-right and `p.backward` right-to-left over `seq: [b, T, d]`
/// and returns `[b, T, 2u]` with per-step outputs `[h_t ‖ z_t]`.
pub fn bidirectional_forward(tape: &mut Tape, p: &BiParams<Var>, seq: Var) -> Result<Var> {
    let s = tape.shape(seq).to_vec();
    if s.len() != 3 {
        return Err(Error::dim("bidirectional_forward", &s, &[0, 0, 0]));
    }
    if s[1] == 0 {
        return Err(Error::Contract("bidirectional_forward: empty sequence".into()));
    }
    let units = match (&p.forward, &p.backward) {
        (CellParams::Rnn(f), _) => tape.shape(f.gate.bias)[0],
        (CellParams::Lstm(f), _) => tape.shape(f.forget.bias)[0],
        (CellParams::Gru(f), _) => tape.shape(f.reset.bias)[0],
    };
    let fwd = run_direction(tape, &p.forward, seq, units, false)?;
    let bwd = run_direction(tape, &p.backward, seq, units, true)?;
    let mut steps = Vec::with_capacity(fwd.len());
    for (f, b) in fwd.into_iter().zip(bwd) {
        steps.push(tape.concat(&[f, b])?);
    }
    tape.stack_time(&steps)
}

/// Applies the bidirectional softmax read-out to each step of `[b, T, 2u]` states.
pub fn bidirectional_output(tape: &mut Tape, out: &BiOutput<Var>, states: Var) -> Result<Var> {
    let s = tape.shape(states).to_vec();
    let units = tape.shape(out.forward_weight)[0];
    if s.len() != 3 || s[2] != 2 * units {
        return Err(Error::dim("bidirectional_output", &s, tape.shape(out.forward_weight)));
    }
    let mut steps = Vec::with_capacity(s[1]);
    for t in 0..s[1] {
        let step = tape.time_step(states, t)?;
        // Column selectors split [h ‖ z] back into the two directions.
        let mut take_h = Tensor::zeros([2 * units, units]);
        let mut take_z = Tensor::zeros([2 * units, units]);
        for k in 0..units {
            take_h.data_mut()[k * units + k] = 1.0;
            take_z.data_mut()[(units + k) * units + k] = 1.0;
        }
        let sel_h = tape.constant(take_h);
        let sel_z = tape.constant(take_z);
        let h = tape.matmul(step, sel_h)?;
        let z = tape.matmul(step, sel_z)?;
        let a = tape.matmul(h, out.forward_weight)?;
        let c = tape.matmul(z, out.backward_weight)?;
        let sum = tape.add(a, c)?;
        let logits = tape.add_bias(sum, out.bias)?;
        steps.push(tape.softmax_rows(logits)?);
    }
    tape.stack_time(&steps)
}

/// `[b, d] → [b, 1, d]`: presents the whole feature vector as a single time step.
pub fn reshape_to_sequence(tape: &mut Tape, features: Var) -> Result<Var> {
    let s = tape.shape(features).to_vec();
    if s.len() != 2 {
        return Err(Error::dim("reshape_to_sequence", &s, &[0, 0]));
    }
    tape.reshape(features, [s[0], 1, s[1]])
}
