//! Single-model pipeline: conv backbone → global average pooling →
//! (reshape + recurrent cell) → Gaussian noise → dense + leaky ReLU → dense → softmax.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{bind, glorot_limit, join, leaves, param_tree, Dense, ParamTree};
use crate::rnn::{bidirectional_forward, cell_step, reshape_to_sequence, BiParams, CellKind, CellParams, HiddenState};
use crate::tensor::Tensor;
use crate::SeededRng;

/// Negative-side slope of the backbone and hidden dense activations.
pub const ACTIVATION_SLOPE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvStage {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub stages: Vec<ConvStage>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl BackboneConfig {
    /// Three stride-2 3×3 stages with 16, 32 and 64 filters.
    pub fn desk_scale(height: usize, width: usize, channels: usize) -> Self {
        let stage = |filters| ConvStage {
            filters,
            kernel: 3,
            stride: 2,
        };
        BackboneConfig {
            stages: vec![stage(16), stage(32), stage(64)],
            height,
            width,
            channels,
        }
    }

    /// Channel count after global pooling.
    pub fn feature_width(&self) -> usize {
        self.stages.last().map_or(self.channels, |s| s.filters)
    }

    /// Spatial size of the last feature map; errors if a stage would see fewer
    /// pixels than its stride.
    pub fn output_size(&self) -> Result<(usize, usize)> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::Config("backbone input resolution must be positive".into()));
        }
        let (mut h, mut w) = (self.height, self.width);
        for (i, s) in self.stages.iter().enumerate() {
            if s.filters == 0 || s.kernel == 0 || s.stride == 0 {
                return Err(Error::Config(format!("backbone stage {i} has a zero size")));
            }
            if h < s.stride || w < s.stride {
                return Err(Error::Config(format!(
                    "input {}×{} is too small for {} stages: stage {i} sees {h}×{w}",
                    self.height,
                    self.width,
                    self.stages.len()
                )));
            }
            h = h.div_ceil(s.stride);
            w = w.div_ceil(s.stride);
        }
        Ok((h, w))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadVariant {
    /// No recurrent module.
    Std,
    Rnn,
    Lstm,
    Gru,
    BiLstm,
}

impl HeadVariant {
    pub const ALL: [HeadVariant; 5] = [
        HeadVariant::Std,
        HeadVariant::Rnn,
        HeadVariant::Lstm,
        HeadVariant::Gru,
        HeadVariant::BiLstm,
    ];
}

impl fmt::Display for HeadVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadVariant::Std => "STD",
            HeadVariant::Rnn => "RNN",
            HeadVariant::Lstm => "LSTM",
            HeadVariant::Gru => "GRU",
            HeadVariant::BiLstm => "BiLSTM",
        })
    }
}

impl FromStr for HeadVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HeadVariant::ALL
            .into_iter()
            .find(|v| v.to_string().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown head variant `{s}` (expected STD, RNN, LSTM, GRU or BiLSTM)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub variant: HeadVariant,
    /// Output width of the recurrent module; BiLSTM splits it across the two directions.
    pub rnn_units: usize,
    pub noise_stddev: f64,
    pub fc_neurons: usize,
    pub classes: usize,
}

impl HeadConfig {
    pub fn new(variant: HeadVariant, classes: usize) -> Self {
        HeadConfig {
            variant,
            rnn_units: 2048,
            noise_stddev: 0.1,
            fc_neurons: 1024,
            classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.classes == 0 {
            problems.push("class count must be positive".to_string());
        }
        if self.fc_neurons == 0 {
            problems.push("fc_neurons must be positive".to_string());
        }
        if self.noise_stddev.is_nan() || self.noise_stddev < 0.0 {
            problems.push(format!("noise stddev {} is negative", self.noise_stddev));
        }
        if self.variant != HeadVariant::Std && self.rnn_units == 0 {
            problems.push("rnn_units must be positive".to_string());
        }
        if self.variant == HeadVariant::BiLstm && !self.rnn_units.is_multiple_of(2) {
            problems.push(format!("BiLSTM needs an even unit count, got {}", self.rnn_units));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Width of the features entering the noise layer.
    pub fn recurrent_width(&self, features: usize) -> usize {
        match self.variant {
            HeadVariant::Std => features,
            _ => self.rnn_units,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T = Tensor> {
    pub kernel: T,
    pub bias: T,
}
param_tree!(ConvParams { leaves: [kernel, bias] });

/// The recurrent module of a head: a single cell or a bidirectional pair.
#[derive(Clone, Debug, PartialEq)]
pub enum Recurrent<T = Tensor> {
    Cell(CellParams<T>),
    Bidirectional(BiParams<T>),
}

impl<T> ParamTree<T> for Recurrent<T> {
    type Of<U> = Recurrent<U>;

    fn map_leaves<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Recurrent<U> {
        match self {
            Recurrent::Cell(p) => Recurrent::Cell(p.map_leaves(f)),
            Recurrent::Bidirectional(p) => Recurrent::Bidirectional(p.map_leaves(f)),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        match self {
            Recurrent::Cell(p) => p.visit(prefix, f),
            Recurrent::Bidirectional(p) => p.visit(&join(prefix, "bi"), f),
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        match self {
            Recurrent::Cell(p) => p.visit_mut(prefix, f),
            Recurrent::Bidirectional(p) => p.visit_mut(&join(prefix, "bi"), f),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SingleModelParams<T = Tensor> {
    pub backbone: Vec<ConvParams<T>>,
    pub recurrent: Option<Recurrent<T>>,
    pub fc: Dense<T>,
    pub classifier: Dense<T>,
}
param_tree!(SingleModelParams { leaves: [], nested: [backbone, recurrent, fc, classifier] });

/// Something trainable that maps a batch of inputs to class probabilities.
pub trait Classifier {
    type Params: ParamTree<Tensor>;

    fn params(&self) -> &Self::Params;

    fn params_mut(&mut self) -> &mut Self::Params;

    fn classes(&self) -> usize;

    /// Records one forward pass. Returns the probability rows and the bound
    /// parameter leaves in traversal order.
    fn forward(&self, tape: &mut Tape, inputs: &Tensor, mode: Mode, rng: &mut SeededRng) -> Result<(Var, Vec<Var>)>;

    /// Eval-mode probabilities, computed `batch_size` rows at a time.
    fn predict(&self, inputs: &Tensor, batch_size: usize) -> Result<Tensor> {
        let n = inputs.rows();
        let mut out = Vec::with_capacity(n * self.classes());
        // Eval mode consumes no randomness.
        let mut rng = <SeededRng as rand::SeedableRng>::seed_from_u64(0);
        for start in (0..n).step_by(batch_size.max(1)) {
            let idx: Vec<usize> = (start..(start + batch_size.max(1)).min(n)).collect();
            let mut tape = Tape::new();
            let (probs, _) = self.forward(&mut tape, &inputs.gather_rows(&idx), Mode::Eval, &mut rng)?;
            out.extend_from_slice(tape.value(probs).data());
        }
        Tensor::new([n, self.classes()], out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SingleModel {
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub params: SingleModelParams,
}

impl SingleModel {
    pub fn new(backbone: BackboneConfig, head: HeadConfig, rng: &mut SeededRng) -> Result<Self> {
        backbone.output_size()?;
        head.validate()?;
        let mut convs = Vec::with_capacity(backbone.stages.len());
        let mut channels = backbone.channels;
        for s in &backbone.stages {
            let fan_in = s.kernel * s.kernel * channels;
            let fan_out = s.kernel * s.kernel * s.filters;
            convs.push(ConvParams {
                kernel: Tensor::uniform([s.kernel, s.kernel, channels, s.filters], glorot_limit(fan_in, fan_out), rng),
                bias: Tensor::zeros([s.filters]),
            });
            channels = s.filters;
        }
        let d = backbone.feature_width();
        let recurrent = match head.variant {
            HeadVariant::Std => None,
            HeadVariant::Rnn => Some(Recurrent::Cell(CellParams::init(CellKind::Rnn, d, head.rnn_units, rng))),
            HeadVariant::Lstm => Some(Recurrent::Cell(CellParams::init(CellKind::Lstm, d, head.rnn_units, rng))),
            HeadVariant::Gru => Some(Recurrent::Cell(CellParams::init(CellKind::Gru, d, head.rnn_units, rng))),
            HeadVariant::BiLstm => Some(Recurrent::Bidirectional(BiParams::init(
                CellKind::Lstm,
                d,
                head.rnn_units / 2,
                rng,
            ))),
        };
        let width = head.recurrent_width(d);
        let fc = Dense::init(width, head.fc_neurons, rng);
        let classifier = Dense::init(head.fc_neurons, head.classes, rng);
        Ok(SingleModel {
            backbone,
            head,
            params: SingleModelParams {
                backbone: convs,
                recurrent,
                fc,
                classifier,
            },
        })
    }

    /// Records the pipeline for already-bound parameters.
    pub fn forward_bound(
        &self,
        tape: &mut Tape,
        p: &SingleModelParams<Var>,
        images: Var,
        mode: Mode,
        rng: &mut SeededRng,
    ) -> Result<Var> {
        let features = backbone_forward(tape, &self.backbone, &p.backbone, images)?;
        let pooled = global_average_pool(tape, features)?;
        let mut x = match &p.recurrent {
            None => pooled,
            Some(rec) => recurrent_module(tape, rec, pooled)?,
        };
        x = gaussian_noise(tape, x, self.head.noise_stddev, mode, rng)?;
        let hidden = p.fc.forward(tape, x)?;
        let hidden = tape.leaky_relu(hidden, ACTIVATION_SLOPE);
        let logits = p.classifier.forward(tape, hidden)?;
        tape.softmax_rows(logits)
    }
}

impl Classifier for SingleModel {
    type Params = SingleModelParams;

    fn params(&self) -> &SingleModelParams {
        &self.params
    }

    fn params_mut(&mut self) -> &mut SingleModelParams {
        &mut self.params
    }

    fn classes(&self) -> usize {
        self.head.classes
    }

    fn forward(&self, tape: &mut Tape, inputs: &Tensor, mode: Mode, rng: &mut SeededRng) -> Result<(Var, Vec<Var>)> {
        let expected = [self.backbone.height, self.backbone.width, self.backbone.channels];
        if inputs.rank() != 4 || inputs.shape()[1..] != expected {
            return Err(Error::dim("single_model_forward", inputs.shape(), &expected));
        }
        let bound = bind(&self.params, tape);
        let images = tape.constant(inputs.clone());
        let probs = self.forward_bound(tape, &bound, images, mode, rng)?;
        Ok((probs, leaves(&bound)))
    }
}

/// Stacked conv → leaky ReLU stages.
pub fn backbone_forward(tape: &mut Tape, cfg: &BackboneConfig, params: &[ConvParams<Var>], images: Var) -> Result<Var> {
    cfg.output_size()?;
    if params.len() != cfg.stages.len() {
        return Err(Error::Config(format!(
            "backbone has {} stages but {} parameter sets",
            cfg.stages.len(),
            params.len()
        )));
    }
    let mut x = images;
    for (stage, p) in cfg.stages.iter().zip(params) {
        let y = tape.conv2d(x, p.kernel, p.bias, stage.stride)?;
        x = tape.leaky_relu(y, ACTIVATION_SLOPE);
    }
    Ok(x)
}

/// `[b, h, w, f] → [b, f]`, the mean over spatial positions.
pub fn global_average_pool(tape: &mut Tape, features: Var) -> Result<Var> {
    tape.global_avg_pool(features)
}

/// Reshape to one time step, run the cell from a zero state, flatten back to `[b, width]`.
fn recurrent_module(tape: &mut Tape, rec: &Recurrent<Var>, pooled: Var) -> Result<Var> {
    let seq = reshape_to_sequence(tape, pooled)?;
    let batch = tape.shape(pooled)[0];
    match rec {
        Recurrent::Cell(cell) => {
            let x = tape.time_step(seq, 0)?;
            let units = match cell {
                CellParams::Rnn(p) => tape.shape(p.gate.bias)[0],
                CellParams::Lstm(p) => tape.shape(p.forget.bias)[0],
                CellParams::Gru(p) => tape.shape(p.reset.bias)[0],
            };
            let state = HiddenState::zeros(tape, cell.kind(), batch, units);
            Ok(cell_step(tape, cell, x, state)?.h)
        }
        Recurrent::Bidirectional(bi) => {
            let out = bidirectional_forward(tape, bi, seq)?;
            let width = tape.shape(out)[2];
            tape.reshape(out, [batch, width])
        }
    }
}

/// Additive i.i.d. `N(0, stddev²)` noise in train mode; identity in eval mode.
/// The gradient passes through unchanged.
pub fn gaussian_noise(tape: &mut Tape, x: Var, stddev: f64, mode: Mode, rng: &mut SeededRng) -> Result<Var> {
    if stddev.is_nan() || stddev < 0.0 {
        return Err(Error::Config(format!("noise stddev {stddev} is negative")));
    }
    if mode == Mode::Eval || stddev == 0.0 {
        return Ok(x);
    }
    let noise = sample_noise(tape.shape(x).to_vec(), stddev, rng)?;
    let n = tape.constant(noise);
    tape.add(x, n)
}

/// Tensor-level form of [`gaussian_noise`].
pub fn add_gaussian_noise(x: &Tensor, stddev: f64, mode: Mode, rng: &mut SeededRng) -> Result<Tensor> {
    if stddev.is_nan() || stddev < 0.0 {
        return Err(Error::Config(format!("noise stddev {stddev} is negative")));
    }
    if mode == Mode::Eval || stddev == 0.0 {
        return Ok(x.clone());
    }
    let noise = sample_noise(x.shape().to_vec(), stddev, rng)?;
    x.zip_map(&noise, |a, b| a + b)
}

fn sample_noise(shape: Vec<usize>, stddev: f64, rng: &mut SeededRng) -> Result<Tensor> {
    let normal = Normal::new(0.0, stddev).map_err(|e| Error::Config(e.to_string()))?;
    let mut noise = Tensor::zeros(shape);
    for v in noise.data_mut() {
        *v = normal.sample(rng);
    }
    Ok(noise)
}
