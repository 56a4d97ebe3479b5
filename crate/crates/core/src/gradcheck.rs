//! Central-difference gradient checks for every differentiable op, every
//! recurrent cell, every head variant and the ensemble meta-head.

use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;

use crate::autodiff::{OpKind, Tape, Var};
use crate::ensemble::{e2e_head_forward, E2EConfig, E2EHead};
use crate::error::{Error, Result};
use crate::model::{BackboneConfig, ConvStage, HeadConfig, HeadVariant, Mode, SingleModel};
use crate::params::{bind, leaves, named_mut, Dense, ParamTree};
use crate::rnn::{bidirectional_forward, bidirectional_output, cell_step, BiOutput, BiParams, CellKind, CellParams, HiddenState};
use crate::tensor::Tensor;
use crate::SeededRng;

pub const TOLERANCE: f64 = 1e-4;
pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    /// Largest `|analytic − numeric| / max(1, |numeric|)` over checked entries.
    pub max_rel_error: f64,
    pub entries: usize,
    pub passed: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckOptions {
    pub step: f64,
    /// Entries sampled per parameter tensor; `None` checks all of them.
    pub max_entries_per_leaf: Option<usize>,
    /// Gradient rule to sabotage on the analytic pass.
    pub fault: Option<OpKind>,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            step: DEFAULT_STEP,
            max_entries_per_leaf: None,
            fault: None,
            seed: 0,
        }
    }
}

/// Compares reverse-mode gradients of the scalar `loss` with central
/// differences `(f(θ + h) − f(θ − h)) / 2h`, entry by entry.
pub fn finite_difference_check<P, F>(params: &P, loss: F, opts: &CheckOptions) -> Result<(f64, usize)>
where
    P: ParamTree<Tensor> + Clone,
    P::Of<Var>: ParamTree<Var>,
    F: Fn(&mut Tape, &P::Of<Var>) -> Result<Var>,
{
    if !(opts.step > 0.0 && opts.step <= 1e-2) {
        return Err(Error::Config(format!("finite-difference step {} not in (0, 1e-2]", opts.step)));
    }
    let mut tape = Tape::new();
    if let Some(kind) = opts.fault {
        tape.inject_fault(kind);
    }
    let bound = bind(params, &mut tape);
    let out = loss(&mut tape, &bound)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = leaves(&bound).into_iter().map(|v| grads.wrt(v)).collect();

    let eval = |p: &P| -> Result<f64> {
        let mut t = Tape::new();
        let b = bind(p, &mut t);
        let v = loss(&mut t, &b)?;
        Ok(t.value(v).data()[0])
    };
    let mut rng = SeededRng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let (mut worst, mut count) = (0.0f64, 0usize);
    let sizes: Vec<usize> = named_mut(&mut work).iter().map(|(_, t)| t.len()).collect();
    for (leaf, &size) in sizes.iter().enumerate() {
        let entries: Vec<usize> = match opts.max_entries_per_leaf {
            Some(k) if k < size => sample(&mut rng, size, k).into_vec(),
            _ => (0..size).collect(),
        };
        for j in entries {
            let original = named_mut(&mut work)[leaf].1.data()[j];
            named_mut(&mut work)[leaf].1.data_mut()[j] = original + opts.step;
            let up = eval(&work)?;
            named_mut(&mut work)[leaf].1.data_mut()[j] = original - opts.step;
            let down = eval(&work)?;
            named_mut(&mut work)[leaf].1.data_mut()[j] = original;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic[leaf].data()[j];
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            worst = if rel.is_nan() { f64::INFINITY } else { worst.max(rel) };
            count += 1;
        }
    }
    Ok((worst, count))
}

/// `Σ w ⊙ x` with fixed random weights, turning any tensor output into a scalar
/// whose gradient exercises every entry differently.
fn probe(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let w = Tensor::uniform(tape.shape(x).to_vec(), 1.0, &mut SeededRng::seed_from_u64(seed ^ 0x5eed));
    let w = tape.constant(w);
    let y = tape.mul(x, w)?;
    Ok(tape.sum(y))
}

/// Uniform values in `±1` kept at least `0.05` away from zero, so kinks at the
/// origin stay out of the difference stencil.
fn away_from_zero(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    Tensor::uniform(shape.to_vec(), 1.0, rng).map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v })
}

struct Suite {
    opts: CheckOptions,
    reports: Vec<CheckReport>,
    rng: SeededRng,
}

impl Suite {
    fn record(&mut self, name: &str, result: Result<(f64, usize)>) -> Result<()> {
        let (err, entries) = result?;
        self.reports.push(CheckReport {
            name: name.to_string(),
            max_rel_error: err,
            entries,
            passed: err < TOLERANCE,
        });
        Ok(())
    }

    fn tensors(&mut self, shapes: &[&[usize]]) -> Vec<Tensor> {
        shapes.iter().map(|s| away_from_zero(s, &mut self.rng)).collect()
    }

    fn op<F>(&mut self, name: &str, shapes: &[&[usize]], f: F) -> Result<()>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let inputs = self.tensors(shapes);
        let opts = self.opts;
        let result = finite_difference_check(&inputs, |t, v: &Vec<Var>| f(t, v), &opts);
        self.record(name, result)
    }
}

fn op_checks(s: &mut Suite) -> Result<()> {
    s.op("matmul", &[&[3, 4], &[4, 2]], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        probe(t, y, 1)
    })?;
    s.op("add", &[&[2, 3], &[2, 3]], |t, v| {
        let y = t.add(v[0], v[1])?;
        probe(t, y, 2)
    })?;
    s.op("sub", &[&[2, 3], &[2, 3]], |t, v| {
        let y = t.sub(v[0], v[1])?;
        probe(t, y, 3)
    })?;
    s.op("mul", &[&[2, 3], &[2, 3]], |t, v| {
        let y = t.mul(v[0], v[1])?;
        probe(t, y, 4)
    })?;
    s.op("scale", &[&[2, 3]], |t, v| {
        let y = t.scale(v[0], -1.7);
        probe(t, y, 5)
    })?;
    s.op("add_bias", &[&[3, 4], &[4]], |t, v| {
        let y = t.add_bias(v[0], v[1])?;
        probe(t, y, 6)
    })?;
    s.op("sigmoid", &[&[2, 5]], |t, v| {
        let y = t.sigmoid(v[0]);
        probe(t, y, 7)
    })?;
    s.op("tanh", &[&[2, 5]], |t, v| {
        let y = t.tanh(v[0]);
        probe(t, y, 8)
    })?;
    s.op("leaky_relu", &[&[2, 5]], |t, v| {
        let y = t.leaky_relu(v[0], 0.1);
        probe(t, y, 9)
    })?;
    s.op("softmax_rows", &[&[3, 4]], |t, v| {
        let y = t.softmax_rows(v[0])?;
        probe(t, y, 10)
    })?;
    // Positive "probabilities" so the logarithm is smooth around every entry.
    let probs = s.tensors(&[&[3, 4]]).into_iter().map(|p| p.map(|x| 0.2 + x.abs())).collect::<Vec<_>>();
    let opts = s.opts;
    let r = finite_difference_check(&probs, |t, v: &Vec<Var>| t.cross_entropy_indices(v[0], &[0, 3, 1]), &opts);
    s.record("cross_entropy", r)?;
    s.op("sum", &[&[2, 3]], |t, v| Ok(t.sum(v[0])))?;
    s.op("conv2d", &[&[2, 5, 5, 2], &[3, 3, 2, 3], &[3]], |t, v| {
        let y = t.conv2d(v[0], v[1], v[2], 2)?;
        probe(t, y, 11)
    })?;
    s.op("conv2d_stride1", &[&[1, 4, 3, 2], &[3, 3, 2, 2], &[2]], |t, v| {
        let y = t.conv2d(v[0], v[1], v[2], 1)?;
        probe(t, y, 12)
    })?;
    s.op("global_average_pool", &[&[2, 3, 3, 4]], |t, v| {
        let y = t.global_avg_pool(v[0])?;
        probe(t, y, 13)
    })?;
    s.op("reshape", &[&[2, 6]], |t, v| {
        let y = t.reshape(v[0], [2, 3, 2])?;
        probe(t, y, 14)
    })?;
    s.op("concat", &[&[2, 3], &[2, 2]], |t, v| {
        let y = t.concat(&[v[0], v[1]])?;
        probe(t, y, 15)
    })?;
    s.op("time_step", &[&[2, 3, 4]], |t, v| {
        let y = t.time_step(v[0], 1)?;
        probe(t, y, 16)
    })?;
    s.op("stack_time", &[&[2, 4], &[2, 4], &[2, 4]], |t, v| {
        let y = t.stack_time(v)?;
        probe(t, y, 17)
    })?;
    Ok(())
}

// A cell with its inputs and previous state as trainable leaves.
crate::params::param_tree!(CellCaseTree { leaves: [x, h0, c0], nested: [cell] });

#[derive(Clone)]
struct CellCaseTree<T> {
    cell: CellParams<T>,
    x: T,
    h0: T,
    c0: T,
}

fn cell_checks(s: &mut Suite) -> Result<()> {
    let (b, d, u) = (2, 3, 4);
    for kind in [CellKind::Rnn, CellKind::Lstm, CellKind::Gru] {
        let mut cell = CellParams::init(kind, d, u, &mut s.rng);
        if let CellParams::Rnn(p) = &mut cell {
            p.output = Some(Dense::init(u, 3, &mut s.rng));
        }
        let tree = CellCaseTree {
            cell,
            x: away_from_zero(&[b, d], &mut s.rng),
            h0: away_from_zero(&[b, u], &mut s.rng),
            c0: away_from_zero(&[b, u], &mut s.rng),
        };
        let opts = s.opts;
        let r = finite_difference_check(
            &tree,
            |t, p: &CellCaseTree<Var>| {
                let state = HiddenState {
                    h: p.h0,
                    cell: (kind == CellKind::Lstm).then_some(p.c0),
                };
                let next = cell_step(t, &p.cell, p.x, state)?;
                let mut y = probe(t, next.h, 20)?;
                if let Some(c) = next.cell {
                    let yc = probe(t, c, 21)?;
                    y = t.add(y, yc)?;
                }
                if let CellParams::Rnn(rp) = &p.cell {
                    let o = crate::rnn::rnn_output(t, rp, next.h)?;
                    let yo = probe(t, o, 22)?;
                    y = t.add(y, yo)?;
                }
                Ok(y)
            },
            &opts,
        );
        s.record(&format!("cell_{kind}"), r)?;
    }

    // Two-step sequence through a bidirectional pair with the softmax read-out.
    let mut bi = BiParams::init(CellKind::Lstm, d, u, &mut s.rng);
    bi.output = Some(BiOutput {
        forward_weight: Tensor::uniform([u, 3], 0.8, &mut s.rng),
        backward_weight: Tensor::uniform([u, 3], 0.8, &mut s.rng),
        bias: Tensor::uniform([3], 0.2, &mut s.rng),
    });
    let seq = away_from_zero(&[b, 2, d], &mut s.rng);
    let opts = s.opts;
    let r = finite_difference_check(
        &(bi, seq),
        |t, (p, x): &(BiParams<Var>, Var)| {
            let states = bidirectional_forward(t, p, *x)?;
            let out = bidirectional_output(t, p.output.as_ref().unwrap(), states)?;
            let a = probe(t, states, 23)?;
            let o = probe(t, out, 24)?;
            t.add(a, o)
        },
        &opts,
    );
    s.record("cell_bidirectional", r)?;

    // Full LSTM step feeding a softmax and cross-entropy.
    let cell = CellParams::init(CellKind::Lstm, d, u, &mut s.rng);
    let x = away_from_zero(&[b, d], &mut s.rng);
    let opts = s.opts;
    let r = finite_difference_check(
        &(cell, x),
        |t, (p, x): &(CellParams<Var>, Var)| {
            let state = HiddenState::zeros(t, CellKind::Lstm, b, u);
            let next = cell_step(t, p, *x, state)?;
            let probs = t.softmax_rows(next.h)?;
            t.cross_entropy_indices(probs, &[1, 3])
        },
        &opts,
    );
    s.record("lstm_step_loss", r)
}

/// The 2-class, 8×8 toy pipeline used for whole-model checks.
pub fn toy_model(variant: HeadVariant, rng: &mut SeededRng) -> Result<SingleModel> {
    let backbone = BackboneConfig {
        stages: vec![
            ConvStage {
                filters: 3,
                kernel: 3,
                stride: 2,
            },
            ConvStage {
                filters: 4,
                kernel: 3,
                stride: 2,
            },
        ],
        height: 8,
        width: 8,
        channels: 1,
    };
    let mut head = HeadConfig::new(variant, 2);
    head.rnn_units = 4;
    head.fc_neurons = 5;
    SingleModel::new(backbone, head, rng)
}

fn model_checks(s: &mut Suite) -> Result<()> {
    let images = Tensor::uniform([2, 8, 8, 1], 1.0, &mut s.rng).map(f64::abs);
    for variant in HeadVariant::ALL {
        let model = toy_model(variant, &mut s.rng)?;
        let opts = s.opts;
        let seed = s.opts.seed;
        let r = finite_difference_check(
            &model.params,
            |t, p| {
                let x = t.constant(images.clone());
                // Reseeded per pass so every evaluation draws the same noise.
                let mut rng = SeededRng::seed_from_u64(seed ^ 0xface);
                let probs = model.forward_bound(t, p, x, Mode::Train, &mut rng)?;
                t.cross_entropy_indices(probs, &[0, 1])
            },
            &opts,
        );
        s.record(&format!("model_{variant}"), r)?;
    }

    let mut cfg = E2EConfig::new(3, 2);
    cfg.hidden = 6;
    let head = E2EHead::new(cfg.clone(), &mut s.rng)?;
    let inputs = Tensor::uniform([4, 6], 1.0, &mut s.rng).map(f64::abs);
    let opts = s.opts;
    let r = finite_difference_check(
        &head.params,
        |t, p| {
            let x = t.constant(inputs.clone());
            let mut rng = SeededRng::seed_from_u64(0);
            let probs = e2e_head_forward(t, &cfg, p, x, Mode::Eval, &mut rng)?;
            t.cross_entropy_indices(probs, &[0, 1, 1, 0])
        },
        &opts,
    );
    s.record("e2e_head", r)
}

pub struct SuiteReport {
    pub checks: Vec<CheckReport>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&CheckReport> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    pub fn render(&self) -> String {
        let mut out = String::from("check,max_rel_error,entries,status\n");
        for c in &self.checks {
            out.push_str(&format!(
                "{},{:.3e},{},{}\n",
                c.name,
                c.max_rel_error,
                c.entries,
                if c.passed { "PASS" } else { "FAIL" }
            ));
        }
        out
    }
}

/// Runs every check. Large parameter tensors in the whole-model checks are
/// sampled per `opts.max_entries_per_leaf`.
pub fn run_suite(opts: CheckOptions) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut s = Suite {
        opts,
        reports: Vec::new(),
        rng: SeededRng::seed_from_u64(opts.seed),
    };
    op_checks(&mut s)?;
    cell_checks(&mut s)?;
    model_checks(&mut s)?;
    Ok(SuiteReport {
        checks: s.reports,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_covers_every_op() {
        let report = run_suite(CheckOptions::default()).unwrap();
        for c in &report.checks {
            assert!(c.passed, "{} failed with {}", c.name, c.max_rel_error);
        }
        for kind in OpKind::DIFFERENTIABLE {
            assert!(report.checks.iter().any(|c| c.name == kind.name()), "no check for {kind}");
        }
        for name in ["cell_RNN", "cell_LSTM", "cell_GRU", "cell_bidirectional", "e2e_head"] {
            assert!(report.checks.iter().any(|c| c.name == name), "no check {name}");
        }
    }

    #[test]
    fn injected_fault_is_reported_by_name() {
        let opts = CheckOptions {
            fault: Some(OpKind::Tanh),
            ..CheckOptions::default()
        };
        let report = run_suite(opts).unwrap();
        let failed: Vec<_> = report.failures().iter().map(|c| c.name.clone()).collect();
        assert!(failed.contains(&"tanh".to_string()), "{failed:?}");
        assert!(!failed.contains(&"sigmoid".to_string()));
    }

    #[test]
    fn step_must_be_small_and_positive() {
        let opts = CheckOptions {
            step: 0.1,
            ..CheckOptions::default()
        };
        let r = finite_difference_check(&Tensor::ones([1]), |t, v: &Var| Ok(t.sum(*v)), &opts);
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
