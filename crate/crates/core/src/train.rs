//! Minibatch training in stages of decreasing learning rate. Each stage keeps
//! the checkpoint with the best validation accuracy, and the next stage starts
//! from it.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::autodiff::{Tape, PROB_FLOOR};
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::data::{geometric_augment, AugmentConfig, Dataset};
use crate::error::{Error, Result};
use crate::metrics::accuracy;
use crate::model::{Classifier, Mode};
use crate::optim::{Adam, AdamConfig, DecayUnit};
use crate::params::named_mut;
use crate::tensor::Tensor;
use crate::SeededRng;

/// Inputs with leading sample axis and one label per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Samples {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if inputs.shape()[0] != labels.len() || labels.is_empty() {
            return Err(Error::Validation(format!(
                "{} inputs but {} labels",
                inputs.shape()[0],
                labels.len()
            )));
        }
        Ok(Samples { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.inputs.gather_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

impl From<&Dataset> for Samples {
    fn from(ds: &Dataset) -> Self {
        Samples {
            inputs: ds.images.clone(),
            labels: ds.labels.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage {
    pub lr: f64,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StagedPlan {
    stages: Vec<Stage>,
}

impl StagedPlan {
    pub fn new(stages: Vec<Stage>) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::Config("training plan has no stages".into()));
        }
        let mut problems = Vec::new();
        for (i, s) in stages.iter().enumerate() {
            if !(s.lr.is_finite() && s.lr > 0.0) {
                problems.push(format!("stage {} learning rate {} must be positive", i + 1, s.lr));
            }
        }
        for (i, w) in stages.windows(2).enumerate() {
            if w[1].lr >= w[0].lr {
                problems.push(format!(
                    "stage {} rate {} must be below stage {} rate {}",
                    i + 2,
                    w[1].lr,
                    i + 1,
                    w[0].lr
                ));
            }
        }
        if problems.is_empty() {
            Ok(StagedPlan { stages })
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// 1e-4 for 40 epochs, then 1e-5 and 1e-6 for 15 each.
    pub fn standard() -> Self {
        Self::with_epochs(1e-4, [40, 15, 15])
    }

    /// Three stages starting at `lr`, each a tenth of the previous.
    pub fn with_epochs(lr: f64, epochs: [usize; 3]) -> Self {
        StagedPlan {
            stages: epochs
                .iter()
                .enumerate()
                .map(|(i, &e)| Stage {
                    lr: lr / 10f64.powi(i as i32),
                    epochs: e,
                })
                .collect(),
        }
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub seed: u64,
    /// Inverse-time decay constant; `None` uses stage rate / stage epochs.
    pub decay: Option<f64>,
    pub decay_unit: DecayUnit,
    /// Train-time geometric augmentation of image batches.
    pub augment: Option<AugmentConfig>,
    /// Ends a stage early after this many epochs without a new best; `None`
    /// runs the fixed epoch budget.
    pub patience: Option<usize>,
    /// Per-epoch progress on stderr.
    pub verbose: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            eval_batch_size: 500,
            seed: 0,
            decay: None,
            decay_unit: DecayUnit::Step,
            augment: None,
            patience: None,
            verbose: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub stage: usize,
    pub epoch: usize,
    pub iteration: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

pub const LOG_HEADER: &str = "stage,epoch,iteration,lr,train_loss,train_acc,val_loss,val_acc";

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:e},{},{},{},{}",
            r.stage, r.epoch, r.iteration, r.lr, r.train_loss, r.train_acc, r.val_loss, r.val_acc
        );
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageResult {
    pub stage: usize,
    pub best: Checkpoint,
    pub best_val_accuracy: f64,
    pub best_val_loss: f64,
    /// Validation accuracy of the state the stage started from.
    pub initial_val_accuracy: f64,
    /// Loss of the stage's first training forward pass.
    pub first_batch_loss: Option<f64>,
    pub rows: Vec<LogRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub stages: Vec<StageResult>,
    pub best: Checkpoint,
}

impl TrainOutcome {
    pub fn log(&self) -> Vec<LogRow> {
        self.stages.iter().flat_map(|s| s.rows.iter().copied()).collect()
    }

    /// Best validation accuracy seen up to the end of each stage.
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut best = f64::NEG_INFINITY;
        self.stages
            .iter()
            .map(|s| {
                best = best.max(s.best_val_accuracy);
                best
            })
            .collect()
    }
}

/// Mean cross-entropy and accuracy in eval mode.
pub fn evaluate<C: Classifier>(model: &C, samples: &Samples, batch_size: usize) -> Result<(f64, f64)> {
    let preds = model.predict(&samples.inputs, batch_size)?;
    let loss = samples
        .labels
        .iter()
        .enumerate()
        .map(|(i, &l)| -preds.row(i)[l].max(PROB_FLOOR).ln())
        .sum::<f64>()
        / samples.len() as f64;
    Ok((loss, accuracy(&preds, &samples.labels)?))
}

/// The random stream of stage `stage`: a function of the seed and stage only,
/// so a stage resumed from a checkpoint replays the same batches.
pub fn stage_rng(seed: u64, stage: usize) -> SeededRng {
    let mut rng = SeededRng::seed_from_u64(seed);
    rng.set_stream(stage as u64 + 1);
    rng
}

fn quantize<C: Classifier>(model: &mut C, adam: &mut Adam) {
    for (_, t) in named_mut(model.params_mut()) {
        *t = t.to_f32_precision();
    }
    adam.quantize();
}

fn augment_batch(images: Tensor, cfg: &AugmentConfig, rng: &mut SeededRng) -> Result<Tensor> {
    if images.rank() != 4 {
        return Ok(images);
    }
    let shape = images.shape().to_vec();
    let per: usize = shape[1..].iter().product();
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.data().chunks(per) {
        let img = Tensor::new(shape[1..].to_vec(), chunk.to_vec())?;
        out.extend(geometric_augment(&img, cfg, rng)?.into_data());
    }
    Tensor::new(shape, out)
}

/// One stage of minibatch Adam. Parameters are rounded to checkpoint
/// precision before every validation pass, so the returned checkpoint
/// reproduces the validated model exactly. The model is left at its final
/// epoch; callers restore `best` if they want it.
#[allow(clippy::too_many_arguments)]
pub fn run_stage<C: Classifier>(
    model: &mut C,
    adam: &mut Adam,
    train: &Samples,
    val: &Samples,
    stage_index: usize,
    stage: Stage,
    cfg: &TrainConfig,
) -> Result<StageResult> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    adam.config.lr = stage.lr;
    adam.config.decay = cfg.decay.unwrap_or(stage.lr / stage.epochs.max(1) as f64);
    adam.config.decay_unit = cfg.decay_unit;
    adam.config.validate()?;
    adam.iterations = 0;
    let mut rng = stage_rng(cfg.seed, stage_index);

    quantize(model, adam);
    let (loss0, acc0) = evaluate(model, val, cfg.eval_batch_size)?;
    let meta = |acc, loss| CheckpointMeta {
        val_accuracy: acc,
        val_loss: loss,
        stage: stage_index,
    };
    let mut best = Checkpoint::capture(model.params(), Some(adam), meta(acc0, loss0));
    let (mut best_acc, mut best_loss) = (acc0, loss0);
    let mut first_batch_loss = None;
    let mut rows = Vec::with_capacity(stage.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stale = 0usize;

    for epoch in 1..=stage.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let (mut x, y) = train.batch(chunk);
            if let Some(aug) = &cfg.augment {
                x = augment_batch(x, aug, &mut rng)?;
            }
            let mut tape = Tape::new();
            let (probs, leaves) = model.forward(&mut tape, &x, Mode::Train, &mut rng)?;
            let loss = tape.cross_entropy_indices(probs, &y)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "training diverged: loss {value} at stage {stage_index}, epoch {epoch}, step {}",
                    adam.t + 1
                )));
            }
            first_batch_loss.get_or_insert(value);
            loss_sum += value * chunk.len() as f64;
            correct += tape
                .value(probs)
                .argmax_rows()
                .iter()
                .zip(&y)
                .filter(|(p, l)| p == l)
                .count();
            let grads = tape.backward(loss)?;
            let g: Vec<Tensor> = leaves.iter().map(|&v| grads.wrt(v)).collect();
            let mut params: Vec<&mut Tensor> = named_mut(model.params_mut()).into_iter().map(|(_, t)| t).collect();
            adam.step(&mut params, &g)?;
        }
        adam.end_epoch();
        quantize(model, adam);
        let (val_loss, val_acc) = evaluate(model, val, cfg.eval_batch_size)?;
        let row = LogRow {
            stage: stage_index,
            epoch,
            iteration: adam.t,
            lr: adam.decayed_lr(),
            train_loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            val_loss,
            val_acc,
        };
        if cfg.verbose {
            eprintln!(
                "stage {} epoch {epoch}/{}: train loss {:.4} acc {:.4}, val loss {:.4} acc {:.4}",
                stage_index, stage.epochs, row.train_loss, row.train_acc, val_loss, val_acc
            );
        }
        rows.push(row);
        if val_acc > best_acc || (val_acc == best_acc && val_loss < best_loss) {
            best_acc = val_acc;
            best_loss = val_loss;
            best = Checkpoint::capture(model.params(), Some(adam), meta(val_acc, val_loss));
            stale = 0;
        } else {
            stale += 1;
        }
        if cfg.patience.is_some_and(|p| stale >= p) {
            break;
        }
    }
    Ok(StageResult {
        stage: stage_index,
        best,
        best_val_accuracy: best_acc,
        best_val_loss: best_loss,
        initial_val_accuracy: acc0,
        first_batch_loss,
        rows,
    })
}

/// Runs every stage of `plan`, reloading the previous stage's best weights and
/// optimizer state before each new stage. The model ends at the final best.
pub fn staged_train<C: Classifier>(
    model: &mut C,
    train: &Samples,
    val: &Samples,
    plan: &StagedPlan,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut adam = new_adam(model, plan, cfg)?;
    train_from_stage(model, &mut adam, train, val, plan, cfg, 0)
}

/// Continues `plan` at `start_stage` from a checkpoint holding weights and
/// optimizer state, as a stage boundary of [`staged_train`] would.
pub fn resume_staged_train<C: Classifier>(
    model: &mut C,
    checkpoint: &Checkpoint,
    train: &Samples,
    val: &Samples,
    plan: &StagedPlan,
    cfg: &TrainConfig,
    start_stage: usize,
) -> Result<TrainOutcome> {
    if start_stage >= plan.stages().len() {
        return Err(Error::Contract(format!(
            "cannot resume at stage {start_stage} of a {}-stage plan",
            plan.stages().len()
        )));
    }
    let mut adam = new_adam(model, plan, cfg)?;
    checkpoint.restore_params(model.params_mut())?;
    checkpoint.restore_adam(model.params(), &mut adam)?;
    train_from_stage(model, &mut adam, train, val, plan, cfg, start_stage)
}

fn new_adam<C: Classifier>(model: &C, plan: &StagedPlan, cfg: &TrainConfig) -> Result<Adam> {
    let mut ac = AdamConfig::new(plan.stages()[0].lr);
    ac.decay_unit = cfg.decay_unit;
    Adam::for_params(ac, model.params())
}

fn train_from_stage<C: Classifier>(
    model: &mut C,
    adam: &mut Adam,
    train: &Samples,
    val: &Samples,
    plan: &StagedPlan,
    cfg: &TrainConfig,
    start: usize,
) -> Result<TrainOutcome> {
    let mut stages: Vec<StageResult> = Vec::new();
    for (i, &stage) in plan.stages().iter().enumerate().skip(start) {
        if let Some(prev) = stages.last() {
            prev.best.restore_params(model.params_mut())?;
            prev.best.restore_adam(model.params(), adam)?;
        }
        stages.push(run_stage(model, adam, train, val, i, stage, cfg)?);
    }
    let last = stages.last().expect("plan has at least one stage to run");
    last.best.restore_params(model.params_mut())?;
    last.best.restore_adam(model.params(), adam)?;
    let best = last.best.clone();
    Ok(TrainOutcome { stages, best })
}
