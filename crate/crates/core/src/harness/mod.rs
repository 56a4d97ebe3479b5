//! Experiment workflows behind the command-line tool. Every command writes
//! into its run directory: `config.txt`, CSV metrics, checkpoints and
//! `summary.txt`.

mod config;

pub use config::{DatasetKind, ExperimentConfig};

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;

use crate::autodiff::OpKind;
use crate::checkpoint::Checkpoint;
use crate::data::{kfold_split, load_cifar10_binary, load_idx, ratio_split, synthetic_dataset, tta_predict, Dataset, FoldAssignment};
use crate::ensemble::{avg_ensemble, disagreements, prune_top_k, E2EHead, EnsembleBatch};
use crate::error::{Error, Result};
use crate::gradcheck::{run_suite, CheckOptions, SuiteReport};
use crate::metrics::accuracy;
use crate::model::{Classifier, HeadVariant, SingleModel};
use crate::tensor::Tensor;
use crate::train::{evaluate, log_csv, staged_train, Samples, TrainOutcome};
use crate::SeededRng;

pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const LOG_FILE: &str = "log.csv";
pub const SUMMARY_FILE: &str = "summary.txt";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn image_shape(&self) -> (usize, usize, usize) {
        self.train.image_shape()
    }

    pub fn classes(&self) -> usize {
        self.train.classes
    }
}

/// Loads the configured dataset and carves the validation split out of the
/// training data. The split depends only on the data, never on `cfg.seed`,
/// so differently seeded runs share it.
pub fn load_splits(cfg: &ExperimentConfig) -> Result<Splits> {
    const SPLIT_SEED: u64 = 0x5_1175;
    let (train_full, test) = match cfg.dataset {
        DatasetKind::FashionMnist => {
            let d = &cfg.data_dir;
            let train = load_idx(&d.join("train-images-idx3-ubyte"), &d.join("train-labels-idx1-ubyte"), 10)?;
            let test = load_idx(&d.join("t10k-images-idx3-ubyte"), &d.join("t10k-labels-idx1-ubyte"), 10)?;
            (train, test)
        }
        DatasetKind::Cifar10 => {
            let d = &cfg.data_dir;
            let names: Vec<PathBuf> = (1..=5).map(|i| d.join(format!("data_batch_{i}.bin"))).collect();
            let refs: Vec<&Path> = names.iter().map(PathBuf::as_path).collect();
            (load_cifar10_binary(&refs)?, load_cifar10_binary(&[&d.join("test_batch.bin")])?)
        }
        DatasetKind::Synthetic => {
            let s = cfg.synthetic_size;
            let all = synthetic_dataset(
                cfg.synthetic_samples,
                (s, s, cfg.synthetic_channels),
                cfg.synthetic_classes,
                cfg.synthetic_noise,
                &mut SeededRng::seed_from_u64(SPLIT_SEED),
            )?;
            let (train, test) = ratio_split(all.len(), cfg.val_fraction, SPLIT_SEED + 1)?;
            (all.subset(&train)?, all.subset(&test)?)
        }
    };
    let train_full = if cfg.train_limit > 0 { train_full.head(cfg.train_limit)? } else { train_full };
    let test = if cfg.test_limit > 0 { test.head(cfg.test_limit)? } else { test };
    let (train_idx, val_idx) = match cfg.fold {
        Some(f) => {
            let folds = kfold_split(train_full.len(), cfg.folds, SPLIT_SEED)?;
            (folds.training(f), folds.held_out(f))
        }
        None => ratio_split(train_full.len(), cfg.val_fraction, SPLIT_SEED)?,
    };
    Ok(Splits {
        train: train_full.subset(&train_idx)?,
        val: train_full.subset(&val_idx)?,
        test,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub variant: HeadVariant,
    pub seed: u64,
    pub dir: PathBuf,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub outcome: TrainOutcome,
}

/// Trains one single model through the staged plan and saves it as a member
/// directory (config, checkpoint, log, summary).
pub fn train_single(cfg: &ExperimentConfig, splits: &Splits, variant: HeadVariant, seed: u64, dir: &Path) -> Result<RunResult> {
    let mut run_cfg = cfg.clone();
    run_cfg.variant = variant;
    run_cfg.seed = seed;
    run_cfg.out = dir.to_path_buf();
    let mut rng = SeededRng::seed_from_u64(seed);
    let mut model = SingleModel::new(
        run_cfg.backbone_config(splits.image_shape()),
        run_cfg.head_config(splits.classes()),
        &mut rng,
    )?;
    if cfg.verbose {
        eprintln!("training {variant} (seed {seed}) into {}", dir.display());
    }
    let outcome = staged_train(
        &mut model,
        &Samples::from(&splits.train),
        &Samples::from(&splits.val),
        &run_cfg.plan()?,
        &run_cfg.train_config(seed),
    )?;
    let (test_loss, test_accuracy) = evaluate(&model, &Samples::from(&splits.test), cfg.eval_batch_size)?;
    let val_accuracy = outcome.best.meta()?.val_accuracy;

    write(&dir.join(CONFIG_FILE), run_cfg.to_kv())?;
    write(&dir.join(LOG_FILE), log_csv(&outcome.log()))?;
    outcome.best.save(&dir.join(CHECKPOINT_FILE))?;
    let mut summary = format!("variant = {variant}\nseed = {seed}\n");
    for (i, s) in outcome.stages.iter().enumerate() {
        let _ = writeln!(
            summary,
            "stage {i}: start val_acc {:.4}, best val_acc {:.4}",
            s.initial_val_accuracy, s.best_val_accuracy
        );
    }
    let _ = writeln!(summary, "val_accuracy = {val_accuracy}\ntest_accuracy = {test_accuracy}\ntest_loss = {test_loss}");
    write(&dir.join(SUMMARY_FILE), summary)?;
    Ok(RunResult {
        variant,
        seed,
        dir: dir.to_path_buf(),
        val_accuracy,
        test_accuracy,
        test_loss,
        outcome,
    })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariantRow {
    pub variant: HeadVariant,
    /// Highest test accuracy over the repeats.
    pub best: f64,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

fn variant_row(variant: HeadVariant, runs: &[RunResult]) -> VariantRow {
    let accs: Vec<f64> = runs.iter().map(|r| r.test_accuracy).collect();
    let (mean, std) = mean_std(&accs);
    VariantRow {
        variant,
        best: accs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean,
        std,
        runs: accs.len(),
    }
}

fn table_csv(rows: &[VariantRow]) -> String {
    let mut s = String::from("variant,best_test_accuracy,mean,std,runs\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.variant, r.best, r.mean, r.std, r.runs);
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub runs: Vec<RunResult>,
    pub row: VariantRow,
}

/// `cfg.repeats` runs of `cfg.variant` with seeds `seed, seed+1, …`.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainSummary> {
    let splits = load_splits(cfg)?;
    write(&cfg.out.join(CONFIG_FILE), cfg.to_kv())?;
    let mut runs = Vec::with_capacity(cfg.repeats);
    for r in 0..cfg.repeats {
        let dir = cfg.out.join(format!("rep{r}"));
        runs.push(train_single(cfg, &splits, cfg.variant, cfg.seed + r as u64, &dir)?);
    }
    let row = variant_row(cfg.variant, &runs);
    let mut summary = table_csv(std::slice::from_ref(&row));
    for r in &runs {
        let _ = writeln!(summary, "{}: val {:.4} test {:.4}", r.dir.display(), r.val_accuracy, r.test_accuracy);
    }
    write(&cfg.out.join(SUMMARY_FILE), &summary)?;
    Ok(TrainSummary { runs, row })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareSummary {
    pub rows: Vec<VariantRow>,
    pub runs: Vec<RunResult>,
}

impl CompareSummary {
    pub fn table(&self) -> String {
        table_csv(&self.rows)
    }
}

/// Trains every variant in `cfg.variants` with identical seeds and budget.
pub fn cmd_compare_rnn(cfg: &ExperimentConfig) -> Result<CompareSummary> {
    let splits = load_splits(cfg)?;
    write(&cfg.out.join(CONFIG_FILE), cfg.to_kv())?;
    let mut rows = Vec::new();
    let mut all = Vec::new();
    for &variant in &cfg.variants {
        let mut runs = Vec::with_capacity(cfg.repeats);
        for r in 0..cfg.repeats {
            let dir = cfg.out.join(variant.to_string()).join(format!("rep{r}"));
            runs.push(train_single(cfg, &splits, variant, cfg.seed + r as u64, &dir)?);
        }
        rows.push(variant_row(variant, &runs));
        all.extend(runs);
    }
    let summary = CompareSummary { rows, runs: all };
    write(&cfg.out.join("comparison.csv"), summary.table())?;
    write(&cfg.out.join(SUMMARY_FILE), summary.table())?;
    Ok(summary)
}

/// A trained single model reloaded from its member directory.
#[derive(Clone, Debug)]
pub struct Member {
    pub dir: PathBuf,
    pub model: SingleModel,
}

pub fn load_member(dir: &Path, splits: &Splits) -> Result<Member> {
    let path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let cfg = ExperimentConfig::from_sources(Some(&text), &[])?;
    let mut model = SingleModel::new(
        cfg.backbone_config(splits.image_shape()),
        cfg.head_config(splits.classes()),
        &mut SeededRng::seed_from_u64(cfg.seed),
    )?;
    Checkpoint::load(&dir.join(CHECKPOINT_FILE))?.restore_params(&mut model.params)?;
    Ok(Member {
        dir: dir.to_path_buf(),
        model,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct E2ESummary {
    pub member_dirs: Vec<PathBuf>,
    pub member_val: Vec<f64>,
    pub member_test: Vec<f64>,
    pub e2e_test: f64,
    pub avg_test: f64,
    pub ext_test: f64,
    pub warnings: Vec<String>,
    pub meta: TrainOutcome,
}

impl E2ESummary {
    pub fn best_member_test(&self) -> f64 {
        self.member_test.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Pairs of members whose training predictions pick the same class on at
/// least `threshold` of the samples.
pub fn redundancy_warnings(preds: &[Tensor], threshold: f64) -> Vec<String> {
    let mut out = Vec::new();
    for i in 0..preds.len() {
        for j in i + 1..preds.len() {
            let rows = preds[i].rows() as f64;
            let agree = 1.0 - disagreements(&preds[i], &preds[j]) as f64 / rows;
            if agree >= threshold {
                out.push(format!(
                    "members {i} and {j} agree on {:.2}% of predictions; stacking redundant classifiers adds nothing",
                    100.0 * agree
                ));
            }
        }
    }
    out
}

const ENSEMBLE_SIZE: usize = 3;

/// Stacked ensemble of three level-1 models: reload (or train and rank) the
/// members, build the prediction dataset from their eval-mode outputs on the
/// training split, fit the meta-head, and report everything on the test split.
pub fn cmd_e2e3m(cfg: &ExperimentConfig) -> Result<E2ESummary> {
    let splits = load_splits(cfg)?;
    write(&cfg.out.join(CONFIG_FILE), cfg.to_kv())?;
    let mut members: Vec<Member> = if cfg.members.is_empty() {
        if cfg.level1_models < ENSEMBLE_SIZE {
            return Err(Error::Contract(format!(
                "an ensemble needs {ENSEMBLE_SIZE} members, level1_models is {}",
                cfg.level1_models
            )));
        }
        let mut out = Vec::new();
        for j in 0..cfg.level1_models {
            let dir = cfg.out.join("level1").join(format!("m{j}"));
            let run = train_single(cfg, &splits, cfg.variant, cfg.seed + j as u64, &dir)?;
            out.push(load_member(&run.dir, &splits)?);
        }
        out
    } else {
        if cfg.members.len() < ENSEMBLE_SIZE {
            return Err(Error::Contract(format!(
                "an ensemble needs {ENSEMBLE_SIZE} members, got {}",
                cfg.members.len()
            )));
        }
        cfg.members.iter().map(|d| load_member(d, &splits)).collect::<Result<_>>()?
    };

    let val = Samples::from(&splits.val);
    let mut ranked = Vec::with_capacity(members.len());
    for (i, m) in members.iter().enumerate() {
        let (loss, acc) = evaluate(&m.model, &val, cfg.eval_batch_size)?;
        ranked.push((i, acc, loss));
    }
    // Highest validation accuracy first, lower loss on ties.
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.2.total_cmp(&b.2)));
    let keep: Vec<usize> = ranked.iter().take(ENSEMBLE_SIZE).map(|r| r.0).collect();
    let member_val: Vec<f64> = ranked.iter().take(ENSEMBLE_SIZE).map(|r| r.1).collect();
    let mut chosen = Vec::with_capacity(ENSEMBLE_SIZE);
    for &i in &keep {
        chosen.push(members[i].clone());
    }
    members = chosen;

    let predict_all = |ds: &Dataset| -> Result<Vec<Tensor>> {
        members.iter().map(|m| m.model.predict(&ds.images, cfg.eval_batch_size)).collect()
    };
    let train_preds = predict_all(&splits.train)?;
    let val_preds = predict_all(&splits.val)?;
    let test_preds = predict_all(&splits.test)?;

    let warnings = redundancy_warnings(&train_preds, cfg.redundancy_threshold);
    for w in &warnings {
        eprintln!("warning: {w}");
    }

    let train_batch = EnsembleBatch::from_predictions(&train_preds, splits.train.labels.clone())?;
    let val_batch = EnsembleBatch::from_predictions(&val_preds, splits.val.labels.clone())?;
    let test_batch = EnsembleBatch::from_predictions(&test_preds, splits.test.labels.clone())?;
    train_batch.save(&cfg.out.join("ensemble_train.bin"))?;
    val_batch.save(&cfg.out.join("ensemble_val.bin"))?;
    test_batch.save(&cfg.out.join("ensemble_test.bin"))?;

    let mut head = E2EHead::new(cfg.meta_config(ENSEMBLE_SIZE, splits.classes()), &mut SeededRng::seed_from_u64(cfg.seed))?;
    let mut meta_cfg = cfg.train_config(cfg.seed);
    meta_cfg.batch_size = cfg.meta_batch_size;
    meta_cfg.augment = None;
    let meta = staged_train(
        &mut head,
        &Samples::new(train_batch.inputs.clone(), train_batch.labels.clone())?,
        &Samples::new(val_batch.inputs.clone(), val_batch.labels.clone())?,
        &cfg.meta_plan()?,
        &meta_cfg,
    )?;
    meta.best.save(&cfg.out.join("meta.ckpt"))?;
    write(&cfg.out.join(LOG_FILE), log_csv(&meta.log()))?;

    let labels = &splits.test.labels;
    let e2e_test = accuracy(&head.predict(&test_batch.inputs, cfg.eval_batch_size)?, labels)?;
    let member_test = test_preds.iter().map(|p| accuracy(p, labels)).collect::<Result<Vec<_>>>()?;
    let avg_test = accuracy(&avg_ensemble(&test_preds)?, labels)?;
    let pruned = test_preds.iter().map(|p| prune_top_k(p, cfg.prune_top_k)).collect::<Result<Vec<_>>>()?;
    let ext_test = accuracy(&avg_ensemble(&pruned)?, labels)?;

    let member_dirs: Vec<PathBuf> = members.iter().map(|m| m.dir.clone()).collect();
    let mut summary = String::from("method,test_accuracy\n");
    for (d, a) in member_dirs.iter().zip(&member_test) {
        let _ = writeln!(summary, "member {},{a}", d.display());
    }
    let _ = writeln!(summary, "E2E-3M,{e2e_test}\nAVG-3M,{avg_test}\nEXT-Softmax,{ext_test}");
    for w in &warnings {
        let _ = writeln!(summary, "warning: {w}");
    }
    write(&cfg.out.join(SUMMARY_FILE), summary)?;
    Ok(E2ESummary {
        member_dirs,
        member_val,
        member_test,
        e2e_test,
        avg_test,
        ext_test,
        warnings,
        meta,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleEvalSummary {
    pub member_test: Vec<f64>,
    pub avg_test: f64,
    pub ext_test: f64,
    /// Test rows where AVG and EXT pick different classes.
    pub disagreements: usize,
    /// Per member: whether cropped prediction beat the single pass on validation.
    pub tta_selected: Vec<bool>,
    pub report: String,
}

/// Per-member, AVG and EXT accuracies on the test split. With `tta` set,
/// each member uses random-crop averaging or a single pass, whichever scores
/// higher on the validation split.
pub fn cmd_ensemble_eval(cfg: &ExperimentConfig) -> Result<EnsembleEvalSummary> {
    if cfg.members.is_empty() {
        return Err(Error::Contract("ensemble-eval needs at least one member directory".into()));
    }
    let splits = load_splits(cfg)?;
    write(&cfg.out.join(CONFIG_FILE), cfg.to_kv())?;
    let members = cfg.members.iter().map(|d| load_member(d, &splits)).collect::<Result<Vec<_>>>()?;
    let (h, w, _) = splits.image_shape();
    if cfg.tta && (cfg.augment_config.crop != h || cfg.augment_config.crop != w) {
        return Err(Error::Config(format!(
            "TTA crop {} must match the {h}×{w} model input",
            cfg.augment_config.crop
        )));
    }
    let mut report = String::from("method,val_accuracy,test_accuracy\n");
    let mut preds = Vec::with_capacity(members.len());
    let mut tta_selected = Vec::with_capacity(members.len());
    let mut rng = SeededRng::seed_from_u64(cfg.augment_config.seed);
    for m in &members {
        let plain_val = accuracy(&m.model.predict(&splits.val.images, cfg.eval_batch_size)?, &splits.val.labels)?;
        let mut use_tta = false;
        if cfg.tta {
            let tta_val = accuracy(&tta_predict(&m.model, &splits.val.images, &cfg.augment_config, &mut rng)?, &splits.val.labels)?;
            let _ = writeln!(report, "member {} single-pass,{plain_val},", m.dir.display());
            let _ = writeln!(report, "member {} {}-crop,{tta_val},", m.dir.display(), cfg.augment_config.crops);
            use_tta = tta_val > plain_val;
        }
        let p = if use_tta {
            tta_predict(&m.model, &splits.test.images, &cfg.augment_config, &mut rng)?
        } else {
            m.model.predict(&splits.test.images, cfg.eval_batch_size)?
        };
        tta_selected.push(use_tta);
        preds.push(p);
    }
    let labels = &splits.test.labels;
    let member_test = preds.iter().map(|p| accuracy(p, labels)).collect::<Result<Vec<_>>>()?;
    let avg = avg_ensemble(&preds)?;
    let pruned = preds.iter().map(|p| prune_top_k(p, cfg.prune_top_k)).collect::<Result<Vec<_>>>()?;
    let ext = avg_ensemble(&pruned)?;
    let (avg_test, ext_test) = (accuracy(&avg, labels)?, accuracy(&ext, labels)?);
    let disagreements = disagreements(&avg, &ext);
    for ((m, a), t) in members.iter().zip(&member_test).zip(&tta_selected) {
        let mode = if *t { "crops" } else { "single-pass" };
        let _ = writeln!(report, "member {} ({mode}),,{a}", m.dir.display());
    }
    let _ = writeln!(report, "AVG-Softmax,,{avg_test}\nEXT-Softmax,,{ext_test}");
    let _ = writeln!(report, "# AVG and EXT disagree on {disagreements} test rows");
    if cfg.tta {
        let _ = writeln!(report, "# crop-vs-single-pass choice made on validation accuracy");
    }
    write(&cfg.out.join("ensemble_eval.csv"), &report)?;
    write(&cfg.out.join(SUMMARY_FILE), &report)?;
    Ok(EnsembleEvalSummary {
        member_test,
        avg_test,
        ext_test,
        disagreements,
        tta_selected,
        report,
    })
}

/// Runs the gradient-check suite; `fault` sabotages one gradient rule.
pub fn cmd_gradcheck(fault: Option<OpKind>, seed: u64, out: Option<&Path>) -> Result<SuiteReport> {
    let report = run_suite(CheckOptions {
        fault,
        seed,
        ..CheckOptions::default()
    })?;
    if let Some(dir) = out {
        write(&dir.join("gradcheck.csv"), report.render())?;
    }
    Ok(report)
}

/// Assigns `n` samples (the training split if `None`) to `cfg.folds` folds.
pub fn cmd_kfold_split(cfg: &ExperimentConfig, n: Option<usize>) -> Result<FoldAssignment> {
    let n = match n {
        Some(n) => n,
        None => {
            let s = load_splits(cfg)?;
            s.train.len() + s.val.len()
        }
    };
    let folds = kfold_split(n, cfg.folds, cfg.seed)?;
    let mut csv = String::from("index,fold\n");
    for (i, f) in folds.fold.iter().enumerate() {
        let _ = writeln!(csv, "{i},{f}");
    }
    write(&cfg.out.join("folds.csv"), csv)?;
    let sizes = folds.sizes();
    write(
        &cfg.out.join(SUMMARY_FILE),
        format!("n = {n}\nk = {}\nseed = {}\nsizes = {sizes:?}\n", cfg.folds, cfg.seed),
    )?;
    Ok(folds)
}
