//! Combining several classifiers' probability rows: plain averaging, averaging
//! after pruning each row to its top entry, and a trainable meta-head over the
//! concatenated rows.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{Classifier, Mode};
use crate::params::{bind, join, leaves, Dense, ParamTree};
use crate::tensor::{argmax, Tensor};
use crate::SeededRng;

const SUM_TOLERANCE: f64 = 1e-6;

/// One classifier's class-probability row.
#[derive(Clone, Debug, PartialEq)]
pub struct DistributionVector(Vec<f64>);

impl DistributionVector {
    /// Entries in `[0, 1]` summing to 1 (± 1e-6).
    pub fn new(values: Vec<f64>) -> Result<Self> {
        Self::check(&values, false)?;
        Ok(DistributionVector(values))
    }

    /// Relaxed form for pruned rows: non-negative with sum at most 1.
    pub fn pruned(values: Vec<f64>) -> Result<Self> {
        Self::check(&values, true)?;
        Ok(DistributionVector(values))
    }

    fn check(values: &[f64], relaxed: bool) -> Result<()> {
        if values.is_empty() {
            return Err(Error::Contract("distribution vector has no classes".into()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::Validation(format!("distribution entries outside [0, 1]: {values:?}")));
        }
        let total: f64 = values.iter().sum();
        let ok = if relaxed {
            total <= 1.0 + SUM_TOLERANCE
        } else {
            (total - 1.0).abs() <= SUM_TOLERANCE
        };
        if !ok {
            return Err(Error::Validation(format!("distribution sums to {total}")));
        }
        Ok(())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn classes(&self) -> usize {
        self.0.len()
    }
}

/// `[Δ_1 Δ_2 … Δ_n]`, the member rows laid end to end.
pub fn concat_distributions(ds: &[DistributionVector]) -> Result<Vec<f64>> {
    let first = ds
        .first()
        .ok_or_else(|| Error::Contract("concat_distributions: no classifiers".into()))?;
    let c = first.classes();
    let mut out = Vec::with_capacity(ds.len() * c);
    for d in ds {
        if d.classes() != c {
            return Err(Error::dim("concat_distributions", &[c], &[d.classes()]));
        }
        out.extend_from_slice(d.values());
    }
    Ok(out)
}

/// Inverse of [`concat_distributions`] for `c` classes.
pub fn split_distributions(concatenated: &[f64], classes: usize) -> Result<Vec<DistributionVector>> {
    if classes == 0 || !concatenated.len().is_multiple_of(classes) {
        return Err(Error::dim("split_distributions", &[concatenated.len()], &[classes]));
    }
    concatenated
        .chunks(classes)
        .map(|c| DistributionVector::pruned(c.to_vec()))
        .collect()
}

/// Stacked member predictions: row `i` is `[Δ_1(a_i) … Δ_n(a_i)]`, with label `b_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleBatch {
    pub members: usize,
    pub classes: usize,
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

const BATCH_MAGIC: &[u8; 8] = b"ENSBATCH";
const BATCH_VERSION: u32 = 1;

impl EnsembleBatch {
    /// Builds the stacked table from each member's `[N, c]` predictions.
    pub fn from_predictions(preds: &[Tensor], labels: Vec<usize>) -> Result<Self> {
        let first = preds
            .first()
            .ok_or_else(|| Error::Contract("ensemble batch needs at least one member".into()))?;
        if first.rank() != 2 {
            return Err(Error::dim("ensemble batch", first.shape(), &[0, 0]));
        }
        let (n_rows, c) = (first.shape()[0], first.shape()[1]);
        for p in preds {
            if p.shape() != first.shape() {
                return Err(Error::dim("ensemble batch", first.shape(), p.shape()));
            }
        }
        if labels.len() != n_rows {
            return Err(Error::dim("ensemble batch labels", &[n_rows], &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Validation(format!("label {bad} out of range for {c} classes")));
        }
        let width = preds.len() * c;
        let mut data = Vec::with_capacity(n_rows * width);
        for i in 0..n_rows {
            for p in preds {
                data.extend_from_slice(p.row(i));
            }
        }
        Ok(EnsembleBatch {
            members: preds.len(),
            classes: c,
            inputs: Tensor::new([n_rows, width], data)?,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Member `j`'s `[N, c]` predictions.
    pub fn member(&self, j: usize) -> Result<Tensor> {
        if j >= self.members {
            return Err(Error::Contract(format!("member {j} of {}", self.members)));
        }
        let c = self.classes;
        let mut data = Vec::with_capacity(self.len() * c);
        for i in 0..self.len() {
            data.extend_from_slice(&self.inputs.row(i)[j * c..(j + 1) * c]);
        }
        Tensor::new([self.len(), c], data)
    }

    /// Little-endian: magic, version, n, c, sample count (u32 each), the
    /// row-major `f32` table, then one `u32` label per sample.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.inputs.len() * 4 + self.len() * 4);
        out.extend_from_slice(BATCH_MAGIC);
        for v in [BATCH_VERSION, self.members as u32, self.classes as u32, self.len() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &v in self.inputs.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for &l in &self.labels {
            out.extend_from_slice(&(l as u32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = 8 + 4 * 4;
        if bytes.len() < header {
            return Err(Error::format(
                bytes.len(),
                format!("ensemble batch header needs {header} bytes, file has {}", bytes.len()),
            ));
        }
        if &bytes[..8] != BATCH_MAGIC {
            return Err(Error::format(0, "bad ensemble batch magic"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap());
        if word(0) != BATCH_VERSION {
            return Err(Error::format(8, format!("unsupported ensemble batch version {}", word(0))));
        }
        let (members, classes, count) = (word(1) as usize, word(2) as usize, word(3) as usize);
        if members == 0 || classes == 0 || count == 0 {
            return Err(Error::format(12, "ensemble batch has an empty dimension"));
        }
        let width = members * classes;
        let expected = header + count * width * 4 + count * 4;
        if bytes.len() != expected {
            return Err(Error::format(
                bytes.len().min(expected),
                format!("ensemble batch should be {expected} bytes, file has {}", bytes.len()),
            ));
        }
        let mut off = header;
        let mut data = Vec::with_capacity(count * width);
        for _ in 0..count * width {
            data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64);
            off += 4;
        }
        let mut labels = Vec::with_capacity(count);
        for _ in 0..count {
            let l = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
            if l >= classes {
                return Err(Error::format(off, format!("label {l} out of range for {classes} classes")));
            }
            labels.push(l);
            off += 4;
        }
        Ok(EnsembleBatch {
            members,
            classes,
            inputs: Tensor::new([count, width], data)?,
            labels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct E2EConfig {
    pub members: usize,
    pub classes: usize,
    /// Neurons in the hidden fully connected layer.
    pub hidden: usize,
    pub leaky_slope: f64,
    /// Probability of dropping a hidden activation during training.
    pub dropout: f64,
    /// The hidden layer's bias; without it the layer is the bare `Δ · Θ` product.
    pub hidden_bias: bool,
}

impl E2EConfig {
    pub fn new(members: usize, classes: usize) -> Self {
        E2EConfig {
            members,
            classes,
            hidden: 4096,
            leaky_slope: 0.2,
            dropout: 0.5,
            hidden_bias: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.members == 0 || self.classes == 0 || self.hidden == 0 {
            return Err(Error::Config("meta-head sizes must be positive".into()));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!("leaky slope {} not in (0, 1)", self.leaky_slope)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout rate {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct E2EParams<T = Tensor> {
    pub hidden_weight: T,
    pub hidden_bias: Option<T>,
    pub output: Dense<T>,
}

impl<T> ParamTree<T> for E2EParams<T> {
    type Of<U> = E2EParams<U>;

    fn map_leaves<U>(&self, f: &mut dyn FnMut(&T) -> U) -> E2EParams<U> {
        E2EParams {
            hidden_weight: f(&self.hidden_weight),
            hidden_bias: self.hidden_bias.as_ref().map(&mut *f),
            output: self.output.map_leaves(f),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(join(prefix, "hidden_weight"), &self.hidden_weight);
        if let Some(b) = &self.hidden_bias {
            f(join(prefix, "hidden_bias"), b);
        }
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        f(join(prefix, "hidden_weight"), &mut self.hidden_weight);
        if let Some(b) = &mut self.hidden_bias {
            f(join(prefix, "hidden_bias"), b);
        }
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

/// The stacked meta-classifier: dense(λ) → leaky ReLU → dropout → dense(c) → softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct E2EHead {
    pub config: E2EConfig,
    pub params: E2EParams,
}

impl E2EHead {
    pub fn new(config: E2EConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let width = config.members * config.classes;
        let hidden = Dense::init(width, config.hidden, rng);
        let params = E2EParams {
            hidden_weight: hidden.weight,
            hidden_bias: config.hidden_bias.then_some(hidden.bias),
            output: Dense::init(config.hidden, config.classes, rng),
        };
        Ok(E2EHead { config, params })
    }
}

impl Classifier for E2EHead {
    type Params = E2EParams;

    fn params(&self) -> &E2EParams {
        &self.params
    }

    fn params_mut(&mut self) -> &mut E2EParams {
        &mut self.params
    }

    fn classes(&self) -> usize {
        self.config.classes
    }

    fn forward(&self, tape: &mut Tape, inputs: &Tensor, mode: Mode, rng: &mut SeededRng) -> Result<(Var, Vec<Var>)> {
        let bound = bind(&self.params, tape);
        let x = tape.constant(inputs.clone());
        let probs = e2e_head_forward(tape, &self.config, &bound, x, mode, rng)?;
        Ok((probs, leaves(&bound)))
    }
}

pub fn e2e_head_forward(
    tape: &mut Tape,
    cfg: &E2EConfig,
    p: &E2EParams<Var>,
    inputs: Var,
    mode: Mode,
    rng: &mut SeededRng,
) -> Result<Var> {
    let width = cfg.members * cfg.classes;
    let s = tape.shape(inputs).to_vec();
    if s.len() != 2 || s[1] != width {
        return Err(Error::dim("e2e_head_forward", &s, &[s.first().copied().unwrap_or(0), width]));
    }
    let mut mu = tape.matmul(inputs, p.hidden_weight)?;
    if let Some(b) = p.hidden_bias {
        mu = tape.add_bias(mu, b)?;
    }
    let eta = tape.leaky_relu(mu, cfg.leaky_slope);
    let upsilon = dropout(tape, eta, cfg.dropout, mode, rng)?;
    let logits = p.output.forward(tape, upsilon)?;
    tape.softmax_rows(logits)
}

/// Inverted dropout: in train mode each entry is zeroed with probability `rate`
/// and survivors are scaled by `1 / (1 - rate)`; eval mode is the identity.
pub fn dropout(tape: &mut Tape, x: Var, rate: f64, mode: Mode, rng: &mut SeededRng) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} not in [0, 1)")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let mut mask = Tensor::zeros(tape.shape(x).to_vec());
    for m in mask.data_mut() {
        *m = if rng.random::<f64>() < rate { 0.0 } else { keep };
    }
    let m = tape.constant(mask);
    tape.mul(x, m)
}

/// Entrywise mean of equally shaped prediction matrices.
pub fn avg_ensemble(preds: &[Tensor]) -> Result<Tensor> {
    let first = preds
        .first()
        .ok_or_else(|| Error::Contract("avg_ensemble: no predictions".into()))?;
    let mut acc = vec![0.0; first.len()];
    for p in preds {
        if p.shape() != first.shape() {
            return Err(Error::dim("avg_ensemble", first.shape(), p.shape()));
        }
        for (a, v) in acc.iter_mut().zip(p.data()) {
            *a += v;
        }
    }
    let n = preds.len() as f64;
    Tensor::new(first.shape().to_vec(), acc.into_iter().map(|a| a / n).collect())
}

/// Keeps each row's maximum (first one on ties) and zeroes every other entry.
pub fn prune(a: &Tensor) -> Result<Tensor> {
    prune_top_k(a, 1)
}

/// Keeps the `k` largest entries per row (lowest index first on ties).
/// `k = 1` is the standard pruning; larger `k` is experimental.
pub fn prune_top_k(a: &Tensor, k: usize) -> Result<Tensor> {
    if a.rank() != 2 {
        return Err(Error::dim("prune", a.shape(), &[0, 0]));
    }
    if k == 0 {
        return Err(Error::Contract("prune: k must be at least 1".into()));
    }
    if a.data().iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("prune: NaN in prediction confidences".into()));
    }
    let c = a.shape()[1];
    let mut out = vec![0.0; a.len()];
    for (row, dst) in a.data().chunks(c).zip(out.chunks_mut(c)) {
        if k == 1 {
            let idx = argmax(row);
            dst[idx] = row[idx];
            continue;
        }
        let mut order: Vec<usize> = (0..c).collect();
        // Stable sort keeps lower indices first among equal values.
        order.sort_by(|&i, &j| row[j].partial_cmp(&row[i]).unwrap());
        for &i in order.iter().take(k) {
            dst[i] = row[i];
        }
    }
    Tensor::new(a.shape().to_vec(), out)
}

/// Average of the members' pruned rows.
pub fn ext_softmax_ensemble(preds: &[Tensor]) -> Result<Tensor> {
    let pruned = preds.iter().map(prune).collect::<Result<Vec<_>>>()?;
    avg_ensemble(&pruned)
}

/// Rows where two prediction matrices pick different classes.
pub fn disagreements(a: &Tensor, b: &Tensor) -> usize {
    a.argmax_rows()
        .into_iter()
        .zip(b.argmax_rows())
        .filter(|(x, y)| x != y)
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rows(r: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&r.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn dv(v: &[f64]) -> DistributionVector {
        DistributionVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn concat_reference() {
        let ds = [dv(&[1.0, 0.0]), dv(&[0.5, 0.5]), dv(&[0.2, 0.8])];
        assert_eq!(concat_distributions(&ds).unwrap(), vec![1.0, 0.0, 0.5, 0.5, 0.2, 0.8]);
        assert_eq!(concat_distributions(&ds[..1]).unwrap(), vec![1.0, 0.0]);
        let wide: Vec<_> = (0..3).map(|_| dv(&vec![1.0 / 1010.0; 1010])).collect();
        assert_eq!(concat_distributions(&wide).unwrap().len(), 3030);
    }

    #[test]
    fn concat_rejects_mismatched_classes() {
        let err = concat_distributions(&[dv(&[1.0, 0.0]), dv(&[1.0])]).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn distribution_vector_validation() {
        assert!(DistributionVector::new(vec![0.6, 0.6]).is_err());
        assert!(DistributionVector::new(vec![-0.1, 1.1]).is_err());
        assert!(DistributionVector::pruned(vec![0.7, 0.0]).is_ok());
    }

    #[test]
    fn avg_reference() {
        let preds = [rows(&[&[1.0, 0.0]]), rows(&[&[0.5, 0.5]]), rows(&[&[0.2, 0.8]])];
        let avg = avg_ensemble(&preds).unwrap();
        assert!((avg.data()[0] - 0.566_666_666).abs() < 1e-4);
        assert!((avg.data()[1] - 0.433_333_333).abs() < 1e-4);
        let same = vec![rows(&[&[0.3, 0.7]]); 4];
        assert!(avg_ensemble(&same).unwrap().max_abs_diff(&same[0]) < 1e-15);
        assert!(matches!(avg_ensemble(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn prune_reference() {
        assert_eq!(prune(&rows(&[&[0.1, 0.7, 0.2]])).unwrap().data(), &[0.0, 0.7, 0.0]);
        let one_hot = rows(&[&[0.0, 1.0, 0.0]]);
        assert_eq!(prune(&one_hot).unwrap(), one_hot);
        assert_eq!(prune(&rows(&[&[0.5, 0.5]])).unwrap().data(), &[0.5, 0.0]);
        assert!(matches!(prune(&rows(&[&[f64::NAN, 0.5]])), Err(Error::Numeric(_))));
    }

    #[test]
    fn prune_top_k_keeps_k() {
        let p = prune_top_k(&rows(&[&[0.1, 0.4, 0.2, 0.3]]), 2).unwrap();
        assert_eq!(p.data(), &[0.0, 0.4, 0.0, 0.3]);
    }

    #[test]
    fn ext_and_avg_can_disagree() {
        let preds = [rows(&[&[0.51, 0.49]]), rows(&[&[0.51, 0.49]]), rows(&[&[0.02, 0.98]])];
        let avg = avg_ensemble(&preds).unwrap();
        let ext = ext_softmax_ensemble(&preds).unwrap();
        assert!((avg.data()[0] - 0.3467).abs() < 1e-4 && (avg.data()[1] - 0.6533).abs() < 1e-4);
        assert!((ext.data()[0] - 0.34).abs() < 1e-12 && (ext.data()[1] - 0.98 / 3.0).abs() < 1e-12);
        assert_eq!(avg.argmax_rows(), vec![1]);
        assert_eq!(ext.argmax_rows(), vec![0]);
        assert_eq!(disagreements(&avg, &ext), 1);
    }

    #[test]
    fn meta_head_defaults_and_uniform_output() {
        let cfg = E2EConfig::new(3, 4);
        assert_eq!((cfg.hidden, cfg.leaky_slope, cfg.dropout), (4096, 0.2, 0.5));
        let mut rng = SeededRng::seed_from_u64(1);
        let mut head = E2EHead::new(E2EConfig { hidden: 16, ..cfg }, &mut rng).unwrap();
        head.params.output.weight.data_mut().fill(0.0);
        let x = Tensor::uniform([5, 12], 1.0, &mut rng).map(f64::abs);
        let p = head.predict(&x, 5).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn meta_head_width_mismatch() {
        let mut rng = SeededRng::seed_from_u64(1);
        let head = E2EHead::new(E2EConfig { hidden: 8, ..E2EConfig::new(3, 2) }, &mut rng).unwrap();
        let mut tape = Tape::new();
        let err = head.forward(&mut tape, &Tensor::zeros([2, 5]), Mode::Eval, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn dropout_eval_is_identity_and_train_is_unbiased() {
        let mut rng = SeededRng::seed_from_u64(5);
        let x = Tensor::new([1, 4], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = dropout(&mut tape, v, 0.9, Mode::Eval, &mut rng).unwrap();
        assert_eq!(tape.value(y), &x);

        let trials = 100_000;
        let rate = 0.5;
        let mut sum = [0.0; 4];
        for _ in 0..trials {
            let mut tape = Tape::new();
            let v = tape.constant(x.clone());
            let y = dropout(&mut tape, v, rate, Mode::Train, &mut rng).unwrap();
            for (s, o) in sum.iter_mut().zip(tape.value(y).data()) {
                *s += o;
            }
        }
        for (s, &xi) in sum.iter().zip(x.data()) {
            let mean = s / trials as f64;
            // Each sample is xi/(1-p) w.p. 1-p, else 0: variance xi²·p/(1-p).
            let se = (xi * xi * rate / (1.0 - rate) / trials as f64).sqrt();
            assert!((mean - xi).abs() < 3.0 * se, "mean {mean} vs {xi}");
        }
    }

    #[test]
    fn batch_round_trip_and_member_slices() {
        let a = rows(&[&[0.25, 0.75], &[1.0, 0.0]]);
        let b = rows(&[&[0.5, 0.5], &[0.125, 0.875]]);
        let batch = EnsembleBatch::from_predictions(&[a.clone(), b.clone()], vec![1, 0]).unwrap();
        assert_eq!(batch.inputs.shape(), &[2, 4]);
        assert_eq!(batch.member(0).unwrap(), a);
        assert_eq!(batch.member(1).unwrap(), b);
        let back = EnsembleBatch::from_bytes(&batch.to_bytes()).unwrap();
        assert_eq!(back, batch);
        let bytes = batch.to_bytes();
        assert!(matches!(EnsembleBatch::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
    }
}
