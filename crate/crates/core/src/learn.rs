//! Class-weighted linear SVM and a single dense layer with softmax or sigmoid
//! outputs, both trained from scratch on standardized features.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, DenseMatrix};

/// Encoded targets or predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Labels {
    /// One class index per sample, `classes` possible values.
    Single { classes: usize, y: Vec<usize> },
    /// One indicator row of length `classes` per sample.
    Multi { classes: usize, y: Vec<Vec<bool>> },
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Single { y, .. } => y.len(),
            Labels::Multi { y, .. } => y.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> usize {
        match self {
            Labels::Single { classes, .. } | Labels::Multi { classes, .. } => *classes,
        }
    }

    pub fn is_multi(&self) -> bool {
        matches!(self, Labels::Multi { .. })
    }

    pub fn select(&self, indices: &[usize]) -> Labels {
        match self {
            Labels::Single { classes, y } => Labels::Single {
                classes: *classes,
                y: indices.iter().map(|&i| y[i]).collect(),
            },
            Labels::Multi { classes, y } => Labels::Multi {
                classes: *classes,
                y: indices.iter().map(|&i| y[i].clone()).collect(),
            },
        }
    }

    /// Samples per class (single-label) or positives per label (multi-label).
    pub fn supports(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes()];
        match self {
            Labels::Single { y, .. } => y.iter().for_each(|&c| counts[c] += 1),
            Labels::Multi { y, .. } => {
                for row in y {
                    for (c, &on) in row.iter().enumerate() {
                        counts[c] += on as usize;
                    }
                }
            }
        }
        counts
    }

    /// n × classes matrix of one-hot or indicator targets.
    pub fn indicator_matrix(&self) -> DenseMatrix {
        let k = self.classes();
        let mut m = DenseMatrix::zeros(self.len(), k);
        match self {
            Labels::Single { y, .. } => y.iter().enumerate().for_each(|(i, &c)| m.set(i, c, 1.0)),
            Labels::Multi { y, .. } => {
                for (i, row) in y.iter().enumerate() {
                    for (c, &on) in row.iter().enumerate() {
                        if on {
                            m.set(i, c, 1.0);
                        }
                    }
                }
            }
        }
        m
    }

    fn check(&self) -> Result<()> {
        match self {
            Labels::Single { classes, y } => {
                if let Some(c) = y.iter().find(|&&c| c >= *classes) {
                    return Err(Error::Validation(format!("class index {c} out of range {classes}")));
                }
            }
            Labels::Multi { classes, y } => {
                if let Some(r) = y.iter().find(|r| r.len() != *classes) {
                    return Err(Error::DimensionMismatch {
                        expected: *classes,
                        got: r.len(),
                        context: " label indicators".into(),
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classifier {
    Svm,
    Nn,
}

impl Classifier {
    pub const ALL: [Classifier; 2] = [Classifier::Svm, Classifier::Nn];

    pub fn as_str(self) -> &'static str {
        match self {
            Classifier::Svm => "svm",
            Classifier::Nn => "nn",
        }
    }
}

impl fmt::Display for Classifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Classifier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "svm" => Ok(Classifier::Svm),
            "nn" => Ok(Classifier::Nn),
            _ => Err(Error::Validation(format!("unknown classifier '{s}' (expected svm or nn)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Upper bound on coordinate-descent passes for each binary SVM.
    pub svm_epochs: usize,
    /// Stopping tolerance on the largest projected dual gradient.
    pub svm_tolerance: f64,
    pub penalty_c: f64,
    pub class_weighted: bool,
    pub standardize: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            adam: AdamConfig::default(),
            svm_epochs: 1000,
            svm_tolerance: 1e-10,
            penalty_c: 1.0,
            class_weighted: true,
            standardize: true,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("svm_epochs", self.svm_epochs),
        ] {
            if v == 0 {
                return Err(Error::Validation(format!("{name} must be positive")));
            }
        }
        let a = &self.adam;
        let positive = [
            ("adam lr", a.lr),
            ("adam eps", a.eps),
            ("penalty_c", self.penalty_c),
            ("svm_tolerance", self.svm_tolerance),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Validation(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("adam beta1", a.beta1), ("adam beta2", a.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Validation(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        Ok(())
    }
}

/// `w_m = N / (k · n_m)` for class counts `n_m`.
pub fn compute_class_weights(counts: &[usize]) -> Result<Vec<f64>> {
    if let Some(m) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Validation(format!("class {m} has no samples")));
    }
    let n: usize = counts.iter().sum();
    let k = counts.len() as f64;
    Ok(counts.iter().map(|&c| n as f64 / (k * c as f64)).collect())
}

pub fn class_counts(y: &[usize], classes: usize) -> Vec<usize> {
    let mut counts = vec![0; classes];
    y.iter().for_each(|&c| counts[c] += 1);
    counts
}

// ---------------------------------------------------------------------------
// Standardization

/// Per-dimension mean and standard deviation from training data. Constant
/// dimensions get a unit scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &DenseMatrix) -> Self {
        let (n, d) = (x.rows() as f64, x.cols());
        let mut mean = vec![0.0; d];
        for i in 0..x.rows() {
            mean.iter_mut().zip(x.row(i)).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n.max(1.0));
        let mut var = vec![0.0; d];
        for i in 0..x.rows() {
            for (j, v) in x.row(i).iter().enumerate() {
                var[j] += (v - mean[j]).powi(2);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n.max(1.0)).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        check_dim(self.dim(), x.cols())?;
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        Ok(out)
    }
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch {
            expected,
            got,
            context: " feature columns".into(),
        });
    }
    Ok(())
}

fn prepare(x: &DenseMatrix, y: &Labels, cfg: &TrainConfig) -> Result<(Standardizer, DenseMatrix)> {
    cfg.validate()?;
    y.check()?;
    if x.rows() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.rows(),
            got: y.len(),
            context: " labels for feature rows".into(),
        });
    }
    if x.rows() == 0 {
        return Err(Error::Validation("no training samples".into()));
    }
    if !x.is_finite() {
        return Err(Error::Validation("training features contain non-finite values".into()));
    }
    let scaler = if cfg.standardize {
        Standardizer::fit(x)
    } else {
        Standardizer::identity(x.cols())
    };
    let xs = scaler.apply(x)?;
    Ok((scaler, xs))
}

// ---------------------------------------------------------------------------
// SVM

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmConfig {
    pub penalty_c: f64,
    pub kernel: String,
    /// Recorded for completeness; a linear kernel does not use it.
    pub gamma: f64,
    pub class_weighted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub multi_label: bool,
    /// One row per class (one-vs-rest) or per label.
    pub weights: DenseMatrix,
    pub biases: Vec<f64>,
    /// Single-label: one weight per class. Multi-label: `[negative, positive]`
    /// weights for each label's binary problem.
    pub class_weights: Vec<Vec<f64>>,
    /// Multi-label only: labels seen with a single polarity during training
    /// are predicted constantly.
    pub constant: Vec<Option<bool>>,
    pub config: SvmConfig,
    pub standardizer: Standardizer,
}

/// Solves `min ½‖w‖² + Σ c_i · max(0, 1 − y_i (w·x_i + b))` by dual
/// coordinate descent with the bias as an extra constant feature. Returns
/// `(w, b)`.
fn binary_svm(
    x: &DenseMatrix,
    positive: &[bool],
    cost: &[f64],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, f64) {
    let (n, d) = (x.rows(), x.cols());
    let sign: Vec<f64> = positive.iter().map(|&p| if p { 1.0 } else { -1.0 }).collect();
    let qd: Vec<f64> = (0..n).map(|i| dot(x.row(i), x.row(i)) + 1.0).collect();
    let mut alpha = vec![0.0; n];
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.svm_epochs {
        order.shuffle(rng);
        let mut max_violation: f64 = 0.0;
        for &i in &order {
            let xi = x.row(i);
            let g = sign[i] * (dot(&w, xi) + b) - 1.0;
            let pg = if alpha[i] <= 0.0 {
                g.min(0.0)
            } else if alpha[i] >= cost[i] {
                g.max(0.0)
            } else {
                g
            };
            max_violation = max_violation.max(pg.abs());
            if pg != 0.0 {
                let old = alpha[i];
                alpha[i] = (old - g / qd[i]).clamp(0.0, cost[i]);
                let step = (alpha[i] - old) * sign[i];
                if step != 0.0 {
                    w.iter_mut().zip(xi).for_each(|(wj, xj)| *wj += step * xj);
                    b += step;
                }
            }
        }
        if max_violation < cfg.svm_tolerance {
            break;
        }
    }
    (w, b)
}

/// Per-sample costs `C · s_i / Σ s`, where `s_i` is the weight of sample i's
/// class. The normalization keeps the solution unchanged when every sample
/// is duplicated or all class weights are scaled by a common factor.
fn sample_costs(sample_weight: &[f64], c: f64) -> Vec<f64> {
    let total: f64 = sample_weight.iter().sum();
    sample_weight.iter().map(|s| c * s / total).collect()
}

pub fn train_svm(x: &DenseMatrix, y: &Labels, cfg: &TrainConfig) -> Result<SvmModel> {
    let (standardizer, xs) = prepare(x, y, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = y.classes();
    let mut weights = DenseMatrix::zeros(k, xs.cols());
    let mut biases = vec![0.0; k];
    let mut class_weights = Vec::new();
    let mut constant = Vec::new();
    match y {
        Labels::Single { y, .. } => {
            let counts = class_counts(y, k);
            let present = counts.iter().filter(|&&c| c > 0).count();
            if present < 2 {
                return Err(Error::Training(format!(
                    "SVM needs at least two classes in the training data, found {present}"
                )));
            }
            if counts.contains(&0) {
                return Err(Error::Validation(
                    "every class must appear in the training data".into(),
                ));
            }
            let cw = if cfg.class_weighted {
                compute_class_weights(&counts)?
            } else {
                vec![1.0; k]
            };
            let s: Vec<f64> = y.iter().map(|&c| cw[c]).collect();
            let cost = sample_costs(&s, cfg.penalty_c);
            for (m, bias) in biases.iter_mut().enumerate() {
                let positive: Vec<bool> = y.iter().map(|&c| c == m).collect();
                let (w, b) = binary_svm(&xs, &positive, &cost, cfg, &mut rng);
                weights.row_mut(m).copy_from_slice(&w);
                *bias = b;
            }
            class_weights.push(cw);
        }
        Labels::Multi { y, .. } => {
            for m in 0..k {
                let positive: Vec<bool> = y.iter().map(|r| r[m]).collect();
                let n_pos = positive.iter().filter(|&&p| p).count();
                let counts = [positive.len() - n_pos, n_pos];
                if n_pos == 0 || n_pos == positive.len() {
                    constant.push(Some(n_pos > 0));
                    class_weights.push(vec![1.0, 1.0]);
                    continue;
                }
                constant.push(None);
                let cw = if cfg.class_weighted {
                    compute_class_weights(&counts)?
                } else {
                    vec![1.0, 1.0]
                };
                let s: Vec<f64> = positive.iter().map(|&p| cw[p as usize]).collect();
                let cost = sample_costs(&s, cfg.penalty_c);
                let (w, b) = binary_svm(&xs, &positive, &cost, cfg, &mut rng);
                weights.row_mut(m).copy_from_slice(&w);
                biases[m] = b;
                class_weights.push(cw);
            }
        }
    }
    if !weights.is_finite() || biases.iter().any(|b| !b.is_finite()) {
        return Err(Error::Training("SVM parameters are not finite".into()));
    }
    Ok(SvmModel {
        multi_label: y.is_multi(),
        weights,
        biases,
        class_weights,
        constant,
        config: SvmConfig {
            penalty_c: cfg.penalty_c,
            kernel: "linear".into(),
            gamma: 1.0 / k as f64,
            class_weighted: cfg.class_weighted,
        },
        standardizer,
    })
}

impl SvmModel {
    /// n × classes decision values `w·x + b` on standardized features.
    pub fn decision_function(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let xs = self.standardizer.apply(x)?;
        let k = self.biases.len();
        let mut out = DenseMatrix::zeros(xs.rows(), k);
        for i in 0..xs.rows() {
            for m in 0..k {
                out.set(i, m, dot(self.weights.row(m), xs.row(i)) + self.biases[m]);
            }
        }
        Ok(out)
    }

    pub fn predict(&self, x: &DenseMatrix) -> Result<Labels> {
        let scores = self.decision_function(x)?;
        let k = self.biases.len();
        if self.multi_label {
            let y = (0..scores.rows())
                .map(|i| {
                    (0..k)
                        .map(|m| self.constant[m].unwrap_or(scores.get(i, m) >= 0.0))
                        .collect()
                })
                .collect();
            Ok(Labels::Multi { classes: k, y })
        } else {
            Ok(Labels::Single {
                classes: k,
                y: (0..scores.rows()).map(|i| argmax(scores.row(i))).collect(),
            })
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Single-layer network

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NnMode {
    SoftmaxCategorical,
    SigmoidBinary,
}

impl NnMode {
    pub fn for_labels(y: &Labels) -> Self {
        if y.is_multi() {
            NnMode::SigmoidBinary
        } else {
            NnMode::SoftmaxCategorical
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m_w: DenseMatrix,
    pub v_w: DenseMatrix,
    pub m_b: Vec<f64>,
    pub v_b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NnModel {
    pub mode: NnMode,
    /// dim × classes.
    pub weights: DenseMatrix,
    pub biases: Vec<f64>,
    pub adam: AdamState,
    pub standardizer: Standardizer,
    /// Mean per-sample training loss after each epoch.
    pub loss_history: Vec<f64>,
}

fn logits(w: &DenseMatrix, b: &[f64], x: &DenseMatrix) -> DenseMatrix {
    let k = b.len();
    let mut z = DenseMatrix::zeros(x.rows(), k);
    for i in 0..x.rows() {
        let zi = z.row_mut(i);
        zi.copy_from_slice(b);
        for (j, xij) in x.row(i).iter().enumerate() {
            if *xij != 0.0 {
                for (m, wjm) in w.row(j).iter().enumerate() {
                    zi[m] += xij * wjm;
                }
            }
        }
    }
    z
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(z);
    z.iter().map(|v| (v - lse).exp()).collect()
}

/// Loss and gradients of the single dense layer on targets `t` (n × k).
/// Softmax mode: `−Σ_i Σ_j t_ij log p_ij`, summed over the batch.
/// Sigmoid mode: `−(1/n) Σ_i Σ_j [t_ij log p_ij + (1 − t_ij) log(1 − p_ij)]`.
pub fn loss_and_gradients(
    mode: NnMode,
    w: &DenseMatrix,
    b: &[f64],
    x: &DenseMatrix,
    t: &DenseMatrix,
) -> (f64, DenseMatrix, Vec<f64>) {
    let z = logits(w, b, x);
    let (n, k) = (x.rows(), b.len());
    let mut delta = DenseMatrix::zeros(n, k);
    let mut loss = 0.0;
    match mode {
        NnMode::SoftmaxCategorical => {
            for i in 0..n {
                let zi = z.row(i);
                let lse = log_sum_exp(zi);
                for (m, &zim) in zi.iter().enumerate() {
                    let tim = t.get(i, m);
                    loss -= tim * (zim - lse);
                    delta.set(i, m, (zim - lse).exp() - tim);
                }
            }
        }
        NnMode::SigmoidBinary => {
            let scale = 1.0 / n as f64;
            for i in 0..n {
                for m in 0..k {
                    let (zim, tim) = (z.get(i, m), t.get(i, m));
                    loss += scale * (softplus(zim) - tim * zim);
                    delta.set(i, m, scale * (sigmoid(zim) - tim));
                }
            }
        }
    }
    let mut gw = DenseMatrix::zeros(w.rows(), k);
    let mut gb = vec![0.0; k];
    for i in 0..n {
        let di = delta.row(i);
        gb.iter_mut().zip(di).for_each(|(g, d)| *g += d);
        for (j, xij) in x.row(i).iter().enumerate() {
            gw.row_mut(j).iter_mut().zip(di).for_each(|(g, d)| *g += xij * d);
        }
    }
    (loss, gw, gb)
}

/// Relative error `‖a − b‖ / (‖a‖ + ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm = dot(a, a).sqrt() + dot(b, b).sqrt();
    if norm == 0.0 {
        0.0
    } else {
        diff / norm
    }
}

fn adam_update(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], cfg: &AdamConfig, step: u64) {
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for j in 0..param.len() {
        m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * grad[j];
        v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * grad[j] * grad[j];
        param[j] -= cfg.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + cfg.eps);
    }
}

pub fn train_nn(x: &DenseMatrix, y: &Labels, mode: NnMode, cfg: &TrainConfig) -> Result<NnModel> {
    if mode != NnMode::for_labels(y) {
        return Err(Error::Validation(format!("network mode {mode:?} does not match the label encoding")));
    }
    let (standardizer, xs) = prepare(x, y, cfg)?;
    let (n, d, k) = (xs.rows(), xs.cols(), y.classes());
    if k == 0 {
        return Err(Error::Validation("no classes to predict".into()));
    }
    let targets = y.indicator_matrix();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let limit = (6.0 / (d + k) as f64).sqrt();
    let mut weights = DenseMatrix::from_vec(
        d,
        k,
        (0..d * k).map(|_| rng.random_range(-limit..limit)).collect(),
    );
    let mut biases = vec![0.0; k];
    let mut adam = AdamState {
        step: 0,
        m_w: DenseMatrix::zeros(d, k),
        v_w: DenseMatrix::zeros(d, k),
        m_b: vec![0.0; k],
        v_b: vec![0.0; k],
    };
    let mut loss_history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let xb = xs.select_rows(batch);
            let tb = targets.select_rows(batch);
            let (loss, gw, gb) = loss_and_gradients(mode, &weights, &biases, &xb, &tb);
            if !loss.is_finite() {
                return Err(Error::Training(format!("non-finite loss at epoch {epoch}")));
            }
            epoch_loss += match mode {
                NnMode::SoftmaxCategorical => loss,
                NnMode::SigmoidBinary => loss * batch.len() as f64,
            };
            adam.step += 1;
            adam_update(
                weights.as_mut_slice(),
                gw.as_slice(),
                adam.m_w.as_mut_slice(),
                adam.v_w.as_mut_slice(),
                &cfg.adam,
                adam.step,
            );
            adam_update(&mut biases, &gb, &mut adam.m_b, &mut adam.v_b, &cfg.adam, adam.step);
        }
        let mean = epoch_loss / n as f64;
        if !mean.is_finite() || !weights.is_finite() {
            return Err(Error::Training(format!("non-finite loss at epoch {epoch}")));
        }
        loss_history.push(mean);
    }
    Ok(NnModel {
        mode,
        weights,
        biases,
        adam,
        standardizer,
        loss_history,
    })
}

impl NnModel {
    /// Softmax or per-label sigmoid outputs, n × classes.
    pub fn predict_proba(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let xs = self.standardizer.apply(x)?;
        let mut z = logits(&self.weights, &self.biases, &xs);
        for i in 0..z.rows() {
            let row = z.row_mut(i);
            match self.mode {
                NnMode::SoftmaxCategorical => {
                    let p = softmax(row);
                    row.copy_from_slice(&p);
                }
                NnMode::SigmoidBinary => row.iter_mut().for_each(|v| *v = sigmoid(*v)),
            }
        }
        Ok(z)
    }

    pub fn predict(&self, x: &DenseMatrix) -> Result<Labels> {
        let p = self.predict_proba(x)?;
        let k = self.biases.len();
        Ok(match self.mode {
            NnMode::SoftmaxCategorical => Labels::Single {
                classes: k,
                y: (0..p.rows()).map(|i| argmax(p.row(i))).collect(),
            },
            NnMode::SigmoidBinary => Labels::Multi {
                classes: k,
                y: (0..p.rows())
                    .map(|i| p.row(i).iter().map(|&v| v >= 0.5).collect())
                    .collect(),
            },
        })
    }
}

// ---------------------------------------------------------------------------
// Trained models and persistence

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Model {
    Svm(SvmModel),
    Nn(NnModel),
}

impl Model {
    pub fn predict(&self, x: &DenseMatrix) -> Result<Labels> {
        match self {
            Model::Svm(m) => m.predict(x),
            Model::Nn(m) => m.predict(x),
        }
    }
}

pub fn train(classifier: Classifier, x: &DenseMatrix, y: &Labels, cfg: &TrainConfig) -> Result<Model> {
    Ok(match classifier {
        Classifier::Svm => Model::Svm(train_svm(x, y, cfg)?),
        Classifier::Nn => Model::Nn(train_nn(x, y, NnMode::for_labels(y), cfg)?),
    })
}

pub const MODEL_FORMAT: &str = "iconokit-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedModel {
    pub format: String,
    pub version: u32,
    pub train_config: TrainConfig,
    pub model: Model,
}

pub fn save_model<W: Write>(model: &Model, cfg: &TrainConfig, w: W) -> Result<()> {
    let saved = SavedModel {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        train_config: cfg.clone(),
        model: model.clone(),
    };
    serde_json::to_writer(w, &saved).map_err(|e| Error::Validation(format!("model write failed: {e}")))
}

pub fn load_model<R: Read>(r: R) -> Result<SavedModel> {
    let saved: SavedModel =
        serde_json::from_reader(r).map_err(|e| Error::parse("model", e.to_string()))?;
    if saved.format != MODEL_FORMAT || saved.version != MODEL_VERSION {
        return Err(Error::Validation(format!(
            "unsupported model file {} v{}",
            saved.format, saved.version
        )));
    }
    Ok(saved)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn gaussian_clusters(centers: &[(f64, f64, usize)], sd: f64, seed: u64) -> (DenseMatrix, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sd).unwrap();
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for (c, &(cx, cy, n)) in centers.iter().enumerate() {
            for _ in 0..n {
                rows.push(vec![cx + noise.sample(&mut rng), cy + noise.sample(&mut rng)]);
                y.push(c);
            }
        }
        (DenseMatrix::from_rows(2, &rows), y)
    }

    fn single(y: &[usize], k: usize) -> Labels {
        Labels::Single { classes: k, y: y.to_vec() }
    }

    #[test]
    fn class_weight_examples() {
        assert_eq!(compute_class_weights(&[50, 50]).unwrap(), vec![1.0, 1.0]);
        let w = compute_class_weights(&[25, 75]).unwrap();
        assert_abs_diff_eq!(w[0], 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(w[1], 2.0 / 3.0, epsilon = 1e-15);
        assert_eq!(compute_class_weights(&[4, 4, 4]).unwrap(), vec![1.0; 3]);
        assert!(compute_class_weights(&[3, 0]).is_err());
    }

    proptest! {
        #[test]
        fn class_weights_sum_to_sample_count(counts in proptest::collection::vec(1usize..500, 2..12)) {
            let w = compute_class_weights(&counts).unwrap();
            let n: usize = counts.iter().sum();
            let total: f64 = counts.iter().zip(&w).map(|(&c, w)| c as f64 * w).sum();
            prop_assert!((total - n as f64).abs() <= 1e-9 * n as f64);
        }
    }

    #[test]
    fn separable_clusters_are_learned() {
        // Margin 2 between the clusters' closest points.
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for i in 0..10 {
            let t = i as f64 * 0.3;
            rows.push(vec![-1.0 - t, t - 1.5]);
            y.push(0);
            rows.push(vec![1.0 + t, 1.5 - t]);
            y.push(1);
        }
        let x = DenseMatrix::from_rows(2, &rows);
        let model = train_svm(&x, &single(&y, 2), &TrainConfig::default()).unwrap();
        assert_eq!(model.predict(&x).unwrap(), single(&y, 2));
        assert_eq!(model.config.kernel, "linear");
        assert_abs_diff_eq!(model.config.gamma, 0.5);
    }

    #[test]
    fn class_weights_raise_minority_recall() {
        let (x, y) = gaussian_clusters(&[(0.0, 0.0, 90), (1.5, 1.0, 10)], 1.0, 3);
        let recall = |weighted: bool| {
            let cfg = TrainConfig {
                class_weighted: weighted,
                ..Default::default()
            };
            let pred = train_svm(&x, &single(&y, 2), &cfg).unwrap().predict(&x).unwrap();
            let Labels::Single { y: p, .. } = pred else { unreachable!() };
            let hits = y.iter().zip(&p).filter(|(t, p)| **t == 1 && **p == 1).count();
            hits as f64 / 10.0
        };
        assert!(recall(true) >= recall(false), "{} < {}", recall(true), recall(false));
    }

    #[test]
    fn duplicating_samples_keeps_the_decision_function() {
        let (x, y) = gaussian_clusters(&[(0.0, 0.0, 12), (2.0, 0.5, 8), (0.5, 2.5, 6)], 0.8, 11);
        let idx: Vec<usize> = (0..x.rows()).chain(0..x.rows()).collect();
        let x2 = x.select_rows(&idx);
        let y2: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
        let cfg = TrainConfig::default();
        let a = train_svm(&x, &single(&y, 3), &cfg).unwrap();
        let b = train_svm(&x2, &single(&y2, 3), &cfg).unwrap();
        let (da, db) = (a.decision_function(&x).unwrap(), b.decision_function(&x).unwrap());
        for (u, v) in da.as_slice().iter().zip(db.as_slice()) {
            assert_abs_diff_eq!(u, v, epsilon = 1e-6);
        }
    }

    #[test]
    fn scaling_class_weights_keeps_predictions() {
        let (x, y) = gaussian_clusters(&[(0.0, 0.0, 30), (1.0, 1.0, 10)], 0.9, 5);
        let cfg = TrainConfig::default();
        let counts = class_counts(&y, 2);
        let cw = compute_class_weights(&counts).unwrap();
        let xs = Standardizer::fit(&x).apply(&x).unwrap();
        let positive: Vec<bool> = y.iter().map(|&c| c == 1).collect();
        let mut preds = Vec::new();
        for scale in [1.0, 7.5, 0.01] {
            let s: Vec<f64> = y.iter().map(|&c| cw[c] * scale).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let (w, b) = binary_svm(&xs, &positive, &sample_costs(&s, cfg.penalty_c), &cfg, &mut rng);
            let p: Vec<bool> = (0..xs.rows()).map(|i| dot(&w, xs.row(i)) + b >= 0.0).collect();
            preds.push(p);
        }
        assert_eq!(preds[0], preds[1]);
        assert_eq!(preds[0], preds[2]);
    }

    #[test]
    fn svm_rejects_single_class() {
        let x = DenseMatrix::from_rows(1, &[vec![0.0], vec![1.0]]);
        assert!(train_svm(&x, &single(&[0, 0], 1), &TrainConfig::default()).is_err());
    }

    #[test]
    fn multi_label_svm_handles_constant_labels() {
        let (x, y) = gaussian_clusters(&[(0.0, 0.0, 10), (3.0, 3.0, 10)], 0.3, 2);
        let ind: Vec<Vec<bool>> = y.iter().map(|&c| vec![c == 1, true]).collect();
        let labels = Labels::Multi { classes: 2, y: ind.clone() };
        let m = train_svm(&x, &labels, &TrainConfig::default()).unwrap();
        assert_eq!(m.constant, vec![None, Some(true)]);
        assert_eq!(m.predict(&x).unwrap(), labels);
    }

    fn random_instance(rng: &mut ChaCha8Rng, n: usize, d: usize, k: usize) -> (DenseMatrix, DenseMatrix, Vec<f64>) {
        let x = DenseMatrix::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect());
        let w = DenseMatrix::from_vec(d, k, (0..d * k).map(|_| rng.random_range(-1.0..1.0)).collect());
        let b = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        (x, w, b)
    }

    /// Central differences over every weight and bias.
    pub(crate) fn numeric_gradient(mode: NnMode, w: &DenseMatrix, b: &[f64], x: &DenseMatrix, t: &DenseMatrix) -> Vec<f64> {
        let h = 1e-5;
        let f = |w: &DenseMatrix, b: &[f64]| loss_and_gradients(mode, w, b, x, t).0;
        let mut g = Vec::new();
        for j in 0..w.as_slice().len() {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp.as_mut_slice()[j] += h;
            wm.as_mut_slice()[j] -= h;
            g.push((f(&wp, b) - f(&wm, b)) / (2.0 * h));
        }
        for j in 0..b.len() {
            let (mut bp, mut bm) = (b.to_vec(), b.to_vec());
            bp[j] += h;
            bm[j] -= h;
            g.push((f(w, &bp) - f(w, &bm)) / (2.0 * h));
        }
        g
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..10 {
            let (x, w, b) = random_instance(&mut rng, 5, 4, 3);
            let single = Labels::Single {
                classes: 3,
                y: (0..5).map(|_| rng.random_range(0..3)).collect(),
            };
            let multi = Labels::Multi {
                classes: 3,
                y: (0..5).map(|_| (0..3).map(|_| rng.random_bool(0.5)).collect()).collect(),
            };
            for (mode, labels) in [(NnMode::SoftmaxCategorical, single), (NnMode::SigmoidBinary, multi)] {
                let t = labels.indicator_matrix();
                let (_, gw, gb) = loss_and_gradients(mode, &w, &b, &x, &t);
                let analytic: Vec<f64> = gw.as_slice().iter().chain(&gb).copied().collect();
                let numeric = numeric_gradient(mode, &w, &b, &x, &t);
                let err = relative_error(&analytic, &numeric);
                assert!(err < 1e-5, "{mode:?}: {err}");
            }
        }
    }

    #[test]
    fn analytic_loss_values() {
        let x = DenseMatrix::from_rows(2, &[vec![0.3, -1.0], vec![2.0, 0.5]]);
        let w = DenseMatrix::zeros(2, 4);
        let t = single(&[1, 3], 4).indicator_matrix();
        let (loss, _, _) = loss_and_gradients(NnMode::SoftmaxCategorical, &w, &[0.0; 4], &x, &t);
        assert_abs_diff_eq!(loss / 2.0, 4f64.ln(), epsilon = 1e-12);

        // Logits of ±40 give probabilities 1 and 0 to double precision.
        let x = DenseMatrix::from_rows(1, &[vec![1.0]]);
        let w = DenseMatrix::from_vec(1, 2, vec![40.0, -40.0]);
        let t = DenseMatrix::from_vec(1, 2, vec![1.0, 0.0]);
        let (loss, _, _) = loss_and_gradients(NnMode::SigmoidBinary, &w, &[0.0, 0.0], &x, &t);
        assert!(loss < 1e-16, "{loss}");
    }

    #[test]
    fn network_fits_identity_features() {
        let x = DenseMatrix::from_rows(
            3,
            &[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
        );
        let idx: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let x = x.select_rows(&idx);
        let y = single(&idx, 3);
        let cfg = TrainConfig {
            epochs: 60,
            batch_size: 8,
            adam: AdamConfig {
                lr: 0.05,
                ..Default::default()
            },
            ..Default::default()
        };
        let m = train_nn(&x, &y, NnMode::SoftmaxCategorical, &cfg).unwrap();
        let h = &m.loss_history;
        assert!(h[..10].windows(2).all(|w| w[1] < w[0]), "{:?}", &h[..10]);
        assert_eq!(m.predict(&x).unwrap(), y);
    }

    #[test]
    fn softmax_outputs_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let z: Vec<f64> = (0..5).map(|_| rng.random_range(-10.0..10.0)).collect();
            let p = softmax(&z);
            assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
            assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn prediction_rules() {
        assert_eq!(argmax(&[0.2, 0.9]), 1);
        assert_eq!(argmax(&[0.5, 0.5, 0.5]), 0);
        let zero = NnModel {
            mode: NnMode::SoftmaxCategorical,
            weights: DenseMatrix::zeros(2, 3),
            biases: vec![0.0; 3],
            adam: AdamState {
                step: 0,
                m_w: DenseMatrix::zeros(2, 3),
                v_w: DenseMatrix::zeros(2, 3),
                m_b: vec![0.0; 3],
                v_b: vec![0.0; 3],
            },
            standardizer: Standardizer::identity(2),
            loss_history: vec![],
        };
        let x = DenseMatrix::from_rows(2, &[vec![1.0, -2.0]]);
        let p = zero.predict_proba(&x).unwrap();
        assert!(p.row(0).iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(zero.predict(&x).unwrap(), single(&[0], 3));

        let multi = NnModel {
            mode: NnMode::SigmoidBinary,
            weights: DenseMatrix::zeros(1, 2),
            biases: vec![0.6f64.ln() - 0.4f64.ln(), 0.4f64.ln() - 0.6f64.ln()],
            standardizer: Standardizer::identity(1),
            ..zero.clone()
        };
        let x = DenseMatrix::from_rows(1, &[vec![0.0]]);
        assert_eq!(
            multi.predict(&x).unwrap(),
            Labels::Multi { classes: 2, y: vec![vec![true, false]] }
        );
        assert!(matches!(
            zero.predict(&DenseMatrix::zeros(1, 5)),
            Err(Error::DimensionMismatch { expected: 2, got: 5, .. })
        ));
    }

    #[test]
    fn training_is_bit_reproducible_and_round_trips() {
        let (x, y) = gaussian_clusters(&[(0.0, 0.0, 15), (2.0, 1.0, 15)], 0.7, 8);
        let y = single(&y, 2);
        let cfg = TrainConfig {
            epochs: 20,
            ..Default::default()
        };
        for c in Classifier::ALL {
            let a = train(c, &x, &y, &cfg).unwrap();
            let b = train(c, &x, &y, &cfg).unwrap();
            assert_eq!(a, b);
            let mut buf = Vec::new();
            save_model(&a, &cfg, &mut buf).unwrap();
            let back = load_model(buf.as_slice()).unwrap();
            assert_eq!(back.model, a);
            assert_eq!(back.train_config, cfg);
        }
    }

    #[test]
    fn nan_learning_rate_is_rejected_and_blowup_is_reported() {
        let x = DenseMatrix::from_rows(1, &[vec![0.0], vec![1.0]]);
        let y = single(&[0, 1], 2);
        let bad = TrainConfig {
            adam: AdamConfig { lr: f64::NAN, ..Default::default() },
            ..Default::default()
        };
        assert!(train_nn(&x, &y, NnMode::SoftmaxCategorical, &bad).is_err());
        let huge = TrainConfig {
            adam: AdamConfig { lr: 1e308, ..Default::default() },
            standardize: false,
            epochs: 50,
            ..Default::default()
        };
        let x = DenseMatrix::from_rows(1, &[vec![1e300], vec![-1e300]]);
        match train_nn(&x, &y, NnMode::SoftmaxCategorical, &huge) {
            Err(Error::Training(msg)) => assert!(msg.contains("epoch"), "{msg}"),
            other => panic!("expected a training error, got {other:?}"),
        }
    }
}
