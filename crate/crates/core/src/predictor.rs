//! 1-D convolutional classifier over the feature matrix.
//!
//! Every feature row is convolved with `num_kernels` kernels of length
//! `kernel_len` (valid convolution, no padding), passed through a rectifier,
//! unrolled, and fed to a fully connected rectifier network ending in a single
//! logistic unit. All parameters live in one flat vector so the optimizer,
//! the gradient check and the model file share a single layout:
//!
//! ```text
//! [kernels | kernel biases | W1 | b1 | W2 | b2 | ... | W_out | b_out]
//! ```
//!
//! Kernel coefficients are indexed `[set][kernel][tap]`, where there is one
//! set shared by all rows or one set per row. Dense weights are row-major
//! `out x in`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{normalize, FeatureMatrix, NormStats, NUM_FEATURES};
use crate::rng::{stream_rng, Stream};

/// Probability clamp applied inside the cross-entropy.
pub const PROB_EPS: f64 = 1e-12;

/// Valid convolution `R(l) = sum_p kernel[p] * row[l - p]` for every `l` with
/// all indices in range. Output length is `row.len() - kernel.len() + 1`.
pub fn conv1d_row(row: &[f64], kernel: &[f64]) -> Result<Vec<f64>> {
    if kernel.is_empty() {
        return Err(Error::Empty("kernel"));
    }
    if kernel.len() > row.len() {
        return Err(Error::Config(format!(
            "kernel length {} exceeds row length {}",
            kernel.len(),
            row.len()
        )));
    }
    let taps = kernel.len();
    Ok((taps - 1..row.len())
        .map(|l| {
            let mut acc = 0.0;
            for (p, &k) in kernel.iter().enumerate() {
                acc += k * row[l - p];
            }
            acc
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnArch {
    pub history_len: usize,
    pub num_kernels: usize,
    pub kernel_len: usize,
    pub hidden: Vec<usize>,
    /// One kernel set for all feature rows, or one per row.
    pub shared_kernels: bool,
}

impl Default for CnnArch {
    fn default() -> Self {
        CnnArch {
            history_len: 10,
            num_kernels: 10,
            kernel_len: 5,
            hidden: vec![64, 32],
            shared_kernels: true,
        }
    }
}

impl CnnArch {
    pub fn validate(&self) -> Result<()> {
        if self.num_kernels < 1 {
            return Err(Error::Config("num_kernels must be at least 1".into()));
        }
        if self.kernel_len < 1 || self.kernel_len > self.history_len + 1 {
            return Err(Error::Config(format!(
                "kernel_len {} must lie in 1..={}",
                self.kernel_len,
                self.history_len + 1
            )));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("hidden layer sizes must be positive".into()));
        }
        Ok(())
    }

    fn kernel_sets(&self) -> usize {
        if self.shared_kernels {
            1
        } else {
            NUM_FEATURES
        }
    }

    /// Convolution output length per (row, kernel).
    pub fn conv_len(&self) -> usize {
        self.history_len + 1 - self.kernel_len + 1
    }

    /// Width of the unrolled convolution output.
    pub fn conv_width(&self) -> usize {
        NUM_FEATURES * self.num_kernels * self.conv_len()
    }

    /// Widths of the dense stack, input first, output (1) last.
    fn dense_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.conv_width()];
        dims.extend(&self.hidden);
        dims.push(1);
        dims
    }

    fn layout(&self) -> Layout {
        let sets = self.kernel_sets();
        let kernels = 0;
        let kernel_bias = sets * self.num_kernels * self.kernel_len;
        let mut offset = kernel_bias + sets * self.num_kernels;
        let dims = self.dense_dims();
        let dense = dims
            .windows(2)
            .map(|w| {
                let l = DenseLayout {
                    inputs: w[0],
                    outputs: w[1],
                    weights: offset,
                    bias: offset + w[0] * w[1],
                };
                offset += w[0] * w[1] + w[1];
                l
            })
            .collect();
        Layout {
            kernels,
            kernel_bias,
            dense,
            total: offset,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }
}

#[derive(Debug, Clone, Copy)]
struct DenseLayout {
    inputs: usize,
    outputs: usize,
    weights: usize,
    bias: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    kernels: usize,
    kernel_bias: usize,
    dense: Vec<DenseLayout>,
    total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnModel {
    pub arch: CnnArch,
    /// Input normalization applied before the first layer.
    pub norm: NormStats,
    pub params: Vec<f64>,
}

/// Something that maps a feature matrix to a soft score in `[0, 1]`.
pub trait Scorer {
    fn score(&self, matrix: &FeatureMatrix) -> Result<f64>;

    /// Feature statistics of the scorer's training inputs, if known.
    fn norm(&self) -> Option<&NormStats> {
        None
    }
}

impl Scorer for CnnModel {
    fn score(&self, matrix: &FeatureMatrix) -> Result<f64> {
        forward(self, matrix)
    }

    fn norm(&self) -> Option<&NormStats> {
        Some(&self.norm)
    }
}

impl CnnModel {
    /// All-zero parameters, identity normalization.
    pub fn zeros(arch: CnnArch) -> Result<Self> {
        arch.validate()?;
        let n = arch.param_count();
        Ok(CnnModel {
            arch,
            norm: NormStats::identity(),
            params: vec![0.0; n],
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng>(arch: CnnArch, rng: &mut R) -> Result<Self> {
        let mut model = Self::zeros(arch)?;
        let layout = model.arch.layout();
        let k = model.arch.kernel_len;
        let nk = model.arch.num_kernels;
        let limit = (6.0 / (k + nk * k) as f64).sqrt();
        for w in &mut model.params[layout.kernels..layout.kernel_bias] {
            *w = rng.random_range(-limit..=limit);
        }
        for d in &layout.dense {
            let limit = (6.0 / (d.inputs + d.outputs) as f64).sqrt();
            for w in &mut model.params[d.weights..d.bias] {
                *w = rng.random_range(-limit..=limit);
            }
        }
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.params.len() != self.arch.param_count() {
            return Err(Error::Length {
                what: "model parameters",
                expected: self.arch.param_count(),
                got: self.params.len(),
            });
        }
        if self.params.iter().any(|w| !w.is_finite()) {
            return Err(Error::Parse("model weights must be finite".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingModel(path.to_path_buf()));
        }
        let model: CnnModel = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        model.validate()?;
        Ok(model)
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

/// Per-sample activations, reused across samples.
struct Workspace {
    input: Vec<f64>,
    /// Post-activation output of every layer; `acts[0]` is the conv output.
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
}

impl Workspace {
    fn new(arch: &CnnArch) -> Self {
        let dims = arch.dense_dims();
        Workspace {
            input: vec![0.0; NUM_FEATURES * (arch.history_len + 1)],
            acts: dims.iter().map(|&d| vec![0.0; d]).collect(),
            deltas: dims.iter().map(|&d| vec![0.0; d]).collect(),
        }
    }
}

fn check_dims(model: &CnnModel, matrix: &FeatureMatrix) -> Result<()> {
    if matrix.history_len() != model.arch.history_len {
        return Err(Error::Length {
            what: "feature matrix columns",
            expected: model.arch.history_len + 1,
            got: matrix.cols(),
        });
    }
    Ok(())
}

fn forward_into(model: &CnnModel, layout: &Layout, matrix: &FeatureMatrix, ws: &mut Workspace) -> f64 {
    let arch = &model.arch;
    let p = &model.params;
    let normed = normalize(matrix, &model.norm);
    ws.input.copy_from_slice(normed.values());

    let cols = arch.history_len + 1;
    let taps = arch.kernel_len;
    let len = arch.conv_len();
    let nk = arch.num_kernels;
    let conv = &mut ws.acts[0];
    for row in 0..NUM_FEATURES {
        let set = if arch.shared_kernels { 0 } else { row };
        let x = &ws.input[row * cols..(row + 1) * cols];
        for k in 0..nk {
            let kern = &p[layout.kernels + (set * nk + k) * taps..][..taps];
            let bias = p[layout.kernel_bias + set * nk + k];
            let out = &mut conv[(row * nk + k) * len..][..len];
            for (j, o) in out.iter_mut().enumerate() {
                let l = j + taps - 1;
                let mut acc = bias;
                for (t, &w) in kern.iter().enumerate() {
                    acc += w * x[l - t];
                }
                *o = acc.max(0.0);
            }
        }
    }

    let last = layout.dense.len() - 1;
    for (li, d) in layout.dense.iter().enumerate() {
        let (prev, next) = ws.acts.split_at_mut(li + 1);
        let a_in = &prev[li];
        let a_out = &mut next[0];
        for o in 0..d.outputs {
            let w = &p[d.weights + o * d.inputs..][..d.inputs];
            let mut z = p[d.bias + o];
            for (wi, ai) in w.iter().zip(a_in.iter()) {
                z += wi * ai;
            }
            a_out[o] = if li == last { sigmoid(z) } else { z.max(0.0) };
        }
    }
    ws.acts[last + 1][0]
}

/// Soft score of one feature matrix.
pub fn forward(model: &CnnModel, matrix: &FeatureMatrix) -> Result<f64> {
    check_dims(model, matrix)?;
    let layout = model.arch.layout();
    let mut ws = Workspace::new(&model.arch);
    Ok(forward_into(model, &layout, matrix, &mut ws))
}

fn bce(score: f64, label: u8) -> f64 {
    let s = score.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if label == 1 {
        -s.ln()
    } else {
        -(1.0 - s).ln()
    }
}

/// Accumulates `scale * dL/dparams` of one sample into `grads`.
fn backward_into(
    model: &CnnModel,
    layout: &Layout,
    ws: &mut Workspace,
    score: f64,
    label: u8,
    scale: f64,
    grads: &mut [f64],
) {
    let arch = &model.arch;
    let p = &model.params;
    let last = layout.dense.len() - 1;
    // d(BCE)/d(logit); zero where the clamp is active.
    let dz = if (PROB_EPS..=1.0 - PROB_EPS).contains(&score) {
        score - f64::from(label)
    } else {
        0.0
    };
    ws.deltas[last + 1][0] = dz * scale;

    for li in (0..=last).rev() {
        let d = layout.dense[li];
        let (lower, upper) = ws.deltas.split_at_mut(li + 1);
        let delta = &upper[0];
        let delta_in = &mut lower[li];
        let a_in = &ws.acts[li];
        delta_in.iter_mut().for_each(|x| *x = 0.0);
        for o in 0..d.outputs {
            let g = delta[o];
            if g == 0.0 {
                continue;
            }
            grads[d.bias + o] += g;
            let gw = &mut grads[d.weights + o * d.inputs..][..d.inputs];
            let w = &p[d.weights + o * d.inputs..][..d.inputs];
            for k in 0..d.inputs {
                gw[k] += g * a_in[k];
                delta_in[k] += g * w[k];
            }
        }
        // rectifier derivative of the layer feeding this one
        for (dk, &ak) in delta_in.iter_mut().zip(a_in.iter()) {
            if ak <= 0.0 {
                *dk = 0.0;
            }
        }
    }

    let cols = arch.history_len + 1;
    let taps = arch.kernel_len;
    let len = arch.conv_len();
    let nk = arch.num_kernels;
    let delta_conv = &ws.deltas[0];
    for row in 0..NUM_FEATURES {
        let set = if arch.shared_kernels { 0 } else { row };
        let x = &ws.input[row * cols..(row + 1) * cols];
        for k in 0..nk {
            let dl = &delta_conv[(row * nk + k) * len..][..len];
            let kbase = layout.kernels + (set * nk + k) * taps;
            let mut gb = 0.0;
            for (j, &g) in dl.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                gb += g;
                let l = j + taps - 1;
                for t in 0..taps {
                    grads[kbase + t] += g * x[l - t];
                }
            }
            grads[layout.kernel_bias + set * nk + k] += gb;
        }
    }
}

/// Mean binary cross-entropy over a batch.
pub fn loss(model: &CnnModel, batch: &[(FeatureMatrix, u8)]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let layout = model.arch.layout();
    let mut ws = Workspace::new(&model.arch);
    let mut total = 0.0;
    for (m, y) in batch {
        check_dims(model, m)?;
        total += bce(forward_into(model, &layout, m, &mut ws), *y);
    }
    Ok(total / batch.len() as f64)
}

/// Mean cross-entropy and its exact gradient with respect to every parameter.
pub fn grad(model: &CnnModel, batch: &[(FeatureMatrix, u8)]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let refs: Vec<(&FeatureMatrix, u8)> = batch.iter().map(|(m, y)| (m, *y)).collect();
    let layout = model.arch.layout();
    let mut ws = Workspace::new(&model.arch);
    let mut grads = vec![0.0; model.params.len()];
    let l = accumulate(model, &layout, &refs, &mut ws, &mut grads)?;
    Ok((l, grads))
}

fn accumulate(
    model: &CnnModel,
    layout: &Layout,
    batch: &[(&FeatureMatrix, u8)],
    ws: &mut Workspace,
    grads: &mut [f64],
) -> Result<f64> {
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for (m, y) in batch {
        check_dims(model, m)?;
        let s = forward_into(model, layout, m, ws);
        total += bce(s, *y);
        backward_into(model, layout, ws, s, *y, scale, grads);
    }
    Ok(total * scale)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.003,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 10,
            batch_size: 64,
            train_fraction: 0.75,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Adam moment estimates for a flat parameter vector.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub scores: Vec<f64>,
}

impl EvalReport {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Hard label is 1 iff the score is at least 0.5.
pub fn evaluate_scorer<S: Scorer + ?Sized>(
    scorer: &S,
    samples: &[(FeatureMatrix, u8)],
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut report = EvalReport {
        accuracy: 0.0,
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
        scores: Vec::with_capacity(samples.len()),
    };
    for (m, y) in samples {
        let s = scorer.score(m)?;
        report.scores.push(s);
        match (s >= 0.5, *y == 1) {
            (true, true) => report.tp += 1,
            (true, false) => report.fp += 1,
            (false, false) => report.tn += 1,
            (false, true) => report.fn_ += 1,
        }
    }
    report.accuracy = (report.tp + report.tn) as f64 / samples.len() as f64;
    Ok(report)
}

pub fn evaluate(model: &CnnModel, samples: &[(FeatureMatrix, u8)]) -> Result<EvalReport> {
    evaluate_scorer(model, samples)
}

/// Outcome of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: CnnModel,
    pub report: EvalReport,
    /// Mean training loss of every epoch.
    pub epoch_loss: Vec<f64>,
    pub train_size: usize,
}

/// Deterministic shuffled split into training and held-out parts.
pub fn split_indices(n: usize, cfg: &TrainConfig) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(cfg.seed, Stream::Training, 0));
    let cut = ((n as f64) * cfg.train_fraction).round() as usize;
    let cut = cut.clamp(1, n.saturating_sub(1).max(1));
    let test = idx.split_off(cut);
    (idx, test)
}

/// Trains a fresh model on a shuffled `train_fraction` of `dataset` and
/// evaluates it on the rest.
pub fn train(dataset: &[(FeatureMatrix, u8)], arch: CnnArch, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    arch.validate()?;
    if dataset.len() < 2 {
        return Err(Error::Empty("training dataset"));
    }
    let positives = dataset.iter().filter(|(_, y)| *y == 1).count();
    if positives == 0 {
        return Err(Error::SingleClass(0));
    }
    if positives == dataset.len() {
        return Err(Error::SingleClass(1));
    }
    let (train_idx, test_idx) = split_indices(dataset.len(), cfg);

    let mut init_rng = stream_rng(cfg.seed, Stream::Training, 1);
    let mut model = CnnModel::init(arch, &mut init_rng)?;
    model.norm = NormStats::fit(train_idx.iter().map(|&i| &dataset[i].0))?;

    let layout = model.arch.layout();
    let mut ws = Workspace::new(&model.arch);
    let mut adam = Adam::new(model.params.len());
    let mut grads = vec![0.0; model.params.len()];
    let mut order = train_idx.clone();
    let mut shuffle_rng = stream_rng(cfg.seed, Stream::Training, 2);
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut batch: Vec<(&FeatureMatrix, u8)> = Vec::with_capacity(cfg.batch_size);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| (&dataset[i].0, dataset[i].1)));
            grads.iter_mut().for_each(|g| *g = 0.0);
            let l = accumulate(&model, &layout, &batch, &mut ws, &mut grads)?;
            total += l * chunk.len() as f64;
            adam.step(&mut model.params, &grads, cfg);
        }
        let mean = total / order.len() as f64;
        log::debug!("epoch {epoch}: mean training loss {mean:.5}");
        epoch_loss.push(mean);
    }

    let held_out: Vec<(FeatureMatrix, u8)> = test_idx.iter().map(|&i| dataset[i].clone()).collect();
    let report = evaluate(&model, &held_out)?;
    Ok(TrainOutcome {
        model,
        report,
        epoch_loss,
        train_size: train_idx.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_arch() -> CnnArch {
        CnnArch {
            history_len: 3,
            num_kernels: 2,
            kernel_len: 2,
            hidden: vec![4, 3],
            shared_kernels: true,
        }
    }

    fn random_matrix(rng: &mut ChaCha8Rng, h: usize) -> FeatureMatrix {
        let v = (0..NUM_FEATURES * (h + 1))
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        FeatureMatrix::from_values(h, v).unwrap()
    }

    #[test]
    fn conv_examples() {
        let row: Vec<f64> = (1..=11).map(f64::from).collect();
        let id = conv1d_row(&row, &[1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(id, row[4..].to_vec());
        let ones = conv1d_row(&[2.5; 11], &[1.0; 5]).unwrap();
        assert!(ones.iter().all(|&v| v == 12.5));
        assert_eq!(ones.len(), 7);
        let diff = conv1d_row(&row, &[1.0, -1.0]).unwrap();
        assert_eq!(diff, vec![1.0; 10]);
        assert!(conv1d_row(&[1.0, 2.0], &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn zero_model_outputs_half() {
        let m = CnnModel::zeros(CnnArch::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_matrix(&mut rng, 10);
        assert_eq!(forward(&m, &x).unwrap(), 0.5);
    }

    #[test]
    fn param_count_of_default_arch() {
        // 10*5 kernels + 10 biases + 210*64+64 + 64*32+32 + 32+1
        assert_eq!(CnnArch::default().param_count(), 50 + 10 + 13504 + 2080 + 33);
    }

    #[test]
    fn per_row_kernels_triple_the_conv_parameters() {
        let shared = CnnArch::default().param_count();
        let own = CnnArch {
            shared_kernels: false,
            ..CnnArch::default()
        }
        .param_count();
        assert_eq!(own - shared, 2 * 60);
    }

    #[test]
    fn forward_rejects_wrong_shape() {
        let m = CnnModel::zeros(CnnArch::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(forward(&m, &random_matrix(&mut rng, 4)).is_err());
    }

    #[test]
    fn duplicating_a_batch_keeps_the_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = CnnModel::init(tiny_arch(), &mut rng).unwrap();
        let batch: Vec<_> = (0..5)
            .map(|i| (random_matrix(&mut rng, 3), (i % 2) as u8))
            .collect();
        let doubled: Vec<_> = batch.iter().chain(batch.iter()).cloned().collect();
        let (l1, g1) = grad(&m, &batch).unwrap();
        let (l2, g2) = grad(&m, &doubled).unwrap();
        assert!((l1 - l2).abs() < 1e-14);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn saturated_correct_prediction_has_zero_gradient() {
        let mut m = CnnModel::zeros(tiny_arch()).unwrap();
        // drive the output bias far positive: score clamps to 1 - eps
        let last_bias = m.params.len() - 1;
        m.params[last_bias] = 60.0;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = vec![(random_matrix(&mut rng, 3), 1u8)];
        let (_, g) = grad(&m, &batch).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn empty_batch_is_an_error() {
        let m = CnnModel::zeros(tiny_arch()).unwrap();
        assert!(grad(&m, &[]).is_err());
    }

    #[test]
    fn evaluate_counts() {
        struct Fixed(f64);
        impl Scorer for Fixed {
            fn score(&self, _: &FeatureMatrix) -> Result<f64> {
                Ok(self.0)
            }
        }
        struct Oracle;
        impl Scorer for Oracle {
            fn score(&self, m: &FeatureMatrix) -> Result<f64> {
                Ok(if m.get(0, 0) > 0.0 { 0.51 } else { 0.49 })
            }
        }
        let mk = |v: f64, y: u8| (FeatureMatrix::from_values(0, vec![v, 0.0, 0.0]).unwrap(), y);
        let set = vec![mk(1.0, 1), mk(1.0, 1), mk(-1.0, 0), mk(-1.0, 0)];
        let r = evaluate_scorer(&Oracle, &set).unwrap();
        assert_eq!((r.accuracy, r.tp, r.tn), (1.0, 2, 2));
        let r = evaluate_scorer(&Fixed(0.7), &set).unwrap();
        assert_eq!((r.accuracy, r.tp, r.fp, r.tn, r.fn_), (0.5, 2, 2, 0, 0));
        assert_eq!(r.accuracy, (r.tp + r.tn) as f64 / r.total() as f64);
    }

    #[test]
    fn single_class_dataset_is_refused() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<_> = (0..10).map(|_| (random_matrix(&mut rng, 3), 1u8)).collect();
        let cfg = TrainConfig {
            epochs: 1,
            ..Default::default()
        };
        assert!(matches!(
            train(&data, tiny_arch(), &cfg),
            Err(Error::SingleClass(1))
        ));
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let cfg = TrainConfig::default();
        let (a, b) = split_indices(100, &cfg);
        assert_eq!((a.len(), b.len()), (75, 25));
        assert_eq!(split_indices(100, &cfg), (a.clone(), b.clone()));
        let mut all: Vec<_> = a.into_iter().chain(b).collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn save_load_roundtrip_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut m = CnnModel::init(CnnArch::default(), &mut rng).unwrap();
        m.norm = NormStats {
            mean: [0.1, 1e-4, 0.03],
            std: [0.3, 2e-3, 0.1],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        let back = CnnModel::load(&path).unwrap();
        assert_eq!(back, m);
        let x = random_matrix(&mut rng, 10);
        assert_eq!(
            forward(&m, &x).unwrap().to_bits(),
            forward(&back, &x).unwrap().to_bits()
        );
        assert!(matches!(
            CnnModel::load(&dir.path().join("nope.json")),
            Err(Error::MissingModel(_))
        ));
    }
}
