//! Width-scalable MLP with manual reverse-mode gradients, trained with AdamW
//! on a synthetic teacher task and instrumented per linear layer.
//!
//! Activations are stored feature-major: a batch is a `features × B` matrix
//! whose columns are samples. A hidden block computes
//! `h = relu(γ ⊙ norm(W x) + β)` where `norm` is a per-sample RMS
//! normalization in `rms_gain` mode and the identity otherwise. The output
//! layer is `W h + b`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::{Mat, Trans};
use crate::metrics::{frob_norm, layer_metrics, AlignmentSample};
use crate::optim::{adamw_step, effective_wd, AdamWState, OptimConfig, ParamGroup, Role};
use crate::rng::{derive_seed, Gaussian, RunRng, Stream};
use crate::schedule::{lr_at, ScheduleSpec, WarmupFactorSpec, WarmupState};

const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    #[default]
    Relu,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// RMS normalization after the linear map, followed by the gain.
    #[default]
    RmsGain,
    /// Gain and bias only.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Number of linear layers.
    pub depth: usize,
    pub base_width: usize,
    pub width_multiplier: f64,
    pub input_dim: usize,
    pub num_classes: usize,
    pub nonlinearity: Nonlinearity,
    pub normalization: Normalization,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            base_width: 32,
            width_multiplier: 1.0,
            input_dim: 16,
            num_classes: 10,
            nonlinearity: Nonlinearity::Relu,
            normalization: Normalization::RmsGain,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config("depth must be at least 2".into()));
        }
        if self.base_width == 0 || self.input_dim == 0 || self.num_classes < 2 {
            return Err(Error::Config(
                "base_width and input_dim must be positive, num_classes at least 2".into(),
            ));
        }
        if !(self.width_multiplier >= 1.0) {
            return Err(Error::Config("width_multiplier must be >= 1".into()));
        }
        let w = self.base_width as f64 * self.width_multiplier;
        if (w - w.round()).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "base_width x width_multiplier = {w} is not an integer"
            )));
        }
        Ok(())
    }

    pub fn hidden_width(&self) -> usize {
        (self.base_width as f64 * self.width_multiplier).round() as usize
    }

    /// `(fan_in, fan_out)` of every linear layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let h = self.hidden_width();
        (0..self.depth)
            .map(|l| {
                let fan_in = if l == 0 { self.input_dim } else { h };
                let fan_out = if l + 1 == self.depth { self.num_classes } else { h };
                (fan_in, fan_out)
            })
            .collect()
    }

    pub fn role_of(&self, layer: usize) -> Role {
        if layer == 0 {
            Role::Input
        } else if layer + 1 == self.depth {
            Role::Output
        } else {
            Role::Hidden
        }
    }
}

/// One linear layer with its block parameters. The output layer has no gain.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub w: Mat,
    pub gain: Option<Mat>,
    pub bias: Mat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    config: NetworkConfig,
    pub layers: Vec<Layer>,
}

/// Gaussian weights with std `1/√fan_in`, unit gains, zero biases.
pub fn init_network(cfg: &NetworkConfig, seed: u64) -> Result<Network> {
    cfg.validate()?;
    let mut g = Gaussian::from_seed(seed);
    let shapes = cfg.layer_shapes();
    let layers = shapes
        .iter()
        .enumerate()
        .map(|(l, &(fan_in, fan_out))| {
            let mut w = Mat::zeros(fan_out, fan_in);
            g.fill(w.data_mut());
            w.scale(1.0 / (fan_in as f64).sqrt());
            let is_block = l + 1 < shapes.len();
            Layer {
                w,
                gain: is_block.then(|| Mat::filled(fan_out, 1, 1.0)),
                bias: Mat::zeros(fan_out, 1),
            }
        })
        .collect();
    Ok(Network {
        config: cfg.clone(),
        layers,
    })
}

/// Per-layer intermediates of a forward pass.
#[derive(Clone, Debug)]
pub struct LayerCache {
    /// Layer input `X_ℓ`.
    pub input: Mat,
    /// Linear output `Y_ℓ = W_ℓ X_ℓ` (bias excluded).
    pub linear: Mat,
    /// Per-sample RMS of `W_ℓ X_ℓ`; empty unless normalized.
    col_rms: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub layers: Vec<LayerCache>,
    pub logits: Mat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub w: Mat,
    pub gain: Option<Mat>,
    pub bias: Mat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

fn add_bias(m: &mut Mat, bias: &Mat) {
    let cols = m.cols();
    for i in 0..m.rows() {
        let b = bias.data()[i];
        m.data_mut()[i * cols..(i + 1) * cols]
            .iter_mut()
            .for_each(|v| *v += b);
    }
}

fn row_sums(m: &Mat) -> Mat {
    let sums: Vec<f64> = (0..m.rows()).map(|i| m.row(i).iter().sum()).collect();
    Mat::column(&sums)
}

/// Columns per tile of the normalization kernels. A tile of a hidden
/// activation stays in cache between the reduction and the update pass.
const COL_TILE: usize = 64;

fn col_tiles(cols: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..cols).step_by(COL_TILE).map(move |j0| j0..(j0 + COL_TILE).min(cols))
}

/// `h = relu(γ ⊙ norm(y) + β)` with per-column RMS `r = √(mean_i y_ij² + ε)`
/// when normalizing. Returns `r` (empty otherwise).
fn block_forward(y: &Mat, gain: &Mat, bias: &Mat, normalize: bool, h: &mut Mat) -> Vec<f64> {
    let (rows, cols) = y.shape();
    let (g, b) = (gain.data(), bias.data());
    if !normalize {
        for i in 0..rows {
            for (o, &v) in h.row_mut(i).iter_mut().zip(y.row(i)) {
                *o = (g[i] * v + b[i]).max(0.0);
            }
        }
        return Vec::new();
    }
    let mut r = vec![0.0; cols];
    let n = rows as f64;
    for tile in col_tiles(cols) {
        let rt = &mut r[tile.clone()];
        for i in 0..rows {
            for (acc, &v) in rt.iter_mut().zip(&y.row(i)[tile.clone()]) {
                *acc += v * v;
            }
        }
        rt.iter_mut().for_each(|acc| *acc = (*acc / n + NORM_EPS).sqrt());
        for i in 0..rows {
            let out = &mut h.row_mut(i)[tile.clone()];
            for ((o, &v), rj) in out.iter_mut().zip(&y.row(i)[tile.clone()]).zip(rt.iter()) {
                *o = (g[i] * (v / rj) + b[i]).max(0.0);
            }
        }
    }
    r
}

/// Backward through `h = relu(γ ⊙ norm(y) + β)`. On entry `d` holds `∂L/∂h`;
/// on exit `∂L/∂y`. Returns `(∂L/∂γ, ∂L/∂β)`.
///
/// For `z = y / r`, `∂L/∂y = (∂L/∂z − z · mean_i(∂L/∂z ⊙ z)) / r` per column.
fn block_backward(d: &mut Mat, y: &Mat, h: &Mat, r: &[f64], gain: &Mat) -> (Mat, Mat) {
    let (rows, cols) = d.shape();
    let g = gain.data();
    let mut dgain = vec![0.0; rows];
    let mut dbias = vec![0.0; rows];
    let normalize = !r.is_empty();
    let ones = vec![1.0; if normalize { 0 } else { cols }];
    let r = if normalize { r } else { &ones[..] };
    let n = rows as f64;
    let mut proj = vec![0.0; COL_TILE];
    for tile in col_tiles(cols) {
        let rt = &r[tile.clone()];
        let pt = &mut proj[..tile.len()];
        pt.iter_mut().for_each(|p| *p = 0.0);
        for i in 0..rows {
            let (mut sg, mut sb) = (0.0, 0.0);
            let dr = &mut d.row_mut(i)[tile.clone()];
            let it = dr
                .iter_mut()
                .zip(&h.row(i)[tile.clone()])
                .zip(&y.row(i)[tile.clone()])
                .zip(rt)
                .zip(pt.iter_mut());
            for ((((dv, &hv), &yv), rj), p) in it {
                if hv <= 0.0 {
                    *dv = 0.0;
                    continue;
                }
                let z = yv / rj;
                sg += *dv * z;
                sb += *dv;
                *dv *= g[i];
                *p += *dv * z;
            }
            dgain[i] += sg;
            dbias[i] += sb;
        }
        if normalize {
            pt.iter_mut().for_each(|p| *p /= n);
            for i in 0..rows {
                let dr = &mut d.row_mut(i)[tile.clone()];
                for (((dv, &yv), rj), p) in dr.iter_mut().zip(&y.row(i)[tile.clone()]).zip(rt).zip(pt.iter()) {
                    *dv = (*dv - yv / rj * p) / rj;
                }
            }
        }
    }
    (Mat::column(&dgain), Mat::column(&dbias))
}

impl Network {
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layer_id(layer: usize) -> String {
        format!("fc{layer}")
    }

    /// Parameter groups in canonical order: per layer, weight, gain, bias.
    pub fn param_groups(&self) -> Vec<ParamGroup> {
        let m = self.config.width_multiplier;
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let (fan_out, fan_in) = layer.w.shape();
            let id = Self::layer_id(l);
            out.push(ParamGroup {
                id: format!("{id}.weight"),
                role: self.config.role_of(l),
                fan_in,
                fan_out,
                width_multiplier: m,
            });
            if layer.gain.is_some() {
                out.push(ParamGroup {
                    id: format!("{id}.gain"),
                    role: Role::Gain,
                    fan_in: 1,
                    fan_out,
                    width_multiplier: m,
                });
            }
            out.push(ParamGroup {
                id: format!("{id}.bias"),
                role: Role::Bias,
                fan_in: 1,
                fan_out,
                width_multiplier: m,
            });
        }
        out
    }

    /// Parameters in the order of [`Network::param_groups`].
    pub fn params_mut(&mut self) -> Vec<&mut Mat> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            out.push(&mut layer.w);
            if let Some(g) = layer.gain.as_mut() {
                out.push(g);
            }
            out.push(&mut layer.bias);
        }
        out
    }

    pub fn params(&self) -> Vec<&Mat> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.push(&layer.w);
            if let Some(g) = layer.gain.as_ref() {
                out.push(g);
            }
            out.push(&layer.bias);
        }
        out
    }

    pub fn forward(&self, x: &Mat) -> Result<ForwardCache> {
        if x.rows() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "input has {} features, network expects {}",
                x.rows(),
                self.config.input_dim
            )));
        }
        let rms = self.config.normalization == Normalization::RmsGain;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut current = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let linear = layer.w.matmul(&current)?;
            if !linear.is_finite() {
                return Err(Error::NonFinite(format!("activations of {}", Self::layer_id(l))));
            }
            let Some(gain) = layer.gain.as_ref() else {
                let mut logits = linear.clone();
                add_bias(&mut logits, &layer.bias);
                caches.push(LayerCache {
                    input: current,
                    linear,
                    col_rms: Vec::new(),
                });
                return Ok(ForwardCache {
                    layers: caches,
                    logits,
                });
            };
            let mut next = Mat::zeros(linear.rows(), linear.cols());
            let col_rms = block_forward(&linear, gain, &layer.bias, rms, &mut next);
            caches.push(LayerCache {
                input: current,
                linear,
                col_rms,
            });
            current = next;
        }
        unreachable!("the last layer has no gain")
    }

    pub fn logits(&self, x: &Mat) -> Result<Mat> {
        Ok(self.forward(x)?.logits)
    }

    /// Gradients of the mean cross-entropy with respect to every parameter.
    pub fn backward(&self, cache: &ForwardCache, labels: &[usize]) -> Result<Gradients> {
        let mut delta = softmax_xent_grad(&cache.logits, labels)?;
        let mut grads: Vec<LayerGrad> = Vec::with_capacity(self.layers.len());
        for (l, (layer, lc)) in self.layers.iter().zip(&cache.layers).enumerate().rev() {
            let (dlinear, dgain, dbias) = match layer.gain.as_ref() {
                None => {
                    let db = row_sums(&delta);
                    (delta, None, db)
                }
                Some(gain) => {
                    // The block output is the next layer's input; relu'(pre) = [h > 0].
                    let mut d = delta;
                    let out = &cache.layers[l + 1].input;
                    let (dgain, dbias) = block_backward(&mut d, &lc.linear, out, &lc.col_rms, gain);
                    (d, Some(dgain), dbias)
                }
            };
            let dw = Mat::gemm(&dlinear, Trans::No, &lc.input, Trans::Yes)?;
            if l > 0 {
                delta = Mat::gemm(&layer.w, Trans::Yes, &dlinear, Trans::No)?;
            } else {
                delta = Mat::zeros(1, 1);
            }
            grads.push(LayerGrad {
                w: dw,
                gain: dgain,
                bias: dbias,
            });
        }
        grads.reverse();
        Ok(Gradients { layers: grads })
    }

    pub fn loss(&self, x: &Mat, labels: &[usize]) -> Result<f64> {
        softmax_xent(&self.logits(x)?, labels)
    }
}

impl Gradients {
    /// Gradients in the order of [`Network::param_groups`].
    pub fn as_list(&self) -> Vec<&Mat> {
        let mut out = Vec::new();
        for g in &self.layers {
            out.push(&g.w);
            if let Some(gain) = g.gain.as_ref() {
                out.push(gain);
            }
            out.push(&g.bias);
        }
        out
    }
}

fn check_labels(logits: &Mat, labels: &[usize]) -> Result<()> {
    if labels.len() != logits.cols() {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {}",
            labels.len(),
            logits.cols()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= logits.rows()) {
        return Err(Error::Shape(format!("label {bad} out of {} classes", logits.rows())));
    }
    Ok(())
}

/// Column-wise softmax probabilities.
fn softmax(logits: &Mat) -> Mat {
    let (k, b) = logits.shape();
    let mut p = logits.clone();
    let mut max = vec![f64::NEG_INFINITY; b];
    for i in 0..k {
        for (m, &v) in max.iter_mut().zip(logits.row(i)) {
            *m = m.max(v);
        }
    }
    let mut sum = vec![0.0; b];
    for i in 0..k {
        for ((v, s), m) in p.row_mut(i).iter_mut().zip(sum.iter_mut()).zip(&max) {
            *v = (*v - m).exp();
            *s += *v;
        }
    }
    for i in 0..k {
        for (v, s) in p.row_mut(i).iter_mut().zip(&sum) {
            *v /= s;
        }
    }
    p
}

/// Mean softmax cross-entropy over the batch columns.
pub fn softmax_xent(logits: &Mat, labels: &[usize]) -> Result<f64> {
    check_labels(logits, labels)?;
    let (k, b) = logits.shape();
    let mut total = 0.0;
    for (j, &y) in labels.iter().enumerate() {
        let max = (0..k).map(|i| logits.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + (0..k).map(|i| (logits.get(i, j) - max).exp()).sum::<f64>().ln();
        total += lse - logits.get(y, j);
    }
    Ok(total / b as f64)
}

/// `(softmax(logits) − onehot) / B`.
pub fn softmax_xent_grad(logits: &Mat, labels: &[usize]) -> Result<Mat> {
    check_labels(logits, labels)?;
    let b = logits.cols();
    let mut g = softmax(logits);
    for (j, &y) in labels.iter().enumerate() {
        let v = g.get(y, j);
        g.set(y, j, v - 1.0);
    }
    g.scale(1.0 / b as f64);
    Ok(g)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub teacher_seed: u64,
    pub teacher_hidden: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            teacher_seed: 0,
            teacher_hidden: 64,
        }
    }
}

const BALANCE_SAMPLES: usize = 100_000;
const MAX_TEACHER_ATTEMPTS: u64 = 64;

/// Labels standard-Gaussian inputs by the argmax of a fixed random
/// two-layer ReLU network.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub teacher_seed: u64,
    pub input_dim: usize,
    pub num_classes: usize,
    w1: Mat,
    w2: Mat,
    offset: Mat,
    /// Class frequencies over the balance-check sample.
    pub class_freq: Vec<f64>,
}

impl SyntheticTask {
    /// Builds the teacher, centring each class logit over a calibration
    /// sample and redrawing until every class frequency lies within a factor
    /// 2 of uniform.
    pub fn new(cfg: &TaskConfig, input_dim: usize, num_classes: usize) -> Result<Self> {
        if cfg.teacher_hidden == 0 || input_dim == 0 || num_classes < 2 {
            return Err(Error::Config("teacher needs positive sizes and >= 2 classes".into()));
        }
        for attempt in 0..MAX_TEACHER_ATTEMPTS {
            let mut g = Gaussian::from_seed(derive_seed(cfg.teacher_seed, attempt, Stream::Teacher));
            let mut w1 = Mat::zeros(cfg.teacher_hidden, input_dim);
            g.fill(w1.data_mut());
            w1.scale(1.0 / (input_dim as f64).sqrt());
            let mut w2 = Mat::zeros(num_classes, cfg.teacher_hidden);
            g.fill(w2.data_mut());
            w2.scale(1.0 / (cfg.teacher_hidden as f64).sqrt());
            let mut task = Self {
                teacher_seed: cfg.teacher_seed,
                input_dim,
                num_classes,
                w1,
                w2,
                offset: Mat::zeros(num_classes, 1),
                class_freq: Vec::new(),
            };
            let mut calib = Mat::zeros(input_dim, 10_000);
            g.fill(calib.data_mut());
            let raw = task.teacher_logits(&calib)?;
            let mean = row_sums(&raw).scaled(-1.0 / calib.cols() as f64);
            task.offset = mean;

            let mut check = Mat::zeros(input_dim, BALANCE_SAMPLES);
            g.fill(check.data_mut());
            let mut counts = vec![0usize; num_classes];
            for y in task.labels(&check)? {
                counts[y] += 1;
            }
            let uniform = 1.0 / num_classes as f64;
            task.class_freq = counts
                .iter()
                .map(|&c| c as f64 / BALANCE_SAMPLES as f64)
                .collect();
            if task
                .class_freq
                .iter()
                .all(|&f| f >= 0.5 * uniform && f <= 2.0 * uniform)
            {
                return Ok(task);
            }
        }
        Err(Error::Config(format!(
            "no balanced teacher found in {MAX_TEACHER_ATTEMPTS} draws"
        )))
    }

    fn teacher_logits(&self, x: &Mat) -> Result<Mat> {
        let h = self.w1.matmul(x)?.map(|v| v.max(0.0));
        let mut logits = self.w2.matmul(&h)?;
        add_bias(&mut logits, &self.offset);
        Ok(logits)
    }

    pub fn labels(&self, x: &Mat) -> Result<Vec<usize>> {
        let logits = self.teacher_logits(x)?;
        Ok((0..x.cols())
            .map(|j| {
                (0..self.num_classes)
                    .max_by(|&a, &b| logits.get(a, j).total_cmp(&logits.get(b, j)))
                    .unwrap_or(0)
            })
            .collect())
    }

    pub fn sample(&self, g: &mut Gaussian<RunRng>, batch: usize) -> Result<(Mat, Vec<usize>)> {
        let mut x = Mat::zeros(self.input_dim, batch);
        g.fill(x.data_mut());
        let y = self.labels(&x)?;
        Ok((x, y))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub probe_batch_size: usize,
    pub seed: u64,
    /// Selects the run's random streams under `seed`, e.g. the repeat index.
    #[serde(default)]
    pub run_index: u64,
    pub optim: OptimConfig,
    pub schedule: ScheduleSpec,
    pub warmup_factor: WarmupFactorSpec,
    pub log_every: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.probe_batch_size == 0 {
            return Err(Error::Config("steps, batch_size and probe_batch_size must be positive".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        if self.schedule.total_steps != self.steps {
            return Err(Error::Config(format!(
                "schedule covers {} steps, training runs {}",
                self.schedule.total_steps, self.steps
            )));
        }
        self.optim.validate()?;
        self.schedule.validate()?;
        self.warmup_factor.validate()
    }
}

/// One logged metric row of a linear layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    #[serde(flatten)]
    pub sample: AlignmentSample,
    pub role: Role,
    pub loss: f64,
}

pub const METRIC_HEADER: [&str; 17] = [
    "step",
    "layer_id",
    "role",
    "fan_in",
    "weight_frob",
    "weight_rms",
    "delta_w_frob",
    "rel_weight_update",
    "y_frob",
    "delta_y_frob",
    "rel_repr_change",
    "weight_alignment",
    "update_alignment",
    "alignment_ratio",
    "lr_applied",
    "wd_applied",
    "loss",
];

impl MetricRow {
    fn fields(&self) -> Vec<String> {
        let s = &self.sample;
        let mut out = vec![
            s.step.to_string(),
            s.layer_id.clone(),
            self.role.as_str().to_string(),
            s.fan_in.to_string(),
        ];
        out.extend(
            [
                s.weight_frob,
                s.weight_rms,
                s.delta_w_frob,
                s.rel_weight_update,
                s.y_frob,
                s.delta_y_frob,
                s.rel_repr_change,
                s.weight_alignment,
                s.update_alignment,
                s.alignment_ratio,
                s.lr_applied,
                s.wd_applied,
                self.loss,
            ]
            .iter()
            .map(|v| v.to_string()),
        );
        out
    }
}

pub fn write_metric_csv<W: Write>(rows: &[MetricRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(METRIC_HEADER).map_err(io)?;
    for row in rows {
        w.write_record(row.fields()).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct LossLine {
    step: u64,
    loss: f64,
}

/// One `{"step": t, "loss": l}` object per line.
pub fn write_loss_jsonl<W: Write>(losses: &[f64], mut out: W) -> Result<()> {
    for (step, &loss) in losses.iter().enumerate() {
        let line = serde_json::to_string(&LossLine {
            step: step as u64,
            loss,
        })
        .map_err(|e| Error::Io(e.to_string()))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Metrics of a layer whose update, input or output has zero norm, where
/// [`layer_metrics`] refuses to define alignments. A zero update records zero
/// change; other undefined ratios are NaN.
fn degenerate_sample(w: &Mat, dw: &Mat, x: &Mat, step: u64, layer_id: &str, lr: f64, wd: f64) -> Result<AlignmentSample> {
    let y = w.matmul(x)?;
    let dy = dw.matmul(x)?;
    let (w_frob, dw_frob, x_frob) = (frob_norm(w), frob_norm(dw), frob_norm(x));
    let (y_frob, dy_frob) = (frob_norm(&y), frob_norm(&dy));
    let weight_alignment = y_frob / (w_frob * x_frob);
    let (update_alignment, rel_repr_change) = if dw_frob == 0.0 {
        (0.0, 0.0)
    } else {
        (dy_frob / (dw_frob * x_frob), dy_frob / y_frob)
    };
    let alignment_ratio = if dw_frob == 0.0 { 0.0 } else { update_alignment / weight_alignment };
    Ok(AlignmentSample {
        step,
        layer_id: layer_id.to_string(),
        fan_in: w.cols(),
        weight_frob: w_frob,
        weight_rms: w_frob / (w.len() as f64).sqrt(),
        delta_w_frob: dw_frob,
        rel_weight_update: dw_frob / w_frob,
        y_frob,
        delta_y_frob: dy_frob,
        rel_repr_change,
        weight_alignment,
        update_alignment,
        alignment_ratio,
        lr_applied: lr,
        wd_applied: wd,
    })
}

pub const DIVERGENCE_FACTOR: f64 = 10.0;
pub const DIVERGENCE_PATIENCE: u64 = 50;
pub const TAIL_FRACTION: f64 = 0.05;

/// Result of a finished or halted run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub losses: Vec<f64>,
    pub rows: Vec<MetricRow>,
    /// Reason the run was halted, if it diverged.
    pub diverged: Option<String>,
    pub network: Network,
}

impl RunResult {
    /// Mean loss over the last 5% of steps (at least one step).
    pub fn final_loss(&self) -> Option<f64> {
        if self.diverged.is_some() || self.losses.is_empty() {
            return None;
        }
        Some(tail_mean(&self.losses, TAIL_FRACTION))
    }
}

pub fn tail_mean(values: &[f64], fraction: f64) -> f64 {
    let n = ((values.len() as f64 * fraction).ceil() as usize).clamp(1, values.len());
    let tail = &values[values.len() - n..];
    tail.iter().sum::<f64>() / n as f64
}

/// Output of one optimization step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub loss: f64,
    pub rows: Vec<MetricRow>,
}

/// Training state of a single run.
pub struct Trainer {
    net: Network,
    groups: Vec<ParamGroup>,
    states: Vec<AdamWState>,
    task: SyntheticTask,
    cfg: TrainConfig,
    warmup: WarmupState,
    data: Gaussian<RunRng>,
    probe: Mat,
    t: u64,
    initial_loss: Option<f64>,
    above_limit: u64,
}

impl Trainer {
    pub fn new(net_cfg: &NetworkConfig, task_cfg: &TaskConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let net = init_network(net_cfg, derive_seed(cfg.seed, cfg.run_index, Stream::Init))?;
        let task = SyntheticTask::new(task_cfg, net_cfg.input_dim, net_cfg.num_classes)?;
        let mut probe_rng = Gaussian::from_seed(derive_seed(cfg.seed, cfg.run_index, Stream::Probe));
        let (probe, _) = task.sample(&mut probe_rng, cfg.probe_batch_size)?;
        Ok(Self::from_parts(net, task, probe, cfg.clone()))
    }

    /// Starts from an explicit network, task and probe batch.
    pub fn from_parts(net: Network, task: SyntheticTask, probe: Mat, cfg: TrainConfig) -> Self {
        let groups = net.param_groups();
        let states = net.params().iter().map(|p| AdamWState::for_param(p)).collect();
        let warmup = WarmupState::new(cfg.warmup_factor.clone(), &cfg.schedule);
        Self {
            groups,
            states,
            data: Gaussian::from_seed(derive_seed(cfg.seed, cfg.run_index, Stream::Data)),
            net,
            task,
            probe,
            warmup,
            cfg,
            t: 0,
            initial_loss: None,
            above_limit: 0,
        }
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn step_index(&self) -> u64 {
        self.t
    }

    pub fn is_logged(&self, t: u64) -> bool {
        t % self.cfg.log_every == 0 || t + 1 == self.cfg.steps
    }

    /// Learning rate applied to each parameter group at the current step.
    pub fn current_lrs(&self) -> Result<Vec<f64>> {
        self.groups
            .iter()
            .map(|g| lr_at(self.t, g, &self.cfg.optim, &self.cfg.schedule, &self.warmup))
            .collect()
    }

    /// Samples a batch and applies one AdamW step with the given gradients
    /// override (used for synthetic-gradient checks), or backprop gradients.
    pub fn step_with(&mut self, grads_override: Option<&[Mat]>) -> Result<StepOutput> {
        let t = self.t;
        if t >= self.cfg.steps {
            return Err(Error::StepOutOfRange {
                t,
                total: self.cfg.steps,
            });
        }
        let (x, labels) = self.task.sample(&mut self.data, self.cfg.batch_size)?;
        let cache = self.net.forward(&x)?;
        let loss = softmax_xent(&cache.logits, &labels)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step: t,
                reason: "non-finite loss".into(),
            });
        }
        let initial = *self.initial_loss.get_or_insert(loss);
        if loss > DIVERGENCE_FACTOR * initial {
            self.above_limit += 1;
            if self.above_limit >= DIVERGENCE_PATIENCE {
                return Err(Error::Diverged {
                    step: t,
                    reason: format!("loss above {DIVERGENCE_FACTOR}x initial for {DIVERGENCE_PATIENCE} steps"),
                });
            }
        } else {
            self.above_limit = 0;
        }

        let backprop;
        let grads: Vec<&Mat> = match grads_override {
            Some(g) => {
                if g.len() != self.groups.len() {
                    return Err(Error::Shape(format!(
                        "{} gradients for {} parameter groups",
                        g.len(),
                        self.groups.len()
                    )));
                }
                g.iter().collect()
            }
            None => {
                backprop = self.net.backward(&cache, &labels)?;
                backprop.as_list()
            }
        };

        let logged = self.is_logged(t);
        let probe_inputs: Vec<Mat> = if logged {
            self.net.forward(&self.probe)?.layers.into_iter().map(|c| c.input).collect()
        } else {
            Vec::new()
        };
        let lrs = self.current_lrs()?;
        let mut rows = Vec::new();
        let params = self.net.params_mut();
        let mut weight_layer = 0;
        let mut hidden_lr = None;
        let mut output_lr = None;
        for (((group, param), (state, grad)), &lr) in self
            .groups
            .iter()
            .zip(params)
            .zip(self.states.iter_mut().zip(grads))
            .zip(&lrs)
        {
            let wd = effective_wd(&self.cfg.optim, group);
            let before = (logged && matches!(group.role, Role::Input | Role::Hidden | Role::Output))
                .then(|| param.clone());
            let update = adamw_step(state, param, grad, lr, wd, &self.cfg.optim).map_err(|e| match e {
                Error::NonFinite(what) => Error::Diverged { step: t, reason: what },
                other => other,
            })?;
            match group.role {
                Role::Hidden => hidden_lr = hidden_lr.or(Some(lr)),
                Role::Output => output_lr = Some(lr),
                _ => {}
            }
            if let Some(w) = before {
                let id = Network::layer_id(weight_layer);
                let x = &probe_inputs[weight_layer];
                let sample = match layer_metrics(&w, &update, x, t, &id, lr, wd) {
                    Err(Error::DegenerateAlignment(_)) => degenerate_sample(&w, &update, x, t, &id, lr, wd)?,
                    other => other?,
                };
                rows.push(MetricRow {
                    sample,
                    role: group.role,
                    loss,
                });
            }
            if matches!(group.role, Role::Input | Role::Hidden | Role::Output) {
                weight_layer += 1;
            }
        }
        if let Some(lr) = hidden_lr.or(output_lr) {
            self.warmup.advance(lr)?;
        }
        self.t += 1;
        Ok(StepOutput { loss, rows })
    }

    pub fn step(&mut self) -> Result<StepOutput> {
        self.step_with(None)
    }

    /// Runs the remaining steps. Divergence halts the run and is reported in
    /// the result, other errors propagate.
    pub fn run(mut self) -> Result<RunResult> {
        let mut losses = Vec::with_capacity(self.cfg.steps as usize);
        let mut rows = Vec::new();
        let mut diverged = None;
        while self.t < self.cfg.steps {
            match self.step() {
                Ok(out) => {
                    losses.push(out.loss);
                    rows.extend(out.rows);
                }
                Err(Error::Diverged { step, reason }) => {
                    diverged = Some(format!("step {step}: {reason}"));
                    break;
                }
                Err(Error::NonFinite(what)) => {
                    diverged = Some(format!("step {}: non-finite {what}", self.t));
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        Ok(RunResult {
            losses,
            rows,
            diverged,
            network: self.net,
        })
    }
}

/// Builds and runs a full training job.
pub fn train(net_cfg: &NetworkConfig, task_cfg: &TaskConfig, cfg: &TrainConfig) -> Result<RunResult> {
    Trainer::new(net_cfg, task_cfg, cfg)?.run()
}

/// Finite-difference comparison for one parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRow {
    pub param: String,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// Entries left out because a perturbation flipped a ReLU.
    pub skipped: usize,
}

/// Denominator floor of the relative error, so entries whose true gradient
/// is near zero are judged by absolute error.
pub const GRADCHECK_REL_FLOOR: f64 = 1e-6;

fn relu_pattern(cache: &ForwardCache) -> Vec<bool> {
    cache.layers[1..]
        .iter()
        .flat_map(|l| l.input.data().iter().map(|&v| v > 0.0))
        .collect()
}

/// Compares backprop gradients with fourth-order central differences
/// (step `h`) on every parameter entry. The loss is not differentiable where a ReLU
/// switches, so entries whose `±h` perturbation changes any activation
/// pattern are counted in `skipped` instead of compared.
pub fn gradcheck(net: &Network, x: &Mat, labels: &[usize], h: f64) -> Result<Vec<GradcheckRow>> {
    let base = net.forward(x)?;
    let pattern = relu_pattern(&base);
    let analytic = net.backward(&base, labels)?;
    let analytic: Vec<Mat> = analytic.as_list().into_iter().cloned().collect();
    let groups = net.param_groups();
    let mut probe = net.clone();
    let mut out = Vec::with_capacity(groups.len());
    for (p, (group, grad)) in groups.iter().zip(&analytic).enumerate() {
        let (mut max_abs, mut max_rel, mut skipped) = (0.0f64, 0.0f64, 0);
        for k in 0..grad.len() {
            let orig = probe.params()[p].data()[k];
            let mut at = |value: f64| -> Result<(f64, bool)> {
                probe.params_mut()[p].data_mut()[k] = value;
                let cache = probe.forward(x)?;
                Ok((softmax_xent(&cache.logits, labels)?, relu_pattern(&cache) == pattern))
            };
            let mut values = [0.0; 4];
            let mut smooth = true;
            for (v, offset) in values.iter_mut().zip([h, -h, 2.0 * h, -2.0 * h]) {
                let (loss, same) = at(orig + offset)?;
                *v = loss;
                smooth &= same;
            }
            probe.params_mut()[p].data_mut()[k] = orig;
            if !smooth {
                skipped += 1;
                continue;
            }
            let [p1, m1, p2, m2] = values;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            let a = grad.data()[k];
            let err = (a - numeric).abs();
            max_abs = max_abs.max(err);
            max_rel = max_rel.max(err / a.abs().max(numeric.abs()).max(GRADCHECK_REL_FLOOR));
        }
        out.push(GradcheckRow {
            param: group.id.clone(),
            max_abs_err: max_abs,
            max_rel_err: max_rel,
            skipped,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RescaleVariant {
    /// `κW` in front of an RMS normalization.
    Norm,
    /// `κW` compensated by `γ/κ`.
    Gain,
    /// `(κW₁, W₂/κ)` around a ReLU; the first block's bias scales with `κ`.
    Homogeneous,
}

impl std::str::FromStr for RescaleVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "norm" => Ok(Self::Norm),
            "gain" => Ok(Self::Gain),
            "homogeneous" => Ok(Self::Homogeneous),
            _ => Err(Error::Config(format!("unknown rescale variant {s:?}"))),
        }
    }
}

/// Rescaled copy of `net` whose function is unchanged in exact arithmetic.
pub fn rescaled(net: &Network, kappa: f64, variant: RescaleVariant) -> Result<Network> {
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(Error::InvalidParameter(format!("kappa must be positive, got {kappa}")));
    }
    let norm = net.config.normalization;
    let mut out = net.clone();
    match variant {
        RescaleVariant::Norm => {
            if norm != Normalization::RmsGain {
                return Err(Error::InvalidParameter("norm variant needs rms_gain normalization".into()));
            }
            out.layers[0].w.scale(kappa);
        }
        RescaleVariant::Gain => {
            if norm != Normalization::None {
                return Err(Error::InvalidParameter("gain variant needs normalization = none".into()));
            }
            let first = &mut out.layers[0];
            first.w.scale(kappa);
            if let Some(g) = first.gain.as_mut() {
                g.scale(1.0 / kappa);
            }
        }
        RescaleVariant::Homogeneous => {
            if norm != Normalization::None {
                return Err(Error::InvalidParameter(
                    "homogeneous variant needs normalization = none".into(),
                ));
            }
            out.layers[0].w.scale(kappa);
            out.layers[0].bias.scale(kappa);
            out.layers[1].w.scale(1.0 / kappa);
        }
    }
    Ok(out)
}

/// Max absolute logit deviation between `net` and its rescaled copy on `x`.
pub fn rescale_invariance_check(net: &Network, x: &Mat, kappa: f64, variant: RescaleVariant) -> Result<f64> {
    let base = net.logits(x)?;
    let other = rescaled(net, kappa, variant)?.logits(x)?;
    Ok(base.sub(&other)?.max_abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::WdMode;
    use crate::schedule::ScheduleKind;

    fn small_cfg(norm: Normalization) -> NetworkConfig {
        NetworkConfig {
            depth: 3,
            base_width: 16,
            width_multiplier: 1.0,
            input_dim: 6,
            num_classes: 4,
            normalization: norm,
            ..NetworkConfig::default()
        }
    }

    fn gaussian_batch(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut g = Gaussian::from_seed(seed);
        let mut x = Mat::zeros(rows, cols);
        g.fill(x.data_mut());
        x
    }

    fn train_cfg(steps: u64, lr: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 64,
            probe_batch_size: 16,
            seed,
            run_index: 0,
            optim: OptimConfig {
                eta_base: lr,
                ..OptimConfig::default()
            },
            schedule: ScheduleSpec::constant(steps, lr),
            warmup_factor: WarmupFactorSpec::None,
            log_every: 1,
        }
    }

    #[test]
    fn init_norm_concentrates() {
        let cfg = NetworkConfig {
            depth: 3,
            base_width: 1024,
            input_dim: 1024,
            ..NetworkConfig::default()
        };
        let net = init_network(&cfg, 3).unwrap();
        let w = &net.layers[1].w;
        assert!((frob_norm(w) / 32.0 - 1.0).abs() < 0.05);
        let rms = frob_norm(w) / (w.len() as f64).sqrt();
        assert!((rms * 32.0 - 1.0).abs() < 0.05);
        for layer in &net.layers[..2] {
            assert!(layer.gain.as_ref().unwrap().data().iter().all(|&g| g == 1.0));
            assert!(layer.bias.is_zero());
        }
        assert!(net.layers[2].gain.is_none());
    }

    #[test]
    fn rejects_fractional_width() {
        let cfg = NetworkConfig {
            base_width: 10,
            width_multiplier: 1.25,
            ..NetworkConfig::default()
        };
        assert!(matches!(init_network(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_input_gives_zero_logits_without_norm() {
        let net = init_network(&small_cfg(Normalization::None), 1).unwrap();
        let logits = net.logits(&Mat::zeros(6, 5)).unwrap();
        assert!(logits.is_zero());
    }

    #[test]
    fn single_linear_layer_matches_product() {
        let cfg = NetworkConfig {
            depth: 2,
            ..small_cfg(Normalization::None)
        };
        let net = init_network(&cfg, 2).unwrap();
        let x = gaussian_batch(6, 7, 9);
        let cache = net.forward(&x).unwrap();
        assert_eq!(cache.layers[0].linear, net.layers[0].w.matmul(&x).unwrap());
    }

    #[test]
    fn uniform_logits_gradient() {
        let logits = Mat::zeros(4, 3);
        let g = softmax_xent_grad(&logits, &[0, 2, 3]).unwrap();
        assert!((g.get(0, 0) - (0.25 - 1.0) / 3.0).abs() < 1e-15);
        assert!((g.get(1, 0) - 0.25 / 3.0).abs() < 1e-15);
        assert!((softmax_xent(&logits, &[0, 2, 3]).unwrap() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for norm in [Normalization::RmsGain, Normalization::None] {
            let net = init_network(&small_cfg(norm), 11).unwrap();
            let mut net = net;
            for layer in &mut net.layers {
                let n = layer.bias.len();
                let noise = gaussian_batch(n, 1, 5).scaled(0.1);
                layer.bias.add_assign(&noise).unwrap();
            }
            let x = gaussian_batch(6, 8, 21);
            let labels = [0, 1, 2, 3, 0, 1, 2, 3];
            let rows = gradcheck(&net, &x, &labels, 1e-4).unwrap();
            for row in rows {
                assert!(row.max_rel_err < 1e-5, "{norm:?} {row:?}");
                assert_eq!(row.skipped, 0, "{norm:?} {row:?}");
            }
        }
    }

    #[test]
    fn rescaling_leaves_outputs_unchanged() {
        let x = gaussian_batch(6, 32, 4);
        let with_norm = init_network(&small_cfg(Normalization::RmsGain), 8).unwrap();
        let plain = init_network(&small_cfg(Normalization::None), 8).unwrap();
        for kappa in [0.5, 2.0, 8.0] {
            assert!(rescale_invariance_check(&with_norm, &x, kappa, RescaleVariant::Norm).unwrap() < 1e-10);
            assert!(rescale_invariance_check(&plain, &x, kappa, RescaleVariant::Gain).unwrap() < 1e-10);
            assert!(rescale_invariance_check(&plain, &x, kappa, RescaleVariant::Homogeneous).unwrap() < 1e-9);
        }
        assert!(rescale_invariance_check(&plain, &x, 0.0, RescaleVariant::Gain).is_err());
        assert!(rescale_invariance_check(&plain, &x, -1.0, RescaleVariant::Homogeneous).is_err());
        assert!(rescale_invariance_check(&plain, &x, 2.0, RescaleVariant::Norm).is_err());
    }

    #[test]
    fn teacher_is_balanced_and_deterministic() {
        let cfg = TaskConfig::default();
        let a = SyntheticTask::new(&cfg, 16, 10).unwrap();
        let b = SyntheticTask::new(&cfg, 16, 10).unwrap();
        assert_eq!(a, b);
        assert!(a.class_freq.iter().all(|&f| (0.05..=0.2).contains(&f)));
    }

    #[test]
    fn zero_lr_step_leaves_loss_unchanged() {
        let net_cfg = small_cfg(Normalization::RmsGain);
        let mut cfg = train_cfg(3, 1e-3, 1);
        cfg.optim.eta_frozen = Some(1e-3);
        cfg.schedule = ScheduleSpec {
            kind: ScheduleKind::LinearWarmupLinearDecay,
            total_steps: 3,
            warmup_frac: 1.0,
            peak: 1e-3,
            floor: 0.0,
        };
        let mut trainer = Trainer::new(&net_cfg, &TaskConfig::default(), &cfg).unwrap();
        let probe = gaussian_batch(6, 16, 2);
        let labels: Vec<usize> = (0..16).map(|i| i % 4).collect();
        let before = trainer.network().loss(&probe, &labels).unwrap();
        let out = trainer.step().unwrap();
        assert!(out.rows.iter().all(|r| r.sample.rel_weight_update == 0.0));
        assert_eq!(trainer.network().loss(&probe, &labels).unwrap(), before);
    }

    #[test]
    fn zero_gradient_without_decay_gives_zero_update() {
        let net_cfg = small_cfg(Normalization::RmsGain);
        let mut cfg = train_cfg(2, 1e-2, 3);
        cfg.optim.lambda_base = 0.0;
        let mut trainer = Trainer::new(&net_cfg, &TaskConfig::default(), &cfg).unwrap();
        let zeros: Vec<Mat> = trainer
            .network()
            .params()
            .iter()
            .map(|p| Mat::zeros(p.rows(), p.cols()))
            .collect();
        let before = trainer.network().clone();
        let out = trainer.step_with(Some(&zeros)).unwrap();
        assert_eq!(out.rows.len(), 3);
        assert!(out.rows.iter().all(|r| r.sample.rel_weight_update == 0.0));
        assert_eq!(trainer.network(), &before);
    }

    #[test]
    fn logged_rows_satisfy_identity_and_runs_are_deterministic() {
        let net_cfg = small_cfg(Normalization::RmsGain);
        let cfg = train_cfg(20, 1e-2, 7);
        let a = train(&net_cfg, &TaskConfig::default(), &cfg).unwrap();
        let b = train(&net_cfg, &TaskConfig::default(), &cfg).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.rows.len(), 60);
        for r in &a.rows {
            let s = &r.sample;
            let product = s.alignment_ratio * s.rel_weight_update;
            assert!(((s.rel_repr_change - product) / s.rel_repr_change).abs() < 1e-9);
        }
        assert!(a.final_loss().unwrap() < a.losses[0]);
    }

    #[test]
    fn first_hidden_update_shrinks_with_width() {
        let mut ratios = Vec::new();
        for seed in 0..3 {
            let rel = |m: f64| {
                let net_cfg = NetworkConfig {
                    width_multiplier: m,
                    ..small_cfg(Normalization::RmsGain)
                };
                let mut cfg = train_cfg(1, 1e-2, seed);
                cfg.optim.wd_mode = WdMode::Independent;
                let mut trainer = Trainer::new(&net_cfg, &TaskConfig::default(), &cfg).unwrap();
                let out = trainer.step().unwrap();
                out.rows[1].sample.rel_weight_update
            };
            ratios.push(rel(16.0) / rel(1.0));
        }
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        assert!((mean / 0.25 - 1.0).abs() < 0.25, "{ratios:?}");
    }

    #[test]
    fn divergence_is_flagged() {
        let net_cfg = small_cfg(Normalization::None);
        let mut cfg = train_cfg(300, 1e4, 1);
        cfg.optim.lambda_base = 0.0;
        let run = train(&net_cfg, &TaskConfig::default(), &cfg).unwrap();
        assert!(run.diverged.is_some(), "losses {:?}", &run.losses[run.losses.len() - 3..]);
        assert!(run.final_loss().is_none());
    }

    #[test]
    fn metric_csv_has_header_and_rows() {
        let net_cfg = small_cfg(Normalization::RmsGain);
        let run = train(&net_cfg, &TaskConfig::default(), &train_cfg(2, 1e-2, 1)).unwrap();
        let mut buf = Vec::new();
        write_metric_csv(&run.rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), METRIC_HEADER.join(","));
        assert_eq!(lines.count(), 6);
        let mut jsonl = Vec::new();
        write_loss_jsonl(&run.losses, &mut jsonl).unwrap();
        let first: serde_json::Value =
            serde_json::from_str(String::from_utf8(jsonl).unwrap().lines().next().unwrap()).unwrap();
        assert_eq!(first["step"], 0);
    }
}
