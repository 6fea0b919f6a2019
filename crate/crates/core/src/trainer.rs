//! Desk-scale training harness: small MLPs with analytic gradients, synthetic
//! tasks with known optima, learning-rate schedules and the training loop that
//! feeds the optimizers and geometry probes.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diagnostics::{probe_steps, trace_reports, ProbeRecord, ProbeSpec, DEFAULT_RANK_TOL};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::optim::{self, routed_algorithm, Algorithm, OptimizerConfig, ParamKind, ParamState};
use crate::rng::SeededRng;

const STREAM_INIT: u64 = 1;
const STREAM_TEACHER: u64 = 2;
const STREAM_TRAIN: u64 = 3;
const STREAM_VAL: u64 = 4;
const STREAM_BATCH: u64 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `out x in`; each row is one neuron.
    pub weight: Matrix,
    /// `1 x out`
    pub bias: Matrix,
}

/// Fully connected network with a shared hidden activation and a linear
/// output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    pub layers: Vec<Layer>,
    pub activation: Activation,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub kind: ParamKind,
    pub shape: (usize, usize),
}

impl MlpModel {
    /// Weights drawn from `N(0, 1/fan_in)`, biases zero.
    pub fn new(dims: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        Self::init(dims, activation, seed, STREAM_INIT)
    }

    fn init(dims: &[usize], activation: Activation, seed: u64, stream: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::config(
                "model.dims",
                format!("need at least two positive layer widths, got {dims:?}"),
            ));
        }
        let mut rng = SeededRng::with_stream(seed, stream);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                Layer {
                    weight: rng.gaussian_matrix(fan_out, fan_in, 1.0 / (fan_in as f64).sqrt()),
                    bias: Matrix::zeros(1, fan_out),
                }
            })
            .collect();
        Ok(Self {
            layers,
            activation,
            seed,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.rows()
    }

    /// Parameters in canonical order: `layer0.weight, layer0.bias, layer1.weight, ...`
    pub fn param_info(&self) -> Vec<ParamInfo> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    ParamInfo {
                        name: format!("layer{i}.weight"),
                        kind: ParamKind::Hidden2d,
                        shape: l.weight.shape(),
                    },
                    ParamInfo {
                        name: format!("layer{i}.bias"),
                        kind: ParamKind::Bias,
                        shape: l.bias.shape(),
                    },
                ]
            })
            .collect()
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn param_index(&self, name: &str) -> Result<usize> {
        self.param_info()
            .iter()
            .position(|p| p.name == name)
            .ok_or_else(|| Error::Lookup {
                kind: "parameter",
                name: name.to_string(),
            })
    }

    pub fn element_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// SHA-256 over every parameter's name, shape and little-endian values.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (info, p) in self.param_info().iter().zip(self.params()) {
            hasher.update(info.name.as_bytes());
            hasher.update((p.rows() as u32).to_le_bytes());
            hasher.update((p.cols() as u32).to_le_bytes());
            for x in p.as_slice() {
                hasher.update(x.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    pub fn forward(&self, inputs: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(inputs)?.pop().unwrap().1)
    }

    /// `(pre_activation, activation)` per layer; entry 0 is the input.
    fn forward_cached(&self, inputs: &Matrix) -> Result<Vec<(Matrix, Matrix)>> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::shape(
                "forward",
                format!("inputs have {} features, model expects {}", inputs.cols(), self.input_dim()),
            ));
        }
        let mut cache = vec![(inputs.clone(), inputs.clone())];
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let prev = &cache.last().unwrap().1;
            let mut z = prev.matmul(&layer.weight.transpose())?;
            let bias = layer.bias.as_slice();
            for i in 0..z.rows() {
                for (zij, b) in z.row_mut(i).iter_mut().zip(bias) {
                    *zij += b;
                }
            }
            let a = if l == last {
                z.clone()
            } else {
                z.map(|v| self.activation.apply(v))
            };
            cache.push((z, a));
        }
        Ok(cache)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// `N x out` real targets, mean squared error.
    Regression(Matrix),
    /// Class index per sample, softmax cross-entropy.
    Classes(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub targets: Targets,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        let inputs = Matrix::concat_rows(
            &idx.iter().map(|&i| self.inputs.slice_rows(i, i + 1)).collect::<Vec<_>>(),
        )
        .expect("rows share a width");
        let targets = match &self.targets {
            Targets::Regression(t) => Targets::Regression(
                Matrix::concat_rows(&idx.iter().map(|&i| t.slice_rows(i, i + 1)).collect::<Vec<_>>())
                    .expect("rows share a width"),
            ),
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
        };
        Dataset { inputs, targets }
    }

    /// Rows repeated `times` times, in order.
    pub fn repeat(&self, times: usize) -> Dataset {
        let idx: Vec<usize> = (0..times).flat_map(|_| 0..self.len()).collect();
        self.select(&idx)
    }

    /// Byte encoding used for determinism checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.inputs.to_bytes();
        match &self.targets {
            Targets::Regression(t) => out.extend(t.to_bytes()),
            Targets::Classes(c) => c.iter().for_each(|&k| out.extend((k as u64).to_le_bytes())),
        }
        out
    }
}

/// Loss and gradients aligned with [`MlpModel::params`].
pub fn forward_backward(model: &MlpModel, batch: &Dataset) -> Result<(f64, Vec<Matrix>)> {
    let cache = model.forward_cached(&batch.inputs)?;
    let output = &cache.last().unwrap().1;
    let (n, d) = output.shape();
    let (loss, mut delta) = match &batch.targets {
        Targets::Regression(t) => {
            if t.shape() != output.shape() {
                return Err(Error::shape(
                    "forward_backward",
                    format!("targets {:?} for outputs {:?}", t.shape(), output.shape()),
                ));
            }
            let scale = 1.0 / (n * d) as f64;
            let diff = output.sub(t)?;
            (diff.sum_sq() * scale, diff.scale(2.0 * scale))
        }
        Targets::Classes(classes) => {
            if classes.len() != n || classes.iter().any(|&c| c >= d) {
                return Err(Error::shape(
                    "forward_backward",
                    format!("{} labels for {n} samples over {d} classes", classes.len()),
                ));
            }
            let mut grad = Matrix::zeros(n, d);
            let mut total = 0.0;
            for (i, &c) in classes.iter().enumerate() {
                let row = output.row(i);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum_exp: f64 = row.iter().map(|z| (z - max).exp()).sum();
                let log_z = max + sum_exp.ln();
                total += log_z - row[c];
                for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
                    let p = (row[j] - log_z).exp();
                    *g = (p - if j == c { 1.0 } else { 0.0 }) / n as f64;
                }
            }
            (total / n as f64, grad)
        }
    };

    let mut grads = Vec::with_capacity(model.layers.len() * 2);
    for l in (0..model.layers.len()).rev() {
        let input = &cache[l].1;
        let d_weight = delta.transpose().matmul(input)?;
        let mut d_bias = Matrix::zeros(1, delta.cols());
        for i in 0..delta.rows() {
            for (b, g) in d_bias.as_mut_slice().iter_mut().zip(delta.row(i)) {
                *b += g;
            }
        }
        grads.push(d_bias);
        grads.push(d_weight);
        if l > 0 {
            let d_act = delta.matmul(&model.layers[l].weight)?;
            let (z, a) = &cache[l];
            delta = Matrix::from_fn(d_act.rows(), d_act.cols(), |i, j| {
                d_act.get(i, j) * model.activation.derivative(z.get(i, j), a.get(i, j))
            });
        }
    }
    grads.reverse();
    Ok((loss, grads))
}

/// Denominator floor of [`gradient_check`]; below it errors are effectively
/// absolute.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheck {
    pub entries: usize,
    pub max_rel_err: f64,
    /// `(param, flat index)` of the largest error.
    pub worst: (String, usize),
}

/// Compares analytic gradients with central differences,
/// `h = 1e-6 * max(1, |w|)`, entry by entry.
pub fn gradient_check(model: &MlpModel, batch: &Dataset) -> Result<GradCheck> {
    let (_, grads) = forward_backward(model, batch)?;
    let info = model.param_info();
    let mut probe = model.clone();
    let mut out = GradCheck {
        entries: 0,
        max_rel_err: 0.0,
        worst: (String::new(), 0),
    };
    for (p, g) in grads.iter().enumerate() {
        for k in 0..g.numel() {
            let w = model.params()[p].as_slice()[k];
            let h = 1e-6 * w.abs().max(1.0);
            probe.params_mut()[p].as_mut_slice()[k] = w + h;
            let up = forward_backward(&probe, batch)?.0;
            probe.params_mut()[p].as_mut_slice()[k] = w - h;
            let down = forward_backward(&probe, batch)?.0;
            probe.params_mut()[p].as_mut_slice()[k] = w;
            let fd = (up - down) / (2.0 * h);
            let a = g.as_slice()[k];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(GRAD_CHECK_FLOOR);
            out.entries += 1;
            if rel > out.max_rel_err || out.worst.0.is_empty() {
                out.max_rel_err = out.max_rel_err.max(rel);
                out.worst = (info[p].name.clone(), k);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    TeacherRegression,
    GaussianClassification,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub input_dim: usize,
    /// Regression output width, or class count.
    pub output_dim: usize,
    pub sample_count: usize,
    pub val_count: usize,
    pub noise_std: f64,
    pub seed: u64,
    /// Hidden width of the teacher network (regression only).
    pub teacher_hidden: usize,
    /// Standard deviation of class means (classification only).
    pub class_separation: f64,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        Self {
            kind: TaskKind::TeacherRegression,
            input_dim: 32,
            output_dim: 16,
            sample_count: 256,
            val_count: 64,
            noise_std: 0.0,
            seed: 0,
            teacher_hidden: 32,
            class_separation: 2.0,
        }
    }
}

impl SyntheticTask {
    pub fn validate(&self) -> Result<()> {
        if self.sample_count == 0 {
            return Err(Error::config("task.sample_count", "must be at least 1"));
        }
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::config("task", "input_dim and output_dim must be positive"));
        }
        if self.kind == TaskKind::TeacherRegression && self.teacher_hidden == 0 {
            return Err(Error::config("task.teacher_hidden", "must be positive"));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::config("task.noise_std", "must be finite and >= 0"));
        }
        Ok(())
    }

    /// The fixed network that labels regression inputs.
    pub fn teacher(&self) -> Result<MlpModel> {
        MlpModel::init(
            &[self.input_dim, self.teacher_hidden, self.output_dim],
            Activation::Tanh,
            self.seed,
            STREAM_TEACHER,
        )
    }

    fn sample(&self, count: usize, stream: u64) -> Result<Dataset> {
        self.validate()?;
        let mut rng = SeededRng::with_stream(self.seed, stream);
        match self.kind {
            TaskKind::TeacherRegression => {
                let inputs = rng.gaussian_matrix(count, self.input_dim, 1.0);
                let clean = self.teacher()?.forward(&inputs)?;
                let mut targets = clean;
                if self.noise_std > 0.0 {
                    for t in targets.as_mut_slice() {
                        *t += self.noise_std * rng.gaussian();
                    }
                }
                Ok(Dataset {
                    inputs,
                    targets: Targets::Regression(targets),
                })
            }
            TaskKind::GaussianClassification => {
                let mut mean_rng = SeededRng::with_stream(self.seed, STREAM_TEACHER);
                let means = mean_rng.gaussian_matrix(self.output_dim, self.input_dim, self.class_separation);
                let classes: Vec<usize> = (0..count).map(|_| rng.below(self.output_dim)).collect();
                let noise = self.noise_std.max(0.0);
                let mut inputs = Matrix::zeros(count, self.input_dim);
                for (i, &c) in classes.iter().enumerate() {
                    for (j, x) in inputs.row_mut(i).iter_mut().enumerate() {
                        *x = means.get(c, j) + (1.0 + noise) * rng.gaussian();
                    }
                }
                Ok(Dataset {
                    inputs,
                    targets: Targets::Classes(classes),
                })
            }
        }
    }
}

/// Training split of `task` with exactly `sample_count` rows.
pub fn gen_synthetic(task: &SyntheticTask) -> Result<Dataset> {
    task.sample(task.sample_count, STREAM_TRAIN)
}

/// Held-out split drawn from the same teacher or class means.
pub fn gen_validation(task: &SyntheticTask) -> Result<Dataset> {
    task.sample(task.val_count, STREAM_VAL)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    WarmupLinearDecay,
    /// Warmup, flat plateau, then linear decay to zero.
    Wsd,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    pub warmup_steps: usize,
    /// WSD only: fraction of the run after which decay starts.
    pub decay_start_frac: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Constant,
            warmup_steps: 0,
            decay_start_frac: 0.8,
        }
    }
}

impl LrSchedule {
    pub fn constant() -> Self {
        Self::default()
    }

    pub fn warmup_linear_decay(warmup_steps: usize) -> Self {
        Self {
            kind: ScheduleKind::WarmupLinearDecay,
            warmup_steps,
            ..Self::default()
        }
    }

    pub fn wsd(warmup_steps: usize, decay_start_frac: f64) -> Self {
        Self {
            kind: ScheduleKind::Wsd,
            warmup_steps,
            decay_start_frac,
        }
    }

    pub fn validate(&self, total_steps: usize) -> Result<()> {
        if self.warmup_steps > total_steps {
            return Err(Error::config(
                "schedule.warmup_steps",
                format!("{} exceeds total steps {total_steps}", self.warmup_steps),
            ));
        }
        if !(0.0..=1.0).contains(&self.decay_start_frac) {
            return Err(Error::config("schedule.decay_start_frac", "must be in [0, 1]"));
        }
        Ok(())
    }

    /// Learning-rate multiplier in `[0, 1]` at `step` of `total_steps`.
    pub fn multiplier(&self, step: usize, total_steps: usize) -> Result<f64> {
        self.validate(total_steps)?;
        if step > total_steps {
            return Err(Error::config(
                "schedule",
                format!("step {step} beyond total steps {total_steps}"),
            ));
        }
        let warmup = self.warmup_steps;
        if self.kind != ScheduleKind::Constant && step < warmup {
            return Ok(step as f64 / warmup as f64);
        }
        let decay_from = match self.kind {
            ScheduleKind::Constant => return Ok(1.0),
            ScheduleKind::WarmupLinearDecay => warmup,
            ScheduleKind::Wsd => ((self.decay_start_frac * total_steps as f64) as usize).max(warmup),
        };
        if step < decay_from {
            return Ok(1.0);
        }
        if step >= total_steps {
            return Ok(0.0);
        }
        Ok((total_steps - step) as f64 / (total_steps - decay_from) as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    /// Used for hidden-layer matrices.
    pub optimizer: OptimizerConfig,
    /// Used for parameters routed to AdamW.
    pub fallback: OptimizerConfig,
    pub steps: usize,
    pub schedule: LrSchedule,
    /// Weight decay only on hidden-layer matrices.
    pub decay_hidden_only: bool,
    /// Full batch when `None`.
    pub batch_size: Option<usize>,
    pub batch_seed: u64,
    pub probes: Vec<ProbeSpec>,
    pub rank_tol: f64,
}

impl TrainConfig {
    pub fn new(algorithm: Algorithm, optimizer: OptimizerConfig, steps: usize) -> Self {
        let fallback = if algorithm == Algorithm::AdamW {
            optimizer
        } else {
            OptimizerConfig::adamw().with_lr(3e-3)
        };
        Self {
            algorithm,
            optimizer,
            fallback,
            steps,
            schedule: LrSchedule::constant(),
            decay_hidden_only: true,
            batch_size: None,
            batch_seed: 0,
            probes: Vec::new(),
            rank_tol: DEFAULT_RANK_TOL,
        }
    }

    pub fn with_schedule(mut self, schedule: LrSchedule) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn with_probe(mut self, param: &str, stride: usize) -> Self {
        self.probes.push(ProbeSpec {
            param: param.to_string(),
            stride,
        });
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps", "must be at least 1"));
        }
        self.optimizer.validate()?;
        self.fallback.validate().map_err(|e| match e {
            Error::Config { field, detail } => {
                Error::config(field.replacen("optimizer", "fallback", 1), detail)
            }
            other => other,
        })?;
        self.schedule.validate(self.steps)?;
        if self.batch_size == Some(0) {
            return Err(Error::config("batch_size", "must be positive"));
        }
        for p in &self.probes {
            if p.stride == 0 {
                return Err(Error::config("probes.stride", "must be at least 1"));
            }
        }
        Ok(())
    }

    /// Optimizer settings for one parameter after routing.
    pub fn param_config(&self, kind: ParamKind) -> (Algorithm, OptimizerConfig) {
        let alg = routed_algorithm(self.algorithm, kind);
        let base = if kind == ParamKind::Hidden2d {
            self.optimizer
        } else {
            self.fallback
        };
        let cfg = if self.decay_hidden_only && kind != ParamKind::Hidden2d {
            base.with_weight_decay(0.0)
        } else {
            base
        };
        (alg, cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunRow {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Scheduled hidden-layer learning rate of this step.
    pub effective_lr: f64,
    pub wall_micros: u64,
}

pub const RUN_CSV_HEADER: &str = "step,train_loss,val_loss,effective_lr,wall_micros";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunRecord {
    pub rows: Vec<RunRow>,
    pub checksum: String,
}

impl RunRecord {
    /// Equality ignoring wall-clock timings.
    pub fn same_trajectory(&self, other: &RunRecord) -> bool {
        self.checksum == other.checksum
            && self.rows.len() == other.rows.len()
            && self.rows.iter().zip(&other.rows).all(|(a, b)| {
                a.step == b.step
                    && a.train_loss.to_bits() == b.train_loss.to_bits()
                    && a.val_loss.to_bits() == b.val_loss.to_bits()
                    && a.effective_lr.to_bits() == b.effective_lr.to_bits()
            })
    }

    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{RUN_CSV_HEADER}")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{:e},{:e},{:e},{}",
                r.step, r.train_loss, r.val_loss, r.effective_lr, r.wall_micros
            )?;
        }
        Ok(())
    }

    pub fn first_loss(&self) -> f64 {
        self.rows.first().map_or(f64::NAN, |r| r.train_loss)
    }

    pub fn final_loss(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.train_loss)
    }
}

/// A training run in progress: model, per-parameter optimizer state and data.
pub struct Trainer {
    model: MlpModel,
    config: TrainConfig,
    states: Vec<ParamState>,
    routes: Vec<(Algorithm, OptimizerConfig)>,
    train: Dataset,
    val: Option<Dataset>,
    probe_plan: Vec<(usize, Vec<usize>)>,
    batch_rng: SeededRng,
    order: Vec<usize>,
    cursor: usize,
    step: usize,
}

/// Everything a finished run produced.
pub struct RunOutput {
    pub record: RunRecord,
    pub probes: Vec<ProbeRecord>,
    pub model: MlpModel,
}

impl Trainer {
    pub fn new(model: MlpModel, train: Dataset, val: Option<Dataset>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let info = model.param_info();
        let routes: Vec<_> = info.iter().map(|p| config.param_config(p.kind)).collect();
        let states = model
            .params()
            .into_iter()
            .zip(&routes)
            .map(|(w, (alg, _))| {
                let mut s = ParamState::new(Matrix::zeros(w.rows(), w.cols()), *alg);
                // weights live in the model and are swapped in for each step
                s.w = Matrix::zeros(0, 0);
                s
            })
            .collect();
        let mut probe_plan = Vec::new();
        for p in &config.probes {
            let idx = model.param_index(&p.param)?;
            probe_plan.push((idx, probe_steps(config.steps, p.stride)));
        }
        let batch_rng = SeededRng::with_stream(config.batch_seed, STREAM_BATCH);
        let order = (0..train.len()).collect();
        Ok(Self {
            model,
            states,
            routes,
            train,
            val,
            probe_plan,
            batch_rng,
            order,
            cursor: usize::MAX,
            step: 0,
            config,
        })
    }

    pub fn model(&self) -> &MlpModel {
        &self.model
    }

    pub fn states(&self) -> &[ParamState] {
        &self.states
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    fn next_batch(&mut self) -> Option<Dataset> {
        let b = self.config.batch_size.filter(|&b| b < self.train.len())?;
        if self.cursor.saturating_add(b) > self.order.len() {
            self.batch_rng.shuffle(&mut self.order);
            self.cursor = 0;
        }
        let idx = self.order[self.cursor..self.cursor + b].to_vec();
        self.cursor += b;
        Some(self.train.select(&idx))
    }

    /// Runs one optimizer step; returns the row recorded for it and any
    /// geometry probes taken.
    pub fn step(&mut self) -> Result<(RunRow, Vec<ProbeRecord>)> {
        let t = self.step + 1;
        if t > self.config.steps {
            return Err(Error::config("steps", "run already finished"));
        }
        let started = Instant::now();
        let batch = self.next_batch();
        let (train_loss, grads) = forward_backward(&self.model, batch.as_ref().unwrap_or(&self.train))?;
        if !train_loss.is_finite() {
            return Err(Error::Divergence { step: t, loss: train_loss });
        }
        let val_loss = match &self.val {
            Some(v) if !v.is_empty() => forward_backward(&self.model, v)?.0,
            _ => f64::NAN,
        };
        let mult = self.config.schedule.multiplier(t, self.config.steps)?;
        let info = self.model.param_info();
        let mut probes = Vec::new();
        let mut params = self.model.params_mut();
        for (i, grad) in grads.iter().enumerate() {
            let (alg, base) = self.routes[i];
            let cfg = base.with_lr(base.lr * mult);
            let state = &mut self.states[i];
            std::mem::swap(&mut state.w, params[i]);
            let probed = self
                .probe_plan
                .iter()
                .any(|(idx, steps)| *idx == i && steps.binary_search(&t).is_ok());
            let outcome = if probed {
                optim::step_traced(alg, state, grad, &cfg).and_then(|(_, trace)| {
                    let reports = trace_reports(&trace, alg.name(), self.config.rank_tol)?;
                    probes.extend(reports.into_iter().map(|report| ProbeRecord {
                        step: t,
                        param: info[i].name.clone(),
                        report,
                    }));
                    Ok(())
                })
            } else {
                optim::step(alg, state, grad, &cfg).map(|_| ())
            };
            std::mem::swap(&mut state.w, params[i]);
            match outcome {
                Err(Error::Numeric { .. }) => {
                    return Err(Error::Divergence { step: t, loss: train_loss })
                }
                other => other?,
            }
            if !params[i].all_finite() {
                return Err(Error::Divergence { step: t, loss: train_loss });
            }
        }
        self.step = t;
        let row = RunRow {
            step: t,
            train_loss,
            val_loss,
            effective_lr: self.config.optimizer.lr * mult,
            wall_micros: started.elapsed().as_micros() as u64,
        };
        Ok((row, probes))
    }

    pub fn run(mut self) -> Result<RunOutput> {
        let mut rows = Vec::with_capacity(self.config.steps);
        let mut probes = Vec::new();
        while self.step < self.config.steps {
            let (row, p) = self.step()?;
            rows.push(row);
            probes.extend(p);
        }
        let checksum = self.model.checksum();
        Ok(RunOutput {
            record: RunRecord { rows, checksum },
            probes,
            model: self.model,
        })
    }
}

/// Trains `model` on `task` and returns the loss curve, probes and final
/// weights.
pub fn train_loop(model: MlpModel, task: &SyntheticTask, config: TrainConfig) -> Result<RunOutput> {
    let train = gen_synthetic(task)?;
    let val = gen_validation(task)?;
    Trainer::new(model, train, Some(val), config)?.run()
}

/// Geometry reports for one parameter every `stride` steps of a run.
pub fn trajectory_probe(
    model: MlpModel,
    task: &SyntheticTask,
    config: TrainConfig,
    param: &str,
    stride: usize,
) -> Result<Vec<ProbeRecord>> {
    let mut config = config;
    config.probes = vec![ProbeSpec {
        param: param.to_string(),
        stride,
    }];
    Ok(train_loop(model, task, config)?.probes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn regression_task(seed: u64) -> SyntheticTask {
        SyntheticTask {
            input_dim: 5,
            output_dim: 3,
            sample_count: 8,
            val_count: 4,
            teacher_hidden: 6,
            seed,
            ..SyntheticTask::default()
        }
    }

    #[test]
    fn schedule_examples() {
        let s = LrSchedule::warmup_linear_decay(10);
        assert_eq!(s.multiplier(0, 100).unwrap(), 0.0);
        assert_eq!(s.multiplier(100, 100).unwrap(), 0.0);
        assert_eq!(s.multiplier(10 + 45, 100).unwrap(), 0.5);
        assert_eq!(s.multiplier(5, 100).unwrap(), 0.5);
        assert_eq!(LrSchedule::constant().multiplier(0, 10).unwrap(), 1.0);
        let w = LrSchedule::wsd(10, 0.8);
        assert_eq!(w.multiplier(0, 100).unwrap(), 0.0);
        assert_eq!(w.multiplier(50, 100).unwrap(), 1.0);
        assert_eq!(w.multiplier(80, 100).unwrap(), 1.0);
        assert_eq!(w.multiplier(90, 100).unwrap(), 0.5);
        assert_eq!(w.multiplier(100, 100).unwrap(), 0.0);
    }

    #[test]
    fn schedule_bounds_and_errors() {
        for kind in [LrSchedule::constant(), LrSchedule::warmup_linear_decay(7), LrSchedule::wsd(3, 0.5)] {
            for step in 0..=40 {
                let m = kind.multiplier(step, 40).unwrap();
                assert!((0.0..=1.0).contains(&m));
            }
        }
        assert!(LrSchedule::warmup_linear_decay(50).multiplier(0, 10).is_err());
        assert!(LrSchedule::constant().multiplier(11, 10).is_err());
        assert!(LrSchedule::wsd(0, 1.5).multiplier(0, 10).is_err());
    }

    #[test]
    fn perfect_predictions_have_zero_loss_and_gradient() {
        let task = regression_task(3);
        let teacher = task.teacher().unwrap();
        let data = gen_synthetic(&task).unwrap();
        let (loss, grads) = forward_backward(&teacher, &data).unwrap();
        assert!(loss <= 1e-20);
        assert!(grads.iter().all(|g| g.is_zero()));
    }

    #[test]
    fn duplicated_batch_is_invariant() {
        let task = regression_task(4);
        let data = gen_synthetic(&task).unwrap();
        let model = MlpModel::new(&[5, 7, 3], Activation::Tanh, 1).unwrap();
        let (l1, g1) = forward_backward(&model, &data).unwrap();
        let (l2, g2) = forward_backward(&model, &data.repeat(2)).unwrap();
        assert!((l1 - l2).abs() <= 1e-14 * l1);
        for (a, b) in g1.iter().zip(&g2) {
            assert!(a.sub(b).unwrap().frobenius_norm() <= 1e-14 * a.frobenius_norm().max(1e-300));
        }
    }

    #[test]
    fn synthetic_data_shapes_and_determinism() {
        let task = SyntheticTask {
            sample_count: 10,
            ..regression_task(9)
        };
        let a = gen_synthetic(&task).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a.to_bytes(), gen_synthetic(&task).unwrap().to_bytes());
        let cls = SyntheticTask {
            kind: TaskKind::GaussianClassification,
            ..task
        };
        let c = gen_synthetic(&cls).unwrap();
        assert_eq!(c.len(), 10);
        assert_eq!(c.to_bytes(), gen_synthetic(&cls).unwrap().to_bytes());
    }

    #[test]
    fn losses_are_non_negative() {
        for kind in [TaskKind::TeacherRegression, TaskKind::GaussianClassification] {
            let task = SyntheticTask { kind, ..regression_task(5) };
            let data = gen_synthetic(&task).unwrap();
            let model = MlpModel::new(&[5, 4, 3], Activation::Relu, 2).unwrap();
            assert!(forward_backward(&model, &data).unwrap().0 >= 0.0);
        }
    }

    #[test]
    fn shape_errors() {
        let model = MlpModel::new(&[5, 4, 3], Activation::Tanh, 2).unwrap();
        let bad = Dataset {
            inputs: Matrix::zeros(2, 4),
            targets: Targets::Regression(Matrix::zeros(2, 3)),
        };
        assert!(matches!(forward_backward(&model, &bad), Err(Error::Shape { .. })));
        let bad = Dataset {
            inputs: Matrix::zeros(2, 5),
            targets: Targets::Regression(Matrix::zeros(2, 2)),
        };
        assert!(forward_backward(&model, &bad).is_err());
    }

    #[test]
    fn zero_lr_is_a_null_run() {
        let task = regression_task(6);
        let model = MlpModel::new(&[5, 6, 3], Activation::Tanh, 3).unwrap();
        let before = model.checksum();
        for alg in Algorithm::ALL {
            let mut cfg = TrainConfig::new(alg, OptimizerConfig::defaults_for(alg).with_lr(0.0), 5);
            cfg.fallback = cfg.fallback.with_lr(0.0);
            let out = train_loop(model.clone(), &task, cfg).unwrap();
            assert_eq!(out.record.checksum, before, "{alg}");
            let first = out.record.rows[0].train_loss;
            assert!(out.record.rows.iter().all(|r| r.train_loss == first));
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let task = regression_task(7);
        let model = MlpModel::new(&[5, 6, 3], Activation::Tanh, 3).unwrap();
        let cfg = TrainConfig::new(Algorithm::NorMuon, OptimizerConfig::normuon(), 20);
        let a = train_loop(model.clone(), &task, cfg.clone()).unwrap();
        let b = train_loop(model, &task, cfg).unwrap();
        assert!(a.record.same_trajectory(&b.record));
        assert_eq!(a.record.rows.len(), 20);
    }

    #[test]
    fn minibatch_runs_are_deterministic() {
        let task = regression_task(8);
        let model = MlpModel::new(&[5, 6, 3], Activation::Relu, 3).unwrap();
        let mut cfg = TrainConfig::new(Algorithm::Muon, OptimizerConfig::muon(), 12);
        cfg.batch_size = Some(3);
        let a = train_loop(model.clone(), &task, cfg.clone()).unwrap();
        let b = train_loop(model, &task, cfg).unwrap();
        assert!(a.record.same_trajectory(&b.record));
    }

    #[test]
    fn divergence_names_the_step() {
        let task = regression_task(2);
        let model = MlpModel::new(&[5, 6, 3], Activation::Tanh, 3).unwrap();
        let cfg = TrainConfig::new(Algorithm::AdamW, OptimizerConfig::adamw().with_lr(1e300), 10);
        match train_loop(model, &task, cfg) {
            Err(Error::Divergence { step, .. }) => assert!(step >= 1),
            Err(e) => panic!("unexpected error {e}"),
            Ok(_) => panic!("expected divergence"),
        }
    }

    #[test]
    fn unknown_probe_param() {
        let task = regression_task(2);
        let model = MlpModel::new(&[5, 6, 3], Activation::Tanh, 3).unwrap();
        let cfg = TrainConfig::new(Algorithm::NorMuon, OptimizerConfig::normuon(), 3);
        assert!(matches!(
            trajectory_probe(model, &task, cfg, "layer9.weight", 1),
            Err(Error::Lookup { .. })
        ));
    }

    #[test]
    fn probe_rows_per_step() {
        let task = regression_task(2);
        let model = MlpModel::new(&[5, 6, 3], Activation::Tanh, 3).unwrap();
        let cfg = TrainConfig::new(Algorithm::NorMuon, OptimizerConfig::normuon(), 7);
        let probes = trajectory_probe(model.clone(), &task, cfg.clone(), "layer0.weight", 3).unwrap();
        assert_eq!(probes.len(), 3 * 3);
        let probes = trajectory_probe(model, &task, cfg, "layer0.weight", 50).unwrap();
        assert_eq!(probes.len(), 3);
        assert!(probes.iter().all(|p| p.step == 7));
    }

    #[test]
    fn router_covers_every_param_once() {
        let model = MlpModel::new(&[5, 6, 4, 3], Activation::Tanh, 1).unwrap();
        let info = model.param_info();
        assert_eq!(info.len(), model.params().len());
        let cfg = TrainConfig::new(Algorithm::NorMuon, OptimizerConfig::normuon(), 1);
        for p in &info {
            let (alg, c) = cfg.param_config(p.kind);
            match p.kind {
                ParamKind::Hidden2d => assert_eq!(alg, Algorithm::NorMuon),
                _ => {
                    assert_eq!(alg, Algorithm::AdamW);
                    assert_eq!(c.weight_decay, 0.0);
                }
            }
        }
    }
}
