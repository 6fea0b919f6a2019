//! Single-device optimizer steps: AdamW, Muon, NorMuon and the ablation
//! variants, plus parameter routing and optimizer-state accounting.
//!
//! NorMuon per step, for an `m x n` weight `W` with gradient `G`:
//!
//! ```text
//! M  <- b1 M + (1 - b1) G
//! O  <- NS5(M)
//! v  <- b2 v + (1 - b2) mean_cols(O * O)          (one scalar per row)
//! Ô  <- O / (sqrt(v) + eps)                        (row-wise)
//! lr' = rms_scale * lr * sqrt(m n) / ‖Ô‖_F
//! W  <- W - lr wd W - lr' Ô
//! ```
//!
//! The elementwise kernels at the bottom of this module are shared with the
//! sharded simulator so a one-rank simulation reproduces these steps bit for
//! bit.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diagnostics::coefficient_of_variation;
use crate::error::{Error, Result};
use crate::matrix::{div_rows, row_mean_sq, Matrix, RowVector};
use crate::orthogonalize::{ns5, NsConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentumStyle {
    /// `M <- b1 M + (1 - b1) G`
    Ema,
    /// `M <- mu M + G`
    Classic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub rms_scale: f64,
    pub ns: NsConfig,
    pub momentum_style: MomentumStyle,
    /// Muon only: rescale the orthogonalized update to RMS `rms_scale * lr`.
    pub rms_match: bool,
    /// AdamW only.
    pub bias_correction: bool,
}

impl OptimizerConfig {
    pub fn adamw() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
            rms_scale: 0.2,
            ns: NsConfig::default(),
            momentum_style: MomentumStyle::Ema,
            rms_match: false,
            bias_correction: true,
        }
    }

    pub fn muon() -> Self {
        Self {
            lr: 0.02,
            beta1: 0.95,
            rms_match: true,
            bias_correction: false,
            ..Self::adamw()
        }
    }

    pub fn normuon() -> Self {
        Self {
            beta2: 0.95,
            ..Self::muon()
        }
    }

    pub fn defaults_for(algorithm: Algorithm) -> Self {
        match algorithm {
            Algorithm::AdamW => Self::adamw(),
            Algorithm::Muon | Algorithm::MuonRmsNormalized => Self::muon(),
            _ => Self::normuon(),
        }
    }

    pub fn with_lr(self, lr: f64) -> Self {
        Self { lr, ..self }
    }

    pub fn with_weight_decay(self, weight_decay: f64) -> Self {
        Self {
            weight_decay,
            ..self
        }
    }

    /// `lr` may be zero (a null step); everything else follows the usual
    /// ranges.
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("optimizer.{field}"), what))
            }
        };
        check(self.lr.is_finite() && self.lr >= 0.0, "lr", "must be finite and >= 0")?;
        check((0.0..1.0).contains(&self.beta1), "beta1", "must be in [0, 1)")?;
        check((0.0..1.0).contains(&self.beta2), "beta2", "must be in [0, 1)")?;
        check(self.eps.is_finite() && self.eps > 0.0, "eps", "must be > 0")?;
        check(
            self.weight_decay.is_finite() && self.weight_decay >= 0.0,
            "weight_decay",
            "must be >= 0",
        )?;
        check(
            self.rms_scale.is_finite() && self.rms_scale > 0.0,
            "rms_scale",
            "must be > 0",
        )?;
        self.ns
            .validate()
            .map_err(|e| match e {
                Error::Config { field, detail } => Error::config(format!("optimizer.{field}"), detail),
                other => other,
            })
    }
}

/// Every update rule the crate implements.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[serde(rename = "adamw")]
    AdamW,
    Muon,
    #[serde(rename = "normuon")]
    NorMuon,
    /// Coordinate-wise second moment of the orthogonalized update.
    MuonAdam,
    /// Row normalization of the momentum before orthogonalization.
    #[serde(rename = "normuon_front")]
    NorMuonFront,
    /// NorMuon on `m > n` matrices, RMS-normalized Muon elsewhere.
    #[serde(rename = "normuon_selective")]
    NorMuonSelective,
    /// Muon rescaled to update norm `rms_scale * lr * sqrt(mn)`.
    MuonRmsNormalized,
}

impl Algorithm {
    pub const ALL: [Algorithm; 7] = [
        Algorithm::AdamW,
        Algorithm::Muon,
        Algorithm::NorMuon,
        Algorithm::MuonAdam,
        Algorithm::NorMuonFront,
        Algorithm::NorMuonSelective,
        Algorithm::MuonRmsNormalized,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::AdamW => "adamw",
            Algorithm::Muon => "muon",
            Algorithm::NorMuon => "normuon",
            Algorithm::MuonAdam => "muon_adam",
            Algorithm::NorMuonFront => "normuon_front",
            Algorithm::NorMuonSelective => "normuon_selective",
            Algorithm::MuonRmsNormalized => "muon_rms_normalized",
        }
    }

    pub fn is_orthogonalized(self) -> bool {
        self != Algorithm::AdamW
    }

    /// The state layout this rule needs for an `m x n` parameter.
    pub fn layout(self, shape: (usize, usize)) -> StateLayout {
        match self {
            Algorithm::AdamW => StateLayout::Adam,
            Algorithm::Muon | Algorithm::MuonRmsNormalized => StateLayout::Momentum,
            Algorithm::NorMuon | Algorithm::NorMuonFront => StateLayout::RowMoment,
            Algorithm::MuonAdam => StateLayout::FullMoment,
            Algorithm::NorMuonSelective => {
                if shape.0 > shape.1 {
                    StateLayout::RowMoment
                } else {
                    StateLayout::Momentum
                }
            }
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Lookup {
                kind: "optimizer",
                name: s.to_string(),
            })
    }
}

/// The ablation modes accepted by [`variant_step`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VariantMode {
    MuonAdam,
    NorMuonFront,
    NorMuonSelective,
    MuonRmsNormalized,
}

impl From<VariantMode> for Algorithm {
    fn from(mode: VariantMode) -> Self {
        match mode {
            VariantMode::MuonAdam => Algorithm::MuonAdam,
            VariantMode::NorMuonFront => Algorithm::NorMuonFront,
            VariantMode::NorMuonSelective => Algorithm::NorMuonSelective,
            VariantMode::MuonRmsNormalized => Algorithm::MuonRmsNormalized,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateLayout {
    /// First and second coordinate moments: `2mn`.
    Adam,
    /// First moment only: `mn`.
    Momentum,
    /// First moment plus one second moment per row: `m(n + 1)`.
    RowMoment,
    /// First moment plus a full second moment: `2mn`.
    FullMoment,
}

impl StateLayout {
    pub fn element_count(self, (m, n): (usize, usize)) -> usize {
        match self {
            StateLayout::Adam | StateLayout::FullMoment => 2 * m * n,
            StateLayout::Momentum => m * n,
            StateLayout::RowMoment => m * (n + 1),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum StateSlots {
    Adam { m: Matrix, v: Matrix },
    Momentum { m: Matrix },
    RowMoment { m: Matrix, v_row: RowVector },
    FullMoment { m: Matrix, v_full: Matrix },
}

impl StateSlots {
    pub fn zeros(layout: StateLayout, (rows, cols): (usize, usize)) -> Self {
        let z = || Matrix::zeros(rows, cols);
        match layout {
            StateLayout::Adam => StateSlots::Adam { m: z(), v: z() },
            StateLayout::Momentum => StateSlots::Momentum { m: z() },
            StateLayout::RowMoment => StateSlots::RowMoment {
                m: z(),
                v_row: RowVector::zeros(rows),
            },
            StateLayout::FullMoment => StateSlots::FullMoment { m: z(), v_full: z() },
        }
    }

    pub fn layout(&self) -> StateLayout {
        match self {
            StateSlots::Adam { .. } => StateLayout::Adam,
            StateSlots::Momentum { .. } => StateLayout::Momentum,
            StateSlots::RowMoment { .. } => StateLayout::RowMoment,
            StateSlots::FullMoment { .. } => StateLayout::FullMoment,
        }
    }

    /// Number of `f64` values actually held.
    pub fn element_count(&self) -> usize {
        match self {
            StateSlots::Adam { m, v } => m.numel() + v.numel(),
            StateSlots::Momentum { m } => m.numel(),
            StateSlots::RowMoment { m, v_row } => m.numel() + v_row.len(),
            StateSlots::FullMoment { m, v_full } => m.numel() + v_full.numel(),
        }
    }

    /// The first-order momentum (AdamW's first moment for `Adam`).
    pub fn momentum(&self) -> &Matrix {
        match self {
            StateSlots::Adam { m, .. }
            | StateSlots::Momentum { m }
            | StateSlots::RowMoment { m, .. }
            | StateSlots::FullMoment { m, .. } => m,
        }
    }
}

/// One parameter's weights and optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamState {
    pub w: Matrix,
    pub slots: StateSlots,
    pub step_count: u64,
}

impl ParamState {
    /// Fresh zero state sized for `algorithm`.
    pub fn new(w: Matrix, algorithm: Algorithm) -> Self {
        let layout = algorithm.layout(w.shape());
        Self::with_layout(w, layout)
    }

    pub fn with_layout(w: Matrix, layout: StateLayout) -> Self {
        let slots = StateSlots::zeros(layout, w.shape());
        Self {
            w,
            slots,
            step_count: 0,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.w.shape()
    }
}

/// Per-step diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepReport {
    /// Frobenius norm of the applied update, weight decay excluded.
    pub update_fro_norm: f64,
    /// Step size multiplying the update direction.
    pub effective_lr: f64,
    /// Coefficient of variation of the update's row norms.
    pub per_neuron_norm_cv: f64,
}

/// Intermediate matrices of one step, captured for geometry probes.
#[derive(Clone, Debug)]
pub struct StepTrace {
    pub momentum: Matrix,
    /// `NS5(M)`; `None` for AdamW.
    pub orthogonalized: Option<Matrix>,
    /// The normalized direction before the step size is applied.
    pub direction: Matrix,
    /// The applied update `lr' * direction`, weight decay excluded.
    pub update: Matrix,
}

fn check_grad(state: &ParamState, grad: &Matrix, op: &'static str) -> Result<()> {
    if state.w.shape() != grad.shape() {
        return Err(Error::shape(
            op,
            format!("gradient {:?} for weight {:?}", grad.shape(), state.w.shape()),
        ));
    }
    Ok(())
}

fn layout_error(op: &'static str, found: StateLayout, want: StateLayout) -> Error {
    Error::domain(op, format!("state holds {found:?} slots, step needs {want:?}"))
}

fn finish(
    state: &mut ParamState,
    direction: &Matrix,
    step_size: f64,
    cfg: &OptimizerConfig,
    ortho: Option<Matrix>,
    trace: Option<&mut Option<StepTrace>>,
) -> StepReport {
    apply_update(
        state.w.as_mut_slice(),
        direction.as_slice(),
        cfg.lr,
        cfg.weight_decay,
        step_size,
    );
    state.step_count += 1;
    let update = direction.scale(step_size);
    let report = StepReport {
        update_fro_norm: update.frobenius_norm(),
        effective_lr: step_size,
        per_neuron_norm_cv: coefficient_of_variation(update.row_norms().as_slice()),
    };
    if let Some(slot) = trace {
        *slot = Some(StepTrace {
            momentum: state.slots.momentum().clone(),
            orthogonalized: ortho,
            direction: direction.clone(),
            update,
        });
    }
    report
}

/// AdamW with decoupled weight decay.
pub fn adamw_step(state: &mut ParamState, grad: &Matrix, cfg: &OptimizerConfig) -> Result<StepReport> {
    adamw_impl(state, grad, cfg, None)
}

fn adamw_impl(
    state: &mut ParamState,
    grad: &Matrix,
    cfg: &OptimizerConfig,
    trace: Option<&mut Option<StepTrace>>,
) -> Result<StepReport> {
    check_grad(state, grad, "adamw_step")?;
    let t = state.step_count + 1;
    let direction = match &mut state.slots {
        StateSlots::Adam { m, v } => {
            adam_moments(m.as_mut_slice(), v.as_mut_slice(), grad.as_slice(), cfg);
            adam_direction(m, v, t, cfg)
        }
        other => return Err(layout_error("adamw_step", other.layout(), StateLayout::Adam)),
    };
    Ok(finish(state, &direction, cfg.lr, cfg, None, trace))
}

/// Muon: momentum, NS5, then either the plain step `lr * O` or, with
/// `rms_match`, a step rescaled to norm `rms_scale * lr * sqrt(mn)`.
pub fn muon_step(state: &mut ParamState, grad: &Matrix, cfg: &OptimizerConfig) -> Result<StepReport> {
    muon_impl(state, grad, cfg, cfg.rms_match, "muon_step", None)
}

fn muon_impl(
    state: &mut ParamState,
    grad: &Matrix,
    cfg: &OptimizerConfig,
    rms_match: bool,
    op: &'static str,
    trace: Option<&mut Option<StepTrace>>,
) -> Result<StepReport> {
    check_grad(state, grad, op)?;
    let ortho = match &mut state.slots {
        StateSlots::Momentum { m } => {
            momentum_update(m.as_mut_slice(), grad.as_slice(), cfg.beta1, cfg.momentum_style);
            ns5(m, &cfg.ns)?
        }
        other => return Err(layout_error(op, other.layout(), StateLayout::Momentum)),
    };
    let step = if rms_match {
        rms_matched_lr(cfg, ortho.numel(), ortho.sum_sq())
    } else {
        cfg.lr
    };
    let keep = trace.is_some().then(|| ortho.clone());
    Ok(finish(state, &ortho, step, cfg, keep, trace))
}

/// NorMuon: orthogonalized momentum with a per-row second moment and an
/// RMS-matched step size.
pub fn normuon_step(state: &mut ParamState, grad: &Matrix, cfg: &OptimizerConfig) -> Result<StepReport> {
    normuon_impl(state, grad, cfg, "normuon_step", None)
}

fn normuon_impl(
    state: &mut ParamState,
    grad: &Matrix,
    cfg: &OptimizerConfig,
    op: &'static str,
    trace: Option<&mut Option<StepTrace>>,
) -> Result<StepReport> {
    check_grad(state, grad, op)?;
    let (ortho, normalized) = match &mut state.slots {
        StateSlots::RowMoment { m, v_row } => {
            momentum_update(m.as_mut_slice(), grad.as_slice(), cfg.beta1, cfg.momentum_style);
            let ortho = ns5(m, &cfg.ns)?;
            ema_update(v_row.as_mut_slice(), row_mean_sq(&ortho).as_slice(), cfg.beta2);
            let normalized = div_rows(&ortho, v_row, cfg.eps)?;
            (ortho, normalized)
        }
        other => return Err(layout_error(op, other.layout(), StateLayout::RowMoment)),
    };
    let step = rms_matched_lr(cfg, normalized.numel(), normalized.sum_sq());
    let keep = trace.is_some().then_some(ortho);
    Ok(finish(state, &normalized, step, cfg, keep, trace))
}

fn muon_adam_impl(
    state: &mut ParamState,
    grad: &Matrix,
    cfg: &OptimizerConfig,
    trace: Option<&mut Option<StepTrace>>,
) -> Result<StepReport> {
    check_grad(state, grad, "variant_step")?;
    let (ortho, normalized) = match &mut state.slots {
        StateSlots::FullMoment { m, v_full } => {
            momentum_update(m.as_mut_slice(), grad.as_slice(), cfg.beta1, cfg.momentum_style);
            let ortho = ns5(m, &cfg.ns)?;
            let sq = ortho.map(|x| x * x);
            ema_update(v_full.as_mut_slice(), sq.as_slice(), cfg.beta2);
            let normalized = ortho.zip_with(v_full, "variant_step", |o, v| o / (v.sqrt() + cfg.eps))?;
            (ortho, normalized)
        }
        other => {
            return Err(layout_error("variant_step", other.layout(), StateLayout::FullMoment))
        }
    };
    let step = rms_matched_lr(cfg, normalized.numel(), normalized.sum_sq());
    let keep = trace.is_some().then_some(ortho);
    Ok(finish(state, &normalized, step, cfg, keep, trace))
}

fn normuon_front_impl(
    state: &mut ParamState,
    grad: &Matrix,
    cfg: &OptimizerConfig,
    trace: Option<&mut Option<StepTrace>>,
) -> Result<StepReport> {
    check_grad(state, grad, "variant_step")?;
    let ortho = match &mut state.slots {
        StateSlots::RowMoment { m, v_row } => {
            momentum_update(m.as_mut_slice(), grad.as_slice(), cfg.beta1, cfg.momentum_style);
            ema_update(v_row.as_mut_slice(), row_mean_sq(m).as_slice(), cfg.beta2);
            ns5(&div_rows(m, v_row, cfg.eps)?, &cfg.ns)?
        }
        other => {
            return Err(layout_error("variant_step", other.layout(), StateLayout::RowMoment))
        }
    };
    let step = rms_matched_lr(cfg, ortho.numel(), ortho.sum_sq());
    let keep = trace.is_some().then(|| ortho.clone());
    Ok(finish(state, &ortho, step, cfg, keep, trace))
}

/// The ablation variants.
pub fn variant_step(
    state: &mut ParamState,
    grad: &Matrix,
    cfg: &OptimizerConfig,
    mode: VariantMode,
) -> Result<StepReport> {
    step_impl(mode.into(), state, grad, cfg, None)
}

/// Dispatches to the update rule for `algorithm`.
pub fn step(
    algorithm: Algorithm,
    state: &mut ParamState,
    grad: &Matrix,
    cfg: &OptimizerConfig,
) -> Result<StepReport> {
    step_impl(algorithm, state, grad, cfg, None)
}

/// Like [`step`] but also returns the intermediate matrices.
pub fn step_traced(
    algorithm: Algorithm,
    state: &mut ParamState,
    grad: &Matrix,
    cfg: &OptimizerConfig,
) -> Result<(StepReport, StepTrace)> {
    let mut trace = None;
    let report = step_impl(algorithm, state, grad, cfg, Some(&mut trace))?;
    Ok((report, trace.expect("traced step records a trace")))
}

fn step_impl(
    algorithm: Algorithm,
    state: &mut ParamState,
    grad: &Matrix,
    cfg: &OptimizerConfig,
    trace: Option<&mut Option<StepTrace>>,
) -> Result<StepReport> {
    match algorithm {
        Algorithm::AdamW => adamw_impl(state, grad, cfg, trace),
        Algorithm::Muon => muon_impl(state, grad, cfg, cfg.rms_match, "muon_step", trace),
        Algorithm::NorMuon => normuon_impl(state, grad, cfg, "normuon_step", trace),
        Algorithm::MuonAdam => muon_adam_impl(state, grad, cfg, trace),
        Algorithm::NorMuonFront => normuon_front_impl(state, grad, cfg, trace),
        Algorithm::MuonRmsNormalized => muon_impl(state, grad, cfg, true, "variant_step", trace),
        Algorithm::NorMuonSelective => {
            if state.shape().0 > state.shape().1 {
                normuon_impl(state, grad, cfg, "variant_step", trace)
            } else {
                muon_impl(state, grad, cfg, true, "variant_step", trace)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    #[serde(rename = "hidden_2d")]
    Hidden2d,
    Embedding,
    Unembedding,
    Bias,
    Scalar,
    NormGain,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    Orthogonalized,
    #[serde(rename = "adamw")]
    AdamW,
}

/// Hidden-layer matrices take the orthogonalized family; embeddings,
/// unembeddings, biases, scalars and norm gains stay on AdamW.
pub fn route_param(_shape: &[usize], kind: ParamKind) -> Route {
    match kind {
        ParamKind::Hidden2d => Route::Orthogonalized,
        _ => Route::AdamW,
    }
}

/// Algorithm actually used for a parameter when the model runs `algorithm`.
pub fn routed_algorithm(algorithm: Algorithm, kind: ParamKind) -> Algorithm {
    match route_param(&[], kind) {
        Route::Orthogonalized => algorithm,
        Route::AdamW => Algorithm::AdamW,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MemoryAudit {
    pub per_param: Vec<usize>,
    pub total: usize,
}

/// Optimizer-state element counts of already-built states.
pub fn state_memory_audit(states: &[ParamState]) -> MemoryAudit {
    let per_param: Vec<usize> = states.iter().map(|s| s.slots.element_count()).collect();
    let total = per_param.iter().sum();
    MemoryAudit { per_param, total }
}

/// State element counts of a model (`(shape, kind)` per parameter) under each
/// algorithm, with routing applied.
pub fn memory_table(params: &[((usize, usize), ParamKind)]) -> Vec<(Algorithm, MemoryAudit)> {
    Algorithm::ALL
        .into_iter()
        .map(|alg| {
            let per_param: Vec<usize> = params
                .iter()
                .map(|&(shape, kind)| {
                    routed_algorithm(alg, kind).layout(shape).element_count(shape)
                })
                .collect();
            let total = per_param.iter().sum();
            (alg, MemoryAudit { per_param, total })
        })
        .collect()
}

// Elementwise kernels shared with the sharded simulator.

pub(crate) fn momentum_update(m: &mut [f64], g: &[f64], beta: f64, style: MomentumStyle) {
    match style {
        MomentumStyle::Ema => {
            for (mi, &gi) in m.iter_mut().zip(g) {
                *mi = beta * *mi + (1.0 - beta) * gi;
            }
        }
        MomentumStyle::Classic => {
            for (mi, &gi) in m.iter_mut().zip(g) {
                *mi = beta * *mi + gi;
            }
        }
    }
}

pub(crate) fn ema_update(v: &mut [f64], x: &[f64], beta: f64) {
    for (vi, &xi) in v.iter_mut().zip(x) {
        *vi = beta * *vi + (1.0 - beta) * xi;
    }
}

/// `rms_scale * lr * sqrt(numel) / sqrt(sum_sq)`, or zero when the direction
/// vanishes (decay-only step).
pub(crate) fn rms_matched_lr(cfg: &OptimizerConfig, numel: usize, sum_sq: f64) -> f64 {
    if sum_sq == 0.0 {
        return 0.0;
    }
    cfg.rms_scale * cfg.lr * (numel as f64).sqrt() / sum_sq.sqrt()
}

/// `w <- w - lr wd w - step d`
pub(crate) fn apply_update(w: &mut [f64], d: &[f64], lr: f64, wd: f64, step: f64) {
    let decay = lr * wd;
    for (wi, &di) in w.iter_mut().zip(d) {
        *wi = *wi - decay * *wi - step * di;
    }
}

pub(crate) fn adam_moments(m: &mut [f64], v: &mut [f64], g: &[f64], cfg: &OptimizerConfig) {
    for ((mi, vi), &gi) in m.iter_mut().zip(v.iter_mut()).zip(g) {
        *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
        *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
    }
}

/// `m̂ / (sqrt(v̂) + eps)` for step number `t` (1-based).
pub(crate) fn adam_direction(m: &Matrix, v: &Matrix, t: u64, cfg: &OptimizerConfig) -> Matrix {
    let (c1, c2) = if cfg.bias_correction {
        let t = t as i32;
        (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t))
    } else {
        (1.0, 1.0)
    };
    let data = m
        .as_slice()
        .iter()
        .zip(v.as_slice())
        .map(|(&mi, &vi)| (mi / c1) / ((vi / c2).sqrt() + cfg.eps))
        .collect();
    Matrix::from_raw(m.rows(), m.cols(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn state(alg: Algorithm, w: Matrix) -> ParamState {
        ParamState::new(w, alg)
    }

    #[test]
    fn adamw_pure_decay() {
        let w = SeededRng::new(1).gaussian_matrix(3, 4, 1.0);
        let mut s = state(Algorithm::AdamW, w.clone());
        let cfg = OptimizerConfig::adamw().with_lr(0.01).with_weight_decay(0.1);
        adamw_step(&mut s, &Matrix::zeros(3, 4), &cfg).unwrap();
        for (a, b) in s.w.as_slice().iter().zip(w.as_slice()) {
            assert!((a - b * (1.0 - 0.001)).abs() <= 1e-15 * b.abs().max(1.0));
        }
        match &s.slots {
            StateSlots::Adam { m, v } => assert!(m.is_zero() && v.is_zero()),
            _ => unreachable!(),
        }
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn adamw_first_step_scalar() {
        let cfg = OptimizerConfig::adamw().with_lr(0.01);
        let mut s = state(Algorithm::AdamW, Matrix::from_rows(&[[0.5]]));
        adamw_step(&mut s, &Matrix::from_rows(&[[1.0]]), &cfg).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction
        let expected = 0.5 - 0.01 * 1.0 / (1.0 + 1e-8);
        assert!((s.w.get(0, 0) - expected).abs() < 1e-15);
    }

    #[test]
    fn adamw_defaults() {
        let cfg = OptimizerConfig::adamw();
        assert_eq!((cfg.beta1, cfg.beta2), (0.9, 0.95));
        assert_eq!(OptimizerConfig::muon().beta1, 0.95);
        let n = OptimizerConfig::normuon();
        assert_eq!((n.beta1, n.beta2), (0.95, 0.95));
        assert_eq!(n.rms_scale, 0.2);
        assert_eq!(n.eps, 1e-8);
    }

    #[test]
    fn zero_history_leaves_weights() {
        let w = SeededRng::new(2).gaussian_matrix(3, 5, 1.0);
        for alg in Algorithm::ALL {
            let mut s = state(alg, w.clone());
            step(alg, &mut s, &Matrix::zeros(3, 5), &OptimizerConfig::defaults_for(alg)).unwrap();
            assert_eq!(s.w, w, "{alg}");
        }
    }

    #[test]
    fn classic_momentum_recursion() {
        let mut rng = SeededRng::new(3);
        let g1 = rng.gaussian_matrix(2, 3, 1.0);
        let g2 = rng.gaussian_matrix(2, 3, 1.0);
        let cfg = OptimizerConfig {
            momentum_style: MomentumStyle::Classic,
            ..OptimizerConfig::muon()
        };
        let mut s = state(Algorithm::Muon, Matrix::zeros(2, 3));
        muon_step(&mut s, &g1, &cfg).unwrap();
        muon_step(&mut s, &g2, &cfg).unwrap();
        let expected = g1.scale(0.95).add(&g2).unwrap();
        assert_eq!(s.slots.momentum(), &expected);
    }

    #[test]
    fn normuon_update_norm_is_rms_matched() {
        let mut rng = SeededRng::new(4);
        let cfg = OptimizerConfig::normuon().with_lr(0.03);
        let mut s = state(Algorithm::NorMuon, rng.gaussian_matrix(6, 4, 1.0));
        for _ in 0..5 {
            let g = rng.gaussian_matrix(6, 4, 1.0);
            let r = normuon_step(&mut s, &g, &cfg).unwrap();
            let target = 0.2 * 0.03 * 24f64.sqrt();
            assert!((r.update_fro_norm - target).abs() <= 1e-12 * target);
        }
    }

    #[test]
    fn shape_mismatch() {
        let mut s = state(Algorithm::NorMuon, Matrix::zeros(2, 2));
        let err = normuon_step(&mut s, &Matrix::zeros(2, 3), &OptimizerConfig::normuon()).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn wrong_layout_is_rejected() {
        let mut s = state(Algorithm::AdamW, Matrix::zeros(2, 2));
        assert!(matches!(
            normuon_step(&mut s, &Matrix::zeros(2, 2), &OptimizerConfig::normuon()),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn routing() {
        assert_eq!(route_param(&[512, 128], ParamKind::Hidden2d), Route::Orthogonalized);
        assert_eq!(route_param(&[50000, 512], ParamKind::Embedding), Route::AdamW);
        assert_eq!(route_param(&[512], ParamKind::Bias), Route::AdamW);
        for kind in [ParamKind::Unembedding, ParamKind::Scalar, ParamKind::NormGain] {
            assert_eq!(route_param(&[4, 4], kind), Route::AdamW);
        }
    }

    #[test]
    fn memory_counts() {
        let table = memory_table(&[((4, 8), ParamKind::Hidden2d)]);
        let get = |alg| table.iter().find(|(a, _)| *a == alg).unwrap().1.total;
        assert_eq!(get(Algorithm::AdamW), 64);
        assert_eq!(get(Algorithm::Muon), 32);
        assert_eq!(get(Algorithm::NorMuon), 36);
        assert_eq!(get(Algorithm::MuonAdam), 64);

        assert!(memory_table(&[]).iter().all(|(_, a)| a.total == 0));

        let mixed = memory_table(&[((4, 8), ParamKind::Hidden2d), ((10, 4), ParamKind::Embedding)]);
        let normuon = mixed.iter().find(|(a, _)| *a == Algorithm::NorMuon).unwrap();
        assert_eq!(normuon.1.total, 4 * 9 + 2 * 40);
    }

    #[test]
    fn allocated_state_matches_formula() {
        for alg in Algorithm::ALL {
            for shape in [(4, 8), (8, 4), (5, 5)] {
                let s = ParamState::new(Matrix::zeros(shape.0, shape.1), alg);
                let audit = state_memory_audit(std::slice::from_ref(&s));
                assert_eq!(audit.total, alg.layout(shape).element_count(shape));
            }
        }
        assert_eq!(state_memory_audit(&[]).total, 0);
    }

    #[test]
    fn algorithm_names_round_trip() {
        for alg in Algorithm::ALL {
            assert_eq!(alg.name().parse::<Algorithm>().unwrap(), alg);
        }
        assert!("nosuch".parse::<Algorithm>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::normuon().validate().is_ok());
        assert!(OptimizerConfig::normuon().with_lr(0.0).validate().is_ok());
        let bad = OptimizerConfig {
            beta2: 1.0,
            ..OptimizerConfig::normuon()
        };
        match bad.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "optimizer.beta2"),
            other => panic!("{other:?}"),
        }
    }
}
