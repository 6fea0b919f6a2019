//! In-process simulation of sharded NorMuon.
//!
//! Every parameter is split into contiguous row blocks, one per simulated
//! rank. Elementwise and row-wise work happens on the local rows; only the
//! orthogonalization needs the full matrix, which the parameter's owner rank
//! gathers, orthogonalizes and scatters back. Collectives are deterministic
//! rendezvous with reductions in fixed rank order, so results do not depend
//! on the order in which ranks are simulated or on whether they run on
//! threads.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::matrix::{div_rows, row_mean_sq, Matrix};
use crate::optim::{
    adamw_step, apply_update, ema_update, momentum_update, rms_matched_lr, Algorithm,
    OptimizerConfig, ParamState, StateSlots,
};
use crate::orthogonalize::ns5;
use crate::trainer::{
    forward_backward, gen_synthetic, gen_validation, MlpModel, RunOutput, RunRecord, RunRow,
    TrainConfig,
};

/// Simulated cluster shape and wire widths in bytes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Topology {
    pub world_size: usize,
    /// Parameter all-gathers in the forward and backward pass.
    pub elem_bytes_param: u64,
    /// Gradient reduce-scatter; reductions accumulate in full precision.
    pub elem_bytes_grad: u64,
    /// Momentum gather and update scatter of the orthogonalization.
    pub elem_bytes_collective: u64,
}

impl Default for Topology {
    fn default() -> Self {
        Self {
            world_size: 1,
            elem_bytes_param: 4,
            elem_bytes_grad: 4,
            elem_bytes_collective: 2,
        }
    }
}

impl Topology {
    pub fn new(world_size: usize) -> Self {
        Self {
            world_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.world_size == 0 {
            return Err(Error::config("topology.world_size", "must be at least 1"));
        }
        for (field, v) in [
            ("topology.elem_bytes_param", self.elem_bytes_param),
            ("topology.elem_bytes_grad", self.elem_bytes_grad),
            ("topology.elem_bytes_collective", self.elem_bytes_collective),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        Ok(())
    }
}

/// How the RMS-matched step size is computed from sharded updates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RmsMode {
    /// Sum of squares and element counts are combined across ranks, so every
    /// shard uses the single-device step size.
    #[default]
    Global,
    /// Each shard scales by its own element count and norm.
    ShardLocal,
}

impl std::str::FromStr for RmsMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(RmsMode::Global),
            "shard_local" | "shard-local" => Ok(RmsMode::ShardLocal),
            _ => Err(Error::Lookup {
                kind: "rms_mode",
                name: s.to_string(),
            }),
        }
    }
}

/// One rank's rows of a parameter together with the matching optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct RankShard {
    pub rows: Range<usize>,
    pub state: ParamState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShardedParam {
    pub param_id: String,
    pub full_shape: (usize, usize),
    pub algorithm: Algorithm,
    pub owner_rank: usize,
    /// Indexed by rank.
    pub shards: Vec<RankShard>,
}

impl ShardedParam {
    pub fn numel(&self) -> usize {
        self.full_shape.0 * self.full_shape.1
    }

    /// The full weight matrix, rows concatenated in rank order.
    pub fn gather_weights(&self) -> Matrix {
        let parts: Vec<Matrix> = self.shards.iter().map(|s| s.state.w.clone()).collect();
        Matrix::concat_rows(&parts).expect("shards share a width")
    }

    /// Total optimizer-state elements over all ranks.
    pub fn state_elements(&self) -> usize {
        self.shards.iter().map(|s| s.state.slots.element_count()).sum()
    }
}

/// Ceil-first contiguous row ranges: the first ranks get `ceil(m / world)`
/// rows, trailing ranks get the remainder or nothing.
pub fn shard_ranges(rows: usize, world_size: usize) -> Vec<Range<usize>> {
    assert!(world_size >= 1, "world_size must be >= 1");
    let chunk = rows.div_ceil(world_size);
    (0..world_size)
        .map(|r| (r * chunk).min(rows)..((r + 1) * chunk).min(rows))
        .collect()
}

/// Splits `w` into row shards with fresh optimizer state for `algorithm`.
pub fn shard_rowwise(
    param_id: &str,
    w: &Matrix,
    algorithm: Algorithm,
    world_size: usize,
) -> Result<ShardedParam> {
    if world_size == 0 {
        return Err(Error::config("topology.world_size", "must be at least 1"));
    }
    let shards = shard_ranges(w.rows(), world_size)
        .into_iter()
        .map(|rows| {
            let local = w.slice_rows(rows.start, rows.end);
            // layout chosen from the full shape so selective routing agrees
            let layout = algorithm.layout(w.shape());
            RankShard {
                state: ParamState::with_layout(local, layout),
                rows,
            }
        })
        .collect();
    Ok(ShardedParam {
        param_id: param_id.to_string(),
        full_shape: w.shape(),
        algorithm,
        owner_rank: 0,
        shards,
    })
}

/// Sorts by element count (largest first, ties by position) and deals owners
/// round-robin. Returns the owner of each parameter in input order.
pub fn assign_owners(params: &mut [ShardedParam], world_size: usize) -> Vec<usize> {
    let numels: Vec<usize> = params.iter().map(|p| p.numel()).collect();
    let owners = owner_ranks(&numels, world_size);
    for (p, &o) in params.iter_mut().zip(&owners) {
        p.owner_rank = o;
    }
    owners
}

/// [`assign_owners`] on bare element counts.
pub fn owner_ranks(numels: &[usize], world_size: usize) -> Vec<usize> {
    assert!(world_size >= 1, "world_size must be >= 1");
    let mut order: Vec<usize> = (0..numels.len()).collect();
    order.sort_by(|&a, &b| numels[b].cmp(&numels[a]));
    let mut owners = vec![0; numels.len()];
    for (pos, &idx) in order.iter().enumerate() {
        owners[idx] = pos % world_size;
    }
    owners
}

/// Bytes per rank plus the element counts needed to normalize them.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ChannelCounters {
    /// Charged to the receiving rank.
    pub per_rank_bytes: Vec<u64>,
    /// Elements whose source and destination ranks differ.
    pub crossing_elements: u64,
    /// Parameter elements routed through the channel, once per step.
    pub covered_elements: u64,
}

impl ChannelCounters {
    fn new(world_size: usize) -> Self {
        Self {
            per_rank_bytes: vec![0; world_size],
            ..Self::default()
        }
    }

    pub fn total_bytes(&self) -> u64 {
        self.per_rank_bytes.iter().sum()
    }

    fn charge(&mut self, dest: usize, elements: usize, width: u64) {
        self.per_rank_bytes[dest] += elements as u64 * width;
        self.crossing_elements += elements as u64;
    }

    fn merge(&mut self, other: &ChannelCounters) {
        for (a, b) in self.per_rank_bytes.iter_mut().zip(&other.per_rank_bytes) {
            *a += b;
        }
        self.crossing_elements += other.crossing_elements;
        self.covered_elements += other.covered_elements;
    }

    /// Bytes per moved element times the share of model elements covered.
    fn per_element_per_step(&self, model_elements: usize, steps: u64) -> f64 {
        if self.crossing_elements == 0 || model_elements == 0 || steps == 0 {
            return 0.0;
        }
        let width = self.total_bytes() as f64 / self.crossing_elements as f64;
        width * self.covered_elements as f64 / (model_elements as f64 * steps as f64)
    }
}

pub const CHANNELS: [&str; 5] = [
    "forward_allgather",
    "backward_allgather",
    "grad_reducescatter",
    "momentum_gather",
    "update_scatter",
];

/// Byte counters for every simulated collective.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommLedger {
    pub world_size: usize,
    pub steps: u64,
    pub forward_allgather: ChannelCounters,
    pub backward_allgather: ChannelCounters,
    pub grad_reducescatter: ChannelCounters,
    pub momentum_gather: ChannelCounters,
    pub update_scatter: ChannelCounters,
}

impl CommLedger {
    pub fn new(world_size: usize) -> Self {
        Self {
            world_size,
            steps: 0,
            forward_allgather: ChannelCounters::new(world_size),
            backward_allgather: ChannelCounters::new(world_size),
            grad_reducescatter: ChannelCounters::new(world_size),
            momentum_gather: ChannelCounters::new(world_size),
            update_scatter: ChannelCounters::new(world_size),
        }
    }

    pub fn channels(&self) -> [&ChannelCounters; 5] {
        [
            &self.forward_allgather,
            &self.backward_allgather,
            &self.grad_reducescatter,
            &self.momentum_gather,
            &self.update_scatter,
        ]
    }

    pub fn merge(&mut self, delta: &CommLedger) {
        assert_eq!(self.world_size, delta.world_size, "ledger world sizes differ");
        self.steps += delta.steps;
        self.forward_allgather.merge(&delta.forward_allgather);
        self.backward_allgather.merge(&delta.backward_allgather);
        self.grad_reducescatter.merge(&delta.grad_reducescatter);
        self.momentum_gather.merge(&delta.momentum_gather);
        self.update_scatter.merge(&delta.update_scatter);
    }

    pub fn optimizer_bytes(&self) -> u64 {
        self.momentum_gather.total_bytes() + self.update_scatter.total_bytes()
    }

    pub fn to_json(&self) -> Value {
        let keyed = |f: &dyn Fn(&ChannelCounters) -> Value| -> Value {
            let map: serde_json::Map<String, Value> = CHANNELS
                .iter()
                .zip(self.channels())
                .map(|(name, c)| (format!("{name}_bytes"), f(c)))
                .collect();
            Value::Object(map)
        };
        let per_rank: Vec<Value> = (0..self.world_size)
            .map(|r| {
                let mut v = keyed(&|c| json!(c.per_rank_bytes[r]));
                v["rank"] = json!(r);
                v
            })
            .collect();
        json!({
            "world_size": self.world_size,
            "steps": self.steps,
            "per_rank": per_rank,
            "total": keyed(&|c| json!(c.total_bytes())),
            "crossing_elements": keyed(&|c| json!(c.crossing_elements)),
            "covered_elements": keyed(&|c| json!(c.covered_elements)),
        })
    }
}

/// Communication volume normalized per model element per step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CommAudit {
    pub forward_allgather: f64,
    pub backward_allgather: f64,
    pub grad_reducescatter: f64,
    pub momentum_gather: f64,
    pub update_scatter: f64,
    /// Forward and backward all-gather plus gradient reduce-scatter.
    pub standard_bytes_per_element: f64,
    pub optimizer_bytes_per_element: f64,
    pub total_bytes_per_element: f64,
    /// `total / standard`; 1 when nothing crosses ranks.
    pub ratio: f64,
}

/// Summarizes `ledger` as bytes per model element per step. An element is
/// charged only when its source and destination ranks differ.
pub fn comm_audit(ledger: &CommLedger, model_elements: usize) -> CommAudit {
    let v: Vec<f64> = ledger
        .channels()
        .iter()
        .map(|c| c.per_element_per_step(model_elements, ledger.steps))
        .collect();
    let standard = v[0] + v[1] + v[2];
    let optimizer = v[3] + v[4];
    let total = standard + optimizer;
    CommAudit {
        forward_allgather: v[0],
        backward_allgather: v[1],
        grad_reducescatter: v[2],
        momentum_gather: v[3],
        update_scatter: v[4],
        standard_bytes_per_element: standard,
        optimizer_bytes_per_element: optimizer,
        total_bytes_per_element: total,
        ratio: if standard == 0.0 { 1.0 } else { total / standard },
    }
}

/// Per-shard step sizes for sharded normalized updates `o_hat`.
pub fn effective_step_sizes(o_hat: &[Matrix], cfg: &OptimizerConfig, mode: RmsMode) -> Vec<f64> {
    let stats: Vec<(usize, f64)> = o_hat.iter().map(|o| (o.numel(), o.sum_sq())).collect();
    step_sizes(&stats, cfg, mode, true)
}

fn step_sizes(stats: &[(usize, f64)], cfg: &OptimizerConfig, mode: RmsMode, rms: bool) -> Vec<f64> {
    if !rms {
        return vec![cfg.lr; stats.len()];
    }
    match mode {
        RmsMode::Global => {
            // fixed rank order; 0 + x == x keeps one rank bit-exact
            let (numel, sum_sq) = stats
                .iter()
                .fold((0usize, 0.0f64), |(n, s), &(ni, si)| (n + ni, s + si));
            vec![rms_matched_lr(cfg, numel, sum_sq); stats.len()]
        }
        RmsMode::ShardLocal => stats
            .iter()
            .map(|&(n, s)| rms_matched_lr(cfg, n, s))
            .collect(),
    }
}

/// Options that change how, not what, the simulation computes.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SimOptions {
    pub rms_mode: RmsMode,
    /// Order in which ranks are simulated; empty means `0..world`.
    pub rank_order: Vec<usize>,
    /// Run each rank's local phases on its own thread.
    pub threaded: bool,
}

impl SimOptions {
    pub fn with_mode(rms_mode: RmsMode) -> Self {
        Self {
            rms_mode,
            ..Self::default()
        }
    }
}

struct Meta {
    algorithm: Algorithm,
    full_shape: (usize, usize),
    owner: usize,
    rows: Vec<usize>,
}

impl Meta {
    /// The rule applied to this parameter; selective picks by full shape.
    fn rule(&self) -> Algorithm {
        match self.algorithm {
            Algorithm::NorMuonSelective if self.full_shape.0 > self.full_shape.1 => Algorithm::NorMuon,
            Algorithm::NorMuonSelective => Algorithm::MuonRmsNormalized,
            a => a,
        }
    }

    fn rms_matched(&self, cfg: &OptimizerConfig) -> bool {
        !(self.rule() == Algorithm::Muon && !cfg.rms_match)
    }
}

type RankWork<'a> = Vec<(usize, &'a mut RankShard)>;

fn split_by_rank(params: &mut [ShardedParam], world: usize) -> Vec<RankWork<'_>> {
    let mut by_rank: Vec<RankWork<'_>> = (0..world).map(|_| Vec::new()).collect();
    for (p, param) in params.iter_mut().enumerate() {
        for (r, shard) in param.shards.iter_mut().enumerate() {
            by_rank[r].push((p, shard));
        }
    }
    by_rank
}

/// Runs `f` once per rank, serially in `order` or on scoped threads, and
/// returns the results indexed by rank.
fn per_rank<'a, T, F>(work: Vec<RankWork<'a>>, opts: &SimOptions, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, RankWork<'a>) -> Result<T> + Sync,
{
    let world = work.len();
    let mut slots: Vec<Option<RankWork<'a>>> = work.into_iter().map(Some).collect();
    let mut out: Vec<Option<T>> = (0..world).map(|_| None).collect();
    if opts.threaded {
        let results: Vec<Result<T>> = std::thread::scope(|s| {
            let handles: Vec<_> = slots
                .iter_mut()
                .enumerate()
                .map(|(r, slot)| {
                    let w = slot.take().unwrap();
                    let f = &f;
                    s.spawn(move || f(r, w))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("rank thread panicked")).collect()
        });
        for (r, res) in results.into_iter().enumerate() {
            out[r] = Some(res?);
        }
    } else {
        let order: Vec<usize> = if opts.rank_order.is_empty() {
            (0..world).collect()
        } else {
            opts.rank_order.clone()
        };
        for r in order {
            out[r] = Some(f(r, slots[r].take().expect("rank scheduled twice"))?);
        }
    }
    Ok(out.into_iter().map(|o| o.expect("every rank runs")).collect())
}

fn check_alignment(params: &[ShardedParam], grads: &[Vec<Matrix>], cfgs: &[OptimizerConfig], world: usize) -> Result<()> {
    if grads.len() != params.len() || cfgs.len() != params.len() {
        return Err(Error::shape(
            "distributed_step",
            format!(
                "{} params, {} gradient lists, {} configs",
                params.len(),
                grads.len(),
                cfgs.len()
            ),
        ));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shards.len() != world || g.len() != world {
            return Err(Error::shape(
                "distributed_step",
                format!("param {} has {} shards and {} gradient shards for world {world}", p.param_id, p.shards.len(), g.len()),
            ));
        }
        for (r, (s, gs)) in p.shards.iter().zip(g).enumerate() {
            if s.state.w.shape() != gs.shape() {
                return Err(Error::shape(
                    "distributed_step",
                    format!(
                        "param {} rank {r}: gradient {:?} for shard {:?}",
                        p.param_id,
                        gs.shape(),
                        s.state.w.shape()
                    ),
                ));
            }
        }
    }
    Ok(())
}

/// One optimizer step over sharded parameters with a shared config.
pub fn distributed_step(
    params: &mut [ShardedParam],
    grads: &[Vec<Matrix>],
    cfg: &OptimizerConfig,
    topo: &Topology,
    opts: &SimOptions,
) -> Result<CommLedger> {
    let cfgs = vec![*cfg; params.len()];
    distributed_step_mixed(params, grads, &cfgs, topo, opts)
}

/// One optimizer step over sharded parameters, each with its own config.
/// `grads[p][r]` is rank `r`'s gradient rows of parameter `p`.
pub fn distributed_step_mixed(
    params: &mut [ShardedParam],
    grads: &[Vec<Matrix>],
    cfgs: &[OptimizerConfig],
    topo: &Topology,
    opts: &SimOptions,
) -> Result<CommLedger> {
    topo.validate()?;
    let world = topo.world_size;
    check_alignment(params, grads, cfgs, world)?;
    if !opts.rank_order.is_empty() {
        let mut sorted = opts.rank_order.clone();
        sorted.sort_unstable();
        if sorted != (0..world).collect::<Vec<_>>() {
            return Err(Error::config("rank_order", "must be a permutation of the ranks"));
        }
    }
    let meta: Vec<Meta> = params
        .iter()
        .map(|p| Meta {
            algorithm: p.algorithm,
            full_shape: p.full_shape,
            owner: p.owner_rank,
            rows: p.shards.iter().map(|s| s.rows.len()).collect(),
        })
        .collect();

    let mut ledger = CommLedger::new(world);
    ledger.steps = 1;
    for m in &meta {
        let n = m.full_shape.1;
        let numel = m.full_shape.0 * n;
        for (r, &rows) in m.rows.iter().enumerate() {
            let remote = numel - rows * n;
            ledger.forward_allgather.charge(r, remote, topo.elem_bytes_param);
            ledger.backward_allgather.charge(r, remote, topo.elem_bytes_param);
            ledger
                .grad_reducescatter
                .charge(r, rows * n * (world - 1), topo.elem_bytes_grad);
        }
        ledger.forward_allgather.covered_elements += numel as u64;
        ledger.backward_allgather.covered_elements += numel as u64;
        ledger.grad_reducescatter.covered_elements += numel as u64;
    }

    // local momentum; AdamW-routed parameters finish here
    let pre: Vec<Vec<(usize, Option<Matrix>)>> = per_rank(split_by_rank(params, world), opts, |r, work| {
        let mut out = Vec::with_capacity(work.len());
        for (p, shard) in work {
            let g = &grads[p][r];
            let cfg = &cfgs[p];
            let rule = meta[p].rule();
            if rule == Algorithm::AdamW {
                adamw_step(&mut shard.state, g, cfg)?;
                out.push((p, None));
                continue;
            }
            let slots = &mut shard.state.slots;
            let m = match slots {
                StateSlots::Momentum { m } | StateSlots::RowMoment { m, .. } | StateSlots::FullMoment { m, .. } => m,
                StateSlots::Adam { .. } => {
                    return Err(Error::domain("distributed_step", format!("param {p} holds Adam state for {rule}")))
                }
            };
            momentum_update(m.as_mut_slice(), g.as_slice(), cfg.beta1, cfg.momentum_style);
            let input = match (rule, slots) {
                (Algorithm::NorMuonFront, StateSlots::RowMoment { m, v_row }) => {
                    ema_update(v_row.as_mut_slice(), row_mean_sq(m).as_slice(), cfg.beta2);
                    div_rows(m, v_row, cfg.eps)?
                }
                (_, s) => s.momentum().clone(),
            };
            out.push((p, Some(input)));
        }
        Ok(out)
    })?;

    // owners gather, orthogonalize and scatter
    let mut inputs: Vec<Vec<Option<Matrix>>> = (0..params.len()).map(|_| vec![None; world]).collect();
    for (r, list) in pre.into_iter().enumerate() {
        for (p, m) in list {
            inputs[p][r] = m;
        }
    }
    let mut ortho: Vec<Option<Vec<Matrix>>> = (0..params.len()).map(|_| None).collect();
    let owner_order: Vec<usize> = if opts.rank_order.is_empty() {
        (0..world).collect()
    } else {
        opts.rank_order.clone()
    };
    for owner in owner_order {
        for p in (0..params.len()).filter(|&p| meta[p].owner == owner) {
            if inputs[p].iter().any(Option::is_none) {
                continue;
            }
            let parts: Vec<Matrix> = inputs[p].iter_mut().map(|m| m.take().unwrap()).collect();
            let n = meta[p].full_shape.1;
            for (r, &rows) in meta[p].rows.iter().enumerate() {
                if r != owner {
                    ledger.momentum_gather.charge(owner, rows * n, topo.elem_bytes_collective);
                    ledger.update_scatter.charge(r, rows * n, topo.elem_bytes_collective);
                }
            }
            let numel = meta[p].full_shape.0 * n;
            ledger.momentum_gather.covered_elements += numel as u64;
            ledger.update_scatter.covered_elements += numel as u64;
            let full = Matrix::concat_rows(&parts)?;
            let o = ns5(&full, &cfgs[p].ns)?;
            let mut start = 0;
            let shards = meta[p]
                .rows
                .iter()
                .map(|&rows| {
                    let s = o.slice_rows(start, start + rows);
                    start += rows;
                    s
                })
                .collect();
            ortho[p] = Some(shards);
        }
    }

    // local post-normalization and statistics
    let dirs: Vec<Vec<(usize, Matrix)>> = per_rank(split_by_rank(params, world), opts, |r, work| {
        let mut out = Vec::new();
        for (p, shard) in work {
            let Some(shards) = &ortho[p] else { continue };
            let o = &shards[r];
            let cfg = &cfgs[p];
            let dir = match (meta[p].rule(), &mut shard.state.slots) {
                (Algorithm::NorMuon, StateSlots::RowMoment { v_row, .. }) => {
                    ema_update(v_row.as_mut_slice(), row_mean_sq(o).as_slice(), cfg.beta2);
                    div_rows(o, v_row, cfg.eps)?
                }
                (Algorithm::MuonAdam, StateSlots::FullMoment { v_full, .. }) => {
                    let sq = o.map(|x| x * x);
                    ema_update(v_full.as_mut_slice(), sq.as_slice(), cfg.beta2);
                    o.zip_with(v_full, "distributed_step", |x, v| x / (v.sqrt() + cfg.eps))?
                }
                _ => o.clone(),
            };
            out.push((p, dir));
        }
        Ok(out)
    })?;
    let mut directions: Vec<Vec<Option<Matrix>>> = (0..params.len()).map(|_| vec![None; world]).collect();
    for (r, list) in dirs.into_iter().enumerate() {
        for (p, d) in list {
            directions[p][r] = Some(d);
        }
    }
    let steps: Vec<Option<Vec<f64>>> = (0..params.len())
        .map(|p| {
            let shards = &directions[p];
            if shards.iter().any(Option::is_none) {
                return None;
            }
            let stats: Vec<(usize, f64)> = shards
                .iter()
                .map(|d| {
                    let d = d.as_ref().unwrap();
                    (d.numel(), d.sum_sq())
                })
                .collect();
            Some(step_sizes(&stats, &cfgs[p], opts.rms_mode, meta[p].rms_matched(&cfgs[p])))
        })
        .collect();

    // local apply
    per_rank(split_by_rank(params, world), opts, |r, work| {
        for (p, shard) in work {
            let (Some(step), Some(dir)) = (&steps[p], &directions[p][r]) else { continue };
            let cfg = &cfgs[p];
            apply_update(shard.state.w.as_mut_slice(), dir.as_slice(), cfg.lr, cfg.weight_decay, step[r]);
            shard.state.step_count += 1;
        }
        Ok(())
    })?;
    Ok(ledger)
}

/// Splits full gradients into the row shards of each parameter.
pub fn shard_grads(params: &[ShardedParam], grads: &[Matrix]) -> Vec<Vec<Matrix>> {
    params
        .iter()
        .zip(grads)
        .map(|(p, g)| p.shards.iter().map(|s| g.slice_rows(s.rows.start, s.rows.end)).collect())
        .collect()
}

/// Shards every parameter of `model` under the routing of `config` and
/// assigns owners among the orthogonalized ones.
pub fn shard_model(model: &MlpModel, config: &TrainConfig, world_size: usize) -> Result<(Vec<ShardedParam>, Vec<OptimizerConfig>)> {
    let mut params = Vec::new();
    let mut cfgs = Vec::new();
    for (info, w) in model.param_info().iter().zip(model.params()) {
        let (alg, cfg) = config.param_config(info.kind);
        params.push(shard_rowwise(&info.name, w, alg, world_size)?);
        cfgs.push(cfg);
    }
    let ortho: Vec<usize> = (0..params.len())
        .filter(|&i| params[i].algorithm.is_orthogonalized())
        .collect();
    let numels: Vec<usize> = ortho.iter().map(|&i| params[i].numel()).collect();
    for (&i, owner) in ortho.iter().zip(owner_ranks(&numels, world_size)) {
        params[i].owner_rank = owner;
    }
    Ok((params, cfgs))
}

/// Full-batch training with the optimizer step simulated across ranks.
/// Probes are not taken.
pub fn distributed_train_loop(
    model: MlpModel,
    task: &crate::trainer::SyntheticTask,
    config: &TrainConfig,
    topo: &Topology,
    opts: &SimOptions,
) -> Result<(RunOutput, CommLedger)> {
    config.validate()?;
    topo.validate()?;
    let train = gen_synthetic(task)?;
    let val = gen_validation(task)?;
    let mut model = model;
    let (mut params, base_cfgs) = shard_model(&model, config, topo.world_size)?;
    let mut ledger = CommLedger::new(topo.world_size);
    let mut rows = Vec::with_capacity(config.steps);
    for t in 1..=config.steps {
        let started = std::time::Instant::now();
        let (train_loss, grads) = forward_backward(&model, &train)?;
        if !train_loss.is_finite() {
            return Err(Error::Divergence { step: t, loss: train_loss });
        }
        let val_loss = if val.is_empty() {
            f64::NAN
        } else {
            forward_backward(&model, &val)?.0
        };
        let mult = config.schedule.multiplier(t, config.steps)?;
        let cfgs: Vec<OptimizerConfig> = base_cfgs.iter().map(|c| c.with_lr(c.lr * mult)).collect();
        let sharded = shard_grads(&params, &grads);
        let delta = match distributed_step_mixed(&mut params, &sharded, &cfgs, topo, opts) {
            Err(Error::Numeric { .. }) => return Err(Error::Divergence { step: t, loss: train_loss }),
            other => other?,
        };
        ledger.merge(&delta);
        for (slot, p) in model.params_mut().into_iter().zip(&params) {
            *slot = p.gather_weights();
            if !slot.all_finite() {
                return Err(Error::Divergence { step: t, loss: train_loss });
            }
        }
        rows.push(RunRow {
            step: t,
            train_loss,
            val_loss,
            effective_lr: config.optimizer.lr * mult,
            wall_micros: started.elapsed().as_micros() as u64,
        });
    }
    let checksum = model.checksum();
    Ok((
        RunOutput {
            record: RunRecord { rows, checksum },
            probes: Vec::new(),
            model,
        },
        ledger,
    ))
}
