//! Experiment configs, run directories and the analyses the CLI exposes.
//!
//! A run directory holds `run.csv`, `probes.csv`, `spectra.csv`,
//! `config.toml` (the fully resolved config), `weights/*.nmk` and
//! `manifest.json`. The manifest is written first with status `incomplete`
//! and rewritten as `complete` only after every other file is on disk.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use toml::Value;

use crate::diagnostics::{write_probe_csv, write_spectra_csv, ProbeSpec, DEFAULT_RANK_TOL};
use crate::distsim::{comm_audit, distributed_train_loop, shard_model, CommLedger, RmsMode, SimOptions, Topology};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::optim::{memory_table, Algorithm, OptimizerConfig};
use crate::rng::GENERATOR_NAME;
use crate::trainer::{
    forward_backward, gen_synthetic, train_loop, Activation, LrSchedule, MlpModel, RunOutput,
    SyntheticTask, TrainConfig,
};

/// Trailing window of the loss smoothing used by [`steps_to_loss`].
pub const SMOOTHING_WINDOW: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Hidden layer widths; input and output widths come from the task.
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistSpec {
    pub world_size: usize,
    pub elem_bytes_param: u64,
    pub elem_bytes_grad: u64,
    pub elem_bytes_collective: u64,
    pub rms_mode: RmsMode,
    pub threaded: bool,
}

impl Default for DistSpec {
    fn default() -> Self {
        let t = Topology::default();
        Self {
            world_size: t.world_size,
            elem_bytes_param: t.elem_bytes_param,
            elem_bytes_grad: t.elem_bytes_grad,
            elem_bytes_collective: t.elem_bytes_collective,
            rms_mode: RmsMode::Global,
            threaded: false,
        }
    }
}

impl DistSpec {
    pub fn topology(&self) -> Topology {
        Topology {
            world_size: self.world_size,
            elem_bytes_param: self.elem_bytes_param,
            elem_bytes_grad: self.elem_bytes_grad,
            elem_bytes_collective: self.elem_bytes_collective,
        }
    }

    pub fn sim_options(&self) -> SimOptions {
        SimOptions {
            rms_mode: self.rms_mode,
            rank_order: Vec::new(),
            threaded: self.threaded,
        }
    }
}

/// A fully resolved experiment. Every field has a value; files only need to
/// name the ones that differ from the defaults of the chosen optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Model initialization seed.
    pub seed: u64,
    pub steps: usize,
    pub optimizer: Algorithm,
    /// Empty means `runs/<name>`.
    pub output_dir: String,
    /// Mini-batch size; 0 means full batch.
    pub batch_size: usize,
    pub decay_hidden_only: bool,
    pub rank_tol: f64,
    pub model: ModelSpec,
    pub task: SyntheticTask,
    /// Hyperparameters for hidden-layer matrices.
    pub optim: OptimizerConfig,
    /// AdamW hyperparameters for every other parameter.
    pub fallback: OptimizerConfig,
    pub schedule: LrSchedule,
    pub probes: Vec<ProbeSpec>,
    pub distsim: DistSpec,
}

impl ExperimentConfig {
    pub fn defaults_for(optimizer: Algorithm) -> Self {
        let train = TrainConfig::new(optimizer, OptimizerConfig::defaults_for(optimizer), 1);
        Self {
            name: "experiment".into(),
            seed: 0,
            steps: 1000,
            optimizer,
            output_dir: String::new(),
            batch_size: 0,
            decay_hidden_only: true,
            rank_tol: DEFAULT_RANK_TOL,
            model: ModelSpec {
                hidden: vec![64],
                activation: Activation::Tanh,
            },
            task: SyntheticTask::default(),
            optim: train.optimizer,
            fallback: train.fallback,
            schedule: LrSchedule::default(),
            probes: Vec::new(),
            distsim: DistSpec::default(),
        }
    }

    /// Parses TOML text, applies `key=value` overrides, fills defaults and
    /// validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut user: Value = toml::from_str::<toml::Table>(text)
            .map(Value::Table)
            .map_err(|e| Error::config("<file>", e.message().to_string()))?;
        for o in overrides {
            apply_override(&mut user, o)?;
        }
        Self::from_value(&user)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides)
    }

    fn from_value(user: &Value) -> Result<Self> {
        let optimizer = match user.get("optimizer") {
            None => Algorithm::NorMuon,
            Some(Value::String(s)) => s.parse::<Algorithm>().map_err(|_| {
                let known: Vec<&str> = Algorithm::ALL.iter().map(|a| a.name()).collect();
                Error::config(
                    "optimizer",
                    format!("unknown optimizer `{s}`; expected one of {}", known.join(", ")),
                )
            })?,
            Some(_) => return Err(Error::config("optimizer", "expected a string")),
        };
        let mut merged = Value::try_from(Self::defaults_for(optimizer))
            .map_err(|e| Error::config("<defaults>", e.to_string()))?;
        merge(&mut merged, user, "")?;
        let user_set_fallback = user.get("fallback").is_some();
        let mut cfg: ExperimentConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("<file>", e.message().to_string()))?;
        if optimizer == Algorithm::AdamW && !user_set_fallback {
            cfg.fallback = cfg.optim;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps", "must be at least 1"));
        }
        if self.model.hidden.contains(&0) {
            return Err(Error::config("model.hidden", "layer widths must be positive"));
        }
        self.task.validate()?;
        self.train_config().validate()?;
        self.distsim.topology().validate()?;
        let model = self.build_model()?;
        for p in &self.probes {
            model
                .param_index(&p.param)
                .map_err(|_| Error::config("probes.param", format!("no parameter named `{}`", p.param)))?;
        }
        Ok(())
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.task.input_dim];
        dims.extend(&self.model.hidden);
        dims.push(self.task.output_dim);
        dims
    }

    pub fn build_model(&self) -> Result<MlpModel> {
        MlpModel::new(&self.dims(), self.model.activation, self.seed)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            algorithm: self.optimizer,
            optimizer: self.optim,
            fallback: self.fallback,
            steps: self.steps,
            schedule: self.schedule,
            decay_hidden_only: self.decay_hidden_only,
            batch_size: (self.batch_size > 0).then_some(self.batch_size),
            batch_seed: self.seed,
            probes: self.probes.clone(),
            rank_tol: self.rank_tol,
        }
    }

    pub fn output_path(&self) -> PathBuf {
        if self.output_dir.is_empty() {
            Path::new("runs").join(&self.name)
        } else {
            PathBuf::from(&self.output_dir)
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("resolved configs serialize")
    }
}

/// Applies `a.b.c=value`; the value is read as TOML and falls back to a
/// bare string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like key=value"))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::config(assignment, "override key is empty"));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::config(parts[..i].join("."), "not a table"))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(toml::Table::new()));
    }
    unreachable!("split yields at least one part")
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "a string",
        Value::Integer(_) => "an integer",
        Value::Float(_) => "a number",
        Value::Boolean(_) => "a boolean",
        Value::Datetime(_) => "a datetime",
        Value::Array(_) => "an array",
        Value::Table(_) => "a table",
    }
}

/// Overlays `user` on `base`, rejecting keys `base` does not have and values
/// of the wrong type.
fn merge(base: &mut Value, user: &Value, path: &str) -> Result<()> {
    let (Value::Table(bt), Value::Table(ut)) = (&mut *base, user) else {
        unreachable!("merge is called on tables")
    };
    for (k, uv) in ut {
        let field = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
        let Some(bv) = bt.get_mut(k) else {
            return Err(Error::config(field, "unknown key"));
        };
        match (&mut *bv, uv) {
            (Value::Table(_), Value::Table(_)) => merge(bv, uv, &field)?,
            (Value::Float(_), Value::Integer(i)) => *bv = Value::Float(*i as f64),
            (b, u) if std::mem::discriminant(b) == std::mem::discriminant(u) => *bv = uv.clone(),
            (b, u) => {
                return Err(Error::config(
                    field,
                    format!("expected {}, found {}", type_name(b), type_name(u)),
                ))
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightEntry {
    pub name: String,
    pub file: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub status: String,
    pub command: String,
    pub name: String,
    pub optimizer: String,
    pub generator: String,
    pub seed: u64,
    pub steps: usize,
    pub task: serde_json::Value,
    pub config: serde_json::Value,
    #[serde(default)]
    pub world_size: Option<usize>,
    #[serde(default)]
    pub rms_mode: Option<RmsMode>,
    #[serde(default)]
    pub checksum: Option<String>,
    #[serde(default)]
    pub final_train_loss: Option<f64>,
    #[serde(default)]
    pub weights: Vec<WeightEntry>,
    /// SHA-256 of every output file, keyed by relative path.
    #[serde(default)]
    pub files: BTreeMap<String, String>,
    #[serde(default)]
    pub error: Option<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    fn start(command: &str, cfg: &ExperimentConfig) -> Self {
        Self {
            status: "incomplete".into(),
            command: command.into(),
            name: cfg.name.clone(),
            optimizer: cfg.optimizer.name().into(),
            generator: GENERATOR_NAME.into(),
            seed: cfg.seed,
            steps: cfg.steps,
            task: serde_json::to_value(&cfg.task).expect("task serializes"),
            config: serde_json::to_value(cfg).expect("config serializes"),
            world_size: None,
            rms_mode: None,
            checksum: None,
            final_train_loss: None,
            weights: Vec::new(),
            files: BTreeMap::new(),
            error: None,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.status == "complete"
    }

    /// Reads `path`, or `path/manifest.json` when `path` is a directory.
    pub fn load(path: &Path) -> Result<(Manifest, PathBuf)> {
        let (file, dir) = if path.is_dir() {
            (path.join(MANIFEST_FILE), path.to_path_buf())
        } else {
            (path.to_path_buf(), path.parent().unwrap_or(Path::new(".")).to_path_buf())
        };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let m = serde_json::from_str(&text).map_err(|e| Error::Format {
            what: "manifest",
            detail: format!("{}: {e}", file.display()),
        })?;
        Ok((m, dir))
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_file(dir: &Path, rel: &str, bytes: &[u8], manifest: &mut Manifest) -> Result<()> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    manifest.files.insert(rel.to_string(), sha256_file(&path)?);
    Ok(())
}

/// What a finished run reports back to the caller.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub checksum: String,
    pub first_loss: f64,
    pub final_loss: f64,
    pub ledger: Option<serde_json::Value>,
}

fn prepare_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    // stale outputs of an earlier run must not survive next to a new manifest
    for name in ["run.csv", "probes.csv", "spectra.csv", "comm.json", "config.toml", MANIFEST_FILE] {
        let p = dir.join(name);
        if p.exists() {
            fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    let weights = dir.join("weights");
    if weights.exists() {
        fs::remove_dir_all(&weights).map_err(|e| Error::io(&weights, e))?;
    }
    Ok(())
}

fn finish_run(
    dir: &Path,
    manifest: &mut Manifest,
    cfg: &ExperimentConfig,
    out: &RunOutput,
) -> Result<()> {
    let mut csv = Vec::new();
    out.record.write_csv(&mut csv).map_err(|e| Error::io(dir.join("run.csv"), e))?;
    write_file(dir, "run.csv", &csv, manifest)?;
    let mut probes = Vec::new();
    write_probe_csv(&out.probes, &mut probes).map_err(|e| Error::io(dir.join("probes.csv"), e))?;
    write_file(dir, "probes.csv", &probes, manifest)?;
    let mut spectra = Vec::new();
    write_spectra_csv(&out.probes, &mut spectra).map_err(|e| Error::io(dir.join("spectra.csv"), e))?;
    write_file(dir, "spectra.csv", &spectra, manifest)?;
    write_file(dir, "config.toml", cfg.to_toml().as_bytes(), manifest)?;
    for (info, w) in out.model.param_info().iter().zip(out.model.params()) {
        let rel = format!("weights/{}.nmk", info.name);
        write_file(dir, &rel, &w.to_bytes(), manifest)?;
        manifest.weights.push(WeightEntry {
            name: info.name.clone(),
            file: rel,
            rows: w.rows(),
            cols: w.cols(),
        });
    }
    manifest.checksum = Some(out.record.checksum.clone());
    manifest.final_train_loss = Some(out.record.final_loss());
    Ok(())
}

fn run_in_dir(
    command: &str,
    cfg: &ExperimentConfig,
    dir: &Path,
    body: impl FnOnce(&mut Manifest) -> Result<(RunOutput, Option<CommLedger>)>,
) -> Result<RunSummary> {
    prepare_dir(dir)?;
    let mut manifest = Manifest::start(command, cfg);
    manifest.write(dir)?;
    let result = body(&mut manifest).and_then(|(out, ledger)| {
        finish_run(dir, &mut manifest, cfg, &out)?;
        let ledger_json = match &ledger {
            Some(l) => {
                let audit = comm_audit(l, out.model.element_count());
                let doc = json!({ "ledger": l.to_json(), "audit": audit });
                let text = serde_json::to_string_pretty(&doc).expect("ledger serializes");
                write_file(dir, "comm.json", text.as_bytes(), &mut manifest)?;
                Some(doc)
            }
            None => None,
        };
        Ok((out, ledger_json))
    });
    match result {
        Ok((out, ledger)) => {
            manifest.status = "complete".into();
            manifest.write(dir)?;
            Ok(RunSummary {
                dir: dir.to_path_buf(),
                checksum: out.record.checksum.clone(),
                first_loss: out.record.first_loss(),
                final_loss: out.record.final_loss(),
                ledger,
            })
        }
        Err(e) => {
            manifest.error = Some(e.to_string());
            manifest.write(dir)?;
            Err(e)
        }
    }
}

/// Trains per `cfg` and writes a complete run directory.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    run_in_dir("run", cfg, dir, |_| {
        let out = train_loop(cfg.build_model()?, &cfg.task, cfg.train_config())?;
        Ok((out, None))
    })
}

/// Trains with the optimizer step simulated over `cfg.distsim.world_size`
/// ranks; also writes `comm.json`.
pub fn run_distsim(cfg: &ExperimentConfig, dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    run_in_dir("distsim", cfg, dir, |manifest| {
        manifest.world_size = Some(cfg.distsim.world_size);
        manifest.rms_mode = Some(cfg.distsim.rms_mode);
        let (out, ledger) = distributed_train_loop(
            cfg.build_model()?,
            &cfg.task,
            &cfg.train_config(),
            &cfg.distsim.topology(),
            &cfg.distsim.sim_options(),
        )?;
        Ok((out, Some(ledger)))
    })
}

/// Per-element comparison of the final weights of two run directories.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub identical: bool,
    pub max_rel_diff: f64,
    pub worst_param: String,
    pub tolerance: f64,
}

fn load_complete(path: &Path) -> Result<(Manifest, PathBuf)> {
    let (m, dir) = Manifest::load(path)?;
    if !m.is_complete() {
        return Err(Error::Comparison(format!(
            "{} is marked {}",
            dir.display(),
            m.status
        )));
    }
    Ok((m, dir))
}

/// Compares final weights within `tol` relative difference per element.
/// Returns an error when they differ by more.
pub fn compare_runs(a: &Path, b: &Path, tol: f64) -> Result<Comparison> {
    let (ma, da) = load_complete(a)?;
    let (mb, db) = load_complete(b)?;
    let names = |m: &Manifest| m.weights.iter().map(|w| (w.name.clone(), w.rows, w.cols)).collect::<Vec<_>>();
    if names(&ma) != names(&mb) {
        return Err(Error::Comparison("runs have different parameter sets".into()));
    }
    let mut cmp = Comparison {
        identical: ma.checksum.is_some() && ma.checksum == mb.checksum,
        max_rel_diff: 0.0,
        worst_param: String::new(),
        tolerance: tol,
    };
    for (wa, wb) in ma.weights.iter().zip(&mb.weights) {
        let x = Matrix::load(da.join(&wa.file))?;
        let y = Matrix::load(db.join(&wb.file))?;
        for (p, q) in x.as_slice().iter().zip(y.as_slice()) {
            let scale = p.abs().max(q.abs());
            let d = if scale == 0.0 { 0.0 } else { (p - q).abs() / scale };
            if d > cmp.max_rel_diff || d.is_nan() {
                cmp.max_rel_diff = if d.is_nan() { f64::INFINITY } else { d };
                cmp.worst_param = wa.name.clone();
            }
        }
    }
    if cmp.max_rel_diff > tol {
        return Err(Error::Comparison(format!(
            "max relative difference {:e} in {} exceeds {tol:e}",
            cmp.max_rel_diff, cmp.worst_param
        )));
    }
    Ok(cmp)
}

/// Trailing mean over `window` steps (shorter at the start).
pub fn smooth(losses: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(losses.len());
    let mut sum = 0.0;
    for (i, &l) in losses.iter().enumerate() {
        sum += l;
        if i >= window {
            sum -= losses[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

/// First 1-based step whose smoothed loss is at or below the reference's
/// smoothed final loss.
pub fn steps_to_loss(reference: &[f64], candidate: &[f64], window: usize) -> Option<usize> {
    let target = *smooth(reference, window).last()?;
    smooth(candidate, window)
        .iter()
        .position(|&l| l <= target)
        .map(|i| i + 1)
}

/// Percentage of steps saved: `100 * (1 - step / total)`.
pub fn efficiency_gain(step: usize, total_steps: usize) -> f64 {
    // integer difference first keeps round numbers exact
    100.0 * (total_steps as f64 - step as f64) / total_steps as f64
}

/// Reads the `train_loss` column of a run CSV.
pub fn read_losses(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let col = header
        .split(',')
        .position(|h| h.trim() == "train_loss")
        .ok_or_else(|| Error::Format {
            what: "run csv",
            detail: format!("{}: no train_loss column", path.display()),
        })?;
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.split(',')
                .nth(col)
                .and_then(|v| v.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::Format {
                    what: "run csv",
                    detail: format!("{}: bad row {}", path.display(), i + 2),
                })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GainRow {
    pub label: String,
    pub final_loss: f64,
    pub total_steps: usize,
    pub step: Option<usize>,
    pub gain_percent: Option<f64>,
}

/// One labelled loss curve plus, when known, the manifest it came from.
pub struct Curve {
    pub label: String,
    pub losses: Vec<f64>,
    pub manifest: Option<Manifest>,
}

impl Curve {
    /// Loads a run directory, its manifest, or a bare CSV.
    pub fn load(path: &Path) -> Result<Curve> {
        if path.is_dir() || path.extension().is_some_and(|e| e == "json") {
            let (m, dir) = Manifest::load(path)?;
            let losses = read_losses(&dir.join("run.csv"))?;
            let label = m.optimizer.clone();
            return Ok(Curve {
                label,
                losses,
                manifest: Some(m),
            });
        }
        let losses = read_losses(path)?;
        let sibling = path.with_file_name(MANIFEST_FILE);
        let manifest = sibling.exists().then(|| Manifest::load(&sibling)).transpose()?.map(|(m, _)| m);
        let label = match &manifest {
            Some(m) => m.optimizer.clone(),
            None => path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        };
        Ok(Curve {
            label,
            losses,
            manifest,
        })
    }
}

/// Efficiency gains of each curve against `reference`. Curves whose
/// manifests disagree on task, seed or step count are rejected.
pub fn efficiency_table(reference: &Curve, curves: &[Curve], window: usize) -> Result<Vec<GainRow>> {
    if reference.losses.is_empty() {
        return Err(Error::Comparison(format!("reference `{}` has no rows", reference.label)));
    }
    let key = |m: &Manifest| (m.task.clone(), m.seed, m.steps);
    for c in curves {
        if let (Some(a), Some(b)) = (&reference.manifest, &c.manifest) {
            if key(a) != key(b) {
                return Err(Error::Comparison(format!(
                    "`{}` and `{}` were not run on the same task, seed and step count",
                    reference.label, c.label
                )));
            }
        }
        if c.losses.len() != reference.losses.len() {
            return Err(Error::Comparison(format!(
                "`{}` has {} steps, reference has {}",
                c.label,
                c.losses.len(),
                reference.losses.len()
            )));
        }
    }
    let total = reference.losses.len();
    Ok(std::iter::once(reference)
        .chain(curves)
        .map(|c| {
            let step = steps_to_loss(&reference.losses, &c.losses, window);
            GainRow {
                label: c.label.clone(),
                final_loss: *c.losses.last().unwrap_or(&f64::NAN),
                total_steps: total,
                step,
                gain_percent: step.map(|s| efficiency_gain(s, total)),
            }
        })
        .collect())
}

/// Text table in the layout of an efficiency-gain report.
pub fn format_gain_table(rows: &[GainRow]) -> String {
    let mut out = format!(
        "{:<20} {:>14} {:>14} {:>22}\n",
        "optimizer", "final_loss", "steps_to_ref", "efficiency_gain"
    );
    for r in rows {
        let (step, gain) = match (r.step, r.gain_percent) {
            (Some(s), Some(g)) => (s.to_string(), format!("{g:.2}%")),
            _ => ("-".to_string(), "not reached".to_string()),
        };
        out += &format!("{:<20} {:>14.6e} {:>14} {:>22}\n", r.label, r.final_loss, step, gain);
    }
    out
}

/// Memory per optimizer and communication per element for the model in
/// `cfg`, using one simulated step on real gradients.
pub fn audit(cfg: &ExperimentConfig) -> Result<serde_json::Value> {
    cfg.validate()?;
    let model = cfg.build_model()?;
    let shapes: Vec<_> = model.param_info().iter().map(|p| (p.shape, p.kind)).collect();
    let memory: Vec<serde_json::Value> = memory_table(&shapes)
        .into_iter()
        .map(|(alg, a)| json!({ "optimizer": alg.name(), "state_elements": a.total, "per_param": a.per_param }))
        .collect();

    let topo = cfg.distsim.topology();
    let train = gen_synthetic(&cfg.task)?;
    let (_, grads) = forward_backward(&model, &train)?;
    let tc = cfg.train_config();
    let (mut params, cfgs) = shard_model(&model, &tc, topo.world_size)?;
    let sharded = crate::distsim::shard_grads(&params, &grads);
    let ledger = crate::distsim::distributed_step_mixed(&mut params, &sharded, &cfgs, &topo, &cfg.distsim.sim_options())?;
    let comm = comm_audit(&ledger, model.element_count());
    Ok(json!({
        "model_elements": model.element_count(),
        "params": model.param_info().iter().map(|p| json!({"name": p.name, "rows": p.shape.0, "cols": p.shape.1})).collect::<Vec<_>>(),
        "memory": memory,
        "topology": topo,
        "optimizer": cfg.optimizer.name(),
        "communication": comm,
        "ledger": ledger.to_json(),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_and_validate() {
        let cfg = ExperimentConfig::from_toml_str("", &[]).unwrap();
        assert_eq!(cfg.optimizer, Algorithm::NorMuon);
        assert_eq!(cfg.dims(), vec![32, 64, 16]);
    }

    #[test]
    fn unknown_keys_name_their_path() {
        let err = ExperimentConfig::from_toml_str("[optim]\nlrr = 0.1\n", &[]).unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "optim.lrr"), "{err}");
        let err = ExperimentConfig::from_toml_str("stepz = 3\n", &[]).unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "stepz"));
    }

    #[test]
    fn type_errors_name_their_path() {
        let err = ExperimentConfig::from_toml_str("steps = \"many\"\n", &[]).unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "steps"), "{err}");
    }

    #[test]
    fn optimizer_defaults_follow_the_name() {
        let cfg = ExperimentConfig::from_toml_str("optimizer = \"adamw\"\n[optim]\nlr = 0.004\n", &[]).unwrap();
        assert_eq!(cfg.optim.beta1, 0.9);
        assert_eq!(cfg.fallback.lr, 0.004);
        let err = ExperimentConfig::from_toml_str("optimizer = \"nosuch\"\n", &[]).unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "optimizer"));
    }

    #[test]
    fn overrides_apply_before_validation() {
        let cfg = ExperimentConfig::from_toml_str(
            "steps = 10\n",
            &["steps=20".into(), "optim.lr=0.5".into(), "schedule.kind=wsd".into(), "optimizer=muon".into()],
        )
        .unwrap();
        assert_eq!(cfg.steps, 20);
        assert_eq!(cfg.optim.lr, 0.5);
        assert_eq!(cfg.optimizer, Algorithm::Muon);
        assert!(ExperimentConfig::from_toml_str("", &["nokey".into()]).is_err());
        assert!(ExperimentConfig::from_toml_str("", &["optim.bogus=1".into()]).is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = ExperimentConfig::from_toml_str("optimizer = \"muon_adam\"\nsteps = 7\n[[probes]]\nparam = \"layer0.weight\"\nstride = 2\n", &[]).unwrap();
        let again = ExperimentConfig::from_toml_str(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn bad_probe_param_is_a_config_error() {
        let err = ExperimentConfig::from_toml_str("[[probes]]\nparam = \"layer7.weight\"\nstride = 2\n", &[]).unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "probes.param"));
    }

    #[test]
    fn smoothing_window() {
        assert_eq!(smooth(&[4.0, 2.0, 0.0], 2), vec![4.0, 3.0, 1.0]);
        assert_eq!(smooth(&[1.0, 2.0], 10), vec![1.0, 1.5]);
    }

    #[test]
    fn steps_to_loss_examples() {
        let reference: Vec<f64> = (0..1000).map(|i| 2.0 - i as f64 / 999.0).collect();
        assert_eq!(steps_to_loss(&reference, &reference, SMOOTHING_WINDOW), Some(1000));
        assert_eq!(efficiency_gain(1000, 1000), 0.0);
        let flat = vec![5.0; 1000];
        assert_eq!(steps_to_loss(&reference, &flat, SMOOTHING_WINDOW), None);
        assert_eq!(efficiency_gain(800, 1000), 20.0);
    }
}
