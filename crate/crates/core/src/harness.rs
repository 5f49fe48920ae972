//! End-to-end continual run: first task, then per task basis → slow → fast →
//! dreams → fusion → evaluation, with artifacts and resume support.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, Container, Meta};
use crate::data::{ingest, make_synthetic_stream_with, IngestSpec, SyntheticConfig, TaskStream};
use crate::dreaming::{dream_roster, DreamConfig, DreamSet};
use crate::error::{Error, Result, Stage, StageExt};
use crate::fusion::{barrier_sweep, fuse_linear, fusion_dreams, meta_fuse, EvalSet, MetaConfig};
use crate::metrics::{accuracy, AccMatrix};
use crate::network::{hex16, LayerSpec, Network, TaskId};
use crate::projector::{accumulate_task, build_basis, CrossCorrAccumulator, ProjectionBasis, ProjectorKind, RankPolicy};
use crate::rng::derive_seed;
use crate::trainer::{train_fast, train_first_task, train_slow, EpochRecord, PhaseConfig};

/// Exactly one source must be set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ingest: Option<IngestSpec>,
    /// A stream container written by `gen-stream`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
}

impl StreamConfig {
    pub fn synthetic(cfg: SyntheticConfig) -> Self {
        StreamConfig {
            synthetic: Some(cfg),
            ..Default::default()
        }
    }

    pub fn load(&self) -> Result<TaskStream> {
        match (&self.synthetic, &self.ingest, &self.file) {
            (Some(s), None, None) => make_synthetic_stream_with(s),
            (None, Some(i), None) => ingest(i),
            (None, None, Some(p)) => Container::load(p)?.first::<TaskStream>(),
            _ => Err(Error::Config(
                "stream needs exactly one of `synthetic`, `ingest` or `file`".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TrunkConfig {
    /// Linear–BN–ReLU blocks on the flattened input.
    Mlp { hidden: Vec<usize> },
    /// conv(→16)–BN–ReLU–conv(→32)–BN–ReLU–flatten–linear(→64).
    ReferenceConv,
    Layers { layers: Vec<LayerSpec> },
}

impl Default for TrunkConfig {
    fn default() -> Self {
        TrunkConfig::Mlp { hidden: vec![32, 32] }
    }
}

impl TrunkConfig {
    pub fn specs(&self, input_shape: &[usize]) -> Result<Vec<LayerSpec>> {
        match (self, input_shape) {
            (TrunkConfig::Mlp { hidden }, [d]) => Ok(LayerSpec::mlp_trunk(*d, hidden)),
            (TrunkConfig::Mlp { hidden }, s) => {
                let mut specs = vec![LayerSpec::Flatten];
                specs.extend(LayerSpec::mlp_trunk(s.iter().product(), hidden));
                Ok(specs)
            }
            (TrunkConfig::ReferenceConv, &[c, h, w]) => Ok(LayerSpec::reference_conv_trunk(c, h, w)),
            (TrunkConfig::ReferenceConv, s) => Err(Error::Config(format!(
                "the reference conv trunk needs image input, got shape {s:?}"
            ))),
            (TrunkConfig::Layers { layers }, _) => Ok(layers.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectionMode {
    #[default]
    Tpnsp,
    Nsp,
    /// Identity basis: the slow phase is unconstrained.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BasisMemory {
    /// Protect every earlier task.
    #[default]
    Cumulative,
    /// Protect only the task just finished.
    Previous,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectorConfig {
    pub mode: ProjectionMode,
    pub policy: RankPolicy,
    pub memory: BasisMemory,
    pub batch_size: usize,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        ProjectorConfig {
            mode: ProjectionMode::Tpnsp,
            policy: RankPolicy::default(),
            memory: BasisMemory::Cumulative,
            batch_size: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMethod {
    /// Keep the fast model.
    None,
    /// Keep the slow model; the fast phase is skipped.
    SlowOnly,
    /// Fixed coefficient `alpha`.
    Linear,
    /// Coefficient on a grid chosen by the dream fusion loss.
    LinearAuto,
    #[default]
    Meta,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub method: FusionMethod,
    pub alpha: f64,
    pub grid: usize,
    pub meta: MetaConfig,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            method: FusionMethod::Meta,
            alpha: 0.5,
            grid: 21,
            meta: MetaConfig::default(),
        }
    }
}

impl FusionConfig {
    fn needs_dreams(&self) -> bool {
        matches!(self.method, FusionMethod::Meta | FusionMethod::LinearAuto)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Artifacts are written here when set. Not part of the config hash.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub stream: StreamConfig,
    pub trunk: TrunkConfig,
    pub first: PhaseConfig,
    pub slow: PhaseConfig,
    pub fast: PhaseConfig,
    pub projector: ProjectorConfig,
    pub dream: DreamConfig,
    pub fusion: FusionConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output_dir: None,
            stream: StreamConfig::synthetic(SyntheticConfig::default()),
            trunk: TrunkConfig::default(),
            first: PhaseConfig::slow_default(),
            slow: PhaseConfig::slow_default(),
            fast: PhaseConfig::fast_default(),
            projector: ProjectorConfig::default(),
            dream: DreamConfig::default(),
            fusion: FusionConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| match e {
            Error::Contract(m) => Error::Config(m),
            other => other,
        };
        for p in [&self.first, &self.slow, &self.fast] {
            p.validate().map_err(cfg_err)?;
        }
        self.projector.policy.validate()?;
        if self.projector.batch_size == 0 {
            return Err(Error::Config("projector batch size must be at least 1".into()));
        }
        if self.dream.batch_per_class == 0 || !(self.dream.lr > 0.0) {
            return Err(Error::Config("dream batch must be ≥ 1 and lr positive".into()));
        }
        if !(0.0..=1.0).contains(&self.fusion.alpha) || self.fusion.grid < 2 {
            return Err(Error::Config("fusion alpha must be in [0, 1] and grid ≥ 2".into()));
        }
        if !(self.fusion.meta.lr > 0.0) {
            return Err(Error::Config("meta fusion lr must be positive".into()));
        }
        let sources = [
            self.stream.synthetic.is_some(),
            self.stream.ingest.is_some(),
            self.stream.file.is_some(),
        ];
        if sources.iter().filter(|&&b| b).count() != 1 {
            return Err(Error::Config(
                "stream needs exactly one of `synthetic`, `ingest` or `file`".into(),
            ));
        }
        Ok(())
    }

    /// Applies `dotted.key=value` overrides. Values parse as TOML, falling back to a bare string.
    pub fn with_overrides(&self, sets: &[String]) -> Result<Self> {
        let mut root = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for set in sets {
            let (key, raw) = set
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{set}` is not key=value")))?;
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let mut node = &mut root;
            let parts: Vec<&str> = key.trim().split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let table = node
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not inside a table")))?;
                if i + 1 == parts.len() {
                    table.insert(part.to_string(), value.clone());
                    break;
                }
                node = table
                    .entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            }
        }
        root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    /// Hex digest of the canonical JSON form, without the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        digest(&c)
    }
}

/// Short hex SHA-256 of the JSON form of any serializable config.
pub fn digest<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    hex16(&Sha256::digest(&json))
}

/// What happened while learning one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TaskReport {
    pub task: TaskId,
    pub basis_ranks: Vec<usize>,
    pub basis_warnings: Vec<String>,
    /// Accuracy on each earlier task before and after the slow phase.
    pub old_acc_before_slow: Vec<f64>,
    pub old_acc_after_slow: Vec<f64>,
    pub new_acc_slow: Option<f64>,
    pub new_acc_fast: Option<f64>,
    pub max_span_residual: f64,
    pub fusion_alpha: Option<f64>,
    pub fusion_loss_start: Option<f64>,
    pub fusion_loss_end: Option<f64>,
    pub dream_fidelity: Vec<(TaskId, f64)>,
    /// Row of the accuracy matrix after this task.
    pub accuracies: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub acc: AccMatrix,
    pub tasks: Vec<TaskReport>,
    pub config_hash: String,
    pub final_model: Network,
    /// Tasks skipped because a previous run had completed them.
    pub resumed_tasks: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunState {
    config_hash: String,
    seed: u64,
    completed_tasks: usize,
    metrics_bytes: u64,
    reports: Vec<TaskReport>,
}

/// Artifact layout under the output directory.
struct Artifacts {
    root: PathBuf,
    meta: Meta,
    pending: Vec<String>,
}

impl Artifacts {
    fn open(root: &Path, cfg: &ExperimentConfig, meta: Meta) -> Result<(Self, Option<RunState>)> {
        for sub in ["checkpoints", "dreams", "basis", "accumulators", "fusion"] {
            fs::create_dir_all(root.join(sub))?;
        }
        let state_path = root.join("state.json");
        let state = match fs::read_to_string(&state_path) {
            Ok(text) => {
                let st: RunState =
                    serde_json::from_str(&text).map_err(|e| Error::Data(format!("state.json: {e}")))?;
                if st.config_hash != meta.config_hash {
                    return Err(Error::Config(format!(
                        "output directory holds a run with config hash {}, this config hashes to {}",
                        st.config_hash, meta.config_hash
                    )));
                }
                Some(st)
            }
            Err(_) => None,
        };
        let metrics = root.join("metrics.jsonl");
        let keep = state.as_ref().map_or(0, |s| s.metrics_bytes);
        let f = fs::OpenOptions::new().create(true).write(true).truncate(false).open(&metrics)?;
        f.set_len(keep)?;
        fs::write(root.join("config.toml"), format!("# config_hash={}, seed={}\n{}", meta.config_hash, meta.seed, cfg.to_toml()))?;
        Ok((
            Artifacts {
                root: root.to_path_buf(),
                meta,
                pending: Vec::new(),
            },
            state,
        ))
    }

    fn record(&mut self, value: serde_json::Value) {
        let mut obj = serde_json::Map::new();
        obj.insert("config_hash".into(), self.meta.config_hash.clone().into());
        obj.insert("seed".into(), self.meta.seed.into());
        if let serde_json::Value::Object(m) = value {
            obj.extend(m);
        }
        self.pending.push(serde_json::Value::Object(obj).to_string());
    }

    fn flush(&mut self) -> Result<u64> {
        let path = self.root.join("metrics.jsonl");
        let mut f = fs::OpenOptions::new().append(true).open(&path)?;
        for line in self.pending.drain(..) {
            writeln!(f, "{line}")?;
        }
        f.flush()?;
        Ok(f.metadata()?.len())
    }

    fn checkpoint(&self, name: &str, net: &Network) -> Result<()> {
        Checkpoint::new(net.clone(), &self.meta.config_hash, self.meta.seed).save(&self.root.join("checkpoints").join(name))
    }

    fn container<T: crate::checkpoint::Section>(&self, dir: &str, name: &str, items: &[&T]) -> Result<()> {
        let mut c = Container::new(self.meta.clone());
        for item in items {
            c.push(*item);
        }
        c.save(&self.root.join(dir).join(name))
    }

    fn text(&self, rel: &str, body: &str) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, body)?;
        Ok(())
    }

    fn save_state(&self, state: &RunState) -> Result<()> {
        let tmp = self.root.join("state.json.partial");
        fs::write(&tmp, serde_json::to_string_pretty(state).expect("state serializes"))?;
        fs::rename(tmp, self.root.join("state.json"))?;
        Ok(())
    }
}

/// Progress recorded in an output directory.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub config_hash: String,
    pub seed: u64,
    pub tasks: usize,
    pub acc: AccMatrix,
    pub reports: Vec<TaskReport>,
}

/// Reads `state.json` and `config.toml` from a run directory.
pub fn load_run(dir: &Path) -> Result<RunSummary> {
    let state = fs::read_to_string(dir.join("state.json"))
        .map_err(|e| Error::Data(format!("{}: {e}", dir.join("state.json").display())))?;
    let st: RunState = serde_json::from_str(&state).map_err(|e| Error::Data(format!("state.json: {e}")))?;
    let cfg = ExperimentConfig::load(&dir.join("config.toml"))?;
    let tasks = cfg.stream.load().map(|s| s.len()).unwrap_or(st.completed_tasks);
    let mut acc = AccMatrix::new(tasks.max(st.completed_tasks));
    for r in &st.reports {
        for (t, &v) in r.accuracies.iter().enumerate() {
            acc.set(r.task, t, v)?;
        }
    }
    Ok(RunSummary {
        config_hash: st.config_hash,
        seed: st.seed,
        tasks: acc.tasks(),
        acc,
        reports: st.reports,
    })
}

fn epoch_records(log: &[EpochRecord]) -> Vec<serde_json::Value> {
    log.iter()
        .map(|r| {
            let mut v = serde_json::to_value(r).expect("record serializes");
            v["event"] = "epoch".into();
            v
        })
        .collect()
}

/// Runs the whole stream. With an output directory, completed tasks of an earlier
/// run under the same config hash are loaded instead of retrained.
pub fn run_continual(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let stream = cfg.stream.load()?;
    run_on_stream(cfg, &stream)
}

/// As [`run_continual`] with an already loaded stream.
pub fn run_on_stream(cfg: &ExperimentConfig, stream: &TaskStream) -> Result<RunReport> {
    cfg.validate()?;
    stream.validate()?;
    let hash = cfg.hash();
    let meta = Meta {
        config_hash: hash.clone(),
        seed: cfg.seed,
    };
    let k = stream.len();
    let specs = cfg.trunk.specs(&stream.input_shape)?;
    let init = Network::new(&stream.input_shape, &specs, derive_seed(cfg.seed, "init", 0))?;
    let range = (stream.normalization.min, stream.normalization.max);
    let projector_kind = match cfg.projector.mode {
        ProjectionMode::Nsp => ProjectorKind::Nsp,
        _ => ProjectorKind::Tpnsp,
    };

    let (mut art, state) = match &cfg.output_dir {
        Some(dir) => {
            let (a, s) = Artifacts::open(dir, cfg, meta.clone())?;
            (Some(a), s)
        }
        None => (None, None),
    };

    let mut acc = AccMatrix::new(k);
    let mut reports: Vec<TaskReport> = Vec::new();
    let mut accumulators: Vec<CrossCorrAccumulator> = Vec::new();
    let mut current = init.clone();
    let mut start = 0;
    if let (Some(a), Some(st)) = (&art, &state) {
        if st.completed_tasks > 0 {
            let last = st.completed_tasks - 1;
            current = Checkpoint::load(&a.root.join("checkpoints").join(format!("task{last}_final.ckpt")))?.net;
            if cfg.projector.mode != ProjectionMode::None {
                for t in 0..st.completed_tasks.min(k.saturating_sub(1)) {
                    let c = Container::load(&a.root.join("accumulators").join(format!("task{t}.accu")))?;
                    accumulators.push(c.first()?);
                }
            }
            for r in &st.reports {
                for (t, &v) in r.accuracies.iter().enumerate() {
                    acc.set(r.task, t, v)?;
                }
            }
            reports = st.reports.clone();
            start = st.completed_tasks;
        }
    }
    if let Some(a) = art.as_mut() {
        if start == 0 {
            a.record(serde_json::json!({"event": "run", "tasks": k}));
        }
    }

    for t in start..k {
        let outcome = run_task(cfg, stream, t, &current, &accumulators, projector_kind, range, art.as_mut());
        let (model, report, accu) = match outcome {
            Ok(v) => v,
            Err(e) => {
                if let Some(a) = art.as_mut() {
                    a.record(serde_json::json!({"event": "error", "task": t, "message": e.to_string()}));
                    let _ = a.flush();
                }
                return Err(e);
            }
        };
        for (j, &v) in report.accuracies.iter().enumerate() {
            acc.set(t, j, v)?;
        }
        current = model;
        if let Some(accu) = accu {
            accumulators.push(accu);
        }
        reports.push(report);
        if let Some(a) = art.as_mut() {
            let persist = || -> Result<()> {
                a.checkpoint(&format!("task{t}_final.ckpt"), &current)?;
                if let Some(accu) = accumulators.get(t) {
                    a.container("accumulators", &format!("task{t}.accu"), &[accu])?;
                }
                a.text("acc_matrix.csv", &acc.to_csv(&a.meta))?;
                Ok(())
            };
            persist().stage(Stage::Persist, t)?;
            a.record(serde_json::json!({"event": "task", "report": reports[t]}));
            let bytes = a.flush()?;
            a.save_state(&RunState {
                config_hash: hash.clone(),
                seed: cfg.seed,
                completed_tasks: t + 1,
                metrics_bytes: bytes,
                reports: reports.clone(),
            })?;
        }
    }
    Ok(RunReport {
        acc,
        tasks: reports,
        config_hash: hash,
        final_model: current,
        resumed_tasks: start,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_task(
    cfg: &ExperimentConfig,
    stream: &TaskStream,
    t: usize,
    current: &Network,
    accumulators: &[CrossCorrAccumulator],
    projector_kind: ProjectorKind,
    range: (f64, f64),
    mut art: Option<&mut Artifacts>,
) -> Result<(Network, TaskReport, Option<CrossCorrAccumulator>)> {
    let task = &stream.tasks[t];
    let seed = cfg.seed;
    let mut report = TaskReport {
        task: t,
        ..TaskReport::default()
    };
    let mut records: Vec<serde_json::Value> = Vec::new();

    let model = if t == 0 {
        let out = train_first_task(current, task, &cfg.first.with_seed(derive_seed(seed, "first", 0)))
            .stage(Stage::FirstTask, t)?;
        records.extend(epoch_records(&out.log));
        out.net
    } else {
        let basis = match cfg.projector.mode {
            ProjectionMode::None => ProjectionBasis::identity(current),
            _ => {
                let used: Vec<&CrossCorrAccumulator> = match cfg.projector.memory {
                    BasisMemory::Cumulative => accumulators.iter().collect(),
                    BasisMemory::Previous => accumulators.last().into_iter().collect(),
                };
                build_basis(&used, cfg.projector.policy).stage(Stage::Basis, t)?
            }
        };
        report.basis_ranks = basis.ranks();
        report.basis_warnings = basis.warnings.clone();
        if let Some(a) = art.as_deref_mut() {
            a.container("basis", &format!("task{t}.basis"), &[&basis]).stage(Stage::Persist, t)?;
        }
        let old: Vec<TaskId> = current.tasks();
        let eval_old = |net: &Network| -> Result<Vec<f64>> {
            old.iter().map(|&j| accuracy(net, j, &stream.tasks[j].test)).collect()
        };
        report.old_acc_before_slow = eval_old(current).stage(Stage::Evaluate, t)?;

        let slow_out = train_slow(current, task, &basis, &cfg.slow.with_seed(derive_seed(seed, "slow", t as u64)))
            .stage(Stage::Slow, t)?;
        records.extend(epoch_records(&slow_out.log));
        report.max_span_residual = slow_out.max_span_residual;
        let slow = slow_out.net;
        report.old_acc_after_slow = eval_old(&slow).stage(Stage::Evaluate, t)?;
        report.new_acc_slow = Some(accuracy(&slow, t, &task.test).stage(Stage::Evaluate, t)?);

        if cfg.fusion.method == FusionMethod::SlowOnly {
            slow
        } else {
            let fast_out = train_fast(&slow, task, &cfg.fast.with_seed(derive_seed(seed, "fast", t as u64)))
                .stage(Stage::Fast, t)?;
            records.extend(epoch_records(&fast_out.log));
            let fast = fast_out.net;
            report.new_acc_fast = Some(accuracy(&fast, t, &task.test).stage(Stage::Evaluate, t)?);
            if let Some(a) = art.as_deref_mut() {
                a.checkpoint(&format!("task{t}_slow.ckpt"), &slow).stage(Stage::Persist, t)?;
                a.checkpoint(&format!("task{t}_fast.ckpt"), &fast).stage(Stage::Persist, t)?;
            }

            let dreams = if cfg.fusion.needs_dreams() {
                let d = make_dreams(cfg, stream, t, current, &slow, &fast, range).stage(Stage::Dream, t)?;
                report.dream_fidelity = d.iter().map(|(&k, s)| (k, s.fidelity())).collect();
                if let Some(a) = art.as_deref_mut() {
                    let sets: Vec<&DreamSet> = d.values().collect();
                    a.container("dreams", &format!("task{t}.drm"), &sets).stage(Stage::Persist, t)?;
                }
                d
            } else {
                BTreeMap::new()
            };

            let fused = match cfg.fusion.method {
                FusionMethod::None => fast,
                FusionMethod::SlowOnly => unreachable!(),
                FusionMethod::Linear => {
                    report.fusion_alpha = Some(cfg.fusion.alpha);
                    fuse_linear(&slow, &fast, cfg.fusion.alpha).stage(Stage::Fusion, t)?
                }
                FusionMethod::LinearAuto => {
                    let sets: Vec<EvalSet> = fusion_dreams(current, t, &dreams, cfg.fusion.meta.old_tasks)
                        .stage(Stage::Fusion, t)?
                        .into_iter()
                        .map(|d| EvalSet::Dreams(d.clone()))
                        .collect();
                    let curve = barrier_sweep(&slow, &fast, &sets, cfg.fusion.grid).stage(Stage::Fusion, t)?;
                    let (alpha, loss) = curve.best();
                    report.fusion_alpha = Some(alpha);
                    report.fusion_loss_end = Some(loss);
                    if let Some(a) = art.as_deref_mut() {
                        a.text(&format!("fusion/task{t}_barrier.csv"), &curve.to_csv(&a.meta))
                            .stage(Stage::Persist, t)?;
                    }
                    fuse_linear(&slow, &fast, alpha).stage(Stage::Fusion, t)?
                }
                FusionMethod::Meta => {
                    let out = meta_fuse(current, &slow, &fast, t, &dreams, &cfg.fusion.meta).stage(Stage::Fusion, t)?;
                    report.fusion_loss_start = Some(out.loss_start);
                    report.fusion_loss_end = Some(out.loss_end);
                    if let Some(a) = art.as_deref_mut() {
                        a.text(&format!("fusion/task{t}_weights.csv"), &out.weights.to_csv(&a.meta))
                            .stage(Stage::Persist, t)?;
                    }
                    out.net
                }
            };
            fused
        }
    };

    report.accuracies = (0..=t)
        .map(|j| accuracy(&model, j, &stream.tasks[j].test))
        .collect::<Result<_>>()
        .stage(Stage::Evaluate, t)?;

    let accu = if cfg.projector.mode != ProjectionMode::None && t + 1 < stream.len() {
        Some(
            accumulate_task(&model, t, &task.train, projector_kind, cfg.projector.batch_size)
                .stage(Stage::Basis, t)?,
        )
    } else {
        None
    };
    if let Some(a) = art {
        for r in records {
            a.record(r);
        }
    }
    Ok((model, report, accu))
}

/// Slow model dreams the earlier tasks, fast model dreams the new one.
fn make_dreams(
    cfg: &ExperimentConfig,
    stream: &TaskStream,
    t: usize,
    prev: &Network,
    slow: &Network,
    fast: &Network,
    range: (f64, f64),
) -> Result<BTreeMap<TaskId, DreamSet>> {
    let old: Vec<(TaskId, usize)> = prev
        .tasks()
        .into_iter()
        .map(|j| (j, stream.tasks[j].num_classes()))
        .collect();
    let old = match cfg.fusion.meta.old_tasks {
        crate::fusion::OldTaskScope::All => old,
        crate::fusion::OldTaskScope::Previous => old.into_iter().last().into_iter().collect(),
    };
    let mut dreams = dream_roster(slow, &old, &cfg.dream, derive_seed(cfg.seed, "dream-old", t as u64), range)?;
    let new = dream_roster(
        fast,
        &[(t, stream.tasks[t].num_classes())],
        &cfg.dream,
        derive_seed(cfg.seed, "dream-new", t as u64),
        range,
    )?;
    dreams.extend(new);
    Ok(dreams)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        let phase = PhaseConfig {
            batch_size: 32,
            ..PhaseConfig::new(1, 5e-3)
        };
        ExperimentConfig {
            stream: StreamConfig::synthetic(SyntheticConfig {
                tasks: 2,
                dim: 8,
                latent_rank: 4,
                train_per_class: 30,
                test_per_class: 20,
                ..SyntheticConfig::default()
            }),
            trunk: TrunkConfig::Mlp { hidden: vec![8] },
            first: phase,
            slow: phase,
            fast: phase,
            dream: DreamConfig {
                batch_per_class: 2,
                steps: 3,
                ..DreamConfig::default()
            },
            fusion: FusionConfig {
                meta: MetaConfig {
                    steps: 3,
                    ..MetaConfig::default()
                },
                ..FusionConfig::default()
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn toml_round_trip_and_hash() {
        let cfg = small();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        let mut other = cfg.clone();
        other.output_dir = Some("elsewhere".into());
        assert_eq!(other.hash(), cfg.hash());
        other.seed = 1;
        assert_ne!(other.hash(), cfg.hash());
    }

    #[test]
    fn overrides_patch_nested_fields() {
        let cfg = small()
            .with_overrides(&[
                "seed=7".into(),
                "fusion.method=linear".into(),
                "slow.optimizer.lr=0.5".into(),
                "stream.synthetic.tasks=3".into(),
            ])
            .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.fusion.method, FusionMethod::Linear);
        assert_eq!(cfg.slow.optimizer.lr, 0.5);
        assert_eq!(cfg.stream.synthetic.unwrap().tasks, 3);
        assert!(matches!(small().with_overrides(&["nope=1".into()]), Err(Error::Config(_))));
        assert!(matches!(small().with_overrides(&["seed".into()]), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let e = ExperimentConfig::from_toml("seed = 1\nbogus = 2\n").unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        let e = ExperimentConfig::from_toml("[stream]\n").map(|c| c.validate());
        assert!(matches!(e, Ok(Err(Error::Config(_)))));
    }

    #[test]
    fn single_task_stream_gives_one_by_one() {
        let mut cfg = small();
        if let Some(s) = cfg.stream.synthetic.as_mut() {
            s.tasks = 1;
        }
        let r = run_continual(&cfg).unwrap();
        assert_eq!(r.acc.tasks(), 1);
        assert!(r.acc.get(0, 0).is_some());
        assert!(r.tasks[0].fusion_loss_end.is_none());
    }

    #[test]
    fn two_task_meta_run_fills_matrix() {
        let r = run_continual(&small()).unwrap();
        assert_eq!(r.acc.completed_rows(), 2);
        assert!(r.tasks[1].fusion_loss_end.unwrap() <= r.tasks[1].fusion_loss_start.unwrap());
    }
}
