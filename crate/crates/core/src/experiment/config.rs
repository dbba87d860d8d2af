//! The experiment file: TOML with a `[task]` table, an optional
//! `[defaults]` table, one `[[cell]]` table per trained configuration, and
//! top-level `output_dir`, `seeds`, `mode` and `preset`.
//!
//! Validation never stops at the first problem; every violation found is
//! returned together.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::augment::{BiasKind, TaskConfig};
use crate::losses::{CorrectionSet, MixWeights};
use crate::model::Arch;
use crate::problem::SourceKind;
use crate::trainers::{LrSchedule, Scheme, StageOpt, TrainConfig};

const TOP_KEYS: &[&str] = &["output_dir", "preset", "mode", "seeds", "failure_prob", "task", "defaults", "cell"];
const TASK_KEYS: &[&str] = &[
    "bias",
    "delta",
    "dim",
    "classes",
    "n_train",
    "n_aug",
    "n_eval",
    "teacher_scale",
    "curvature",
    "arch",
    "hidden",
    "source",
    "k",
    "alpha",
    "lo",
    "hi",
];
const SETTING_KEYS: &[&str] = &[
    "iters",
    "batch",
    "aug_batch",
    "lr",
    "lr2",
    "momentum",
    "weight_decay",
    "schedule",
    "decay",
    "every",
    "milestones",
    "drop_fraction",
    "t1",
    "t2",
    "lambda",
    "delta_y",
    "m0",
    "correction",
    "init",
    "init_scale",
];
const CELL_ONLY_KEYS: &[&str] = &["name", "scheme", "delta"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Practical,
    Theory,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitKind {
    Zeros,
    Random { scale: f64 },
}

/// Everything needed to build a task except the bias magnitude, which a
/// cell may override.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub label_preserving: bool,
    pub delta: f64,
    pub dim: usize,
    pub classes: usize,
    pub n_train: usize,
    pub n_aug: usize,
    pub n_eval: usize,
    pub teacher_scale: f64,
    pub curvature: f64,
    pub arch: Arch,
    pub source: SourceKind,
}

impl TaskSpec {
    pub fn config(&self, delta: f64) -> TaskConfig {
        let bias = if self.label_preserving {
            BiasKind::InputShift {
                delta_p: delta,
                curvature: self.curvature,
            }
        } else {
            BiasKind::LabelMixing { delta_y: delta }
        };
        TaskConfig {
            dim: self.dim,
            classes: self.classes,
            n_train: self.n_train,
            n_aug: self.n_aug,
            n_eval: self.n_eval,
            teacher_scale: self.teacher_scale,
            bias,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellPlan {
    pub name: String,
    /// Bias magnitude of this cell's task.
    pub delta: f64,
    pub init: InitKind,
    /// Seed is filled in per run.
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub preset: Option<String>,
    pub output_dir: PathBuf,
    pub mode: Mode,
    pub seeds: Vec<u64>,
    /// Failure probability used by the theory-mode batch sizes.
    pub failure_prob: f64,
    pub task: TaskSpec,
    pub cells: Vec<CellPlan>,
}

/// Every violation found in a configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigErrors(pub Vec<String>);

impl std::fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

pub const PRESETS: &[&str] = &["lemma2-plateau", "augdrop-membership", "table1-desk", "label-preserving"];

fn preset_source(name: &str) -> Option<&'static str> {
    Some(match name {
        "lemma2-plateau" => {
            r#"
seeds = [0, 1, 2, 3, 4]
[task]
bias = "label_mixing"
delta = 0.4
[[cell]]
name = "augmented-0.1"
scheme = "augmented"
delta = 0.1
[[cell]]
name = "augmented-0.2"
scheme = "augmented"
delta = 0.2
[[cell]]
name = "augmented-0.4"
scheme = "augmented"
delta = 0.4
"#
        }
        "augdrop-membership" => {
            r#"
seeds = [0, 1, 2, 3, 4]
[task]
bias = "label_mixing"
delta = 0.4
[[cell]]
name = "augdrop"
scheme = "augdrop"
"#
        }
        "table1-desk" => {
            r#"
seeds = [0, 1, 2, 3, 4]
[task]
bias = "label_mixing"
delta = 0.4
[[cell]]
name = "original"
scheme = "original"
[[cell]]
name = "augmented"
scheme = "augmented"
[[cell]]
name = "augdrop"
scheme = "augdrop"
[[cell]]
name = "mixloss"
scheme = "mixloss"
[[cell]]
name = "wemix"
scheme = "wemix"
"#
        }
        "label-preserving" => {
            r#"
seeds = [0, 1, 2, 3, 4]
[task]
bias = "input_shift"
delta = 0.2
[[cell]]
name = "augmented-0.05"
scheme = "augmented"
delta = 0.05
[[cell]]
name = "augmented-0.2"
scheme = "augmented"
delta = 0.2
[[cell]]
name = "augdrop-0.05"
scheme = "augdrop"
delta = 0.05
[[cell]]
name = "augdrop-0.2"
scheme = "augdrop"
delta = 0.2
"#
        }
        _ => return None,
    })
}

/// Reads and validates a configuration file.
pub fn validate_config(path: &Path) -> Result<ExperimentPlan, ConfigErrors> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigErrors(vec![format!("cannot read {}: {e}", path.display())]))?;
    parse_config(&text)
}

/// Parses configuration text, merging it over a preset when one is named.
pub fn parse_config(text: &str) -> Result<ExperimentPlan, ConfigErrors> {
    let user: Table = text.parse().map_err(|e: toml::de::Error| ConfigErrors(vec![format!("not valid TOML: {e}")]))?;
    let mut errs = Vec::new();
    let mut root = Table::new();
    let preset = match user.get("preset") {
        Some(Value::String(name)) => match preset_source(name) {
            Some(src) => {
                root = src.parse().expect("built-in presets parse");
                Some(name.clone())
            }
            None => {
                errs.push(format!("unknown preset \"{name}\" (known: {})", PRESETS.join(", ")));
                None
            }
        },
        Some(_) => {
            errs.push("preset must be a string".into());
            None
        }
        None => None,
    };
    for (k, v) in user {
        match (k.as_str(), v, root.get_mut(&k)) {
            ("task" | "defaults", Value::Table(t), Some(Value::Table(base))) => base.extend(t),
            (_, v, _) => {
                root.insert(k, v);
            }
        }
    }
    let plan = build_plan(&root, preset, &mut errs);
    match plan {
        Some(p) if errs.is_empty() => Ok(p),
        _ => Err(ConfigErrors(errs)),
    }
}

fn check_keys(t: &Table, allowed: &[&str], ctx: &str, errs: &mut Vec<String>) {
    for k in t.keys() {
        if !allowed.contains(&k.as_str()) {
            errs.push(format!("unknown key \"{k}\" in {ctx}"));
        }
    }
}

fn as_f64(v: &Value) -> Option<f64> {
    match v {
        Value::Float(f) => Some(*f),
        Value::Integer(i) => Some(*i as f64),
        _ => None,
    }
}

fn get_f64(t: &Table, key: &str, ctx: &str, errs: &mut Vec<String>) -> Option<f64> {
    let v = t.get(key)?;
    let out = as_f64(v);
    if out.is_none() {
        errs.push(format!("{ctx}.{key} must be a number"));
    }
    out
}

fn get_usize(t: &Table, key: &str, ctx: &str, errs: &mut Vec<String>) -> Option<usize> {
    match t.get(key)? {
        Value::Integer(i) if *i >= 0 => Some(*i as usize),
        _ => {
            errs.push(format!("{ctx}.{key} must be a nonnegative integer"));
            None
        }
    }
}

fn get_str<'a>(t: &'a Table, key: &str, ctx: &str, errs: &mut Vec<String>) -> Option<&'a str> {
    match t.get(key)? {
        Value::String(s) => Some(s),
        _ => {
            errs.push(format!("{ctx}.{key} must be a string"));
            None
        }
    }
}

fn build_plan(root: &Table, preset: Option<String>, errs: &mut Vec<String>) -> Option<ExperimentPlan> {
    check_keys(root, TOP_KEYS, "the top level", errs);
    let output_dir = match (get_str(root, "output_dir", "", errs), &preset) {
        (Some(s), _) => Some(PathBuf::from(s)),
        (None, Some(p)) if !root.contains_key("output_dir") => Some(PathBuf::from("runs").join(p)),
        (None, None) if !root.contains_key("output_dir") => {
            errs.push("missing required key \"output_dir\"".into());
            None
        }
        _ => None,
    };
    let mode = match get_str(root, "mode", "", errs) {
        None | Some("practical") => Mode::Practical,
        Some("theory") => Mode::Theory,
        Some(other) => {
            errs.push(format!("mode must be \"practical\" or \"theory\", got \"{other}\""));
            Mode::Practical
        }
    };
    let seeds = match root.get("seeds") {
        None => {
            errs.push("missing required key \"seeds\"".into());
            None
        }
        Some(Value::Array(a)) => {
            let s: Option<Vec<u64>> = a
                .iter()
                .map(|v| match v {
                    Value::Integer(i) if *i >= 0 => Some(*i as u64),
                    _ => None,
                })
                .collect();
            match s {
                Some(s) if !s.is_empty() => Some(s),
                Some(_) => {
                    errs.push("seeds must list at least one seed".into());
                    None
                }
                None => {
                    errs.push("seeds must be nonnegative integers".into());
                    None
                }
            }
        }
        Some(_) => {
            errs.push("seeds must be a list of integers".into());
            None
        }
    };
    let failure_prob = get_f64(root, "failure_prob", "", errs).unwrap_or(0.05);
    if !(failure_prob > 0.0 && failure_prob < 1.0) {
        errs.push("failure_prob must lie in (0,1)".into());
    }
    let task = match root.get("task") {
        Some(Value::Table(t)) => parse_task(t, errs),
        Some(_) => {
            errs.push("task must be a table".into());
            None
        }
        None => {
            errs.push("missing required table \"task\"".into());
            None
        }
    };
    let defaults = match root.get("defaults") {
        Some(Value::Table(t)) => {
            check_keys(t, SETTING_KEYS, "defaults", errs);
            t.clone()
        }
        Some(_) => {
            errs.push("defaults must be a table".into());
            Table::new()
        }
        None => Table::new(),
    };
    let cells = match root.get("cell") {
        Some(Value::Array(a)) if !a.is_empty() => {
            let mut out = Vec::new();
            for (i, v) in a.iter().enumerate() {
                let ctx = format!("cell[{i}]");
                match v {
                    Value::Table(t) => {
                        if let Some(c) = parse_cell(t, &defaults, task.as_ref(), &ctx, errs) {
                            out.push(c);
                        }
                    }
                    _ => errs.push(format!("{ctx} must be a table")),
                }
            }
            let mut names: Vec<&str> = out.iter().map(|c: &CellPlan| c.name.as_str()).collect();
            names.sort_unstable();
            for w in names.windows(2) {
                if w[0] == w[1] {
                    errs.push(format!("duplicate cell name \"{}\"", w[0]));
                }
            }
            Some(out)
        }
        Some(_) => {
            errs.push("cell must be a non-empty array of tables".into());
            None
        }
        None => {
            errs.push("missing required table array \"cell\"".into());
            None
        }
    };
    Some(ExperimentPlan {
        preset,
        output_dir: output_dir?,
        mode,
        seeds: seeds?,
        failure_prob,
        task: task?,
        cells: cells?,
    })
}

fn parse_task(t: &Table, errs: &mut Vec<String>) -> Option<TaskSpec> {
    check_keys(t, TASK_KEYS, "task", errs);
    let ctx = "task";
    let base = TaskConfig::canonical(0.0);
    let label_preserving = match get_str(t, "bias", ctx, errs) {
        None | Some("label_mixing") => false,
        Some("input_shift") => true,
        Some(other) => {
            errs.push(format!("task.bias must be \"label_mixing\" or \"input_shift\", got \"{other}\""));
            false
        }
    };
    let delta = get_f64(t, "delta", ctx, errs);
    if delta.is_none() && !t.contains_key("delta") {
        errs.push("missing required key \"task.delta\"".into());
    }
    let dim = get_usize(t, "dim", ctx, errs).unwrap_or(base.dim);
    let classes = get_usize(t, "classes", ctx, errs).unwrap_or(base.classes);
    let arch = match get_str(t, "arch", ctx, errs) {
        None | Some("softmax_linear") => Arch::SoftmaxLinear { dim, classes },
        Some("mlp") => Arch::Mlp {
            dim,
            hidden: get_usize(t, "hidden", ctx, errs).unwrap_or(16),
            classes,
        },
        Some(other) => {
            errs.push(format!("task.arch must be \"softmax_linear\" or \"mlp\", got \"{other}\""));
            Arch::SoftmaxLinear { dim, classes }
        }
    };
    if let Err(e) = arch.validate() {
        errs.push(format!("task: {e}"));
    }
    let source = match get_str(t, "source", ctx, errs) {
        None | Some("fresh") => SourceKind::Fresh,
        Some("pool") => SourceKind::Pool,
        Some("mixup") => SourceKind::Mixup {
            k: get_usize(t, "k", ctx, errs).unwrap_or(2),
            alpha: get_f64(t, "alpha", ctx, errs).unwrap_or(1.0),
        },
        Some("contrast") => SourceKind::Contrast {
            lo: get_f64(t, "lo", ctx, errs).unwrap_or(0.1),
            hi: get_f64(t, "hi", ctx, errs).unwrap_or(1.9),
        },
        Some(other) => {
            errs.push(format!("task.source must be one of fresh, pool, mixup, contrast; got \"{other}\""));
            SourceKind::Fresh
        }
    };
    let spec = TaskSpec {
        label_preserving,
        delta: delta.unwrap_or(0.0),
        dim,
        classes,
        n_train: get_usize(t, "n_train", ctx, errs).unwrap_or(base.n_train),
        n_aug: get_usize(t, "n_aug", ctx, errs).unwrap_or(base.n_aug),
        n_eval: get_usize(t, "n_eval", ctx, errs).unwrap_or(base.n_eval),
        teacher_scale: get_f64(t, "teacher_scale", ctx, errs).unwrap_or(base.teacher_scale),
        curvature: get_f64(t, "curvature", ctx, errs).unwrap_or(1.5),
        arch,
        source,
    };
    if let Err(e) = spec.config(spec.delta).validate() {
        errs.push(format!("task: {e}"));
    }
    delta.map(|_| spec)
}

fn parse_cell(t: &Table, defaults: &Table, task: Option<&TaskSpec>, ctx: &str, errs: &mut Vec<String>) -> Option<CellPlan> {
    let mut allowed: Vec<&str> = SETTING_KEYS.to_vec();
    allowed.extend_from_slice(CELL_ONLY_KEYS);
    check_keys(t, &allowed, ctx, errs);
    let mut s = defaults.clone();
    s.extend(t.iter().map(|(k, v)| (k.clone(), v.clone())));
    let scheme_name = get_str(&s, "scheme", ctx, errs);
    if scheme_name.is_none() && !s.contains_key("scheme") {
        errs.push(format!("missing required key \"{ctx}.scheme\""));
    }
    let name = get_str(&s, "name", ctx, errs).or(scheme_name).unwrap_or("").to_string();
    let delta = get_f64(&s, "delta", ctx, errs).or(task.map(|t| t.delta)).unwrap_or(0.0);
    if let Some(task) = task {
        if let Err(e) = task.config(delta).validate() {
            errs.push(format!("{ctx}: {e}"));
        }
    }
    let iters = get_usize(&s, "iters", ctx, errs).unwrap_or(3000);
    let batch = get_usize(&s, "batch", ctx, errs).unwrap_or(32);
    let aug_batch = get_usize(&s, "aug_batch", ctx, errs).unwrap_or(32);
    let lr = get_f64(&s, "lr", ctx, errs).unwrap_or(0.05);
    let lr2 = get_f64(&s, "lr2", ctx, errs).unwrap_or(lr);
    let momentum = get_f64(&s, "momentum", ctx, errs).unwrap_or(0.9);
    let weight_decay = get_f64(&s, "weight_decay", ctx, errs).unwrap_or(5e-4);
    let decay = get_f64(&s, "decay", ctx, errs).unwrap_or(0.1);
    let schedule = match get_str(&s, "schedule", ctx, errs) {
        None | Some("milestones") => {
            let at = match s.get("milestones") {
                None => vec![0.3, 0.6, 0.9],
                Some(Value::Array(a)) => a.iter().filter_map(as_f64).collect(),
                Some(_) => {
                    errs.push(format!("{ctx}.milestones must be a list of fractions"));
                    vec![]
                }
            };
            LrSchedule::Milestones { decay, at }
        }
        Some("constant") => LrSchedule::Constant,
        Some("step") => LrSchedule::Step {
            decay,
            every: get_usize(&s, "every", ctx, errs).unwrap_or(1000),
        },
        Some(other) => {
            errs.push(format!("{ctx}.schedule must be constant, step or milestones; got \"{other}\""));
            LrSchedule::Constant
        }
    };
    let opt = |lr| StageOpt {
        lr,
        momentum,
        weight_decay,
        schedule: schedule.clone(),
    };
    let (stage1, stage2) = (opt(lr), opt(lr2));
    let frac = get_f64(&s, "drop_fraction", ctx, errs).unwrap_or(0.8);
    if !(0.0..=1.0).contains(&frac) {
        errs.push(format!("{ctx}.drop_fraction must lie in [0,1]"));
    }
    let t1 = get_usize(&s, "t1", ctx, errs).unwrap_or((frac * iters as f64).round() as usize);
    let t2 = get_usize(&s, "t2", ctx, errs).unwrap_or(iters.saturating_sub(t1));
    let correction = match get_str(&s, "correction", ctx, errs) {
        None | Some("ball_simplex") => CorrectionSet::BallSimplex,
        Some("ball") => CorrectionSet::Ball,
        Some(other) => {
            errs.push(format!("{ctx}.correction must be \"ball\" or \"ball_simplex\", got \"{other}\""));
            CorrectionSet::BallSimplex
        }
    };
    let lambda = get_f64(&s, "lambda", ctx, errs).unwrap_or(0.1);
    if !(lambda > 0.0 && lambda <= 1.0) {
        errs.push("lambda out of (0,1]".into());
    }
    let default_dy = if task.is_some_and(|t| t.label_preserving) { 0.0 } else { delta };
    let delta_y = get_f64(&s, "delta_y", ctx, errs).unwrap_or(default_dy);
    let m0 = get_usize(&s, "m0", ctx, errs).unwrap_or(aug_batch);
    let mix = MixWeights {
        lambda,
        delta_y,
        m0,
        correction,
    };
    let init = match get_str(&s, "init", ctx, errs) {
        None | Some("zeros") => InitKind::Zeros,
        Some("random") => InitKind::Random {
            scale: get_f64(&s, "init_scale", ctx, errs).unwrap_or(0.1),
        },
        Some(other) => {
            errs.push(format!("{ctx}.init must be \"zeros\" or \"random\", got \"{other}\""));
            InitKind::Zeros
        }
    };
    let scheme = match scheme_name? {
        "original" => Scheme::Original { iters },
        "augmented" => Scheme::Augmented { iters },
        "augdrop" => Scheme::AugDrop { t1, t2 },
        "mixloss" => Scheme::MixLoss { iters, mix },
        "wemix" => Scheme::WeMix { t1, t2, mix },
        other => {
            errs.push(format!("{ctx}.scheme must be original, augmented, augdrop, mixloss or wemix; got \"{other}\""));
            return None;
        }
    };
    let config = TrainConfig {
        scheme,
        batch,
        aug_batch,
        stage1,
        stage2,
        seed: 0,
        resolved: BTreeMap::new(),
        snapshot_every: 0,
    };
    if let Err(e) = config.validate() {
        let msg = e.to_string();
        // the mixing-weight range is reported once above
        if !msg.contains("lambda") {
            errs.push(format!("{ctx}: {msg}"));
        }
    }
    Some(CellPlan {
        name,
        delta,
        init,
        config,
    })
}
