//! Experiment configuration: a TOML file with a mandatory root `seed`,
//! named `[datasets.*]` and `[models.*]` tables, and an ordered list of
//! `[[stage]]` tables executed top to bottom.
//!
//! Relative paths inside the file resolve against the file's directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use dprobe_core::data::{AugmentMode, AugmentSpec, PatchSource};
use dprobe_core::distill::{DistillConfig, Method};
use dprobe_core::probes::AdvConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub datasets: BTreeMap<String, DatasetDef>,
    #[serde(default)]
    pub models: BTreeMap<String, ModelDef>,
    #[serde(default, rename = "stage")]
    pub stages: Vec<Stage>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthDomain {
    Color,
    MnistM,
    Grouped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MnistSource {
    pub dir: PathBuf,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSource {
    pub images: PathBuf,
    pub labels: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SavedSource {
    pub dir: PathBuf,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSource {
    pub from: String,
    pub domain: SynthDomain,
    pub seed: u64,
    #[serde(default = "procedural")]
    pub patches: PatchSource,
}

fn procedural() -> PatchSource {
    PatchSource::Procedural
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComposeSource {
    pub from: String,
    pub counts: Vec<usize>,
    pub seed: u64,
}

/// Exactly one source (`mnist`, `idx`, `saved`, `synth`, `concat`,
/// `compose`), then optionally `slice = [start, end)` and `channels`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetDef {
    pub mnist: Option<MnistSource>,
    pub idx: Option<IdxSource>,
    pub saved: Option<SavedSource>,
    pub synth: Option<SynthSource>,
    pub concat: Option<Vec<String>>,
    pub compose: Option<ComposeSource>,
    pub slice: Option<[usize; 2]>,
    pub channels: Option<usize>,
}

impl DatasetDef {
    /// Datasets this one is built from.
    pub fn inputs(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        if let Some(s) = &self.synth {
            out.push(&s.from);
        }
        if let Some(c) = &self.compose {
            out.push(&c.from);
        }
        if let Some(parts) = &self.concat {
            out.extend(parts.iter().map(String::as_str));
        }
        out
    }

    fn source_count(&self) -> usize {
        [
            self.mnist.is_some(),
            self.idx.is_some(),
            self.saved.is_some(),
            self.synth.is_some(),
            self.concat.is_some(),
            self.compose.is_some(),
        ]
        .iter()
        .filter(|&&b| b)
        .count()
    }
}

/// A model produced outside this run: a checkpoint file, or a stage of a
/// sibling run (`<out>/../<run>/models/<stage>.dprb`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDef {
    pub checkpoint: Option<PathBuf>,
    pub run: Option<String>,
    pub stage: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageKind {
    SynthData,
    Train,
    Distill,
    Probe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeKind {
    Accuracy,
    Adversarial,
    Invariance,
    Consensus,
    Cam,
    Cka,
    ShapeBias,
    Fairness,
}

impl ProbeKind {
    pub const ALL: [ProbeKind; 8] = [
        ProbeKind::Accuracy,
        ProbeKind::Adversarial,
        ProbeKind::Invariance,
        ProbeKind::Consensus,
        ProbeKind::Cam,
        ProbeKind::Cka,
        ProbeKind::ShapeBias,
        ProbeKind::Fairness,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProbeKind::Accuracy => "accuracy",
            ProbeKind::Adversarial => "adversarial",
            ProbeKind::Invariance => "invariance",
            ProbeKind::Consensus => "consensus",
            ProbeKind::Cam => "cam",
            ProbeKind::Cka => "cka",
            ProbeKind::ShapeBias => "shape-bias",
            ProbeKind::Fairness => "fairness",
        }
    }

    /// Whether each report contributes one cell per metric rather than its
    /// summary alone.
    pub fn expands_metrics(self) -> bool {
        matches!(self, ProbeKind::Adversarial | ProbeKind::Cka | ProbeKind::Fairness)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    Identity,
    Jitter,
    Crop,
    Shift,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub name: String,
    pub kind: StageKind,
    /// Training set (train, distill) or the dataset to write (synth-data).
    pub data: Option<String>,
    /// Optional held-out set evaluated after every epoch.
    pub test: Option<String>,
    /// Teacher for distill; reference model for consensus, cam and cka.
    pub teacher: Option<String>,
    /// Training settings layered over the preset of `config.method`.
    pub config: Option<toml::Table>,
    /// The trainer seed is derived from the root seed and this stream id.
    #[serde(default)]
    pub seed_stream: u64,

    pub probe: Option<ProbeKind>,
    #[serde(default)]
    pub rows: Vec<String>,
    #[serde(default)]
    pub columns: Vec<String>,
    #[serde(default)]
    pub victims: Vec<String>,
    pub independent: Option<String>,
    pub adv: Option<AdvConfig>,
    pub generator: Option<Generator>,
    pub augment: Option<AugmentSpec>,
    pub taps: Option<Vec<String>>,
    pub tap: Option<String>,
    /// Evaluate only the first `limit` items of each column dataset.
    pub limit: Option<usize>,
}

impl Stage {
    /// Model names this stage reads.
    pub fn model_inputs(&self) -> Vec<&str> {
        let mut out: Vec<&str> = self.teacher.iter().map(String::as_str).collect();
        if self.kind == StageKind::Probe {
            out.extend(self.rows.iter().map(String::as_str));
            out.extend(self.victims.iter().map(String::as_str));
            out.extend(self.independent.iter().map(String::as_str));
        }
        out
    }

    /// Dataset names this stage reads directly.
    pub fn dataset_inputs(&self) -> Vec<&str> {
        let mut out: Vec<&str> = self.data.iter().chain(&self.test).map(String::as_str).collect();
        out.extend(self.columns.iter().map(String::as_str));
        out
    }
}

/// A parsed, validated configuration plus everything resolved from it.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    /// Directory relative paths resolve against.
    pub base_dir: PathBuf,
    /// Trainer settings per train/distill stage, by stage name.
    pub trainers: BTreeMap<String, DistillConfig>,
    /// SHA-256 of the canonical JSON form of the configuration.
    pub hash: String,
    pub text: String,
}

fn valid_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Canonical hash of a configuration value: keys sorted, formatting and
/// comments ignored, every value significant.
pub fn canonical_hash(value: &serde_json::Value) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("json values always serialize"))
}

fn merge(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn trainer_config(stage: &Stage, index: usize) -> Result<DistillConfig> {
    let path = format!("stage[{index}].config");
    let table = stage.config.clone().unwrap_or_default();
    let overlay = serde_json::to_value(&table).map_err(|e| CliError::config(&path, e))?;
    if overlay.get("seed").is_some() {
        return Err(CliError::config(
            format!("{path}.seed"),
            "trainer seeds derive from the root seed; set `seed_stream` on the stage instead",
        ));
    }
    let default_method = if stage.kind == StageKind::Distill {
        Method::Kl
    } else {
        Method::Independent
    };
    let method = match overlay.get("method") {
        Some(m) => serde_path_to_error::deserialize::<_, Method>(m.clone())
            .map_err(|e| CliError::config(format!("{path}.method"), e.inner()))?,
        None => default_method,
    };
    let mut merged = serde_json::to_value(DistillConfig::preset(method)).expect("preset serializes");
    merge(&mut merged, overlay);
    let cfg: DistillConfig = serde_path_to_error::deserialize(merged)
        .map_err(|e| CliError::config(format!("{path}.{}", e.path()), e.inner()))?;
    cfg.validate().map_err(|e| CliError::config(&path, e))?;
    Ok(cfg)
}

impl LoadedConfig {
    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CliError::Input(format!("config file {} not found", path.display())),
            _ => CliError::io(path, e),
        })?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base_dir, seed_override)
    }

    pub fn parse(text: &str, base_dir: PathBuf, seed_override: Option<u64>) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| CliError::config("(file)", e.message()))?;
        let mut value = serde_json::to_value(&table).map_err(|e| CliError::config("(file)", e))?;
        if let Some(seed) = seed_override {
            // TOML integers are signed 64-bit.
            if i64::try_from(seed).is_err() {
                return Err(CliError::config("seed", format!("{seed} exceeds {}", i64::MAX)));
            }
            value["seed"] = seed.into();
        }
        let config: ExperimentConfig = serde_path_to_error::deserialize(toml_value(&value)?)
            .map_err(|e| CliError::config(e.path().to_string(), e.inner()))?;
        let trainers = validate(&config)?;
        Ok(LoadedConfig {
            hash: canonical_hash(&value),
            config,
            base_dir,
            trainers,
            text: text.to_string(),
        })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

/// Back to TOML so that deserialization sees TOML's own value types (the
/// round trip through JSON is lossless for the types used here).
fn toml_value(v: &serde_json::Value) -> Result<toml::Value> {
    serde_json::from_value(v.clone()).map_err(|e| CliError::config("(file)", e))
}

fn validate(cfg: &ExperimentConfig) -> Result<BTreeMap<String, DistillConfig>> {
    for (name, def) in &cfg.datasets {
        let path = format!("datasets.{name}");
        if !valid_name(name) {
            return Err(CliError::config(path, "names may use only letters, digits, `_` and `-`"));
        }
        if def.source_count() != 1 {
            return Err(CliError::config(
                path,
                "exactly one of mnist, idx, saved, synth, concat, compose is required",
            ));
        }
        for input in def.inputs() {
            if !cfg.datasets.contains_key(input) {
                return Err(CliError::config(path, format!("unknown dataset `{input}`")));
            }
        }
        if let Some(c) = def.channels {
            if c != 1 && c != 3 {
                return Err(CliError::config(format!("{path}.channels"), "must be 1 or 3"));
            }
        }
        if let Some([a, b]) = def.slice {
            if a > b {
                return Err(CliError::config(format!("{path}.slice"), "start exceeds end"));
            }
        }
    }
    check_acyclic(cfg)?;
    for (name, def) in &cfg.models {
        let path = format!("models.{name}");
        if !valid_name(name) {
            return Err(CliError::config(path, "names may use only letters, digits, `_` and `-`"));
        }
        match (&def.checkpoint, &def.run, &def.stage) {
            (Some(_), None, None) => {}
            (None, Some(run), Some(stage)) if valid_name(run) && valid_name(stage) => {}
            _ => {
                return Err(CliError::config(
                    path,
                    "give either `checkpoint`, or both `run` and `stage` (plain names)",
                ))
            }
        }
    }
    let mut models: BTreeSet<&str> = cfg.models.keys().map(String::as_str).collect();
    let mut stage_names = BTreeSet::new();
    let mut trainers = BTreeMap::new();
    for (i, st) in cfg.stages.iter().enumerate() {
        let path = format!("stage[{i}]");
        if !valid_name(&st.name) {
            return Err(CliError::config(
                format!("{path}.name"),
                "names may use only letters, digits, `_` and `-`",
            ));
        }
        if !stage_names.insert(st.name.as_str()) || models.contains(st.name.as_str()) {
            return Err(CliError::config(format!("{path}.name"), format!("duplicate name `{}`", st.name)));
        }
        for d in st.dataset_inputs() {
            if !cfg.datasets.contains_key(d) {
                return Err(CliError::config(&path, format!("unknown dataset `{d}`")));
            }
        }
        for m in st.model_inputs() {
            if !models.contains(m) {
                return Err(CliError::config(
                    &path,
                    format!("unknown model `{m}` (models must come from [models] or an earlier stage)"),
                ));
            }
        }
        let require = |field: &str, ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(CliError::config(format!("{path}.{field}"), format!("required for {:?} stages", st.kind)))
            }
        };
        let forbid = |field: &str, present: bool| {
            if present {
                Err(CliError::config(format!("{path}.{field}"), format!("not used by {:?} stages", st.kind)))
            } else {
                Ok(())
            }
        };
        match st.kind {
            StageKind::SynthData => {
                require("data", st.data.is_some())?;
                forbid("config", st.config.is_some())?;
                forbid("probe", st.probe.is_some())?;
            }
            StageKind::Train | StageKind::Distill => {
                require("data", st.data.is_some())?;
                forbid("probe", st.probe.is_some())?;
                let tc = trainer_config(st, i)?;
                if st.kind == StageKind::Train && tc.method.needs_teacher() {
                    return Err(CliError::config(
                        format!("{path}.config.method"),
                        "train stages cannot use a teacher; use kind = \"distill\"",
                    ));
                }
                require("teacher", st.teacher.is_some() || !tc.method.needs_teacher())?;
                forbid("teacher", st.teacher.is_some() && !tc.method.needs_teacher())?;
                trainers.insert(st.name.clone(), tc);
                models.insert(&st.name);
            }
            StageKind::Probe => {
                let probe = st.probe.ok_or_else(|| CliError::config(format!("{path}.probe"), "required"))?;
                forbid("config", st.config.is_some())?;
                require("rows", !st.rows.is_empty())?;
                require("columns", !st.columns.is_empty())?;
                match probe {
                    ProbeKind::Consensus | ProbeKind::Cka => require("teacher", st.teacher.is_some())?,
                    ProbeKind::Cam => {
                        require("teacher", st.teacher.is_some())?;
                        require("independent", st.independent.is_some())?;
                    }
                    ProbeKind::Invariance => require("generator", st.generator.is_some())?,
                    _ => {}
                }
                if let Some(adv) = &st.adv {
                    adv.validate().map_err(|e| CliError::config(format!("{path}.adv"), e))?;
                }
                if let Some(a) = &st.augment {
                    a.validate().map_err(|e| CliError::config(format!("{path}.augment"), e))?;
                }
                if st.limit == Some(0) {
                    return Err(CliError::config(format!("{path}.limit"), "must be >= 1"));
                }
            }
        }
    }
    Ok(trainers)
}

fn check_acyclic(cfg: &ExperimentConfig) -> Result<()> {
    fn visit<'a>(
        cfg: &'a ExperimentConfig,
        name: &'a str,
        stack: &mut Vec<&'a str>,
        done: &mut BTreeSet<&'a str>,
    ) -> Result<()> {
        if done.contains(name) {
            return Ok(());
        }
        if stack.contains(&name) {
            return Err(CliError::config(format!("datasets.{name}"), "dataset definitions form a cycle"));
        }
        stack.push(name);
        for input in cfg.datasets[name].inputs() {
            visit(cfg, input, stack, done)?;
        }
        stack.pop();
        done.insert(name);
        Ok(())
    }
    let mut done = BTreeSet::new();
    for name in cfg.datasets.keys() {
        visit(cfg, name, &mut Vec::new(), &mut done)?;
    }
    Ok(())
}

/// The modes used by a pair generator or training augmentation.
pub fn augment_mode(g: Generator) -> Option<AugmentMode> {
    match g {
        Generator::Identity => None,
        Generator::Jitter => Some(AugmentMode::Jitter),
        Generator::Crop => Some(AugmentMode::Crop),
        Generator::Shift => Some(AugmentMode::Shift),
    }
}
