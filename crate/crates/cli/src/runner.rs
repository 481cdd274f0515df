//! Stage execution with resume: a stage is skipped when the manifest
//! already records its hash and its outputs are on disk.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Component, Path, PathBuf};
use std::rc::Rc;

use dprobe_core::data::{
    compose_subsets, load_dataset, load_idx, save_dataset, synth_grouped_domains, synth_mnist_color, synth_mnist_m,
    AugmentSpec, LabeledDataset, PatchSource,
};
use dprobe_core::distill::{train, write_epoch_csv};
use dprobe_core::nn::{load_checkpoint, save_checkpoint, Mode, Model, TAP_CONV1, TAP_CONV2, TAP_LOGITS, TAP_PENULTIMATE};
use dprobe_core::probes::{
    accuracy, agreement_score, cam_preference, cka_matrix, cka_report, consensus_score, crop_pair, fooling_rates,
    group_accuracy, identity_pair, jitter_pair, shape_bias, shift_pair, PairGenerator, ProbeReport,
};
use dprobe_core::rng::derive_seed;
use serde::{Deserialize, Serialize};

use crate::config::{
    canonical_hash, sha256_hex, DatasetDef, ExperimentConfig, Generator, LoadedConfig, ProbeKind, Split, Stage,
    StageKind, SynthDomain,
};
use crate::error::{CliError, Result};
use crate::report::emit_report;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub kind: Option<StageKind>,
    pub hash: String,
    /// Paths relative to the run directory.
    pub outputs: Vec<String>,
    /// Process CPU time (user + system) the stage took when it last ran.
    #[serde(default)]
    pub cpu_seconds: f64,
}

/// CPU time consumed so far by this process, in seconds.
fn process_cpu_seconds() -> f64 {
    let mut usage = std::mem::MaybeUninit::<libc::rusage>::uninit();
    // SAFETY: getrusage fills the struct completely when it returns 0.
    let usage = unsafe {
        if libc::getrusage(libc::RUSAGE_SELF, usage.as_mut_ptr()) != 0 {
            return 0.0;
        }
        usage.assume_init()
    };
    let secs = |t: libc::timeval| t.tv_sec as f64 + t.tv_usec as f64 * 1e-6;
    secs(usage.ru_utime) + secs(usage.ru_stime)
}

/// `manifest.json`: the configuration hash and seed of the last run in a
/// directory, and the hash and outputs of every completed stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub stages: BTreeMap<String, StageRecord>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Option<Manifest>> {
        let path = dir.join(MANIFEST);
        match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| dprobe_core::Error::Format {
                    path,
                    reason: e.to_string(),
                }
                .into()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(CliError::io(path, e)),
        }
    }
}

/// Which stages a command executes. Stages outside the filter are only
/// read from disk when a selected stage needs their output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageFilter {
    All,
    Kind(StageKind),
    Probe(Option<ProbeKind>),
}

impl StageFilter {
    fn selects(self, st: &Stage) -> bool {
        match self {
            StageFilter::All => true,
            StageFilter::Kind(k) => st.kind == k,
            StageFilter::Probe(p) => st.kind == StageKind::Probe && p.is_none_or(|p| st.probe == Some(p)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub filter: StageFilter,
    /// Re-run stages even when they are up to date.
    pub force: bool,
}

impl RunOptions {
    pub fn new(config: impl Into<PathBuf>) -> Self {
        RunOptions {
            config: config.into(),
            out: None,
            seed: None,
            filter: StageFilter::All,
            force: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub config_hash: String,
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
}

/// `runs/<config file stem>`.
pub fn default_out_dir(config: &Path) -> PathBuf {
    let stem = config.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
    PathBuf::from("runs").join(stem)
}

/// A run directory. Every write goes through [`OutDir::file`], which only
/// accepts plain relative paths, so nothing lands outside the directory.
struct OutDir(PathBuf);

impl OutDir {
    fn file(&self, rel: &str) -> Result<PathBuf> {
        let p = Path::new(rel);
        if !p.components().all(|c| matches!(c, Component::Normal(_))) {
            return Err(CliError::Input(format!("refusing to write outside the run directory: {rel}")));
        }
        let full = self.0.join(p);
        if let Some(parent) = full.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        Ok(full)
    }

    fn dir(&self, rel: &str) -> Result<PathBuf> {
        let path = self.file(rel)?;
        fs::create_dir_all(&path).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    fn write(&self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.file(rel)?;
        let tmp = self.file(&format!("{rel}.tmp"))?;
        fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| CliError::io(&path, e))
    }
}

struct Datasets<'c> {
    cfg: &'c LoadedConfig,
    cache: HashMap<String, Rc<LabeledDataset>>,
    /// Names that stages read directly; only these are cached.
    keep: BTreeSet<String>,
}

impl<'c> Datasets<'c> {
    fn def(&self, name: &str) -> &'c DatasetDef {
        &self.cfg.config.datasets[name]
    }

    fn get(&mut self, name: &str) -> Result<Rc<LabeledDataset>> {
        if let Some(d) = self.cache.get(name) {
            return Ok(Rc::clone(d));
        }
        let ds = Rc::new(self.build(name)?);
        if self.keep.contains(name) {
            self.cache.insert(name.to_string(), Rc::clone(&ds));
        }
        Ok(ds)
    }

    fn owned(&mut self, name: &str) -> Result<LabeledDataset> {
        Ok(Rc::unwrap_or_clone(self.get(name)?))
    }

    fn build(&mut self, name: &str) -> Result<LabeledDataset> {
        let def = self.def(name);
        log::info!("building dataset `{name}`");
        let missing = |p: &Path| CliError::Input(format!("dataset `{name}`: {} not found", p.display()));
        let mut ds = if let Some(m) = &def.mnist {
            let dir = self.cfg.resolve(&m.dir);
            let prefix = match m.split {
                Split::Train => "train",
                Split::Test => "t10k",
            };
            let images = dir.join(format!("{prefix}-images-idx3-ubyte"));
            let labels = dir.join(format!("{prefix}-labels-idx1-ubyte"));
            for p in [&images, &labels] {
                if !p.exists() {
                    return Err(CliError::Input(format!(
                        "dataset `{name}`: {} not found (scripts/fetch_mnist.sh downloads MNIST)",
                        p.display()
                    )));
                }
            }
            load_idx(images, labels)?
        } else if let Some(idx) = &def.idx {
            let (images, labels) = (self.cfg.resolve(&idx.images), self.cfg.resolve(&idx.labels));
            for p in [&images, &labels] {
                if !p.exists() {
                    return Err(missing(p));
                }
            }
            load_idx(images, labels)?
        } else if let Some(s) = &def.saved {
            let dir = self.cfg.resolve(&s.dir);
            let images = dir.join(format!("{}-images.idx", s.name));
            if !images.exists() {
                return Err(missing(&images));
            }
            load_dataset(dir, &s.name)?
        } else if let Some(s) = &def.synth {
            let src = self.get(&s.from)?;
            let patches = match &s.patches {
                PatchSource::Directory(d) => {
                    let d = self.cfg.resolve(d);
                    if !d.is_dir() {
                        return Err(missing(&d));
                    }
                    PatchSource::Directory(d)
                }
                p => p.clone(),
            };
            match s.domain {
                SynthDomain::Color => synth_mnist_color(&src, s.seed)?,
                SynthDomain::MnistM => synth_mnist_m(&src, &patches, s.seed)?,
                SynthDomain::Grouped => synth_grouped_domains(&src, &patches, s.seed)?,
            }
        } else if let Some(c) = &def.compose {
            compose_subsets(&*self.get(&c.from)?, &c.counts, c.seed)?
        } else if let Some(parts) = &def.concat {
            let owned = parts.iter().map(|p| self.owned(p)).collect::<Result<Vec<_>>>()?;
            let channels = def
                .channels
                .unwrap_or_else(|| owned.iter().map(|d| d.channels()).max().unwrap_or(1));
            LabeledDataset::concat(owned, channels)?
        } else {
            unreachable!("validated: one source per dataset")
        };
        if let Some([a, b]) = def.slice {
            if b > ds.len() {
                return Err(CliError::Input(format!(
                    "dataset `{name}`: slice end {b} exceeds its {} items",
                    ds.len()
                )));
            }
            ds = ds.subset(&(a..b).collect::<Vec<_>>());
        }
        if let Some(c) = def.channels.filter(|&c| c != ds.channels()) {
            ds = ds.with_channels(c)?;
        }
        Ok(ds)
    }

    fn retain(&mut self, needed: &BTreeSet<String>) {
        self.cache.retain(|k, _| needed.contains(k));
        self.keep = needed.clone();
    }
}

/// All dataset definitions a set of names depends on, by name.
fn dataset_closure<'a>(cfg: &'a ExperimentConfig, names: &[&'a str]) -> BTreeMap<&'a str, &'a DatasetDef> {
    let mut out = BTreeMap::new();
    let mut todo: Vec<&str> = names.to_vec();
    while let Some(n) = todo.pop() {
        if let Some(def) = cfg.datasets.get(n) {
            if out.insert(n, def).is_none() {
                todo.extend(def.inputs());
            }
        }
    }
    out
}

struct Runner<'c> {
    cfg: &'c LoadedConfig,
    out: OutDir,
    manifest: Manifest,
    stage_hashes: BTreeMap<String, String>,
    models: HashMap<String, Rc<Model>>,
    data: Datasets<'c>,
}

impl<'c> Runner<'c> {
    fn model_path(&self, name: &str) -> Result<PathBuf> {
        if self.cfg.trainers.contains_key(name) {
            return self.out.file(&format!("models/{name}.dprb"));
        }
        let def = &self.cfg.config.models[name];
        Ok(match (&def.checkpoint, &def.run, &def.stage) {
            (Some(p), _, _) => self.cfg.resolve(p),
            (None, Some(run), Some(stage)) => {
                let parent = self.out.0.parent().unwrap_or(Path::new("."));
                parent.join(run).join("models").join(format!("{stage}.dprb"))
            }
            _ => unreachable!("validated model definition"),
        })
    }

    fn model(&mut self, name: &str) -> Result<Rc<Model>> {
        if let Some(m) = self.models.get(name) {
            return Ok(Rc::clone(m));
        }
        let path = self.model_path(name)?;
        if !path.exists() {
            let hint = if self.cfg.trainers.contains_key(name) {
                format!("stage `{name}` has not been run")
            } else {
                "produce it first (for `run = ...` models, run that experiment with the same --out parent)".into()
            };
            return Err(CliError::Input(format!("model `{name}`: {} not found; {hint}", path.display())));
        }
        let mut m = load_checkpoint(&path)?;
        m.set_mode(Mode::Eval);
        let m = Rc::new(m);
        self.models.insert(name.to_string(), Rc::clone(&m));
        Ok(m)
    }

    /// Hash of everything a stage's outputs depend on: its definition, the
    /// root seed, resolved trainer settings, dataset definitions, and the
    /// hashes (or checkpoint digests) of the models it reads.
    fn stage_hash(&self, st: &Stage) -> Result<String> {
        let cfg = &self.cfg.config;
        let datasets = dataset_closure(cfg, &st.dataset_inputs());
        let mut models = BTreeMap::new();
        for m in st.model_inputs() {
            let h = match self.stage_hashes.get(m) {
                Some(h) => h.clone(),
                None => {
                    let path = self.model_path(m)?;
                    let bytes = fs::read(&path).map_err(|e| match e.kind() {
                        std::io::ErrorKind::NotFound => {
                            CliError::Input(format!("model `{m}`: {} not found", path.display()))
                        }
                        _ => CliError::io(&path, e),
                    })?;
                    sha256_hex(&bytes)
                }
            };
            models.insert(m, h);
        }
        let value = serde_json::json!({
            "stage": st,
            "seed": cfg.seed,
            "trainer": self.cfg.trainers.get(&st.name),
            "datasets": datasets,
            "models": models,
        });
        Ok(canonical_hash(&value))
    }

    fn up_to_date(&self, st: &Stage, hash: &str) -> bool {
        self.manifest
            .stages
            .get(&st.name)
            .is_some_and(|r| r.hash == hash && r.outputs.iter().all(|o| self.out.0.join(o).exists()))
    }

    fn save_manifest(&self) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(&self.manifest).expect("manifest serializes");
        self.out.write(MANIFEST, &bytes)
    }

    fn stage_seed(&self, st: &Stage) -> u64 {
        derive_seed(self.cfg.config.seed, &[st.seed_stream])
    }

    fn run_stage(&mut self, index: usize, st: &Stage) -> Result<Vec<String>> {
        match st.kind {
            StageKind::SynthData => {
                let ds = self.data.get(st.data.as_deref().expect("validated"))?;
                save_dataset(&ds, self.out.dir("data")?, &st.name)?;
                let mut outs = vec![
                    format!("data/{}-images.idx", st.name),
                    format!("data/{}-labels.idx", st.name),
                ];
                let sidecar = format!("data/{}-images.idx.json", st.name);
                if self.out.0.join(&sidecar).exists() {
                    outs.push(sidecar);
                }
                Ok(outs)
            }
            StageKind::Train | StageKind::Distill => {
                let mut tc = self.cfg.trainers[&st.name].clone();
                tc.seed = self.stage_seed(st);
                let ds = self.data.get(st.data.as_deref().expect("validated"))?;
                let test = st.test.as_deref().map(|t| self.data.get(t)).transpose()?;
                let teacher = st.teacher.as_deref().map(|t| self.model(t)).transpose()?;
                log::info!(
                    "stage `{}`: {} on {} items for {} epochs",
                    st.name,
                    tc.method.name(),
                    ds.len(),
                    tc.epochs
                );
                let outcome = train(&tc, &ds, teacher.as_deref(), test.as_deref())?;
                let model_rel = format!("models/{}.dprb", st.name);
                let log_rel = format!("logs/{}.csv", st.name);
                save_checkpoint(&outcome.model, self.out.file(&model_rel)?)?;
                write_epoch_csv(&outcome.log, self.out.file(&log_rel)?)?;
                let mut model = outcome.model;
                model.set_mode(Mode::Eval);
                self.models.insert(st.name.clone(), Rc::new(model));
                Ok(vec![model_rel, log_rel])
            }
            StageKind::Probe => self.run_probe(index, st),
        }
    }

    fn run_probe(&mut self, index: usize, st: &Stage) -> Result<Vec<String>> {
        let probe = st.probe.expect("validated");
        let seed = self.stage_seed(st);
        let generator = match st.generator {
            Some(g) => Some(pair_generator(g, st.augment.clone())?),
            None => None,
        };
        let adv = st.adv.clone().unwrap_or_default();
        let taps: Vec<String> = st.taps.clone().unwrap_or_else(|| {
            [TAP_CONV1, TAP_CONV2, TAP_PENULTIMATE, TAP_LOGITS]
                .map(String::from)
                .to_vec()
        });
        let tap = st.tap.clone().unwrap_or_else(|| TAP_CONV2.to_string());
        let limit = st.limit.or((probe == ProbeKind::Cka).then_some(100));
        let mut outputs = Vec::new();
        for (ci, column) in st.columns.iter().enumerate() {
            let full = self.data.get(column)?;
            let ds = match limit {
                Some(n) if n < full.len() => Rc::new(full.take(n)),
                _ => full,
            };
            for (ri, row) in st.rows.iter().enumerate() {
                let model = self.model(row)?;
                log::info!("stage `{}`: {} probe of `{row}` on `{column}`", st.name, probe.name());
                let teacher = st.teacher.as_deref().map(|t| self.model(t)).transpose()?;
                let (mut report, order) = match probe {
                    ProbeKind::Accuracy => (accuracy(&model, &ds)?, vec![]),
                    ProbeKind::Fairness => {
                        let r = group_accuracy(&model, &ds)?;
                        let mut keys: Vec<String> = r.metrics.keys().filter(|k| *k != "overall").cloned().collect();
                        keys.sort_by_key(|k| k.trim_start_matches("group:").parse::<usize>().unwrap_or(usize::MAX));
                        keys.push("overall".into());
                        (r, keys)
                    }
                    ProbeKind::ShapeBias => (shape_bias(&model, &ds)?, vec![]),
                    ProbeKind::Consensus => (consensus_score(teacher.as_deref().expect("validated"), &model, &ds)?, vec![]),
                    ProbeKind::Invariance => (
                        agreement_score(&model, &ds, generator.as_ref().expect("validated"), seed)?,
                        vec![],
                    ),
                    ProbeKind::Cam => {
                        let ind = self.model(st.independent.as_deref().expect("validated"))?;
                        let t = teacher.as_deref().expect("validated");
                        (cam_preference(t, &model, &ind, &ds, &tap)?, vec![])
                    }
                    ProbeKind::Cka => {
                        let t = teacher.as_deref().expect("validated");
                        let tap_refs: Vec<&str> = taps.iter().map(String::as_str).collect();
                        let m = cka_matrix(&model, t, &tap_refs, &tap_refs, ds.images())?;
                        let mut keys = vec!["diagonal".to_string()];
                        for i in 0..taps.len() {
                            for j in 0..taps.len() {
                                keys.push(format!("cka:{i}:{j}"));
                            }
                        }
                        (cka_report(&m, seed), keys)
                    }
                    ProbeKind::Adversarial => {
                        let victims: Vec<(String, Rc<Model>)> = st
                            .victims
                            .iter()
                            .map(|v| Ok((v.clone(), self.model(v)?)))
                            .collect::<Result<_>>()?;
                        let refs: Vec<(&str, &Model)> = victims.iter().map(|(n, m)| (n.as_str(), &**m)).collect();
                        let mut keys = vec!["target".to_string()];
                        keys.extend(st.victims.iter().map(|v| format!("victim:{v}")));
                        (fooling_rates(&model, &refs, &ds, &adv)?, keys)
                    }
                };
                report.config = serde_json::json!({
                    "stage": st.name,
                    "stage_index": index,
                    "probe": probe.name(),
                    "row": row,
                    "row_index": ri,
                    "column": column,
                    "column_index": ci,
                    "columns_in_stage": st.columns.len(),
                    "metric_order": order,
                    "expand": probe.expands_metrics(),
                    "settings": report.config,
                });
                report.seed = seed;
                let stem = format!("{row}@{column}");
                let dir = format!("reports/{}", st.name);
                report.save(self.out.dir(&dir)?, &stem)?;
                outputs.push(format!("{dir}/{stem}.json"));
                outputs.push(format!("{dir}/{stem}.csv"));
            }
        }
        Ok(outputs)
    }
}

fn pair_generator(g: Generator, spec: Option<AugmentSpec>) -> Result<PairGenerator> {
    Ok(match g {
        Generator::Identity => identity_pair(),
        Generator::Jitter => jitter_pair(spec.unwrap_or_else(AugmentSpec::color_jitter))?,
        Generator::Crop => crop_pair(spec.unwrap_or(AugmentSpec {
            crop_scale: 0.08,
            ..AugmentSpec::default()
        }))?,
        Generator::Shift => shift_pair(spec.unwrap_or(AugmentSpec {
            shift_max: 4,
            ..AugmentSpec::default()
        }))?,
    })
}

/// Loads the configuration, runs the selected stages in file order into the
/// output directory, records each completed stage in the manifest, and
/// refreshes the consolidated report when any probe report exists.
pub fn run_experiment(opts: &RunOptions) -> Result<RunSummary> {
    let cfg = LoadedConfig::load(&opts.config, opts.seed)?;
    let out_dir = opts.out.clone().unwrap_or_else(|| default_out_dir(&opts.config));
    fs::create_dir_all(&out_dir).map_err(|e| CliError::io(&out_dir, e))?;
    let mut manifest = Manifest::load(&out_dir)?.unwrap_or_default();
    manifest.config_hash = cfg.hash.clone();
    manifest.seed = cfg.config.seed;
    let mut runner = Runner {
        cfg: &cfg,
        out: OutDir(out_dir.clone()),
        manifest,
        stage_hashes: BTreeMap::new(),
        models: HashMap::new(),
        data: Datasets {
            cfg: &cfg,
            cache: HashMap::new(),
            keep: BTreeSet::new(),
        },
    };
    runner.out.write("config.toml", cfg.text.as_bytes())?;
    runner.save_manifest()?;
    let stages = &cfg.config.stages;
    let selected: Vec<bool> = stages.iter().map(|s| opts.filter.selects(s)).collect();
    let mut summary = RunSummary {
        out_dir: out_dir.clone(),
        config_hash: cfg.hash.clone(),
        executed: vec![],
        skipped: vec![],
    };
    for (i, st) in stages.iter().enumerate() {
        let hash = match runner.stage_hash(st) {
            Ok(h) => h,
            // Unselected stages only matter through their hash; an input
            // that is missing now surfaces if a selected stage needs it.
            Err(_) if !selected[i] => continue,
            Err(e) => return Err(e),
        };
        runner.stage_hashes.insert(st.name.clone(), hash.clone());
        if !selected[i] {
            continue;
        }
        if !opts.force && runner.up_to_date(st, &hash) {
            log::info!("stage `{}` is up to date", st.name);
            summary.skipped.push(st.name.clone());
            continue;
        }
        let needed: BTreeSet<String> = stages[i..]
            .iter()
            .zip(&selected[i..])
            .filter(|(_, &sel)| sel)
            .flat_map(|(s, _)| s.dataset_inputs())
            .map(String::from)
            .collect();
        runner.data.retain(&needed);
        let started = process_cpu_seconds();
        let outputs = runner.run_stage(i, st)?;
        runner.manifest.stages.insert(
            st.name.clone(),
            StageRecord {
                kind: Some(st.kind),
                hash,
                outputs,
                cpu_seconds: process_cpu_seconds() - started,
            },
        );
        runner.save_manifest()?;
        summary.executed.push(st.name.clone());
    }
    if out_dir.join("reports").is_dir() {
        emit_report(&out_dir)?;
    }
    Ok(summary)
}

/// Loads a probe report written by a run.
pub fn load_report(run_dir: &Path, stage: &str, row: &str, column: &str) -> Result<ProbeReport> {
    Ok(ProbeReport::load(run_dir.join("reports").join(stage), &format!("{row}@{column}"))?)
}
