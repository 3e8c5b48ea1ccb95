//! End-to-end runs driven by one JSON config: generate, warm up, tune,
//! index, evaluate. Each stage reads only the files written by earlier
//! stages plus the config.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::binfile::{hex_hash, sha256, Hash};
use crate::encoder::{warmup_backbone, WarmupConfig, WarmupReport};
use crate::encoder::{Backbone, BackboneConfig, Embedding};
use crate::error::Error;
use crate::promptbank::{BankConfig, InsertionMode, PromptBank};
use crate::prototype::{style_prototypes, PrototypeConfig, PrototypeEncoder};
use crate::retrieval::{build_index, fuse_queries, measure_latency, recall_at_k, Embedder, RankedResult, RetrievalIndex};
use crate::synthdata::{Dataset, DatasetConfig, Split, StyleTag};
use crate::training::{fit, parse_style_word, prototype_table, style_word, trainable_fraction, Task, TrainConfig, TrainReport};

/// Pipeline stage, used to attribute failures and pick exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Config,
    Generate,
    Warmup,
    Train,
    Index,
    Evaluate,
    Ablate,
    Latency,
    GradCheck,
}

impl Stage {
    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Config => 2,
            Stage::Generate => 3,
            Stage::Warmup => 4,
            Stage::Train => 5,
            Stage::Index => 6,
            Stage::Evaluate => 7,
            Stage::Ablate => 8,
            Stage::Latency => 9,
            Stage::GradCheck => 10,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Generate => "generate",
            Stage::Warmup => "warmup",
            Stage::Train => "train",
            Stage::Index => "index",
            Stage::Evaluate => "evaluate",
            Stage::Ablate => "ablate",
            Stage::Latency => "bench-latency",
            Stage::GradCheck => "grad-check",
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{} stage failed: {source}", stage.name())]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

pub type StageResult<T> = std::result::Result<T, StageError>;

trait At<T> {
    fn at(self, stage: Stage) -> StageResult<T>;
}

impl<T> At<T> for crate::Result<T> {
    fn at(self, stage: Stage) -> StageResult<T> {
        self.map_err(|source| StageError { stage, source })
    }
}

/// Queries of one or more styles (fused when several) against a target style.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct EvalTask {
    pub queries: Vec<StyleTag>,
    pub target: StyleTag,
}

impl FromStr for EvalTask {
    type Err = Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        let (q, t) = s
            .split_once('2')
            .ok_or_else(|| Error::InvalidConfig(format!("eval task {s:?} is not of the form A[+B]2TARGET")))?;
        let queries = q.split('+').map(parse_style_word).collect::<crate::Result<Vec<_>>>()?;
        let target = parse_style_word(t)?;
        let distinct: BTreeSet<_> = queries.iter().collect();
        if distinct.len() != queries.len() || queries.contains(&target) {
            return Err(Error::InvalidConfig(format!("eval task {s:?} repeats a style")));
        }
        Ok(Self { queries, target })
    }
}

impl fmt::Display for EvalTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let q: Vec<&str> = self.queries.iter().map(|&s| style_word(s)).collect();
        write!(f, "{}2{}", q.join("+"), style_word(self.target))
    }
}

impl TryFrom<String> for EvalTask {
    type Error = Error;
    fn try_from(s: String) -> crate::Result<Self> {
        s.parse()
    }
}

impl From<EvalTask> for String {
    fn from(t: EvalTask) -> String {
        t.to_string()
    }
}

impl From<Task> for EvalTask {
    fn from(t: Task) -> Self {
        Self {
            queries: vec![t.query],
            target: t.target,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BankSettings {
    pub num_entries: usize,
    pub select_n: usize,
    pub insertion_mode: InsertionMode,
    pub tokens_per_entry: usize,
}

impl Default for BankSettings {
    fn default() -> Self {
        Self {
            num_entries: 10,
            select_n: 4,
            insertion_mode: InsertionMode::Deep,
            tokens_per_entry: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub tasks: Vec<EvalTask>,
    /// Style removed from bank initialization and from every tuning task.
    pub held_out_style: Option<StyleTag>,
    pub latency_repetitions: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tasks: ["sketch2image", "art2image", "lowres2image", "text2image", "text+sketch2image"]
                .iter()
                .map(|t| t.parse().expect("built-in task"))
                .collect(),
            held_out_style: None,
            latency_repetitions: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Global seed, copied into every module config.
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub backbone: BackboneConfig,
    pub warmup: WarmupConfig,
    /// Reuse a saved, already warmed backbone instead of running warmup.
    pub pretrained_backbone: Option<PathBuf>,
    pub prototype_patch_size: usize,
    pub bank: BankSettings,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            dataset: DatasetConfig::default(),
            backbone: BackboneConfig::default(),
            warmup: WarmupConfig::default(),
            pretrained_backbone: None,
            prototype_patch_size: 8,
            bank: BankSettings::default(),
            // Plain SGD at the module default step barely moves the prompts
            // within 30 epochs; the run operating point uses a larger step.
            train: TrainConfig {
                lr: 0.1,
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
            out: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> crate::Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_json(&self) -> crate::Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Copy with the global seed pushed into every module and shared
    /// dimensions made consistent.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.dataset.seed = c.seed;
        c.backbone.seed = c.seed;
        c.warmup.seed = c.seed;
        c.train.seed = c.seed;
        c.backbone.image_size = c.dataset.image_size;
        c.backbone.vocab_size = c.dataset.vocab_size;
        if let Some(s) = c.eval.held_out_style {
            c.train.tasks.retain(|t| t.query != s && t.target != s);
        }
        c
    }

    pub fn validate(&self) -> crate::Result<()> {
        let c = self.resolved();
        c.dataset.validate()?;
        c.backbone.validate()?;
        c.warmup.validate()?;
        c.train.validate()?;
        c.bank_config().validate()?;
        c.prototype_config().validate()?;
        if c.train.tasks.is_empty() {
            return Err(Error::InvalidConfig("no tuning tasks left".into()));
        }
        if c.eval.tasks.is_empty() {
            return Err(Error::InvalidConfig("no evaluation tasks".into()));
        }
        if c.eval.latency_repetitions < 3 {
            return Err(Error::InvalidConfig("latency_repetitions must be >= 3".into()));
        }
        if c.eval.held_out_style.is_some_and(|s| s == StyleTag::Natural) {
            return Err(Error::InvalidConfig("the natural target style cannot be held out".into()));
        }
        Ok(())
    }

    pub fn bank_config(&self) -> BankConfig {
        BankConfig {
            num_entries: self.bank.num_entries,
            select_n: self.bank.select_n,
            layers: self.backbone.layers,
            d: self.backbone.d,
            tokens_per_entry: self.bank.tokens_per_entry,
            insertion_mode: self.bank.insertion_mode,
            seed: self.seed,
        }
    }

    pub fn prototype_config(&self) -> PrototypeConfig {
        PrototypeConfig {
            d: self.backbone.d,
            patch_size: self.prototype_patch_size,
            image_size: self.dataset.image_size,
            vocab_size: self.dataset.vocab_size,
            seed: self.seed,
        }
    }

    /// Hash of the config with machine-specific paths removed.
    pub fn content_hash(&self) -> crate::Result<Hash> {
        let mut c = self.resolved();
        c.out = None;
        c.pretrained_backbone = None;
        Ok(sha256(c.to_json()?.as_bytes()))
    }

    /// Styles whose mean prototype seeds the bank keys, in tag order.
    pub fn init_styles(&self) -> Vec<StyleTag> {
        let c = self.resolved();
        StyleTag::ALL
            .into_iter()
            .filter(|s| c.train.tasks.iter().any(|t| t.query == *s || t.target == *s))
            .collect()
    }
}

impl PrototypeConfig {
    pub fn validate(&self) -> crate::Result<()> {
        PrototypeEncoder::new(self.clone()).map(|_| ())
    }
}

/// File layout of one run directory. Inputs default to files under `root`
/// and may be pointed elsewhere.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub root: PathBuf,
    pub data: PathBuf,
    pub backbone: PathBuf,
    pub bank: PathBuf,
    pub index: PathBuf,
    pub baseline_index: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        let root = root.into();
        Self {
            data: root.join("data"),
            backbone: root.join("backbone.bin"),
            bank: root.join("bank.bin"),
            index: root.join("index.bin"),
            baseline_index: root.join("baseline_index.bin"),
            root,
        }
    }
    pub fn results(&self) -> PathBuf {
        self.root.join("results.json")
    }
    pub fn timings(&self) -> PathBuf {
        self.root.join("timings.json")
    }
    pub fn train_log(&self) -> PathBuf {
        self.root.join("train_log.jsonl")
    }
    pub fn train_report(&self) -> PathBuf {
        self.root.join("train_report.json")
    }
    pub fn warmup_report(&self) -> PathBuf {
        self.root.join("warmup_report.json")
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> crate::Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> crate::Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn stage_generate(cfg: &RunConfig, paths: &RunPaths) -> StageResult<Dataset> {
    let c = cfg.resolved();
    create_dir(&paths.root).at(Stage::Generate)?;
    crate::synthdata::generate_dataset(&c.dataset, &paths.data).at(Stage::Generate)
}

pub fn stage_warmup(cfg: &RunConfig, paths: &RunPaths) -> StageResult<(Backbone, Option<WarmupReport>)> {
    let c = cfg.resolved();
    let (bb, report) = match &c.pretrained_backbone {
        Some(p) => {
            let bb = Backbone::load(p).at(Stage::Warmup)?;
            if bb.config() != &c.backbone {
                return Err(Error::InvalidConfig(format!(
                    "pretrained backbone config {:?} differs from the run config",
                    bb.config()
                )))
                .at(Stage::Warmup);
            }
            (bb, None)
        }
        None => {
            let ds = Dataset::load(&paths.data).at(Stage::Warmup)?;
            let bb = Backbone::new(c.backbone.clone()).at(Stage::Warmup)?;
            let (bb, report) = warmup_backbone(&ds, bb, &c.warmup).at(Stage::Warmup)?;
            write_json(&paths.warmup_report(), &report).at(Stage::Warmup)?;
            (bb, Some(report))
        }
    };
    bb.save(&paths.backbone).at(Stage::Warmup)?;
    Ok((bb, report))
}

/// Builds the initial bank: keys seeded from the mean training-split
/// prototype of every style the tuning tasks touch.
pub fn initial_bank(cfg: &RunConfig, ds: &Dataset, enc: &PrototypeEncoder) -> crate::Result<PromptBank> {
    let c = cfg.resolved();
    let train = ds
        .samples()
        .iter()
        .filter(|s| ds.manifest.split_of(s.class_id, s.instance_id) == Split::Train);
    let protos = style_prototypes(enc, &c.init_styles(), train)?;
    PromptBank::new(c.bank_config(), &protos)
}

pub fn stage_train(cfg: &RunConfig, paths: &RunPaths) -> StageResult<(PromptBank, TrainReport)> {
    let c = cfg.resolved();
    let ds = Dataset::load(&paths.data).at(Stage::Train)?;
    let bb = Backbone::load(&paths.backbone).at(Stage::Train)?;
    let enc = PrototypeEncoder::new(c.prototype_config()).at(Stage::Train)?;
    let mut bank = initial_bank(&c, &ds, &enc).at(Stage::Train)?;
    let protos = prototype_table(&ds, &enc).at(Stage::Train)?;
    let log_path = paths.train_log();
    let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e)).at(Stage::Train)?;
    let mut log = BufWriter::new(file);
    let report = fit(&ds, &protos, &mut bank, &bb, &c.train, Some(&mut log)).at(Stage::Train)?;
    log.flush().map_err(|e| Error::io(&log_path, e)).at(Stage::Train)?;
    bank.save(&paths.bank).at(Stage::Train)?;
    write_json(&paths.train_report(), &report).at(Stage::Train)?;
    Ok((bank, report))
}

fn target_styles(c: &RunConfig) -> Vec<StyleTag> {
    let set: BTreeSet<StyleTag> = c.eval.tasks.iter().map(|t| t.target).collect();
    set.into_iter().collect()
}

/// Builds the prompted index and the no-prompt baseline index over every
/// evaluation target style.
pub fn stage_index(cfg: &RunConfig, paths: &RunPaths) -> StageResult<(RetrievalIndex, RetrievalIndex)> {
    let c = cfg.resolved();
    let ds = Dataset::load(&paths.data).at(Stage::Index)?;
    let bb = Backbone::load(&paths.backbone).at(Stage::Index)?;
    let bank = PromptBank::load(&paths.bank).at(Stage::Index)?;
    let enc = PrototypeEncoder::new(c.prototype_config()).at(Stage::Index)?;
    let targets = target_styles(&c);
    let prompted = Embedder {
        backbone: &bb,
        bank: Some(&bank),
        prototypes: &enc,
    };
    let baseline = Embedder { bank: None, ..prompted };
    let index = build_index(&ds, &prompted, &targets).at(Stage::Index)?;
    let base = build_index(&ds, &baseline, &targets).at(Stage::Index)?;
    index.save(&paths.index).at(Stage::Index)?;
    base.save(&paths.baseline_index).at(Stage::Index)?;
    Ok((index, base))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    pub r_at_1: f64,
    pub r_at_5: f64,
}

/// Which bank entries the queries of a task selected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LookupStats {
    /// Smallest number of distinct entries chosen by any single query.
    pub min_distinct_per_query: usize,
    /// Union of the selected entry ids over all queries.
    pub entries_used: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub num_queries: usize,
    /// Always null here so the file stays byte-stable; wall-clock numbers
    /// go to `timings.json`.
    pub latency_ms: Option<f64>,
    pub baseline: Recall,
    pub held_out: bool,
    pub lookup: Vec<LookupStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceHashes {
    pub config: String,
    pub dataset_manifest: String,
    pub backbone: String,
    pub bank: String,
    pub index: String,
    pub baseline_index: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub tasks: Vec<Task>,
    pub steps: usize,
    pub epoch_joint: Vec<f64>,
    pub backbone_hash_before: String,
    pub backbone_hash_after: String,
    pub backbone_unchanged: bool,
    pub trainable_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Results {
    pub provenance: ProvenanceHashes,
    pub insertion_mode: InsertionMode,
    pub num_entries: usize,
    pub select_n: usize,
    pub held_out_style: Option<StyleTag>,
    pub index_size: usize,
    pub chance_r_at_1: f64,
    pub train: TrainSummary,
    pub tasks: BTreeMap<String, TaskResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub stage_seconds: BTreeMap<String, f64>,
    /// Mean embed + rank milliseconds per query, per task.
    pub latency_ms: BTreeMap<String, f64>,
    pub total_seconds: f64,
}

fn embed_queries(
    ds: &Dataset,
    embedder: &Embedder<'_>,
    task: &EvalTask,
) -> crate::Result<Vec<(u64, u64, Embedding)>> {
    use rayon::prelude::*;
    let anchor = task.queries[0];
    let queries: Vec<_> = ds.split_samples(anchor, Split::Test).collect();
    queries
        .par_iter()
        .map(|q| {
            let parts = task
                .queries
                .iter()
                .map(|&s| embedder.embed(ds.get(s, q.class_id, q.instance_id)))
                .collect::<crate::Result<Vec<_>>>()?;
            let e = if parts.len() == 1 {
                parts.into_iter().next().expect("one part")
            } else {
                fuse_queries(&parts)?
            };
            let qid = ds.sample_id(anchor, q.class_id, q.instance_id);
            let truth = ds.sample_id(task.target, q.class_id, q.instance_id);
            Ok((qid, truth, e))
        })
        .collect()
}

fn recall(
    index: &RetrievalIndex,
    target: StyleTag,
    queries: &[(u64, u64, Embedding)],
) -> crate::Result<Recall> {
    let k = 5.min(index.len());
    let results = queries
        .iter()
        .map(|(qid, _, e)| {
            Ok(RankedResult {
                query_id: *qid,
                hits: index.rank(e.as_slice(), k, Some(target))?,
            })
        })
        .collect::<crate::Result<Vec<_>>>()?;
    let truth: BTreeMap<u64, u64> = queries.iter().map(|(q, t, _)| (*q, *t)).collect();
    Ok(Recall {
        r_at_1: recall_at_k(&results, &truth, 1)?,
        r_at_5: recall_at_k(&results, &truth, k)?,
    })
}

fn lookup_stats(ds: &Dataset, enc: &PrototypeEncoder, bank: &PromptBank, style: StyleTag) -> crate::Result<LookupStats> {
    let mut used = BTreeSet::new();
    let mut min_distinct = usize::MAX;
    for q in ds.split_samples(style, Split::Test) {
        let l = bank.lookup(&enc.query_prototype(q)?)?;
        let distinct: BTreeSet<usize> = l.selected_ids.iter().copied().collect();
        min_distinct = min_distinct.min(distinct.len());
        used.extend(distinct);
    }
    Ok(LookupStats {
        min_distinct_per_query: min_distinct,
        entries_used: used.into_iter().collect(),
    })
}

/// Scores every evaluation task on the held-out (test-split) instances
/// with and without prompts, then writes `results.json` and
/// `timings.json`.
pub fn stage_evaluate(cfg: &RunConfig, paths: &RunPaths) -> StageResult<(Results, BTreeMap<String, f64>)> {
    let c = cfg.resolved();
    let st = Stage::Evaluate;
    let ds = Dataset::load(&paths.data).at(st)?;
    let bb = Backbone::load(&paths.backbone).at(st)?;
    let bank = PromptBank::load(&paths.bank).at(st)?;
    let index = RetrievalIndex::load(&paths.index).at(st)?;
    let base_index = RetrievalIndex::load(&paths.baseline_index).at(st)?;
    let enc = PrototypeEncoder::new(c.prototype_config()).at(st)?;
    let prompted = Embedder {
        backbone: &bb,
        bank: Some(&bank),
        prototypes: &enc,
    };
    let baseline = Embedder { bank: None, ..prompted };
    let manifest = ds.manifest_hash().at(st)?;
    if index.provenance() != &prompted.provenance(manifest) {
        return Err(Error::Provenance("index")).at(st);
    }
    if base_index.provenance() != &baseline.provenance(manifest) {
        return Err(Error::Provenance("baseline index")).at(st);
    }
    let report: TrainReport = {
        let p = paths.train_report();
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e)).at(st)?;
        serde_json::from_str(&text).map_err(Error::from).at(st)?
    };

    let mut tasks = BTreeMap::new();
    let mut latency = BTreeMap::new();
    for task in &c.eval.tasks {
        let q = embed_queries(&ds, &prompted, task).at(st)?;
        let b = embed_queries(&ds, &baseline, task).at(st)?;
        let r = recall(&index, task.target, &q).at(st)?;
        let rb = recall(&base_index, task.target, &b).at(st)?;
        let lookup = task
            .queries
            .iter()
            .map(|&s| lookup_stats(&ds, &enc, &bank, s))
            .collect::<crate::Result<Vec<_>>>()
            .at(st)?;
        let samples: Vec<_> = ds.split_samples(task.queries[0], Split::Test).collect();
        let lat = measure_latency(&index, &prompted, &samples, c.eval.latency_repetitions, 5).at(st)?;
        latency.insert(task.to_string(), lat.embed.mean_ms * task.queries.len() as f64 + lat.rank.mean_ms);
        let held_out = c.eval.held_out_style.is_some_and(|s| task.queries.contains(&s));
        tasks.insert(
            task.to_string(),
            TaskResult {
                r_at_1: r.r_at_1,
                r_at_5: r.r_at_5,
                num_queries: q.len(),
                latency_ms: None,
                baseline: rb,
                held_out,
                lookup,
            },
        );
    }
    let targets = index.records().iter().filter(|r| r.style == StyleTag::Natural).count().max(1);
    let results = Results {
        provenance: ProvenanceHashes {
            config: hex_hash(&c.content_hash().at(st)?),
            dataset_manifest: hex_hash(&manifest),
            backbone: hex_hash(&bb.content_hash()),
            bank: hex_hash(&bank.content_hash()),
            index: hex_hash(&index.content_hash().at(st)?),
            baseline_index: hex_hash(&base_index.content_hash().at(st)?),
        },
        insertion_mode: c.bank.insertion_mode,
        num_entries: c.bank.num_entries,
        select_n: c.bank.select_n,
        held_out_style: c.eval.held_out_style,
        index_size: index.len(),
        chance_r_at_1: 1.0 / targets as f64,
        train: TrainSummary {
            tasks: c.train.tasks.clone(),
            steps: report.steps,
            epoch_joint: report.epoch_joint.clone(),
            backbone_unchanged: report.backbone_unchanged(),
            backbone_hash_before: report.backbone_hash_before.clone(),
            backbone_hash_after: report.backbone_hash_after.clone(),
            trainable_fraction: trainable_fraction(&bank, &bb),
        },
        tasks,
    };
    write_json(&paths.results(), &results).at(st)?;
    Ok((results, latency))
}

/// Everything a finished run produced.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub results: Results,
    pub timings: Timings,
    pub paths: RunPaths,
}

/// Runs every stage in order under `out`. The config is validated before
/// anything touches the disk.
pub fn run_pipeline(cfg: &RunConfig, out: &Path) -> StageResult<RunOutcome> {
    cfg.validate().at(Stage::Config)?;
    let paths = RunPaths::new(out);
    let t0 = Instant::now();
    let mut stage_seconds = BTreeMap::new();
    let mut timed = |name: &str, t: Instant| {
        stage_seconds.insert(name.to_string(), t.elapsed().as_secs_f64());
    };
    let t = Instant::now();
    stage_generate(cfg, &paths)?;
    write_json(&paths.config(), &cfg.resolved()).at(Stage::Generate)?;
    timed("generate", t);
    let t = Instant::now();
    stage_warmup(cfg, &paths)?;
    timed("warmup", t);
    let t = Instant::now();
    stage_train(cfg, &paths)?;
    timed("train", t);
    let t = Instant::now();
    stage_index(cfg, &paths)?;
    timed("index", t);
    let t = Instant::now();
    let (results, latency_ms) = stage_evaluate(cfg, &paths)?;
    timed("evaluate", t);
    let timings = Timings {
        stage_seconds,
        latency_ms,
        total_seconds: t0.elapsed().as_secs_f64(),
    };
    write_json(&paths.timings(), &timings).at(Stage::Evaluate)?;
    Ok(RunOutcome { results, timings, paths })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    InsertionMode,
    N,
    #[serde(rename = "num_entries")]
    NumEntries,
}

impl FromStr for AblationAxis {
    type Err = Error;
    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "insertion_mode" | "insertion-mode" | "mode" => Ok(Self::InsertionMode),
            "n" => Ok(Self::N),
            "N" | "num_entries" | "num-entries" => Ok(Self::NumEntries),
            other => Err(Error::InvalidConfig(format!("unknown ablation axis {other:?}"))),
        }
    }
}

impl AblationAxis {
    /// Config variants swept along this axis, with their row labels.
    pub fn variants(self, base: &RunConfig) -> Vec<(String, RunConfig)> {
        let with = |f: &dyn Fn(&mut RunConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            Self::InsertionMode => [InsertionMode::Deep, InsertionMode::Shallow]
                .into_iter()
                .map(|m| (m.to_string(), with(&|c| c.bank.insertion_mode = m)))
                .collect(),
            Self::N => [1usize, 2, 4, 8]
                .into_iter()
                .map(|n| {
                    let cfg = with(&|c| {
                        c.bank.select_n = n;
                        c.bank.num_entries = c.bank.num_entries.max(n);
                    });
                    (format!("n={n}"), cfg)
                })
                .collect(),
            Self::NumEntries => [4usize, 8, 16]
                .into_iter()
                .map(|big_n| {
                    let cfg = with(&|c| {
                        c.bank.num_entries = big_n;
                        c.bank.select_n = c.bank.select_n.min(big_n);
                    });
                    (format!("N={big_n}"), cfg)
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub dataset_manifest: String,
    pub tasks: BTreeMap<String, Recall>,
    pub mean_r_at_1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
    /// For the insertion-mode axis: whether deep R@1 ≥ shallow R@1 on the
    /// mean over tuned tasks.
    pub deep_at_least_shallow: Option<bool>,
}

impl AblationTable {
    /// Plain-text table, one row per axis value.
    pub fn render(&self) -> String {
        let tasks: Vec<&String> = self.rows.first().map(|r| r.tasks.keys().collect()).unwrap_or_default();
        let mut s = format!("{:<10}", "variant");
        for t in &tasks {
            s += &format!(" {:>20}", format!("{t} R@1/R@5"));
        }
        s += &format!(" {:>10}\n", "mean R@1");
        for r in &self.rows {
            s += &format!("{:<10}", r.label);
            for t in &tasks {
                let v = &r.tasks[*t];
                s += &format!(" {:>20}", format!("{:.3}/{:.3}", v.r_at_1, v.r_at_5));
            }
            s += &format!(" {:>10.3}\n", r.mean_r_at_1);
        }
        if let Some(d) = self.deep_at_least_shallow {
            s += &format!(
                "deep >= shallow at mean R@1: {}\n",
                if d { "yes" } else { "no (divergence)" }
            );
        }
        s
    }
}

/// One pipeline run per axis value under `out/<label>`, all sharing the
/// seed, dataset and warmed backbone of the first run.
pub fn ablate(cfg: &RunConfig, axis: AblationAxis, out: &Path) -> StageResult<AblationTable> {
    cfg.validate().at(Stage::Config)?;
    let variants = axis.variants(cfg);
    for (_, v) in &variants {
        v.validate().at(Stage::Config)?;
    }
    let mut rows = Vec::new();
    let mut shared_backbone: Option<PathBuf> = cfg.pretrained_backbone.clone();
    for (label, mut v) in variants {
        v.pretrained_backbone = shared_backbone.clone();
        let dir = out.join(label.replace('=', "_"));
        let outcome = run_pipeline(&v, &dir).map_err(|e| StageError {
            stage: Stage::Ablate,
            source: Error::InvalidConfig(format!("{label}: {e}")),
        })?;
        if shared_backbone.is_none() {
            shared_backbone = Some(outcome.paths.backbone.clone());
        }
        let tuned: BTreeSet<String> = v.resolved().train.tasks.iter().map(|t| EvalTask::from(*t).to_string()).collect();
        let tasks: BTreeMap<String, Recall> = outcome
            .results
            .tasks
            .iter()
            .map(|(k, t)| {
                (
                    k.clone(),
                    Recall {
                        r_at_1: t.r_at_1,
                        r_at_5: t.r_at_5,
                    },
                )
            })
            .collect();
        let scored: Vec<f64> = tasks.iter().filter(|(k, _)| tuned.contains(*k)).map(|(_, r)| r.r_at_1).collect();
        let mean_r_at_1 = scored.iter().sum::<f64>() / scored.len().max(1) as f64;
        rows.push(AblationRow {
            label,
            dataset_manifest: outcome.results.provenance.dataset_manifest.clone(),
            tasks,
            mean_r_at_1,
        });
    }
    let deep_at_least_shallow = (axis == AblationAxis::InsertionMode).then(|| rows[0].mean_r_at_1 >= rows[1].mean_r_at_1);
    let table = AblationTable {
        axis,
        rows,
        deep_at_least_shallow,
    };
    create_dir(out).at(Stage::Ablate)?;
    write_json(&out.join("ablation.json"), &table).at(Stage::Ablate)?;
    fs::write(out.join("ablation.txt"), table.render())
        .map_err(|e| Error::io(out.join("ablation.txt"), e))
        .at(Stage::Ablate)?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> RunConfig {
        RunConfig {
            seed: 3,
            dataset: DatasetConfig {
                num_classes: 2,
                instances_per_class: 4,
                ..Default::default()
            },
            backbone: BackboneConfig {
                layers: 1,
                d: 8,
                heads: 2,
                ..Default::default()
            },
            warmup: WarmupConfig {
                epochs: 1,
                batch_size: 4,
                ..Default::default()
            },
            bank: BankSettings {
                num_entries: 6,
                select_n: 2,
                ..Default::default()
            },
            train: TrainConfig {
                epochs: 1,
                batch_size: 8,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn eval_task_round_trips() {
        for s in ["sketch2image", "text+sketch2image", "art2lowres"] {
            let t: EvalTask = s.parse().unwrap();
            assert_eq!(t.to_string(), s);
        }
        assert!("text+text2image".parse::<EvalTask>().is_err());
        assert!("sketch2sketch".parse::<EvalTask>().is_err());
        assert!("sketchimage".parse::<EvalTask>().is_err());
    }

    #[test]
    fn n_above_bank_size_fails_before_any_stage() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny();
        cfg.bank.select_n = 7;
        let err = run_pipeline(&cfg, &dir.path().join("run")).unwrap_err();
        assert_eq!(err.stage, Stage::Config);
        assert!(!dir.path().join("run").exists());
    }

    #[test]
    fn held_out_style_leaves_tasks_and_keys() {
        let mut cfg = RunConfig::default();
        cfg.eval.held_out_style = Some(StyleTag::Art);
        let r = cfg.resolved();
        assert!(r.train.tasks.iter().all(|t| t.query != StyleTag::Art));
        assert!(!cfg.init_styles().contains(&StyleTag::Art));
        assert_eq!(cfg.init_styles().len(), 4);
        cfg.eval.held_out_style = Some(StyleTag::Natural);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn seed_reaches_every_module() {
        let mut cfg = RunConfig::default();
        cfg.seed = 99;
        let r = cfg.resolved();
        assert_eq!(
            [r.dataset.seed, r.backbone.seed, r.warmup.seed, r.train.seed, r.bank_config().seed, r.prototype_config().seed],
            [99; 6]
        );
    }

    #[test]
    fn config_hash_ignores_paths() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out = Some("/somewhere".into());
        b.pretrained_backbone = Some("/else/bb.bin".into());
        assert_eq!(a.content_hash().unwrap(), b.content_hash().unwrap());
    }

    #[test]
    fn ablation_axes_enumerate_rows() {
        let base = RunConfig::default();
        assert_eq!(AblationAxis::InsertionMode.variants(&base).len(), 2);
        let n: Vec<usize> = AblationAxis::N.variants(&base).iter().map(|v| v.1.bank.select_n).collect();
        assert_eq!(n, [1, 2, 4, 8]);
        for (_, v) in AblationAxis::N.variants(&base).iter().chain(&AblationAxis::NumEntries.variants(&base)) {
            v.validate().unwrap();
        }
    }
}
