//! Prompt tuning: triplet + key-alignment objective over bank keys and
//! prompt values, with the backbone frozen.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binfile::hex_hash;
use crate::encoder::{Backbone, Embedding, PromptVars};
use crate::error::{Error, Result};
use crate::mat::{dot, norm, round_f32, Mat};
use crate::promptbank::{LookupResult, PromptBank};
use crate::rng::{stream, tag};
use crate::synthdata::{Dataset, QuerySample, Split, StyleTag};
use crate::tape::{Tape, Var};

/// `1 − ⟨a,b⟩` for unit vectors.
pub fn distance(a: &Embedding, b: &Embedding) -> Result<f64> {
    for e in [a, b] {
        let n = norm(e.as_slice());
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::NotNormalized { norm: n });
        }
    }
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("distance widths {} vs {}", a.dim(), b.dim())));
    }
    Ok((1.0 - dot(a.as_slice(), b.as_slice())).clamp(0.0, 2.0))
}

pub fn triplet_loss(xf: &Embedding, xr: &Embedding, xh: &Embedding, margin: f64) -> Result<f64> {
    Ok((margin + distance(xf, xr)? - distance(xf, xh)?).max(0.0))
}

/// A retrieval direction, e.g. sketch queries against natural targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Task {
    pub query: StyleTag,
    pub target: StyleTag,
}

impl Task {
    pub fn new(query: StyleTag, target: StyleTag) -> Self {
        Self { query, target }
    }
}

/// `image` is accepted as a synonym for `natural`.
pub fn parse_style_word(s: &str) -> Result<StyleTag> {
    if s == "image" {
        Ok(StyleTag::Natural)
    } else {
        s.parse()
    }
}

pub fn style_word(s: StyleTag) -> &'static str {
    match s {
        StyleTag::Natural => "image",
        other => other.as_str(),
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (q, t) = s
            .split_once('2')
            .ok_or_else(|| Error::InvalidConfig(format!("task {s:?} is not of the form QUERY2TARGET")))?;
        let task = Task::new(parse_style_word(q)?, parse_style_word(t)?);
        if task.query == task.target {
            return Err(Error::InvalidConfig(format!("task {s:?} maps a style onto itself")));
        }
        Ok(task)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}2{}", style_word(self.query), style_word(self.target))
    }
}

impl TryFrom<String> for Task {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Task> for String {
    fn from(t: Task) -> String {
        t.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub margin: f64,
    pub lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub tasks: Vec<Task>,
    /// Probability that a negative is another instance of the anchor's class
    /// rather than a different class. `0` gives pure different-class
    /// negatives.
    pub hard_negative_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            lambda: 0.5,
            lr: 1e-2,
            epochs: 30,
            batch_size: 16,
            seed: 0,
            tasks: vec![
                Task::new(StyleTag::Sketch, StyleTag::Natural),
                Task::new(StyleTag::Art, StyleTag::Natural),
                Task::new(StyleTag::Lowres, StyleTag::Natural),
                Task::new(StyleTag::Text, StyleTag::Natural),
            ],
            hard_negative_fraction: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::InvalidConfig(format!("margin must be > 0, got {}", self.margin)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.hard_negative_fraction) {
            return Err(Error::InvalidConfig("hard_negative_fraction must lie in [0,1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Triplet<'a> {
    pub anchor: &'a QuerySample,
    pub positive: &'a QuerySample,
    pub negative: &'a QuerySample,
    /// Lookup prototypes of anchor, positive and negative.
    pub prototypes: [Vec<f64>; 3],
}

impl Triplet<'_> {
    fn samples(&self) -> [&QuerySample; 3] {
        [self.anchor, self.positive, self.negative]
    }
}

pub type TripletBatch<'a> = Vec<Triplet<'a>>;

/// Draws `(anchor, positive, negative)` samples for `task`. The anchor is
/// uniform over `pool`, the positive is the same instance in the target
/// style, and the negative is uniform over `pool` entries of other classes
/// (or, with probability `hard_fraction`, over other instances of the same
/// class).
pub fn sample_triplet<'a>(
    dataset: &'a Dataset,
    task: Task,
    pool: &[(u32, u32)],
    hard_fraction: f64,
    rng: &mut impl Rng,
) -> Result<[&'a QuerySample; 3]> {
    if pool.is_empty() {
        return Err(Error::Empty("triplet pool"));
    }
    let (c, i) = pool[rng.gen_range(0..pool.len())];
    triplet_for(dataset, task, c, i, pool, hard_fraction, rng)
}

fn triplet_for<'a>(
    dataset: &'a Dataset,
    task: Task,
    class_id: u32,
    instance_id: u32,
    pool: &[(u32, u32)],
    hard_fraction: f64,
    rng: &mut impl Rng,
) -> Result<[&'a QuerySample; 3]> {
    let others: Vec<&(u32, u32)> = pool.iter().filter(|p| p.0 != class_id).collect();
    if others.is_empty() {
        return Err(Error::InvalidConfig("triplets need at least two classes".into()));
    }
    let mut negatives = others;
    if hard_fraction > 0.0 {
        let same: Vec<&(u32, u32)> = pool
            .iter()
            .filter(|p| p.0 == class_id && p.1 != instance_id)
            .collect();
        if !same.is_empty() && rng.gen::<f64>() < hard_fraction {
            negatives = same;
        }
    }
    let &(nc, ni) = negatives[rng.gen_range(0..negatives.len())];
    Ok([
        dataset.get(task.query, class_id, instance_id),
        dataset.get(task.target, class_id, instance_id),
        dataset.get(task.target, nc, ni),
    ])
}

/// Gradient of the trainable bank parameters. Entries untouched in a step
/// have `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct BankGrads {
    pub keys: Vec<Option<Vec<f64>>>,
    pub values: Vec<Option<Vec<Mat>>>,
}

impl BankGrads {
    fn zeros(n: usize) -> Self {
        Self {
            keys: vec![None; n],
            values: vec![None; n],
        }
    }

    fn add_key(&mut self, id: usize, g: &[f64]) {
        match &mut self.keys[id] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot => *slot = Some(g.to_vec()),
        }
    }

    fn add_value(&mut self, id: usize, layer: usize, layers: usize, g: &Mat) {
        let slot = self.values[id].get_or_insert_with(|| vec![Mat::zeros(g.rows, g.cols); layers]);
        slot[layer].add_assign(g);
    }

    fn merge(&mut self, other: BankGrads) {
        for (id, k) in other.keys.into_iter().enumerate() {
            if let Some(k) = k {
                self.add_key(id, &k);
            }
        }
        for (id, v) in other.values.into_iter().enumerate() {
            if let Some(v) = v {
                let layers = v.len();
                for (l, m) in v.iter().enumerate() {
                    self.add_value(id, l, layers, m);
                }
            }
        }
    }

    fn scale(&mut self, s: f64) {
        for k in self.keys.iter_mut().flatten() {
            k.iter_mut().for_each(|v| *v *= s);
        }
        for v in self.values.iter_mut().flatten() {
            for m in v {
                *m = m.scaled(s);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.keys.iter().flatten().all(|k| k.iter().all(|v| v.is_finite()))
            && self.values.iter().flatten().all(|v| v.iter().all(Mat::is_finite))
    }

    /// Largest absolute component.
    pub fn max_abs(&self) -> f64 {
        let keys = self.keys.iter().flatten().flatten();
        let vals = self.values.iter().flatten().flat_map(|v| v.iter().flat_map(|m| m.data.iter()));
        keys.chain(vals).fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Per-triplet loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub triplet: f64,
    pub alignment: f64,
    pub joint: f64,
}

/// ∂γ(p, k)/∂k.
fn score_grad_key(p: &[f64], k: &[f64]) -> Vec<f64> {
    let (np, nk) = (norm(p), norm(k));
    let c = dot(p, k) / (np * nk);
    p.iter()
        .zip(k)
        .map(|(pi, ki)| -(pi / (np * nk) - c * ki / (nk * nk)))
        .collect()
}

fn lookups(bank: &PromptBank, t: &Triplet<'_>) -> Result<[LookupResult; 3]> {
    Ok([
        bank.lookup(&t.prototypes[0])?,
        bank.lookup(&t.prototypes[1])?,
        bank.lookup(&t.prototypes[2])?,
    ])
}

/// Loss and (optionally) gradients of one triplet with lookups held fixed.
fn triplet_objective(
    bank: &PromptBank,
    backbone: &Backbone,
    t: &Triplet<'_>,
    looked: &[LookupResult; 3],
    config: &TrainConfig,
    want_grads: bool,
) -> Result<(LossParts, Option<BankGrads>)> {
    let bc = bank.config();
    let layers = bc.stored_layers();
    let mut tape = Tape::new();
    let mut leaves: Vec<Option<Vec<Var>>> = vec![None; bank.len()];
    for l in looked {
        for &id in &l.selected_ids {
            if leaves[id].is_none() {
                let e = &bank.entries()[id];
                leaves[id] = Some(e.values.iter().map(|m| tape.leaf(m.clone(), want_grads)).collect());
            }
        }
    }
    let mut binder = crate::encoder::Binder::new(false);
    let mut outs = Vec::with_capacity(3);
    for (sample, l) in t.samples().into_iter().zip(looked) {
        let per_layer: Vec<Var> = (0..layers)
            .map(|layer| {
                let parts: Vec<Var> = l
                    .selected_ids
                    .iter()
                    .map(|&id| leaves[id].as_ref().expect("leaf")[layer])
                    .collect();
                if parts.len() == 1 {
                    parts[0]
                } else {
                    tape.concat_rows(&parts)
                }
            })
            .collect();
        let pv = PromptVars {
            layers: &per_layer,
            mode: bc.insertion_mode,
        };
        outs.push(backbone.graph(&mut tape, &mut binder, sample.into(), Some(pv))?);
    }
    let ar = tape.dot(outs[0], outs[1]);
    let ah = tape.dot(outs[0], outs[2]);
    let diff = tape.sub(ah, ar);
    let shifted = tape.add_scalar(diff, config.margin);
    let loss = tape.relu(shifted);
    let triplet = tape.scalar(loss);
    let alignment = bank.key_alignment_loss(&t.prototypes[0], &looked[0])?;
    let parts = LossParts {
        triplet,
        alignment,
        joint: triplet + config.lambda * alignment,
    };
    if !want_grads {
        return Ok((parts, None));
    }
    let mut g = BankGrads::zeros(bank.len());
    if triplet > 0.0 {
        let grads = tape.backward(loss);
        for (id, vars) in leaves.iter().enumerate() {
            let Some(vars) = vars else { continue };
            for (layer, &v) in vars.iter().enumerate() {
                if let Some(m) = grads.get(v) {
                    g.add_value(id, layer, layers, m);
                }
            }
        }
    }
    for &id in &looked[0].selected_ids {
        let k = &bank.entries()[id].key;
        let gk: Vec<f64> = score_grad_key(&t.prototypes[0], k)
            .into_iter()
            .map(|v| v * config.lambda)
            .collect();
        g.add_key(id, &gk);
    }
    Ok((parts, Some(g)))
}

fn check_frozen(backbone: &Backbone) -> Result<()> {
    if !backbone.is_frozen() {
        return Err(Error::InvalidConfig("backbone must be frozen before prompt tuning".into()));
    }
    Ok(())
}

/// Batch mean of the per-triplet loss components, lookups computed from the
/// batch prototypes.
pub fn joint_loss(batch: &[Triplet<'_>], bank: &PromptBank, backbone: &Backbone, config: &TrainConfig) -> Result<LossParts> {
    let looked = batch.iter().map(|t| lookups(bank, t)).collect::<Result<Vec<_>>>()?;
    joint_loss_with(batch, &looked, bank, backbone, config)
}

/// As [`joint_loss`] but with caller-supplied (fixed) lookups.
pub fn joint_loss_with(
    batch: &[Triplet<'_>],
    looked: &[[LookupResult; 3]],
    bank: &PromptBank,
    backbone: &Backbone,
    config: &TrainConfig,
) -> Result<LossParts> {
    if batch.is_empty() {
        return Err(Error::Empty("triplet batch"));
    }
    let parts = batch
        .iter()
        .zip(looked)
        .map(|(t, l)| triplet_objective(bank, backbone, t, l, config, false).map(|r| r.0))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_parts(&parts))
}

fn mean_parts(parts: &[LossParts]) -> LossParts {
    let n = parts.len() as f64;
    let mut m = LossParts::default();
    for p in parts {
        m.triplet += p.triplet;
        m.alignment += p.alignment;
        m.joint += p.joint;
    }
    LossParts {
        triplet: m.triplet / n,
        alignment: m.alignment / n,
        joint: m.joint / n,
    }
}

/// Exact gradient of the batch-mean joint loss with respect to every bank
/// key and value; the top-n selection is held fixed.
pub fn compute_gradients(
    batch: &[Triplet<'_>],
    bank: &PromptBank,
    backbone: &Backbone,
    config: &TrainConfig,
) -> Result<(LossParts, BankGrads)> {
    check_frozen(backbone)?;
    if batch.is_empty() {
        return Err(Error::Empty("triplet batch"));
    }
    let looked = batch.iter().map(|t| lookups(bank, t)).collect::<Result<Vec<_>>>()?;
    gradients_with(batch, &looked, bank, backbone, config)
}

fn gradients_with(
    batch: &[Triplet<'_>],
    looked: &[[LookupResult; 3]],
    bank: &PromptBank,
    backbone: &Backbone,
    config: &TrainConfig,
) -> Result<(LossParts, BankGrads)> {
    let results = batch
        .par_iter()
        .zip(looked)
        .map(|(t, l)| triplet_objective(bank, backbone, t, l, config, true))
        .collect::<Result<Vec<_>>>()?;
    let mut total = BankGrads::zeros(bank.len());
    let mut parts = Vec::with_capacity(results.len());
    for (p, g) in results {
        parts.push(p);
        total.merge(g.expect("gradients requested"));
    }
    total.scale(1.0 / batch.len() as f64);
    Ok((mean_parts(&parts), total))
}

/// One SGD step, with parameters rounded back onto the `f32` grid.
pub fn apply_gradients(bank: &mut PromptBank, grads: &BankGrads, lr: f64) {
    for id in 0..bank.len() {
        let e = bank.entry_mut(id);
        if let Some(g) = &grads.keys[id] {
            for (k, gv) in e.key.iter_mut().zip(g) {
                *k = round_f32(*k - lr * gv);
            }
        }
        if let Some(g) = &grads.values[id] {
            for (m, gm) in e.values.iter_mut().zip(g) {
                for (v, gv) in m.data.iter_mut().zip(&gm.data) {
                    *v = round_f32(*v - lr * gv);
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: usize,
    pub triplet: f64,
    pub alignment: f64,
    pub joint: f64,
    pub backbone_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_joint: Vec<f64>,
    pub epoch_triplet: Vec<f64>,
    pub epoch_alignment: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
    pub steps: usize,
    pub backbone_hash_before: String,
    pub backbone_hash_after: String,
}

impl TrainReport {
    pub fn backbone_unchanged(&self) -> bool {
        self.backbone_hash_before == self.backbone_hash_after
    }
}

/// Lookup prototype of every sample, indexed like `Dataset::samples`.
pub type PrototypeTable = Vec<Vec<f64>>;

pub fn prototype_table(dataset: &Dataset, enc: &crate::prototype::PrototypeEncoder) -> Result<PrototypeTable> {
    dataset.samples().iter().map(|s| enc.query_prototype(s)).collect()
}

pub(crate) fn sample_index(dataset: &Dataset, s: &QuerySample) -> usize {
    dataset.sample_id(s.style, s.class_id, s.instance_id) as usize
}

pub fn make_triplet<'a>(dataset: &'a Dataset, protos: &PrototypeTable, samples: [&'a QuerySample; 3]) -> Triplet<'a> {
    let [anchor, positive, negative] = samples;
    let p = |s: &QuerySample| protos[sample_index(dataset, s)].clone();
    Triplet {
        anchor,
        positive,
        negative,
        prototypes: [p(anchor), p(positive), p(negative)],
    }
}

/// Training pairs `(class_id, instance_id)` in manifest order.
pub fn train_pool(dataset: &Dataset) -> Vec<(u32, u32)> {
    dataset
        .manifest
        .splits
        .iter()
        .filter(|e| e.split == Split::Train)
        .map(|e| (e.class_id, e.instance_id))
        .collect()
}

/// Prompt tuning. Every epoch visits each (task, training instance) once as
/// an anchor, in a seeded order; each step takes one SGD step on the batch
/// mean. Optionally streams one JSON line per step to `log`.
pub fn fit(
    dataset: &Dataset,
    protos: &PrototypeTable,
    bank: &mut PromptBank,
    backbone: &Backbone,
    config: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    config.validate()?;
    check_frozen(backbone)?;
    if config.tasks.is_empty() {
        return Err(Error::InvalidConfig("no training tasks".into()));
    }
    let pool = train_pool(dataset);
    let mut classes: Vec<u32> = pool.iter().map(|p| p.0).collect();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::InvalidConfig("prompt tuning needs at least two training classes".into()));
    }
    let hash_before = hex_hash(&backbone.content_hash());
    let mut rng = stream(&[config.seed, tag::FIT]);
    let mut order: Vec<(Task, u32, u32)> = config
        .tasks
        .iter()
        .flat_map(|&t| pool.iter().map(move |&(c, i)| (t, c, i)))
        .collect();
    let mut report = TrainReport {
        epoch_joint: Vec::new(),
        epoch_triplet: Vec::new(),
        epoch_alignment: Vec::new(),
        epoch_seconds: Vec::new(),
        steps: 0,
        backbone_hash_before: hash_before.clone(),
        backbone_hash_after: String::new(),
    };
    for epoch in 0..config.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut parts = Vec::new();
        for chunk in order.chunks(config.batch_size) {
            let batch = chunk
                .iter()
                .map(|&(task, c, i)| {
                    let s = triplet_for(dataset, task, c, i, &pool, config.hard_negative_fraction, &mut rng)?;
                    Ok(make_triplet(dataset, protos, s))
                })
                .collect::<Result<Vec<_>>>()?;
            let (loss, grads) = compute_gradients(&batch, bank, backbone, config)?;
            if !loss.joint.is_finite() || !grads.is_finite() {
                return Err(Error::NonFinite { step: report.steps });
            }
            apply_gradients(bank, &grads, config.lr);
            if let Some(w) = log.as_deref_mut() {
                let rec = LogRecord {
                    epoch,
                    step: report.steps,
                    triplet: loss.triplet,
                    alignment: loss.alignment,
                    joint: loss.joint,
                    backbone_hash: hex_hash(&backbone.content_hash()),
                };
                serde_json::to_writer(&mut *w, &rec)?;
                w.write_all(b"\n").map_err(|e| Error::io("training log", e))?;
            }
            parts.push((loss, chunk.len()));
            report.steps += 1;
        }
        let n: usize = parts.iter().map(|p| p.1).sum();
        let wmean = |f: fn(&LossParts) -> f64| parts.iter().map(|(p, k)| f(p) * *k as f64).sum::<f64>() / n as f64;
        report.epoch_joint.push(wmean(|p| p.joint));
        report.epoch_triplet.push(wmean(|p| p.triplet));
        report.epoch_alignment.push(wmean(|p| p.alignment));
        report.epoch_seconds.push(start.elapsed().as_secs_f64());
    }
    report.backbone_hash_after = hex_hash(&backbone.content_hash());
    if !report.backbone_unchanged() {
        return Err(Error::Provenance("backbone changed during prompt tuning"));
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

/// Relative error with a small absolute floor in the denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares [`compute_gradients`] against central differences of
/// [`joint_loss_with`] for every key and value scalar of every entry
/// (lookups held fixed).
pub fn grad_check(
    batch: &[Triplet<'_>],
    bank: &PromptBank,
    backbone: &Backbone,
    config: &TrainConfig,
    h: f64,
) -> Result<GradCheckReport> {
    check_frozen(backbone)?;
    let looked = batch.iter().map(|t| lookups(bank, t)).collect::<Result<Vec<_>>>()?;
    let (_, grads) = gradients_with(batch, &looked, bank, backbone, config)?;
    // (entry, layer or None for the key, flat index)
    let mut coords = Vec::new();
    for e in bank.entries() {
        coords.extend((0..e.key.len()).map(|j| (e.entry_id, None, j)));
        for (l, m) in e.values.iter().enumerate() {
            coords.extend((0..m.len()).map(|j| (e.entry_id, Some(l), j)));
        }
    }
    let eval = |id: usize, layer: Option<usize>, j: usize, delta: f64| -> Result<f64> {
        let mut b = bank.clone();
        let e = b.entry_mut(id);
        match layer {
            None => e.key[j] += delta,
            Some(l) => e.values[l].data[j] += delta,
        }
        Ok(joint_loss_with(batch, &looked, &b, backbone, config)?.joint)
    };
    let errors = coords
        .par_iter()
        .map(|&(id, layer, j)| {
            let numeric = (eval(id, layer, j, h)? - eval(id, layer, j, -h)?) / (2.0 * h);
            let analytic = match layer {
                None => grads.keys[id].as_ref().map_or(0.0, |k| k[j]),
                Some(l) => grads.values[id].as_ref().map_or(0.0, |v| v[l].data[j]),
            };
            Ok((relative_error(analytic, numeric), id, layer, j))
        })
        .collect::<Result<Vec<_>>>()?;
    let worst = errors
        .iter()
        .copied()
        .fold((0.0, 0, None, 0), |a, b| if b.0 > a.0 { b } else { a });
    Ok(GradCheckReport {
        checked: errors.len(),
        max_rel_error: worst.0,
        worst: match worst.2 {
            None => format!("entry {} key[{}]", worst.1, worst.3),
            Some(l) => format!("entry {} layer {} value[{}]", worst.1, l, worst.3),
        },
    })
}

/// Trainable bank scalars over all model scalars (backbone plus bank).
pub fn trainable_fraction(bank: &PromptBank, backbone: &Backbone) -> f64 {
    let t = bank.trainable_scalars() as f64;
    t / (t + backbone.total_scalars() as f64)
}

/// Deterministic triplet batch over the training split, for checks.
pub fn sample_batch<'a>(
    dataset: &'a Dataset,
    protos: &PrototypeTable,
    tasks: &[Task],
    size: usize,
    seed: u64,
) -> Result<TripletBatch<'a>> {
    let pool = train_pool(dataset);
    let mut rng = stream(&[seed, tag::FIT, 1]);
    (0..size)
        .map(|k| {
            let task = tasks[k % tasks.len()];
            let s = sample_triplet(dataset, task, &pool, 0.0, &mut rng)?;
            Ok(make_triplet(dataset, protos, s))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::BackboneConfig;
    use crate::promptbank::{score, BankConfig, InsertionMode};
    use crate::prototype::{PrototypeConfig, PrototypeEncoder};
    use crate::synthdata::DatasetConfig;

    fn unit(v: Vec<f64>) -> Embedding {
        Embedding::normalized(v).unwrap()
    }

    #[test]
    fn distance_examples() {
        let a = unit(vec![1.0, 0.0]);
        let b = unit(vec![0.0, 1.0]);
        let c = unit(vec![-1.0, 0.0]);
        assert_eq!(distance(&a, &a).unwrap(), 0.0);
        assert_eq!(distance(&a, &b).unwrap(), 1.0);
        assert_eq!(distance(&a, &c).unwrap(), 2.0);
    }

    #[test]
    fn triplet_examples() {
        let a = unit(vec![1.0, 0.0]);
        let b = unit(vec![0.0, 1.0]);
        assert_eq!(triplet_loss(&a, &a, &b, 0.2).unwrap(), 0.0);
        assert!((triplet_loss(&a, &b, &a, 0.2).unwrap() - 1.2).abs() < 1e-15);
    }

    #[test]
    fn task_parsing() {
        let t: Task = "sketch2image".parse().unwrap();
        assert_eq!(t, Task::new(StyleTag::Sketch, StyleTag::Natural));
        assert_eq!(t.to_string(), "sketch2image");
        assert_eq!("text2natural".parse::<Task>().unwrap().query, StyleTag::Text);
        assert!("image2image".parse::<Task>().is_err());
        assert!("audio2image".parse::<Task>().is_err());
        assert!("sketch".parse::<Task>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { margin: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lambda: -0.1, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn two_class_negatives_are_forced() {
        let ds = Dataset::generate(&DatasetConfig {
            num_classes: 2,
            instances_per_class: 4,
            ..Default::default()
        })
        .unwrap();
        let pool = train_pool(&ds);
        let mut rng = stream(&[5]);
        let task = Task::new(StyleTag::Sketch, StyleTag::Natural);
        for _ in 0..200 {
            let [a, p, n] = sample_triplet(&ds, task, &pool, 0.0, &mut rng).unwrap();
            assert_eq!((a.class_id, a.instance_id), (p.class_id, p.instance_id));
            assert_eq!(a.style, StyleTag::Sketch);
            assert_eq!(p.style, StyleTag::Natural);
            assert_eq!(n.style, StyleTag::Natural);
            assert_eq!(n.class_id, 1 - a.class_id);
        }
    }

    #[test]
    fn triplet_sequence_is_seeded() {
        let ds = Dataset::generate(&DatasetConfig::default()).unwrap();
        let pool = train_pool(&ds);
        let task = Task::new(StyleTag::Text, StyleTag::Natural);
        let draw = |seed| {
            let mut rng = stream(&[seed]);
            (0..50)
                .map(|_| {
                    let [a, _, n] = sample_triplet(&ds, task, &pool, 0.0, &mut rng).unwrap();
                    (a.class_id, a.instance_id, n.class_id, n.instance_id)
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(1), draw(1));
        assert_ne!(draw(1), draw(2));
    }

    #[test]
    fn score_grad_matches_difference() {
        let p = [0.3, -0.5, 0.8];
        let k = [0.1, 0.4, -0.2];
        let g = score_grad_key(&p, &k);
        for j in 0..3 {
            let mut kp = k;
            let mut km = k;
            kp[j] += 1e-6;
            km[j] -= 1e-6;
            let num = (score(&p, &kp).unwrap() - score(&p, &km).unwrap()) / 2e-6;
            assert!((num - g[j]).abs() < 1e-8);
        }
    }

    struct Fixture {
        ds: Dataset,
        protos: PrototypeTable,
        bank: PromptBank,
        bb: Backbone,
    }

    fn fixture(lambda_keys_from_protos: bool) -> Fixture {
        let ds = Dataset::generate(&DatasetConfig {
            num_classes: 4,
            instances_per_class: 4,
            ..Default::default()
        })
        .unwrap();
        let enc = PrototypeEncoder::new(PrototypeConfig {
            d: 8,
            patch_size: 8,
            image_size: 32,
            vocab_size: 64,
            seed: 1,
        })
        .unwrap();
        let protos = prototype_table(&ds, &enc).unwrap();
        let bb = Backbone::new(BackboneConfig {
            layers: 2,
            d: 8,
            heads: 2,
            ..Default::default()
        })
        .unwrap()
        .freeze();
        let styles =
            crate::prototype::style_prototypes(&enc, &StyleTag::ALL, ds.samples().iter()).unwrap();
        let init = if lambda_keys_from_protos { styles } else { Vec::new() };
        let bank = PromptBank::new(
            BankConfig {
                num_entries: 6,
                select_n: 2,
                layers: 2,
                d: 8,
                tokens_per_entry: 1,
                insertion_mode: InsertionMode::Deep,
                seed: 9,
            },
            &init,
        )
        .unwrap();
        Fixture { ds, protos, bank, bb }
    }

    #[test]
    fn lambda_zero_means_no_key_gradient() {
        let f = fixture(false);
        let cfg = TrainConfig {
            lambda: 0.0,
            ..Default::default()
        };
        let batch = sample_batch(&f.ds, &f.protos, &cfg.tasks, 6, 3).unwrap();
        let (loss, g) = compute_gradients(&batch, &f.bank, &f.bb, &cfg).unwrap();
        assert_eq!(loss.joint, loss.triplet);
        assert!(g.keys.iter().flatten().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn joint_is_triplet_plus_weighted_alignment() {
        let f = fixture(false);
        let cfg = TrainConfig::default();
        let batch = sample_batch(&f.ds, &f.protos, &cfg.tasks, 5, 4).unwrap();
        let parts = joint_loss(&batch, &f.bank, &f.bb, &cfg).unwrap();
        let mut align = 0.0;
        for t in &batch {
            let l = f.bank.lookup(&t.prototypes[0]).unwrap();
            for &id in &l.selected_ids {
                let k = &f.bank.entries()[id].key;
                let p = &t.prototypes[0];
                let c = p.iter().zip(k).map(|(a, b)| a * b).sum::<f64>()
                    / (p.iter().map(|v| v * v).sum::<f64>().sqrt() * k.iter().map(|v| v * v).sum::<f64>().sqrt());
                align += 1.0 - c;
            }
        }
        align /= batch.len() as f64;
        assert!((parts.alignment - align).abs() < 1e-12);
        assert!((parts.joint - (parts.triplet + 0.5 * align)).abs() < 1e-12);
        assert!(parts.triplet >= 0.0 && parts.triplet <= cfg.margin + 2.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let f = fixture(true);
        let cfg = TrainConfig::default();
        let batch = sample_batch(&f.ds, &f.protos, &cfg.tasks, 4, 7).unwrap();
        let r = grad_check(&batch, &f.bank, &f.bb, &cfg, 1e-5).unwrap();
        assert_eq!(r.checked, f.bank.trainable_scalars());
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn unfrozen_backbone_is_rejected() {
        let f = fixture(false);
        let bb = Backbone::new(f.bb.config().clone()).unwrap();
        let cfg = TrainConfig::default();
        let batch = sample_batch(&f.ds, &f.protos, &cfg.tasks, 2, 1).unwrap();
        assert!(compute_gradients(&batch, &f.bank, &bb, &cfg).is_err());
    }

    #[test]
    fn fit_zero_epochs_and_determinism() {
        let f = fixture(true);
        let mut bank = f.bank.clone();
        let cfg0 = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        fit(&f.ds, &f.protos, &mut bank, &f.bb, &cfg0, None).unwrap();
        assert_eq!(bank.content_hash(), f.bank.content_hash());

        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            ..Default::default()
        };
        let mut a = f.bank.clone();
        let mut b = f.bank.clone();
        let mut log = Vec::new();
        let ra = fit(&f.ds, &f.protos, &mut a, &f.bb, &cfg, Some(&mut log)).unwrap();
        fit(&f.ds, &f.protos, &mut b, &f.bb, &cfg, None).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        assert_ne!(a.content_hash(), f.bank.content_hash());
        assert!(ra.backbone_unchanged());
        let lines: Vec<LogRecord> = std::str::from_utf8(&log)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), ra.steps);
        assert!(lines.iter().all(|r| r.backbone_hash == ra.backbone_hash_before));
    }
}
