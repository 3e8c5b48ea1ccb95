//! Contrastive warmup of the backbone on natural image/caption pairs.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Backbone, Binder};
use crate::error::{Error, Result};
use crate::mat::{round_f32, Mat};
use crate::rng::{stream, tag};
use crate::synthdata::{Dataset, QuerySample, Split, StyleTag};
use crate::tape::Tape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WarmupConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub margin: f64,
    /// Probability that a negative is another instance of the anchor's class.
    pub hard_negative_fraction: f64,
    pub seed: u64,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            lr: 3e-4,
            margin: 0.2,
            hard_negative_fraction: 0.5,
            seed: 0,
        }
    }
}

impl WarmupConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) || !(self.margin > 0.0) {
            return Err(Error::InvalidConfig("warmup needs batch_size >= 1, lr > 0, margin > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.hard_negative_fraction) {
            return Err(Error::InvalidConfig("hard_negative_fraction must lie in [0,1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmupReport {
    pub epoch_loss: Vec<f64>,
    pub initial_hash: String,
    pub final_hash: String,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(bb: &Backbone) -> Self {
        let zeros: Vec<Vec<f64>> = bb.params().iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, bb: &mut Backbone, grads: &[Option<Mat>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (i, p) in bb.params_mut().into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            for (j, (w, gj)) in p.data.iter_mut().zip(&g.data).enumerate() {
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = Self::B1 * *m + (1.0 - Self::B1) * gj;
                *v = Self::B2 * *v + (1.0 - Self::B2) * gj * gj;
                *w = round_f32(*w - lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS));
            }
        }
    }
}

/// Loss and per-parameter gradient of one triplet.
pub(crate) fn backbone_triplet_grad(
    bb: &Backbone,
    anchor: &QuerySample,
    pos: &QuerySample,
    neg: &QuerySample,
    margin: f64,
) -> Result<(f64, Vec<Option<Mat>>)> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(true);
    let a = bb.graph(&mut tape, &mut binder, anchor.into(), None)?;
    let r = bb.graph(&mut tape, &mut binder, pos.into(), None)?;
    let h = bb.graph(&mut tape, &mut binder, neg.into(), None)?;
    let ar = tape.dot(a, r);
    let ah = tape.dot(a, h);
    let diff = tape.sub(ah, ar);
    let shifted = tape.add_scalar(diff, margin);
    let loss = tape.relu(shifted);
    let value = tape.scalar(loss);
    let mut out: Vec<Option<Mat>> = vec![None; bb.params().len()];
    if value > 0.0 {
        let grads = tape.backward(loss);
        for &(idx, var) in &binder.bound {
            if let Some(g) = grads.get(var) {
                match &mut out[idx] {
                    Some(acc) => acc.add_assign(g),
                    slot => *slot = Some(g.clone()),
                }
            }
        }
    }
    Ok((value, out))
}

fn pick_negative<'a>(
    ds: &'a Dataset,
    style: StyleTag,
    class_id: u32,
    instance_id: u32,
    hard_fraction: f64,
    train: &[(u32, u32)],
    rng: &mut impl Rng,
) -> &'a QuerySample {
    let same_class: Vec<&(u32, u32)> = train
        .iter()
        .filter(|(c, i)| *c == class_id && *i != instance_id)
        .collect();
    let pool: Vec<&(u32, u32)> = if !same_class.is_empty() && rng.gen::<f64>() < hard_fraction {
        same_class
    } else {
        train.iter().filter(|(c, _)| *c != class_id).collect()
    };
    let &(c, i) = pool[rng.gen_range(0..pool.len())];
    ds.get(style, c, i)
}

/// Trains every backbone parameter on natural image/caption triplets (both
/// directions) over the training split, then freezes.
pub fn warmup_backbone(dataset: &Dataset, mut backbone: Backbone, config: &WarmupConfig) -> Result<(Backbone, WarmupReport)> {
    config.validate()?;
    if backbone.is_frozen() {
        return Err(Error::InvalidConfig("backbone is already frozen".into()));
    }
    let manifest = &dataset.manifest;
    let train: Vec<(u32, u32)> = manifest
        .splits
        .iter()
        .filter(|e| e.split == Split::Train)
        .map(|e| (e.class_id, e.instance_id))
        .collect();
    if train.is_empty() || dataset.of_style(StyleTag::Natural).is_empty() || dataset.of_style(StyleTag::Text).is_empty() {
        return Err(Error::Empty("warmup needs natural/text training pairs"));
    }
    let mut classes: Vec<u32> = train.iter().map(|p| p.0).collect();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Empty("warmup needs at least two classes"));
    }

    backbone.snap_to_f32();
    let initial_hash = crate::binfile::hex_hash(&backbone.content_hash());
    let mut rng = stream(&[config.seed, tag::WARMUP]);
    let mut adam = Adam::new(&backbone);
    let mut epoch_loss = Vec::with_capacity(config.epochs);
    let mut order = train.clone();
    let mut step = 0usize;

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let mut triplets = Vec::with_capacity(2 * chunk.len());
            for &(c, i) in chunk {
                let img = dataset.get(StyleTag::Natural, c, i);
                let txt = dataset.get(StyleTag::Text, c, i);
                let neg_t = pick_negative(dataset, StyleTag::Text, c, i, config.hard_negative_fraction, &train, &mut rng);
                let neg_i = pick_negative(dataset, StyleTag::Natural, c, i, config.hard_negative_fraction, &train, &mut rng);
                triplets.push((img, txt, neg_t));
                triplets.push((txt, img, neg_i));
            }
            let bb = &backbone;
            let results: Vec<(f64, Vec<Option<Mat>>)> = triplets
                .par_iter()
                .map(|(a, p, n)| backbone_triplet_grad(bb, a, p, n, config.margin))
                .collect::<Result<_>>()?;
            let scale = 1.0 / results.len() as f64;
            let mut summed: Vec<Option<Mat>> = vec![None; backbone.params().len()];
            let mut batch_loss = 0.0;
            for (loss, grads) in results {
                batch_loss += loss;
                for (acc, g) in summed.iter_mut().zip(grads) {
                    if let Some(g) = g {
                        match acc {
                            Some(a) => a.add_assign(&g),
                            None => *acc = Some(g),
                        }
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite { step });
            }
            for g in summed.iter_mut().flatten() {
                *g = g.scaled(scale);
            }
            adam.step(&mut backbone, &summed, config.lr);
            total += batch_loss;
            count += triplets.len();
            step += 1;
        }
        epoch_loss.push(total / count as f64);
    }
    let final_hash = crate::binfile::hex_hash(&backbone.content_hash());
    Ok((
        backbone.freeze(),
        WarmupReport {
            epoch_loss,
            initial_hash,
            final_hash,
        },
    ))
}
