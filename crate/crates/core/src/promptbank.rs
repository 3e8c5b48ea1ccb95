//! Learnable key → prompt-token store.
//!
//! Each entry pairs a key vector with per-layer prompt tokens. A query
//! prototype is scored against every key with the cosine distance
//! `γ(p, k) = 1 − cos(p, k)`; the `n` entries with the smallest distance are
//! selected and their tokens are placed between the CLS token and the input
//! tokens. Because the subset objective is a sum of independent per-key
//! terms, picking the `n` individually smallest distances is the exact subset
//! minimizer.
//!
//! All parameters live on the `f32` grid so the on-disk format round-trips
//! exactly.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::binfile::{self, to_u32, Hash, Reader, Writer};
use crate::error::{Error, Result};
use crate::mat::{dot, norm, round_f32, Mat};
use crate::prototype::StylePrototype;
use crate::rng::{stream, tag};

pub const BANK_MAGIC: &[u8; 4] = b"UPBK";
pub const BANK_VERSION: u32 = 1;

const KEY_INIT: f64 = 0.1;
const VALUE_INIT: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InsertionMode {
    /// Prompt slots are rewritten with each layer's own tokens.
    Deep,
    /// Prompts enter at layer 0 only and are carried forward as hidden state.
    Shallow,
}

impl InsertionMode {
    pub fn code(self) -> u8 {
        match self {
            InsertionMode::Deep => 0,
            InsertionMode::Shallow => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(InsertionMode::Deep),
            1 => Some(InsertionMode::Shallow),
            _ => None,
        }
    }
}

impl fmt::Display for InsertionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InsertionMode::Deep => "deep",
            InsertionMode::Shallow => "shallow",
        })
    }
}

impl FromStr for InsertionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deep" => Ok(InsertionMode::Deep),
            "shallow" => Ok(InsertionMode::Shallow),
            other => Err(Error::OutOfRange(format!("unknown insertion mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankConfig {
    pub num_entries: usize,
    pub select_n: usize,
    pub layers: usize,
    pub d: usize,
    pub tokens_per_entry: usize,
    pub insertion_mode: InsertionMode,
    pub seed: u64,
}

impl BankConfig {
    pub fn validate(&self) -> Result<()> {
        if self.select_n < 1 {
            return Err(Error::InvalidConfig("select_n must be >= 1".into()));
        }
        if self.select_n > self.num_entries {
            return Err(Error::InvalidConfig(format!(
                "select_n {} exceeds bank size {}",
                self.select_n, self.num_entries
            )));
        }
        if self.layers < 1 || self.d < 1 || self.tokens_per_entry < 1 {
            return Err(Error::InvalidConfig("layers, d and tokens_per_entry must be >= 1".into()));
        }
        Ok(())
    }

    /// Layers that carry their own prompt tokens.
    pub fn stored_layers(&self) -> usize {
        match self.insertion_mode {
            InsertionMode::Deep => self.layers,
            InsertionMode::Shallow => 1,
        }
    }

    /// Number of prompt rows inserted into a sequence.
    pub fn prompt_rows(&self) -> usize {
        self.select_n * self.tokens_per_entry
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BankEntry {
    pub entry_id: usize,
    pub key: Vec<f64>,
    /// One `tokens_per_entry × d` block per stored layer.
    pub values: Vec<Mat>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptBank {
    config: BankConfig,
    entries: Vec<BankEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LookupResult {
    pub selected_ids: Vec<usize>,
    pub scores: Vec<f64>,
    /// Per stored layer, the selected entries' tokens stacked in selection
    /// order: `(n · tokens_per_entry) × d`.
    pub prompts: Vec<Mat>,
}

/// Cosine distance `1 − ⟨p,k⟩/(‖p‖‖k‖)`, clamped to `[0, 2]`.
pub fn score(prototype: &[f64], key: &[f64]) -> Result<f64> {
    if prototype.len() != key.len() {
        return Err(Error::Shape(format!("score widths {} vs {}", prototype.len(), key.len())));
    }
    let (np, nk) = (norm(prototype), norm(key));
    if np == 0.0 || nk == 0.0 || !np.is_finite() || !nk.is_finite() {
        return Err(Error::ZeroNorm("score"));
    }
    Ok((1.0 - dot(prototype, key) / (np * nk)).clamp(0.0, 2.0))
}

impl PromptBank {
    pub fn new(config: BankConfig, init_prototypes: &[StylePrototype]) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        for p in init_prototypes {
            if p.vector.len() != d {
                return Err(Error::Shape(format!(
                    "prototype for {} has width {} but bank d = {d}",
                    p.style,
                    p.vector.len()
                )));
            }
        }
        let mut rng = stream(&[config.seed, tag::BANK]);
        let entries = (0..config.num_entries)
            .map(|id| {
                let mut key = Mat::uniform(1, d, KEY_INIT, &mut rng).data;
                if let Some(p) = init_prototypes.get(id) {
                    key = p.vector.iter().map(|&v| round_f32(v)).collect();
                }
                let values = (0..config.stored_layers())
                    .map(|_| Mat::uniform(config.tokens_per_entry, d, VALUE_INIT, &mut rng))
                    .collect();
                BankEntry {
                    entry_id: id,
                    key,
                    values,
                }
            })
            .collect();
        Ok(Self { config, entries })
    }

    pub fn config(&self) -> &BankConfig {
        &self.config
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    pub fn entry_mut(&mut self, id: usize) -> &mut BankEntry {
        &mut self.entries[id]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trainable_scalars(&self) -> usize {
        let c = &self.config;
        c.num_entries * (c.d + c.stored_layers() * c.tokens_per_entry * c.d)
    }

    /// `n` entries with smallest γ, ties broken by lower entry id.
    pub fn lookup(&self, prototype: &[f64]) -> Result<LookupResult> {
        if self.entries.is_empty() {
            return Err(Error::Empty("prompt bank"));
        }
        if prototype.len() != self.config.d {
            return Err(Error::Shape(format!(
                "prototype width {} vs bank d = {}",
                prototype.len(),
                self.config.d
            )));
        }
        let mut scored = self
            .entries
            .iter()
            .map(|e| Ok((score(prototype, &e.key)?, e.entry_id)))
            .collect::<Result<Vec<_>>>()?;
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        scored.truncate(self.config.select_n);
        let selected_ids: Vec<usize> = scored.iter().map(|s| s.1).collect();
        let scores = scored.iter().map(|s| s.0).collect();
        let prompts = self.gather_prompts(&selected_ids);
        Ok(LookupResult {
            selected_ids,
            scores,
            prompts,
        })
    }

    /// Stacks the tokens of `ids` per stored layer.
    pub fn gather_prompts(&self, ids: &[usize]) -> Vec<Mat> {
        let c = &self.config;
        (0..c.stored_layers())
            .map(|l| {
                let mut data = Vec::with_capacity(ids.len() * c.tokens_per_entry * c.d);
                for &id in ids {
                    data.extend_from_slice(&self.entries[id].values[l].data);
                }
                Mat::from_vec(ids.len() * c.tokens_per_entry, c.d, data)
            })
            .collect()
    }

    /// Σ over the selected entries of γ(prototype, key).
    pub fn key_alignment_loss(&self, prototype: &[f64], lookup: &LookupResult) -> Result<f64> {
        lookup
            .selected_ids
            .iter()
            .map(|&id| score(prototype, &self.entries[id].key))
            .sum()
    }

    /// Builds `[CLS; prompts of layer; tokens]`. At deep layers above 0 the
    /// caller passes the hidden CLS row and hidden input rows, so the prompt
    /// slots are rewritten while the other positions carry forward.
    pub fn expand_sequence(
        &self,
        cls_token: &[f64],
        lookup: &LookupResult,
        layer: usize,
        embedded_input: &Mat,
    ) -> Result<Mat> {
        let c = &self.config;
        if layer >= c.stored_layers() {
            return Err(Error::OutOfRange(format!(
                "layer {layer} has no prompts in {} mode with {} layers",
                c.insertion_mode, c.layers
            )));
        }
        if cls_token.len() != c.d || embedded_input.cols != c.d {
            return Err(Error::Shape(format!(
                "expand_sequence widths cls={} input={} vs d={}",
                cls_token.len(),
                embedded_input.cols,
                c.d
            )));
        }
        let prompts = lookup
            .prompts
            .get(layer)
            .ok_or_else(|| Error::OutOfRange(format!("lookup has no layer {layer}")))?;
        let rows = 1 + prompts.rows + embedded_input.rows;
        let mut data = Vec::with_capacity(rows * c.d);
        data.extend_from_slice(cls_token);
        data.extend_from_slice(&prompts.data);
        data.extend_from_slice(&embedded_input.data);
        Ok(Mat::from_vec(rows, c.d, data))
    }

    fn serialize(&self) -> Result<Writer> {
        let c = &self.config;
        let mut w = Writer::new();
        w.bytes(BANK_MAGIC)
            .u32(BANK_VERSION)
            .u32(to_u32(c.num_entries, "N")?)
            .u32(to_u32(c.select_n, "n")?)
            .u32(to_u32(c.layers, "layers")?)
            .u32(to_u32(c.d, "d")?)
            .u32(to_u32(c.tokens_per_entry, "tokens_per_entry")?)
            .u8(c.insertion_mode.code());
        for e in &self.entries {
            w.f32s(&e.key);
        }
        for e in &self.entries {
            for v in &e.values {
                w.f32s(&v.data);
            }
        }
        w.u64(c.seed);
        Ok(w)
    }

    /// SHA-256 of the serialized bank.
    pub fn content_hash(&self) -> Hash {
        binfile::sha256(self.serialize().expect("bank dims fit u32").as_slice())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.serialize()?.write_to(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = Reader::open(path)?;
        r.magic(BANK_MAGIC)?;
        let version = r.u32()?;
        if version != BANK_VERSION {
            return Err(r.format_error(format!("unsupported bank version {version}")));
        }
        let num_entries = r.u32()? as usize;
        let select_n = r.u32()? as usize;
        let layers = r.u32()? as usize;
        let d = r.u32()? as usize;
        let tokens_per_entry = r.u32()? as usize;
        let mode = r.u8()?;
        let insertion_mode =
            InsertionMode::from_code(mode).ok_or_else(|| r.format_error(format!("bad insertion mode {mode}")))?;
        let mut config = BankConfig {
            num_entries,
            select_n,
            layers,
            d,
            tokens_per_entry,
            insertion_mode,
            seed: 0,
        };
        config.validate().map_err(|e| r.format_error(e.to_string()))?;

        let stored = config.stored_layers();
        let payload = num_entries * d + num_entries * stored * tokens_per_entry * d;
        r.require(payload * 4 + 8)?;
        let keys: Vec<Vec<f64>> = (0..num_entries).map(|_| r.f32s(d)).collect::<Result<_>>()?;
        let mut entries = Vec::with_capacity(num_entries);
        for (entry_id, key) in keys.into_iter().enumerate() {
            let values = (0..stored)
                .map(|_| Ok(Mat::from_vec(tokens_per_entry, d, r.f32s(tokens_per_entry * d)?)))
                .collect::<Result<_>>()?;
            entries.push(BankEntry { entry_id, key, values });
        }
        config.seed = r.u64()?;
        r.finish()?;
        Ok(Self { config, entries })
    }
}
