//! Frozen two-tower transformer encoder with prompt-slot injection.
//!
//! The vision tower consumes linear patch embeddings, the text tower consumes
//! token embeddings; both share width `d` so the same prompt tensors can be
//! injected into either. The input sequence at layer 0 is
//! `[CLS; prompts; tokens]`. In deep mode the prompt rows are overwritten with
//! the next layer's tokens before every block, so the sequence length never
//! changes. The output is the final CLS row after a closing layer norm,
//! scaled to unit length.

mod warmup;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binfile::{self, to_u32, Hash, Reader, Writer};
use crate::error::{Error, Result};
use crate::mat::{norm, round_f32, Mat};
use crate::promptbank::{InsertionMode, LookupResult, PromptBank};
use crate::rng::{stream, tag};
use crate::synthdata::{Payload, QuerySample, SynthImage, SynthText, PAD_TOKEN};
use crate::tape::{Tape, Var};

pub use warmup::{warmup_backbone, WarmupConfig, WarmupReport};

pub const BACKBONE_MAGIC: &[u8; 4] = b"UBKB";
pub const BACKBONE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub layers: usize,
    pub d: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            d: 32,
            heads: 4,
            mlp_ratio: 2,
            patch_size: 8,
            image_size: 32,
            vocab_size: 64,
            max_text_len: crate::synthdata::MAX_TEXT_LEN,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.layers == 0 || self.d == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return bad("layers, d, heads and mlp_ratio must be >= 1".into());
        }
        if self.d % self.heads != 0 {
            return bad(format!("d={} not divisible by heads={}", self.d, self.heads));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size={} not divisible by patch_size={}",
                self.image_size, self.patch_size
            ));
        }
        if self.vocab_size < 2 || self.max_text_len == 0 {
            return bad("vocab_size must be >= 2 and max_text_len >= 1".into());
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

/// Unit-norm encoder output.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(vector: Vec<f64>) -> Result<Self> {
        let n = norm(&vector);
        if !vector.iter().all(|v| v.is_finite()) || (n - 1.0).abs() > 1e-6 {
            return Err(Error::NotNormalized { norm: n });
        }
        Ok(Self(vector))
    }

    /// Scales `vector` to unit norm.
    pub fn normalized(mut vector: Vec<f64>) -> Result<Self> {
        let n = norm(&vector);
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::ZeroNorm("Embedding::normalized"));
        }
        vector.iter_mut().for_each(|v| *v /= n);
        Ok(Self(vector))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

#[derive(Clone, Copy, Debug)]
pub enum EncoderInput<'a> {
    Image(&'a SynthImage),
    Text(&'a SynthText),
}

impl<'a> From<&'a QuerySample> for EncoderInput<'a> {
    fn from(s: &'a QuerySample) -> Self {
        match &s.payload {
            Payload::Image(img) => EncoderInput::Image(img),
            Payload::Text(t) => EncoderInput::Text(t),
        }
    }
}

/// Prompt tokens for one forward pass: one block per stored layer.
#[derive(Clone, Copy, Debug)]
pub struct Prompts<'a> {
    pub layers: &'a [Mat],
    pub mode: InsertionMode,
}

impl<'a> Prompts<'a> {
    pub fn from_lookup(bank: &PromptBank, lookup: &'a LookupResult) -> Self {
        Self {
            layers: &lookup.prompts,
            mode: bank.config().insertion_mode,
        }
    }

    pub fn rows(&self) -> usize {
        self.layers.first().map_or(0, |m| m.rows)
    }
}

/// Prompt leaves already placed on a tape.
#[derive(Clone, Copy, Debug)]
pub struct PromptVars<'a> {
    pub layers: &'a [Var],
    pub mode: InsertionMode,
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    ln1_g: Mat,
    ln1_b: Mat,
    wq: Mat,
    bq: Mat,
    wk: Mat,
    bk: Mat,
    wv: Mat,
    bv: Mat,
    wo: Mat,
    bo: Mat,
    ln2_g: Mat,
    ln2_b: Mat,
    w1: Mat,
    b1: Mat,
    w2: Mat,
    b2: Mat,
}

const BLOCK_TENSORS: usize = 16;

impl Block {
    fn new(d: usize, hidden: usize, rng: &mut impl rand::Rng) -> Self {
        let lim = |fan_in: usize| (3.0 / fan_in as f64).sqrt();
        Self {
            ln1_g: Mat::filled(1, d, 1.0),
            ln1_b: Mat::zeros(1, d),
            wq: Mat::uniform(d, d, lim(d), rng),
            bq: Mat::zeros(1, d),
            wk: Mat::uniform(d, d, lim(d), rng),
            bk: Mat::zeros(1, d),
            wv: Mat::uniform(d, d, lim(d), rng),
            bv: Mat::zeros(1, d),
            wo: Mat::uniform(d, d, lim(d), rng),
            bo: Mat::zeros(1, d),
            ln2_g: Mat::filled(1, d, 1.0),
            ln2_b: Mat::zeros(1, d),
            w1: Mat::uniform(d, hidden, lim(d), rng),
            b1: Mat::zeros(1, hidden),
            w2: Mat::uniform(hidden, d, lim(hidden), rng),
            b2: Mat::zeros(1, d),
        }
    }

    fn tensors(&self) -> [&Mat; BLOCK_TENSORS] {
        [
            &self.ln1_g, &self.ln1_b, &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv,
            &self.wo, &self.bo, &self.ln2_g, &self.ln2_b, &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Mat; BLOCK_TENSORS] {
        [
            &mut self.ln1_g, &mut self.ln1_b, &mut self.wq, &mut self.bq, &mut self.wk, &mut self.bk,
            &mut self.wv, &mut self.bv, &mut self.wo, &mut self.bo, &mut self.ln2_g, &mut self.ln2_b,
            &mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Tower {
    cls: Mat,
    pos: Mat,
    blocks: Vec<Block>,
    lnf_g: Mat,
    lnf_b: Mat,
}

impl Tower {
    fn new(cfg: &BackboneConfig, positions: usize, rng: &mut impl rand::Rng) -> Self {
        let d = cfg.d;
        Self {
            cls: Mat::uniform(1, d, 0.5, rng),
            pos: Mat::uniform(positions, d, 0.5, rng),
            blocks: (0..cfg.layers).map(|_| Block::new(d, d * cfg.mlp_ratio, rng)).collect(),
            lnf_g: Mat::filled(1, d, 1.0),
            lnf_b: Mat::zeros(1, d),
        }
    }

    fn tensor_count(&self) -> usize {
        4 + BLOCK_TENSORS * self.blocks.len()
    }

    fn tensors(&self) -> Vec<&Mat> {
        let mut v = vec![&self.cls, &self.pos];
        for b in &self.blocks {
            v.extend(b.tensors());
        }
        v.push(&self.lnf_g);
        v.push(&self.lnf_b);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut v = vec![&mut self.cls, &mut self.pos];
        for b in &mut self.blocks {
            v.extend(b.tensors_mut());
        }
        v.push(&mut self.lnf_g);
        v.push(&mut self.lnf_b);
        v
    }
}

/// Frozen feature extractor. Parameter order (also the file and hash order):
/// patch projection, patch bias, token table, then the vision tower and the
/// text tower, each as CLS, positional table, per-block
/// `ln1 γ/β, Wq, bq, Wk, bk, Wv, bv, Wo, bo, ln2 γ/β, W1, b1, W2, b2`, and the
/// final layer-norm γ/β.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    config: BackboneConfig,
    patch_w: Mat,
    patch_b: Mat,
    token_table: Mat,
    vision: Tower,
    text: Tower,
    frozen: bool,
}

/// Records which backbone tensors were placed on a tape.
pub(crate) struct Binder {
    trainable: bool,
    pub(crate) bound: Vec<(usize, Var)>,
}

impl Binder {
    pub(crate) fn new(trainable: bool) -> Self {
        Self {
            trainable,
            bound: Vec::new(),
        }
    }

    fn bind(&mut self, tape: &mut Tape, index: usize, m: &Mat) -> Var {
        let v = tape.leaf(m.clone(), self.trainable);
        if self.trainable {
            self.bound.push((index, v));
        }
        v
    }
}

const VISION_BASE: usize = 3;

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(&[config.seed, tag::BACKBONE]);
        let pd = config.patch_dim();
        let d = config.d;
        let patch_w = Mat::uniform(pd, d, (3.0 / pd as f64).sqrt(), &mut rng);
        let patch_b = Mat::zeros(1, d);
        let token_table = Mat::uniform(config.vocab_size, d, 1.0, &mut rng);
        let vision = Tower::new(&config, 1 + config.num_patches(), &mut rng);
        let text = Tower::new(&config, 1 + config.max_text_len, &mut rng);
        Ok(Self {
            config,
            patch_w,
            patch_b,
            token_table,
            vision,
            text,
            frozen: false,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn params(&self) -> Vec<&Mat> {
        let mut v = vec![&self.patch_w, &self.patch_b, &self.token_table];
        v.extend(self.vision.tensors());
        v.extend(self.text.tensors());
        v
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Mat> {
        let mut v = vec![&mut self.patch_w, &mut self.patch_b, &mut self.token_table];
        v.extend(self.vision.tensors_mut());
        v.extend(self.text.tensors_mut());
        v
    }

    pub fn total_scalars(&self) -> usize {
        self.params().iter().map(|m| m.len()).sum()
    }

    fn payload(&self) -> Writer {
        let mut w = Writer::new();
        for p in self.params() {
            w.f32s(&p.data);
        }
        w
    }

    /// SHA-256 of the parameter payload.
    pub fn content_hash(&self) -> Hash {
        binfile::sha256(self.payload().as_slice())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let c = &self.config;
        let mut w = Writer::new();
        w.bytes(BACKBONE_MAGIC).u32(BACKBONE_VERSION);
        for v in [
            c.layers,
            c.d,
            c.heads,
            c.mlp_ratio,
            c.patch_size,
            c.image_size,
            c.vocab_size,
            c.max_text_len,
        ] {
            w.u32(to_u32(v, "backbone config")?);
        }
        w.u64(c.seed);
        w.bytes(self.payload().as_slice());
        w.write_to(path)
    }

    /// Loaded backbones are frozen.
    pub fn load(path: &Path) -> Result<Self> {
        let mut r = Reader::open(path)?;
        r.magic(BACKBONE_MAGIC)?;
        let version = r.u32()?;
        if version != BACKBONE_VERSION {
            return Err(r.format_error(format!("unsupported backbone version {version}")));
        }
        let mut f = [0usize; 8];
        for v in &mut f {
            *v = r.u32()? as usize;
        }
        let config = BackboneConfig {
            layers: f[0],
            d: f[1],
            heads: f[2],
            mlp_ratio: f[3],
            patch_size: f[4],
            image_size: f[5],
            vocab_size: f[6],
            max_text_len: f[7],
            seed: r.u64()?,
        };
        let mut bb = Backbone::new(config).map_err(|e| r.format_error(e.to_string()))?;
        let total = bb.total_scalars();
        r.require(total * 4)?;
        for p in bb.params_mut() {
            p.data = r.f32s(p.len())?;
        }
        r.finish()?;
        bb.frozen = true;
        Ok(bb)
    }

    /// Rounds every parameter onto the `f32` grid.
    pub(crate) fn snap_to_f32(&mut self) {
        for p in self.params_mut() {
            p.data.iter_mut().for_each(|v| *v = round_f32(*v));
        }
    }

    fn check_image(&self, img: &SynthImage) -> Result<()> {
        let s = self.config.image_size;
        if img.height != s || img.width != s || img.channels != 3 {
            return Err(Error::Shape(format!(
                "image {}x{}x{} vs backbone {s}x{s}x3",
                img.height, img.width, img.channels
            )));
        }
        Ok(())
    }

    fn check_text(&self, text: &SynthText) -> Result<()> {
        if text.tokens.len() != self.config.max_text_len {
            return Err(Error::Shape(format!(
                "text length {} vs {}",
                text.tokens.len(),
                self.config.max_text_len
            )));
        }
        if let Some(&bad) = text.tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::OutOfRange(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Patch tokens with positional encodings (no CLS, no prompts).
    pub fn patch_embed(&self, img: &SynthImage) -> Result<Mat> {
        self.check_image(img)?;
        let mut x = img.patches(self.config.patch_size)?.matmul(&self.patch_w);
        for r in 0..x.rows {
            let pos = self.vision.pos.row(r + 1);
            for ((v, b), p) in x.row_mut(r).iter_mut().zip(&self.patch_b.data).zip(pos) {
                *v += b + p;
            }
        }
        Ok(x)
    }

    /// Token embeddings with positional encodings, plus the attention mask
    /// (`false` at padding positions).
    pub fn tokenize_text(&self, text: &SynthText) -> Result<(Mat, Vec<bool>)> {
        self.check_text(text)?;
        let d = self.config.d;
        let mut x = Mat::zeros(text.tokens.len(), d);
        for (r, &t) in text.tokens.iter().enumerate() {
            let pos = self.text.pos.row(r + 1);
            for ((v, e), p) in x.row_mut(r).iter_mut().zip(self.token_table.row(t as usize)).zip(pos) {
                *v = e + p;
            }
        }
        let mask = text.tokens.iter().map(|&t| t != PAD_TOKEN).collect();
        Ok((x, mask))
    }

    /// Length of the expanded sequence fed to the first block.
    pub fn sequence_len(&self, input: EncoderInput<'_>, prompt_rows: usize) -> usize {
        let tokens = match input {
            EncoderInput::Image(_) => self.config.num_patches(),
            EncoderInput::Text(_) => self.config.max_text_len,
        };
        1 + prompt_rows + tokens
    }

    fn check_prompts(&self, rows: usize, layers: usize, mode: InsertionMode) -> Result<()> {
        let want = match mode {
            InsertionMode::Deep => self.config.layers,
            InsertionMode::Shallow => 1,
        };
        if layers != want {
            return Err(Error::Shape(format!(
                "{mode} prompts need {want} layer blocks, got {layers} (rows {rows})"
            )));
        }
        Ok(())
    }

    /// Embeds one input, with prompts or (when `None`) without prompt slots.
    pub fn forward(&self, input: EncoderInput<'_>, prompts: Option<Prompts<'_>>) -> Result<Embedding> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(false);
        let vars: Option<Vec<Var>> = match prompts {
            Some(p) => {
                self.check_prompts(p.rows(), p.layers.len(), p.mode)?;
                for m in p.layers {
                    if m.cols != self.config.d || m.rows != p.rows() {
                        return Err(Error::Shape(format!(
                            "prompt block {}x{} vs width {}",
                            m.rows, m.cols, self.config.d
                        )));
                    }
                }
                Some(p.layers.iter().map(|m| tape.constant(m.clone())).collect())
            }
            None => None,
        };
        let pv = vars.as_deref().map(|layers| PromptVars {
            layers,
            mode: prompts.expect("vars imply prompts").mode,
        });
        let out = self.graph(&mut tape, &mut binder, input, pv)?;
        Embedding::new(tape.value(out).data.clone())
    }

    /// Embeds a dataset sample.
    pub fn embed(&self, sample: &QuerySample, prompts: Option<Prompts<'_>>) -> Result<Embedding> {
        self.forward(sample.into(), prompts)
    }

    /// Builds the forward graph on `tape` and returns the unit-norm `1×d`
    /// output node.
    pub(crate) fn graph(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        input: EncoderInput<'_>,
        prompts: Option<PromptVars<'_>>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let (tower, base, tokens, token_mask) = match input {
            EncoderInput::Image(img) => {
                self.check_image(img)?;
                let patches = tape.constant(img.patches(cfg.patch_size)?);
                let w = binder.bind(tape, 0, &self.patch_w);
                let b = binder.bind(tape, 1, &self.patch_b);
                let x = tape.matmul(patches, w);
                let x = tape.add_row(x, b);
                (&self.vision, VISION_BASE, x, vec![true; cfg.num_patches()])
            }
            EncoderInput::Text(text) => {
                self.check_text(text)?;
                let table = binder.bind(tape, 2, &self.token_table);
                let ids: Vec<usize> = text.tokens.iter().map(|&t| t as usize).collect();
                let x = tape.gather(table, &ids);
                let mask = text.tokens.iter().map(|&t| t != PAD_TOKEN).collect();
                (&self.text, VISION_BASE + self.vision.tensor_count(), x, mask)
            }
        };
        let n_tokens = token_mask.len();
        let cls = binder.bind(tape, base, &tower.cls);
        let pos = binder.bind(tape, base + 1, &tower.pos);
        let pos_cls = tape.slice_rows(pos, 0, 1);
        let pos_tok = tape.slice_rows(pos, 1, n_tokens);
        let cls_row = tape.add(cls, pos_cls);
        let x_e = tape.add(tokens, pos_tok);

        let n_prompt = match prompts {
            Some(p) => {
                self.check_prompts(0, p.layers.len(), p.mode)?;
                tape.value(p.layers[0]).rows
            }
            None => 0,
        };
        let mut seq = match prompts {
            Some(p) => tape.concat_rows(&[cls_row, p.layers[0], x_e]),
            None => tape.concat_rows(&[cls_row, x_e]),
        };
        let mut mask = vec![true; 1 + n_prompt];
        mask.extend(token_mask);

        let last = tower.blocks.len() - 1;
        for (l, block) in tower.blocks.iter().enumerate() {
            if let Some(p) = prompts {
                if l > 0 && p.mode == InsertionMode::Deep {
                    let head = tape.slice_rows(seq, 0, 1);
                    let tail = tape.slice_rows(seq, 1 + n_prompt, n_tokens);
                    seq = tape.concat_rows(&[head, p.layers[l], tail]);
                }
            }
            let block_base = base + 2 + l * BLOCK_TENSORS;
            seq = self.block_graph(tape, binder, block, block_base, seq, &mask, l == last);
        }
        let lnf_base = base + 2 + tower.blocks.len() * BLOCK_TENSORS;
        let g = binder.bind(tape, lnf_base, &tower.lnf_g);
        let b = binder.bind(tape, lnf_base + 1, &tower.lnf_b);
        let cls_out = tape.slice_rows(seq, 0, 1);
        let y = tape.layer_norm(cls_out, g, b);
        Ok(tape.normalize_rows(y))
    }

    /// Pre-norm block. With `cls_only`, only row 0 is propagated (the last
    /// block's other rows never reach the output).
    #[allow(clippy::too_many_arguments)]
    fn block_graph(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        block: &Block,
        base: usize,
        x: Var,
        mask: &[bool],
        cls_only: bool,
    ) -> Var {
        let t = block.tensors();
        let p: Vec<Var> = t.iter().enumerate().map(|(i, m)| binder.bind(tape, base + i, m)).collect();
        let [ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2] =
            <[Var; BLOCK_TENSORS]>::try_from(p).expect("block tensor count");

        let h = tape.layer_norm(x, ln1_g, ln1_b);
        let q_src = if cls_only { tape.slice_rows(h, 0, 1) } else { h };
        let q = tape.matmul(q_src, wq);
        let q = tape.add_row(q, bq);
        let k = tape.matmul(h, wk);
        let k = tape.add_row(k, bk);
        let v = tape.matmul(h, wv);
        let v = tape.add_row(v, bv);

        let heads = self.config.heads;
        let dh = self.config.d / heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let outs: Vec<Var> = (0..heads)
            .map(|hd| {
                let qh = tape.slice_cols(q, hd * dh, dh);
                let kh = tape.slice_cols(k, hd * dh, dh);
                let vh = tape.slice_cols(v, hd * dh, dh);
                let s = tape.matmul_bt(qh, kh);
                let s = tape.scale(s, inv_sqrt);
                let a = tape.softmax_masked(s, Some(mask));
                tape.matmul(a, vh)
            })
            .collect();
        let o = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
        let o = tape.matmul(o, wo);
        let o = tape.add_row(o, bo);
        let resid = if cls_only { tape.slice_rows(x, 0, 1) } else { x };
        let x1 = tape.add(resid, o);

        let m = tape.layer_norm(x1, ln2_g, ln2_b);
        let m = tape.matmul(m, w1);
        let m = tape.add_row(m, b1);
        let m = tape.gelu(m);
        let m = tape.matmul(m, w2);
        let m = tape.add_row(m, b2);
        tape.add(x1, m)
    }
}
