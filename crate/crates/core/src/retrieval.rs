//! Exact similarity index over precomputed target embeddings.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::binfile::{self, Hash, Reader, Writer};
use crate::encoder::{Backbone, Embedding, Prompts};
use crate::error::{Error, Result};
use crate::mat::{dot, round_f32};
use crate::promptbank::PromptBank;
use crate::prototype::PrototypeEncoder;
use crate::synthdata::{Dataset, Modality, QuerySample, StyleTag};

pub const INDEX_MAGIC: &[u8; 4] = b"URIX";
pub const INDEX_VERSION: u32 = 1;

/// Stands in for the bank hash of an index built without prompts.
pub const NO_BANK: Hash = [0; 32];

/// Turns samples into embeddings: prototype, bank lookup, prompted forward.
/// Without a bank the backbone runs without prompt slots.
#[derive(Clone, Copy)]
pub struct Embedder<'a> {
    pub backbone: &'a Backbone,
    pub bank: Option<&'a PromptBank>,
    pub prototypes: &'a PrototypeEncoder,
}

impl<'a> Embedder<'a> {
    pub fn embed(&self, sample: &QuerySample) -> Result<Embedding> {
        match self.bank {
            None => self.backbone.embed(sample, None),
            Some(bank) => {
                let proto = self.prototypes.query_prototype(sample)?;
                let lookup = bank.lookup(&proto)?;
                self.backbone.embed(sample, Some(Prompts::from_lookup(bank, &lookup)))
            }
        }
    }

    pub fn provenance(&self, manifest_hash: Hash) -> Provenance {
        Provenance {
            bank: self.bank.map_or(NO_BANK, |b| b.content_hash()),
            backbone: self.backbone.content_hash(),
            manifest: manifest_hash,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub bank: Hash,
    pub backbone: Hash,
    pub manifest: Hash,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndexRecord {
    pub id: u64,
    pub embedding: Vec<f64>,
    pub class_id: u32,
    pub instance_id: u32,
    pub style: StyleTag,
    pub modality: Modality,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex {
    d: usize,
    records: Vec<IndexRecord>,
    provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub query_id: u64,
    /// `(record id, similarity)`, best first.
    pub hits: Vec<(u64, f64)>,
}

impl RankedResult {
    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.hits.iter().map(|h| h.0)
    }
}

/// Embeds every sample whose style passes `filter` and stores it with the
/// dataset id. Embeddings are kept on the `f32` grid.
pub fn build_index(dataset: &Dataset, embedder: &Embedder<'_>, filter: &[StyleTag]) -> Result<RetrievalIndex> {
    let targets: Vec<&QuerySample> = dataset.samples().iter().filter(|s| filter.contains(&s.style)).collect();
    if targets.is_empty() {
        return Err(Error::Empty("index targets"));
    }
    let records = targets
        .iter()
        .map(|s| {
            let e = embedder.embed(s)?;
            Ok(IndexRecord {
                id: dataset.sample_id(s.style, s.class_id, s.instance_id),
                embedding: e.as_slice().iter().map(|&v| round_f32(v)).collect(),
                class_id: s.class_id,
                instance_id: s.instance_id,
                style: s.style,
                modality: s.modality(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    RetrievalIndex::from_records(records, embedder.provenance(dataset.manifest_hash()?))
}

impl RetrievalIndex {
    pub fn from_records(records: Vec<IndexRecord>, provenance: Provenance) -> Result<Self> {
        let first = records.first().ok_or(Error::Empty("index records"))?;
        let d = first.embedding.len();
        let mut ids = std::collections::BTreeSet::new();
        for r in &records {
            if r.embedding.len() != d {
                return Err(Error::Shape(format!("record {} width {} vs {d}", r.id, r.embedding.len())));
            }
            let n = crate::mat::norm(&r.embedding);
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::NotNormalized { norm: n });
            }
            if !ids.insert(r.id) {
                return Err(Error::InvalidConfig(format!("duplicate record id {}", r.id)));
            }
        }
        Ok(Self { d, records, provenance })
    }

    pub fn records(&self) -> &[IndexRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn record(&self, id: u64) -> Option<&IndexRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Errors unless the supplied models are the ones the index was built
    /// with.
    pub fn check_provenance(&self, embedder: &Embedder<'_>) -> Result<()> {
        if embedder.backbone.content_hash() != self.provenance.backbone {
            return Err(Error::Provenance("backbone hash differs from index"));
        }
        let bank = embedder.bank.map_or(NO_BANK, |b| b.content_hash());
        if bank != self.provenance.bank {
            return Err(Error::Provenance("bank hash differs from index"));
        }
        Ok(())
    }

    /// Top-`k` records by inner product, optionally restricted to one style.
    /// Ties go to the smaller id.
    pub fn rank(&self, query: &[f64], k: usize, style: Option<StyleTag>) -> Result<Vec<(u64, f64)>> {
        if self.records.is_empty() {
            return Err(Error::Empty("index"));
        }
        if query.len() != self.d {
            return Err(Error::Shape(format!("query width {} vs index {}", query.len(), self.d)));
        }
        let mut scored: Vec<(u64, f64)> = self
            .records
            .iter()
            .filter(|r| style.is_none_or(|s| r.style == s))
            .map(|r| (r.id, dot(query, &r.embedding)))
            .collect();
        if k == 0 || k > scored.len() {
            return Err(Error::OutOfRange(format!("k={k} with {} candidates", scored.len())));
        }
        let order = |a: &(u64, f64), b: &(u64, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_unstable_by(order);
        Ok(scored)
    }

    /// Embeds `sample` and ranks it.
    pub fn query(
        &self,
        sample: &QuerySample,
        query_id: u64,
        embedder: &Embedder<'_>,
        k: usize,
        style: Option<StyleTag>,
    ) -> Result<RankedResult> {
        self.check_provenance(embedder)?;
        let e = embedder.embed(sample)?;
        Ok(RankedResult {
            query_id,
            hits: self.rank(e.as_slice(), k, style)?,
        })
    }

    fn serialize(&self) -> Result<Writer> {
        let mut w = Writer::new();
        w.bytes(INDEX_MAGIC)
            .u32(INDEX_VERSION)
            .u32(binfile::to_u32(self.records.len(), "record count")?)
            .u32(binfile::to_u32(self.d, "index width")?)
            .bytes(&self.provenance.bank)
            .bytes(&self.provenance.backbone)
            .bytes(&self.provenance.manifest);
        for r in &self.records {
            w.u64(r.id)
                .u32(r.class_id)
                .u32(r.instance_id)
                .u8(r.style.code())
                .u8(r.modality.code())
                .f32s(&r.embedding);
        }
        Ok(w)
    }

    pub fn content_hash(&self) -> Result<Hash> {
        Ok(binfile::sha256(self.serialize()?.as_slice()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.serialize()?.write_to(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = Reader::open(path)?;
        r.magic(INDEX_MAGIC)?;
        let version = r.u32()?;
        if version != INDEX_VERSION {
            return Err(r.format_error(format!("unsupported index version {version}")));
        }
        let count = r.u32()? as usize;
        let d = r.u32()? as usize;
        let provenance = Provenance {
            bank: r.hash()?,
            backbone: r.hash()?,
            manifest: r.hash()?,
        };
        r.require(count * (18 + 4 * d))?;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let id = r.u64()?;
            let class_id = r.u32()?;
            let instance_id = r.u32()?;
            let style = StyleTag::from_code(r.u8()?).ok_or_else(|| r.format_error("bad style code"))?;
            let modality = Modality::from_code(r.u8()?).ok_or_else(|| r.format_error("bad modality code"))?;
            let embedding = r.f32s(d)?;
            records.push(IndexRecord {
                id,
                embedding,
                class_id,
                instance_id,
                style,
                modality,
            });
        }
        r.finish()?;
        Self::from_records(records, provenance).map_err(|e| r.format_error(e.to_string()))
    }
}

/// Normalized mean of unit query embeddings. Identical inputs come back
/// unchanged.
pub fn fuse_queries(embeddings: &[Embedding]) -> Result<Embedding> {
    let first = embeddings.first().ok_or(Error::Empty("fusion inputs"))?;
    let d = first.dim();
    let mut mean = vec![0.0; d];
    for e in embeddings {
        if e.dim() != d {
            return Err(Error::Shape(format!("fusion widths {} vs {d}", e.dim())));
        }
        let n = crate::mat::norm(e.as_slice());
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::NotNormalized { norm: n });
        }
        mean.iter_mut().zip(e.as_slice()).for_each(|(m, v)| *m += v);
    }
    if embeddings.iter().all(|e| e == first) {
        return Ok(first.clone());
    }
    mean.iter_mut().for_each(|m| *m /= embeddings.len() as f64);
    let n = crate::mat::norm(&mean);
    if !(n >= 1e-9) {
        return Err(Error::Degenerate { norm: n });
    }
    Embedding::normalized(mean)
}

/// Fraction of results whose ground-truth id is among the first `k` hits.
pub fn recall_at_k(results: &[RankedResult], truth: &BTreeMap<u64, u64>, k: usize) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Empty("recall results"));
    }
    let mut hits = 0usize;
    for r in results {
        let want = truth
            .get(&r.query_id)
            .ok_or_else(|| Error::OutOfRange(format!("query {} has no ground truth", r.query_id)))?;
        if r.ids().take(k).any(|id| id == *want) {
            hits += 1;
        }
    }
    Ok(hits as f64 / results.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub samples_ms: Vec<f64>,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
}

impl StageStats {
    fn from_samples(samples_ms: Vec<f64>) -> Self {
        let mut sorted = samples_ms.clone();
        sorted.sort_by(f64::total_cmp);
        let pct = |p: f64| sorted[((p * (sorted.len() - 1) as f64).round() as usize).min(sorted.len() - 1)];
        Self {
            mean_ms: samples_ms.iter().sum::<f64>() / samples_ms.len() as f64,
            p50_ms: pct(0.5),
            p95_ms: pct(0.95),
            samples_ms,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub index_size: usize,
    pub num_queries: usize,
    pub repetitions: usize,
    /// Per repetition: mean milliseconds per query.
    pub embed: StageStats,
    pub rank: StageStats,
}

/// Times the embed and rank stages over `queries`, once per repetition after
/// one untimed pass.
pub fn measure_latency(
    index: &RetrievalIndex,
    embedder: &Embedder<'_>,
    queries: &[&QuerySample],
    repetitions: usize,
    k: usize,
) -> Result<LatencyReport> {
    if queries.is_empty() {
        return Err(Error::Empty("latency query set"));
    }
    if repetitions < 3 {
        return Err(Error::InvalidConfig("latency needs at least 3 repetitions".into()));
    }
    let embeds = queries.iter().map(|q| embedder.embed(q)).collect::<Result<Vec<_>>>()?;
    let k = k.min(index.len());
    for e in &embeds {
        std::hint::black_box(index.rank(e.as_slice(), k, None)?);
    }
    let per_query = |t: Instant| t.elapsed().as_secs_f64() * 1e3 / queries.len() as f64;
    let mut embed_ms = Vec::with_capacity(repetitions);
    let mut rank_ms = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let t = Instant::now();
        for q in queries {
            std::hint::black_box(embedder.embed(q)?);
        }
        embed_ms.push(per_query(t));
        let t = Instant::now();
        for e in &embeds {
            std::hint::black_box(index.rank(e.as_slice(), k, None)?);
        }
        rank_ms.push(per_query(t));
    }
    Ok(LatencyReport {
        index_size: index.len(),
        num_queries: queries.len(),
        repetitions,
        embed: StageStats::from_samples(embed_ms),
        rank: StageStats::from_samples(rank_ms),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mat::Mat;
    use crate::rng::stream;

    fn random_index(n: usize, d: usize, seed: u64) -> RetrievalIndex {
        let mut rng = stream(&[seed]);
        let records = (0..n)
            .map(|i| {
                let v = Mat::uniform(1, d, 1.0, &mut rng).data;
                let e = Embedding::normalized(v).unwrap();
                IndexRecord {
                    id: i as u64 * 3 + 1,
                    embedding: e.as_slice().iter().map(|&x| round_f32(x)).collect(),
                    class_id: (i % 7) as u32,
                    instance_id: i as u32,
                    style: if i % 2 == 0 { StyleTag::Natural } else { StyleTag::Sketch },
                    modality: Modality::Image,
                }
            })
            .collect();
        RetrievalIndex::from_records(
            records,
            Provenance {
                bank: NO_BANK,
                backbone: [1; 32],
                manifest: [2; 32],
            },
        )
        .unwrap()
    }

    #[test]
    fn rank_matches_full_sort() {
        let idx = random_index(64, 8, 1);
        let mut rng = stream(&[2]);
        for _ in 0..20 {
            let q = Embedding::normalized(Mat::uniform(1, 8, 1.0, &mut rng).data).unwrap();
            let mut all: Vec<(u64, f64)> = idx.records().iter().map(|r| (r.id, dot(q.as_slice(), &r.embedding))).collect();
            all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            for k in [1, 5, 64] {
                assert_eq!(idx.rank(q.as_slice(), k, None).unwrap(), all[..k].to_vec());
            }
        }
    }

    #[test]
    fn ties_go_to_smaller_id() {
        let mut idx = random_index(4, 2, 3);
        for r in &mut idx.records {
            r.embedding = vec![1.0, 0.0];
        }
        let ids: Vec<u64> = idx.rank(&[1.0, 0.0], 4, None).unwrap().iter().map(|h| h.0).collect();
        assert_eq!(ids, vec![1, 4, 7, 10]);
        assert!(idx.rank(&[1.0, 0.0], 5, None).is_err());
        assert!(idx.rank(&[1.0, 0.0], 0, None).is_err());
    }

    #[test]
    fn style_restriction_matches_separate_index() {
        let idx = random_index(40, 6, 4);
        let natural: Vec<IndexRecord> = idx.records().iter().filter(|r| r.style == StyleTag::Natural).cloned().collect();
        let only = RetrievalIndex::from_records(natural, *idx.provenance()).unwrap();
        let q = idx.records()[3].embedding.clone();
        assert_eq!(
            idx.rank(&q, 20, Some(StyleTag::Natural)).unwrap(),
            only.rank(&q, 20, None).unwrap()
        );
    }

    #[test]
    fn duplicate_ids_rejected() {
        let idx = random_index(3, 4, 5);
        let mut recs = idx.records().to_vec();
        recs[1].id = recs[0].id;
        assert!(RetrievalIndex::from_records(recs, *idx.provenance()).is_err());
    }

    #[test]
    fn fusion_properties() {
        let v = Embedding::normalized(vec![0.3, -0.4, 0.5]).unwrap();
        assert_eq!(fuse_queries(&[v.clone(), v.clone()]).unwrap(), v);
        let neg = Embedding::normalized(v.as_slice().iter().map(|x| -x).collect()).unwrap();
        assert!(matches!(fuse_queries(&[v.clone(), neg]), Err(Error::Degenerate { .. })));
        assert!(fuse_queries(&[]).is_err());
    }

    #[test]
    fn recall_examples() {
        let results = vec![
            RankedResult {
                query_id: 0,
                hits: vec![(5, 0.9), (6, 0.5)],
            },
            RankedResult {
                query_id: 1,
                hits: vec![(5, 0.9), (6, 0.5)],
            },
        ];
        let truth: BTreeMap<u64, u64> = [(0, 5), (1, 6)].into();
        assert_eq!(recall_at_k(&results, &truth, 1).unwrap(), 0.5);
        assert_eq!(recall_at_k(&results, &truth, 2).unwrap(), 1.0);
        let partial: BTreeMap<u64, u64> = [(0, 5)].into();
        assert!(recall_at_k(&results, &partial, 1).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idx.bin");
        let idx = random_index(10, 5, 6);
        idx.save(&path).unwrap();
        let back = RetrievalIndex::load(&path).unwrap();
        assert_eq!(back, idx);
        assert_eq!(back.content_hash().unwrap(), idx.content_hash().unwrap());
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 4 + 4 * 3 + 96 + 10 * (18 + 20));
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(RetrievalIndex::load(&path), Err(Error::Truncated { missing: 7, .. })));
    }

    #[test]
    fn stage_stats_percentiles() {
        let s = StageStats::from_samples(vec![3.0, 1.0, 2.0]);
        assert_eq!((s.mean_ms, s.p50_ms, s.p95_ms), (2.0, 2.0, 3.0));
        assert_eq!(s.samples_ms.len(), 3);
    }
}
