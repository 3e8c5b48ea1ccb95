use std::collections::BTreeMap;

use proptest::prelude::*;

use stylebank::encoder::{Backbone, BackboneConfig, Embedding, EncoderInput};
use stylebank::promptbank::{BankConfig, InsertionMode, PromptBank};
use stylebank::prototype::{compute_prototype, PrototypeConfig, PrototypeEncoder};
use stylebank::retrieval::{fuse_queries, recall_at_k, IndexRecord, Provenance, RankedResult, RetrievalIndex};
use stylebank::synthdata::{apply_style, Dataset, DatasetConfig, Modality, SynthImage, SynthText, StyleTag, MAX_TEXT_LEN};
use stylebank::training::{distance, triplet_loss};

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig::with_cases(n)
}

fn vec_in(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, d).prop_filter("nonzero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-6)
}

fn unit(d: usize) -> impl Strategy<Value = Embedding> {
    vec_in(d).prop_map(|v| Embedding::normalized(v).unwrap())
}

fn cos_dist(p: &[f64], k: &[f64]) -> f64 {
    let dot: f64 = p.iter().zip(k).map(|(a, b)| a * b).sum();
    let np = p.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nk = k.iter().map(|a| a * a).sum::<f64>().sqrt();
    1.0 - dot / (np * nk)
}

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    if n < k {
        return vec![];
    }
    let mut out = subsets(n - 1, k);
    for mut s in subsets(n - 1, k - 1) {
        s.push(n - 1);
        out.push(s);
    }
    out
}

fn bank(num_entries: usize, select_n: usize, d: usize, layers: usize, tpe: usize, mode: InsertionMode, seed: u64) -> PromptBank {
    PromptBank::new(
        BankConfig {
            num_entries,
            select_n,
            layers,
            d,
            tokens_per_entry: tpe,
            insertion_mode: mode,
            seed,
        },
        &[],
    )
    .unwrap()
}

fn random_image(pixels: Vec<f64>) -> SynthImage {
    let mut img = SynthImage::blank(8, 0, 0);
    img.pixels = pixels;
    img
}

proptest! {
    #![proptest_config(cases(64))]

    #[test]
    fn lookup_is_the_subset_argmin(n_entries in 1usize..=8, pick in 1usize..=4, seed in any::<u64>(), proto in vec_in(6)) {
        let n = pick.min(n_entries);
        let b = bank(n_entries, n, 6, 1, 1, InsertionMode::Deep, seed);
        let got = b.lookup(&proto).unwrap();
        let cost = |s: &[usize]| s.iter().map(|&i| cos_dist(&proto, &b.entries()[i].key)).sum::<f64>();
        let best = subsets(n_entries, n)
            .into_iter()
            .min_by(|a, b| cost(a).total_cmp(&cost(b)))
            .unwrap();
        let mut sel = got.selected_ids.clone();
        sel.sort();
        prop_assert!((cost(&sel) - cost(&best)).abs() < 1e-12);
        prop_assert!(got.scores.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(got.selected_ids.len(), n);
    }

    #[test]
    fn expanded_length_law(n_entries in 1usize..=6, pick in 1usize..=4, tpe in 1usize..=3, len in 1usize..=20, seed in any::<u64>()) {
        let n = pick.min(n_entries);
        let layers = 3;
        let b = bank(n_entries, n, 4, layers, tpe, InsertionMode::Deep, seed);
        let l = b.lookup(&[1.0, 0.5, -0.25, 0.0]).unwrap();
        let input = stylebank::mat::Mat::filled(len, 4, 0.5);
        for layer in 0..layers {
            let seq = b.expand_sequence(&[0.0; 4], &l, layer, &input).unwrap();
            prop_assert_eq!(seq.rows, 1 + n * tpe + len);
        }
    }

    #[test]
    fn bank_round_trips(n_entries in 1usize..=6, tpe in 1usize..=2, shallow in any::<bool>(), seed in any::<u64>()) {
        let mode = if shallow { InsertionMode::Shallow } else { InsertionMode::Deep };
        let b = bank(n_entries, 1, 5, 2, tpe, mode, seed);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bank.bin");
        b.save(&p).unwrap();
        let back = PromptBank::load(&p).unwrap();
        prop_assert_eq!(back.content_hash(), b.content_hash());
        prop_assert_eq!(back.entries(), b.entries());
    }

    #[test]
    fn prototype_mean_contracts(feats in prop::collection::vec(vec_in(5), 1..6), copies in 1usize..5, rot in 0usize..6) {
        let v = &feats[0];
        let one = compute_prototype(StyleTag::Art, std::slice::from_ref(v)).unwrap();
        let many = compute_prototype(StyleTag::Art, &vec![v.clone(); copies]).unwrap();
        for (a, b) in one.vector.iter().zip(&many.vector) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        let mut rotated = feats.clone();
        let r = rot % feats.len();
        rotated.rotate_left(r);
        if let (Ok(p), Ok(q)) = (compute_prototype(StyleTag::Art, &feats), compute_prototype(StyleTag::Art, &rotated)) {
            let n: f64 = p.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-6);
            for (a, b) in p.vector.iter().zip(&q.vector) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn loss_ranges(a in unit(7), b in unit(7), c in unit(7), margin in 0.01f64..1.0) {
        let d = distance(&a, &b).unwrap();
        prop_assert!((0.0..=2.0).contains(&d));
        let t = triplet_loss(&a, &b, &c, margin).unwrap();
        prop_assert!(t >= 0.0 && t <= margin + 2.0 + 1e-12);
        let dot = |x: &Embedding, y: &Embedding| x.as_slice().iter().zip(y.as_slice()).map(|(p, q)| p * q).sum::<f64>();
        let oracle = (margin + (1.0 - dot(&a, &b)) - (1.0 - dot(&a, &c))).max(0.0);
        prop_assert!((t - oracle).abs() < 1e-12);
    }

    #[test]
    fn fusion_is_normalized_mean(vs in prop::collection::vec(unit(6), 1..5)) {
        let fused = fuse_queries(&vs).unwrap();
        let mut mean = vec![0.0; 6];
        for v in &vs {
            for (m, x) in mean.iter_mut().zip(v.as_slice()) {
                *m += x / vs.len() as f64;
            }
        }
        let n = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (f, m) in fused.as_slice().iter().zip(&mean) {
            prop_assert!((f - m / n).abs() < 1e-12);
        }
        let same = fuse_queries(&vec![vs[0].clone(); vs.len()]).unwrap();
        prop_assert_eq!(same, vs[0].clone());
    }

    #[test]
    fn ranking_matches_full_sort_with_ties(
        base in prop::collection::vec(unit(4), 2..12),
        dup in prop::collection::vec(0usize..12, 0..8),
        q in unit(4),
        k in 1usize..24,
    ) {
        let mut embs: Vec<Vec<f64>> = base.iter().map(|e| e.as_slice().to_vec()).collect();
        for &i in &dup {
            embs.push(embs[i % base.len()].clone());
        }
        let records: Vec<IndexRecord> = embs
            .iter()
            .enumerate()
            .map(|(i, e)| IndexRecord {
                id: (embs.len() - i) as u64 * 7,
                embedding: e.clone(),
                class_id: 0,
                instance_id: i as u32,
                style: if i % 3 == 0 { StyleTag::Natural } else { StyleTag::Sketch },
                modality: Modality::Image,
            })
            .collect();
        let prov = Provenance { bank: [0; 32], backbone: [1; 32], manifest: [2; 32] };
        let index = RetrievalIndex::from_records(records.clone(), prov).unwrap();
        let k = k.min(records.len());
        let got = index.rank(q.as_slice(), k, None).unwrap();
        let mut all: Vec<(u64, f64)> = records
            .iter()
            .map(|r| (r.id, r.embedding.iter().zip(q.as_slice()).map(|(a, b)| a * b).sum()))
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        prop_assert_eq!(got.iter().map(|h| h.0).collect::<Vec<_>>(), all[..k].iter().map(|h| h.0).collect::<Vec<_>>());

        // Restricting the shared index to one style equals an index of that style alone.
        let natural: Vec<IndexRecord> = records.iter().filter(|r| r.style == StyleTag::Natural).cloned().collect();
        let only = RetrievalIndex::from_records(natural.clone(), prov).unwrap();
        let kk = natural.len();
        prop_assert_eq!(index.rank(q.as_slice(), kk, Some(StyleTag::Natural)).unwrap(), only.rank(q.as_slice(), kk, None).unwrap());
    }

    #[test]
    fn recall_is_monotone_in_k(orders in prop::collection::vec(Just((0u64..10).collect::<Vec<_>>()).prop_shuffle(), 1..8), truth_ids in prop::collection::vec(0u64..10, 8)) {
        let results: Vec<RankedResult> = orders
            .iter()
            .enumerate()
            .map(|(q, o)| RankedResult { query_id: q as u64, hits: o.iter().map(|&id| (id, 0.0)).collect() })
            .collect();
        let truth: BTreeMap<u64, u64> = (0..results.len()).map(|q| (q as u64, truth_ids[q])).collect();
        let r: Vec<f64> = (1..=10).map(|k| recall_at_k(&results, &truth, k).unwrap()).collect();
        prop_assert!(r.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(r[9], 1.0);
    }

    #[test]
    fn styles_stay_in_range_and_repeat(px in prop::collection::vec(0.0f64..=1.0, 8 * 8 * 3), seed in any::<u64>()) {
        let img = random_image(px);
        for style in [StyleTag::Sketch, StyleTag::Art, StyleTag::Lowres] {
            let a = apply_style(&img, style, seed).unwrap();
            let b = apply_style(&img, style, seed).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!(a.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(a.style, style);
        }
    }
}

proptest! {
    #![proptest_config(cases(24))]

    #[test]
    fn encoder_output_is_unit(tokens in prop::collection::vec(1u32..64, 1..=MAX_TEXT_LEN), seed in 0u64..4) {
        let bb = Backbone::new(BackboneConfig { layers: 2, d: 8, heads: 2, seed, ..Default::default() }).unwrap();
        let length = tokens.len();
        let mut padded = tokens.clone();
        padded.resize(MAX_TEXT_LEN, 0);
        let text = SynthText { tokens: padded, length, class_id: 0, instance_id: 0 };
        let e = bb.forward(EncoderInput::Text(&text), None).unwrap();
        let n = e.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((n - 1.0).abs() < 1e-6);
        prop_assert!(e.as_slice().iter().all(|x| x.is_finite()));
    }
}

#[test]
fn regeneration_is_identical_and_correspondence_holds() {
    let cfg = DatasetConfig {
        num_classes: 3,
        instances_per_class: 3,
        ..Default::default()
    };
    let a = Dataset::generate(&cfg).unwrap();
    let b = Dataset::generate(&cfg).unwrap();
    assert_eq!(a.samples(), b.samples());
    for s in a.samples().iter().filter(|s| s.style != StyleTag::Natural) {
        let matches = a
            .of_style(StyleTag::Natural)
            .iter()
            .filter(|n| (n.class_id, n.instance_id) == (s.class_id, s.instance_id))
            .count();
        assert_eq!(matches, 1);
    }
}

#[test]
fn prototype_encoder_is_frozen_under_use() {
    let enc = PrototypeEncoder::new(PrototypeConfig {
        d: 16,
        patch_size: 8,
        image_size: 32,
        vocab_size: 64,
        seed: 5,
    })
    .unwrap();
    let before = enc.content_hash();
    let ds = Dataset::generate(&DatasetConfig {
        num_classes: 2,
        instances_per_class: 2,
        ..Default::default()
    })
    .unwrap();
    for s in ds.samples() {
        enc.query_prototype(s).unwrap();
    }
    assert_eq!(enc.content_hash(), before);
}
