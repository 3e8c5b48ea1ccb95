//! Frozen style/context feature map and prototype averaging.
//!
//! Image samples are summarized by statistics of patch-level linear
//! features (per-feature mean and standard deviation over patches), which
//! respond to texture and palette far more than to object position. Text
//! samples use the mean of a fixed token embedding table. Both paths are
//! projected to the shared width `d`.

use serde::{Deserialize, Serialize};

use crate::binfile::{self, Hash, Writer};
use crate::error::{Error, Result};
use crate::mat::{norm, Mat};
use crate::rng::{stream, tag};
use crate::synthdata::{Payload, QuerySample, StyleTag, PAD_TOKEN};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeConfig {
    pub d: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct PrototypeEncoder {
    config: PrototypeConfig,
    patch_proj: Mat,
    stat_proj: Mat,
    stat_bias: Mat,
    token_table: Mat,
    text_proj: Mat,
    text_bias: Mat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StylePrototype {
    pub style: StyleTag,
    pub vector: Vec<f64>,
    pub m: usize,
}

impl PrototypeEncoder {
    pub fn new(config: PrototypeConfig) -> Result<Self> {
        let PrototypeConfig {
            d,
            patch_size,
            image_size,
            vocab_size,
            seed,
        } = config;
        if d == 0 || patch_size == 0 || image_size % patch_size != 0 || vocab_size == 0 {
            return Err(Error::InvalidConfig(format!("bad prototype encoder config {config:?}")));
        }
        let mut rng = stream(&[seed, tag::PROTOTYPE]);
        let patch_in = patch_size * patch_size * 3;
        let mut patch_proj = Mat::uniform(patch_in, d, (3.0 / patch_in as f64).sqrt(), &mut rng);
        // Zero-sum filters respond to contrast rather than flat color.
        for c in 0..d {
            let mean = (0..patch_in).map(|r| patch_proj.get(r, c)).sum::<f64>() / patch_in as f64;
            for r in 0..patch_in {
                patch_proj.row_mut(r)[c] -= mean;
            }
        }
        let stat_proj = Mat::uniform(2 * d, d, (3.0 / (2 * d) as f64).sqrt(), &mut rng);
        let stat_bias = Mat::uniform(1, d, 0.1, &mut rng);
        let token_table = Mat::uniform(vocab_size, d, 1.0, &mut rng);
        let text_proj = Mat::uniform(d, d, (3.0 / d as f64).sqrt(), &mut rng);
        let text_bias = Mat::uniform(1, d, 0.1, &mut rng);
        Ok(Self {
            config,
            patch_proj,
            stat_proj,
            stat_bias,
            token_table,
            text_proj,
            text_bias,
        })
    }

    pub fn config(&self) -> &PrototypeConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.d
    }

    pub fn content_hash(&self) -> Hash {
        let mut w = Writer::new();
        for m in [
            &self.patch_proj,
            &self.stat_proj,
            &self.stat_bias,
            &self.token_table,
            &self.text_proj,
            &self.text_bias,
        ] {
            w.f32s(&m.data);
        }
        binfile::sha256(w.as_slice())
    }

    /// Raw (unnormalized) style feature of one sample.
    pub fn embed_style_sample(&self, sample: &QuerySample) -> Result<Vec<f64>> {
        let out = match &sample.payload {
            Payload::Image(img) => {
                if img.pixels.is_empty() {
                    return Err(Error::Empty("image payload"));
                }
                let s = self.config.image_size;
                if img.height != s || img.width != s || img.channels != 3 {
                    return Err(Error::Shape(format!(
                        "image {}x{}x{} vs encoder {s}x{s}x3",
                        img.height, img.width, img.channels
                    )));
                }
                let feats = img.patches(self.config.patch_size)?.matmul(&self.patch_proj);
                let (p, f) = feats.shape();
                let mut stats = vec![0.0; 2 * f];
                for c in 0..f {
                    let mean = (0..p).map(|r| feats.get(r, c)).sum::<f64>() / p as f64;
                    let var = (0..p).map(|r| (feats.get(r, c) - mean).powi(2)).sum::<f64>() / p as f64;
                    stats[c] = mean;
                    stats[f + c] = var.sqrt();
                }
                let mut v = Mat::row_vector(stats).matmul(&self.stat_proj);
                v.add_assign(&self.stat_bias);
                v.data
            }
            Payload::Text(text) => {
                let ids: Vec<usize> = text
                    .tokens
                    .iter()
                    .filter(|&&t| t != PAD_TOKEN)
                    .map(|&t| t as usize)
                    .collect();
                if ids.is_empty() {
                    return Err(Error::Empty("text payload has no tokens"));
                }
                let d = self.config.d;
                let mut mean = vec![0.0; d];
                for &id in &ids {
                    if id >= self.config.vocab_size {
                        return Err(Error::OutOfRange(format!("token id {id}")));
                    }
                    for (m, v) in mean.iter_mut().zip(self.token_table.row(id)) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= ids.len() as f64);
                let mut v = Mat::row_vector(mean).matmul(&self.text_proj);
                v.add_assign(&self.text_bias);
                v.data
            }
        };
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::OutOfRange("non-finite style feature".into()));
        }
        Ok(out)
    }

    /// Unit-norm prototype of a single query (the `m = 1` case).
    pub fn query_prototype(&self, query: &QuerySample) -> Result<Vec<f64>> {
        let f = self.embed_style_sample(query)?;
        Ok(compute_prototype(query.style, &[f])?.vector)
    }
}

/// Arithmetic mean of the features, L2-normalized.
pub fn compute_prototype(style: StyleTag, features: &[Vec<f64>]) -> Result<StylePrototype> {
    let first = features.first().ok_or(Error::Empty("prototype feature list"))?;
    let d = first.len();
    if d == 0 {
        return Err(Error::Empty("zero-width feature"));
    }
    let mut mean = vec![0.0; d];
    for f in features {
        if f.len() != d {
            return Err(Error::Shape(format!("feature width {} vs {d}", f.len())));
        }
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    let m = features.len();
    mean.iter_mut().for_each(|v| *v /= m as f64);
    let n = norm(&mean);
    if !(n >= 1e-9) {
        return Err(Error::Degenerate { norm: n });
    }
    mean.iter_mut().for_each(|v| *v /= n);
    Ok(StylePrototype {
        style,
        vector: mean,
        m,
    })
}

/// Mean prototype for each style over the given samples.
pub fn style_prototypes<'a>(
    enc: &PrototypeEncoder,
    styles: &[StyleTag],
    samples: impl Iterator<Item = &'a QuerySample> + Clone,
) -> Result<Vec<StylePrototype>> {
    styles
        .iter()
        .map(|&style| {
            let feats = samples
                .clone()
                .filter(|s| s.style == style)
                .map(|s| enc.embed_style_sample(s))
                .collect::<Result<Vec<_>>>()?;
            compute_prototype(style, &feats)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{Dataset, DatasetConfig, SynthImage};

    fn encoder(seed: u64) -> PrototypeEncoder {
        PrototypeEncoder::new(PrototypeConfig {
            d: 32,
            patch_size: 8,
            image_size: 32,
            vocab_size: 64,
            seed,
        })
        .unwrap()
    }

    fn image_sample(img: SynthImage) -> QuerySample {
        QuerySample {
            class_id: img.class_id,
            instance_id: img.instance_id,
            style: img.style,
            payload: Payload::Image(img),
        }
    }

    #[test]
    fn single_feature_prototype_is_normalized_input() {
        let v = vec![3.0, 4.0];
        let p = compute_prototype(StyleTag::Sketch, &[v]).unwrap();
        assert_eq!(p.vector, vec![0.6, 0.8]);
        assert_eq!(p.m, 1);
    }

    #[test]
    fn opposite_features_are_degenerate() {
        let v = vec![1.0, -2.0, 0.5];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!(matches!(
            compute_prototype(StyleTag::Art, &[v, neg]),
            Err(Error::Degenerate { .. })
        ));
        assert!(matches!(compute_prototype(StyleTag::Art, &[]), Err(Error::Empty(_))));
    }

    #[test]
    fn mean_matches_independent_resummation() {
        let mut rng = stream(&[77]);
        let feats: Vec<Vec<f64>> = (0..3)
            .map(|_| Mat::uniform(1, 16, 1.0, &mut rng).data)
            .collect();
        let p = compute_prototype(StyleTag::Lowres, &feats).unwrap();
        let mut expect = [0.0f64; 16];
        for i in 0..16 {
            expect[i] = (feats[0][i] + feats[1][i] + feats[2][i]) / 3.0;
        }
        let n = expect.iter().map(|v| v * v).sum::<f64>().sqrt();
        for i in 0..16 {
            assert!((p.vector[i] - expect[i] / n).abs() < 1e-12);
        }
        assert_eq!(p.m, 3);
    }

    #[test]
    fn zero_image_gives_bias_output() {
        let enc = encoder(3);
        let zero = image_sample(SynthImage::blank(32, 0, 0));
        let out = enc.embed_style_sample(&zero).unwrap();
        assert_eq!(out, enc.stat_bias.data);
    }

    #[test]
    fn distinct_samples_distinct_directions() {
        let ds = Dataset::generate(&DatasetConfig::default()).unwrap();
        let enc = encoder(1);
        let picks = [
            ds.get(StyleTag::Natural, 0, 0),
            ds.get(StyleTag::Sketch, 3, 1),
            ds.get(StyleTag::Art, 5, 2),
        ];
        let protos: Vec<_> = picks.iter().map(|s| enc.query_prototype(s).unwrap()).collect();
        for a in 0..3 {
            for b in a + 1..3 {
                let cos = crate::mat::dot(&protos[a], &protos[b]);
                assert!(cos < 1.0 - 1e-9, "{a} {b} cos {cos}");
            }
        }
    }

    #[test]
    fn embedding_does_not_touch_parameters() {
        let ds = Dataset::generate(&DatasetConfig::default()).unwrap();
        let enc = encoder(2);
        let before = enc.content_hash();
        for s in ds.samples().iter().take(40) {
            enc.embed_style_sample(s).unwrap();
        }
        assert_eq!(before, enc.content_hash());
    }

    #[test]
    fn shape_mismatch_and_empty_text_rejected() {
        let enc = encoder(0);
        assert!(matches!(
            enc.embed_style_sample(&image_sample(SynthImage::blank(16, 0, 0))),
            Err(Error::Shape(_))
        ));
        let empty = QuerySample {
            class_id: 0,
            instance_id: 0,
            style: StyleTag::Text,
            payload: Payload::Text(crate::synthdata::SynthText {
                tokens: vec![0; 20],
                length: 0,
                class_id: 0,
                instance_id: 0,
            }),
        };
        assert!(matches!(enc.embed_style_sample(&empty), Err(Error::Empty(_))));
    }

    #[test]
    fn query_prototype_is_unit_and_repeatable() {
        let ds = Dataset::generate(&DatasetConfig::default()).unwrap();
        let enc = encoder(4);
        let s = ds.get(StyleTag::Text, 2, 3);
        let a = enc.query_prototype(s).unwrap();
        assert_eq!(a, enc.query_prototype(s).unwrap());
        assert!((norm(&a) - 1.0).abs() < 1e-12);
        let raw = enc.embed_style_sample(s).unwrap();
        let n = norm(&raw);
        for (x, y) in a.iter().zip(&raw) {
            assert_eq!(*x, y / n);
        }
    }
}
