//! Place recognition over a map of described images.
//!
//! Every map image gets a holistic descriptor (global max pool, L2
//! normalized) and, for landmark variants, a [`LandmarkSet`]. A query is
//! shortlisted by holistic cosine similarity and the shortlist is reranked
//! by landmark-level [`image_similarity`].

mod eval;

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lln::{lln_forward, ActivationMap, LlnParams};
use crate::matcher::{image_similarity, select_landmarks, LandmarkSet, DEFAULT_STRIDE};
use crate::tensor::{global_max_pool, l2_norm, l2_normalize, FeatureMap};
use crate::trainer::Manifest;

pub use eval::{
    evaluate, holistic_precision_vs_topk, GroundTruth, PrCurve, PrPoint,
};

pub const DEFAULT_SHORTLIST: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DescriptorVariant {
    /// Global max pool only.
    Holistic,
    /// Top-n cells by learned activation.
    Lln,
    /// Top-n cells by base-feature activation strength.
    Act,
    /// n seeded random cells, identical for every image.
    Rand,
    /// Every cell.
    All,
}

impl DescriptorVariant {
    pub const ALL_VARIANTS: [DescriptorVariant; 5] = [
        DescriptorVariant::Holistic,
        DescriptorVariant::Lln,
        DescriptorVariant::Act,
        DescriptorVariant::Rand,
        DescriptorVariant::All,
    ];

    pub fn code(self) -> u32 {
        match self {
            DescriptorVariant::Holistic => 0,
            DescriptorVariant::Lln => 1,
            DescriptorVariant::Act => 2,
            DescriptorVariant::Rand => 3,
            DescriptorVariant::All => 4,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Self::ALL_VARIANTS.into_iter().find(|v| v.code() == code)
    }

    pub fn uses_landmarks(self) -> bool {
        self != DescriptorVariant::Holistic
    }

    pub fn name(self) -> &'static str {
        match self {
            DescriptorVariant::Holistic => "holistic",
            DescriptorVariant::Lln => "lln",
            DescriptorVariant::Act => "act",
            DescriptorVariant::Rand => "rand",
            DescriptorVariant::All => "all",
        }
    }
}

impl fmt::Display for DescriptorVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DescriptorVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL_VARIANTS
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown descriptor variant {s:?} (expected holistic, lln, act, rand or all)"
                ))
            })
    }
}

/// Cell saliency used by the ACT variant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActSaliency {
    #[default]
    L2,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptorConfig {
    pub variant: DescriptorVariant,
    /// Landmarks per image (ignored by Holistic and All).
    pub n: usize,
    pub stride: u32,
    /// Seeds the RAND cell choice.
    pub seed: u64,
    pub act_saliency: ActSaliency,
}

impl DescriptorConfig {
    pub fn new(variant: DescriptorVariant, n: usize) -> Self {
        Self {
            variant,
            n,
            stride: DEFAULT_STRIDE,
            seed: 0,
            act_saliency: ActSaliency::L2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::config("landmark count n must be >= 1"));
        }
        if self.stride == 0 {
            return Err(Error::config("stride must be >= 1"));
        }
        Ok(())
    }
}

/// Holistic + landmark description of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageDescriptor {
    pub image_id: String,
    pub frame: Option<i64>,
    pub holistic: Vec<f64>,
    pub landmarks: Option<LandmarkSet>,
}

/// The RAND variant's cells: `n` distinct row-major cell indices drawn from
/// a `h × w` grid with a fixed seed, so every image of that size shares them.
pub fn random_cells(height: usize, width: usize, n: usize, seed: u64) -> Vec<usize> {
    let total = height * width;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells = sample(&mut rng, total, n.min(total)).into_vec();
    cells.sort_unstable();
    cells
}

/// Saliency map that decides which cells become landmarks.
pub fn saliency(
    features: &FeatureMap,
    config: &DescriptorConfig,
    model: Option<&LlnParams>,
) -> Result<ActivationMap> {
    let (h, w) = (features.height(), features.width());
    match config.variant {
        DescriptorVariant::Lln => {
            let model = model.ok_or_else(|| Error::config("variant lln requires a model"))?;
            lln_forward(features, model)
        }
        DescriptorVariant::Act => {
            let vals = features
                .data()
                .chunks_exact(features.channels())
                .map(|cell| match config.act_saliency {
                    ActSaliency::L2 => l2_norm(cell),
                    ActSaliency::Sum => cell.iter().sum::<f64>().max(0.0),
                })
                .collect();
            ActivationMap::new(h, w, vals)
        }
        DescriptorVariant::Rand => {
            let mut vals = vec![0.0; h * w];
            for c in random_cells(h, w, config.n, config.seed) {
                vals[c] = 1.0;
            }
            ActivationMap::new(h, w, vals)
        }
        DescriptorVariant::All | DescriptorVariant::Holistic => {
            ActivationMap::new(h, w, vec![1.0; h * w])
        }
    }
}

pub fn holistic_descriptor(features: &FeatureMap) -> Vec<f64> {
    l2_normalize(&global_max_pool(features))
}

pub fn describe(
    image_id: &str,
    frame: Option<i64>,
    features: &FeatureMap,
    config: &DescriptorConfig,
    model: Option<&LlnParams>,
) -> Result<ImageDescriptor> {
    config.validate()?;
    let landmarks = if config.variant.uses_landmarks() {
        let act = saliency(features, config, model)?;
        let n = match config.variant {
            DescriptorVariant::All => features.cells(),
            _ => config.n,
        };
        Some(
            select_landmarks(features, &act, n)?
                .with_stride(config.stride)
                .with_image_id(image_id),
        )
    } else {
        None
    };
    Ok(ImageDescriptor {
        image_id: image_id.to_string(),
        frame,
        holistic: holistic_descriptor(features),
        landmarks,
    })
}

/// Described map images sharing one [`DescriptorConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct MapIndex {
    pub config: DescriptorConfig,
    pub entries: Vec<ImageDescriptor>,
}

impl MapIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn channels(&self) -> Option<usize> {
        self.entries.first().map(|e| e.holistic.len())
    }
}

/// Describes every `(id, frame, features)` item.
pub fn build_index_from_features<'a, I>(
    items: I,
    model: Option<&LlnParams>,
    config: DescriptorConfig,
) -> Result<MapIndex>
where
    I: IntoParallelIterator<Item = (&'a str, Option<i64>, &'a FeatureMap)>,
{
    config.validate()?;
    if config.variant == DescriptorVariant::Lln && model.is_none() {
        return Err(Error::config("variant lln requires a model"));
    }
    let entries = items
        .into_par_iter()
        .map(|(id, frame, f)| describe(id, frame, f, &config, model))
        .collect::<Result<Vec<_>>>()?;
    if let Some(c) = entries.first().map(|e| e.holistic.len()) {
        if entries.iter().any(|e| e.holistic.len() != c) {
            return Err(Error::config("map images disagree on channel count"));
        }
    }
    Ok(MapIndex { config, entries })
}

pub fn build_index(
    manifest: &Manifest,
    model: Option<&LlnParams>,
    config: DescriptorConfig,
) -> Result<MapIndex> {
    let features = manifest.load_features()?;
    let items: Vec<(&str, Option<i64>, &FeatureMap)> = manifest
        .entries
        .iter()
        .zip(&features)
        .map(|(e, f)| (e.id.as_str(), e.frame, f))
        .collect();
    build_index_from_features(items, model, config)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Top `top_k` map entries by holistic cosine similarity as
/// `(entry index, similarity)`, descending; equal scores keep index order.
pub fn shortlist(query_holistic: &[f64], index: &MapIndex, top_k: usize) -> Vec<(usize, f64)> {
    let qn = l2_norm(query_holistic);
    let mut scored: Vec<(usize, f64)> = index
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let denom = qn * l2_norm(&e.holistic);
            let s = if denom > 0.0 { dot(query_holistic, &e.holistic) / denom } else { 0.0 };
            (i, s)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(top_k);
    scored
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryResult {
    pub query_id: String,
    /// `(map image id, score)`, scores non-increasing.
    pub ranked: Vec<(String, f64)>,
    pub best_score: f64,
}

impl QueryResult {
    pub fn top1(&self) -> Option<&str> {
        self.ranked.first().map(|(id, _)| id.as_str())
    }
}

/// Ranks the map for one query. Holistic ranks the whole index; landmark
/// variants rerank the holistic shortlist by landmark similarity (ties keep
/// shortlist order).
pub fn query(query: &ImageDescriptor, index: &MapIndex, shortlist_k: usize) -> Result<QueryResult> {
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    if shortlist_k == 0 {
        return Err(Error::config("shortlist size must be >= 1"));
    }
    let ranked: Vec<(usize, f64)> = if index.config.variant.uses_landmarks() {
        let q = query
            .landmarks
            .as_ref()
            .ok_or_else(|| Error::config("query has no landmarks for a landmark index"))?;
        let candidates = shortlist(&query.holistic, index, shortlist_k);
        let mut scored = candidates
            .par_iter()
            .map(|&(i, _)| {
                let m = index.entries[i]
                    .landmarks
                    .as_ref()
                    .ok_or_else(|| Error::config("map entry lacks landmarks"))?;
                Ok((i, image_similarity(q, m)?.score))
            })
            .collect::<Result<Vec<_>>>()?;
        scored.sort_by(|a, b| b.1.total_cmp(&a.1));
        scored
    } else {
        shortlist(&query.holistic, index, index.len())
    };
    let ranked: Vec<(String, f64)> = ranked
        .into_iter()
        .map(|(i, s)| (index.entries[i].image_id.clone(), s))
        .collect();
    Ok(QueryResult {
        query_id: query.image_id.clone(),
        best_score: ranked.first().map_or(0.0, |r| r.1),
        ranked,
    })
}

/// Describes the query with the index's own settings, then ranks.
pub fn query_features(
    query_id: &str,
    features: &FeatureMap,
    index: &MapIndex,
    model: Option<&LlnParams>,
    shortlist_k: usize,
) -> Result<QueryResult> {
    let d = describe(query_id, None, features, &index.config, model)?;
    query(&d, index, shortlist_k)
}

pub const RESULTS_CSV_HEADER: &str = "query_id,rank,map_id,score";

pub fn write_results_csv<W: Write>(out: W, results: &[QueryResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let to_err = |e: csv::Error| Error::config(format!("writing results: {e}"));
    w.write_record(["query_id", "rank", "map_id", "score"]).map_err(to_err)?;
    for r in results {
        for (rank, (id, score)) in r.ranked.iter().enumerate() {
            w.write_record([
                r.query_id.as_str(),
                &(rank + 1).to_string(),
                id.as_str(),
                &score.to_string(),
            ])
            .map_err(to_err)?;
        }
    }
    w.flush().map_err(|e| Error::config(format!("writing results: {e}")))?;
    Ok(())
}

/// Inverse of [`write_results_csv`]; query order follows first appearance.
pub fn read_results_csv<R: std::io::Read>(input: R) -> Result<Vec<QueryResult>> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut out: Vec<QueryResult> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::dataset(format!("results line {}: {e}", line + 2)))?;
        if rec.len() != 4 {
            return Err(Error::dataset(format!("results line {}: expected 4 fields", line + 2)));
        }
        let score: f64 = rec[3]
            .parse()
            .map_err(|_| Error::dataset(format!("results line {}: bad score", line + 2)))?;
        let qid = &rec[0];
        match out.last_mut() {
            Some(r) if r.query_id == qid => r.ranked.push((rec[2].to_string(), score)),
            _ => out.push(QueryResult {
                query_id: qid.to_string(),
                ranked: vec![(rec[2].to_string(), score)],
                best_score: score,
            }),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_features(seed: u64, h: usize, w: usize, c: usize) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::from_fn(h, w, c, |_, _, _| rng.random_range(0.0..1.0))
    }

    fn index_of(maps: &[FeatureMap], config: DescriptorConfig) -> MapIndex {
        let ids: Vec<String> = (0..maps.len()).map(|i| format!("m{i}")).collect();
        let items: Vec<(&str, Option<i64>, &FeatureMap)> = ids
            .iter()
            .zip(maps)
            .enumerate()
            .map(|(i, (id, f))| (id.as_str(), Some(i as i64), f))
            .collect();
        build_index_from_features(items, None, config).unwrap()
    }

    #[test]
    fn all_variant_takes_every_cell() {
        let maps = vec![random_features(1, 3, 4, 5)];
        let idx = index_of(&maps, DescriptorConfig::new(DescriptorVariant::All, 2));
        assert_eq!(idx.entries[0].landmarks.as_ref().unwrap().len(), 12);
    }

    #[test]
    fn rand_cells_are_shared_and_seeded() {
        let maps = vec![random_features(1, 6, 6, 3), random_features(2, 6, 6, 3)];
        let mut cfg = DescriptorConfig::new(DescriptorVariant::Rand, 5);
        cfg.seed = 42;
        let a = index_of(&maps, cfg);
        let b = index_of(&maps, cfg);
        assert_eq!(a, b);
        let cells = |e: &ImageDescriptor| -> Vec<(usize, usize)> {
            let mut v: Vec<_> = e
                .landmarks
                .as_ref()
                .unwrap()
                .landmarks
                .iter()
                .map(|l| (l.grid_x, l.grid_y))
                .collect();
            v.sort();
            v
        };
        assert_eq!(cells(&a.entries[0]), cells(&a.entries[1]));
        assert_eq!(cells(&a.entries[0]).len(), 5);
        assert_eq!(random_cells(6, 6, 5, 42).len(), 5);
        assert_ne!(random_cells(6, 6, 5, 42), random_cells(6, 6, 5, 43));
    }

    #[test]
    fn lln_variant_requires_model() {
        let maps = [random_features(1, 2, 2, 2)];
        let items = vec![("a", None, &maps[0])];
        assert!(build_index_from_features(items, None, DescriptorConfig::new(DescriptorVariant::Lln, 2)).is_err());
        assert!("nope".parse::<DescriptorVariant>().is_err());
        assert_eq!("LLN".parse::<DescriptorVariant>().unwrap(), DescriptorVariant::Lln);
    }

    #[test]
    fn shortlist_small_index_and_exact_hit() {
        let maps: Vec<FeatureMap> = (0..5).map(|s| random_features(s, 3, 3, 8)).collect();
        let idx = index_of(&maps, DescriptorConfig::new(DescriptorVariant::Holistic, 1));
        let q = holistic_descriptor(&maps[3]);
        let s = shortlist(&q, &idx, 30);
        assert_eq!(s.len(), 5);
        assert_eq!(s[0].0, 3);
        assert!(s.windows(2).all(|w| w[0].1 >= w[1].1));
    }

    #[test]
    fn identical_query_scores_n() {
        let maps: Vec<FeatureMap> = (0..4).map(|s| random_features(s, 4, 4, 16)).collect();
        let idx = index_of(&maps, DescriptorConfig::new(DescriptorVariant::Act, 6));
        let r = query_features("q", &maps[2], &idx, None, 30).unwrap();
        assert_eq!(r.top1(), Some("m2"));
        assert!((r.best_score - 6.0).abs() < 1e-12);
        let r1 = query_features("q", &maps[2], &idx, None, 1).unwrap();
        assert_eq!(r1.ranked.len(), 1);
    }

    #[test]
    fn empty_index_errors() {
        let idx = MapIndex {
            config: DescriptorConfig::new(DescriptorVariant::Holistic, 1),
            entries: vec![],
        };
        let d = describe("q", None, &random_features(0, 2, 2, 2), &idx.config, None).unwrap();
        assert!(matches!(query(&d, &idx, 30), Err(Error::EmptyIndex)));
    }

    #[test]
    fn results_csv_roundtrip() {
        let results = vec![
            QueryResult {
                query_id: "q1".into(),
                ranked: vec![("a".into(), 2.5), ("b".into(), 1.0)],
                best_score: 2.5,
            },
            QueryResult {
                query_id: "q2".into(),
                ranked: vec![("b".into(), 0.125)],
                best_score: 0.125,
            },
        ];
        let mut buf = Vec::new();
        write_results_csv(&mut buf, &results).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("query_id,rank,map_id,score\nq1,1,a,2.5\n"));
        assert_eq!(read_results_csv(buf.as_slice()).unwrap(), results);
    }
}
