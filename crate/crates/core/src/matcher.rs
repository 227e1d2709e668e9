//! Landmark-level image similarity.
//!
//! The `n` most activated cells of each image become landmarks. Landmarks of
//! two images are paired by mutual nearest neighbour under cosine similarity,
//! the dominant integer cell offset among the pairs is found with a 2-D
//! histogram, and every pair is down-weighted by a unit-variance Gaussian of
//! its deviation from that offset. The image score is the weighted sum of
//! pair similarities.
//!
//! Coordinates are feature-grid cells throughout; pixel centres are carried
//! along only for downstream consumers.

use std::collections::BTreeMap;
use std::io::Write;

use crate::error::{Error, Result};
use crate::lln::ActivationMap;
use crate::tensor::{FeatureMap, L2_EPS};

/// Pixels per feature-grid cell.
pub const DEFAULT_STRIDE: u32 = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Landmark {
    pub grid_x: usize,
    pub grid_y: usize,
    pub descriptor: Vec<f64>,
    pub activation: f64,
    pub region_center_px: Option<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    pub image_id: String,
    pub landmarks: Vec<Landmark>,
    pub grid_width: usize,
    pub grid_height: usize,
    pub stride: u32,
}

fn region_center(x: usize, y: usize, stride: u32) -> (f64, f64) {
    let s = stride as f64;
    (x as f64 * s + s / 2.0, y as f64 * s + s / 2.0)
}

impl LandmarkSet {
    /// Re-anchors pixel centres to a different stride.
    pub fn with_stride(mut self, stride: u32) -> Self {
        self.stride = stride;
        for l in &mut self.landmarks {
            l.region_center_px = Some(region_center(l.grid_x, l.grid_y, stride));
        }
        self
    }

    pub fn with_image_id(mut self, id: impl Into<String>) -> Self {
        self.image_id = id.into();
        self
    }

    pub fn len(&self) -> usize {
        self.landmarks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.landmarks.is_empty()
    }

    pub fn descriptor_dim(&self) -> Option<usize> {
        self.landmarks.first().map(|l| l.descriptor.len())
    }
}

/// Keeps the `n` cells with the largest activation; equal activations are
/// ordered by row-major cell index.
pub fn select_landmarks(
    features: &FeatureMap,
    activations: &ActivationMap,
    n: usize,
) -> Result<LandmarkSet> {
    if features.height() != activations.height() || features.width() != activations.width() {
        return Err(Error::config(format!(
            "activation map {}x{} does not match feature grid {}x{}",
            activations.height(),
            activations.width(),
            features.height(),
            features.width()
        )));
    }
    if n == 0 {
        return Err(Error::config("landmark count n must be >= 1"));
    }
    let w = features.width();
    let mut order: Vec<usize> = (0..features.cells()).collect();
    let vals = activations.values();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
    order.truncate(n);
    let landmarks = order
        .into_iter()
        .map(|cell| {
            let (y, x) = (cell / w, cell % w);
            Landmark {
                grid_x: x,
                grid_y: y,
                descriptor: features.cell(y, x).to_vec(),
                activation: vals[cell],
                region_center_px: Some(region_center(x, y, DEFAULT_STRIDE)),
            }
        })
        .collect();
    Ok(LandmarkSet {
        image_id: String::new(),
        landmarks,
        grid_width: w,
        grid_height: features.height(),
        stride: DEFAULT_STRIDE,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cosine {
    pub value: f64,
    /// One of the inputs had (near) zero norm; `value` is then 0.
    pub degenerate: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cosine_from_parts(dot: f64, norm_a: f64, norm_b: f64) -> Cosine {
    let denom = norm_a * norm_b;
    if norm_a <= L2_EPS || norm_b <= L2_EPS {
        return Cosine {
            value: 0.0,
            degenerate: true,
        };
    }
    Cosine {
        value: (dot / denom).clamp(-1.0, 1.0),
        degenerate: false,
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<Cosine> {
    if a.len() != b.len() {
        return Err(Error::config(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(cosine_from_parts(dot(a, b), norm(a), norm(b)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchPair {
    pub index_a: usize,
    pub index_b: usize,
    pub similarity: f64,
    /// Geometric weight; `None` until [`image_similarity`] assigns it.
    pub weight: Option<f64>,
}

/// Full `|A| × |B|` cosine similarity matrix, row-major.
fn similarity_matrix(set_a: &LandmarkSet, set_b: &LandmarkSet) -> Result<Vec<f64>> {
    if let (Some(da), Some(db)) = (set_a.descriptor_dim(), set_b.descriptor_dim()) {
        if da != db
            || set_a.landmarks.iter().any(|l| l.descriptor.len() != da)
            || set_b.landmarks.iter().any(|l| l.descriptor.len() != db)
        {
            return Err(Error::config(format!(
                "landmark descriptor dims differ ({da} vs {db})"
            )));
        }
    }
    let norms_b: Vec<f64> = set_b.landmarks.iter().map(|l| norm(&l.descriptor)).collect();
    let nb = set_b.len();
    let mut sims = vec![0.0; set_a.len() * nb];
    for (i, la) in set_a.landmarks.iter().enumerate() {
        let na = norm(&la.descriptor);
        let row = &mut sims[i * nb..(i + 1) * nb];
        for ((s, lb), &nbj) in row.iter_mut().zip(&set_b.landmarks).zip(&norms_b) {
            *s = cosine_from_parts(dot(&la.descriptor, &lb.descriptor), na, nbj).value;
        }
    }
    Ok(sims)
}

/// Mutual nearest neighbours by cosine similarity. Ties on a best match go
/// to the lower index. Pairs come out ordered by `index_a`.
pub fn cross_match(set_a: &LandmarkSet, set_b: &LandmarkSet) -> Result<Vec<MatchPair>> {
    let sims = similarity_matrix(set_a, set_b)?;
    let (na, nb) = (set_a.len(), set_b.len());
    if na == 0 || nb == 0 {
        return Ok(Vec::new());
    }
    let best_in_b: Vec<usize> = (0..na)
        .map(|i| {
            let row = &sims[i * nb..(i + 1) * nb];
            let mut best = 0;
            for j in 1..nb {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    let mut best_in_a = vec![0usize; nb];
    for (j, best) in best_in_a.iter_mut().enumerate() {
        for i in 1..na {
            if sims[i * nb + j] > sims[*best * nb + j] {
                *best = i;
            }
        }
    }
    Ok(best_in_b
        .iter()
        .enumerate()
        .filter(|&(i, &j)| best_in_a[j] == i)
        .map(|(i, &j)| MatchPair {
            index_a: i,
            index_b: j,
            similarity: sims[i * nb + j],
            weight: None,
        })
        .collect())
}

/// Dominant integer cell offset `(x_a − x_b, y_a − y_b)` among matched pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct OffsetMode {
    pub dx: i64,
    pub dy: i64,
}

fn pair_offset(pair: &MatchPair, set_a: &LandmarkSet, set_b: &LandmarkSet) -> (i64, i64) {
    let a = &set_a.landmarks[pair.index_a];
    let b = &set_b.landmarks[pair.index_b];
    (
        a.grid_x as i64 - b.grid_x as i64,
        a.grid_y as i64 - b.grid_y as i64,
    )
}

/// All bins sharing the maximum count, ordered by squared norm and then
/// lexicographically on `(dx, dy)`.
fn modal_offsets(
    pairs: &[MatchPair],
    set_a: &LandmarkSet,
    set_b: &LandmarkSet,
) -> Result<Vec<OffsetMode>> {
    if pairs.is_empty() {
        return Err(Error::NoMutualMatches);
    }
    let mut bins: BTreeMap<(i64, i64), usize> = BTreeMap::new();
    for p in pairs {
        *bins.entry(pair_offset(p, set_a, set_b)).or_default() += 1;
    }
    let top = *bins.values().max().expect("non-empty histogram");
    let mut modes: Vec<OffsetMode> = bins
        .into_iter()
        .filter(|&(_, c)| c == top)
        .map(|((dx, dy), _)| OffsetMode { dx, dy })
        .collect();
    modes.sort_by_key(|m| (m.dx * m.dx + m.dy * m.dy, m.dx, m.dy));
    Ok(modes)
}

/// Most frequent pair offset at one-cell bin width. Ties go to the smallest
/// Euclidean norm, then to the lexicographically smallest `(dx, dy)`.
pub fn offset_histogram(
    pairs: &[MatchPair],
    set_a: &LandmarkSet,
    set_b: &LandmarkSet,
) -> Result<OffsetMode> {
    Ok(modal_offsets(pairs, set_a, set_b)?[0])
}

/// `exp(-½ ‖offset − mode‖²)` in cell units.
pub fn match_weight(
    pair: &MatchPair,
    set_a: &LandmarkSet,
    set_b: &LandmarkSet,
    mode: OffsetMode,
) -> f64 {
    let (ox, oy) = pair_offset(pair, set_a, set_b);
    let ex = (ox - mode.dx) as f64;
    let ey = (oy - mode.dy) as f64;
    (-0.5 * (ex * ex + ey * ey)).exp()
}

/// One weighted correspondence, with everything a relocalization consumer
/// needs to constrain keypoint matching to the two regions.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedMatch {
    pub pair: MatchPair,
    pub cell_a: (usize, usize),
    pub cell_b: (usize, usize),
    pub center_a_px: (f64, f64),
    pub center_b_px: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityResult {
    pub score: f64,
    pub mode: Option<OffsetMode>,
    pub matches: Vec<WeightedMatch>,
}

fn weighted_score(
    pairs: &[MatchPair],
    set_a: &LandmarkSet,
    set_b: &LandmarkSet,
    mode: OffsetMode,
) -> f64 {
    pairs
        .iter()
        .map(|p| match_weight(p, set_a, set_b, mode) * p.similarity)
        .sum()
}

/// Weighted sum of mutual-match similarities.
///
/// When several offsets tie for the histogram maximum, the one giving the
/// highest score is used (earlier in [`offset_histogram`] order on equal
/// scores). That keeps the score symmetric in its arguments and invariant to
/// translating either set.
pub fn image_similarity(set_a: &LandmarkSet, set_b: &LandmarkSet) -> Result<SimilarityResult> {
    let pairs = cross_match(set_a, set_b)?;
    if pairs.is_empty() {
        return Ok(SimilarityResult {
            score: 0.0,
            mode: None,
            matches: Vec::new(),
        });
    }
    let modes = modal_offsets(&pairs, set_a, set_b)?;
    let mut best = (modes[0], weighted_score(&pairs, set_a, set_b, modes[0]));
    for &m in &modes[1..] {
        let s = weighted_score(&pairs, set_a, set_b, m);
        if s > best.1 {
            best = (m, s);
        }
    }
    let (mode, score) = best;
    let matches = pairs
        .into_iter()
        .map(|mut p| {
            p.weight = Some(match_weight(&p, set_a, set_b, mode));
            let a = &set_a.landmarks[p.index_a];
            let b = &set_b.landmarks[p.index_b];
            WeightedMatch {
                pair: p,
                cell_a: (a.grid_x, a.grid_y),
                cell_b: (b.grid_x, b.grid_y),
                center_a_px: a
                    .region_center_px
                    .unwrap_or_else(|| region_center(a.grid_x, a.grid_y, set_a.stride)),
                center_b_px: b
                    .region_center_px
                    .unwrap_or_else(|| region_center(b.grid_x, b.grid_y, set_b.stride)),
            }
        })
        .collect();
    Ok(SimilarityResult {
        score,
        mode: Some(mode),
        matches,
    })
}

pub const MATCHES_CSV_HEADER: &str = "query_cell_x,query_cell_y,map_cell_x,map_cell_y,similarity,weight,query_px_x,query_px_y,map_px_x,map_px_y";

/// Writes matched pairs as CSV, query image as side A.
pub fn write_matches_csv<W: Write>(out: &mut W, result: &SimilarityResult) -> std::io::Result<()> {
    writeln!(out, "{MATCHES_CSV_HEADER}")?;
    for m in &result.matches {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            m.cell_a.0,
            m.cell_a.1,
            m.cell_b.0,
            m.cell_b.1,
            m.pair.similarity,
            m.pair.weight.unwrap_or(1.0),
            m.center_a_px.0,
            m.center_a_px.1,
            m.center_b_px.0,
            m.center_b_px.1
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lm(x: usize, y: usize, d: Vec<f64>) -> Landmark {
        Landmark {
            grid_x: x,
            grid_y: y,
            descriptor: d,
            activation: 1.0,
            region_center_px: None,
        }
    }

    fn set(ls: Vec<Landmark>) -> LandmarkSet {
        LandmarkSet {
            image_id: "t".into(),
            landmarks: ls,
            grid_width: 16,
            grid_height: 16,
            stride: 32,
        }
    }

    fn basis(dim: usize, k: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[k] = 1.0;
        v
    }

    #[test]
    fn select_all_cells_sorted() {
        let f = FeatureMap::from_fn(2, 3, 1, |y, x, _| (y * 3 + x) as f64);
        let a = ActivationMap::new(2, 3, vec![0.5, 2.0, 0.5, 1.0, 0.0, 3.0]).unwrap();
        let s = select_landmarks(&f, &a, 6).unwrap();
        let cells: Vec<(usize, usize)> = s.landmarks.iter().map(|l| (l.grid_x, l.grid_y)).collect();
        assert_eq!(cells, vec![(2, 1), (1, 0), (0, 1), (0, 0), (2, 0), (1, 1)]);
        assert_eq!(select_landmarks(&f, &a, 100).unwrap().len(), 6);
        assert_eq!(s.landmarks[0].region_center_px, Some((80.0, 48.0)));
    }

    #[test]
    fn select_one_hot_first() {
        let f = FeatureMap::zeros(3, 3, 2);
        let mut v = vec![0.0; 9];
        v[7] = 1.0;
        let s = select_landmarks(&f, &ActivationMap::new(3, 3, v).unwrap(), 1).unwrap();
        assert_eq!((s.landmarks[0].grid_x, s.landmarks[0].grid_y), (1, 2));
        assert!(select_landmarks(&f, &ActivationMap::new(3, 3, vec![0.0; 9]).unwrap(), 0).is_err());
    }

    #[test]
    fn cosine_examples() {
        let c = cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert!((c.value - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 3.0]).unwrap().value, 0.0);
        let z = cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!(z.degenerate && z.value == 0.0);
        assert!(cosine_similarity(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn cross_match_identity_and_single() {
        let a = set((0..4).map(|k| lm(k, 0, basis(4, k))).collect());
        let pairs = cross_match(&a, &a).unwrap();
        assert_eq!(pairs.len(), 4);
        for (k, p) in pairs.iter().enumerate() {
            assert_eq!((p.index_a, p.index_b), (k, k));
            assert_eq!(p.similarity, 1.0);
        }

        let one = set(vec![lm(0, 0, vec![1.0, 0.0])]);
        let two = set(vec![lm(0, 0, vec![1.0, 1.0]), lm(0, 0, vec![1.0, 0.1])]);
        let pairs = cross_match(&one, &two).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!((pairs[0].index_a, pairs[0].index_b), (0, 1));
    }

    #[test]
    fn cross_match_tie_goes_to_lower_index() {
        let a = set(vec![lm(0, 0, vec![1.0, 0.0])]);
        let b = set(vec![lm(0, 0, vec![1.0, 0.0]), lm(1, 0, vec![2.0, 0.0])]);
        let pairs = cross_match(&a, &b).unwrap();
        assert_eq!(pairs[0].index_b, 0);
    }

    fn pairs_with_offsets(offsets: &[(i64, i64)]) -> (Vec<MatchPair>, LandmarkSet, LandmarkSet) {
        let mut la = Vec::new();
        let mut lb = Vec::new();
        let mut pairs = Vec::new();
        for (k, &(dx, dy)) in offsets.iter().enumerate() {
            la.push(lm((dx + 8) as usize, (dy + 8) as usize, vec![1.0]));
            lb.push(lm(8, 8, vec![1.0]));
            pairs.push(MatchPair {
                index_a: k,
                index_b: k,
                similarity: 1.0,
                weight: None,
            });
        }
        (pairs, set(la), set(lb))
    }

    #[test]
    fn histogram_modes() {
        let (p, a, b) = pairs_with_offsets(&[(2, 0); 4]);
        assert_eq!(offset_histogram(&p, &a, &b).unwrap(), OffsetMode { dx: 2, dy: 0 });

        let (p, a, b) = pairs_with_offsets(&[(0, 0), (5, 5), (0, 0), (0, 0)]);
        assert_eq!(offset_histogram(&p, &a, &b).unwrap(), OffsetMode { dx: 0, dy: 0 });

        let (p, a, b) = pairs_with_offsets(&[(1, 0), (1, 0), (0, 1), (0, 1)]);
        assert_eq!(offset_histogram(&p, &a, &b).unwrap(), OffsetMode { dx: 0, dy: 1 });

        let (p, a, b) = pairs_with_offsets(&[(3, 3), (-1, 0)]);
        assert_eq!(offset_histogram(&p, &a, &b).unwrap(), OffsetMode { dx: -1, dy: 0 });

        assert!(matches!(
            offset_histogram(&[], &a, &b),
            Err(Error::NoMutualMatches)
        ));
    }

    #[test]
    fn weights_by_deviation() {
        let (p, a, b) = pairs_with_offsets(&[(2, 0), (3, 0), (3, 1)]);
        let mode = OffsetMode { dx: 2, dy: 0 };
        assert_eq!(match_weight(&p[0], &a, &b, mode), 1.0);
        assert!((match_weight(&p[1], &a, &b, mode) - (-0.5f64).exp()).abs() < 1e-15);
        assert!((match_weight(&p[2], &a, &b, mode) - (-1.0f64).exp()).abs() < 1e-15);
        assert!((match_weight(&p[1], &a, &b, mode) - 0.6065).abs() < 1e-4);
        assert!((match_weight(&p[2], &a, &b, mode) - 0.3679).abs() < 1e-4);
    }

    #[test]
    fn identical_sets_score_n() {
        let a = set((0..5).map(|k| lm(k, k, basis(5, k))).collect());
        let r = image_similarity(&a, &a).unwrap();
        assert!((r.score - 5.0).abs() < 1e-12);
        assert_eq!(r.mode, Some(OffsetMode { dx: 0, dy: 0 }));
    }

    #[test]
    fn no_matches_scores_zero() {
        let r = image_similarity(&set(vec![]), &set(vec![lm(0, 0, vec![1.0])])).unwrap();
        assert_eq!(r.score, 0.0);
        assert!(r.matches.is_empty());
    }

    #[test]
    fn tied_modes_resolved_symmetrically() {
        // Two offset bins with equal counts but different similarity mass.
        let a = set(vec![
            lm(1, 0, basis(4, 0)),
            lm(2, 0, basis(4, 1)),
            lm(0, 1, basis(4, 2)),
            lm(0, 2, basis(4, 3)),
        ]);
        let b = set(vec![
            lm(0, 0, basis(4, 0)),
            lm(1, 0, basis(4, 1)),
            lm(0, 0, vec![0.0, 0.0, 0.5, 0.1]),
            lm(0, 1, vec![0.0, 0.0, 0.1, 0.5]),
        ]);
        let ab = image_similarity(&a, &b).unwrap();
        let ba = image_similarity(&b, &a).unwrap();
        assert!((ab.score - ba.score).abs() < 1e-12);
        assert_eq!(ab.mode, Some(OffsetMode { dx: 1, dy: 0 }));
        assert_eq!(ba.mode, Some(OffsetMode { dx: -1, dy: 0 }));
    }

    #[test]
    fn matches_csv_layout() {
        let a = set(vec![lm(1, 2, vec![1.0])]).with_stride(32);
        let r = image_similarity(&a, &a).unwrap();
        let mut buf = Vec::new();
        write_matches_csv(&mut buf, &r).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], MATCHES_CSV_HEADER);
        assert_eq!(lines[1], "1,2,1,2,1,1,48,80,48,80");
    }
}
