//! Brute-force reference implementations and random instance generators
//! shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use vpr_core::lln::LlnParams;
use vpr_core::matcher::{Landmark, LandmarkSet};
use vpr_core::tensor::{conv2d_forward, ConvLayer, FeatureMap};

pub fn random_map<R: Rng>(rng: &mut R, h: usize, w: usize, c: usize) -> FeatureMap {
    FeatureMap::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0..1.0))
}

pub fn random_nonneg_map<R: Rng>(rng: &mut R, h: usize, w: usize, c: usize) -> FeatureMap {
    FeatureMap::from_fn(h, w, c, |_, _, _| rng.random_range(0.0..1.0))
}

pub fn random_layer<R: Rng>(rng: &mut R, k: usize, cin: usize, cout: usize) -> ConvLayer {
    let mut layer = ConvLayer::zeros(k, cin, cout).unwrap();
    for w in &mut layer.weights {
        *w = rng.random_range(-1.0..1.0);
    }
    for b in &mut layer.bias {
        *b = rng.random_range(-1.0..1.0);
    }
    layer
}

/// Copies the input into an explicitly zero-padded buffer and evaluates
/// every output as a plain sum, bias first, then taps in (ky, kx, i) order.
pub fn conv_oracle(input: &FeatureMap, layer: &ConvLayer) -> FeatureMap {
    let (h, w, c) = (input.height(), input.width(), input.channels());
    let k = layer.kernel_size;
    let r = k / 2;
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    let mut padded = vec![0.0; ph * pw * c];
    for y in 0..h {
        for x in 0..w {
            for i in 0..c {
                padded[((y + r) * pw + x + r) * c + i] = input.get(y, x, i);
            }
        }
    }
    let out_c = layer.out_channels;
    FeatureMap::from_fn(h, w, out_c, |y, x, o| {
        let mut acc = layer.bias[o];
        for ky in 0..k {
            for kx in 0..k {
                for i in 0..c {
                    let v = padded[((y + ky) * pw + x + kx) * c + i];
                    acc += v * layer.weights[((ky * k + kx) * c + i) * out_c + o];
                }
            }
        }
        acc
    })
}

pub fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na <= 1e-12 || nb <= 1e-12 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Mutual nearest neighbours from the full similarity table. Each argmax
/// keeps the first (lowest) index among equal maxima.
pub fn cross_match_oracle(a: &LandmarkSet, b: &LandmarkSet) -> Vec<(usize, usize, f64)> {
    let sim: Vec<Vec<f64>> = a
        .landmarks
        .iter()
        .map(|la| b.landmarks.iter().map(|lb| oracle_cosine(&la.descriptor, &lb.descriptor)).collect())
        .collect();
    let argmax = |vals: &mut dyn Iterator<Item = f64>| {
        let mut best: Option<(usize, f64)> = None;
        for (i, v) in vals.enumerate() {
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((i, v));
            }
        }
        best.map(|b| b.0)
    };
    let mut out = Vec::new();
    for i in 0..a.len() {
        let Some(j) = argmax(&mut sim[i].iter().copied()) else { continue };
        let back = argmax(&mut (0..a.len()).map(|r| sim[r][j]));
        if back == Some(i) {
            out.push((i, j, sim[i][j]));
        }
    }
    out
}

pub fn pair_offsets(a: &LandmarkSet, b: &LandmarkSet, pairs: &[(usize, usize, f64)]) -> Vec<(i64, i64)> {
    pairs
        .iter()
        .map(|&(i, j, _)| {
            let (la, lb) = (&a.landmarks[i], &b.landmarks[j]);
            (la.grid_x as i64 - lb.grid_x as i64, la.grid_y as i64 - lb.grid_y as i64)
        })
        .collect()
}

/// Every offset reaching the maximum count, by counting each candidate
/// against the whole list.
pub fn modal_offsets_oracle(offsets: &[(i64, i64)]) -> Vec<(i64, i64)> {
    let count = |o: (i64, i64)| offsets.iter().filter(|&&p| p == o).count();
    let top = offsets.iter().map(|&o| count(o)).max().unwrap_or(0);
    let mut modes: Vec<(i64, i64)> = offsets.iter().copied().filter(|&o| count(o) == top).collect();
    modes.sort();
    modes.dedup();
    modes
}

/// The histogram winner: smallest norm among modal offsets, then smallest
/// `(dx, dy)`.
pub fn histogram_oracle(offsets: &[(i64, i64)]) -> Option<(i64, i64)> {
    modal_offsets_oracle(offsets)
        .into_iter()
        .min_by(|a, b| {
            let na = a.0 * a.0 + a.1 * a.1;
            let nb = b.0 * b.0 + b.1 * b.1;
            na.cmp(&nb).then(a.cmp(b))
        })
}

/// Score for a given mode: Σ exp(−½‖offset − mode‖²) · similarity.
pub fn weighted_score_oracle(offsets: &[(i64, i64)], sims: &[f64], mode: (i64, i64)) -> f64 {
    offsets
        .iter()
        .zip(sims)
        .map(|(&(dx, dy), &s)| {
            let ex = (dx - mode.0) as f64;
            let ey = (dy - mode.1) as f64;
            (-0.5 * (ex * ex + ey * ey)).exp() * s
        })
        .sum()
}

/// Image similarity from scratch; tied histogram modes take the best score.
pub fn image_similarity_oracle(a: &LandmarkSet, b: &LandmarkSet) -> f64 {
    let pairs = cross_match_oracle(a, b);
    if pairs.is_empty() {
        return 0.0;
    }
    let offsets = pair_offsets(a, b, &pairs);
    let sims: Vec<f64> = pairs.iter().map(|p| p.2).collect();
    modal_offsets_oracle(&offsets)
        .into_iter()
        .map(|m| weighted_score_oracle(&offsets, &sims, m))
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn landmark(x: usize, y: usize, descriptor: Vec<f64>) -> Landmark {
    Landmark {
        grid_x: x,
        grid_y: y,
        descriptor,
        activation: 1.0,
        region_center_px: None,
    }
}

pub fn landmark_set(landmarks: Vec<Landmark>, grid_width: usize, grid_height: usize) -> LandmarkSet {
    LandmarkSet {
        image_id: String::new(),
        landmarks,
        grid_width,
        grid_height,
        stride: 32,
    }
}

/// Random landmark set on a `w × h` grid. Descriptors come from a small
/// palette when `palette` is set, which produces exact similarity ties.
pub fn random_landmark_set<R: Rng>(
    rng: &mut R,
    n: usize,
    dim: usize,
    w: usize,
    h: usize,
    palette: Option<&[Vec<f64>]>,
) -> LandmarkSet {
    let landmarks = (0..n)
        .map(|_| {
            let d = match palette {
                Some(p) => p[rng.random_range(0..p.len())].clone(),
                None => (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            };
            landmark(rng.random_range(0..w), rng.random_range(0..h), d)
        })
        .collect();
    landmark_set(landmarks, w, h)
}

/// Smallest |pre-activation| anywhere in the network for `features`; used
/// to keep finite-difference probes away from ReLU kinks.
pub fn min_abs_preactivation(features: &FeatureMap, params: &LlnParams) -> f64 {
    let (h, w) = (features.height(), features.width());
    let mut min = f64::INFINITY;
    let mut concat: Vec<Vec<f64>> = vec![Vec::new(); h * w];
    for b in &params.branches {
        let pre = conv2d_forward(features, b).unwrap();
        for y in 0..h {
            for x in 0..w {
                for &v in pre.cell(y, x) {
                    if params.branch_relu {
                        min = min.min(v.abs());
                    }
                    concat[y * w + x].push(if params.branch_relu { v.max(0.0) } else { v });
                }
            }
        }
    }
    let d = concat[0].len();
    let concat = FeatureMap::new(h, w, d, concat.concat()).unwrap();
    let pre = conv2d_forward(&concat, &params.combiner).unwrap();
    for &v in pre.data() {
        min = min.min(v.abs());
    }
    min
}
