//! Toy dense feature extractor.
//!
//! Stands in for a frozen CNN backbone so the whole pipeline runs without
//! pretrained weights. Each `stride × stride` patch becomes one cell whose
//! descriptor is a fixed random projection of patch statistics (a gradient
//! orientation histogram plus mean and spread of intensity), passed through
//! ReLU. Statistics are computed from the patch's own pixels only, so
//! shifting the image by whole cells shifts the grid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::pgm::GrayImage;
use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

const ORIENTATION_BINS: usize = 8;
const STAT_DIM: usize = ORIENTATION_BINS + 2;

fn patch_stats(image: &GrayImage, x0: usize, y0: usize, stride: usize) -> [f64; STAT_DIM] {
    let mut stats = [0.0; STAT_DIM];
    let px = |x: usize, y: usize| image.get(x0 + x, y0 + y);
    let last = stride - 1;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for y in 0..stride {
        for x in 0..stride {
            let v = px(x, y);
            sum += v;
            sum_sq += v * v;
            // central differences, clamped to the patch
            let gx = px((x + 1).min(last), y) - px(x.saturating_sub(1), y);
            let gy = px(x, (y + 1).min(last)) - px(x, y.saturating_sub(1));
            let mag = (gx * gx + gy * gy).sqrt();
            if mag > 0.0 {
                let angle = gy.atan2(gx).rem_euclid(std::f64::consts::TAU);
                let bin = ((angle / std::f64::consts::TAU) * ORIENTATION_BINS as f64) as usize;
                stats[bin.min(ORIENTATION_BINS - 1)] += mag;
            }
        }
    }
    let area = (stride * stride) as f64;
    for s in &mut stats[..ORIENTATION_BINS] {
        *s /= area;
    }
    let mean = sum / area;
    stats[ORIENTATION_BINS] = mean;
    stats[ORIENTATION_BINS + 1] = (sum_sq / area - mean * mean).max(0.0).sqrt();
    stats
}

/// Dense `floor(h/stride) × floor(w/stride) × channels` feature grid.
pub fn toy_extract(image: &GrayImage, stride: usize, channels: usize, seed: u64) -> Result<FeatureMap> {
    if stride == 0 || channels == 0 {
        return Err(Error::config("stride and channels must be positive"));
    }
    if image.width < stride || image.height < stride {
        return Err(Error::config(format!(
            "{}x{} image is smaller than one {stride}px cell",
            image.width, image.height
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let projection: Vec<f64> = (0..channels * STAT_DIM)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let (gh, gw) = (image.height / stride, image.width / stride);
    let mut map = FeatureMap::zeros(gh, gw, channels);
    for cy in 0..gh {
        for cx in 0..gw {
            let stats = patch_stats(image, cx * stride, cy * stride, stride);
            let cell = map.cell_mut(cy, cx);
            for (c, out) in cell.iter_mut().enumerate() {
                let row = &projection[c * STAT_DIM..(c + 1) * STAT_DIM];
                let v: f64 = row.iter().zip(&stats).map(|(a, b)| a * b).sum();
                *out = v.max(0.0);
            }
        }
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texture(width: usize, height: usize, shift: usize) -> GrayImage {
        // period 16 divides the 32px stride
        GrayImage::from_fn(width, height, |x, y| {
            let x = x + shift;
            let a = ((x % 16) as f64 / 16.0 * std::f64::consts::TAU).sin();
            let b = (((x / 32) * 7 + y / 32 * 3) % 5) as f64 / 5.0;
            0.5 + 0.25 * a + 0.2 * b * ((y % 8) as f64 / 8.0)
        })
    }

    #[test]
    fn grid_geometry() {
        let img = GrayImage::from_fn(64, 32, |x, y| ((x + y) % 7) as f64 / 7.0);
        let m = toy_extract(&img, 32, 16, 1).unwrap();
        assert_eq!((m.height(), m.width(), m.channels()), (1, 2, 16));
        assert!(toy_extract(&GrayImage::from_fn(31, 64, |_, _| 0.0), 32, 4, 1).is_err());
    }

    #[test]
    fn deterministic() {
        let img = texture(96, 64, 0);
        assert_eq!(
            toy_extract(&img, 32, 8, 5).unwrap(),
            toy_extract(&img, 32, 8, 5).unwrap()
        );
    }

    #[test]
    fn one_stride_translation_shifts_grid() {
        let base = texture(160, 64, 0);
        let moved = texture(160, 64, 32);
        let a = toy_extract(&base, 32, 12, 3).unwrap();
        let b = toy_extract(&moved, 32, 12, 3).unwrap();
        for y in 0..a.height() {
            for x in 0..a.width() - 1 {
                assert_eq!(b.cell(y, x), a.cell(y, x + 1));
            }
        }
        // the shift is not a no-op
        assert_ne!(a.cell(0, 0), a.cell(0, 1));
    }
}
