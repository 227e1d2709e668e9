//! Planted-landmark benchmark.
//!
//! Every location owns a few prototype cells: high-norm descriptors living
//! in the lower half of the channels, at location-specific grid positions.
//! Each view of a location re-plants them with a common shift of at most one
//! cell and fresh noise, adds distractor cells (equally strong, upper half of
//! the channels, redrawn per view) and fills the rest with weak background
//! cells drawn from a pool shared by all locations.
//!
//! The last two views of each location form the map and query sets; the
//! others are for training. Frames equal the location index.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::io::fmap::write_feature_map;
use crate::tensor::FeatureMap;
use crate::trainer::{Dataset, Manifest, ManifestEntry};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub locations: usize,
    pub views: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    pub channels: usize,
    pub prototypes: usize,
    pub distractors: usize,
    pub prototype_norm: f64,
    pub distractor_norm: f64,
    pub background_norm: f64,
    /// Standard deviation of per-view noise, relative to the cell norm.
    pub noise: f64,
    pub background_pool: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            locations: 12,
            views: 8,
            grid_height: 10,
            grid_width: 10,
            channels: 16,
            prototypes: 6,
            distractors: 6,
            prototype_norm: 3.0,
            distractor_norm: 3.0,
            background_norm: 1.0,
            noise: 0.05,
            background_pool: 8,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.locations < 2 || self.views < 4 {
            return Err(Error::config("need at least 2 locations and 4 views"));
        }
        if self.grid_height < 3 || self.grid_width < 3 || self.channels < 2 {
            return Err(Error::config("grid must be at least 3x3 with 2 channels"));
        }
        let interior = (self.grid_height - 2) * (self.grid_width - 2);
        if self.prototypes == 0 || self.prototypes > interior {
            return Err(Error::config("prototype count must fit the grid interior"));
        }
        if self.prototypes + self.distractors > self.grid_height * self.grid_width {
            return Err(Error::config("too many planted cells for the grid"));
        }
        if self.background_pool == 0 {
            return Err(Error::config("background pool must be non-empty"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Map,
    Query,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticView {
    pub id: String,
    pub location: usize,
    pub view: usize,
    pub split: Split,
    pub features: FeatureMap,
    /// (y, x) of each planted prototype in this view.
    pub prototype_cells: Vec<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub struct SyntheticBenchmark {
    pub config: SyntheticConfig,
    pub views: Vec<SyntheticView>,
}

/// Non-negative random direction restricted to `dims`, scaled to `norm`.
fn planted_vector<R: Rng>(rng: &mut R, channels: usize, dims: Range<usize>, norm: f64) -> Vec<f64> {
    let mut v = vec![0.0; channels];
    for c in dims {
        // cubing makes directions peaky, hence well separated
        v[c] = rng.random::<f64>().powi(3);
    }
    let len = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x *= norm / len);
    v
}

/// Adds clipped Gaussian noise to the channels in `support`; the others are
/// copied unchanged.
fn jitter<R: Rng>(rng: &mut R, base: &[f64], support: Range<usize>, sd: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, sd.max(0.0)).expect("finite sd");
    base.iter()
        .enumerate()
        .map(|(i, &x)| if support.contains(&i) { (x + normal.sample(rng)).max(0.0) } else { x })
        .collect()
}

pub fn generate(config: &SyntheticConfig) -> Result<SyntheticBenchmark> {
    config.validate()?;
    let c = config.channels;
    let half = c / 2;
    let (gh, gw) = (config.grid_height, config.grid_width);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let pool: Vec<Vec<f64>> = (0..config.background_pool)
        .map(|_| planted_vector(&mut rng, c, 0..c, config.background_norm))
        .collect();

    let interior: Vec<(usize, usize)> = (1..gh - 1)
        .flat_map(|y| (1..gw - 1).map(move |x| (y, x)))
        .collect();

    let mut views = Vec::with_capacity(config.locations * config.views);
    for loc in 0..config.locations {
        let mut cells = interior.clone();
        cells.shuffle(&mut rng);
        let anchors: Vec<(usize, usize)> = cells[..config.prototypes].to_vec();
        let protos: Vec<Vec<f64>> = (0..config.prototypes)
            .map(|_| planted_vector(&mut rng, c, 0..half, config.prototype_norm))
            .collect();

        for view in 0..config.views {
            let dy = rng.random_range(-1i64..=1);
            let dx = rng.random_range(-1i64..=1);
            let mut grid: Vec<Option<Vec<f64>>> = vec![None; gh * gw];
            let mut placed = Vec::with_capacity(config.prototypes);
            for (&(y, x), proto) in anchors.iter().zip(&protos) {
                let y = (y as i64 + dy) as usize;
                let x = (x as i64 + dx) as usize;
                grid[y * gw + x] = Some(jitter(&mut rng, proto, 0..half, config.noise * config.prototype_norm));
                placed.push((y, x));
            }
            let mut free: Vec<usize> = (0..gh * gw).filter(|&i| grid[i].is_none()).collect();
            free.shuffle(&mut rng);
            for &i in free.iter().take(config.distractors) {
                grid[i] = Some(planted_vector(&mut rng, c, half..c, config.distractor_norm));
            }
            for cell in grid.iter_mut().filter(|g| g.is_none()) {
                let base = &pool[rng.random_range(0..pool.len())];
                *cell = Some(jitter(&mut rng, base, 0..c, config.noise * config.background_norm));
            }
            let data: Vec<f64> = grid.into_iter().flatten().flatten().collect();
            let split = if view + 2 == config.views {
                Split::Map
            } else if view + 1 == config.views {
                Split::Query
            } else {
                Split::Train
            };
            views.push(SyntheticView {
                id: format!("loc{loc:02}_v{view}"),
                location: loc,
                view,
                split,
                features: FeatureMap::new(gh, gw, c, data)?,
                prototype_cells: placed,
            });
        }
    }
    Ok(SyntheticBenchmark {
        config: config.clone(),
        views,
    })
}

impl SyntheticBenchmark {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SyntheticView> {
        self.views.iter().filter(move |v| v.split == split)
    }

    fn entry(v: &SyntheticView, path: PathBuf) -> ManifestEntry {
        ManifestEntry {
            id: v.id.clone(),
            path,
            location: format!("loc{:02}", v.location),
            frame: Some(v.location as i64),
            positive: None,
        }
    }

    /// Manifest over one split, with feature paths `features/<id>.fmap`.
    pub fn manifest(&self, split: Split, base_dir: impl Into<PathBuf>) -> Result<Manifest> {
        let entries = self
            .split(split)
            .map(|v| Self::entry(v, PathBuf::from("features").join(format!("{}.fmap", v.id))))
            .collect();
        Manifest::new(entries, base_dir)
    }

    /// In-memory training set.
    pub fn dataset(&self, split: Split) -> Result<Dataset> {
        let views: Vec<&SyntheticView> = self.split(split).collect();
        let entries: Vec<ManifestEntry> = views
            .iter()
            .map(|v| Self::entry(v, PathBuf::from(format!("{}.fmap", v.id))))
            .collect();
        Dataset::from_parts(&entries, views.iter().map(|v| v.features.clone()).collect())
    }

    /// Writes every view to `dir/features` and the three split manifests
    /// `train.jsonl`, `map.jsonl` and `queries.jsonl`.
    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> Result<[PathBuf; 3]> {
        let dir = dir.as_ref();
        let feats = dir.join("features");
        fs::create_dir_all(&feats).map_err(|e| Error::io(&feats, e))?;
        for v in &self.views {
            write_feature_map(feats.join(format!("{}.fmap", v.id)), &v.features)?;
        }
        let mut out = Vec::with_capacity(3);
        for (split, name) in [(Split::Train, "train"), (Split::Map, "map"), (Split::Query, "queries")] {
            let path = dir.join(format!("{name}.jsonl"));
            self.manifest(split, dir)?.save(&path)?;
            out.push(path);
        }
        Ok(out.try_into().expect("three manifests"))
    }
}
