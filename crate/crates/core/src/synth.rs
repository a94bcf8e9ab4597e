//! Synthetic attention tensor sets with a planted segmentation.
//!
//! Every query location attends uniformly to the pixels of its own region,
//! blended toward the uniform distribution by the noise level `α`, so maps
//! from the same region are identical and maps from different regions are
//! not. With `α > 0` each slice is also multiplied elementwise by
//! `Gamma(1/α, α)` draws (mean 1) and renormalized.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::raster::encode_label_mask;
use crate::tensor_io::{save_tensor_set, AttentionTensor, ManifestEntry, TensorSetManifest};

pub const DEFAULT_RESOLUTION: usize = 64;

/// Planted layouts are drawn on a `GRID_CELLS x GRID_CELLS` lattice so region
/// borders fall on pixel edges at every resolution down to `resolution / 8`.
pub const GRID_CELLS: usize = 8;

/// `{r: 5, r/2: 5, r/4: 5, r/8: 1}` for scene resolution `r`.
pub fn standard_census(resolution: usize) -> Vec<(usize, usize)> {
    vec![
        (resolution, 5),
        (resolution / 2, 5),
        (resolution / 4, 5),
        (resolution / 8, 1),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// Parallel bands, all vertical or all horizontal, of grid-cell widths
    /// within a factor of two of each other.
    Stripes,
    /// Voronoi cells of random lattice sites.
    Blobs,
}

impl std::str::FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stripes" => Ok(Layout::Stripes),
            "blobs" => Ok(Layout::Blobs),
            other => Err(Error::InvalidArgument(format!(
                "unknown layout {other:?} (expected stripes or blobs)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedScene {
    resolution: usize,
    /// Row-major region ids in `0..num_regions`.
    region_map: Vec<u32>,
    num_regions: u32,
    noise: f64,
    seed: u64,
}

impl PlantedScene {
    pub fn new(resolution: usize, region_map: Vec<u32>, noise: f64, seed: u64) -> Result<Self> {
        if resolution == 0 || region_map.len() != resolution * resolution {
            return Err(Error::DimensionMismatch(format!(
                "region map has {} values for resolution {resolution}",
                region_map.len()
            )));
        }
        if !(0.0..=1.0).contains(&noise) {
            return Err(Error::InvalidArgument(format!(
                "noise {noise} outside [0, 1]"
            )));
        }
        let num_regions = region_map.iter().max().map_or(0, |m| m + 1);
        let mut seen = vec![false; num_regions as usize];
        for &r in &region_map {
            seen[r as usize] = true;
        }
        if let Some(r) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidArgument(format!("region {r} is empty")));
        }
        Ok(PlantedScene {
            resolution,
            region_map,
            num_regions,
            noise,
            seed,
        })
    }

    /// Random scene with `regions` regions drawn from `seed`.
    pub fn random(
        layout: Layout,
        resolution: usize,
        regions: usize,
        noise: f64,
        seed: u64,
    ) -> Result<Self> {
        if resolution == 0 || !resolution.is_multiple_of(GRID_CELLS) {
            return Err(Error::InvalidArgument(format!(
                "scene resolution {resolution} is not a multiple of {GRID_CELLS}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cells = match layout {
            Layout::Stripes => stripe_cells(regions, &mut rng)?,
            Layout::Blobs => blob_cells(regions, &mut rng)?,
        };
        let cell = resolution / GRID_CELLS;
        let map = (0..resolution * resolution)
            .map(|i| cells[(i / resolution / cell) * GRID_CELLS + (i % resolution) / cell])
            .collect();
        PlantedScene::new(resolution, map, noise, seed)
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn region_map(&self) -> &[u32] {
        &self.region_map
    }

    pub fn num_regions(&self) -> u32 {
        self.num_regions
    }

    pub fn noise(&self) -> f64 {
        self.noise
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Ground truth at `width x height` (integer multiples of the scene
    /// resolution, nearest neighbour), with regions numbered from 1 so that 0
    /// stays free for background.
    pub fn truth_mask(&self, width: usize, height: usize) -> Result<LabelMask> {
        let r = self.resolution;
        if !width.is_multiple_of(r) || !height.is_multiple_of(r) || width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "truth size {width}x{height} is not a multiple of scene resolution {r}"
            )));
        }
        let (fx, fy) = (width / r, height / r);
        let labels = (0..width * height)
            .map(|i| self.region_map[(i / width / fy) * r + (i % width) / fx] + 1)
            .collect();
        LabelMask::new(width, height, labels, self.num_regions + 1)
    }
}

/// Lattice of region ids for vertical or horizontal bands.
fn stripe_cells(regions: usize, rng: &mut ChaCha8Rng) -> Result<Vec<u32>> {
    if regions == 0 || regions > GRID_CELLS {
        return Err(Error::InvalidArgument(format!(
            "stripes support 1..={GRID_CELLS} regions, got {regions}"
        )));
    }
    let widths = loop {
        let mut cuts: Vec<usize> = sample(rng, GRID_CELLS - 1, regions - 1)
            .into_iter()
            .map(|c| c + 1)
            .collect();
        cuts.sort_unstable();
        cuts.insert(0, 0);
        cuts.push(GRID_CELLS);
        let widths: Vec<usize> = cuts.windows(2).map(|w| w[1] - w[0]).collect();
        let (lo, hi) = (widths.iter().min().unwrap(), widths.iter().max().unwrap());
        if *hi <= 2 * lo {
            break widths;
        }
    };
    let band: Vec<u32> = widths
        .iter()
        .enumerate()
        .flat_map(|(r, &w)| std::iter::repeat_n(r as u32, w))
        .collect();
    let vertical = rng.random_bool(0.5);
    Ok((0..GRID_CELLS * GRID_CELLS)
        .map(|i| {
            let (row, col) = (i / GRID_CELLS, i % GRID_CELLS);
            band[if vertical { col } else { row }]
        })
        .collect())
}

/// Lattice of region ids for the Voronoi cells of distinct random sites,
/// distance ties going to the lower site.
fn blob_cells(regions: usize, rng: &mut ChaCha8Rng) -> Result<Vec<u32>> {
    let n = GRID_CELLS * GRID_CELLS;
    if regions == 0 || regions > n {
        return Err(Error::InvalidArgument(format!(
            "blobs support 1..={n} regions, got {regions}"
        )));
    }
    let sites: Vec<(i64, i64)> = sample(rng, n, regions)
        .into_iter()
        .map(|c| ((c / GRID_CELLS) as i64, (c % GRID_CELLS) as i64))
        .collect();
    Ok((0..n)
        .map(|i| {
            let (y, x) = ((i / GRID_CELLS) as i64, (i % GRID_CELLS) as i64);
            let mut best = (i64::MAX, 0u32);
            for (k, &(sy, sx)) in sites.iter().enumerate() {
                let d = (y - sy).pow(2) + (x - sx).pow(2);
                if d < best.0 {
                    best = (d, k as u32);
                }
            }
            best.1
        })
        .collect())
}

/// Majority-vote downsampling of a region map by an integer factor; ties go
/// to the lowest region id.
pub fn downsample_majority(
    map: &[u32],
    resolution: usize,
    target: usize,
    num_regions: u32,
) -> Vec<u32> {
    let f = resolution / target;
    let mut counts = vec![0u32; num_regions as usize];
    let mut out = Vec::with_capacity(target * target);
    for by in 0..target {
        for bx in 0..target {
            counts.fill(0);
            for y in by * f..(by + 1) * f {
                for &r in &map[y * resolution + bx * f..y * resolution + (bx + 1) * f] {
                    counts[r as usize] += 1;
                }
            }
            let mut best = 0;
            for (r, &c) in counts.iter().enumerate() {
                if c > counts[best] {
                    best = r;
                }
            }
            out.push(best as u32);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DroppedRegion {
    pub resolution: usize,
    pub region: u32,
}

#[derive(Debug, Clone)]
pub struct SynthTensorSet {
    pub manifest: TensorSetManifest,
    /// Aligned with `manifest.entries`.
    pub tensors: Vec<AttentionTensor>,
    /// Regions that vanished when the map was downsampled.
    pub dropped: Vec<DroppedRegion>,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn slice_rng(seed: u64, layer: usize, slice: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(mix(seed) ^ layer as u64) ^ slice as u64))
}

pub fn image_id(scene: &PlantedScene) -> String {
    format!("synth-k{}-s{}", scene.num_regions, scene.seed)
}

/// One tensor per layer of `census` (`(resolution, count)` pairs, in order),
/// with layer ids numbered from 0.
pub fn generate_tensor_set(
    scene: &PlantedScene,
    census: &[(usize, usize)],
) -> Result<SynthTensorSet> {
    let r = scene.resolution;
    if census.iter().all(|&(_, n)| n == 0) {
        return Err(Error::Empty { what: "census" });
    }
    for &(w, _) in census {
        if w == 0 || w > r || !r.is_multiple_of(w) {
            return Err(Error::InvalidArgument(format!(
                "resolution {w} does not divide scene resolution {r}"
            )));
        }
    }
    let alpha = scene.noise;
    let gamma = if alpha > 0.0 {
        Some(Gamma::new(1.0 / alpha, alpha).map_err(|e| Error::InvalidArgument(e.to_string()))?)
    } else {
        None
    };

    let mut entries = Vec::new();
    let mut tensors = Vec::new();
    let mut dropped = Vec::new();
    let mut layer = 0usize;
    for &(w, count) in census {
        if count == 0 {
            continue;
        }
        let n = w * w;
        let labels = downsample_majority(&scene.region_map, r, w, scene.num_regions);
        let mut sizes = vec![0usize; scene.num_regions as usize];
        for &l in &labels {
            sizes[l as usize] += 1;
        }
        for (region, _) in sizes.iter().enumerate().filter(|(_, &s)| s == 0) {
            dropped.push(DroppedRegion {
                resolution: w,
                region: region as u32,
            });
        }
        let base: Vec<Vec<f64>> = sizes
            .iter()
            .enumerate()
            .map(|(region, &size)| {
                labels
                    .iter()
                    .map(|&l| {
                        let own = if l as usize == region && size > 0 {
                            1.0 / size as f64
                        } else {
                            0.0
                        };
                        (1.0 - alpha) * own + alpha / n as f64
                    })
                    .collect()
            })
            .collect();

        let shared: Option<Arc<[f32]>> = match gamma {
            None => {
                let mut data = Vec::with_capacity(n * n);
                for &l in &labels {
                    data.extend(base[l as usize].iter().map(|&v| v as f32));
                }
                Some(data.into())
            }
            Some(_) => None,
        };
        for _ in 0..count {
            let data: Arc<[f32]> = match (&shared, &gamma) {
                (Some(d), _) => Arc::clone(d),
                (None, Some(g)) => {
                    let mut data = vec![0.0f32; n * n];
                    data.par_chunks_mut(n).enumerate().for_each(|(s, out)| {
                        let mut rng = slice_rng(scene.seed, layer, s);
                        let jittered: Vec<f64> = base[labels[s] as usize]
                            .iter()
                            .map(|&v| v * g.sample(&mut rng))
                            .collect();
                        let total: f64 = jittered.iter().sum();
                        for (o, v) in out.iter_mut().zip(&jittered) {
                            *o = (v / total) as f32;
                        }
                    });
                    data.into()
                }
                (None, None) => unreachable!("noise-free tensors are shared"),
            };
            tensors.push(AttentionTensor::from_shared(layer, w, data)?);
            entries.push(ManifestEntry {
                layer_id: layer,
                resolution: w,
                file: format!("layer{layer:02}_r{w}.adzt"),
            });
            layer += 1;
        }
    }

    let manifest = TensorSetManifest {
        image_id: image_id(scene),
        latent_resolution: census
            .iter()
            .filter(|c| c.1 > 0)
            .map(|c| c.0)
            .max()
            .unwrap_or(r),
        timestep: 0,
        extractor_info: format!(
            "synthetic planted scene: {} regions, noise {}, seed {}",
            scene.num_regions, alpha, scene.seed
        ),
        entries,
    };
    Ok(SynthTensorSet {
        manifest,
        tensors,
        dropped,
    })
}

#[derive(Debug, Clone)]
pub struct SynthFixture {
    pub manifest_path: PathBuf,
    pub truth_path: PathBuf,
    pub dropped: Vec<DroppedRegion>,
}

/// Writes the tensor set, its manifest and `truth/<image_id>.pgm` into `dir`.
pub fn write_fixture(
    dir: &Path,
    scene: &PlantedScene,
    census: &[(usize, usize)],
    truth_size: (usize, usize),
) -> Result<SynthFixture> {
    let set = generate_tensor_set(scene, census)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::from(e).in_file(dir))?;
    let manifest_path = save_tensor_set(dir, &set.manifest, &set.tensors)?;
    let truth = scene.truth_mask(truth_size.0, truth_size.1)?;
    let truth_dir = dir.join("truth");
    std::fs::create_dir_all(&truth_dir).map_err(|e| Error::from(e).in_file(&truth_dir))?;
    let (format, bytes) = encode_label_mask(&truth)?;
    let truth_path = truth_dir.join(format!("{}.{}", set.manifest.image_id, format.extension()));
    std::fs::write(&truth_path, bytes).map_err(|e| Error::from(e).in_file(&truth_path))?;
    Ok(SynthFixture {
        manifest_path,
        truth_path,
        dropped: set.dropped,
    })
}
