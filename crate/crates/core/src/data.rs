//! Synthetic segmentation volumes: non-overlapping ellipsoids, one per
//! foreground class, on a noisy background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use unetrpp_tensor::Tensor;

use crate::error::{Error, Result};
use crate::metrics::LabelMap;

pub const NOISE_STD: f64 = 0.1;
pub const MIN_BLOB_VOXELS: usize = 27;
/// Smallest extent leaving room for two disjoint blobs of radius ≥ 2.
pub const MIN_EXTENT: usize = 12;
const MAX_PLACEMENT_TRIES: usize = 1000;

/// Axis-aligned ellipsoid in voxel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub class: u32,
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Blob {
    pub fn contains(&self, at: [usize; 3]) -> bool {
        (0..3).map(|a| ((at[a] as f64 - self.center[a]) / self.radii[a]).powi(2)).sum::<f64>() <= 1.0
    }
}

#[derive(Debug, Clone)]
pub struct VolumeSample {
    /// `1 × H × W × D` intensities.
    pub image: Tensor<f32>,
    pub label: LabelMap,
    pub blobs: Vec<Blob>,
}

fn for_each_voxel(extents: [usize; 3], mut f: impl FnMut(usize, [usize; 3])) {
    let [h, w, d] = extents;
    let mut idx = 0;
    for i in 0..h {
        for j in 0..w {
            for k in 0..d {
                f(idx, [i, j, k]);
                idx += 1;
            }
        }
    }
}

fn place_blob(rng: &mut ChaCha8Rng, extents: [usize; 3], labels: &mut [u32], class: u32) -> Result<Blob> {
    for _ in 0..MAX_PLACEMENT_TRIES {
        let radii: [f64; 3] = std::array::from_fn(|a| rng.random_range(2.0..=extents[a] as f64 / 4.0));
        let center: [f64; 3] = std::array::from_fn(|a| rng.random_range(radii[a]..=extents[a] as f64 - 1.0 - radii[a]));
        let blob = Blob { class, center, radii };
        let mut voxels = Vec::new();
        let mut clash = false;
        for_each_voxel(extents, |idx, at| {
            if blob.contains(at) {
                clash |= labels[idx] != 0;
                voxels.push(idx);
            }
        });
        if !clash && voxels.len() >= MIN_BLOB_VOXELS {
            voxels.into_iter().for_each(|i| labels[i] = class);
            return Ok(blob);
        }
    }
    Err(Error::Config(format!("could not place class {class} blob in {extents:?}")))
}

/// `num` samples with `num_classes − 1` blobs each, deterministic in `seed`.
pub fn synth_dataset(num: usize, extents: [usize; 3], num_classes: usize, seed: u64) -> Result<Vec<VolumeSample>> {
    if num_classes < 2 {
        return Err(Error::Config("synthetic data needs at least 2 classes".into()));
    }
    if extents.iter().any(|&e| e < MIN_EXTENT) {
        return Err(Error::Config(format!("extents {extents:?} below the minimum of {MIN_EXTENT}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let v: usize = extents.iter().product();
    (0..num)
        .map(|_| {
            let mut labels = vec![0u32; v];
            let blobs = (1..num_classes as u32)
                .map(|c| place_blob(&mut rng, extents, &mut labels, c))
                .collect::<Result<Vec<_>>>()?;
            let scale = 1.0 / (num_classes - 1) as f64;
            let image: Vec<f32> = labels.iter().map(|&c| (c as f64 * scale + noise.sample(&mut rng)) as f32).collect();
            Ok(VolumeSample {
                image: Tensor::new(image, &[1, extents[0], extents[1], extents[2]])?,
                label: LabelMap::new(extents, labels)?,
                blobs,
            })
        })
        .collect()
}
