//! Training and evaluation samples, and mini-batch assembly.

use std::path::PathBuf;

use candle_core::Tensor;
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::annotations::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::model::preprocess;
use crate::pseudo_labels::{load_rgb, LabelCache};

/// One image with its label map at the image's own resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image_id: String,
    pub image: RgbImage,
    pub labels: LabelMap,
}

/// Random access to a list of samples.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn id(&self, index: usize) -> &str;

    fn load(&self, index: usize) -> Result<Sample>;

    /// Labels only; cheaper than [`load`](Self::load) for counting.
    fn load_labels(&self, index: usize) -> Result<LabelMap> {
        Ok(self.load(index)?.labels)
    }
}

/// Samples held in memory.
#[derive(Debug, Clone, Default)]
pub struct InMemory(pub Vec<Sample>);

impl SampleSource for InMemory {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn id(&self, index: usize) -> &str {
        &self.0[index].image_id
    }

    fn load(&self, index: usize) -> Result<Sample> {
        Ok(self.0[index].clone())
    }
}

/// Where label maps come from.
#[derive(Debug, Clone)]
pub enum LabelSource {
    /// The pseudo-label cache; a missing entry is a cache miss.
    Cache(LabelCache),
    /// `<dir>/<image_id>.png`, e.g. manual ground truth.
    Dir(PathBuf),
}

/// The images of one manifest split paired with their label maps.
#[derive(Debug, Clone)]
pub struct ManifestSplit<'a> {
    manifest: &'a DatasetManifest,
    labels: LabelSource,
    indices: Vec<usize>,
}

impl<'a> ManifestSplit<'a> {
    pub fn new(manifest: &'a DatasetManifest, split: Split, labels: LabelSource) -> Self {
        let indices = manifest
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect();
        ManifestSplit {
            manifest,
            labels,
            indices,
        }
    }
}

impl SampleSource for ManifestSplit<'_> {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn id(&self, index: usize) -> &str {
        &self.manifest.records[self.indices[index]].image_id
    }

    fn load(&self, index: usize) -> Result<Sample> {
        let rec = &self.manifest.records[self.indices[index]];
        let image = load_rgb(&self.manifest.image_file(rec))?;
        let labels = self.load_labels(index)?;
        if labels.dims() != image.dimensions() {
            return Err(Error::shape(format!(
                "labels of `{}` are {:?}, image is {:?}",
                rec.image_id,
                labels.dims(),
                image.dimensions()
            )));
        }
        Ok(Sample {
            image_id: rec.image_id.clone(),
            image,
            labels,
        })
    }

    fn load_labels(&self, index: usize) -> Result<LabelMap> {
        let id = self.id(index);
        match &self.labels {
            LabelSource::Cache(cache) => cache.require(id),
            LabelSource::Dir(dir) => {
                let path = dir.join(format!("{id}.png"));
                if !path.is_file() {
                    return Err(Error::MissingMask(format!("{id} ({})", path.display())));
                }
                LabelMap::read_png(&path)
            }
        }
    }
}

/// Loads every label map once, failing on the first missing or invalid
/// one, and returns per-label pixel counts.
pub fn label_counts(source: &dyn SampleSource, num_labels: usize) -> Result<Vec<u64>> {
    let per: Vec<Vec<u64>> = (0..source.len())
        .into_par_iter()
        .map(|i| {
            let labels = source.load_labels(i)?;
            labels.validate(num_labels - 1)?;
            let mut c = vec![0u64; num_labels];
            for &v in labels.as_slice() {
                c[v as usize] += 1;
            }
            Ok(c)
        })
        .collect::<Result<_>>()?;
    let mut total = vec![0u64; num_labels];
    for c in per {
        for (t, v) in total.iter_mut().zip(c) {
            *t += v;
        }
    }
    Ok(total)
}

/// A sample resized to the network input, optionally mirrored.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub image_id: String,
    /// `(3, S, S)`, normalized.
    pub image: Tensor,
    /// `S x S` labels, raster order.
    pub labels: Vec<u8>,
}

pub fn prepare(sample: &Sample, size: usize, flip: bool) -> Result<Prepared> {
    let s = size as u32;
    let labels = if sample.labels.dims() == (s, s) {
        sample.labels.clone()
    } else {
        sample.labels.resize_nearest(s, s)
    };
    let (image, labels) = if flip {
        (
            image::imageops::flip_horizontal(&sample.image),
            labels.flip_horizontal(),
        )
    } else {
        (sample.image.clone(), labels)
    };
    Ok(Prepared {
        image_id: sample.image_id.clone(),
        image: preprocess(&image, size)?,
        labels: labels.into_vec(),
    })
}

/// Loads and prepares the listed samples in parallel.
pub fn load_batch(
    source: &dyn SampleSource,
    picks: &[(usize, bool)],
    size: usize,
) -> Result<Vec<Prepared>> {
    picks
        .par_iter()
        .map(|&(i, flip)| prepare(&source.load(i)?, size, flip))
        .collect()
}

/// Shuffled mini-batches of indices `0..n`.
///
/// With `min_defect > 0` every batch first takes up to that many images
/// flagged in `has_defect`, then fills up in shuffled order.
pub fn epoch_batches(
    n: usize,
    batch_size: usize,
    has_defect: &[bool],
    min_defect: usize,
    rng: &mut impl Rng,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    if min_defect == 0 {
        return order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    }
    let mut batches = Vec::new();
    while !order.is_empty() {
        let mut batch = Vec::with_capacity(batch_size);
        let quota = min_defect.min(batch_size);
        order.retain(|&i| {
            if batch.len() < quota && has_defect[i] {
                batch.push(i);
                false
            } else {
                true
            }
        });
        let fill = (batch_size - batch.len()).min(order.len());
        batch.extend(order.drain(..fill));
        batches.push(batch);
    }
    batches
}
