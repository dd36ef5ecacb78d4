use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::data::{Dataset, DefectClass, Split};
use crate::error::{Error, Result};

/// Per-image draw probabilities over the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerWeights {
    pub image_ids: Vec<u64>,
    /// Class each image is counted under.
    pub classes: Vec<DefectClass>,
    /// Positive, summing to one.
    pub weights: Vec<f64>,
}

impl SamplerWeights {
    /// Expected fraction of draws landing on each class.
    pub fn class_frequencies(&self) -> BTreeMap<u8, f64> {
        let mut out = BTreeMap::new();
        for (c, w) in self.classes.iter().zip(&self.weights) {
            *out.entry(c.id()).or_insert(0.0) += w;
        }
        out
    }

    pub fn len(&self) -> usize {
        self.image_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_ids.is_empty()
    }
}

/// Class of each training image, taken from its first annotation.
fn image_classes(dataset: &Dataset) -> Vec<(u64, DefectClass)> {
    let by_image = dataset.annotations_by_image();
    let mut out = Vec::new();
    for img in dataset.split_images(Split::Train) {
        match by_image.get(&img.image_id).map(Vec::as_slice) {
            None | Some([]) => {
                log::warn!(
                    "training image {} has no annotation and is never sampled by class",
                    img.image_id
                );
            }
            Some(anns) => {
                if anns.len() > 1 {
                    log::warn!(
                        "training image {} has {} annotations; counting it as class {}",
                        img.image_id,
                        anns.len(),
                        anns[0].class.id()
                    );
                }
                out.push((img.image_id, anns[0].class));
            }
        }
    }
    out
}

/// Weights proportional to `1 / count(class)`, so each present class is drawn
/// with frequency `1 / n_present`.
pub fn balanced_weights(dataset: &Dataset) -> Result<SamplerWeights> {
    let items = image_classes(dataset);
    if items.is_empty() {
        return Err(Error::arg("no annotated training images to sample from"));
    }
    let mut counts: BTreeMap<DefectClass, usize> = BTreeMap::new();
    for (_, c) in &items {
        *counts.entry(*c).or_default() += 1;
    }
    for c in DefectClass::ALL {
        if !counts.contains_key(&c) {
            log::warn!(
                "class {} ({}) has no training images; dropped from the sampling budget",
                c.id(),
                c.name()
            );
        }
    }
    let n_present = counts.len() as f64;
    let weights = items
        .iter()
        .map(|(_, c)| 1.0 / (n_present * counts[c] as f64))
        .collect();
    Ok(SamplerWeights {
        image_ids: items.iter().map(|(id, _)| *id).collect(),
        classes: items.iter().map(|(_, c)| *c).collect(),
        weights,
    })
}

/// Uniform weights over annotated training images.
pub fn uniform_weights(dataset: &Dataset) -> Result<SamplerWeights> {
    let items = image_classes(dataset);
    if items.is_empty() {
        return Err(Error::arg("no annotated training images to sample from"));
    }
    let w = 1.0 / items.len() as f64;
    Ok(SamplerWeights {
        image_ids: items.iter().map(|(id, _)| *id).collect(),
        classes: items.iter().map(|(_, c)| *c).collect(),
        weights: vec![w; items.len()],
    })
}

/// Draws training image ids with replacement according to [`SamplerWeights`].
#[derive(Debug, Clone)]
pub struct ImageSampler {
    weights: SamplerWeights,
    index: WeightedIndex<f64>,
}

impl ImageSampler {
    pub fn new(weights: SamplerWeights) -> Result<Self> {
        let index =
            WeightedIndex::new(&weights.weights).map_err(|e| Error::arg(format!("bad sampler weights: {e}")))?;
        Ok(Self { weights, index })
    }

    pub fn weights(&self) -> &SamplerWeights {
        &self.weights
    }

    /// Returns `(image_id, class)`.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> (u64, DefectClass) {
        let i = self.index.sample(rng);
        (self.weights.image_ids[i], self.weights.classes[i])
    }
}
