//! Paired image-recipe data: domain types, loaders, the synthetic generator,
//! and batching.

mod batch;
mod recipe1m;
mod synthetic;
pub mod tokenizer;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use batch::{make_batches, BatchPlan, PairedBatch};
pub use recipe1m::{
    load_groundtruth, load_image, load_recipe1m_subset, write_dataset, LoadReport, RawRecipe,
};
pub use synthetic::{generate_synthetic, SyntheticSet, SyntheticSpec, CLASS_NAMES};
pub use tokenizer::Vocab;

use crate::error::{MalmError, Result};
use crate::tensor::Tensor;

/// Square `size × size × channels` image, row-major HWC, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    size: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl ImageTensor {
    pub fn new(size: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != size * size * channels {
            return Err(MalmError::Shape(format!(
                "{} pixels for a {size}x{size}x{channels} image",
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(MalmError::Invalid(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            size,
            channels,
            pixels,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    /// Flattened pixels of patch `p` (row-major over the patch grid), in
    /// `(row, col, channel)` order.
    pub fn patch(&self, patch_size: usize, p: usize) -> Vec<f64> {
        let grid = self.size / patch_size;
        let (pr, pc) = (p / grid, p % grid);
        let mut out = Vec::with_capacity(patch_size * patch_size * self.channels);
        for r in 0..patch_size {
            let y = pr * patch_size + r;
            let start = (y * self.size + pc * patch_size) * self.channels;
            out.extend_from_slice(&self.pixels[start..start + patch_size * self.channels]);
        }
        out
    }
}

/// A tokenized recipe. Ingredients and instructions keep their line structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecipeDoc {
    pub id: String,
    pub title: Vec<u32>,
    pub ingredients: Vec<Vec<u32>>,
    pub instructions: Vec<Vec<u32>>,
    pub image_ref: Option<String>,
}

impl RecipeDoc {
    pub fn from_raw(raw: &RawRecipe, vocab: &Vocab) -> Result<Self> {
        let doc = Self {
            id: raw.id.clone(),
            title: vocab.encode(&raw.title),
            ingredients: raw.ingredients.iter().map(|l| vocab.encode(l)).collect(),
            instructions: raw.instructions.iter().map(|l| vocab.encode(l)).collect(),
            image_ref: raw.image.clone(),
        };
        for (field, empty) in [
            ("title", doc.title.is_empty()),
            ("ingredients", doc.ingredients.iter().all(Vec::is_empty)),
            ("instructions", doc.instructions.iter().all(Vec::is_empty)),
        ] {
            if empty {
                return Err(MalmError::Schema {
                    field: field.into(),
                    reason: format!("record `{}` has no tokens", doc.id),
                });
            }
        }
        Ok(doc)
    }

    /// Token sequences of the three components, with lines concatenated.
    pub fn components(&self) -> [Vec<u32>; 3] {
        [
            self.title.clone(),
            self.ingredients.concat(),
            self.instructions.concat(),
        ]
    }
}

/// One training or evaluation pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub image: ImageTensor,
    pub recipe: RecipeDoc,
    /// Patch index → ingredient class, for synthetic data.
    pub groundtruth: Option<BTreeMap<usize, usize>>,
}

/// Pairs sharing one vocabulary.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub pairs: Vec<Pair>,
    pub vocab: Vocab,
    /// Token id of every ingredient class, for synthetic data.
    pub class_tokens: Option<Vec<u32>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Tokenizes loaded records. Builds the vocabulary from them when none
    /// is given.
    pub fn from_records(
        records: Vec<(RawRecipe, ImageTensor)>,
        vocab: Option<Vocab>,
    ) -> Result<Self> {
        let vocab = vocab.unwrap_or_else(|| {
            Vocab::build(records.iter().flat_map(|(r, _)| {
                std::iter::once(r.title.as_str())
                    .chain(r.ingredients.iter().map(String::as_str))
                    .chain(r.instructions.iter().map(String::as_str))
            }))
        });
        let pairs = records
            .into_iter()
            .map(|(raw, image)| {
                Ok(Pair {
                    recipe: RecipeDoc::from_raw(&raw, &vocab)?,
                    image,
                    groundtruth: None,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            pairs,
            vocab,
            class_tokens: None,
        })
    }

    /// Splits off the last `n` pairs.
    pub fn split_tail(mut self, n: usize) -> (Self, Self) {
        let tail = self.pairs.split_off(self.pairs.len().saturating_sub(n));
        let other = Self {
            pairs: tail,
            vocab: self.vocab.clone(),
            class_tokens: self.class_tokens.clone(),
        };
        (self, other)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            pairs: indices.iter().map(|&i| self.pairs[i].clone()).collect(),
            vocab: self.vocab.clone(),
            class_tokens: self.class_tokens.clone(),
        }
    }
}

/// Pixels enter the encoder shifted to `[-1, 1]`.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.5;

/// Images as a `[B, P, patch_size² · C]` tensor of flattened, normalized
/// patches.
pub fn patchify(images: &[&ImageTensor], patch_size: usize) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| MalmError::Invalid("empty image batch".into()))?;
    let (size, ch) = (first.size, first.channels);
    if size % patch_size != 0 {
        return Err(MalmError::Shape(format!(
            "image size {size} is not a multiple of patch size {patch_size}"
        )));
    }
    let p = (size / patch_size).pow(2);
    let dim = patch_size * patch_size * ch;
    let mut data = Vec::with_capacity(images.len() * p * dim);
    for img in images {
        if img.size != size || img.channels != ch {
            return Err(MalmError::Shape("images in a batch differ in size".into()));
        }
        for i in 0..p {
            data.extend(
                img.patch(patch_size, i)
                    .into_iter()
                    .map(|v| (v - PIXEL_MEAN) / PIXEL_STD),
            );
        }
    }
    Ok(Tensor::new(vec![images.len(), p, dim], data))
}

/// One recipe component padded to a fixed cap.
#[derive(Clone, Debug, PartialEq)]
pub struct ComponentBatch {
    /// `[B × cap]` token ids, padded with `[PAD]`.
    pub ids: Vec<usize>,
    pub valid: Vec<Vec<bool>>,
    pub cap: usize,
}

/// Title, ingredients and instructions of a batch, each truncated and padded
/// to its cap.
#[derive(Clone, Debug, PartialEq)]
pub struct RecipeBatch {
    pub components: [ComponentBatch; 3],
}

impl RecipeBatch {
    pub fn new(docs: &[&RecipeDoc], caps: [usize; 3]) -> Self {
        let components = std::array::from_fn(|c| {
            let cap = caps[c];
            let mut ids = Vec::with_capacity(docs.len() * cap);
            let mut valid = Vec::with_capacity(docs.len());
            for d in docs {
                let toks = &d.components()[c];
                let n = toks.len().min(cap);
                ids.extend(toks[..n].iter().map(|&t| t as usize));
                ids.extend(std::iter::repeat_n(tokenizer::PAD as usize, cap - n));
                valid.push((0..cap).map(|i| i < n).collect());
            }
            ComponentBatch { ids, valid, cap }
        });
        Self { components }
    }

    pub fn batch_size(&self) -> usize {
        self.components[0].valid.len()
    }

    /// Validity of every position of the concatenated sequence.
    pub fn valid(&self) -> Vec<Vec<bool>> {
        (0..self.batch_size())
            .map(|b| {
                self.components
                    .iter()
                    .flat_map(|c| c.valid[b].iter().copied())
                    .collect()
            })
            .collect()
    }

    /// Token ids of the concatenated sequence, per sample.
    pub fn token_ids(&self) -> Vec<Vec<usize>> {
        (0..self.batch_size())
            .map(|b| {
                self.components
                    .iter()
                    .flat_map(|c| c.ids[b * c.cap..(b + 1) * c.cap].iter().copied())
                    .collect()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patchify_orders_patches_row_major() {
        let px: Vec<f64> = (0..16).map(|i| i as f64 / 16.0).collect();
        let img = ImageTensor::new(4, 1, px).unwrap();
        let t = patchify(&[&img], 2).unwrap();
        assert_eq!(t.shape(), &[1, 4, 4]);
        // patch 1 is the top-right 2x2 block
        let want: Vec<f64> = [2, 3, 6, 7].iter().map(|&i| i as f64 / 8.0 - 1.0).collect();
        assert_eq!(&t.data()[4..8], want.as_slice());
    }

    #[test]
    fn image_rejects_out_of_range_pixels() {
        assert!(ImageTensor::new(1, 1, vec![1.5]).is_err());
        assert!(ImageTensor::new(2, 1, vec![0.0]).is_err());
    }

    #[test]
    fn recipe_batch_pads_and_truncates() {
        let doc = RecipeDoc {
            id: "a".into(),
            title: vec![5, 6, 7],
            ingredients: vec![vec![8], vec![9]],
            instructions: vec![vec![10]],
            image_ref: None,
        };
        let rb = RecipeBatch::new(&[&doc], [2, 3, 1]);
        assert_eq!(rb.components[0].ids, vec![5, 6]);
        assert_eq!(rb.components[1].ids, vec![8, 9, 0]);
        assert_eq!(rb.valid()[0], vec![true, true, true, true, false, true]);
        assert_eq!(rb.token_ids()[0], vec![5, 6, 8, 9, 0, 10]);
    }
}
