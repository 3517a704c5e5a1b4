//! Procedural image-recipe pairs with known patch ↔ ingredient correspondence.
//!
//! Every ingredient class owns one fixed patch of the grid and a fixed random
//! texture. A sample picks 2–5 classes, paints each class texture onto its
//! patch, and writes a templated recipe that names exactly those classes.
//! The recipe text is a function of the class set alone.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, ImageTensor, Pair, RawRecipe, RecipeDoc, Vocab};
use crate::config::MalmConfig;
use crate::error::{invalid, Result};

pub const CLASS_NAMES: [&str; 24] = [
    "tomato", "basil", "egg", "rice", "carrot", "onion", "garlic", "pepper", "cheese", "chicken",
    "beef", "potato", "lemon", "mushroom", "spinach", "bean", "corn", "apple", "salmon", "shrimp",
    "tofu", "pea", "ginger", "lime",
];
/// Dish word by class count, 2 to 5.
const DISHES: [&str; 4] = ["salad", "bowl", "stew", "soup"];
const TEMPLATE_WORDS: &str = "with add . serve warm";
const MIN_K: usize = 2;
const MAX_K: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    /// Patch grid `(rows, cols)`.
    pub grid: (usize, usize),
    pub patch_size: usize,
    pub channels: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn from_config(cfg: &MalmConfig) -> Self {
        let g = cfg.data.image_size / cfg.image.patch_size;
        Self {
            n_classes: cfg.data.synth_classes,
            grid: (g, g),
            patch_size: cfg.image.patch_size,
            channels: cfg.data.channels,
            noise_std: cfg.data.synth_noise_std,
            seed: cfg.seed,
        }
    }

    pub fn patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    fn validate(&self) -> Result<()> {
        if self.grid.0 != self.grid.1 {
            return invalid("synthetic images must be square");
        }
        if self.n_classes > self.patches() {
            return invalid(format!(
                "{} classes need distinct regions but the grid has {} patches",
                self.n_classes,
                self.patches()
            ));
        }
        if self.n_classes < MAX_K {
            return invalid(format!(
                "samples draw up to {MAX_K} classes but only {} exist",
                self.n_classes
            ));
        }
        if self.n_classes > CLASS_NAMES.len() {
            return invalid(format!("at most {} ingredient classes", CLASS_NAMES.len()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return invalid("noise_std must be a finite non-negative number");
        }
        Ok(())
    }

    /// The fixed vocabulary of the generator's templates.
    pub fn vocab(&self) -> Vocab {
        let words = CLASS_NAMES[..self.n_classes]
            .iter()
            .chain(&DISHES)
            .copied()
            .chain(TEMPLATE_WORDS.split(' '))
            .collect::<Vec<_>>()
            .join(" ");
        Vocab::build([words.as_str()])
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab().len()
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSet {
    pub dataset: Dataset,
    pub raw: Vec<RawRecipe>,
    /// Texture of every class, `patch_size² · channels` values.
    pub patterns: Vec<Vec<f64>>,
    /// Patch index painted by every class.
    pub region_of_class: Vec<usize>,
}

pub fn generate_synthetic(spec: &SyntheticSpec, n: usize) -> Result<SyntheticSet> {
    spec.validate()?;
    if n == 0 {
        return invalid("n must be at least 1");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let p = spec.patches();
    let ps = spec.patch_size;
    let ch = spec.channels;
    let size = spec.grid.0 * ps;

    let mut regions: Vec<usize> = (0..p).collect();
    regions.shuffle(&mut rng);
    let region_of_class: Vec<usize> = regions[..spec.n_classes].to_vec();
    let patterns: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|_| (0..ps * ps * ch).map(|_| rng.random::<f64>()).collect())
        .collect();
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("finite std");

    let vocab = spec.vocab();
    let mut raw = Vec::with_capacity(n);
    let mut pairs = Vec::with_capacity(n);
    let mut all_classes: Vec<usize> = (0..spec.n_classes).collect();
    for i in 0..n {
        let k = rng.random_range(MIN_K..=MAX_K);
        all_classes.shuffle(&mut rng);
        let mut classes = all_classes[..k].to_vec();
        classes.sort_unstable();

        let mut pixels = vec![0.0; size * size * ch];
        let mut groundtruth = BTreeMap::new();
        for &c in &classes {
            let region = region_of_class[c];
            groundtruth.insert(region, c);
            let (pr, pc) = (region / spec.grid.1, region % spec.grid.1);
            for r in 0..ps {
                let start = ((pr * ps + r) * size + pc * ps) * ch;
                pixels[start..start + ps * ch]
                    .copy_from_slice(&patterns[c][r * ps * ch..(r + 1) * ps * ch]);
            }
        }
        if spec.noise_std > 0.0 {
            for v in &mut pixels {
                *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }

        let name = |c: usize| CLASS_NAMES[c];
        let dish = DISHES[k - MIN_K];
        let title = format!("{} {} {dish}", name(classes[0]), name(classes[1]));
        let ingredients = classes.iter().map(|&c| name(c).to_string()).collect();
        let mut instructions: Vec<String> = classes
            .iter()
            .map(|&c| format!("add {}.", name(c)))
            .collect();
        instructions.push("serve warm.".into());

        let id = format!("synth-{i:06}");
        let rec = RawRecipe {
            id: id.clone(),
            title,
            ingredients,
            instructions,
            image: Some(format!("images/{id}.png")),
        };
        pairs.push(Pair {
            image: ImageTensor::new(size, ch, pixels)?,
            recipe: RecipeDoc::from_raw(&rec, &vocab)?,
            groundtruth: Some(groundtruth),
        });
        raw.push(rec);
    }
    let class_tokens = CLASS_NAMES[..spec.n_classes]
        .iter()
        .map(|w| vocab.id(w))
        .collect();
    Ok(SyntheticSet {
        dataset: Dataset {
            pairs,
            vocab,
            class_tokens: Some(class_tokens),
        },
        raw,
        patterns,
        region_of_class,
    })
}
