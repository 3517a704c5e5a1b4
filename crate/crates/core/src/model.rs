//! The full network: parameter layout, the training forward pass that yields
//! every loss term, and the inference-time embedding paths.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Binder, Tape, Var};
use crate::config::MalmConfig;
use crate::data::{patchify, ImageTensor, PairedBatch, RecipeBatch, RecipeDoc, Vocab};
use crate::distillation::{copy_prefix, loss_dist, ReconstructionHead};
use crate::encoders::{
    init_projections, masked_mean, project, ImageEncoder, Modality, RecipeEncoder, STUDENT, TEACHER,
};
use crate::error::{MalmError, Result};
use crate::masking::{
    assemble_masked_sequence, sample_mask, sample_token_mask, MaskSpec, MASK_POS, MASK_TOKEN,
};
use crate::matching::{
    global_features, init_matching, inverse_temperature, local_recipe_features, loss_gc, loss_lc,
    match_features, MatchOutputs,
};
use crate::nn::{Init, ParamStore};
use crate::tensor::Tensor;
use crate::training::loss_itc;

pub const RECIPE_MASK_TOKEN: &str = "recipe_mask_token";

/// Rows per chunk when embedding a corpus.
const EMBED_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct Malm {
    pub cfg: MalmConfig,
    pub params: ParamStore,
    pub vocab: Vocab,
}

/// Masks drawn for one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMasks {
    pub image: MaskSpec,
    /// 0-based recipe token positions, when recipe masking is enabled.
    pub recipe: Option<Vec<Vec<usize>>>,
}

/// Named loss terms of one forward pass, still on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LossBundle<'t> {
    pub itc: Var<'t>,
    pub gc: Var<'t>,
    pub lc: Var<'t>,
    pub dist: Var<'t>,
}

#[derive(Clone, Copy, Debug)]
pub struct TrainForward<'t> {
    pub losses: LossBundle<'t>,
    pub matching: Option<MatchOutputs<'t>>,
}

impl Malm {
    /// Seeded initialization; the teacher starts as an exact copy of the
    /// student.
    pub fn new(cfg: MalmConfig, vocab: Vocab) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.embed_dim;
        {
            let mut init = Init {
                store: &mut params,
                rng: &mut rng,
            };
            ImageEncoder::new(STUDENT, &cfg).init(&mut init);
            RecipeEncoder::new(&cfg, vocab.len()).init(&mut init);
            init_projections(&mut init, &cfg);
            init_matching(&mut init, &cfg.matching, d);
            ReconstructionHead::new(&cfg.distill, d, cfg.mlp_ratio).init(&mut init);
            init.normal(MASK_TOKEN, &[d], 0.02);
            init.normal(MASK_POS, &[1 + cfg.patches(), d], 0.02);
            if cfg.mask.mask_recipe {
                init.normal(RECIPE_MASK_TOKEN, &[d], 0.02);
            }
        }
        copy_prefix(&mut params, STUDENT, TEACHER);
        Ok(Self { cfg, params, vocab })
    }

    pub fn student(&self) -> ImageEncoder {
        ImageEncoder::new(STUDENT, &self.cfg)
    }

    pub fn teacher(&self) -> ImageEncoder {
        ImageEncoder::new(TEACHER, &self.cfg)
    }

    pub fn recipe_encoder(&self) -> RecipeEncoder {
        RecipeEncoder::new(&self.cfg, self.vocab.len())
    }

    pub fn recon_head(&self) -> ReconstructionHead {
        ReconstructionHead::new(&self.cfg.distill, self.cfg.embed_dim, self.cfg.mlp_ratio)
    }

    pub fn caps(&self) -> [usize; 3] {
        let d = &self.cfg.data;
        [d.title_cap, d.ingredients_cap, d.instructions_cap]
    }

    /// Draws the image mask (and recipe mask, if enabled) for a batch.
    pub fn sample_masks(&self, recipes: &RecipeBatch, seed: u64) -> Result<StepMasks> {
        let bsz = recipes.batch_size();
        let image = sample_mask(self.cfg.patches(), self.cfg.mask.ratio, bsz, seed)?;
        let recipe = if self.cfg.mask.mask_recipe {
            let m = sample_token_mask(&recipes.valid(), self.cfg.mask.ratio, seed ^ 0x5eed)?;
            Some(m)
        } else {
            None
        };
        Ok(StepMasks { image, recipe })
    }

    pub fn matching_enabled(&self) -> bool {
        let o = &self.cfg.objective;
        o.lambda_itm > 0.0 && (o.global_loss || o.local_loss)
    }

    /// One training forward pass. `b` binds trainable parameters and
    /// `frozen` binds the same store without gradients (teacher targets).
    pub fn forward_train<'t>(
        &self,
        b: &Binder<'t, '_>,
        frozen: &Binder<'t, '_>,
        batch: &PairedBatch<'_>,
        recipes: &RecipeBatch,
        masks: &StepMasks,
    ) -> Result<TrainForward<'t>> {
        let tape = b.tape();
        let bsz = batch.len();
        if recipes.batch_size() != bsz || masks.image.batch() != bsz {
            return Err(MalmError::Shape(format!(
                "batch of {bsz} pairs with {} recipes and {} masks",
                recipes.batch_size(),
                masks.image.batch()
            )));
        }
        let patches = tape.constant(patchify(&batch.images, self.cfg.image.patch_size)?);
        let visible = masks.image.visible_patches();
        let vis = self.student().forward(b, patches, Some(&visible))?;
        let vis = project(b, vis, Modality::Image)?;
        let i_f = assemble_masked_sequence(
            vis,
            &masks.image,
            b.param(MASK_TOKEN),
            Some(b.param(MASK_POS)),
        )?;

        let valid = recipes.valid();
        let r_f = project(
            b,
            self.recipe_encoder().forward(b, recipes)?,
            Modality::Recipe,
        )?;
        let (r_in, recipe_mask) = match &masks.recipe {
            Some(pos) if pos.first().is_some_and(|p| !p.is_empty()) => {
                let s = r_f.shape()[1];
                let m = Tensor::from_fn(&[bsz, s, 1], |i| {
                    f64::from(u8::from(pos[i / s].binary_search(&(i % s)).is_ok()))
                });
                let keep = m.map(|v| 1.0 - v);
                let token = b.param(RECIPE_MASK_TOKEN);
                let r = r_f
                    .mul(tape.constant(keep))
                    .add(tape.constant(m).mul(token));
                (r, Some(pos))
            }
            _ => (r_f, None),
        };

        let zero = || tape.scalar(0.0);
        let obj = &self.cfg.objective;
        let (gc, lc, matching) = if self.matching_enabled() {
            let out = match_features(b, &self.cfg.matching, i_f, r_in, Some(&valid))?;
            let inv_tau = inverse_temperature(b, &self.cfg.matching);
            let gc = if obj.global_loss {
                let (i_g, r_g) = global_features(&out, Some(&valid));
                loss_gc(i_g, r_g, &self.cfg.matching, inv_tau)?
            } else {
                zero()
            };
            let lc = if obj.local_loss {
                let r_l = local_recipe_features(out.a_i, out.r_att, Some(&valid))?;
                loss_lc(out.i_att, r_l, &self.cfg.matching, inv_tau)?
            } else {
                zero()
            };
            (gc, lc, Some(out))
        } else {
            (zero(), zero(), None)
        };

        let mut dist = zero();
        if obj.lambda_dist > 0.0 {
            let head = self.recon_head();
            let beta = self.cfg.distill.beta;
            if !masks.image.is_empty() {
                let pred = head.forward(b, i_f, None)?;
                let teacher = self.teacher().forward(frozen, patches, None)?;
                let target = project(frozen, teacher, Modality::Image)?;
                dist = loss_dist(pred, target, &masks.image, beta)?;
            }
            if let Some(pos) = recipe_mask {
                let pred = head.forward(b, r_in, Some(&valid))?;
                let diff = pred.gather(pos).sub(r_f.detach().gather(pos));
                dist = dist.add(diff.smooth_l1(beta).mean());
            }
        }

        // masking augments the matching and reconstruction inputs; the
        // triplet loss sees the whole image, as retrieval does
        let full = if masks.image.is_empty() {
            vis
        } else {
            project(
                b,
                self.student().forward(b, patches, None)?,
                Modality::Image,
            )?
        };
        let cls = full.select(0).reshape(&[bsz, self.cfg.embed_dim]);
        let pooled = masked_mean(r_f, &valid);
        let itc = loss_itc(cls, pooled, obj.triplet_margin)?;
        Ok(TrainForward {
            losses: LossBundle { itc, gc, lc, dist },
            matching,
        })
    }

    /// Unit-normalized projected student CLS features, one row per image,
    /// with no masking.
    pub fn embed_images(&self, images: &[&ImageTensor]) -> Result<Tensor> {
        let d = self.cfg.embed_dim;
        let mut out = Vec::with_capacity(images.len() * d);
        for chunk in images.chunks(EMBED_CHUNK) {
            let tape = Tape::new();
            let b = Binder::frozen(&tape, &self.params);
            let patches = tape.constant(patchify(chunk, self.cfg.image.patch_size)?);
            let x = project(
                &b,
                self.student().forward(&b, patches, None)?,
                Modality::Image,
            )?;
            let cls = x.select(0).reshape(&[chunk.len(), d]).l2_normalize(1e-12);
            out.extend_from_slice(cls.value().data());
        }
        Ok(Tensor::new(vec![images.len(), d], out))
    }

    /// Unit-normalized mean of projected recipe tokens, one row per recipe.
    pub fn embed_recipes(&self, docs: &[&RecipeDoc]) -> Result<Tensor> {
        let d = self.cfg.embed_dim;
        let mut out = Vec::with_capacity(docs.len() * d);
        for chunk in docs.chunks(EMBED_CHUNK) {
            let tape = Tape::new();
            let b = Binder::frozen(&tape, &self.params);
            let batch = RecipeBatch::new(chunk, self.caps());
            let x = project(
                &b,
                self.recipe_encoder().forward(&b, &batch)?,
                Modality::Recipe,
            )?;
            let pooled = masked_mean(x, &batch.valid()).l2_normalize(1e-12);
            out.extend_from_slice(pooled.value().data());
        }
        Ok(Tensor::new(vec![docs.len(), d], out))
    }

    /// Image-to-recipe attention `A_I` `[B, 1+P, S]` for unmasked images,
    /// along with the padded recipe batch it refers to.
    pub fn image_attention(
        &self,
        images: &[&ImageTensor],
        docs: &[&RecipeDoc],
    ) -> Result<(Tensor, RecipeBatch)> {
        let tape = Tape::new();
        let b = Binder::frozen(&tape, &self.params);
        let patches = tape.constant(patchify(images, self.cfg.image.patch_size)?);
        let i_f = project(
            &b,
            self.student().forward(&b, patches, None)?,
            Modality::Image,
        )?;
        let batch = RecipeBatch::new(docs, self.caps());
        let r_f = project(
            &b,
            self.recipe_encoder().forward(&b, &batch)?,
            Modality::Recipe,
        )?;
        let out = match_features(&b, &self.cfg.matching, i_f, r_f, Some(&batch.valid()))?;
        Ok(((*out.a_i.value()).clone(), batch))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn tiny() -> MalmConfig {
        let mut c = MalmConfig::desk_synthetic();
        c.embed_dim = 8;
        c.image.hidden_dim = 8;
        c.recipe.component_hidden = 8;
        c
    }

    #[test]
    fn teacher_starts_as_student_copy() {
        let cfg = tiny();
        let spec = SyntheticSpec::from_config(&cfg);
        let m = Malm::new(cfg, spec.vocab()).unwrap();
        for (name, t) in m.params.iter().filter(|(n, _)| n.starts_with("student.")) {
            let twin = name.replacen("student.", "teacher.", 1);
            assert_eq!(m.params.get(&twin), Some(t));
        }
    }

    #[test]
    fn empty_mask_student_equals_teacher() {
        let cfg = tiny();
        let spec = SyntheticSpec::from_config(&cfg);
        let set = generate_synthetic(&spec, 3).unwrap();
        let m = Malm::new(cfg.clone(), spec.vocab()).unwrap();
        let imgs: Vec<&ImageTensor> = set.dataset.pairs.iter().map(|p| &p.image).collect();
        let tape = Tape::new();
        let b = Binder::frozen(&tape, &m.params);
        let x = tape.constant(patchify(&imgs, cfg.image.patch_size).unwrap());
        let all: Vec<Vec<usize>> = vec![(0..cfg.patches()).collect(); 3];
        let s = m.student().forward(&b, x, Some(&all)).unwrap().value();
        let t = m.teacher().forward(&b, x, None).unwrap().value();
        assert_eq!(*s, *t);
    }

    #[test]
    fn forward_produces_finite_losses() {
        let cfg = tiny();
        let spec = SyntheticSpec::from_config(&cfg);
        let set = generate_synthetic(&spec, 4).unwrap();
        let m = Malm::new(cfg, spec.vocab()).unwrap();
        let batch = PairedBatch::gather(&set.dataset.pairs, &[0, 1, 2, 3]);
        let recipes = RecipeBatch::new(&batch.recipes, m.caps());
        let masks = m.sample_masks(&recipes, 7).unwrap();
        let tape = Tape::new();
        let b = Binder::trainable(&tape, &m.params);
        let f = Binder::frozen(&tape, &m.params);
        let out = m.forward_train(&b, &f, &batch, &recipes, &masks).unwrap();
        let l = out.losses;
        for v in [l.itc, l.gc, l.lc, l.dist] {
            assert!(v.item().is_finite());
        }
        assert!(l.dist.item() > 0.0);
    }

    #[test]
    fn embeddings_are_unit_and_mask_free() {
        let cfg = tiny();
        let spec = SyntheticSpec::from_config(&cfg);
        let set = generate_synthetic(&spec, 5).unwrap();
        let m = Malm::new(cfg, spec.vocab()).unwrap();
        let imgs: Vec<&ImageTensor> = set.dataset.pairs.iter().map(|p| &p.image).collect();
        let docs: Vec<&RecipeDoc> = set.dataset.pairs.iter().map(|p| &p.recipe).collect();
        let e = m.embed_images(&imgs).unwrap();
        let r = m.embed_recipes(&docs).unwrap();
        for t in [&e, &r] {
            assert_eq!(t.shape()[0], 5);
            for i in 0..5 {
                assert!((t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
            }
        }
        let mut other = m.clone();
        other.cfg.mask.ratio = 0.25;
        assert_eq!(other.embed_images(&imgs).unwrap(), e);
    }
}
