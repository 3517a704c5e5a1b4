//! Patch-embedding image transformer, hierarchical recipe encoder, and the
//! two projections into the shared embedding space.

use rand::Rng;

use crate::autograd::{Binder, Var};
use crate::config::{ImageEncoderConfig, MalmConfig, RecipeEncoderConfig};
use crate::data::RecipeBatch;
use crate::error::{MalmError, Result};
use crate::nn::{self, Init};
use crate::tensor::Tensor;

pub const STUDENT: &str = "student";
pub const TEACHER: &str = "teacher";
pub const IMAGE_PROJ: &str = "proj_image";
pub const RECIPE_PROJ: &str = "proj_recipe";
pub const COMPONENTS: [&str; 3] = ["title", "ingredients", "instructions"];

/// Which side of the shared space a feature sequence belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Image,
    Recipe,
}

/// Vision transformer over flattened patches with a learned CLS token and
/// learned positional embeddings. Instantiated once per parameter prefix.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub prefix: String,
    pub cfg: ImageEncoderConfig,
    pub patches: usize,
    pub patch_dim: usize,
    pub mlp_ratio: usize,
}

impl ImageEncoder {
    pub fn new(prefix: &str, cfg: &MalmConfig) -> Self {
        let ps = cfg.image.patch_size;
        Self {
            prefix: prefix.to_string(),
            cfg: cfg.image.clone(),
            patches: cfg.patches(),
            patch_dim: ps * ps * cfg.data.channels,
            mlp_ratio: cfg.mlp_ratio,
        }
    }

    pub fn init<R: Rng>(&self, init: &mut Init<'_, R>) {
        let (p, h) = (&self.prefix, self.cfg.hidden_dim);
        init.linear(&format!("{p}.patch_embed"), self.patch_dim, h);
        init.normal(&format!("{p}.cls"), &[1, 1, h], 0.02);
        init.normal(&format!("{p}.pos"), &[1, 1 + self.patches, h], 0.02);
        for i in 0..self.cfg.depth {
            init.encoder_layer(&format!("{p}.blocks.{i}"), h, self.mlp_ratio);
        }
        init.layer_norm(&format!("{p}.ln_f"), h);
    }

    /// Encodes `[B, P, patch_dim]` patches. With `visible` (0-based patch
    /// indices per sample) only those patches enter the transformer; the
    /// output is then `[B, 1 + |visible|, hidden]`, CLS first.
    pub fn forward<'t>(
        &self,
        b: &Binder<'t, '_>,
        patches: Var<'t>,
        visible: Option<&[Vec<usize>]>,
    ) -> Result<Var<'t>> {
        let s = patches.shape();
        if s.len() != 3 || s[1] != self.patches || s[2] != self.patch_dim {
            return Err(MalmError::Shape(format!(
                "image encoder expects [B, {}, {}], got {s:?}",
                self.patches, self.patch_dim
            )));
        }
        let bsz = s[0];
        let p = &self.prefix;
        let pos = b.param(&format!("{p}.pos"));
        let mut x = nn::linear(b, &format!("{p}.patch_embed"), patches)
            .add(pos.gather(&[(1..=self.patches).collect()]));
        if let Some(vis) = visible {
            if vis.len() != bsz {
                return Err(MalmError::Shape("one visible list per sample".into()));
            }
            if let Some(&bad) = vis.iter().flatten().find(|&&i| i >= self.patches) {
                return Err(MalmError::Invalid(format!(
                    "patch index {bad} out of range {}",
                    self.patches
                )));
            }
            x = x.gather(vis);
        }
        let cls = b.param(&format!("{p}.cls")).add(pos.select(0)).add(
            b.tape()
                .constant(Tensor::zeros(&[bsz, 1, self.cfg.hidden_dim])),
        );
        let mut x = Var::concat(&[cls, x], 1);
        for i in 0..self.cfg.depth {
            x = nn::encoder_layer(b, &format!("{p}.blocks.{i}"), x, self.cfg.heads, None);
        }
        Ok(nn::layer_norm(b, &format!("{p}.ln_f"), x))
    }
}

/// Per-component transformer encoders followed by a fusion decoder in which
/// every component attends to the other two. Output is the concatenation of
/// the fused title, ingredient and instruction tokens.
#[derive(Clone, Debug)]
pub struct RecipeEncoder {
    pub cfg: RecipeEncoderConfig,
    pub vocab_size: usize,
    pub caps: [usize; 3],
    pub mlp_ratio: usize,
}

impl RecipeEncoder {
    pub fn new(cfg: &MalmConfig, vocab_size: usize) -> Self {
        Self {
            cfg: cfg.recipe.clone(),
            vocab_size,
            caps: [
                cfg.data.title_cap,
                cfg.data.ingredients_cap,
                cfg.data.instructions_cap,
            ],
            mlp_ratio: cfg.mlp_ratio,
        }
    }

    pub fn init<R: Rng>(&self, init: &mut Init<'_, R>) {
        let h = self.cfg.component_hidden;
        init.normal("recipe.embed", &[self.vocab_size, h], 0.1);
        for (c, name) in COMPONENTS.iter().enumerate() {
            init.normal(&format!("recipe.{name}.pos"), &[1, self.caps[c], h], 0.02);
            for i in 0..self.cfg.component_depth {
                init.encoder_layer(&format!("recipe.{name}.blocks.{i}"), h, self.mlp_ratio);
            }
            init.layer_norm(&format!("recipe.{name}.ln_f"), h);
            for j in 0..self.cfg.fusion_depth {
                init.decoder_layer(&format!("recipe.fusion.{name}.{j}"), h, self.mlp_ratio);
            }
            init.layer_norm(&format!("recipe.fusion.{name}.ln_f"), h);
        }
    }

    /// `[B, S, hidden]` with `S = Σ caps`.
    pub fn forward<'t>(&self, b: &Binder<'t, '_>, batch: &RecipeBatch) -> Result<Var<'t>> {
        let bsz = batch.batch_size();
        let emb = b.param("recipe.embed");
        let mut xs = Vec::with_capacity(3);
        for (c, name) in COMPONENTS.iter().enumerate() {
            let comp = &batch.components[c];
            if comp.cap != self.caps[c] {
                return Err(MalmError::Shape(format!(
                    "{name} padded to {} but the encoder expects {}",
                    comp.cap, self.caps[c]
                )));
            }
            let mut x = emb.embedding(&comp.ids, &[bsz, comp.cap]);
            if self.cfg.positional {
                x = x.add(b.param(&format!("recipe.{name}.pos")));
            }
            for i in 0..self.cfg.component_depth {
                x = nn::encoder_layer(
                    b,
                    &format!("recipe.{name}.blocks.{i}"),
                    x,
                    self.cfg.component_heads,
                    Some(&comp.valid),
                );
            }
            xs.push(nn::layer_norm(b, &format!("recipe.{name}.ln_f"), x));
        }
        for j in 0..self.cfg.fusion_depth {
            let prev = xs.clone();
            for (c, name) in COMPONENTS.iter().enumerate() {
                let others: Vec<usize> = (0..3).filter(|&o| o != c).collect();
                let ctx = Var::concat(&[prev[others[0]], prev[others[1]]], 1);
                let ctx_valid: Vec<Vec<bool>> = (0..bsz)
                    .map(|s| {
                        others
                            .iter()
                            .flat_map(|&o| batch.components[o].valid[s].iter().copied())
                            .collect()
                    })
                    .collect();
                xs[c] = nn::decoder_layer(
                    b,
                    &format!("recipe.fusion.{name}.{j}"),
                    prev[c],
                    ctx,
                    self.cfg.fusion_heads,
                    Some(&batch.components[c].valid),
                    Some(&ctx_valid),
                );
            }
        }
        let fused: Vec<Var<'t>> = COMPONENTS
            .iter()
            .zip(xs)
            .map(|(name, x)| nn::layer_norm(b, &format!("recipe.fusion.{name}.ln_f"), x))
            .collect();
        Ok(Var::concat(&fused, 1))
    }
}

pub fn init_projections<R: Rng>(init: &mut Init<'_, R>, cfg: &MalmConfig) {
    init.linear(IMAGE_PROJ, cfg.image.hidden_dim, cfg.embed_dim);
    init.linear(RECIPE_PROJ, cfg.recipe.component_hidden, cfg.embed_dim);
}

/// Affine map of a feature sequence into the shared dimension.
pub fn project<'t>(b: &Binder<'t, '_>, features: Var<'t>, which: Modality) -> Result<Var<'t>> {
    let name = match which {
        Modality::Image => IMAGE_PROJ,
        Modality::Recipe => RECIPE_PROJ,
    };
    let w = b.param(&format!("{name}.w"));
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    let got = *features.shape().last().unwrap_or(&0);
    if got != din {
        return Err(MalmError::Shape(format!(
            "{name} expects input dim {din}, got {got}"
        )));
    }
    let out = nn::linear(b, name, features);
    debug_assert_eq!(*out.shape().last().unwrap(), dout);
    Ok(out)
}

/// Mean over valid positions of `[B, S, D]` features, as `[B, D]`.
pub fn masked_mean<'t>(x: Var<'t>, valid: &[Vec<bool>]) -> Var<'t> {
    let s = x.shape();
    let (bsz, n) = (s[0], s[1]);
    let w = Tensor::from_fn(&[bsz, n, 1], |i| {
        let (b, j) = (i / n, i % n);
        let count = valid[b].iter().filter(|&&v| v).count().max(1);
        if valid[b][j] {
            1.0 / count as f64
        } else {
            0.0
        }
    });
    let d = s[2];
    x.mul(x.tape().constant(w)).sum_axis(1).reshape(&[bsz, d])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::data::{RecipeDoc, Vocab};
    use crate::nn::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> MalmConfig {
        let mut c = MalmConfig::desk_synthetic();
        c.data.image_size = 16;
        c.image.patch_size = 8;
        c.image.hidden_dim = 8;
        c.image.heads = 2;
        c.recipe.component_hidden = 8;
        c.embed_dim = 8;
        c
    }

    fn store_for(cfg: &MalmConfig, vocab: usize) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        ImageEncoder::new(STUDENT, cfg).init(&mut init);
        RecipeEncoder::new(cfg, vocab).init(&mut init);
        init_projections(&mut init, cfg);
        store
    }

    #[test]
    fn student_output_length_tracks_visible_patches() {
        let cfg = tiny();
        let store = store_for(&cfg, 10);
        let tape = Tape::new();
        let b = Binder::trainable(&tape, &store);
        let enc = ImageEncoder::new(STUDENT, &cfg);
        let x = tape.constant(Tensor::randn(
            &[2, 4, 192],
            0.5,
            &mut ChaCha8Rng::seed_from_u64(2),
        ));
        let out = enc.forward(&b, x, Some(&[vec![1], vec![3]])).unwrap();
        assert_eq!(out.shape(), vec![2, 2, 8]);
        let full = enc.forward(&b, x, None).unwrap();
        assert_eq!(full.shape(), vec![2, 5, 8]);
        assert!(full.value().all_finite());
        assert!(enc.forward(&b, x, Some(&[vec![4], vec![0]])).is_err());
    }

    #[test]
    fn projection_checks_input_dim() {
        let cfg = tiny();
        let store = store_for(&cfg, 10);
        let tape = Tape::new();
        let b = Binder::trainable(&tape, &store);
        let bad = tape.constant(Tensor::zeros(&[1, 2, 5]));
        assert!(project(&b, bad, Modality::Image).is_err());
        let ok = tape.constant(Tensor::zeros(&[1, 2, 8]));
        assert_eq!(
            project(&b, ok, Modality::Recipe).unwrap().shape(),
            vec![1, 2, 8]
        );
    }

    #[test]
    fn recipe_length_is_sum_of_caps() {
        let mut cfg = tiny();
        cfg.data.title_cap = 16;
        cfg.data.ingredients_cap = 64;
        cfg.data.instructions_cap = 128;
        let vocab = Vocab::build(["salt pepper stir bake soup"]);
        let store = store_for(&cfg, vocab.len());
        let doc = RecipeDoc {
            id: "x".into(),
            title: vocab.encode("soup"),
            ingredients: vec![vocab.encode("salt"), vocab.encode("pepper")],
            instructions: vec![vocab.encode("stir bake")],
            image_ref: None,
        };
        let rb = RecipeBatch::new(&[&doc, &doc], [16, 64, 128]);
        let tape = Tape::new();
        let b = Binder::trainable(&tape, &store);
        let out = RecipeEncoder::new(&cfg, vocab.len())
            .forward(&b, &rb)
            .unwrap();
        assert_eq!(out.shape(), vec![2, 208, 8]);
        assert!(out.value().all_finite());
    }

    #[test]
    fn masked_mean_ignores_padding() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(
            vec![1, 3, 2],
            vec![1.0, 2.0, 3.0, 4.0, 100.0, 100.0],
        ));
        let m = masked_mean(x, &[vec![true, true, false]]);
        assert_eq!(m.value().data(), &[2.0, 3.0]);
    }
}
