//! Parameter storage and the transformer building blocks shared by every
//! network in the model.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Binder, Var};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Parameters whose names start with `prefix`, with the prefix stripped.
    pub fn subtree(&self, prefix: &str) -> BTreeMap<String, &Tensor> {
        self.params
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v)))
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::all_finite)
    }
}

/// Seeded parameter initialization helpers.
pub struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        self.store.insert(
            format!("{name}.w"),
            Tensor::randn(&[fan_in, fan_out], std, self.rng),
        );
        self.store
            .insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) {
        self.store.insert(format!("{name}.g"), Tensor::ones(&[dim]));
        self.store
            .insert(format!("{name}.b"), Tensor::zeros(&[dim]));
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) {
        self.store.insert(name, Tensor::randn(shape, std, self.rng));
    }

    pub fn attention(&mut self, name: &str, dim: usize) {
        for p in ["q", "k", "v", "o"] {
            self.linear(&format!("{name}.{p}"), dim, dim);
        }
    }

    pub fn mlp(&mut self, name: &str, dim: usize, hidden: usize) {
        self.linear(&format!("{name}.fc1"), dim, hidden);
        self.linear(&format!("{name}.fc2"), hidden, dim);
    }

    /// Pre-norm self-attention block.
    pub fn encoder_layer(&mut self, name: &str, dim: usize, mlp_ratio: usize) {
        self.layer_norm(&format!("{name}.ln1"), dim);
        self.attention(&format!("{name}.attn"), dim);
        self.layer_norm(&format!("{name}.ln2"), dim);
        self.mlp(&format!("{name}.mlp"), dim, dim * mlp_ratio);
    }

    /// Pre-norm block with self-attention, cross-attention and MLP.
    pub fn decoder_layer(&mut self, name: &str, dim: usize, mlp_ratio: usize) {
        self.encoder_layer(name, dim, mlp_ratio);
        self.layer_norm(&format!("{name}.ln_x"), dim);
        self.layer_norm(&format!("{name}.ln_ctx"), dim);
        self.attention(&format!("{name}.xattn"), dim);
    }
}

pub fn linear<'t>(b: &Binder<'t, '_>, name: &str, x: Var<'t>) -> Var<'t> {
    x.matmul(b.param(&format!("{name}.w")))
        .add(b.param(&format!("{name}.b")))
}

pub fn layer_norm<'t>(b: &Binder<'t, '_>, name: &str, x: Var<'t>) -> Var<'t> {
    x.layer_norm(LN_EPS)
        .mul(b.param(&format!("{name}.g")))
        .add(b.param(&format!("{name}.b")))
}

pub fn mlp<'t>(b: &Binder<'t, '_>, name: &str, x: Var<'t>) -> Var<'t> {
    let h = linear(b, &format!("{name}.fc1"), x).gelu();
    linear(b, &format!("{name}.fc2"), h)
}

/// Splits `[B, N, D]` into `[B, H, N, D/H]`.
pub fn split_heads<'t>(x: Var<'t>, heads: usize) -> Var<'t> {
    let s = x.shape();
    let (bsz, n, d) = (s[0], s[1], s[2]);
    assert_eq!(d % heads, 0, "dim {d} not divisible by {heads} heads");
    x.reshape(&[bsz, n, heads, d / heads])
        .permute(&[0, 2, 1, 3])
}

/// Inverse of [`split_heads`].
pub fn merge_heads<'t>(x: Var<'t>) -> Var<'t> {
    let s = x.shape();
    let (bsz, h, n, dh) = (s[0], s[1], s[2], s[3]);
    x.permute(&[0, 2, 1, 3]).reshape(&[bsz, n, h * dh])
}

/// Additive key mask `[B, 1, 1, Nk]`: 0 for valid keys, a large negative
/// number for padding.
pub fn key_bias(valid: &[Vec<bool>]) -> Tensor {
    let bsz = valid.len();
    let nk = valid.first().map_or(0, Vec::len);
    Tensor::from_fn(&[bsz, 1, 1, nk], |i| {
        if valid[i / nk][i % nk] {
            0.0
        } else {
            -1e9
        }
    })
}

/// Multi-head scaled dot-product attention of `q_in` over `kv_in`.
/// Returns the output after `{name}.o` and the head-averaged attention map
/// `[B, Nq, Nk]`.
pub fn attention<'t>(
    b: &Binder<'t, '_>,
    name: &str,
    q_in: Var<'t>,
    kv_in: Var<'t>,
    heads: usize,
    key_valid: Option<&[Vec<bool>]>,
) -> (Var<'t>, Var<'t>) {
    let q = split_heads(linear(b, &format!("{name}.q"), q_in), heads);
    let k = split_heads(linear(b, &format!("{name}.k"), kv_in), heads);
    let v = split_heads(linear(b, &format!("{name}.v"), kv_in), heads);
    let dh = q.shape()[3];
    let mut logits = q.matmul(k.transpose_last()).scale(1.0 / (dh as f64).sqrt());
    if let Some(valid) = key_valid {
        logits = logits.add(b.tape().constant(key_bias(valid)));
    }
    let attn = logits.softmax();
    let out = merge_heads(attn.matmul(v));
    let avg = attn.mean_axis(1);
    let s = avg.shape();
    let avg = avg.reshape(&[s[0], s[2], s[3]]);
    (linear(b, &format!("{name}.o"), out), avg)
}

pub fn encoder_layer<'t>(
    b: &Binder<'t, '_>,
    name: &str,
    x: Var<'t>,
    heads: usize,
    valid: Option<&[Vec<bool>]>,
) -> Var<'t> {
    let h = layer_norm(b, &format!("{name}.ln1"), x);
    let (a, _) = attention(b, &format!("{name}.attn"), h, h, heads, valid);
    let x = x.add(a);
    let h = layer_norm(b, &format!("{name}.ln2"), x);
    x.add(mlp(b, &format!("{name}.mlp"), h))
}

pub fn decoder_layer<'t>(
    b: &Binder<'t, '_>,
    name: &str,
    x: Var<'t>,
    ctx: Var<'t>,
    heads: usize,
    valid: Option<&[Vec<bool>]>,
    ctx_valid: Option<&[Vec<bool>]>,
) -> Var<'t> {
    let h = layer_norm(b, &format!("{name}.ln1"), x);
    let (a, _) = attention(b, &format!("{name}.attn"), h, h, heads, valid);
    let x = x.add(a);
    let h = layer_norm(b, &format!("{name}.ln_x"), x);
    let c = layer_norm(b, &format!("{name}.ln_ctx"), ctx);
    let (a, _) = attention(b, &format!("{name}.xattn"), h, c, heads, ctx_valid);
    let x = x.add(a);
    let h = layer_norm(b, &format!("{name}.ln2"), x);
    x.add(mlp(b, &format!("{name}.mlp"), h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn attention_rows_are_normalized_and_respect_padding() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Init {
            store: &mut store,
            rng: &mut rng,
        }
        .attention("a", 8);
        let tape = Tape::new();
        let b = Binder::trainable(&tape, &store);
        let q = tape.constant(Tensor::randn(&[2, 3, 8], 1.0, &mut rng));
        let kv = tape.constant(Tensor::randn(&[2, 4, 8], 1.0, &mut rng));
        let valid = vec![vec![true, true, false, false], vec![true; 4]];
        let (_, attn) = attention(&b, "a", q, kv, 2, Some(&valid));
        let a = attn.value();
        assert_eq!(a.shape(), &[2, 3, 4]);
        for r in a.data().chunks(4) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for i in 0..3 {
            assert_eq!(a.at(&[0, i, 2]), 0.0);
            assert_eq!(a.at(&[0, i, 3]), 0.0);
        }
    }

    #[test]
    fn split_merge_round_trip() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 8], |i| i as f64));
        let y = merge_heads(split_heads(x, 4));
        assert_eq!(*y.value(), *x.value());
    }
}
