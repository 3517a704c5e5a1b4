//! Two-level image-recipe matching.
//!
//! The image stream attends to recipe tokens and the recipe stream attends to
//! the cross-attended image tokens. Global matching contrasts the image CLS row
//! with the mean recipe row; local matching contrasts every image position with
//! the attention-weighted recipe features relevant to that position.

use rand::Rng;

use crate::autograd::{Binder, Var};
use crate::config::{BatchReduction, MatchingConfig};
use crate::error::{MalmError, Result};
use crate::nn::{merge_heads, split_heads, Init};
use crate::tensor::Tensor;

pub const LOGIT_SCALE: &str = "logit_scale";
/// Temperature bounds; the log-scale parameter is clamped to match.
pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 1.0;

/// Cross-attention features and head-averaged attention maps.
#[derive(Clone, Copy, Debug)]
pub struct MatchOutputs<'t> {
    /// `[B, N, D]`, N = 1 + P
    pub i_att: Var<'t>,
    /// `[B, S, D]`
    pub r_att: Var<'t>,
    /// `[B, N, S]`
    pub a_i: Var<'t>,
    /// `[B, S, N]`
    pub a_r: Var<'t>,
}

pub fn init_matching<R: Rng>(init: &mut Init<'_, R>, cfg: &MatchingConfig, dim: usize) {
    let std = (1.0 / dim as f64).sqrt();
    for l in 0..cfg.depth {
        for side in ["img", "rec"] {
            for w in ["wq", "wk", "wv"] {
                init.normal(&format!("match.{l}.{side}.{w}"), &[dim, dim], std);
            }
        }
    }
    init.store.insert(
        LOGIT_SCALE,
        Tensor::new(vec![1], vec![(1.0 / cfg.temperature_init).ln()]),
    );
}

/// Clamps a log-scale value so that `τ = exp(-s)` stays in bounds.
pub fn clamp_logit_scale(s: f64) -> f64 {
    s.clamp((1.0 / TAU_MAX).ln(), (1.0 / TAU_MIN).ln())
}

/// `1/τ` as a differentiable scalar, or a constant when the temperature is
/// frozen.
pub fn inverse_temperature<'t>(b: &Binder<'t, '_>, cfg: &MatchingConfig) -> Var<'t> {
    let s = b.param(LOGIT_SCALE);
    if cfg.learnable_temperature {
        s.exp()
    } else {
        s.detach().exp()
    }
}

fn check_dims(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a.len() != 3 || b.len() != 3 || a[0] != b[0] || a[2] != b[2] {
        return Err(MalmError::Shape(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// `softmax(Q Kᵀ / √d) V` with `Q = x Wq`, `K = ctx Wk`, `V = ctx Wv`.
/// Returns the output and the attention averaged over heads.
fn cross_attend<'t>(
    b: &Binder<'t, '_>,
    prefix: &str,
    x: Var<'t>,
    ctx: Var<'t>,
    heads: usize,
    ctx_valid: Option<&[Vec<bool>]>,
) -> (Var<'t>, Var<'t>) {
    let q = split_heads(x.matmul(b.param(&format!("{prefix}.wq"))), heads);
    let k = split_heads(ctx.matmul(b.param(&format!("{prefix}.wk"))), heads);
    let v = split_heads(ctx.matmul(b.param(&format!("{prefix}.wv"))), heads);
    let dh = q.shape()[3];
    let mut logits = q.matmul(k.transpose_last()).scale(1.0 / (dh as f64).sqrt());
    if let Some(valid) = ctx_valid {
        logits = logits.add(b.tape().constant(crate::nn::key_bias(valid)));
    }
    let attn = logits.softmax();
    let out = merge_heads(attn.matmul(v));
    let s = attn.shape();
    let avg = attn.mean_axis(1).reshape(&[s[0], s[2], s[3]]);
    (out, avg)
}

/// Image queries over recipe keys/values: `(I_att, A_I)`.
pub fn cross_attend_image<'t>(
    b: &Binder<'t, '_>,
    layer: usize,
    image: Var<'t>,
    recipe: Var<'t>,
    heads: usize,
    recipe_valid: Option<&[Vec<bool>]>,
) -> Result<(Var<'t>, Var<'t>)> {
    check_dims(&image.shape(), &recipe.shape(), "cross_attend_image")?;
    Ok(cross_attend(
        b,
        &format!("match.{layer}.img"),
        image,
        recipe,
        heads,
        recipe_valid,
    ))
}

/// Recipe queries over the cross-attended image features: `(R_att, A_R)`.
pub fn cross_attend_recipe<'t>(
    b: &Binder<'t, '_>,
    layer: usize,
    recipe: Var<'t>,
    i_att: Var<'t>,
    heads: usize,
) -> Result<(Var<'t>, Var<'t>)> {
    check_dims(&recipe.shape(), &i_att.shape(), "cross_attend_recipe")?;
    Ok(cross_attend(
        b,
        &format!("match.{layer}.rec"),
        recipe,
        i_att,
        heads,
        None,
    ))
}

/// Runs `cfg.depth` bidirectional blocks, each feeding the next.
pub fn match_features<'t>(
    b: &Binder<'t, '_>,
    cfg: &MatchingConfig,
    image: Var<'t>,
    recipe: Var<'t>,
    recipe_valid: Option<&[Vec<bool>]>,
) -> Result<MatchOutputs<'t>> {
    let (mut img, mut rec) = (image, recipe);
    let mut maps = None;
    for l in 0..cfg.depth.max(1) {
        let (i_att, a_i) = cross_attend_image(b, l, img, rec, cfg.heads, recipe_valid)?;
        let (r_att, a_r) = cross_attend_recipe(b, l, rec, i_att, cfg.heads)?;
        img = i_att;
        rec = r_att;
        maps = Some((a_i, a_r));
    }
    let (a_i, a_r) = maps.expect("at least one matching layer");
    Ok(MatchOutputs {
        i_att: img,
        r_att: rec,
        a_i,
        a_r,
    })
}

fn valid_weights(bsz: usize, s: usize, valid: Option<&[Vec<bool>]>) -> Tensor {
    Tensor::from_fn(&[bsz, s, 1], |i| {
        let (b, j) = (i / s, i % s);
        match valid {
            None => 1.0 / s as f64,
            Some(v) => {
                let n = v[b].iter().filter(|&&x| x).count().max(1);
                if v[b][j] {
                    1.0 / n as f64
                } else {
                    0.0
                }
            }
        }
    })
}

/// `I_g = I_att[:, CLS, :]` and `R_g = mean_s R_att[:, s, :]` (over valid
/// recipe positions).
pub fn global_features<'t>(
    out: &MatchOutputs<'t>,
    recipe_valid: Option<&[Vec<bool>]>,
) -> (Var<'t>, Var<'t>) {
    let s = out.i_att.shape();
    let (bsz, d) = (s[0], s[2]);
    let i_g = out.i_att.select(0).reshape(&[bsz, d]);
    let rs = out.r_att.shape();
    let w = out
        .r_att
        .tape()
        .constant(valid_weights(bsz, rs[1], recipe_valid));
    let r_g = out.r_att.mul(w).sum_axis(1).reshape(&[bsz, d]);
    (i_g, r_g)
}

/// `R_l[:, p, :] = (1/S) Σ_s A_I[:, p, s] · R_att[:, s, :]`, with S the number
/// of valid recipe positions of each sample.
pub fn local_recipe_features<'t>(
    a_i: Var<'t>,
    r_att: Var<'t>,
    recipe_valid: Option<&[Vec<bool>]>,
) -> Result<Var<'t>> {
    let (sa, sr) = (a_i.shape(), r_att.shape());
    if sa.len() != 3 || sr.len() != 3 || sa[0] != sr[0] || sa[2] != sr[1] {
        return Err(MalmError::Shape(format!(
            "local_recipe_features: A_I {sa:?} vs R_att {sr:?}"
        )));
    }
    let bsz = sa[0];
    let inv_s = Tensor::from_fn(&[bsz, 1, 1], |b| {
        let n = recipe_valid.map_or(sa[2], |v| v[b].iter().filter(|&&x| x).count().max(1));
        1.0 / n as f64
    });
    Ok(a_i.matmul(r_att).mul(a_i.tape().constant(inv_s)))
}

/// `log Z` for every row of `[..., B, B]` similarity logits, where row `i`
/// holds `x_i · y_k / τ` for all `k`.
fn log_z_rows<'t>(logits: Var<'t>, literal_denominator: bool) -> Var<'t> {
    let shape = logits.shape();
    let n = shape.len();
    let bsz = shape[n - 1];
    let diag = logits
        .mul(logits.tape().constant(Tensor::eye(bsz)))
        .sum_axis(n - 1);
    let lse = if literal_denominator {
        let include: Vec<bool> = (0..logits.value().numel())
            .map(|i| (i / bsz) % bsz != i % bsz)
            .collect();
        logits.logsumexp(Some(&include))
    } else {
        logits.logsumexp(None)
    };
    let mut out_shape = shape[..n - 1].to_vec();
    out_shape[n - 2] = bsz;
    diag.sub(lse).reshape(&out_shape)
}

fn normalized<'t>(x: Var<'t>, cfg: &MatchingConfig) -> Var<'t> {
    if cfg.normalize {
        x.l2_normalize(1e-12)
    } else {
        x
    }
}

/// `log Z(x_i, y_i)` for every sample, as a `[B]` vector.
pub fn contrastive_log_z<'t>(
    x: Var<'t>,
    y: Var<'t>,
    cfg: &MatchingConfig,
    inv_tau: Var<'t>,
) -> Result<Var<'t>> {
    let (sx, sy) = (x.shape(), y.shape());
    if sx.len() != 2 || sx != sy {
        return Err(MalmError::Shape(format!("contrastive_Z: {sx:?} vs {sy:?}")));
    }
    if sx[0] < 2 {
        return Err(MalmError::Invalid(format!(
            "contrastive_Z needs at least 2 samples, got {}",
            sx[0]
        )));
    }
    let (x, y) = (normalized(x, cfg), normalized(y, cfg));
    let logits = x.matmul(y.transpose_last()).mul(inv_tau);
    Ok(log_z_rows(logits, cfg.literal_denominator))
}

fn reduce<'t>(per_sample: Var<'t>, reduction: BatchReduction) -> Var<'t> {
    match reduction {
        BatchReduction::Mean => per_sample.mean(),
        BatchReduction::Sum => per_sample.sum(),
    }
}

/// Symmetric per-sample objective from both directions' `log Z`.
fn symmetric<'t>(lz_a: Var<'t>, lz_b: Var<'t>, cfg: &MatchingConfig) -> Var<'t> {
    if cfg.literal_sum_loss {
        lz_a.exp().add(lz_b.exp()).scale(0.5)
    } else {
        lz_a.add(lz_b).scale(-0.5)
    }
}

/// Global contrastive loss between `[B, D]` image and recipe vectors.
pub fn loss_gc<'t>(
    i_g: Var<'t>,
    r_g: Var<'t>,
    cfg: &MatchingConfig,
    inv_tau: Var<'t>,
) -> Result<Var<'t>> {
    let a = contrastive_log_z(i_g, r_g, cfg, inv_tau)?;
    let b = contrastive_log_z(r_g, i_g, cfg, inv_tau)?;
    Ok(reduce(symmetric(a, b, cfg), cfg.reduction))
}

/// Local contrastive loss: at every position `p`, sample `i`'s image feature
/// is contrasted with the position-`p` local recipe features of the batch.
/// Averaged over positions, then reduced over the batch.
pub fn loss_lc<'t>(
    i_att: Var<'t>,
    r_l: Var<'t>,
    cfg: &MatchingConfig,
    inv_tau: Var<'t>,
) -> Result<Var<'t>> {
    let (si, sr) = (i_att.shape(), r_l.shape());
    if si.len() != 3 || si != sr {
        return Err(MalmError::Shape(format!("loss_LC: {si:?} vs {sr:?}")));
    }
    if si[0] < 2 {
        return Err(MalmError::Invalid(format!(
            "loss_LC needs at least 2 samples, got {}",
            si[0]
        )));
    }
    let (x, y) = if cfg.include_cls_in_local {
        (i_att, r_l)
    } else {
        let keep: Vec<Vec<usize>> = vec![(1..si[1]).collect(); si[0]];
        (i_att.gather(&keep), r_l.gather(&keep))
    };
    // [N, B, D]
    let x = normalized(x, cfg).permute(&[1, 0, 2]);
    let y = normalized(y, cfg).permute(&[1, 0, 2]);
    let logits = x.matmul(y.transpose_last()).mul(inv_tau);
    let a = log_z_rows(logits, cfg.literal_denominator);
    let b = log_z_rows(logits.transpose_last(), cfg.literal_denominator);
    // [N, B] → mean over positions → [B]
    let per_sample = symmetric(a, b, cfg).mean_axis(0);
    let bsz = si[0];
    Ok(reduce(per_sample.reshape(&[bsz]), cfg.reduction))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::nn::ParamStore;

    fn cfg_literal() -> MatchingConfig {
        MatchingConfig {
            heads: 1,
            ..MatchingConfig::default()
        }
    }

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec())
    }

    fn store_with(d: usize, wq: Tensor, wk: Tensor, wv: Tensor) -> ParamStore {
        let mut s = ParamStore::new();
        for side in ["img", "rec"] {
            s.insert(format!("match.0.{side}.wq"), wq.clone());
            s.insert(format!("match.0.{side}.wk"), wk.clone());
            s.insert(format!("match.0.{side}.wv"), wv.clone());
        }
        s.insert(LOGIT_SCALE, Tensor::new(vec![1], vec![0.0]));
        let _ = d;
        s
    }

    #[test]
    fn equal_logits_give_unit_z() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.constant(t(&[2, 2], &[0.5, 0.5, 0.5, 0.5]));
        let cfg = MatchingConfig {
            normalize: false,
            ..cfg_literal()
        };
        let lz = contrastive_log_z(x, y, &cfg, tape.scalar(1.0))
            .unwrap()
            .value();
        assert!(lz.data()[0].abs() < 1e-15);
    }

    #[test]
    fn analytic_z_is_e() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let cfg = MatchingConfig {
            normalize: false,
            ..cfg_literal()
        };
        let lz = contrastive_log_z(x, x, &cfg, tape.scalar(1.0))
            .unwrap()
            .value();
        assert!((lz.data()[0].exp() - std::f64::consts::E).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_global_loss() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let l = loss_gc(x, x, &cfg_literal(), tape.scalar(1.0)).unwrap();
        assert!((l.item() + 1.0).abs() < 1e-9);
        let standard = MatchingConfig {
            literal_denominator: false,
            ..cfg_literal()
        };
        let l = loss_gc(x, x, &standard, tape.scalar(1.0)).unwrap();
        let want = -(1.0 - (1.0f64.exp() + 1.0).ln());
        assert!((l.item() - want).abs() < 1e-9);
    }

    #[test]
    fn batch_size_one_rejected() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 3]));
        assert!(loss_gc(x, x, &cfg_literal(), tape.scalar(1.0)).is_err());
        let y = tape.constant(Tensor::ones(&[1, 2, 3]));
        assert!(loss_lc(y, y, &cfg_literal(), tape.scalar(1.0)).is_err());
    }

    #[test]
    fn zero_query_key_weights_give_uniform_attention() {
        let d = 3;
        let store = store_with(
            d,
            Tensor::zeros(&[d, d]),
            Tensor::zeros(&[d, d]),
            Tensor::eye(d),
        );
        let tape = Tape::new();
        let b = Binder::trainable(&tape, &store);
        let img = tape.constant(Tensor::from_fn(&[2, 4, d], |i| (i as f64).sin()));
        let rec = tape.constant(Tensor::from_fn(&[2, 5, d], |i| (i as f64).cos()));
        let (_, a_i) = cross_attend_image(&b, 0, img, rec, 1, None).unwrap();
        assert!(a_i.value().data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
        let (_, a_r) = cross_attend_recipe(&b, 0, rec, img, 1).unwrap();
        assert!(a_r.value().data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn single_recipe_token_copies_its_value() {
        let d = 2;
        let store = store_with(d, Tensor::eye(d), Tensor::eye(d), Tensor::eye(d));
        let tape = Tape::new();
        let b = Binder::trainable(&tape, &store);
        let img = tape.constant(Tensor::from_fn(&[1, 3, d], |i| i as f64));
        let rec = tape.constant(t(&[1, 1, 2], &[7.0, -3.0]));
        let (i_att, a_i) = cross_attend_image(&b, 0, img, rec, 1, None).unwrap();
        assert!(a_i.value().data().iter().all(|&v| v == 1.0));
        for p in 0..3 {
            assert_eq!(i_att.value().at(&[0, p, 0]), 7.0);
            assert_eq!(i_att.value().at(&[0, p, 1]), -3.0);
        }
    }

    #[test]
    fn hand_set_attention_matches_dense_math() {
        // B=1, one image query, two recipe tokens, identity maps
        let d = 2;
        let store = store_with(d, Tensor::eye(d), Tensor::eye(d), Tensor::eye(d));
        let tape = Tape::new();
        let b = Binder::trainable(&tape, &store);
        let q = [1.0, 2.0];
        let k = [[0.5, -1.0], [1.5, 0.25]];
        let img = tape.constant(t(&[1, 1, 2], &q));
        let rec = tape.constant(t(&[1, 2, 2], &[0.5, -1.0, 1.5, 0.25]));
        let (i_att, a_i) = cross_attend_image(&b, 0, img, rec, 1, None).unwrap();
        let s: Vec<f64> = k
            .iter()
            .map(|kr| (q[0] * kr[0] + q[1] * kr[1]) / 2f64.sqrt())
            .collect();
        let z = s[0].exp() + s[1].exp();
        let a = [s[0].exp() / z, s[1].exp() / z];
        assert!((a_i.value().data()[0] - a[0]).abs() < 1e-12);
        assert!((a_i.value().data()[1] - a[1]).abs() < 1e-12);
        for c in 0..2 {
            let want = a[0] * k[0][c] + a[1] * k[1][c];
            assert!((i_att.value().at(&[0, 0, c]) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn global_features_pick_cls_and_mean() {
        let tape = Tape::new();
        let i_att = tape.constant(Tensor::from_fn(&[2, 3, 2], |i| i as f64));
        let r_att = tape.constant(Tensor::from_fn(&[2, 3, 2], |i| (i % 2) as f64 + 1.0));
        let out = MatchOutputs {
            i_att,
            r_att,
            a_i: i_att,
            a_r: r_att,
        };
        let (ig, rg) = global_features(&out, None);
        assert_eq!(ig.value().data(), &[0.0, 1.0, 6.0, 7.0]);
        assert_eq!(rg.value().data(), &[1.0, 2.0, 1.0, 2.0]);
        let (_, rg) = global_features(&out, Some(&[vec![true, false, false], vec![true; 3]]));
        assert_eq!(rg.value().data(), &[1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn one_hot_attention_selects_scaled_row() {
        let tape = Tape::new();
        let a = tape.constant(t(&[1, 1, 3], &[0.0, 1.0, 0.0]));
        let r = tape.constant(Tensor::from_fn(&[1, 3, 2], |i| i as f64));
        let rl = local_recipe_features(a, r, None).unwrap().value();
        assert_eq!(rl.data(), &[2.0 / 3.0, 3.0 / 3.0]);
    }

    #[test]
    fn local_equals_global_on_single_position() {
        let tape = Tape::new();
        let g = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let x = tape.constant(g.clone());
        let gc = loss_gc(x, x, &cfg_literal(), tape.scalar(1.0))
            .unwrap()
            .item();
        let seq = tape.constant(g.reshape(&[2, 1, 2]));
        let lc = loss_lc(seq, seq, &cfg_literal(), tape.scalar(1.0))
            .unwrap()
            .item();
        assert!((gc - lc).abs() < 1e-12);
        assert!((lc + 1.0).abs() < 1e-9);
    }

    #[test]
    fn clamp_keeps_tau_in_bounds() {
        assert_eq!(clamp_logit_scale(10.0), 100f64.ln());
        assert_eq!(clamp_logit_scale(-1.0), 0.0);
        let s = (1.0f64 / 0.07).ln();
        assert_eq!(clamp_logit_scale(s), s);
    }
}
