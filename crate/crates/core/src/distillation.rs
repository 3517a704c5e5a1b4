//! Masked self-distillation: a small transformer predicts teacher patch
//! features from the mask-appended student sequence, and the teacher follows
//! the student by exponential moving average.

use rand::Rng;

use crate::autograd::{Binder, Var};
use crate::config::DistillConfig;
use crate::error::{invalid, MalmError, Result};
use crate::masking::MaskSpec;
use crate::nn::{self, Init, ParamStore};

pub const RECON: &str = "recon";

/// Transformer `T` plus a linear output head, both on D-dim sequences.
#[derive(Clone, Debug)]
pub struct ReconstructionHead {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl ReconstructionHead {
    pub fn new(cfg: &DistillConfig, dim: usize, mlp_ratio: usize) -> Self {
        Self {
            dim,
            depth: cfg.recon_depth,
            heads: cfg.recon_heads,
            mlp_ratio,
        }
    }

    pub fn init<R: Rng>(&self, init: &mut Init<'_, R>) {
        for i in 0..self.depth {
            init.encoder_layer(&format!("{RECON}.blocks.{i}"), self.dim, self.mlp_ratio);
        }
        init.linear(&format!("{RECON}.head"), self.dim, self.dim);
    }

    /// `[B, N, D]` in, `[B, N, D]` out. `valid` masks padded keys.
    pub fn forward<'t>(
        &self,
        b: &Binder<'t, '_>,
        x: Var<'t>,
        valid: Option<&[Vec<bool>]>,
    ) -> Result<Var<'t>> {
        let s = x.shape();
        if s.len() != 3 || s[2] != self.dim {
            return Err(MalmError::Shape(format!(
                "reconstruction head expects [B, N, {}], got {s:?}",
                self.dim
            )));
        }
        let mut h = x;
        for i in 0..self.depth {
            h = nn::encoder_layer(b, &format!("{RECON}.blocks.{i}"), h, self.heads, valid);
        }
        Ok(nn::linear(b, &format!("{RECON}.head"), h))
    }
}

fn smooth_l1_elem(d: f64, beta: f64) -> f64 {
    let a = d.abs();
    if a < beta {
        0.5 * d * d / beta
    } else {
        a - 0.5 * beta
    }
}

/// Mean elementwise smooth L1 between two equal-length vectors.
pub fn smooth_l1(a: &[f64], b: &[f64], beta: f64) -> Result<f64> {
    if beta <= 0.0 {
        return invalid(format!("smooth_l1 beta must be > 0, got {beta}"));
    }
    if a.len() != b.len() || a.is_empty() {
        return Err(MalmError::Shape(format!(
            "smooth_l1 on lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| smooth_l1_elem(x - y, beta))
        .sum();
    Ok(s / a.len() as f64)
}

/// Average over masked positions (and the batch) of the per-position smooth
/// L1 between predictions and teacher targets. Targets never receive a
/// gradient. An empty mask yields 0.
pub fn loss_dist<'t>(
    pred: Var<'t>,
    target: Var<'t>,
    mask: &MaskSpec,
    beta: f64,
) -> Result<Var<'t>> {
    if beta <= 0.0 {
        return invalid(format!("beta must be > 0, got {beta}"));
    }
    let (sp, st) = (pred.shape(), target.shape());
    if sp.len() != 3 || sp != st || sp[0] != mask.batch() || sp[1] != 1 + mask.patches() {
        return Err(MalmError::Shape(format!(
            "loss_dist: prediction {sp:?}, target {st:?}, mask over {} patches",
            mask.patches()
        )));
    }
    if mask.is_empty() {
        log::warn!("empty mask: distillation loss is 0");
        return Ok(pred.tape().scalar(0.0));
    }
    let idx = mask.positions();
    let diff = pred.gather(idx).sub(target.detach().gather(idx));
    Ok(diff.smooth_l1(beta).mean())
}

fn check_momentum(m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return invalid(format!("EMA momentum {m} outside [0, 1]"));
    }
    Ok(())
}

fn blend(t: &mut [f64], s: &[f64], m: f64) {
    for (t, &s) in t.iter_mut().zip(s) {
        *t = m * *t + (1.0 - m) * s;
    }
}

/// `θ_t ← m·θ_t + (1−m)·θ_s` for two parameter trees with identical names
/// and shapes.
pub fn ema_update(student: &ParamStore, teacher: &mut ParamStore, momentum: f64) -> Result<()> {
    check_momentum(momentum)?;
    if student.len() != teacher.len() {
        return Err(MalmError::Invalid(format!(
            "EMA trees differ: {} vs {} parameters",
            student.len(),
            teacher.len()
        )));
    }
    for (name, s) in student.iter() {
        let t = teacher
            .get(name)
            .ok_or_else(|| MalmError::Invalid(format!("teacher lacks `{name}`")))?;
        if t.shape() != s.shape() {
            return Err(MalmError::Shape(format!(
                "`{name}`: teacher {:?} vs student {:?}",
                t.shape(),
                s.shape()
            )));
        }
    }
    for (name, t) in teacher.iter_mut() {
        let s = student.get(name).expect("checked above");
        blend(t.data_mut(), s.data(), momentum);
    }
    Ok(())
}

/// EMA between two prefixes of one store, e.g. `student.*` into `teacher.*`.
pub fn ema_update_prefix(
    store: &mut ParamStore,
    student_prefix: &str,
    teacher_prefix: &str,
    momentum: f64,
) -> Result<()> {
    check_momentum(momentum)?;
    let sp = format!("{student_prefix}.");
    let tp = format!("{teacher_prefix}.");
    let pairs: Vec<(String, String)> = store
        .names()
        .filter_map(|n| {
            n.strip_prefix(&sp)
                .map(|rest| (n.clone(), format!("{tp}{rest}")))
        })
        .collect();
    let n_teacher = store.names().filter(|n| n.starts_with(&tp)).count();
    if pairs.len() != n_teacher {
        return Err(MalmError::Invalid(format!(
            "EMA trees differ: {} student vs {n_teacher} teacher parameters",
            pairs.len()
        )));
    }
    for (s_name, t_name) in pairs {
        let s = store.get(&s_name).expect("listed").clone();
        let t = store
            .get_mut(&t_name)
            .ok_or_else(|| MalmError::Invalid(format!("teacher lacks `{t_name}`")))?;
        if t.shape() != s.shape() {
            return Err(MalmError::Shape(format!("`{t_name}` shape mismatch")));
        }
        blend(t.data_mut(), s.data(), momentum);
    }
    Ok(())
}

/// Copies every `student.*` parameter to `teacher.*`.
pub fn copy_prefix(store: &mut ParamStore, from: &str, to: &str) {
    let fp = format!("{from}.");
    let copies: Vec<(String, crate::tensor::Tensor)> = store
        .iter()
        .filter_map(|(n, t)| {
            n.strip_prefix(&fp)
                .map(|rest| (format!("{to}.{rest}"), t.clone()))
        })
        .collect();
    for (n, t) in copies {
        store.insert(n, t);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn smooth_l1_values() {
        assert_eq!(smooth_l1(&[2.0], &[0.0], 1.0).unwrap(), 1.5);
        assert_eq!(smooth_l1(&[0.5], &[0.0], 1.0).unwrap(), 0.125);
        assert_eq!(smooth_l1(&[0.3, -1.0], &[0.3, -1.0], 1.0).unwrap(), 0.0);
        assert!(smooth_l1(&[1.0], &[0.0], 0.0).is_err());
        assert!(smooth_l1(&[1.0], &[0.0, 1.0], 1.0).is_err());
    }

    #[test]
    fn smooth_l1_is_c1_at_beta() {
        let beta = 0.7;
        let h = 1e-10;
        let below = smooth_l1_elem(beta - h, beta);
        let above = smooth_l1_elem(beta + h, beta);
        assert!((below - above).abs() < 1e-9);
        // derivative: d/beta below, sign(d) above
        assert!(((beta - h) / beta - 1.0).abs() < 1e-9);
    }

    fn masked(n: usize, patches: usize, pos: Vec<Vec<usize>>) -> MaskSpec {
        let m = MaskSpec::new(pos, patches).unwrap();
        assert_eq!(m.batch(), n);
        m
    }

    #[test]
    fn two_position_average() {
        let tape = Tape::new();
        // D = 1; positions 1 and 3 masked with diffs 2 and 0.5
        let pred = tape.constant(Tensor::new(vec![1, 4, 1], vec![9.0, 2.0, 7.0, 0.5]));
        let tgt = tape.constant(Tensor::zeros(&[1, 4, 1]));
        let l = loss_dist(pred, tgt, &masked(1, 3, vec![vec![1, 3]]), 1.0).unwrap();
        assert_eq!(l.item(), 0.8125);
    }

    #[test]
    fn unmasked_positions_have_no_gradient_or_effect() {
        let tape = Tape::new();
        let pred = tape.leaf(Tensor::from_fn(&[2, 5, 3], |i| (i as f64 * 0.37).sin()));
        let tgt = tape.leaf(Tensor::from_fn(&[2, 5, 3], |i| (i as f64 * 0.11).cos()));
        let mask = masked(2, 4, vec![vec![1, 4], vec![2, 3]]);
        let l = loss_dist(pred, tgt, &mask, 1.0).unwrap();
        let g = tape.backward(l);
        assert!(g
            .get(tgt)
            .is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
        let gp = g.get(pred).unwrap();
        for (b, m) in mask.positions().iter().enumerate() {
            for p in 0..5 {
                if !m.contains(&p) {
                    assert!((0..3).all(|c| gp.at(&[b, p, c]) == 0.0));
                }
            }
        }
        let mut moved = (*pred.value()).clone();
        moved.set(&[0, 0, 0], 100.0);
        moved.set(&[1, 4, 2], -100.0);
        let l2 = loss_dist(tape.constant(moved), tgt, &mask, 1.0).unwrap();
        assert_eq!(l.item(), l2.item());
    }

    #[test]
    fn empty_mask_gives_zero() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[2, 5, 3]));
        let l = loss_dist(x, x.scale(2.0), &MaskSpec::empty(2, 4), 1.0).unwrap();
        assert_eq!(l.item(), 0.0);
    }

    fn tree(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a.w", Tensor::full(&[2, 2], v));
        s.insert("b", Tensor::full(&[3], v));
        s
    }

    #[test]
    fn ema_edge_cases() {
        let s = tree(0.0);
        let mut t = tree(1.0);
        ema_update(&s, &mut t, 0.999).unwrap();
        assert!(t.iter().all(|(_, x)| x.data().iter().all(|&v| v == 0.999)));
        let mut t = tree(1.0);
        ema_update(&s, &mut t, 1.0).unwrap();
        assert_eq!(t, tree(1.0));
        ema_update(&s, &mut t, 0.0).unwrap();
        assert_eq!(t, s);
        assert!(ema_update(&s, &mut t, 1.5).is_err());
        let mut other = tree(1.0);
        other.insert("c", Tensor::ones(&[1]));
        assert!(ema_update(&s, &mut other, 0.5).is_err());
    }

    #[test]
    fn ema_prefix_matches_tree_version() {
        let mut store = ParamStore::new();
        store.insert("student.x", Tensor::new(vec![2], vec![1.0, 2.0]));
        store.insert("teacher.x", Tensor::new(vec![2], vec![3.0, -1.0]));
        store.insert("other", Tensor::ones(&[1]));
        ema_update_prefix(&mut store, "student", "teacher", 0.25).unwrap();
        let t = store.get("teacher.x").unwrap().data();
        assert_eq!(t, &[0.25 * 3.0 + 0.75, -0.25 + 0.75 * 2.0]);
        store.insert("teacher.y", Tensor::ones(&[1]));
        assert!(ema_update_prefix(&mut store, "student", "teacher", 0.5).is_err());
    }

    #[test]
    fn identity_initialized_head_is_identity() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head = ReconstructionHead::new(
            &DistillConfig {
                recon_depth: 1,
                recon_heads: 2,
                ..DistillConfig::default()
            },
            4,
            2,
        );
        head.init(&mut Init {
            store: &mut store,
            rng: &mut rng,
        });
        for name in ["recon.blocks.0.attn.o", "recon.blocks.0.mlp.fc2"] {
            for p in ["w", "b"] {
                let t = store.get_mut(&format!("{name}.{p}")).unwrap();
                t.scale_in_place(0.0);
            }
        }
        store.insert("recon.head.w", Tensor::eye(4));
        store.insert("recon.head.b", Tensor::zeros(&[4]));
        let tape = Tape::new();
        let b = Binder::trainable(&tape, &store);
        let x = tape.constant(Tensor::from_fn(&[2, 5, 4], |i| (i as f64).sqrt()));
        let y = head.forward(&b, x, None).unwrap();
        assert_eq!(y.shape(), vec![2, 5, 4]);
        assert!(y.value().max_abs_diff(&x.value()) < 1e-15);
    }
}
