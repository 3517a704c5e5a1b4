//! Random patch masking and mask-token re-insertion.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::error::{invalid, MalmError, Result};
use crate::tensor::Tensor;

pub const MASK_TOKEN: &str = "mask_token";
pub const MASK_POS: &str = "mask_pos";

/// Per-sample masked positions. Positions index the full token sequence:
/// 0 is CLS (never masked), `1..=P` are patches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSpec {
    indices: Vec<Vec<usize>>,
    patches: usize,
}

/// Number of masked patches for a ratio: `floor(ratio · P)`.
pub fn mask_count(patches: usize, ratio: f64) -> usize {
    // the epsilon absorbs representation error such as 0.29 * 100 = 28.999…
    ((ratio * patches as f64) + 1e-9).floor() as usize
}

impl MaskSpec {
    pub fn new(indices: Vec<Vec<usize>>, patches: usize) -> Result<Self> {
        let mut indices = indices;
        let n = indices.first().map_or(0, Vec::len);
        for row in &mut indices {
            row.sort_unstable();
            row.dedup();
            if row.len() != n {
                return invalid("every sample must mask the same number of patches");
            }
            if row.first() == Some(&0) {
                return invalid("the CLS position cannot be masked");
            }
            if let Some(&p) = row.iter().find(|&&p| p > patches) {
                return invalid(format!("mask position {p} outside 1..={patches}"));
            }
        }
        if n >= patches && patches > 0 {
            return invalid("at least one patch must stay visible");
        }
        Ok(Self { indices, patches })
    }

    pub fn empty(batch: usize, patches: usize) -> Self {
        Self {
            indices: vec![Vec::new(); batch],
            patches,
        }
    }

    pub fn batch(&self) -> usize {
        self.indices.len()
    }

    pub fn patches(&self) -> usize {
        self.patches
    }

    /// `|M|`, identical for every sample.
    pub fn n_masked(&self) -> usize {
        self.indices.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.n_masked() == 0
    }

    /// Masked sequence positions per sample, sorted.
    pub fn positions(&self) -> &[Vec<usize>] {
        &self.indices
    }

    /// Visible patches per sample as 0-based patch indices.
    pub fn visible_patches(&self) -> Vec<Vec<usize>> {
        self.indices
            .iter()
            .map(|m| {
                (1..=self.patches)
                    .filter(|p| !m.contains(p))
                    .map(|p| p - 1)
                    .collect()
            })
            .collect()
    }

    /// Visible sequence positions per sample, including CLS at 0.
    pub fn visible_positions(&self) -> Vec<Vec<usize>> {
        self.indices
            .iter()
            .map(|m| (0..=self.patches).filter(|p| !m.contains(p)).collect())
            .collect()
    }
}

/// Masks `floor(ratio · P)` patches per sample, uniformly without
/// replacement and independently across samples.
pub fn sample_mask(patches: usize, ratio: f64, batch: usize, seed: u64) -> Result<MaskSpec> {
    if !(0.0..1.0).contains(&ratio) {
        return invalid(format!("mask ratio {ratio} outside [0, 1)"));
    }
    let k = mask_count(patches, ratio);
    if patches > 0 && k >= patches {
        return invalid(format!("ratio {ratio} would mask all {patches} patches"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices = (0..batch)
        .map(|_| {
            let mut row: Vec<usize> = index::sample(&mut rng, patches, k)
                .into_iter()
                .map(|p| p + 1)
                .collect();
            row.sort_unstable();
            row
        })
        .collect();
    Ok(MaskSpec { indices, patches })
}

/// Masks `floor(ratio · n)` valid tokens per sample, where `n` is the
/// smallest valid count in the batch, so every sample masks the same number.
/// Positions are 0-based and sorted.
pub fn sample_token_mask(valid: &[Vec<bool>], ratio: f64, seed: u64) -> Result<Vec<Vec<usize>>> {
    if !(0.0..1.0).contains(&ratio) {
        return invalid(format!("mask ratio {ratio} outside [0, 1)"));
    }
    let n = valid
        .iter()
        .map(|v| v.iter().filter(|&&x| x).count())
        .min()
        .unwrap_or(0);
    let k = mask_count(n, ratio);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(valid
        .iter()
        .map(|v| {
            let pos: Vec<usize> = (0..v.len()).filter(|&j| v[j]).collect();
            let mut row: Vec<usize> = index::sample(&mut rng, pos.len(), k)
                .into_iter()
                .map(|i| pos[i])
                .collect();
            row.sort_unstable();
            row
        })
        .collect())
}

/// Rebuilds the full `[B, 1+P, D]` sequence from the student's visible
/// features `[B, 1+P-|M|, D]`: visible rows keep their order, masked rows
/// become `mask_token + positional[p]`.
pub fn assemble_masked_sequence<'t>(
    visible: Var<'t>,
    mask: &MaskSpec,
    mask_token: Var<'t>,
    positional: Option<Var<'t>>,
) -> Result<Var<'t>> {
    let s = visible.shape();
    let p = mask.patches();
    if s.len() != 3 || s[0] != mask.batch() || s[1] != 1 + p - mask.n_masked() {
        return Err(MalmError::Shape(format!(
            "visible features {s:?} do not match a mask of {} over {p} patches",
            mask.n_masked()
        )));
    }
    if mask.is_empty() {
        return Ok(visible);
    }
    let (bsz, nv, d) = (s[0], s[1], s[2]);
    if mask_token.shape() != [d] {
        return Err(MalmError::Shape(format!(
            "mask token {:?} does not match feature dim {d}",
            mask_token.shape()
        )));
    }
    let mut filler = mask_token.add(visible.tape().constant(Tensor::zeros(&[bsz, 1 + p, d])));
    if let Some(pos) = positional {
        filler = filler.add(pos);
    }
    let both = Var::concat(&[visible, filler], 1);
    let index: Vec<Vec<usize>> = mask
        .positions()
        .iter()
        .map(|m| {
            let mut next_visible = 0;
            (0..=p)
                .map(|pos| {
                    if m.binary_search(&pos).is_ok() {
                        nv + pos
                    } else {
                        next_visible += 1;
                        next_visible - 1
                    }
                })
                .collect()
        })
        .collect();
    Ok(both.gather(&index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;

    #[test]
    fn mask_sizes_use_floor() {
        assert_eq!(sample_mask(16, 0.75, 3, 0).unwrap().n_masked(), 12);
        assert_eq!(sample_mask(16, 0.9, 1, 0).unwrap().n_masked(), 14);
        assert_eq!(sample_mask(16, 0.0, 2, 0).unwrap().n_masked(), 0);
        assert_eq!(mask_count(100, 0.29), 29);
    }

    #[test]
    fn ratio_one_is_rejected() {
        assert!(sample_mask(16, 1.0, 1, 0).is_err());
        assert!(sample_mask(16, -0.1, 1, 0).is_err());
    }

    #[test]
    fn cls_never_masked_and_seeded() {
        let a = sample_mask(16, 0.5, 8, 42).unwrap();
        assert!(a
            .positions()
            .iter()
            .flatten()
            .all(|&p| (1..=16).contains(&p)));
        assert_eq!(a, sample_mask(16, 0.5, 8, 42).unwrap());
        assert_ne!(a, sample_mask(16, 0.5, 8, 43).unwrap());
        // per-sample masks differ
        assert!(a.positions().windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn index_bookkeeping_p4() {
        let tape = Tape::new();
        let mask = MaskSpec::new(vec![vec![2, 4]], 4).unwrap();
        let vis = tape.constant(Tensor::from_fn(&[1, 3, 2], |i| 10.0 + i as f64));
        let m = tape.constant(Tensor::new(vec![2], vec![-1.0, -2.0]));
        let pos = tape.constant(Tensor::from_fn(&[5, 2], |i| 0.1 * i as f64));
        let out = assemble_masked_sequence(vis, &mask, m, Some(pos))
            .unwrap()
            .value();
        assert_eq!(out.shape(), &[1, 5, 2]);
        let row = |r: usize| [out.at(&[0, r, 0]), out.at(&[0, r, 1])];
        assert_eq!(row(0), [10.0, 11.0]);
        assert_eq!(row(1), [12.0, 13.0]);
        assert_eq!(row(3), [14.0, 15.0]);
        assert_eq!(row(2), [-1.0 + 0.4, -2.0 + 0.5]);
        assert_eq!(row(4), [-1.0 + 0.8, -2.0 + 0.9]);
    }

    #[test]
    fn empty_mask_is_identity_and_length_checked() {
        let tape = Tape::new();
        let vis = tape.constant(Tensor::from_fn(&[2, 5, 3], |i| i as f64));
        let m = tape.constant(Tensor::zeros(&[3]));
        let out = assemble_masked_sequence(vis, &MaskSpec::empty(2, 4), m, None).unwrap();
        assert_eq!(*out.value(), *vis.value());
        let mask = MaskSpec::new(vec![vec![1], vec![2]], 4).unwrap();
        assert!(assemble_masked_sequence(vis, &mask, m, None).is_err());
    }

    #[test]
    fn zero_token_without_positions_gives_zero_rows() {
        let tape = Tape::new();
        let mask = MaskSpec::new(vec![vec![1, 2, 3]], 4).unwrap();
        let vis = tape.constant(Tensor::ones(&[1, 2, 3]));
        let m = tape.constant(Tensor::zeros(&[3]));
        let out = assemble_masked_sequence(vis, &mask, m, None)
            .unwrap()
            .value();
        for r in 1..=3 {
            assert!((0..3).all(|c| out.at(&[0, r, c]) == 0.0));
        }
    }

    #[test]
    fn token_mask_only_hits_valid_tokens() {
        let valid = vec![
            vec![true, true, false, true, true, false],
            vec![true, false, true, true, true, true],
        ];
        let m = sample_token_mask(&valid, 0.5, 3).unwrap();
        for (row, v) in m.iter().zip(&valid) {
            assert_eq!(row.len(), 2);
            assert!(row.iter().all(|&j| v[j]));
        }
        assert!(sample_token_mask(&valid, 1.0, 3).is_err());
    }

    #[test]
    fn monte_carlo_frequency() {
        let mut counts = [0usize; 4];
        let draws = 10_000;
        for s in 0..draws {
            for &p in &sample_mask(4, 0.5, 1, s as u64).unwrap().positions()[0] {
                counts[p - 1] += 1;
            }
        }
        for c in counts {
            let f = c as f64 / draws as f64;
            assert!((f - 0.5).abs() < 0.02, "frequency {f}");
        }
    }
}
