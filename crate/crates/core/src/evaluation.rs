//! Retrieval metrics under the bagged protocol, the ablation harness, and the
//! attention-localization diagnostic for synthetic data.

use std::fmt;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::MalmConfig;
use crate::data::{Dataset, ImageTensor, RecipeDoc};
use crate::error::{invalid, MalmError, Result};
use crate::model::Malm;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ImageToRecipe,
    RecipeToImage,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ImageToRecipe => "image→recipe",
            Self::RecipeToImage => "recipe→image",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BagScore {
    #[serde(rename = "medR")]
    pub medr: f64,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub bag_size: usize,
    pub n_bags: usize,
    #[serde(rename = "medR")]
    pub medr: f64,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub per_bag: Vec<BagScore>,
}

impl RetrievalReport {
    /// Range and ordering checks every report must satisfy.
    pub fn check_invariants(&self) -> Result<()> {
        for s in self.per_bag.iter().chain(std::iter::once(&self.summary())) {
            let ok = (0.0..=100.0).contains(&s.r1)
                && s.r1 <= s.r5
                && s.r5 <= s.r10
                && s.r10 <= 100.0
                && s.medr >= 1.0;
            if !ok {
                return invalid(format!("retrieval report violates invariants: {s:?}"));
            }
        }
        Ok(())
    }

    pub fn summary(&self) -> BagScore {
        BagScore {
            medr: self.medr,
            r1: self.r1,
            r5: self.r5,
            r10: self.r10,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

impl fmt::Display for RetrievalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{}  ({} bags of {})",
            self.direction, self.n_bags, self.bag_size
        )?;
        writeln!(
            f,
            "{:>6} {:>7} {:>7} {:>7} {:>7}",
            "bag", "medR", "R@1", "R@5", "R@10"
        )?;
        for (i, b) in self.per_bag.iter().enumerate() {
            writeln!(
                f,
                "{:>6} {:>7.1} {:>7.1} {:>7.1} {:>7.1}",
                i, b.medr, b.r1, b.r5, b.r10
            )?;
        }
        write!(
            f,
            "{:>6} {:>7.1} {:>7.1} {:>7.1} {:>7.1}",
            "mean", self.medr, self.r1, self.r5, self.r10
        )
    }
}

/// 1-based rank of the true item for every query of a square similarity
/// matrix (`sim[q][c]`, true item on the diagonal). Ties count against the
/// true item.
pub fn true_ranks(sim: &Tensor) -> Vec<usize> {
    let n = sim.shape()[0];
    (0..n)
        .map(|q| {
            let row = sim.row(q);
            let t = row[q];
            1 + (0..n).filter(|&c| c != q && row[c] >= t).count()
        })
        .collect()
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// medR and R@{1,5,10} from true-item ranks.
pub fn score_ranks(ranks: &[usize]) -> BagScore {
    let n = ranks.len() as f64;
    let at = |k: usize| 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    let mut r: Vec<f64> = ranks.iter().map(|&r| r as f64).collect();
    BagScore {
        medr: median(&mut r),
        r1: at(1),
        r5: at(5),
        r10: at(10),
    }
}

fn dot_rows(a: &Tensor, ia: &[usize], b: &Tensor, ib: &[usize]) -> Tensor {
    let d = a.shape()[1];
    Tensor::from_fn(&[ia.len(), ib.len()], |k| {
        let (i, j) = (k / ib.len(), k % ib.len());
        let (x, y) = (a.row(ia[i]), b.row(ib[j]));
        (0..d).map(|c| x[c] * y[c]).sum()
    })
}

/// Bags of `bag_size` items drawn without replacement, independently per
/// bag; a bag covering the whole corpus keeps corpus order.
pub fn sample_bags(n: usize, bag_size: usize, n_bags: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_bags)
        .map(|_| {
            if bag_size == n {
                (0..n).collect()
            } else {
                let mut bag = index::sample(&mut rng, n, bag_size).into_vec();
                bag.sort_unstable();
                bag
            }
        })
        .collect()
}

/// Scores paired embeddings (row `i` of each matrix is a true pair) under
/// the bagged protocol. Embeddings are compared by dot product, which is the
/// cosine similarity for unit rows.
pub fn rank_and_score(
    image_emb: &Tensor,
    recipe_emb: &Tensor,
    direction: Direction,
    bag_size: usize,
    n_bags: usize,
    seed: u64,
) -> Result<RetrievalReport> {
    let n = image_emb.shape()[0];
    if image_emb.shape() != recipe_emb.shape() || image_emb.ndim() != 2 {
        return Err(MalmError::Shape(format!(
            "embeddings {:?} vs {:?}",
            image_emb.shape(),
            recipe_emb.shape()
        )));
    }
    if bag_size < 2 {
        return invalid(format!("bag_size {bag_size} < 2"));
    }
    if bag_size > n {
        return invalid(format!("bag_size {bag_size} exceeds corpus of {n}"));
    }
    if n_bags == 0 {
        return invalid("n_bags must be at least 1");
    }
    let (q, c) = match direction {
        Direction::ImageToRecipe => (image_emb, recipe_emb),
        Direction::RecipeToImage => (recipe_emb, image_emb),
    };
    let per_bag: Vec<BagScore> = sample_bags(n, bag_size, n_bags, seed)
        .iter()
        .map(|bag| score_ranks(&true_ranks(&dot_rows(q, bag, c, bag))))
        .collect();
    let mean = |f: fn(&BagScore) -> f64| per_bag.iter().map(f).sum::<f64>() / n_bags as f64;
    let report = RetrievalReport {
        direction,
        bag_size,
        n_bags,
        medr: mean(|b| b.medr),
        r1: mean(|b| b.r1),
        r5: mean(|b| b.r5),
        r10: mean(|b| b.r10),
        per_bag,
    };
    report.check_invariants()?;
    Ok(report)
}

/// Unit-normalized image and recipe embeddings of every pair, unmasked.
pub fn embed_corpus(model: &Malm, data: &Dataset) -> Result<(Tensor, Tensor)> {
    if data.vocab.len() != model.vocab.len() {
        return invalid(format!(
            "corpus vocabulary of {} does not match checkpoint vocabulary of {}",
            data.vocab.len(),
            model.vocab.len()
        ));
    }
    let images: Vec<&ImageTensor> = data.pairs.iter().map(|p| &p.image).collect();
    let docs: Vec<&RecipeDoc> = data.pairs.iter().map(|p| &p.recipe).collect();
    Ok((model.embed_images(&images)?, model.embed_recipes(&docs)?))
}

/// Embeds `data` and scores it with the configured bag protocol.
pub fn evaluate(model: &Malm, data: &Dataset, direction: Direction) -> Result<RetrievalReport> {
    let (img, rec) = embed_corpus(model, data)?;
    let cfg = &model.cfg.eval;
    let bag = cfg.bag_size.min(data.len());
    rank_and_score(&img, &rec, direction, bag, cfg.n_bags, model.cfg.seed)
}

/// Top-`k` corpus items for a query embedding, by cosine similarity.
pub fn top_k(query: &[f64], corpus: &Tensor, k: usize) -> Vec<(usize, f64)> {
    let mut scored: Vec<(usize, f64)> = (0..corpus.shape()[0])
        .map(|i| (i, corpus.row(i).iter().zip(query).map(|(a, b)| a * b).sum()))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

/// A named set of config overrides on top of a shared base.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub overrides: Vec<(String, String)>,
}

impl Variant {
    pub fn new(name: &str, overrides: &[(&str, &str)]) -> Self {
        Self {
            name: name.into(),
            overrides: overrides
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    pub fn apply(&self, base: &MalmConfig, seed: u64) -> Result<MalmConfig> {
        let mut cfg = base.clone();
        for (k, v) in &self.overrides {
            cfg.set(k, v)?;
        }
        cfg.seed = seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Loss-component rows: the triplet baseline, then local matching, global
/// matching, and masked distillation added one at a time, then recipe
/// masking on top. Rows without distillation train on unmasked images.
pub fn component_variants() -> Vec<Variant> {
    let off = [("lambda_dist", "0"), ("mask_ratio", "0")];
    vec![
        Variant::new(
            "Baseline",
            &[
                off[0],
                off[1],
                ("global_loss", "false"),
                ("local_loss", "false"),
            ],
        ),
        Variant::new("+L_LC", &[off[0], off[1], ("global_loss", "false")]),
        Variant::new("+L_LC+L_GC", &off),
        Variant::new("+L_LC+L_GC+L_dist", &[]),
        Variant::new("masking both modalities", &[("mask_recipe", "true")]),
    ]
}

/// Mask-ratio rows of the full model.
pub fn mask_ratio_variants() -> Vec<Variant> {
    ["0.9", "0.75", "0.5", "0.25"]
        .iter()
        .map(|r| Variant::new(&format!("mask ratio {r}"), &[("mask_ratio", r)]))
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub seeds: Vec<u64>,
    /// Image→recipe R@1 per seed; `None` where the run failed.
    pub r1: Vec<Option<f64>>,
    pub medr: Vec<Option<f64>>,
    pub errors: Vec<String>,
}

impl AblationRow {
    fn ok(v: &[Option<f64>]) -> Vec<f64> {
        v.iter().flatten().copied().collect()
    }

    pub fn mean_std_r1(&self) -> (f64, f64) {
        mean_std(&Self::ok(&self.r1))
    }

    pub fn mean_std_medr(&self) -> (f64, f64) {
        mean_std(&Self::ok(&self.medr))
    }
}

/// Mean and sample standard deviation; NaN for an empty slice.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() == 1 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<28} {:>16} {:>16} {:>6}",
            "variant", "medR", "R@1", "runs"
        )?;
        for r in &self.rows {
            let (m, s) = r.mean_std_medr();
            let (m1, s1) = r.mean_std_r1();
            writeln!(
                f,
                "{:<28} {:>7.2} ± {:<6.2} {:>7.2} ± {:<6.2} {:>3}/{}",
                r.name,
                m,
                s,
                m1,
                s1,
                AblationRow::ok(&r.r1).len(),
                r.seeds.len()
            )?;
            for e in &r.errors {
                writeln!(f, "    failed: {e}")?;
            }
        }
        Ok(())
    }
}

/// Runs every variant for every seed through `run`, which trains and
/// evaluates one configuration. A failed run is recorded and the table
/// continues.
pub fn run_ablation(
    base: &MalmConfig,
    variants: &[Variant],
    seeds: &[u64],
    run: &mut dyn FnMut(&MalmConfig) -> Result<RetrievalReport>,
) -> AblationTable {
    let rows = variants
        .iter()
        .map(|v| {
            let mut row = AblationRow {
                name: v.name.clone(),
                seeds: seeds.to_vec(),
                r1: Vec::new(),
                medr: Vec::new(),
                errors: Vec::new(),
            };
            for &seed in seeds {
                match v.apply(base, seed).and_then(|cfg| run(&cfg)) {
                    Ok(rep) => {
                        row.r1.push(Some(rep.r1));
                        row.medr.push(Some(rep.medr));
                    }
                    Err(e) => {
                        log::warn!("variant `{}` seed {seed} failed: {e}", v.name);
                        row.r1.push(None);
                        row.medr.push(None);
                        row.errors.push(format!("seed {seed}: {e}"));
                    }
                }
            }
            row
        })
        .collect();
    AblationTable { rows }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub score: f64,
    /// Score of uniform attention over valid recipe tokens.
    pub chance: f64,
    pub null_mean: f64,
    pub null_std: f64,
    pub null_p95: f64,
    /// Fraction of null scores at or above the observed score.
    pub p_value: f64,
    pub n_patches: usize,
    pub n_permutations: usize,
}

impl LocalizationReport {
    pub fn exceeds_null(&self) -> bool {
        self.score > self.null_p95
    }
}

/// Attention mass each painted patch puts on its ground-truth ingredient
/// tokens, averaged over patches. `a_i[b]` is `[1+P, S]`; `tokens[b]` are
/// the token ids of sample `b`'s padded sequence.
pub fn localization_score(
    a_i: &Tensor,
    tokens: &[Vec<usize>],
    groundtruth: &[Vec<(usize, usize)>],
    class_tokens: &[u32],
) -> f64 {
    let (n, s) = (a_i.shape()[1], a_i.shape()[2]);
    let mut total = 0.0;
    let mut count = 0usize;
    for (b, gt) in groundtruth.iter().enumerate() {
        for &(patch, class) in gt {
            let row = &a_i.data()[(b * n + 1 + patch) * s..(b * n + 2 + patch) * s];
            let want = class_tokens[class] as usize;
            total += (0..s)
                .filter(|&j| tokens[b][j] == want)
                .map(|j| row[j])
                .sum::<f64>();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Localization score of `model` on synthetic pairs, with a null built by
/// permuting the class labels among each image's painted patches.
pub fn attention_localization(
    model: &Malm,
    data: &Dataset,
    n_permutations: usize,
    seed: u64,
) -> Result<LocalizationReport> {
    let class_tokens = data
        .class_tokens
        .as_ref()
        .ok_or_else(|| MalmError::Invalid("localization needs synthetic data".into()))?;
    let mut gts: Vec<Vec<(usize, usize)>> = Vec::with_capacity(data.len());
    for p in &data.pairs {
        let gt = p
            .groundtruth
            .as_ref()
            .ok_or_else(|| MalmError::Invalid("localization needs ground-truth maps".into()))?;
        gts.push(gt.iter().map(|(&a, &b)| (a, b)).collect());
    }

    let mut a_all: Vec<f64> = Vec::new();
    let mut tokens: Vec<Vec<usize>> = Vec::new();
    let mut valid: Vec<Vec<bool>> = Vec::new();
    let mut dims = (0, 0);
    for chunk in (0..data.len()).collect::<Vec<_>>().chunks(32) {
        let images: Vec<&ImageTensor> = chunk.iter().map(|&i| &data.pairs[i].image).collect();
        let docs: Vec<&RecipeDoc> = chunk.iter().map(|&i| &data.pairs[i].recipe).collect();
        let (a, batch) = model.image_attention(&images, &docs)?;
        crate::training::check_distribution_rows("A_I", &a)?;
        dims = (a.shape()[1], a.shape()[2]);
        a_all.extend_from_slice(a.data());
        tokens.extend(batch.token_ids());
        valid.extend(batch.valid());
    }
    let a_i = Tensor::new(vec![data.len(), dims.0, dims.1], a_all);
    let score = localization_score(&a_i, &tokens, &gts, class_tokens);

    let mut chance_total = 0.0;
    let mut n_patches = 0;
    for (b, gt) in gts.iter().enumerate() {
        let nv = valid[b].iter().filter(|&&v| v).count() as f64;
        for &(_, class) in gt {
            let want = class_tokens[class] as usize;
            let hits = (0..tokens[b].len())
                .filter(|&j| valid[b][j] && tokens[b][j] == want)
                .count() as f64;
            chance_total += hits / nv;
            n_patches += 1;
        }
    }
    let chance = chance_total / n_patches.max(1) as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut null: Vec<f64> = (0..n_permutations)
        .map(|_| {
            let permuted: Vec<Vec<(usize, usize)>> = gts
                .iter()
                .map(|gt| {
                    let mut classes: Vec<usize> = gt.iter().map(|&(_, c)| c).collect();
                    classes.shuffle(&mut rng);
                    gt.iter().zip(classes).map(|(&(p, _), c)| (p, c)).collect()
                })
                .collect();
            localization_score(&a_i, &tokens, &permuted, class_tokens)
        })
        .collect();
    let (null_mean, null_std) = mean_std(&null);
    null.sort_by(|a, b| a.total_cmp(b));
    let null_p95 = if null.is_empty() {
        f64::NAN
    } else {
        null[((0.95 * null.len() as f64).ceil() as usize).clamp(1, null.len()) - 1]
    };
    let p_value =
        (1 + null.iter().filter(|&&v| v >= score).count()) as f64 / (1 + null.len()) as f64;
    Ok(LocalizationReport {
        score,
        chance,
        null_mean,
        null_std,
        null_p95,
        p_value,
        n_patches,
        n_permutations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_rows(n: usize, d: usize, f: impl Fn(usize) -> f64) -> Tensor {
        let mut t = Tensor::from_fn(&[n, d], f);
        for i in 0..n {
            let norm = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            for c in 0..d {
                let v = t.at(&[i, c]) / norm;
                t.set(&[i, c], v);
            }
        }
        t
    }

    #[test]
    fn identity_structure_is_perfect() {
        let e = Tensor::eye(8);
        let r = rank_and_score(&e, &e, Direction::ImageToRecipe, 8, 3, 0).unwrap();
        assert_eq!((r.medr, r.r1, r.r10), (1.0, 100.0, 100.0));
    }

    #[test]
    fn anti_identity_puts_truth_last() {
        let sim = Tensor::eye(4).map(|v| -v);
        assert_eq!(true_ranks(&sim), vec![4; 4]);
        let s = score_ranks(&true_ranks(&sim));
        assert_eq!((s.medr, s.r1), (4.0, 0.0));
    }

    #[test]
    fn ties_are_pessimistic() {
        let sim = Tensor::ones(&[3, 3]);
        assert_eq!(true_ranks(&sim), vec![3, 3, 3]);
    }

    #[test]
    fn bag_checks() {
        let e = Tensor::eye(4);
        assert!(rank_and_score(&e, &e, Direction::ImageToRecipe, 1, 1, 0).is_err());
        assert!(rank_and_score(&e, &e, Direction::ImageToRecipe, 5, 1, 0).is_err());
        let a = sample_bags(50, 10, 4, 3);
        assert_eq!(a, sample_bags(50, 10, 4, 3));
        for bag in &a {
            let mut b = bag.clone();
            b.dedup();
            assert_eq!(b.len(), 10);
        }
    }

    #[test]
    fn symmetric_similarity_gives_symmetric_reports() {
        let e = unit_rows(12, 4, |i| ((i * 7) % 5) as f64 + 0.1);
        let a = rank_and_score(&e, &e, Direction::ImageToRecipe, 6, 4, 9).unwrap();
        let b = rank_and_score(&e, &e, Direction::RecipeToImage, 6, 4, 9).unwrap();
        assert_eq!(a.per_bag, b.per_bag);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn report_json_has_contract_fields() {
        let e = Tensor::eye(4);
        let r = rank_and_score(&e, &e, Direction::RecipeToImage, 4, 1, 0).unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        for k in [
            "direction",
            "bag_size",
            "n_bags",
            "medR",
            "r1",
            "r5",
            "r10",
            "per_bag",
        ] {
            assert!(v.get(k).is_some(), "{k}");
        }
        assert!(r.to_string().contains("recipe→image"));
    }

    #[test]
    fn one_hot_attention_scores_one() {
        // one sample, P = 2, S = 3; patch 1 holds class 0 whose token is id 7
        let mut a = Tensor::zeros(&[1, 3, 3]);
        a.set(&[0, 2, 1], 1.0);
        let tokens = vec![vec![5, 7, 9]];
        let s = localization_score(&a, &tokens, &[vec![(1, 0)]], &[7]);
        assert_eq!(s, 1.0);
    }

    #[test]
    fn top_k_orders_and_truncates() {
        let c = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 0.6, 0.8]);
        let t = top_k(&[0.0, 1.0], &c, 2);
        assert_eq!(t.iter().map(|x| x.0).collect::<Vec<_>>(), vec![1, 2]);
        assert!(top_k(&[0.0, 1.0], &c, 0).is_empty());
        assert_eq!(top_k(&[0.0, 1.0], &c, 10).len(), 3);
    }

    #[test]
    fn ablation_records_failures_and_continues() {
        let base = MalmConfig::desk_synthetic();
        let vs = vec![
            Variant::new("ok", &[]),
            Variant::new("bad", &[("mask_ratio", "1.5")]),
        ];
        let mut run = |_: &MalmConfig| {
            let e = Tensor::eye(4);
            rank_and_score(&e, &e, Direction::ImageToRecipe, 4, 1, 0)
        };
        let t = run_ablation(&base, &vs, &[1, 2], &mut run);
        assert_eq!(t.rows[0].mean_std_r1(), (100.0, 0.0));
        assert_eq!(t.rows[1].errors.len(), 2);
        assert!(t.to_string().contains("failed"));
    }
}
