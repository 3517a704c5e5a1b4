//! Self-checks shared by the `check` command and the test suites:
//! finite-difference gradients, brute-force oracles, and the
//! distillation contracts.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Binder, Tape, Var};
use crate::config::MalmConfig;
use crate::data::{ImageTensor, Pair, PairedBatch, RecipeBatch, RecipeDoc, Vocab};
use crate::encoders::TEACHER;
use crate::error::Result;
use crate::model::{LossBundle, Malm, StepMasks};
use crate::tensor::Tensor;
use crate::training::total_loss;

/// Outcome of one named check.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    pub fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

/// Tiny model and batch: D = 8, P = 4, S = 6, B = 3.
pub struct Fixture {
    pub model: Malm,
    pub pairs: Vec<Pair>,
}

pub fn tiny_config() -> MalmConfig {
    let mut c = MalmConfig::desk_synthetic();
    c.data.image_size = 16;
    c.image.patch_size = 8;
    c.embed_dim = 8;
    c.image.hidden_dim = 8;
    c.recipe.component_hidden = 8;
    c.data.title_cap = 2;
    c.data.ingredients_cap = 2;
    c.data.instructions_cap = 2;
    c.mask.ratio = 0.5;
    c.train.batch_size = 3;
    c
}

/// Random images and token sequences; one recipe has a padded title so key
/// masking is exercised. The teacher is perturbed away from the student.
pub fn tiny_fixture(seed: u64) -> Result<Fixture> {
    let mut cfg = tiny_config();
    cfg.seed = seed;
    let words: Vec<String> = (0..10).map(|i| format!("w{i}")).collect();
    let vocab = Vocab::from_tokens(words);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = vocab.len() as u32;
    let mut pairs = Vec::new();
    for i in 0..3 {
        let mut tok = |n: usize| -> Vec<u32> { (0..n).map(|_| rng.random_range(2..v)).collect() };
        let recipe = RecipeDoc {
            id: format!("t{i}"),
            title: tok(if i == 1 { 1 } else { 2 }),
            ingredients: vec![tok(1), tok(1)],
            instructions: vec![tok(3)],
            image_ref: None,
        };
        let px = (0..16 * 16 * 3).map(|_| rng.random::<f64>()).collect();
        pairs.push(Pair {
            image: ImageTensor::new(16, 3, px)?,
            recipe,
            groundtruth: None,
        });
    }
    let mut model = Malm::new(cfg, vocab)?;
    // zero-initialized biases and an exact teacher copy are special points;
    // jitter everything so the checks exercise the generic case
    let names: Vec<String> = model.params.names().cloned().collect();
    for n in names {
        let t = model.params.get_mut(&n).expect("listed");
        let std = if n.starts_with(TEACHER) { 0.05 } else { 0.01 };
        let e = Tensor::randn(t.shape(), std, &mut rng);
        t.add_scaled(&e, 1.0);
    }
    Ok(Fixture { model, pairs })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTerm {
    Gc,
    Lc,
    Dist,
    Itc,
    Total,
}

impl LossTerm {
    pub const ALL: [LossTerm; 5] = [Self::Gc, Self::Lc, Self::Dist, Self::Itc, Self::Total];

    pub fn name(self) -> &'static str {
        match self {
            Self::Gc => "L_GC",
            Self::Lc => "L_LC",
            Self::Dist => "L_dist",
            Self::Itc => "L_itc",
            Self::Total => "L",
        }
    }

    fn pick<'t>(self, l: &LossBundle<'t>, model: &Malm) -> Result<Var<'t>> {
        Ok(match self {
            Self::Gc => l.gc,
            Self::Lc => l.lc,
            Self::Dist => l.dist,
            Self::Itc => l.itc,
            Self::Total => total_loss(l, &model.cfg.objective)?,
        })
    }
}

fn masks_for(model: &Malm, pairs: &[Pair], seed: u64) -> Result<(RecipeBatch, StepMasks)> {
    let idx: Vec<usize> = (0..pairs.len()).collect();
    let batch = PairedBatch::gather(pairs, &idx);
    let recipes = RecipeBatch::new(&batch.recipes, model.caps());
    let masks = model.sample_masks(&recipes, seed)?;
    Ok((recipes, masks))
}

/// Value of one loss term and, optionally, its gradients by name. Teacher
/// targets are computed from `targets`, which stays fixed under
/// finite-difference perturbations of `model` (stop-gradient semantics).
pub fn loss_and_grads(
    model: &Malm,
    targets: &Malm,
    pairs: &[Pair],
    term: LossTerm,
    mask_seed: u64,
    want_grads: bool,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let idx: Vec<usize> = (0..pairs.len()).collect();
    let batch = PairedBatch::gather(pairs, &idx);
    let (recipes, masks) = masks_for(model, pairs, mask_seed)?;
    let tape = Tape::new();
    let b = Binder::trainable(&tape, &model.params);
    let frozen = Binder::frozen(&tape, &targets.params);
    let out = model.forward_train(&b, &frozen, &batch, &recipes, &masks)?;
    let loss = term.pick(&out.losses, model)?;
    let value = loss.item();
    if !want_grads {
        return Ok((value, BTreeMap::new()));
    }
    let grads = tape.backward(loss);
    Ok((value, b.collect(&grads)))
}

/// Relative error `‖g − ĝ‖ / max(‖g‖, ‖ĝ‖)` between analytic and central
/// difference gradients over up to `per_param` seeded coordinates of every
/// parameter with a gradient.
pub fn finite_difference_error(
    fx: &Fixture,
    term: LossTerm,
    per_param: usize,
    seed: u64,
) -> Result<(f64, usize)> {
    let h = 1e-6;
    let (_, grads) = loss_and_grads(&fx.model, &fx.model, &fx.pairs, term, seed, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = fx.model.clone();
    let (mut diff2, mut a2, mut n2, mut count) = (0.0, 0.0, 0.0, 0usize);
    for (name, g) in &grads {
        let n = g.numel();
        let coords: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut rng, n, per_param).into_vec()
        };
        for i in coords {
            let orig = model.params.get(name).expect("bound").data()[i];
            model.params.get_mut(name).expect("bound").data_mut()[i] = orig + h;
            let (up, _) = loss_and_grads(&model, &fx.model, &fx.pairs, term, seed, false)?;
            model.params.get_mut(name).expect("bound").data_mut()[i] = orig - h;
            let (down, _) = loss_and_grads(&model, &fx.model, &fx.pairs, term, seed, false)?;
            model.params.get_mut(name).expect("bound").data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = g.data()[i];
            diff2 += (analytic - numeric).powi(2);
            a2 += analytic * analytic;
            n2 += numeric * numeric;
            count += 1;
        }
    }
    let denom = a2.sqrt().max(n2.sqrt()).max(1e-300);
    Ok((diff2.sqrt() / denom, count))
}

const ORACLE_TOL: f64 = 1e-6;

/// Absolute error, relative once the reference exceeds 1 in magnitude.
fn err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1.0)
}

fn rand_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect()
}

fn flat(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit(v: &[f64], normalize: bool) -> Vec<f64> {
    if !normalize {
        return v.to_vec();
    }
    let n = dot(v, v).sqrt().max(1e-12);
    v.iter().map(|x| x / n).collect()
}

fn random_matching_cfg(rng: &mut ChaCha8Rng) -> crate::config::MatchingConfig {
    use crate::config::{BatchReduction, MatchingConfig};
    MatchingConfig {
        normalize: rng.random_bool(0.5),
        literal_denominator: rng.random_bool(0.5),
        literal_sum_loss: rng.random_bool(0.3),
        include_cls_in_local: rng.random_bool(0.5),
        reduction: if rng.random_bool(0.5) {
            BatchReduction::Mean
        } else {
            BatchReduction::Sum
        },
        ..MatchingConfig::default()
    }
}

/// `log Z` of every row by explicit loops.
fn naive_log_z(
    x: &[Vec<f64>],
    y: &[Vec<f64>],
    inv_tau: f64,
    normalize: bool,
    literal: bool,
) -> Vec<f64> {
    let x: Vec<Vec<f64>> = x.iter().map(|v| unit(v, normalize)).collect();
    let y: Vec<Vec<f64>> = y.iter().map(|v| unit(v, normalize)).collect();
    (0..x.len())
        .map(|i| {
            let mut denom = 0.0;
            for k in 0..y.len() {
                if literal && k == i {
                    continue;
                }
                denom += (dot(&x[i], &y[k]) * inv_tau).exp();
            }
            dot(&x[i], &y[i]) * inv_tau - denom.ln()
        })
        .collect()
}

/// Loop oracle of the local loss over `[B][N][D]` features.
fn naive_loss_lc(
    x: &[Vec<Vec<f64>>],
    y: &[Vec<Vec<f64>>],
    cfg: &crate::config::MatchingConfig,
    inv_tau: f64,
) -> f64 {
    let (bsz, n) = (x.len(), x[0].len());
    let first = usize::from(!cfg.include_cls_in_local);
    let mut per_sample = vec![0.0; bsz];
    for p in first..n {
        let xp: Vec<Vec<f64>> = (0..bsz).map(|i| x[i][p].clone()).collect();
        let yp: Vec<Vec<f64>> = (0..bsz).map(|i| y[i][p].clone()).collect();
        let a = naive_log_z(&xp, &yp, inv_tau, cfg.normalize, cfg.literal_denominator);
        let b = naive_log_z(&yp, &xp, inv_tau, cfg.normalize, cfg.literal_denominator);
        for i in 0..bsz {
            per_sample[i] += if cfg.literal_sum_loss {
                0.5 * (a[i].exp() + b[i].exp())
            } else {
                -0.5 * (a[i] + b[i])
            };
        }
    }
    let total: f64 = per_sample.iter().map(|v| v / (n - first) as f64).sum();
    match cfg.reduction {
        crate::config::BatchReduction::Mean => total / bsz as f64,
        crate::config::BatchReduction::Sum => total,
    }
}

fn oracle_result(name: &str, instances: usize, worst: f64) -> CheckResult {
    CheckResult::new(
        name,
        worst <= ORACLE_TOL,
        format!("{instances} instances, max error {worst:.2e}"),
    )
}

pub fn oracle_contrastive_z(instances: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (bsz, d) = (rng.random_range(2..7), rng.random_range(1..6));
        let cfg = random_matching_cfg(&mut rng);
        let inv_tau = rng.random_range(0.0f64..100f64.ln()).exp();
        let (x, y) = (rand_rows(&mut rng, bsz, d), rand_rows(&mut rng, bsz, d));
        let tape = Tape::new();
        let xv = tape.leaf(Tensor::new(vec![bsz, d], flat(&x)));
        let yv = tape.leaf(Tensor::new(vec![bsz, d], flat(&y)));
        let it = tape.constant(Tensor::new(vec![1], vec![inv_tau]));
        let got = crate::matching::contrastive_log_z(xv, yv, &cfg, it)?;
        let want = naive_log_z(&x, &y, inv_tau, cfg.normalize, cfg.literal_denominator);
        for (g, w) in got.value().data().iter().zip(&want) {
            worst = worst.max(err(*g, *w));
        }
    }
    Ok(oracle_result("oracle contrastive_Z", instances, worst))
}

pub fn oracle_loss_lc(instances: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (bsz, n, d) = (
            rng.random_range(2..6),
            rng.random_range(2..5),
            rng.random_range(1..5),
        );
        let cfg = random_matching_cfg(&mut rng);
        let inv_tau = rng.random_range(0.0f64..100f64.ln()).exp();
        let x: Vec<Vec<Vec<f64>>> = (0..bsz).map(|_| rand_rows(&mut rng, n, d)).collect();
        let y: Vec<Vec<Vec<f64>>> = (0..bsz).map(|_| rand_rows(&mut rng, n, d)).collect();
        let tape = Tape::new();
        let f3 = |v: &[Vec<Vec<f64>>]| {
            Tensor::new(vec![bsz, n, d], v.iter().flat_map(|r| flat(r)).collect())
        };
        let it = tape.constant(Tensor::new(vec![1], vec![inv_tau]));
        let got = crate::matching::loss_lc(tape.leaf(f3(&x)), tape.leaf(f3(&y)), &cfg, it)?.item();
        worst = worst.max(err(got, naive_loss_lc(&x, &y, &cfg, inv_tau)));
        // the global loss is the single-position case
        let xg: Vec<Vec<f64>> = x.iter().map(|r| r[0].clone()).collect();
        let yg: Vec<Vec<f64>> = y.iter().map(|r| r[0].clone()).collect();
        let gc = crate::matching::loss_gc(
            tape.leaf(Tensor::new(vec![bsz, d], flat(&xg))),
            tape.leaf(Tensor::new(vec![bsz, d], flat(&yg))),
            &cfg,
            it,
        )?
        .item();
        let wrap = |v: Vec<Vec<f64>>| v.into_iter().map(|r| vec![r]).collect::<Vec<_>>();
        let single = crate::config::MatchingConfig {
            include_cls_in_local: true,
            ..cfg.clone()
        };
        worst = worst.max(err(
            gc,
            naive_loss_lc(&wrap(xg), &wrap(yg), &single, inv_tau),
        ));
    }
    Ok(oracle_result("oracle loss_LC", instances, worst))
}

pub fn oracle_local_recipe_features(instances: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (bsz, n, s, d) = (
            rng.random_range(1..4),
            rng.random_range(1..5),
            rng.random_range(1..7),
            rng.random_range(1..5),
        );
        let valid: Vec<Vec<bool>> = (0..bsz)
            .map(|_| {
                let mut v: Vec<bool> = (0..s).map(|_| rng.random_bool(0.7)).collect();
                v[0] = true;
                v
            })
            .collect();
        // attention rows are softmax-like and zero on padded keys
        let a: Vec<Vec<Vec<f64>>> = (0..bsz)
            .map(|b| {
                (0..n)
                    .map(|_| {
                        let w: Vec<f64> = (0..s)
                            .map(|k| {
                                if valid[b][k] {
                                    rng.random_range(0.01..1.0)
                                } else {
                                    0.0
                                }
                            })
                            .collect();
                        let z: f64 = w.iter().sum();
                        w.iter().map(|v| v / z).collect()
                    })
                    .collect()
            })
            .collect();
        let r: Vec<Vec<Vec<f64>>> = (0..bsz).map(|_| rand_rows(&mut rng, s, d)).collect();
        let tape = Tape::new();
        let av = tape.leaf(Tensor::new(
            vec![bsz, n, s],
            a.iter().flat_map(|m| flat(m)).collect(),
        ));
        let rv = tape.leaf(Tensor::new(
            vec![bsz, s, d],
            r.iter().flat_map(|m| flat(m)).collect(),
        ));
        let got = crate::matching::local_recipe_features(av, rv, Some(&valid))?.value();
        for b in 0..bsz {
            let s_valid = valid[b].iter().filter(|&&v| v).count() as f64;
            for p in 0..n {
                for c in 0..d {
                    let mut acc = 0.0;
                    for k in 0..s {
                        if valid[b][k] {
                            acc += a[b][p][k] * r[b][k][c];
                        }
                    }
                    worst = worst.max(err(got.at(&[b, p, c]), acc / s_valid));
                }
            }
        }
    }
    Ok(oracle_result(
        "oracle local_recipe_features",
        instances,
        worst,
    ))
}

pub fn oracle_smooth_l1(instances: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let n = rng.random_range(1..20);
        let beta = rng.random_range(0.05..2.0);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut want = 0.0;
        for i in 0..n {
            let d = (a[i] - b[i]).abs();
            want += if d < beta {
                d * d / (2.0 * beta)
            } else {
                d - beta / 2.0
            };
        }
        want /= n as f64;
        let plain = crate::distillation::smooth_l1(&a, &b, beta)?;
        let tape = Tape::new();
        let diff = tape
            .leaf(Tensor::new(vec![n], a.clone()))
            .sub(tape.leaf(Tensor::new(vec![n], b.clone())));
        let graph = diff.smooth_l1(beta).mean().item();
        worst = worst.max(err(plain, want)).max(err(graph, want));
    }
    Ok(oracle_result("oracle smooth_l1", instances, worst))
}

pub fn oracle_rank_and_score(instances: usize, seed: u64) -> Result<CheckResult> {
    use crate::evaluation::{rank_and_score, sample_bags, Direction};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for t in 0..instances {
        let (n, d) = (rng.random_range(2..16), rng.random_range(1..5));
        let bag = rng.random_range(2..=n);
        let n_bags = rng.random_range(1..4);
        let dir = if rng.random_bool(0.5) {
            Direction::ImageToRecipe
        } else {
            Direction::RecipeToImage
        };
        let (img, rec) = (rand_rows(&mut rng, n, d), rand_rows(&mut rng, n, d));
        let got = rank_and_score(
            &Tensor::new(vec![n, d], flat(&img)),
            &Tensor::new(vec![n, d], flat(&rec)),
            dir,
            bag,
            n_bags,
            t as u64,
        )?;
        let (q, c) = match dir {
            Direction::ImageToRecipe => (&img, &rec),
            Direction::RecipeToImage => (&rec, &img),
        };
        let mut sums = [0.0; 4];
        for members in sample_bags(n, bag, n_bags, t as u64) {
            let mut ranks = Vec::new();
            for &i in &members {
                let truth = dot(&q[i], &c[i]);
                let better = members
                    .iter()
                    .filter(|&&j| j != i && dot(&q[i], &c[j]) >= truth)
                    .count();
                ranks.push(1 + better);
            }
            ranks.sort_unstable();
            let m = ranks.len();
            let medr = if m % 2 == 1 {
                ranks[m / 2] as f64
            } else {
                (ranks[m / 2 - 1] + ranks[m / 2]) as f64 / 2.0
            };
            let pct =
                |k: usize| 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / m as f64;
            for (s, v) in sums.iter_mut().zip([medr, pct(1), pct(5), pct(10)]) {
                *s += v / n_bags as f64;
            }
        }
        for (g, w) in [got.medr, got.r1, got.r5, got.r10].iter().zip(sums) {
            worst = worst.max(err(*g, w));
        }
    }
    Ok(oracle_result("oracle rank_and_score", instances, worst))
}

/// No teacher parameter receives a nonzero gradient from any loss.
pub fn teacher_gradients_zero(fx: &Fixture) -> Result<CheckResult> {
    let mut offenders = Vec::new();
    for term in LossTerm::ALL {
        let (_, grads) = loss_and_grads(&fx.model, &fx.model, &fx.pairs, term, 0, true)?;
        for (name, g) in &grads {
            if name.starts_with(&format!("{TEACHER}.")) && g.data().iter().any(|&v| v != 0.0) {
                offenders.push(format!("{}:{name}", term.name()));
            }
        }
    }
    Ok(CheckResult::new(
        "teacher gradients are zero",
        offenders.is_empty(),
        if offenders.is_empty() {
            "no teacher parameter has a gradient".to_string()
        } else {
            offenders.join(", ")
        },
    ))
}

/// `∂L_dist/∂I''` vanishes at CLS and visible positions, and the target gets
/// no gradient at all.
pub fn dist_gradient_masked_only(trials: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0usize;
    let mut masked_nonzero = 0usize;
    for t in 0..trials {
        let (bsz, p, d) = (
            rng.random_range(1..4),
            rng.random_range(2..9),
            rng.random_range(1..5),
        );
        let ratio = rng.random_range(0.1..0.9);
        let mask = crate::masking::sample_mask(p, ratio, bsz, seed.wrapping_add(t as u64))?;
        if mask.is_empty() {
            continue;
        }
        let tape = Tape::new();
        let pred = tape.leaf(Tensor::randn(&[bsz, p + 1, d], 1.0, &mut rng));
        let target = tape.leaf(Tensor::randn(&[bsz, p + 1, d], 1.0, &mut rng));
        let loss = crate::distillation::loss_dist(pred, target, &mask, rng.random_range(0.1..2.0))?;
        let grads = tape.backward(loss);
        if grads
            .get(target)
            .is_some_and(|g| g.data().iter().any(|&v| v != 0.0))
        {
            bad += 1;
        }
        let g = grads
            .get(pred)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&[bsz, p + 1, d]));
        for b in 0..bsz {
            for pos in 0..=p {
                let masked = mask.positions()[b].contains(&pos);
                let any = (0..d).any(|c| g.at(&[b, pos, c]) != 0.0);
                if !masked && any {
                    bad += 1;
                }
                masked_nonzero += usize::from(masked && any);
            }
        }
    }
    Ok(CheckResult::new(
        "L_dist gradient only at masked positions",
        bad == 0 && masked_nonzero > 0,
        format!(
            "{trials} trials, {bad} violations, {masked_nonzero} masked positions with gradient"
        ),
    ))
}

fn random_tree(rng: &mut ChaCha8Rng) -> crate::nn::ParamStore {
    let mut s = crate::nn::ParamStore::new();
    for i in 0..rng.random_range(1..6) {
        let shape: Vec<usize> = (0..rng.random_range(1..4))
            .map(|_| rng.random_range(1..5))
            .collect();
        s.insert(format!("p{i}"), Tensor::randn(&shape, 1.0, rng));
    }
    s
}

/// EMA against `m·θ_t + (1−m)·θ_s` elementwise, plus the exact edge cases.
pub fn ema_contract(trials: usize, seed: u64) -> Result<CheckResult> {
    use crate::distillation::ema_update;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut edge_ok = true;
    for _ in 0..trials {
        let student = random_tree(&mut rng);
        let mut teacher = student.clone();
        for (_, t) in teacher.iter_mut() {
            let e = Tensor::randn(t.shape(), 1.0, &mut rng);
            t.add_scaled(&e, 1.0);
        }
        let m = rng.random_range(0.0..1.0);
        let mut updated = teacher.clone();
        ema_update(&student, &mut updated, m)?;
        for ((name, u), (_, t)) in updated.iter().zip(teacher.iter()) {
            let s = student.get(name).expect("same tree");
            for i in 0..u.numel() {
                let want = m * t.data()[i] + (1.0 - m) * s.data()[i];
                worst = worst.max((u.data()[i] - want).abs());
            }
        }
        let mut copy = teacher.clone();
        ema_update(&student, &mut copy, 0.0)?;
        edge_ok &= copy == student;
        let mut kept = teacher.clone();
        ema_update(&student, &mut kept, 1.0)?;
        edge_ok &= kept == teacher;
    }
    Ok(CheckResult::new(
        "EMA update exact",
        worst <= 1e-12 && edge_ok,
        format!("{trials} trees, max |Δ| {worst:.2e}, momentum 0/1 exact: {edge_ok}"),
    ))
}

/// Tiny synthetic dataset matching [`tiny_config`].
pub fn tiny_dataset(cfg: &MalmConfig, n: usize) -> Result<crate::data::Dataset> {
    let spec = crate::data::SyntheticSpec::from_config(cfg);
    Ok(crate::data::generate_synthetic(&spec, n)?.dataset)
}

fn tiny_training(seed: u64, epochs: usize) -> Result<(MalmConfig, crate::data::Dataset)> {
    let mut cfg = tiny_config();
    cfg.seed = seed;
    cfg.train.epochs = epochs;
    cfg.train.freeze_image_encoder_epochs = 0;
    cfg.train.batch_size = 4;
    cfg.train.max_steps = 0;
    // a 3x3 grid holds the smallest class set the generator accepts
    cfg.data.image_size = 24;
    cfg.data.synth_classes = 5;
    let data = tiny_dataset(&cfg, 12)?;
    Ok((cfg, data))
}

/// Training with the image encoder frozen leaves every student parameter
/// bit-identical.
pub fn freeze_keeps_student(seed: u64) -> Result<CheckResult> {
    use crate::training::train;
    let (mut cfg, data) = tiny_training(seed, 2)?;
    cfg.train.freeze_image_encoder_epochs = 2;
    let model = Malm::new(cfg, data.vocab.clone())?;
    let before = model.params.clone();
    let out = train(model, &data, None, &mut |_| {})?;
    let prefix = format!("{}.", crate::encoders::STUDENT);
    let mut changed = Vec::new();
    let mut other_moved = false;
    for (name, t) in out.last.params.iter() {
        let same = before.get(name) == Some(t);
        if name.starts_with(&prefix) && !same {
            changed.push(name.clone());
        }
        other_moved |= !name.starts_with(&prefix) && !same;
    }
    Ok(CheckResult::new(
        "frozen image encoder is bit-identical",
        changed.is_empty() && other_moved,
        format!("{} steps, changed student tensors: {changed:?}", out.steps),
    ))
}

/// Dropping the local loss changes the gradient reaching the matching
/// module.
pub fn local_loss_reaches_matching(fx: &Fixture) -> Result<CheckResult> {
    let (_, with) = loss_and_grads(&fx.model, &fx.model, &fx.pairs, LossTerm::Total, 0, true)?;
    let mut without_model = fx.model.clone();
    without_model.cfg.objective.local_loss = false;
    let (_, without) = loss_and_grads(
        &without_model,
        &fx.model,
        &fx.pairs,
        LossTerm::Total,
        0,
        true,
    )?;
    let mut delta = 0.0f64;
    for (name, g) in with.iter().filter(|(n, _)| n.starts_with("match.")) {
        let d = match without.get(name) {
            Some(h) => g.max_abs_diff(h),
            None => g.data().iter().fold(0.0f64, |m, v| m.max(v.abs())),
        };
        delta = delta.max(d);
    }
    Ok(CheckResult::new(
        "L_LC changes matching gradients",
        delta > 0.0,
        format!("max |Δ grad| over matching parameters {delta:.3e}"),
    ))
}

/// Two identical short runs give identical traces and parameters.
pub fn training_is_deterministic(seed: u64) -> Result<CheckResult> {
    use crate::training::train;
    let (cfg, data) = tiny_training(seed, 2)?;
    let run = || -> Result<(Vec<f64>, crate::nn::ParamStore)> {
        let model = Malm::new(cfg.clone(), data.vocab.clone())?;
        let out = train(model, &data, None, &mut |_| {})?;
        let trace = out
            .metrics
            .iter()
            .flat_map(|m| [m.total, m.itc, m.gc, m.lc, m.dist])
            .collect();
        Ok((trace, out.last.params))
    };
    let (a, pa) = run()?;
    let (b, pb) = run()?;
    let same = a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()) && a.len() == b.len();
    Ok(CheckResult::new(
        "training is deterministic",
        same && pa == pb,
        format!("{} loss values compared", a.len()),
    ))
}

/// Finite-difference checks of every loss term on the tiny fixture.
pub fn gradient_checks(fx: &Fixture, per_param: usize, seed: u64) -> Result<Vec<CheckResult>> {
    LossTerm::ALL
        .iter()
        .map(|&term| {
            let (err, n) = finite_difference_error(fx, term, per_param, seed)?;
            Ok(CheckResult::new(
                &format!("finite differences {}", term.name()),
                err < 1e-4,
                format!("relative error {err:.2e} over {n} coordinates"),
            ))
        })
        .collect()
}

pub fn oracle_checks(instances: usize, seed: u64) -> Result<Vec<CheckResult>> {
    Ok(vec![
        oracle_contrastive_z(instances, seed)?,
        oracle_loss_lc(instances, seed + 1)?,
        oracle_local_recipe_features(instances, seed + 2)?,
        oracle_smooth_l1(instances, seed + 3)?,
        oracle_rank_and_score(instances, seed + 4)?,
    ])
}

pub fn distillation_checks(fx: &Fixture, seed: u64) -> Result<Vec<CheckResult>> {
    Ok(vec![
        teacher_gradients_zero(fx)?,
        dist_gradient_masked_only(100, seed)?,
        ema_contract(100, seed)?,
    ])
}

pub fn invariant_checks(fx: &Fixture, seed: u64) -> Result<Vec<CheckResult>> {
    Ok(vec![
        freeze_keeps_student(seed)?,
        local_loss_reaches_matching(fx)?,
        training_is_deterministic(seed)?,
    ])
}

/// Every suite: gradients, oracles, distillation contracts, invariants.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    let fx = tiny_fixture(seed)?;
    let mut out = gradient_checks(&fx, 32, seed)?;
    out.extend(oracle_checks(100, seed)?);
    out.extend(distillation_checks(&fx, seed)?);
    out.extend(invariant_checks(&fx, seed)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_pass(r: &CheckResult) {
        assert!(r.passed, "{}: {}", r.name, r.detail);
    }

    #[test]
    fn oracles_agree() {
        for r in oracle_checks(30, 7).unwrap() {
            assert_pass(&r);
        }
    }

    #[test]
    fn distillation_contracts_hold() {
        let fx = tiny_fixture(3).unwrap();
        for r in distillation_checks(&fx, 3).unwrap() {
            assert_pass(&r);
        }
    }

    #[test]
    fn tiny_fixture_has_the_contract_sizes() {
        let fx = tiny_fixture(0).unwrap();
        let c = &fx.model.cfg;
        assert_eq!(
            (c.embed_dim, c.patches(), c.recipe_len(), fx.pairs.len()),
            (8, 4, 6, 3)
        );
    }
}
