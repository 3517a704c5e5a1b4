//! Property tests over the module invariants.

use malm::autograd::{Binder, Tape};
use malm::config::MatchingConfig;
use malm::data::{generate_synthetic, make_batches, PairedBatch, SyntheticSpec, Vocab};
use malm::distillation::{ema_update, smooth_l1};
use malm::evaluation::{rank_and_score, sample_bags, true_ranks, Direction};
use malm::masking::{assemble_masked_sequence, mask_count, sample_mask};
use malm::matching::{loss_gc, loss_lc, match_features};
use malm::nn::ParamStore;
use malm::tensor::Tensor;
use malm::MalmConfig;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tensor(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn small_synthetic(seed: u64, noise: f64) -> MalmConfig {
    let mut c = MalmConfig::desk_synthetic();
    c.seed = seed;
    c.data.synth_noise_std = noise;
    c
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(24) })]

    #[test]
    fn batches_keep_pairs_aligned(seed in 0u64..1000, bs in 2usize..9) {
        let cfg = small_synthetic(seed, 0.1);
        let set = generate_synthetic(&SyntheticSpec::from_config(&cfg), 20).unwrap();
        let pairs = &set.dataset.pairs;
        for idx in make_batches(pairs.len(), bs, seed, false).unwrap() {
            let batch = PairedBatch::gather(pairs, &idx);
            for (k, &i) in idx.iter().enumerate() {
                prop_assert!(std::ptr::eq(batch.images[k], &pairs[i].image));
                prop_assert!(std::ptr::eq(batch.recipes[k], &pairs[i].recipe));
            }
        }
    }

    #[test]
    fn disjoint_ingredients_paint_disjoint_regions(seed in 0u64..1000) {
        let cfg = small_synthetic(seed, 0.0);
        let set = generate_synthetic(&SyntheticSpec::from_config(&cfg), 30).unwrap();
        let gts: Vec<_> = set.dataset.pairs.iter().map(|p| p.groundtruth.clone().unwrap()).collect();
        for a in &gts {
            for b in &gts {
                let ca: Vec<_> = a.values().collect();
                if b.values().all(|c| !ca.contains(&c)) {
                    prop_assert!(a.keys().all(|r| !b.contains_key(r)));
                }
            }
        }
    }

    #[test]
    fn tokenization_round_trips(words in proptest::collection::vec("[a-z]{1,8}", 1..12)) {
        let text = words.join(" ");
        let vocab = Vocab::build([text.as_str()]);
        prop_assert_eq!(vocab.decode(&vocab.encode(&text)), text);
    }

    #[test]
    fn mask_count_is_floor(p in 1usize..300, ratio in 0.0f64..0.99, bsz in 1usize..5, seed in 0u64..1000) {
        let want = (ratio * p as f64 + 1e-9).floor() as usize;
        prop_assert_eq!(mask_count(p, ratio), want);
        if want < p {
            let m = sample_mask(p, ratio, bsz, seed).unwrap();
            prop_assert!(m.positions().iter().all(|r| r.len() == want));
            prop_assert_eq!(&m, &sample_mask(p, ratio, bsz, seed).unwrap());
        }
    }

    #[test]
    fn assembling_keeps_visible_rows(p in 2usize..12, ratio in 0.0f64..0.9, d in 1usize..5, seed in 0u64..1000) {
        let bsz = 2;
        let m = sample_mask(p, ratio, bsz, seed).unwrap();
        let nv = 1 + p - m.n_masked();
        let tape = Tape::new();
        let vis = tensor(&[bsz, nv, d], seed);
        let full = assemble_masked_sequence(
            tape.leaf(vis.clone()),
            &m,
            tape.leaf(tensor(&[d], seed + 1)),
            None,
        )
        .unwrap()
        .value();
        for (b, pos) in m.visible_positions().iter().enumerate() {
            for (k, &q) in pos.iter().enumerate() {
                for c in 0..d {
                    prop_assert_eq!(full.at(&[b, q, c]).to_bits(), vis.at(&[b, k, c]).to_bits());
                }
            }
        }
    }

    #[test]
    fn attention_rows_are_distributions(n in 1usize..6, s in 1usize..7, heads in 1usize..3, seed in 0u64..1000) {
        let d = 4 * heads;
        let cfg = MatchingConfig { depth: 2, heads, ..MatchingConfig::default() };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        malm::matching::init_matching(&mut malm::nn::Init { store: &mut store, rng: &mut rng }, &cfg, d);
        let tape = Tape::new();
        let b = Binder::frozen(&tape, &store);
        let valid = vec![(0..s).map(|j| j == 0 || j % 3 != 1).collect::<Vec<_>>(); 2];
        let out = match_features(
            &b,
            &cfg,
            tape.leaf(tensor(&[2, n, d], seed)),
            tape.leaf(tensor(&[2, s, d], seed + 1)),
            Some(&valid),
        )
        .unwrap();
        prop_assert!(malm::training::check_attention_rows(&out).is_ok());
        let a_i = out.a_i.value();
        for bb in 0..2 {
            for i in 0..n {
                for j in 0..s {
                    if !valid[bb][j] {
                        prop_assert_eq!(a_i.at(&[bb, i, j]), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn normalized_losses_ignore_rescaling(bsz in 2usize..5, n in 1usize..4, d in 1usize..5, seed in 0u64..1000, scale in 0.1f64..10.0) {
        let cfg = MatchingConfig::default();
        let x = tensor(&[bsz, n, d], seed);
        let y = tensor(&[bsz, n, d], seed + 1);
        let mut xs = x.clone();
        for (i, v) in xs.data_mut().iter_mut().enumerate() {
            *v *= scale * (1.0 + (i / (n * d)) as f64);
        }
        let tape = Tape::new();
        let it = tape.constant(Tensor::new(vec![1], vec![3.0]));
        let a = loss_lc(tape.leaf(x.clone()), tape.leaf(y.clone()), &cfg, it).unwrap().item();
        let b = loss_lc(tape.leaf(xs.clone()), tape.leaf(y.clone()), &cfg, it).unwrap().item();
        prop_assert!((a - b).abs() < 1e-6);
        let g = |t: &Tensor| tape.leaf(t.clone().reshape(&[bsz, n * d]));
        let a = loss_gc(g(&x), g(&y), &cfg, it).unwrap().item();
        let b = loss_gc(g(&xs), g(&y), &cfg, it).unwrap().item();
        prop_assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn ema_contracts_geometrically(m in 0.0f64..1.0, seed in 0u64..1000) {
        let mut student = ParamStore::new();
        student.insert("w", tensor(&[3, 4], seed));
        let mut teacher = ParamStore::new();
        teacher.insert("w", tensor(&[3, 4], seed + 1));
        let dist = |t: &ParamStore| {
            let (a, b) = (t.get("w").unwrap(), student.get("w").unwrap());
            a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
        };
        for _ in 0..5 {
            let before = dist(&teacher);
            ema_update(&student, &mut teacher, m).unwrap();
            prop_assert!((dist(&teacher) - m * before).abs() <= 1e-12 * before.max(1.0));
        }
    }

    #[test]
    fn rank_and_score_matches_brute_force(n in 2usize..65, d in 1usize..6, seed in 0u64..1000) {
        let img = tensor(&[n, d], seed);
        let rec = tensor(&[n, d], seed + 1);
        let bag = n.min(1 + (seed as usize % n)).max(2);
        let got = rank_and_score(&img, &rec, Direction::ImageToRecipe, bag, 3, seed).unwrap();
        let mut r1 = 0.0;
        for members in sample_bags(n, bag, 3, seed) {
            let mut hits = 0;
            for &q in &members {
                let s = |c: usize| (0..d).map(|k| img.at(&[q, k]) * rec.at(&[c, k])).sum::<f64>();
                let rank = 1 + members.iter().filter(|&&c| c != q && s(c) >= s(q)).count();
                hits += usize::from(rank == 1);
            }
            r1 += 100.0 * hits as f64 / members.len() as f64 / 3.0;
        }
        prop_assert!((got.r1 - r1).abs() < 1e-9);
        prop_assert!(got.r1 <= got.r5 && got.r5 <= got.r10);
        prop_assert_eq!(&got, &rank_and_score(&img, &rec, Direction::ImageToRecipe, bag, 3, seed).unwrap());
    }

    #[test]
    fn symmetric_similarity_gives_symmetric_reports(n in 2usize..30, d in 1usize..5, seed in 0u64..1000) {
        let e = tensor(&[n, d], seed);
        let a = rank_and_score(&e, &e, Direction::ImageToRecipe, n, 2, seed).unwrap();
        let b = rank_and_score(&e, &e, Direction::RecipeToImage, n, 2, seed).unwrap();
        prop_assert_eq!(a.summary(), b.summary());
    }
}

#[test]
fn smooth_l1_is_c1_at_beta() {
    for beta in [0.1, 0.5, 1.0, 2.0] {
        let f = |d: f64| smooth_l1(&[d], &[0.0], beta).unwrap();
        let h = 1e-7;
        let (below, above) = (f(beta - 1e-12), f(beta + 1e-12));
        assert!((below - above).abs() < 1e-9, "value jump at β = {beta}");
        let left = (f(beta) - f(beta - h)) / h;
        let right = (f(beta + h) - f(beta)) / h;
        assert!(
            (left - 1.0).abs() < 1e-6 && (right - 1.0).abs() < 1e-6,
            "slope at β = {beta}"
        );
    }
}

#[test]
fn ties_rank_the_true_item_last() {
    let sim = Tensor::new(vec![2, 2], vec![0.5, 0.5, 0.5, 0.5]);
    assert_eq!(true_ranks(&sim), vec![2, 2]);
}
