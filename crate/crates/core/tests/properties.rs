//! Invariants of losses, metrics and the transformer under random inputs.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use versreid_core::eval::{evaluate, Label};
use versreid_core::loss::{batch_hard_triplet, rkd_loss};
use versreid_core::model::{BranchKind, ModelConfig, PromptSel, ReidModel};
use versreid_core::{Image, Tape, Tensor};

fn triplet(rows: &[Vec<f64>], ids: &[usize]) -> f64 {
    let mut t = Tape::new();
    let f = t.constant(Tensor::new(&[rows.len(), rows[0].len()], rows.concat()).unwrap());
    let l = batch_hard_triplet(&mut t, f, ids, 0.3).unwrap();
    t.value(l).data()[0]
}

fn rkd(s: &[Vec<f64>], te: &[Vec<f64>]) -> f64 {
    let mut t = Tape::new();
    let a = t.constant(Tensor::new(&[s.len(), 2], s.concat()).unwrap());
    let b = t.constant(Tensor::new(&[te.len(), 2], te.concat()).unwrap());
    let l = rkd_loss(&mut t, a, b).unwrap();
    t.value(l).data()[0]
}

fn batch() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>)> {
    (2usize..4, 2usize..4, 1usize..5).prop_flat_map(|(p, k, d)| {
        let ids: Vec<usize> = (0..p * k).map(|i| i / k).collect();
        (prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), p * k), Just(ids))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn triplet_is_permutation_invariant((rows, ids) in batch(), seed in any::<u64>()) {
        let mut order: Vec<usize> = (0..rows.len()).collect();
        let mut s = seed;
        for i in (1..order.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(i, (s >> 33) as usize % (i + 1));
        }
        let pr: Vec<Vec<f64>> = order.iter().map(|&i| rows[i].clone()).collect();
        let pi: Vec<usize> = order.iter().map(|&i| ids[i]).collect();
        let a = triplet(&rows, &ids);
        let b = triplet(&pr, &pi);
        prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
        prop_assert!(a >= 0.0 && a.is_finite());
    }

    #[test]
    fn rkd_is_rotation_and_translation_invariant(
        s in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 2), 2..7),
        seed in 0u64..1000,
        theta in 0.0f64..std::f64::consts::TAU,
        shift in prop::collection::vec(-5.0f64..5.0, 2),
    ) {
        let te: Vec<Vec<f64>> = s.iter().enumerate()
            .map(|(i, r)| vec![r[0] * 0.5 + (seed + i as u64) as f64 % 3.0, r[1] - 1.0])
            .collect();
        let (c, sn) = (theta.cos(), theta.sin());
        let moved: Vec<Vec<f64>> = s.iter()
            .map(|r| vec![c * r[0] - sn * r[1] + shift[0], sn * r[0] + c * r[1] + shift[1]])
            .collect();
        let a = rkd(&s, &te);
        let b = rkd(&moved, &te);
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()), "{} vs {}", a, b);
        prop_assert!(rkd(&s, &s) == 0.0);
    }

    #[test]
    fn cmc_is_monotone_and_reaches_one(
        nq in 1usize..12,
        ng in 1usize..30,
        seed in any::<u64>(),
    ) {
        let mut s = seed | 1;
        let mut next = move || { s ^= s << 13; s ^= s >> 7; s ^= s << 17; s };
        let q: Vec<Label> = (0..nq).map(|_| Label { identity: (next() % 4) as usize, camera: 0 }).collect();
        let mut g: Vec<Label> = (0..ng).map(|_| Label { identity: (next() % 4) as usize, camera: (next() % 2) as usize }).collect();
        g[0] = Label { identity: q[0].identity, camera: 1 };
        let d = Tensor::new(&[nq, ng], (0..nq * ng).map(|_| (next() % 7) as f32).collect()).unwrap();
        let r = evaluate(&d, &q, &g).unwrap();
        prop_assert!(r.cmc.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(*r.cmc.last().unwrap(), 1.0);
        prop_assert!(r.map <= 1.0 && r.map > 0.0);
        prop_assert!(r.ap.iter().all(|&a| (0.0..=1.0).contains(&a)));
        prop_assert_eq!(r.num_valid + r.num_skipped, nq);
    }

    #[test]
    fn softmax_rows_sum_to_one(x in prop::collection::vec(-50.0f32..50.0, 12)) {
        let mut t = Tape::<f32>::new();
        let v = t.constant(Tensor::new(&[3, 4], x).unwrap());
        let s = t.softmax_rows(v).unwrap();
        for r in 0..3 {
            let sum: f32 = t.value(s).row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
        }
    }
}

fn model(kind: BranchKind) -> ReidModel {
    let cfg = ModelConfig { num_classes: 5, ..ModelConfig::default() };
    ReidModel::new(cfg, kind, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
}

fn image(seed: u64) -> Image {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(32, 16, (0..32 * 16 * 3).map(|_| rng.random::<f32>()).collect()).unwrap()
}

#[test]
fn swapping_two_tokens_with_their_positions_swaps_outputs() {
    let m = model(BranchKind::Bank);
    let mut tape = Tape::<f64>::new();
    let vars = m.params().bind(&mut tape);
    let img = image(1);
    let seq = m.serialize_image(&mut tape, &vars, &img).unwrap();
    let out = m.transformer_forward(&mut tape, &vars, seq).unwrap();
    let base = tape.value(seq).clone();
    let d = base.cols();
    let mut swapped = base.data().to_vec();
    // Rows 2 and 5 are image tokens (row 0 is the class token); positions
    // are already added, so swapping rows swaps token and position together.
    for c in 0..d {
        swapped.swap(2 * d + c, 5 * d + c);
    }
    let s2 = tape.constant(Tensor::new(base.shape(), swapped).unwrap());
    let out2 = m.transformer_forward(&mut tape, &vars, s2).unwrap();
    let (a, b) = (tape.value(out), tape.value(out2));
    for c in 0..d {
        assert!((a.row(2)[c] - b.row(5)[c]).abs() < 1e-9);
        assert!((a.row(5)[c] - b.row(2)[c]).abs() < 1e-9);
        assert!((a.row(0)[c] - b.row(0)[c]).abs() < 1e-9);
    }
}

#[test]
fn positional_rows_ignore_prompt_count() {
    for n in [0, 2, 7] {
        let cfg = ModelConfig { prompts_per_scene: n, ..ModelConfig::default() };
        let m = ReidModel::new(cfg, BranchKind::Bank, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(m.params().by_name("pos_embed").unwrap().shape(), &[9, 32]);
    }
}

#[test]
fn vbranch_output_is_a_function_of_image_and_weights() {
    let m = model(BranchKind::VBranch);
    let img = image(2);
    let a = m.infer(&img, m.default_selection(Some(0)).unwrap()).unwrap();
    let b = m.infer(&img, m.default_selection(Some(4)).unwrap()).unwrap();
    let c = m.infer(&img, PromptSel::Versatile).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn versatile_prompts_differ_from_scene_prompts() {
    let bank = model(BranchKind::Bank);
    let vb = versreid_core::model::init_vbranch_from_bank(&bank, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let sp = bank.params().by_name("prompts.scene").unwrap();
    let vp = vb.params().by_name("prompts.versatile").unwrap();
    for i in 0..vp.rows() {
        for j in 0..sp.rows() {
            assert_ne!(vp.row(i), sp.row(j));
        }
    }
}
