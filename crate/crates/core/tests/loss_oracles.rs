mod support;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::loss_oracle::{self, hand_examples, random_batches};
use versreid_core::loss::{
    batch_hard_triplet, cross_entropy, distill_variant, stage1_loss, stage2_loss, DistillKind, LossConfig,
};
use versreid_core::{Tape, Tensor};

#[test]
fn hand_examples_are_exact() {
    for ex in hand_examples() {
        assert!((ex.got - ex.want).abs() < 1e-12, "{}: got {} want {}", ex.name, ex.got, ex.want);
    }
}

#[test]
fn random_batches_match_plain_loops() {
    for (name, worst) in random_batches(100, 11) {
        assert!(worst < loss_oracle::TOLERANCE, "{name}: {worst:e}");
    }
}

#[test]
fn triplet_single_sample_identity_is_named() {
    let mut t = Tape::<f64>::new();
    let f = t.constant(Tensor::matrix(3, 1, &[0.0, 1.0, 2.0]).unwrap());
    let e = batch_hard_triplet(&mut t, f, &[4, 4, 9], 0.3).unwrap_err().to_string();
    assert!(e.contains("identity 9"), "{e}");
}

fn random_batch(rng: &mut ChaCha8Rng, b: usize, d: usize, c: usize) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let mut m = |r: usize, k: usize| {
        Tensor::new(&[r, k], (0..r * k).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    };
    (m(b, d), m(b, c), m(b, d))
}

#[test]
fn composites_recompose_from_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ids = [0, 0, 1, 1, 2, 2];
    for kind in [DistillKind::Rkd, DistillKind::L1, DistillKind::L2, DistillKind::Kl] {
        for normalize in [false, true] {
            let (f, logits, tf) = random_batch(&mut rng, 6, 4, 3);
            let cfg = LossConfig {
                alpha: 0.7,
                distill: kind,
                normalize_features: normalize,
                ..LossConfig::default()
            };
            let mut t = Tape::<f64>::new();
            let fv = t.constant(f);
            let lv = t.constant(logits.clone());
            let p = t.softmax_rows(lv).unwrap();
            let tl = t.constant(logits.cast::<f64>());
            let tp = t.softmax_rows(tl).unwrap();
            let tv = t.constant(tf);
            let s1 = stage1_loss(&mut t, fv, p, &ids, &cfg).unwrap();
            let s2 = stage2_loss(&mut t, fv, p, tv, Some(tp), &ids, &cfg).unwrap();

            let tri_in = if normalize { t.l2_normalize_rows(fv).unwrap() } else { fv };
            let tri = batch_hard_triplet(&mut t, tri_in, &ids, cfg.margin).unwrap();
            let ce = cross_entropy(&mut t, p, &ids).unwrap();
            let (sf, stf) = if normalize && kind != DistillKind::Kl {
                (t.l2_normalize_rows(fv).unwrap(), t.l2_normalize_rows(tv).unwrap())
            } else {
                (fv, tv)
            };
            let kd = distill_variant(&mut t, kind, sf, stf, Some(p), Some(tp), 1.0).unwrap();
            // Identical student and teacher outputs leave only the stage-1 terms.
            let same = stage2_loss(&mut t, fv, p, fv, Some(p), &ids, &cfg).unwrap();
            let v = |x| t.value(x).data()[0];
            assert!((v(s1.total) - (v(tri) + v(ce))).abs() < 1e-12);
            assert!((v(s2.total) - (v(tri) + v(ce) + 0.7 * v(kd))).abs() < 1e-12);
            assert!((v(same.total) - v(s1.total)).abs() < 1e-12);
        }
    }
}
