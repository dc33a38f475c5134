//! Plain-loop reference implementations of the losses, compared with the
//! tape versions on hand examples and random batches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use versreid_core::loss::{batch_hard_triplet, distill_variant, rkd_loss, DistillKind};
use versreid_core::{Tape, Tensor};

pub const TOLERANCE: f64 = 1e-5;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn oracle_triplet(f: &[Vec<f64>], ids: &[usize], margin: f64) -> f64 {
    let b = f.len();
    let mut total = 0.0;
    for a in 0..b {
        let mut dp = f64::NEG_INFINITY;
        let mut dn = f64::INFINITY;
        for j in 0..b {
            if j == a {
                continue;
            }
            let d = dist(&f[a], &f[j]);
            if ids[j] == ids[a] {
                dp = dp.max(d);
            } else {
                dn = dn.min(d);
            }
        }
        total += (dp - dn + margin).max(0.0);
    }
    total / b as f64
}

pub fn oracle_rkd(s: &[Vec<f64>], t: &[Vec<f64>]) -> f64 {
    let b = s.len();
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..b {
        for j in i + 1..b {
            let g = sq_dist(&s[i], &s[j]) - sq_dist(&t[i], &t[j]);
            total += g * g;
            pairs += 1;
        }
    }
    total / pairs as f64
}

pub fn oracle_l1(s: &[Vec<f64>], t: &[Vec<f64>]) -> f64 {
    let per: f64 = s
        .iter()
        .zip(t)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>())
        .sum();
    per / s.len() as f64
}

pub fn oracle_l2(s: &[Vec<f64>], t: &[Vec<f64>]) -> f64 {
    s.iter().zip(t).map(|(a, b)| dist(a, b)).sum::<f64>() / s.len() as f64
}

/// Mean KL(teacher || student), logs clamped at 1e-12, at temperature `tau`.
pub fn oracle_kl(sp: &[Vec<f64>], tp: &[Vec<f64>], tau: f64) -> f64 {
    let temper = |p: &[f64]| -> Vec<f64> {
        let l: Vec<f64> = p.iter().map(|x| x.max(1e-12).ln() / tau).collect();
        let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = l.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.iter().map(|x| x / z).collect()
    };
    let mut total = 0.0;
    for (s, t) in sp.iter().zip(tp) {
        let (s, t) = if tau == 1.0 { (s.clone(), t.clone()) } else { (temper(s), temper(t)) };
        for (ps, pt) in s.iter().zip(&t) {
            total += pt * (pt.max(1e-12).ln() - ps.max(1e-12).ln());
        }
    }
    total / sp.len() as f64
}

fn tensor(rows: &[Vec<f64>]) -> Tensor<f64> {
    let c = rows[0].len();
    Tensor::new(&[rows.len(), c], rows.concat()).unwrap()
}

pub fn tape_triplet(f: &[Vec<f64>], ids: &[usize], margin: f64) -> f64 {
    let mut t = Tape::new();
    let v = t.constant(tensor(f));
    let l = batch_hard_triplet(&mut t, v, ids, margin).unwrap();
    t.value(l).data()[0]
}

pub fn tape_rkd(s: &[Vec<f64>], te: &[Vec<f64>]) -> f64 {
    let mut t = Tape::new();
    let a = t.constant(tensor(s));
    let b = t.constant(tensor(te));
    let l = rkd_loss(&mut t, a, b).unwrap();
    t.value(l).data()[0]
}

pub fn tape_distill(kind: DistillKind, s: &[Vec<f64>], te: &[Vec<f64>], tau: f64) -> f64 {
    let mut t = Tape::new();
    let a = t.constant(tensor(s));
    let b = t.constant(tensor(te));
    let l = match kind {
        DistillKind::Kl => distill_variant(&mut t, kind, a, b, Some(a), Some(b), tau),
        _ => distill_variant(&mut t, kind, a, b, None, None, tau),
    }
    .unwrap();
    t.value(l).data()[0]
}

/// One hand example: name, tape value, expected value.
pub struct Example {
    pub name: &'static str,
    pub got: f64,
    pub want: f64,
}

pub fn hand_examples() -> Vec<Example> {
    let col = |v: &[f64]| v.iter().map(|&x| vec![x]).collect::<Vec<_>>();
    let ab = [0, 0, 1, 1];
    vec![
        Example {
            name: "triplet 1-d [0, 0.9, 1.0, 1.9] margin 0.3",
            got: tape_triplet(&col(&[0.0, 0.9, 1.0, 1.9]), &ab, 0.3),
            want: (0.2 + 1.1 + 1.1 + 0.2) / 4.0,
        },
        Example {
            name: "triplet separated clusters margin 0",
            got: tape_triplet(&col(&[0.0, 0.1, 5.0, 5.1]), &ab, 0.0),
            want: 0.0,
        },
        Example {
            name: "triplet identical features",
            got: tape_triplet(&vec![vec![0.5, -0.5]; 4], &ab, 0.3),
            want: 0.3,
        },
        Example {
            name: "rkd one pair d=1 d'=4",
            got: tape_rkd(&[vec![0.0, 0.0], vec![2.0, 0.0]], &[vec![0.0, 0.0], vec![1.0, 0.0]]),
            want: 9.0,
        },
        Example {
            name: "rkd student equals teacher",
            got: tape_rkd(&[vec![0.3, 1.0], vec![2.0, -1.0]], &[vec![0.3, 1.0], vec![2.0, -1.0]]),
            want: 0.0,
        },
        Example {
            name: "l1 (0,0) vs (3,4)",
            got: tape_distill(DistillKind::L1, &[vec![3.0, 4.0]], &[vec![0.0, 0.0]], 1.0),
            want: 7.0,
        },
        Example {
            name: "l2 (0,0) vs (3,4)",
            got: tape_distill(DistillKind::L2, &[vec![3.0, 4.0]], &[vec![0.0, 0.0]], 1.0),
            want: 5.0,
        },
        Example {
            name: "kl teacher [1,0] student [0.5,0.5]",
            got: tape_distill(DistillKind::Kl, &[vec![0.5, 0.5]], &[vec![1.0, 0.0]], 1.0),
            want: 2f64.ln(),
        },
        Example {
            name: "kl identical",
            got: tape_distill(DistillKind::Kl, &[vec![0.2, 0.8]], &[vec![0.2, 0.8]], 1.0),
            want: 0.0,
        },
    ]
}

fn random_rows(rng: &mut ChaCha8Rng, b: usize, d: usize) -> Vec<Vec<f64>> {
    (0..b).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
}

fn random_probs(rng: &mut ChaCha8Rng, b: usize, c: usize) -> Vec<Vec<f64>> {
    (0..b)
        .map(|_| {
            let e: Vec<f64> = (0..c).map(|_| rng.random_range(-2.0f64..2.0).exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|x| x / z).collect()
        })
        .collect()
}

/// Worst absolute gap per loss over `batches` random small batches.
pub fn random_batches(batches: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 6];
    for _ in 0..batches {
        let p = rng.random_range(2..5);
        let k = rng.random_range(2..4);
        let d = rng.random_range(1..6);
        let mut ids: Vec<usize> = (0..p * k).map(|i| i / k).collect();
        // Shuffle so identities interleave.
        for i in (1..ids.len()).rev() {
            let j = rng.random_range(0..=i);
            ids.swap(i, j);
        }
        let b = ids.len();
        let margin = rng.random_range(0.0..1.0);
        let f = random_rows(&mut rng, b, d);
        let s = random_rows(&mut rng, b, d);
        let sp = random_probs(&mut rng, b, d + 1);
        let tp = random_probs(&mut rng, b, d + 1);
        let gaps = [
            (tape_triplet(&f, &ids, margin) - oracle_triplet(&f, &ids, margin)).abs(),
            (tape_rkd(&s, &f) - oracle_rkd(&s, &f)).abs(),
            (tape_distill(DistillKind::L1, &s, &f, 1.0) - oracle_l1(&s, &f)).abs(),
            (tape_distill(DistillKind::L2, &s, &f, 1.0) - oracle_l2(&s, &f)).abs(),
            (tape_distill(DistillKind::Kl, &sp, &tp, 1.0) - oracle_kl(&sp, &tp, 1.0)).abs(),
            (tape_distill(DistillKind::Kl, &sp, &tp, 2.0) - oracle_kl(&sp, &tp, 2.0)).abs(),
        ];
        for (w, g) in worst.iter_mut().zip(gaps) {
            *w = w.max(g);
        }
    }
    let names = ["batch_hard_triplet", "rkd_loss", "distill l1", "distill l2", "distill kl", "distill kl tau=2"];
    names.into_iter().zip(worst).collect()
}
