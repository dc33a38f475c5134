//! Brute-force CMC/mAP: each gallery item's rank is counted directly
//! (items strictly closer, or equally close with a lower index) instead of
//! sorting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use versreid_core::eval::{evaluate, Label};
use versreid_core::Tensor;

pub struct Brute {
    pub cmc: Vec<f64>,
    pub map: f64,
    pub skipped: usize,
}

pub fn brute_force(dist: &[f32], nq: usize, ng: usize, q: &[Label], g: &[Label]) -> Brute {
    let mut first_hits: Vec<usize> = Vec::new();
    let mut aps = Vec::new();
    let mut skipped = 0;
    for qi in 0..nq {
        let row = &dist[qi * ng..(qi + 1) * ng];
        let kept = |j: usize| !(g[j].identity == q[qi].identity && g[j].camera == q[qi].camera);
        let before = |a: usize, b: usize| row[a] < row[b] || (row[a] == row[b] && a < b);
        // rank_of[j] = number of kept items ahead of j.
        let mut ranked: Vec<(usize, usize)> = Vec::new();
        for j in (0..ng).filter(|&j| kept(j) && g[j].identity == q[qi].identity) {
            let r = (0..ng).filter(|&o| o != j && kept(o) && before(o, j)).count();
            ranked.push((r, j));
        }
        if ranked.is_empty() {
            skipped += 1;
            continue;
        }
        ranked.sort();
        first_hits.push(ranked[0].0);
        let mut sum = 0.0f64;
        for (n, &(r, _)) in ranked.iter().enumerate() {
            sum += (n + 1) as f64 / (r + 1) as f64;
        }
        aps.push(sum / ranked.len() as f64);
    }
    let valid = aps.len();
    let cmc = (0..ng)
        .map(|k| first_hits.iter().filter(|&&r| r <= k).count() as f64 / valid as f64)
        .collect();
    Brute {
        cmc,
        map: aps.iter().sum::<f64>() / valid as f64,
        skipped,
    }
}

/// Random instance with coarse distances (so ties occur) and few cameras.
pub fn instance(rng: &mut ChaCha8Rng, nq: usize, ng: usize) -> (Vec<f32>, Vec<Label>, Vec<Label>) {
    let ids = rng.random_range(2..12);
    let cams = rng.random_range(1..4);
    let levels = rng.random_range(3..50) as f32;
    let lab = |rng: &mut ChaCha8Rng| Label {
        identity: rng.random_range(0..ids),
        camera: rng.random_range(0..cams),
    };
    let q: Vec<Label> = (0..nq).map(|_| lab(rng)).collect();
    let mut g: Vec<Label> = (0..ng).map(|_| lab(rng)).collect();
    // Guarantee at least one valid query.
    g[0] = Label {
        identity: q[0].identity,
        camera: q[0].camera + 1,
    };
    let dist = (0..nq * ng).map(|_| (rng.random_range(0.0..1.0f32) * levels).floor() / levels).collect();
    (dist, q, g)
}

/// Number of instances on which `evaluate` and the brute force differ in any
/// CMC entry, mAP or skip count (exact comparison).
pub fn run(instances: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for i in 0..instances {
        let (nq, ng) = if i == 0 {
            (100, 500)
        } else {
            (rng.random_range(1..=100), rng.random_range(1..=500))
        };
        let (dist, q, g) = instance(&mut rng, nq, ng);
        let t = Tensor::new(&[nq, ng], dist.clone()).unwrap();
        let fast = evaluate(&t, &q, &g).unwrap();
        let slow = brute_force(&dist, nq, ng, &q, &g);
        if fast.cmc != slow.cmc || fast.map != slow.map || fast.num_skipped != slow.skipped {
            mismatches += 1;
        }
    }
    mismatches
}
