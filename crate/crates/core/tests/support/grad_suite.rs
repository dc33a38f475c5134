//! Finite-difference checks of every tape op, every loss and a small
//! transformer, on random 64-bit instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use versreid_core::gradcheck::{max_relative_error, DEFAULT_STEP};
use versreid_core::loss::{
    batch_hard_triplet, cross_entropy, distill_variant, rkd_loss, stage1_loss, stage2_loss, DistillKind, LossConfig,
};
use versreid_core::model::{BranchKind, ModelConfig, PromptSel, ReidModel};
use versreid_core::mpda::symmetric_info_nce;
use versreid_core::{Image, Result, Tape, Tensor, Var};

pub const TOLERANCE: f64 = 1e-4;

/// Worst relative error of one op or loss over its instances.
pub struct Check {
    pub name: &'static str,
    pub instances: usize,
    pub worst: f64,
}

type Loss = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Uniform in `[-hi, -lo] U [lo, hi]`, away from kinks at zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(lo..hi);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Reduces a tensor output to a scalar with fixed random weights.
fn project(t: &mut Tape<f64>, out: Var, w: &[f64]) -> Result<Var> {
    let shape = t.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let wv = t.constant(Tensor::new(&shape, w[..n].to_vec())?);
    let p = t.mul(out, wv)?;
    Ok(t.sum(p))
}

fn weights(rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..512).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn normalized(r: &[Vec<f64>]) -> Vec<Vec<f64>> {
    r.iter()
        .map(|v| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / n).collect()
        })
        .collect()
}

/// True when hardest-pair choices and hinges sit at least `gap` away from
/// ties and kinks, so central differences see a smooth function.
fn triplet_smooth(f: &[Vec<f64>], ids: &[usize], margin: f64, gap: f64) -> bool {
    let b = f.len();
    let d = |i: usize, j: usize| f[i].iter().zip(&f[j]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    for a in 0..b {
        let mut pos: Vec<f64> = (0..b).filter(|&j| j != a && ids[j] == ids[a]).map(|j| d(a, j)).collect();
        let mut neg: Vec<f64> = (0..b).filter(|&j| ids[j] != ids[a]).map(|j| d(a, j)).collect();
        pos.sort_by(|x, y| y.total_cmp(x));
        neg.sort_by(|x, y| x.total_cmp(y));
        if pos.len() > 1 && pos[0] - pos[1] < gap {
            return false;
        }
        if neg.len() > 1 && neg[1] - neg[0] < gap {
            return false;
        }
        if (pos[0] - neg[0] + margin).abs() < gap {
            return false;
        }
    }
    true
}

fn pk_ids(p: usize, k: usize) -> Vec<usize> {
    (0..p * k).map(|i| i / k).collect()
}

fn smooth_feats(rng: &mut ChaCha8Rng, ids: &[usize], d: usize, margin: f64, norm: bool) -> Tensor<f64> {
    loop {
        let f = uniform(rng, &[ids.len(), d], -1.0, 1.0);
        let r = rows(&f);
        let r = if norm { normalized(&r) } else { r };
        if triplet_smooth(&r, ids, margin, 2e-2) {
            return f;
        }
    }
}

fn softmax_input(t: &mut Tape<f64>, logits: Var) -> Result<Var> {
    t.softmax_rows(logits)
}

fn tiny_model(rng: &mut ChaCha8Rng) -> ReidModel {
    let cfg = ModelConfig {
        img_height: 8,
        img_width: 8,
        patch_size: 4,
        patch_stride: 4,
        embed_dim: 8,
        depth: 1,
        num_heads: 2,
        mlp_ratio: 2,
        num_scenes: 2,
        prompts_per_scene: 1,
        num_versatile: 2,
        num_classes: 3,
    };
    ReidModel::new(cfg, BranchKind::Bank, rng).unwrap()
}

/// One random instance: inputs plus the scalar function of them.
fn instance(name: &str, rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Loss) {
    let w = weights(rng);
    let proj = move |t: &mut Tape<f64>, v: Var| project(t, v, &w);
    match name {
        "matmul" => (
            vec![uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[4, 2], -1.0, 1.0)],
            Box::new(move |t, v| {
                let o = t.matmul(v[0], v[1])?;
                proj(t, o)
            }),
        ),
        "add" | "sub" | "mul" => {
            let op = name.to_string();
            (
                vec![uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[3, 4], -1.0, 1.0)],
                Box::new(move |t, v| {
                    let o = match op.as_str() {
                        "add" => t.add(v[0], v[1])?,
                        "sub" => t.sub(v[0], v[1])?,
                        _ => t.mul(v[0], v[1])?,
                    };
                    proj(t, o)
                }),
            )
        }
        "add_bias" => (
            vec![uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[4], -1.0, 1.0)],
            Box::new(move |t, v| {
                let o = t.add_bias(v[0], v[1])?;
                proj(t, o)
            }),
        ),
        "scale" => (
            vec![uniform(rng, &[3, 4], -1.0, 1.0)],
            Box::new(move |t, v| {
                let o = t.scale(v[0], 1.7);
                proj(t, o)
            }),
        ),
        "reshape" => (
            vec![uniform(rng, &[3, 4], -1.0, 1.0)],
            Box::new(move |t, v| {
                let o = t.reshape(v[0], &[2, 6])?;
                proj(t, o)
            }),
        ),
        "transpose" => (
            vec![uniform(rng, &[3, 4], -1.0, 1.0)],
            Box::new(move |t, v| {
                let o = t.transpose(v[0])?;
                proj(t, o)
            }),
        ),
        "concat_rows" => (
            vec![uniform(rng, &[2, 3], -1.0, 1.0), uniform(rng, &[1, 3], -1.0, 1.0)],
            Box::new(move |t, v| {
                let o = t.concat_rows(&[v[0], v[1], v[0]])?;
                proj(t, o)
            }),
        ),
        "concat_cols" => (
            vec![uniform(rng, &[3, 2], -1.0, 1.0), uniform(rng, &[3, 3], -1.0, 1.0)],
            Box::new(move |t, v| {
                let o = t.concat_cols(&[v[0], v[1]])?;
                proj(t, o)
            }),
        ),
        "slice_rows" => (
            vec![uniform(rng, &[4, 3], -1.0, 1.0)],
            Box::new(move |t, v| {
                let o = t.slice_rows(v[0], 1, 2)?;
                proj(t, o)
            }),
        ),
        "slice_cols" => (
            vec![uniform(rng, &[3, 5], -1.0, 1.0)],
            Box::new(move |t, v| {
                let o = t.slice_cols(v[0], 2, 3)?;
                proj(t, o)
            }),
        ),
        "softmax_rows" => (
            vec![uniform(rng, &[3, 5], -2.0, 2.0)],
            Box::new(move |t, v| {
                let o = t.softmax_rows(v[0])?;
                proj(t, o)
            }),
        ),
        "layer_norm_rows" => (
            vec![
                uniform(rng, &[3, 6], -2.0, 2.0),
                uniform(rng, &[6], 0.5, 1.5),
                uniform(rng, &[6], -0.5, 0.5),
            ],
            Box::new(move |t, v| {
                let o = t.layer_norm_rows(v[0], v[1], v[2])?;
                proj(t, o)
            }),
        ),
        "gelu" => (
            vec![uniform(rng, &[3, 4], -3.0, 3.0)],
            Box::new(move |t, v| {
                let o = t.gelu(v[0]);
                proj(t, o)
            }),
        ),
        "gather_rows" => (
            vec![uniform(rng, &[5, 3], -1.0, 1.0)],
            Box::new(move |t, v| {
                let o = t.gather_rows(v[0], &[4, 0, 4, 2])?;
                proj(t, o)
            }),
        ),
        "pick" => (
            vec![uniform(rng, &[3, 4], -1.0, 1.0)],
            Box::new(move |t, v| {
                let o = t.pick(v[0], &[0, 5, 11, 5])?;
                proj(t, o)
            }),
        ),
        "sum" => (
            vec![uniform(rng, &[3, 4], -1.0, 1.0)],
            Box::new(move |t, v| {
                let s = t.mul(v[0], v[0])?;
                Ok(t.sum(s))
            }),
        ),
        "mean" => (
            vec![uniform(rng, &[3, 4], -1.0, 1.0)],
            Box::new(move |t, v| {
                let s = t.mul(v[0], v[0])?;
                t.mean(s)
            }),
        ),
        "row_sum" => (
            vec![uniform(rng, &[3, 4], -1.0, 1.0)],
            Box::new(move |t, v| {
                let o = t.row_sum(v[0])?;
                proj(t, o)
            }),
        ),
        "pairwise_sq_dist" => (
            vec![uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[2, 4], -1.0, 1.0)],
            Box::new(move |t, v| {
                let o = t.pairwise_sq_dist(v[0], v[1])?;
                proj(t, o)
            }),
        ),
        "log" | "sqrt" => {
            let op = name.to_string();
            (
                vec![uniform(rng, &[3, 4], 0.2, 2.0)],
                Box::new(move |t, v| {
                    let o = if op == "log" { t.log(v[0]) } else { t.sqrt(v[0]) };
                    proj(t, o)
                }),
            )
        }
        "abs" | "relu" => {
            let op = name.to_string();
            (
                vec![away_from_zero(rng, &[3, 4], 0.05, 1.0)],
                Box::new(move |t, v| {
                    let o = if op == "abs" { t.abs(v[0]) } else { t.relu(v[0]) };
                    proj(t, o)
                }),
            )
        }
        "l2_normalize_rows" => (
            vec![uniform(rng, &[3, 4], -1.0, 1.0)],
            Box::new(move |t, v| {
                let o = t.l2_normalize_rows(v[0])?;
                proj(t, o)
            }),
        ),
        "cross_entropy" => {
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
            (
                vec![uniform(rng, &[4, 5], -2.0, 2.0)],
                Box::new(move |t, v| {
                    let p = softmax_input(t, v[0])?;
                    cross_entropy(t, p, &labels)
                }),
            )
        }
        "batch_hard_triplet" => {
            let ids = pk_ids(3, 2);
            let f = smooth_feats(rng, &ids, 3, 0.3, false);
            (vec![f], Box::new(move |t, v| batch_hard_triplet(t, v[0], &ids, 0.3)))
        }
        "rkd_loss" => (
            vec![uniform(rng, &[4, 3], -1.0, 1.0), uniform(rng, &[4, 3], -1.0, 1.0)],
            Box::new(move |t, v| rkd_loss(t, v[0], v[1])),
        ),
        "distill_l1" | "distill_l2" => {
            let kind = if name == "distill_l1" { DistillKind::L1 } else { DistillKind::L2 };
            let s = uniform(rng, &[3, 4], -1.0, 1.0);
            let gap = away_from_zero(rng, &[3, 4], 0.05, 0.5);
            let teacher: Vec<f64> = s.data().iter().zip(gap.data()).map(|(a, g)| a + g).collect();
            let teacher = Tensor::new(&[3, 4], teacher).unwrap();
            (
                vec![s, teacher],
                Box::new(move |t, v| distill_variant(t, kind, v[0], v[1], None, None, 1.0)),
            )
        }
        "distill_kl" | "distill_kl_tau2" => {
            let tau = if name == "distill_kl" { 1.0 } else { 2.0 };
            (
                vec![uniform(rng, &[3, 4], -2.0, 2.0), uniform(rng, &[3, 4], -2.0, 2.0)],
                Box::new(move |t, v| {
                    let sp = t.softmax_rows(v[0])?;
                    let tp = t.softmax_rows(v[1])?;
                    let dummy = t.constant(Tensor::zeros(&[3, 2]));
                    distill_variant(t, DistillKind::Kl, dummy, dummy, Some(sp), Some(tp), tau)
                }),
            )
        }
        "stage1_loss" => {
            let ids = pk_ids(2, 2);
            let f = smooth_feats(rng, &ids, 4, 0.3, true);
            let cfg = LossConfig::default();
            (
                vec![f, uniform(rng, &[4, 3], -2.0, 2.0)],
                Box::new(move |t, v| {
                    let p = t.softmax_rows(v[1])?;
                    Ok(stage1_loss(t, v[0], p, &ids, &cfg)?.total)
                }),
            )
        }
        "stage2_loss" => {
            let ids = pk_ids(2, 2);
            let f = smooth_feats(rng, &ids, 4, 0.3, true);
            let teacher = uniform(rng, &[4, 4], -1.0, 1.0);
            let cfg = LossConfig::default();
            (
                vec![f, uniform(rng, &[4, 3], -2.0, 2.0), teacher],
                Box::new(move |t, v| {
                    let p = t.softmax_rows(v[1])?;
                    Ok(stage2_loss(t, v[0], p, v[2], None, &ids, &cfg)?.total)
                }),
            )
        }
        "symmetric_info_nce" => (
            (0..4).map(|_| uniform(rng, &[3, 4], -1.0, 1.0)).collect(),
            Box::new(move |t, v| {
                let n: Vec<Var> = v.iter().map(|&x| t.l2_normalize_rows(x)).collect::<Result<_>>()?;
                symmetric_info_nce(t, n[0], n[1], n[2], n[3], 0.2)
            }),
        ),
        "transformer" => {
            let model = tiny_model(rng);
            let scene = rng.random_range(0..2);
            let data: Vec<f32> = (0..8 * 8 * 3).map(|_| rng.random::<f32>()).collect();
            let image = Image::new(8, 8, data).unwrap();
            // Fresh init has tiny activations, so layer norm divides by a very
            // small std and central differences at the fixed step lose accuracy.
            // Perturbing every parameter puts activations at unit scale.
            let inputs = model
                .params()
                .iter()
                .map(|(_, p)| {
                    let mut q = p.cast::<f64>();
                    for x in q.data_mut() {
                        *x += rng.random_range(-0.5..0.5);
                    }
                    q
                })
                .collect();
            let label = rng.random_range(0..3);
            (
                inputs,
                Box::new(move |t, v| {
                    let f = model.forward(t, v, &image, PromptSel::Scene(scene))?;
                    let pf = proj(t, f.feature)?;
                    let ce = cross_entropy(t, f.probs.expect("bank head"), &[label])?;
                    t.add(pf, ce)
                }),
            )
        }
        other => panic!("no gradient case `{other}`"),
    }
}

/// Every checked op and loss, in report order.
pub const CASES: &[&str] = &[
    "matmul",
    "add",
    "sub",
    "mul",
    "add_bias",
    "scale",
    "reshape",
    "transpose",
    "concat_rows",
    "concat_cols",
    "slice_rows",
    "slice_cols",
    "softmax_rows",
    "layer_norm_rows",
    "gelu",
    "gather_rows",
    "pick",
    "sum",
    "mean",
    "row_sum",
    "pairwise_sq_dist",
    "log",
    "sqrt",
    "abs",
    "relu",
    "l2_normalize_rows",
    "cross_entropy",
    "batch_hard_triplet",
    "rkd_loss",
    "distill_l1",
    "distill_l2",
    "distill_kl",
    "distill_kl_tau2",
    "stage1_loss",
    "stage2_loss",
    "symmetric_info_nce",
    "transformer",
];

pub fn run(instances: usize, seed: u64) -> Vec<Check> {
    CASES
        .iter()
        .enumerate()
        .map(|(ci, &name)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(ci as u64);
            let mut worst = 0.0f64;
            for _ in 0..instances {
                let (inputs, f) = instance(name, &mut rng);
                let e = max_relative_error(&inputs, DEFAULT_STEP, |t, v| f(t, v)).unwrap();
                worst = worst.max(e);
            }
            Check {
                name,
                instances,
                worst,
            }
        })
        .collect()
}
