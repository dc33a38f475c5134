//! Training objectives: identity cross-entropy, batch-hard triplet, relational
//! distillation and its variants, and the two stage composites.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistillKind {
    Rkd,
    L1,
    L2,
    Kl,
}

impl DistillKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DistillKind::Rkd => "rkd",
            DistillKind::L1 => "l1",
            DistillKind::L2 => "l2",
            DistillKind::Kl => "kl",
        }
    }
}

impl FromStr for DistillKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rkd" => Ok(DistillKind::Rkd),
            "l1" => Ok(DistillKind::L1),
            "l2" => Ok(DistillKind::L2),
            "kl" => Ok(DistillKind::Kl),
            other => Err(Error::Config(format!("unknown distillation kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub margin: f64,
    /// Weight of the distillation term in the stage-2 objective.
    pub alpha: f64,
    pub distill: DistillKind,
    pub kl_temperature: f64,
    /// Feed L2-normalized features to the triplet and feature-distillation
    /// terms. On raw features the triplet collapses every embedding to one
    /// point when training from scratch, and squared-distance relations grow
    /// with the feature scale until they swamp the identity terms.
    pub normalize_features: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: 0.3,
            alpha: 1.0,
            distill: DistillKind::Rkd,
            kl_temperature: 1.0,
            normalize_features: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0) {
            return Err(Error::Config("margin must be >= 0".into()));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config("alpha must be >= 0".into()));
        }
        if !(self.kl_temperature > 0.0) {
            return Err(Error::Config("kl temperature must be > 0".into()));
        }
        Ok(())
    }
}

fn batch_rows<T: Real>(tape: &Tape<T>, v: Var, what: &'static str) -> Result<(usize, usize)> {
    let s = tape.shape(v);
    if s.len() != 2 {
        return Err(Error::Shape {
            op: what,
            lhs: s.to_vec(),
            rhs: Vec::new(),
        });
    }
    Ok((s[0], s[1]))
}

/// Mean over the batch of `-ln p[y]`; probabilities at or below zero are
/// clamped to 1e-12.
pub fn cross_entropy<T: Real>(tape: &mut Tape<T>, probs: Var, labels: &[usize]) -> Result<Var> {
    let (b, c) = batch_rows(tape, probs, "cross_entropy")?;
    if labels.len() != b || b == 0 {
        return Err(Error::Shape {
            op: "cross_entropy",
            lhs: tape.shape(probs).to_vec(),
            rhs: alloc::vec![labels.len()],
        });
    }
    let mut flat = Vec::with_capacity(b);
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Index {
                what: "class label",
                index: y,
                len: c,
            });
        }
        flat.push(i * c + y);
    }
    let picked = tape.pick(probs, &flat)?;
    if tape.value(picked).data().iter().any(|&p| p <= T::zero()) {
        log::warn!("cross_entropy: target probability <= 0, clamped at 1e-12");
    }
    let logs = tape.log(picked);
    let m = tape.mean(logs)?;
    Ok(tape.scale(m, -1.0))
}

/// Batch-hard triplet loss on Euclidean distances between raw features.
///
/// Every identity present must have at least two samples and at least two
/// identities must be present.
pub fn batch_hard_triplet<T: Real>(tape: &mut Tape<T>, feats: Var, ids: &[usize], margin: f64) -> Result<Var> {
    let (b, _) = batch_rows(tape, feats, "batch_hard_triplet")?;
    if ids.len() != b {
        return Err(Error::Shape {
            op: "batch_hard_triplet",
            lhs: tape.shape(feats).to_vec(),
            rhs: alloc::vec![ids.len()],
        });
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &id in ids {
        *counts.entry(id).or_default() += 1;
    }
    if let Some((id, _)) = counts.iter().find(|(_, &n)| n < 2) {
        return Err(Error::Contract(format!("identity {id} has a single sample in the batch")));
    }
    if counts.len() < 2 {
        return Err(Error::Contract("batch contains fewer than two identities".into()));
    }

    let sq = tape.pairwise_sq_dist(feats, feats)?;
    let dist = tape.sqrt(sq);
    let d = tape.value(dist).data();
    let mut pos = Vec::with_capacity(b);
    let mut neg = Vec::with_capacity(b);
    for a in 0..b {
        let mut hp: Option<usize> = None;
        let mut hn: Option<usize> = None;
        for j in 0..b {
            if j == a {
                continue;
            }
            let v = d[a * b + j];
            if ids[j] == ids[a] {
                if hp.is_none_or(|k| v > d[a * b + k]) {
                    hp = Some(j);
                }
            } else if hn.is_none_or(|k| v < d[a * b + k]) {
                hn = Some(j);
            }
        }
        pos.push(a * b + hp.expect("positive exists"));
        neg.push(a * b + hn.expect("negative exists"));
    }
    let dp = tape.pick(dist, &pos)?;
    let dn = tape.pick(dist, &neg)?;
    let diff = tape.sub(dp, dn)?;
    let m = tape.constant(crate::tensor::Tensor::filled(&[b], T::of(margin)));
    let hinge = tape.add(diff, m)?;
    let hinge = tape.relu(hinge);
    tape.mean(hinge)
}

fn upper_pairs(b: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(b * (b - 1) / 2);
    for i in 0..b {
        for j in i + 1..b {
            out.push(i * b + j);
        }
    }
    out
}

/// Relational distillation: mean over unordered pairs of the squared gap
/// between student and teacher squared distances.
pub fn rkd_loss<T: Real>(tape: &mut Tape<T>, student: Var, teacher: Var) -> Result<Var> {
    let (bs, ds) = batch_rows(tape, student, "rkd_loss")?;
    let (bt, dt) = batch_rows(tape, teacher, "rkd_loss")?;
    if bs != bt {
        return Err(Error::Shape {
            op: "rkd_loss",
            lhs: alloc::vec![bs, ds],
            rhs: alloc::vec![bt, dt],
        });
    }
    if bs < 2 {
        return Err(Error::Argument(format!("rkd_loss needs a batch of at least 2, got {bs}")));
    }
    let pairs = upper_pairs(bs);
    let ds_ = tape.pairwise_sq_dist(student, student)?;
    let dt_ = tape.pairwise_sq_dist(teacher, teacher)?;
    let s = tape.pick(ds_, &pairs)?;
    let t = tape.pick(dt_, &pairs)?;
    let gap = tape.sub(s, t)?;
    let sq = tape.mul(gap, gap)?;
    tape.mean(sq)
}

fn tempered<T: Real>(tape: &mut Tape<T>, probs: Var, tau: f64) -> Result<Var> {
    if tau == 1.0 {
        return Ok(probs);
    }
    let l = tape.log(probs);
    let l = tape.scale(l, 1.0 / tau);
    tape.softmax_rows(l)
}

/// One of the four distillation objectives. `l1`/`l2` average per-sample
/// distances; `kl` averages KL(teacher || student) at temperature `tau`.
pub fn distill_variant<T: Real>(
    tape: &mut Tape<T>,
    kind: DistillKind,
    student_feats: Var,
    teacher_feats: Var,
    student_probs: Option<Var>,
    teacher_probs: Option<Var>,
    tau: f64,
) -> Result<Var> {
    match kind {
        DistillKind::Rkd => rkd_loss(tape, student_feats, teacher_feats),
        DistillKind::L1 | DistillKind::L2 => {
            let (b, _) = batch_rows(tape, student_feats, "distill")?;
            let diff = tape.sub(student_feats, teacher_feats)?;
            let per = if kind == DistillKind::L1 {
                let a = tape.abs(diff);
                tape.row_sum(a)?
            } else {
                let sq = tape.mul(diff, diff)?;
                let s = tape.row_sum(sq)?;
                tape.sqrt(s)
            };
            if b == 0 {
                return Err(Error::Argument("empty batch".into()));
            }
            tape.mean(per)
        }
        DistillKind::Kl => {
            let (Some(sp), Some(tp)) = (student_probs, teacher_probs) else {
                return Err(Error::Argument("kl distillation needs both probability sets".into()));
            };
            let (b, _) = batch_rows(tape, sp, "distill_kl")?;
            if tape.shape(sp) != tape.shape(tp) {
                return Err(Error::Shape {
                    op: "distill_kl",
                    lhs: tape.shape(sp).to_vec(),
                    rhs: tape.shape(tp).to_vec(),
                });
            }
            let s = tempered(tape, sp, tau)?;
            let t = tempered(tape, tp, tau)?;
            let ls = tape.log(s);
            let lt = tape.log(t);
            let gap = tape.sub(lt, ls)?;
            let w = tape.mul(t, gap)?;
            let total = tape.sum(w);
            Ok(tape.scale(total, 1.0 / b as f64))
        }
    }
}

/// Loss terms of one step, with the total as a tape variable.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub triplet: Var,
    pub cls: Var,
    pub distill: Option<Var>,
}

/// `L_tri + L_cls`.
pub fn stage1_loss<T: Real>(tape: &mut Tape<T>, feats: Var, probs: Var, ids: &[usize], cfg: &LossConfig) -> Result<LossTerms> {
    let tri_in = if cfg.normalize_features {
        tape.l2_normalize_rows(feats)?
    } else {
        feats
    };
    let triplet = batch_hard_triplet(tape, tri_in, ids, cfg.margin)?;
    let cls = cross_entropy(tape, probs, ids)?;
    let total = tape.add(triplet, cls)?;
    Ok(LossTerms {
        total,
        triplet,
        cls,
        distill: None,
    })
}

/// `L_tri + L_cls + alpha * L_kd`. With `alpha == 0` the distillation term is
/// not built, so the result is exactly the stage-1 loss of the student.
#[allow(clippy::too_many_arguments)]
pub fn stage2_loss<T: Real>(
    tape: &mut Tape<T>,
    feats: Var,
    probs: Var,
    teacher_feats: Var,
    teacher_probs: Option<Var>,
    ids: &[usize],
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let mut terms = stage1_loss(tape, feats, probs, ids, cfg)?;
    if cfg.alpha == 0.0 {
        return Ok(terms);
    }
    let (sf, tf) = if cfg.normalize_features && cfg.distill != DistillKind::Kl {
        (tape.l2_normalize_rows(feats)?, tape.l2_normalize_rows(teacher_feats)?)
    } else {
        (feats, teacher_feats)
    };
    let kd = distill_variant(
        tape,
        cfg.distill,
        sf,
        tf,
        Some(probs),
        teacher_probs,
        cfg.kl_temperature,
    )?;
    let weighted = tape.scale(kd, cfg.alpha);
    terms.total = tape.add(terms.total, weighted)?;
    terms.distill = Some(kd);
    Ok(terms)
}
