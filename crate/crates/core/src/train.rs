//! Single optimization steps for the bank and the V-Branch, plus the
//! warmup-then-cosine learning-rate schedule.

use alloc::vec::Vec;

#[allow(unused_imports)] // float math in no_std; shadowed by inherent methods on some toolchains
use num_traits::Float;
use rand::Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::loss::{stage1_loss, stage2_loss, LossConfig, LossTerms};
use crate::model::{BranchKind, PromptSel, ReidModel};
use crate::optim::SgdMomentum;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// One training image with its labels.
#[derive(Debug, Clone, Copy)]
pub struct TrainItem<'a> {
    pub image: &'a Image,
    pub identity: usize,
    pub scene: usize,
}

/// Scalar loss values of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub total: f32,
    pub triplet: f32,
    pub cls: f32,
    pub distill: Option<f32>,
}

/// Linear warmup from `base / warmup` to `base`, then cosine decay to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base: f32,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f32 {
        if step < self.warmup_steps {
            return self.base * (step + 1) as f32 / self.warmup_steps as f32;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let t = ((step - self.warmup_steps) as f32 / span as f32).min(1.0);
        self.base * 0.5 * (1.0 + (core::f32::consts::PI * t).cos())
    }
}

/// Horizontal flip with probability one half.
pub fn random_flip<R: Rng + ?Sized>(image: &Image, rng: &mut R) -> Image {
    if rng.random::<bool>() {
        image.flip_horizontal()
    } else {
        image.clone()
    }
}

fn stats(tape: &Tape<f32>, terms: &LossTerms) -> Result<StepStats> {
    let get = |v| tape.value(v).data()[0];
    let s = StepStats {
        total: get(terms.total),
        triplet: get(terms.triplet),
        cls: get(terms.cls),
        distill: terms.distill.map(get),
    };
    if !s.total.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok(s)
}

/// Loss and gradients of the bank on a batch, each image routed through the
/// prompts of its own scene.
pub fn bank_gradients(model: &ReidModel, batch: &[TrainItem<'_>], cfg: &LossConfig) -> Result<(StepStats, Vec<Option<Tensor>>)> {
    if model.kind() != BranchKind::Bank {
        return Err(Error::Argument("bank step on a non-bank model".into()));
    }
    let mut tape = Tape::<f32>::new();
    let vars = model.params().bind(&mut tape);
    let mut feats = Vec::with_capacity(batch.len());
    let mut probs = Vec::with_capacity(batch.len());
    for item in batch {
        let f = model.forward_bank(&mut tape, &vars, item.image, item.scene)?;
        feats.push(f.feature);
        probs.push(f.probs.expect("bank has a classifier"));
    }
    let feats = tape.concat_rows(&feats)?;
    let probs = tape.concat_rows(&probs)?;
    let ids: Vec<usize> = batch.iter().map(|b| b.identity).collect();
    let terms = stage1_loss(&mut tape, feats, probs, &ids, cfg)?;
    let st = stats(&tape, &terms)?;
    let mut grads = tape.backward(terms.total)?;
    Ok((st, vars.iter().map(|&v| grads.take(v)).collect()))
}

/// Teacher features and probabilities (`B x D`, `B x C`), each image through
/// its scene prompts.
pub fn teacher_outputs(teacher: &ReidModel, batch: &[TrainItem<'_>]) -> Result<(Tensor, Tensor)> {
    let mut f = Vec::new();
    let mut p = Vec::new();
    for item in batch {
        let (feat, probs) = teacher.infer(item.image, PromptSel::Scene(item.scene))?;
        f.extend(feat);
        p.extend(probs.ok_or_else(|| Error::Argument("teacher has no classifier".into()))?);
    }
    let b = batch.len();
    let (fd, pd) = (f.len() / b.max(1), p.len() / b.max(1));
    Ok((Tensor::new(&[b, fd], f)?, Tensor::new(&[b, pd], p)?))
}

/// Loss and gradients of the V-Branch on a batch. Scene labels are only used
/// by the teacher; with `alpha == 0` the teacher may be absent.
pub fn vbranch_gradients(
    student: &ReidModel,
    teacher: Option<&ReidModel>,
    batch: &[TrainItem<'_>],
    cfg: &LossConfig,
) -> Result<(StepStats, Vec<Option<Tensor>>)> {
    if student.kind() != BranchKind::VBranch {
        return Err(Error::Argument("distillation step on a non-vbranch model".into()));
    }
    let teacher_out = match (teacher, cfg.alpha == 0.0) {
        (_, true) => None,
        (Some(t), false) => Some(teacher_outputs(t, batch)?),
        (None, false) => return Err(Error::Argument("distillation with alpha > 0 needs a teacher".into())),
    };
    let mut tape = Tape::<f32>::new();
    let vars = student.params().bind(&mut tape);
    let mut feats = Vec::with_capacity(batch.len());
    let mut probs = Vec::with_capacity(batch.len());
    for item in batch {
        let f = student.forward_vbranch(&mut tape, &vars, item.image)?;
        feats.push(f.feature);
        probs.push(f.probs.expect("vbranch has a classifier"));
    }
    let feats = tape.concat_rows(&feats)?;
    let probs = tape.concat_rows(&probs)?;
    let ids: Vec<usize> = batch.iter().map(|b| b.identity).collect();
    let terms = match teacher_out {
        None => stage1_loss(&mut tape, feats, probs, &ids, cfg)?,
        Some((tf, tp)) => {
            let tf = tape.constant(tf);
            let tp = tape.constant(tp);
            stage2_loss(&mut tape, feats, probs, tf, Some(tp), &ids, cfg)?
        }
    };
    let st = stats(&tape, &terms)?;
    let mut grads = tape.backward(terms.total)?;
    Ok((st, vars.iter().map(|&v| grads.take(v)).collect()))
}

pub fn bank_step(model: &mut ReidModel, opt: &mut SgdMomentum, batch: &[TrainItem<'_>], cfg: &LossConfig) -> Result<StepStats> {
    let (st, grads) = bank_gradients(model, batch, cfg)?;
    opt.step(model.params_mut(), &grads)?;
    Ok(st)
}

pub fn vbranch_step(
    student: &mut ReidModel,
    teacher: Option<&ReidModel>,
    opt: &mut SgdMomentum,
    batch: &[TrainItem<'_>],
    cfg: &LossConfig,
) -> Result<StepStats> {
    let (st, grads) = vbranch_gradients(student, teacher, batch, cfg)?;
    opt.step(student.params_mut(), &grads)?;
    Ok(st)
}
