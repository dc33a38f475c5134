//! The run modes: pretraining, bank training, distillation and evaluation.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use versreid_core::eval::{evaluate_by_scene, ClassifierDraws, EvalRow};
use versreid_core::image::Image;
use versreid_core::loss::LossConfig;
use versreid_core::model::{init_vbranch_from_bank, BranchKind, ModelConfig, PromptSel, ReidModel};
use versreid_core::mpda::{contrastive_step, sample_view_pair, ViewKind};
use versreid_core::optim::SgdMomentum;
use versreid_core::scene::{PkSampler, Sample, SampleMeta, Scene, Split};
use versreid_core::train::{bank_step, random_flip, vbranch_step, LrSchedule, StepStats, TrainItem};
use versreid_core::Tensor;

use crate::checkpoint::{params_hash, Checkpoint};
use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::report::{EvalReport, LogRecord, ReportRow, TrainLog};

/// Each stage draws from its own stream of the run seed.
const STREAM_PRETRAIN: u64 = 1;
const STREAM_BANK: u64 = 2;
const STREAM_DISTILL: u64 = 3;
const STREAM_EVAL: u64 = 4;

fn stage_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Caps rayon's pool at `VERSREID_THREADS` if set. Call once at start-up.
pub fn init_threads() {
    if let Some(n) = std::env::var("VERSREID_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::debug!("thread pool already initialized: {e}");
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ensemble {
    /// Prompts of the predicted scene.
    Hard,
    /// Probability-weighted sum of all groups' normalized features.
    Soft,
    /// Concatenation of all groups' normalized features.
    Concat,
}

impl Ensemble {
    pub fn as_str(self) -> &'static str {
        match self {
            Ensemble::Hard => "hard",
            Ensemble::Soft => "soft",
            Ensemble::Concat => "concat",
        }
    }
}

impl FromStr for Ensemble {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(Ensemble::Hard),
            "soft" => Ok(Ensemble::Soft),
            "concat" => Ok(Ensemble::Concat),
            _ => Err(Error::Data(format!("unknown ensemble `{s}`"))),
        }
    }
}

pub fn branch_name(kind: BranchKind) -> &'static str {
    match kind {
        BranchKind::Bank => "bank",
        BranchKind::VBranch => "vbranch",
        BranchKind::Encoder => "encoder",
    }
}

/// Model shape for a dataset: checks scene labels and sets the class count.
pub fn model_config(cfg: &RunConfig, data: &Dataset) -> Result<ModelConfig> {
    if let Some(r) = data.manifest.records.iter().find(|r| r.meta.scene >= cfg.model.num_scenes) {
        return Err(Error::Data(format!(
            "{}: scene {} outside the configured {} scenes",
            r.file, r.meta.scene, cfg.model.num_scenes
        )));
    }
    let mc = ModelConfig {
        num_classes: data.num_identities(),
        ..cfg.model.clone()
    };
    mc.validate()?;
    Ok(mc)
}

fn train_samples(data: &Dataset) -> Result<Vec<&Sample>> {
    let train = data.split(Split::Train);
    if train.is_empty() {
        return Err(Error::Data(format!("{}: no training images", data.root.display())));
    }
    Ok(train)
}

fn fresh_state(rng: &mut ChaCha8Rng) -> [u8; 32] {
    rng.random()
}

/// Saves an intermediate checkpoint next to `out` as `<out>.epN`.
fn save_periodic(out: &Path, epoch: usize, ckpt: &Checkpoint) -> Result<()> {
    let mut s = out.as_os_str().to_owned();
    s.push(format!(".ep{epoch}"));
    ckpt.save(&PathBuf::from(s))
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub hash: String,
    pub epoch_losses: Vec<f32>,
    /// Views rendered per kind, indexed by `ViewKind::index`.
    pub view_counts: [usize; 6],
}

/// Contrastive pretraining of an unprompted encoder on the training images
/// (labels unused). `mpda = false` restricts views to unchanged and lighting.
pub fn run_pretrain(cfg: &RunConfig, data: &Dataset, mpda: bool, out: &Path) -> Result<PretrainOutcome> {
    let mc = model_config(cfg, data)?;
    let corpus: Vec<&Image> = train_samples(data)?.iter().map(|s| &s.image).collect();
    let donors: Vec<Image> = corpus.iter().map(|&i| i.clone()).collect();
    let kinds: &[ViewKind] = if mpda { &ViewKind::ALL } else { &ViewKind::BASELINE };
    let mut rng = stage_rng(cfg.seed, STREAM_PRETRAIN);
    let mut encoder = ReidModel::new(mc, BranchKind::Encoder, &mut rng)?;
    let mut momentum = encoder.clone();
    let mut opt = SgdMomentum::new(encoder.params(), cfg.momentum, cfg.weight_decay);
    let steps = corpus.len().div_ceil(cfg.pretrain_batch);
    let sched = LrSchedule {
        base: cfg.pretrain_lr,
        warmup_steps: steps.max(1),
        total_steps: steps * cfg.pretrain_epochs,
    };
    let mut log = TrainLog::create(out)?;
    let mut view_counts = [0usize; 6];
    let mut epoch_losses = Vec::with_capacity(cfg.pretrain_epochs);
    let mut step = 0;
    for epoch in 0..cfg.pretrain_epochs {
        let mut sum = 0.0;
        for _ in 0..steps {
            let mut pairs = Vec::with_capacity(cfg.pretrain_batch);
            for _ in 0..cfg.pretrain_batch {
                let img = corpus[rng.random_range(0..corpus.len())];
                let v = sample_view_pair(img, &donors, kinds, &cfg.aug, &mut rng)?;
                view_counts[v.kinds.0.index()] += 1;
                view_counts[v.kinds.1.index()] += 1;
                pairs.push((v.a, v.b));
            }
            opt.lr = sched.at(step);
            let loss = contrastive_step(&mut encoder, &mut momentum, &mut opt, &pairs, cfg.tau, cfg.ema)?;
            if !loss.is_finite() {
                return Err(versreid_core::Error::NonFinite("contrastive loss".into()).into());
            }
            log.record(&LogRecord {
                stage: "pretrain".into(),
                epoch,
                step,
                lr: opt.lr,
                loss,
                triplet: None,
                cls: None,
                distill: None,
            })?;
            sum += loss;
            step += 1;
        }
        epoch_losses.push(sum / steps as f32);
        log::info!("pretrain epoch {epoch}: info-nce {:.4}", sum / steps as f32);
        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
            let c = Checkpoint::from_model(&encoder, Some(&opt), step as u64, fresh_state(&mut rng));
            save_periodic(out, epoch + 1, &c)?;
        }
    }
    log.finish()?;
    let checkpoint = Checkpoint::from_model(&encoder, None, step as u64, fresh_state(&mut rng));
    checkpoint.save(out)?;
    Ok(PretrainOutcome {
        hash: checkpoint.hash(),
        checkpoint,
        epoch_losses,
        view_counts,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub hash: String,
    /// Mean total loss per epoch.
    pub epoch_losses: Vec<f32>,
    /// Mean distillation term per epoch (distillation only).
    pub epoch_distill: Vec<f32>,
}

enum Event<'b, 'c> {
    Step { lr: f32, batch: &'b [TrainItem<'c>] },
    /// End of a checkpointing epoch (1-based).
    Save(usize),
}

struct Loop<'a> {
    cfg: &'a RunConfig,
    train: Vec<&'a Sample>,
    sampler: PkSampler,
    steps: usize,
    sched: LrSchedule,
}

impl<'a> Loop<'a> {
    fn new(cfg: &'a RunConfig, data: &'a Dataset, epochs: usize) -> Result<Self> {
        let train = train_samples(data)?;
        let labels: Vec<usize> = train.iter().map(|s| s.meta.identity).collect();
        let sampler = PkSampler::new(&labels, cfg.p, cfg.k)?;
        let steps = train.len().div_ceil(sampler.batch_size());
        let sched = LrSchedule {
            base: cfg.lr,
            warmup_steps: (steps * cfg.warmup_epochs).max(1),
            total_steps: steps * epochs,
        };
        Ok(Loop {
            cfg,
            train,
            sampler,
            steps,
            sched,
        })
    }

    /// One PK batch, each image flipped at random.
    fn batch(&self, rng: &mut ChaCha8Rng) -> Vec<(Image, SampleMeta)> {
        self.sampler
            .sample(rng)
            .into_iter()
            .map(|i| (random_flip(&self.train[i].image, rng), self.train[i].meta))
            .collect()
    }

    /// Runs `epochs` epochs of `step_fn`, logging every step.
    fn run<F>(&self, stage: &str, epochs: usize, rng: &mut ChaCha8Rng, out: &Path, mut step_fn: F) -> Result<(Vec<f32>, Vec<f32>, usize)>
    where
        F: FnMut(Event<'_, '_>, &mut ChaCha8Rng) -> Result<Option<StepStats>>,
    {
        let mut log = TrainLog::create(out)?;
        let mut losses = Vec::with_capacity(epochs);
        let mut distill = Vec::new();
        let mut step = 0;
        for epoch in 0..epochs {
            let (mut sum, mut kd) = (0.0f32, 0.0f32);
            for _ in 0..self.steps {
                let batch = self.batch(rng);
                let items: Vec<TrainItem> = batch
                    .iter()
                    .map(|(image, m)| TrainItem {
                        image,
                        identity: m.identity,
                        scene: m.scene,
                    })
                    .collect();
                let lr = self.sched.at(step);
                let st = step_fn(Event::Step { lr, batch: &items }, rng)?.expect("steps report stats");
                log.record(&LogRecord {
                    stage: stage.into(),
                    epoch,
                    step,
                    lr,
                    loss: st.total,
                    triplet: Some(st.triplet),
                    cls: Some(st.cls),
                    distill: st.distill,
                })?;
                sum += st.total;
                kd += st.distill.unwrap_or(0.0);
                step += 1;
            }
            let n = self.steps as f32;
            losses.push(sum / n);
            distill.push(kd / n);
            log::info!("{stage} epoch {epoch}: loss {:.4}", sum / n);
            if self.cfg.checkpoint_every > 0 && (epoch + 1) % self.cfg.checkpoint_every == 0 {
                step_fn(Event::Save(epoch + 1), rng)?;
            }
        }
        log.finish()?;
        Ok((losses, distill, step))
    }
}

/// Stage 1: scene-prompted bank on mixed-scene PK batches. `init` supplies
/// backbone weights (e.g. a pretraining checkpoint). `limit_epochs` stops
/// early without changing the schedule.
pub fn run_train_bank(
    cfg: &RunConfig,
    data: &Dataset,
    init: Option<&Checkpoint>,
    out: &Path,
    limit_epochs: Option<usize>,
) -> Result<TrainOutcome> {
    let mc = model_config(cfg, data)?;
    let mut rng = stage_rng(cfg.seed, STREAM_BANK);
    let mut model = ReidModel::new(mc, BranchKind::Bank, &mut rng)?;
    if let Some(init) = init {
        let src = init.to_model()?;
        let n = model.copy_backbone_from(src.params())?;
        log::info!("initialized {n} backbone tensors from checkpoint");
    }
    let mut opt = SgdMomentum::new(model.params(), cfg.momentum, cfg.weight_decay);
    let lp = Loop::new(cfg, data, cfg.epochs)?;
    let epochs = limit_epochs.unwrap_or(cfg.epochs).min(cfg.epochs);
    let loss_cfg = cfg.loss.clone();
    let mut done = 0u64;
    let (losses, _, steps) = lp.run("bank", epochs, &mut rng, out, |ev, rng| match ev {
        Event::Save(epoch) => {
            let c = Checkpoint::from_model(&model, Some(&opt), done, fresh_state(rng));
            save_periodic(out, epoch, &c)?;
            Ok(None)
        }
        Event::Step { lr, batch } => {
            opt.lr = lr;
            done += 1;
            Ok(Some(bank_step(&mut model, &mut opt, batch, &loss_cfg)?))
        }
    })?;
    let checkpoint = Checkpoint::from_model(&model, None, steps as u64, fresh_state(&mut rng));
    checkpoint.save(out)?;
    Ok(TrainOutcome {
        hash: checkpoint.hash(),
        checkpoint,
        epoch_losses: losses,
        epoch_distill: Vec::new(),
    })
}

/// Stage 2: V-Branch initialized from the bank's backbone, distilled from the
/// frozen bank. The bank's parameters are hashed before and after.
pub fn run_distill(cfg: &RunConfig, data: &Dataset, bank_ckpt: &Checkpoint, out: &Path) -> Result<TrainOutcome> {
    let teacher = bank_ckpt.to_model()?;
    if teacher.kind() != BranchKind::Bank {
        return Err(Error::Data(format!(
            "distillation needs a bank checkpoint, got a {} checkpoint",
            branch_name(teacher.kind())
        )));
    }
    let mc = model_config(cfg, data)?;
    if teacher.config() != &mc {
        return Err(Error::Data(format!(
            "bank checkpoint shape {:?} does not match config and data {:?}",
            teacher.config(),
            mc
        )));
    }
    let before = params_hash(teacher.params());
    let mut rng = stage_rng(cfg.seed, STREAM_DISTILL);
    let mut student = init_vbranch_from_bank(&teacher, &mut rng)?;
    let mut opt = SgdMomentum::new(student.params(), cfg.momentum, cfg.weight_decay);
    let lp = Loop::new(cfg, data, cfg.distill_epochs)?;
    let loss_cfg: LossConfig = cfg.loss.clone();
    let mut done = 0u64;
    let (losses, distill, steps) = lp.run("distill", cfg.distill_epochs, &mut rng, out, |ev, rng| match ev {
        Event::Save(epoch) => {
            let c = Checkpoint::from_model(&student, Some(&opt), done, fresh_state(rng));
            save_periodic(out, epoch, &c)?;
            Ok(None)
        }
        Event::Step { lr, batch } => {
            opt.lr = lr;
            done += 1;
            Ok(Some(vbranch_step(&mut student, Some(&teacher), &mut opt, batch, &loss_cfg)?))
        }
    })?;
    let after = params_hash(teacher.params());
    if before != after {
        return Err(Error::Data("bank parameters changed during distillation".into()));
    }
    let checkpoint = Checkpoint::from_model(&student, None, steps as u64, fresh_state(&mut rng));
    checkpoint.save(out)?;
    Ok(TrainOutcome {
        hash: checkpoint.hash(),
        checkpoint,
        epoch_losses: losses,
        epoch_distill: distill,
    })
}

fn l2_normalized(mut v: Vec<f32>) -> Vec<f32> {
    let n = v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in &mut v {
            *x = (*x as f64 / n) as f32;
        }
    }
    v
}

/// Feature of one sample. `pred` is the simulated classifier's scene and
/// `weights` its probabilities; both only matter for ensembles.
fn sample_feature(
    model: &ReidModel,
    s: &Sample,
    ensemble: Option<Ensemble>,
    pred: usize,
    weights: &[f64],
) -> Result<Vec<f32>> {
    let groups = model.config().num_scenes;
    let group = |g: usize| -> Result<Vec<f32>> { Ok(model.infer(&s.image, PromptSel::Scene(g))?.0) };
    Ok(match ensemble {
        None => model.infer(&s.image, model.default_selection(Some(s.meta.scene))?)?.0,
        Some(Ensemble::Hard) => group(pred)?,
        Some(Ensemble::Soft) => {
            let mut acc = vec![0.0f64; model.config().embed_dim];
            for (g, &w) in weights.iter().enumerate().take(groups) {
                for (a, x) in acc.iter_mut().zip(l2_normalized(group(g)?)) {
                    *a += w * x as f64;
                }
            }
            acc.into_iter().map(|a| a as f32).collect()
        }
        Some(Ensemble::Concat) => {
            let mut out = Vec::with_capacity(groups * model.config().embed_dim);
            for g in 0..groups {
                out.extend(l2_normalized(group(g)?));
            }
            out
        }
    })
}

/// Evaluation request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub branch: BranchKind,
    pub ensemble: Option<Ensemble>,
    /// Probability that the simulated scene classifier picks a wrong scene.
    pub classifier_noise: f64,
    /// Seeds the classifier simulation; reported in every row.
    pub seed: u64,
}

/// Per-scene and joint retrieval metrics on the query and gallery splits.
pub fn run_eval(data: &Dataset, ckpt: &Checkpoint, opts: &EvalOptions) -> Result<EvalReport> {
    let model = ckpt.to_model()?;
    if model.kind() != opts.branch {
        return Err(Error::Data(format!(
            "requested {} evaluation of a {} checkpoint",
            branch_name(opts.branch),
            branch_name(model.kind())
        )));
    }
    if model.kind() == BranchKind::Encoder {
        return Err(Error::Data("encoder checkpoints cannot be evaluated".into()));
    }
    if opts.ensemble.is_some() && opts.branch != BranchKind::Bank {
        return Err(Error::Data("prompt ensembles apply to the bank only".into()));
    }
    if !(0.0..=1.0).contains(&opts.classifier_noise) {
        return Err(Error::Data(format!(
            "classifier noise {} outside [0, 1]",
            opts.classifier_noise
        )));
    }
    let s = model.config().num_scenes;
    if let Some(m) = data.samples.iter().find(|x| x.meta.scene >= s) {
        return Err(Error::Data(format!("scene {} outside the model's {s} scenes", m.meta.scene)));
    }
    let query = data.split(Split::Query);
    let gallery = data.split(Split::Gallery);
    let all: Vec<&Sample> = query.iter().chain(&gallery).copied().collect();
    let (pred, weights): (Vec<usize>, Vec<Vec<f64>>) = match opts.ensemble {
        Some(Ensemble::Hard) | Some(Ensemble::Soft) if s >= 2 => {
            let truth: Vec<usize> = all.iter().map(|x| x.meta.scene).collect();
            let draws = ClassifierDraws::new(&truth, s, &mut stage_rng(opts.seed, STREAM_EVAL))?;
            let pred = draws.predict(opts.classifier_noise);
            let w = pred.iter().map(|&p| draws.soft_weights(p, opts.classifier_noise)).collect();
            (pred, w)
        }
        _ => (
            all.iter().map(|x| x.meta.scene).collect(),
            all.iter()
                .map(|x| (0..s).map(|g| if g == x.meta.scene { 1.0 } else { 0.0 }).collect())
                .collect(),
        ),
    };
    let feats = all
        .par_iter()
        .enumerate()
        .map(|(i, x)| sample_feature(&model, x, opts.ensemble, pred[i], &weights[i]))
        .collect::<Result<Vec<_>>>()?;
    let dim = feats.first().map_or(0, Vec::len);
    let to_tensor = |rows: &[Vec<f32>]| Tensor::new(&[rows.len(), dim], rows.concat());
    let qf = to_tensor(&feats[..query.len()])?;
    let gf = to_tensor(&feats[query.len()..])?;
    let qm: Vec<SampleMeta> = query.iter().map(|x| x.meta).collect();
    let gm: Vec<SampleMeta> = gallery.iter().map(|x| x.meta).collect();
    let names: Vec<&str> = Scene::ALL.iter().take(s).map(|x| x.as_str()).collect();
    let rows: Vec<EvalRow> = evaluate_by_scene(&names, &qf, &qm, &gf, &gm)?;
    let id = ckpt.hash();
    let rows = rows
        .iter()
        .map(|r| {
            let mut row = ReportRow::new(r, branch_name(opts.branch), &id, opts.seed);
            if let Some(e) = opts.ensemble {
                row.ensemble = Some(e.as_str().to_string());
                row.noise = Some(opts.classifier_noise);
            }
            row
        })
        .collect();
    Ok(EvalReport { rows })
}
