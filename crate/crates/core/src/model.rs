//! Toy vision transformer with a scene-specific prompt pool (the bank) and a
//! versatile-prompt branch.
//!
//! Token layout fed to the blocks is `[cls; patches; prompts]`. Positional
//! encodings cover exactly the `1 + l` image positions; prompt rows are the raw
//! learnable vectors.

use alloc::format;
use alloc::string::{String, ToString};

use alloc::vec::Vec;

#[allow(unused_imports)] // float math in no_std; shadowed by inherent methods on some toolchains
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::params::ParamSet;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Std of the i.i.d. normal init for prompts, class token and positions.
pub const TOKEN_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub img_height: usize,
    pub img_width: usize,
    pub patch_size: usize,
    /// Equal to `patch_size` for the plain embedding; smaller for overlapping patches.
    pub patch_stride: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub num_scenes: usize,
    pub prompts_per_scene: usize,
    pub num_versatile: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            img_height: 32,
            img_width: 16,
            patch_size: 8,
            patch_stride: 8,
            embed_dim: 32,
            depth: 2,
            num_heads: 4,
            mlp_ratio: 4,
            num_scenes: 5,
            prompts_per_scene: 2,
            num_versatile: 5,
            num_classes: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.patch_stride == 0 {
            return bad("patch size and stride must be positive".into());
        }
        if self.img_height < self.patch_size || self.img_width < self.patch_size {
            return bad(format!(
                "image {}x{} smaller than patch {}",
                self.img_height, self.img_width, self.patch_size
            ));
        }
        if !(self.img_height - self.patch_size).is_multiple_of(self.patch_stride)
            || !(self.img_width - self.patch_size).is_multiple_of(self.patch_stride)
        {
            return bad(format!(
                "stride {} does not tile a {}x{} image with patch {}",
                self.patch_stride, self.img_height, self.img_width, self.patch_size
            ));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            ));
        }
        if self.num_scenes == 0 {
            return bad("at least one scene required".into());
        }
        if self.num_classes == 0 {
            return bad("at least one identity class required".into());
        }
        Ok(())
    }

    /// Patch grid `(rows, cols)`.
    pub fn grid(&self) -> (usize, usize) {
        (
            (self.img_height - self.patch_size) / self.patch_stride + 1,
            (self.img_width - self.patch_size) / self.patch_stride + 1,
        )
    }

    /// Number of image tokens `l`.
    pub fn num_patches(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * CHANNELS
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

/// Which prompt set and head a model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchKind {
    /// Scene-specific prompt pool, selected by scene label.
    Bank,
    /// Versatile prompts applied to every image.
    VBranch,
    /// Unprompted backbone with a projection head, for contrastive pretraining.
    Encoder,
}

impl BranchKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BranchKind::Bank => "bank",
            BranchKind::VBranch => "vbranch",
            BranchKind::Encoder => "encoder",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct BlockLayout {
    norm1: (usize, usize),
    qkv: (usize, usize),
    proj: (usize, usize),
    norm2: (usize, usize),
    fc1: (usize, usize),
    fc2: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    patch: (usize, usize),
    cls: usize,
    pos: usize,
    blocks: Vec<BlockLayout>,
    norm: (usize, usize),
    prompts: Option<usize>,
    neck: Option<(usize, usize)>,
    head: Option<(usize, usize)>,
    projector: Option<[(usize, usize); 2]>,
}

/// Prefixes of parameters that are not part of the shared backbone.
const NON_BACKBONE: [&str; 4] = ["prompts.", "neck.", "head.", "proj."];

pub fn is_backbone_param(name: &str) -> bool {
    !NON_BACKBONE.iter().any(|p| name.starts_with(p))
}

/// Outputs of one image's forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// Class-token row after the final norm (`1 x D`), before the neck.
    pub feature: Var,
    /// Classifier logits (`1 x C`), absent for the encoder.
    pub logits: Option<Var>,
    /// Softmax of `logits`.
    pub probs: Option<Var>,
    /// L2-normalized projection (`1 x D`), encoder only.
    pub projection: Option<Var>,
}

/// Prompt rows to append for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptSel {
    Scene(usize),
    Versatile,
    Empty,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReidModel {
    config: ModelConfig,
    kind: BranchKind,
    params: ParamSet,
    layout: Layout,
}

fn normal_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0f64, std).expect("valid std");
    let data = (0..n).map(|_| dist.sample(rng) as f32).collect();
    Tensor::new(shape, data).expect("consistent shape")
}

fn xavier<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
    let data = (0..fan_in * fan_out).map(|_| dist.sample(rng) as f32).collect();
    Tensor::new(&[fan_in, fan_out], data).expect("consistent shape")
}

fn linear<R: Rng + ?Sized>(
    ps: &mut ParamSet,
    rng: &mut R,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> (usize, usize) {
    let w = ps.push(format!("{name}.weight"), xavier(rng, fan_in, fan_out));
    let b = ps.push(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
    (w, b)
}

fn norm(ps: &mut ParamSet, name: &str, dim: usize) -> (usize, usize) {
    let w = ps.push(format!("{name}.weight"), Tensor::filled(&[dim], 1.0));
    let b = ps.push(format!("{name}.bias"), Tensor::zeros(&[dim]));
    (w, b)
}

impl ReidModel {
    /// Builds a freshly initialized model.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, kind: BranchKind, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let hidden = d * config.mlp_ratio;
        let mut ps = ParamSet::new();
        let patch = linear(&mut ps, rng, "patch_embed", config.patch_dim(), d);
        let cls = ps.push("cls_token", normal_tensor(rng, &[1, d], TOKEN_INIT_STD));
        let pos = ps.push(
            "pos_embed",
            normal_tensor(rng, &[1 + config.num_patches(), d], TOKEN_INIT_STD),
        );
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let p = format!("blocks.{i}");
            blocks.push(BlockLayout {
                norm1: norm(&mut ps, &format!("{p}.norm1"), d),
                qkv: linear(&mut ps, rng, &format!("{p}.attn.qkv"), d, 3 * d),
                proj: linear(&mut ps, rng, &format!("{p}.attn.proj"), d, d),
                norm2: norm(&mut ps, &format!("{p}.norm2"), d),
                fc1: linear(&mut ps, rng, &format!("{p}.mlp.fc1"), d, hidden),
                fc2: linear(&mut ps, rng, &format!("{p}.mlp.fc2"), hidden, d),
            });
        }
        let normf = norm(&mut ps, "norm", d);
        let mut layout = Layout {
            patch,
            cls,
            pos,
            blocks,
            norm: normf,
            prompts: None,
            neck: None,
            head: None,
            projector: None,
        };
        match kind {
            BranchKind::Bank | BranchKind::VBranch => {
                let (name, rows) = if kind == BranchKind::Bank {
                    ("prompts.scene", config.num_scenes * config.prompts_per_scene)
                } else {
                    ("prompts.versatile", config.num_versatile)
                };
                layout.prompts = Some(ps.push(name, normal_tensor(rng, &[rows, d], TOKEN_INIT_STD)));
                layout.neck = Some(norm(&mut ps, "neck", d));
                layout.head = Some(linear(&mut ps, rng, "head", d, config.num_classes));
            }
            BranchKind::Encoder => {
                layout.projector = Some([
                    linear(&mut ps, rng, "proj.fc1", d, 2 * d),
                    linear(&mut ps, rng, "proj.fc2", 2 * d, d),
                ]);
            }
        }
        Ok(ReidModel {
            config,
            kind,
            params: ps,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> BranchKind {
        self.kind
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Number of prompt rows this model appends for a forward pass.
    pub fn prompt_count(&self) -> usize {
        match self.kind {
            BranchKind::Bank => self.config.prompts_per_scene,
            BranchKind::VBranch => self.config.num_versatile,
            BranchKind::Encoder => 0,
        }
    }

    /// Replaces all parameters with `other`, which must carry the same names
    /// and shapes in the same order.
    pub fn load_params(&mut self, other: ParamSet) -> Result<()> {
        if other.len() != self.params.len() {
            return Err(Error::Config(format!(
                "{} parameters expected, got {}",
                self.params.len(),
                other.len()
            )));
        }
        for i in 0..other.len() {
            if other.name(i) != self.params.name(i) || other.get(i).shape() != self.params.get(i).shape() {
                return Err(Error::Config(format!(
                    "parameter {i}: expected `{}` {:?}, got `{}` {:?}",
                    self.params.name(i),
                    self.params.get(i).shape(),
                    other.name(i),
                    other.get(i).shape()
                )));
            }
        }
        self.params = other;
        Ok(())
    }

    /// Copies every backbone tensor from `src` (deep copy). Returns the count.
    pub fn copy_backbone_from(&mut self, src: &ParamSet) -> Result<usize> {
        let mut copied = 0;
        for i in 0..self.params.len() {
            let name = self.params.name(i).to_string();
            if !is_backbone_param(&name) {
                continue;
            }
            let t = src
                .by_name(&name)
                .ok_or_else(|| Error::Config(format!("source lacks backbone tensor `{name}`")))?;
            if t.shape() != self.params.get(i).shape() {
                return Err(Error::Config(format!(
                    "backbone tensor `{name}`: shape {:?} vs {:?}",
                    t.shape(),
                    self.params.get(i).shape()
                )));
            }
            *self.params.get_mut(i) = t.clone();
            copied += 1;
        }
        Ok(copied)
    }

    /// Unfolds an image into a `l x (patch*patch*3)` matrix, pixels mapped to `[-1, 1]`.
    pub fn patchify<T: Real>(&self, image: &Image) -> Result<Tensor<T>> {
        let c = &self.config;
        if image.height() != c.img_height || image.width() != c.img_width {
            return Err(Error::Config(format!(
                "image {}x{} does not match configured {}x{}",
                image.height(),
                image.width(),
                c.img_height,
                c.img_width
            )));
        }
        let (gh, gw) = c.grid();
        let p = c.patch_size;
        let mut out = Vec::with_capacity(gh * gw * c.patch_dim());
        for gy in 0..gh {
            for gx in 0..gw {
                for py in 0..p {
                    for px in 0..p {
                        let rgb = image.pixel(gy * c.patch_stride + py, gx * c.patch_stride + px);
                        out.extend(rgb.iter().map(|&v| T::of((v as f64 - 0.5) * 2.0)));
                    }
                }
            }
        }
        Tensor::new(&[gh * gw, c.patch_dim()], out)
    }

    /// Patch embedding, class token and positional encodings: `(1+l) x D`.
    pub fn serialize_image<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], image: &Image) -> Result<Var> {
        let patches = tape.constant(self.patchify(image)?);
        let (w, b) = self.layout.patch;
        let emb = tape.matmul(patches, vars[w])?;
        let emb = tape.add_bias(emb, vars[b])?;
        let seq = tape.concat_rows(&[vars[self.layout.cls], emb])?;
        tape.add(seq, vars[self.layout.pos])
    }

    /// Prompt rows for `sel`, or `None` when the selection is empty.
    pub fn select_prompts<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], sel: PromptSel) -> Result<Option<Var>> {
        match (self.kind, sel) {
            (_, PromptSel::Empty) => Ok(None),
            (BranchKind::Bank, PromptSel::Scene(s)) => {
                if s >= self.config.num_scenes {
                    return Err(Error::Index {
                        what: "scene label",
                        index: s,
                        len: self.config.num_scenes,
                    });
                }
                let n = self.config.prompts_per_scene;
                if n == 0 {
                    return Ok(None);
                }
                let pool = vars[self.layout.prompts.expect("bank has prompts")];
                let rows: Vec<usize> = (s * n..(s + 1) * n).collect();
                Ok(Some(tape.gather_rows(pool, &rows)?))
            }
            (BranchKind::VBranch, PromptSel::Versatile) => {
                if self.config.num_versatile == 0 {
                    return Ok(None);
                }
                Ok(Some(vars[self.layout.prompts.expect("vbranch has prompts")]))
            }
            (kind, sel) => Err(Error::Argument(format!(
                "prompt selection {sel:?} invalid for {}",
                kind.as_str()
            ))),
        }
    }

    /// Pre-norm transformer blocks with full self-attention over the sequence.
    pub fn transformer_forward<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], seq: Var) -> Result<Var> {
        let d = self.config.embed_dim;
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut x = seq;
        for b in &self.layout.blocks {
            let h = tape.layer_norm_rows(x, vars[b.norm1.0], vars[b.norm1.1])?;
            let qkv = tape.matmul(h, vars[b.qkv.0])?;
            let qkv = tape.add_bias(qkv, vars[b.qkv.1])?;
            let mut heads = Vec::with_capacity(self.config.num_heads);
            for hi in 0..self.config.num_heads {
                let q = tape.slice_cols(qkv, hi * hd, hd)?;
                let k = tape.slice_cols(qkv, d + hi * hd, hd)?;
                let v = tape.slice_cols(qkv, 2 * d + hi * hd, hd)?;
                let kt = tape.transpose(k)?;
                let att = tape.matmul(q, kt)?;
                let att = tape.scale(att, scale);
                let att = tape.softmax_rows(att)?;
                heads.push(tape.matmul(att, v)?);
            }
            let merged = tape.concat_cols(&heads)?;
            let out = tape.matmul(merged, vars[b.proj.0])?;
            let out = tape.add_bias(out, vars[b.proj.1])?;
            x = tape.add(x, out)?;

            let h = tape.layer_norm_rows(x, vars[b.norm2.0], vars[b.norm2.1])?;
            let m = tape.matmul(h, vars[b.fc1.0])?;
            let m = tape.add_bias(m, vars[b.fc1.1])?;
            let m = tape.gelu(m);
            let m = tape.matmul(m, vars[b.fc2.0])?;
            let m = tape.add_bias(m, vars[b.fc2.1])?;
            x = tape.add(x, m)?;
        }
        Ok(x)
    }

    /// Full forward pass for one image.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], image: &Image, sel: PromptSel) -> Result<Forward> {
        let tokens = self.serialize_image(tape, vars, image)?;
        let prompts = self.select_prompts(tape, vars, sel)?;
        let seq = assemble_sequence(tape, tokens, prompts)?;
        let out = self.transformer_forward(tape, vars, seq)?;
        let out = tape.layer_norm_rows(out, vars[self.layout.norm.0], vars[self.layout.norm.1])?;
        let feature = tape.slice_rows(out, 0, 1)?;

        let mut fwd = Forward {
            feature,
            logits: None,
            probs: None,
            projection: None,
        };
        if let (Some(neck), Some(head)) = (self.layout.neck, self.layout.head) {
            let z = tape.layer_norm_rows(feature, vars[neck.0], vars[neck.1])?;
            let logits = tape.matmul(z, vars[head.0])?;
            let logits = tape.add_bias(logits, vars[head.1])?;
            fwd.probs = Some(tape.softmax_rows(logits)?);
            fwd.logits = Some(logits);
        }
        if let Some([fc1, fc2]) = self.layout.projector {
            let h = tape.matmul(feature, vars[fc1.0])?;
            let h = tape.add_bias(h, vars[fc1.1])?;
            let h = tape.gelu(h);
            let h = tape.matmul(h, vars[fc2.0])?;
            let h = tape.add_bias(h, vars[fc2.1])?;
            fwd.projection = Some(tape.l2_normalize_rows(h)?);
        }
        Ok(fwd)
    }

    /// Bank forward: `{cls; E; P_scene}`.
    pub fn forward_bank<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], image: &Image, scene: usize) -> Result<Forward> {
        if self.kind != BranchKind::Bank {
            return Err(Error::Argument("forward_bank on a non-bank model".into()));
        }
        self.forward(tape, vars, image, PromptSel::Scene(scene))
    }

    /// V-Branch forward: `{cls; E; P^v}`. Takes no scene information.
    pub fn forward_vbranch<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], image: &Image) -> Result<Forward> {
        if self.kind != BranchKind::VBranch {
            return Err(Error::Argument("forward_vbranch on a non-vbranch model".into()));
        }
        self.forward(tape, vars, image, PromptSel::Versatile)
    }

    /// Inference-only feature and probabilities for one image.
    pub fn infer(&self, image: &Image, sel: PromptSel) -> Result<(Vec<f32>, Option<Vec<f32>>)> {
        let mut tape = Tape::<f32>::new();
        let vars = self.params.bind_frozen(&mut tape);
        let fwd = self.forward(&mut tape, &vars, image, sel)?;
        let f = tape.value(fwd.feature).data().to_vec();
        let p = fwd.probs.map(|p| tape.value(p).data().to_vec());
        Ok((f, p))
    }

    /// Default prompt selection for this branch given an optional scene label.
    pub fn default_selection(&self, scene: Option<usize>) -> Result<PromptSel> {
        match self.kind {
            BranchKind::Bank => scene
                .map(PromptSel::Scene)
                .ok_or_else(|| Error::Argument("bank inference requires scene labels".into())),
            BranchKind::VBranch => Ok(PromptSel::Versatile),
            BranchKind::Encoder => Ok(PromptSel::Empty),
        }
    }
}

/// Appends prompt rows after the image sequence.
pub fn assemble_sequence<T: Real>(tape: &mut Tape<T>, tokens: Var, prompts: Option<Var>) -> Result<Var> {
    match prompts {
        None => Ok(tokens),
        Some(p) if tape.shape(p).first() == Some(&0) => Ok(tokens),
        Some(p) => tape.concat_rows(&[tokens, p]),
    }
}

/// Creates a V-Branch whose backbone is a deep copy of the bank's, with fresh
/// versatile prompts, neck and classifier.
pub fn init_vbranch_from_bank<R: Rng + ?Sized>(bank: &ReidModel, rng: &mut R) -> Result<ReidModel> {
    if bank.kind() != BranchKind::Bank {
        return Err(Error::Config("V-Branch must be initialized from a bank".into()));
    }
    let mut vb = ReidModel::new(bank.config().clone(), BranchKind::VBranch, rng)?;
    vb.copy_backbone_from(bank.params())?;
    Ok(vb)
}
