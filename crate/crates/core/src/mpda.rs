//! Multi-scene augmentation: six scene-simulating views, a two-view sampler,
//! and a momentum-contrastive pretraining step over view pairs.

use alloc::format;
use alloc::vec::Vec;

#[allow(unused_imports)] // float math in no_std; shadowed by inherent methods on some toolchains
use num_traits::Float;
use rand::seq::IndexedRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::image::{hsv_to_rgb, luminance, rgb_to_hsv, Image};
use crate::loss::cross_entropy;
use crate::model::{BranchKind, PromptSel, ReidModel};
use crate::optim::SgdMomentum;
use crate::params::ParamSet;
use crate::tape::Tape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ViewKind {
    Unchanged,
    Lighting,
    Blurred,
    ClothingChange,
    Occlusion,
    Grayscale,
}

impl ViewKind {
    pub const ALL: [ViewKind; 6] = [
        ViewKind::Unchanged,
        ViewKind::Lighting,
        ViewKind::Blurred,
        ViewKind::ClothingChange,
        ViewKind::Occlusion,
        ViewKind::Grayscale,
    ];

    /// Views available when the multi-scene views are switched off.
    pub const BASELINE: [ViewKind; 2] = [ViewKind::Unchanged, ViewKind::Lighting];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ViewKind::Unchanged => "unchanged",
            ViewKind::Lighting => "lighting",
            ViewKind::Blurred => "blurred",
            ViewKind::ClothingChange => "clothing_change",
            ViewKind::Occlusion => "occlusion",
            ViewKind::Grayscale => "grayscale",
        }
    }
}

/// Fractional rectangle `[y0, y1) x [x0, x1)` in image-relative coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionFrac {
    pub y0: f32,
    pub y1: f32,
    pub x0: f32,
    pub x1: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugConfig {
    pub brightness: (f32, f32),
    pub contrast: (f32, f32),
    pub blur_sigma: (f32, f32),
    pub occlusion_area: (f32, f32),
    /// Hue rotation range in degrees for the clothing-change stand-in.
    pub hue_shift: (f32, f32),
    pub torso: RegionFrac,
    /// Random crop-resize and horizontal flip before every view.
    pub geometric: bool,
    /// Crop area as a fraction of the image.
    pub crop_area: (f32, f32),
    pub flip_prob: f32,
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            brightness: (0.7, 1.3),
            contrast: (0.7, 1.3),
            blur_sigma: (0.8, 2.0),
            occlusion_area: (0.1, 0.4),
            hue_shift: (60.0, 300.0),
            torso: RegionFrac {
                y0: 0.25,
                y1: 0.6,
                x0: 0.15,
                x1: 0.85,
            },
            geometric: true,
            crop_area: (0.64, 1.0),
            flip_prob: 0.5,
        }
    }
}

impl AugConfig {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("blur_sigma", self.blur_sigma),
            ("occlusion_area", self.occlusion_area),
            ("hue_shift", self.hue_shift),
            ("crop_area", self.crop_area),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo <= hi) {
                return Err(Error::Config(format!("{name} range [{lo}, {hi}] is empty")));
            }
        }
        let (a0, a1) = self.occlusion_area;
        if !(a0 > 0.0 && a1 < 1.0) {
            return Err(Error::Config("occlusion area fraction must lie in (0, 1)".into()));
        }
        if !(self.crop_area.0 > 0.0 && self.crop_area.1 <= 1.0) {
            return Err(Error::Config("crop area fraction must lie in (0, 1]".into()));
        }
        if self.blur_sigma.0 <= 0.0 {
            return Err(Error::Config("blur sigma must be positive".into()));
        }
        Ok(())
    }
}

fn draw<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f32, f32)) -> f32 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Random crop (fixed aspect) resized back with bilinear sampling, then a
/// horizontal flip with probability `flip_prob`.
pub fn geometric_jitter<R: Rng + ?Sized>(image: &Image, cfg: &AugConfig, rng: &mut R) -> Image {
    let (h, w) = (image.height(), image.width());
    let scale = draw(rng, cfg.crop_area).sqrt();
    let ch = ((h as f32 * scale).round() as usize).clamp(1, h);
    let cw = ((w as f32 * scale).round() as usize).clamp(1, w);
    let top = rng.random_range(0..=h - ch);
    let left = rng.random_range(0..=w - cw);
    let mut out = image.clone();
    if ch != h || cw != w {
        for y in 0..h {
            let sy = top as f32 + (y as f32 + 0.5) * ch as f32 / h as f32 - 0.5;
            for x in 0..w {
                let sx = left as f32 + (x as f32 + 0.5) * cw as f32 / w as f32 - 0.5;
                out.set_pixel(y, x, image.sample_bilinear(sy, sx));
            }
        }
    }
    if rng.random::<f32>() < cfg.flip_prob {
        out = out.flip_horizontal();
    }
    out
}

/// `clamp((in - mean) * contrast + mean * brightness)`.
pub fn lighting(image: &Image, brightness: f32, contrast: f32) -> Image {
    let mean = image.mean();
    let mut out = image.clone();
    if brightness == 1.0 && contrast == 1.0 {
        return out;
    }
    for v in out.data_mut() {
        *v = ((*v - mean) * contrast + mean * brightness).clamp(0.0, 1.0);
    }
    out
}

/// Normalized 1-D Gaussian taps for radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * (sigma as f64).powi(2))).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k.into_iter().map(|v| v as f32).collect()
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
#[inline]
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let m = i.rem_euclid(2 * n);
    (if m >= n { 2 * n - 1 - m } else { m }) as usize
}

/// Separable Gaussian blur with reflected borders.
pub fn gaussian_blur(image: &Image, sigma: f32) -> Image {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (h, w) = (image.height(), image.width());
    let mut tmp = image.clone();
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for (t, &kv) in k.iter().enumerate() {
                let sx = reflect(x as i64 + t as i64 - r, w);
                let p = image.pixel(y, sx);
                for c in 0..3 {
                    acc[c] += kv * p[c];
                }
            }
            tmp.set_pixel(y, x, acc);
        }
    }
    let mut out = tmp.clone();
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for (t, &kv) in k.iter().enumerate() {
                let sy = reflect(y as i64 + t as i64 - r, h);
                let p = tmp.pixel(sy, x);
                for c in 0..3 {
                    acc[c] += kv * p[c];
                }
            }
            out.set_pixel(y, x, acc);
        }
    }
    out.clamp01();
    out
}

pub fn grayscale(image: &Image) -> Image {
    let mut out = image.clone();
    for y in 0..image.height() {
        for x in 0..image.width() {
            let l = luminance(image.pixel(y, x)).clamp(0.0, 1.0);
            out.set_pixel(y, x, [l; 3]);
        }
    }
    out
}

/// Integer pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl RegionFrac {
    pub fn to_rect(self, h: usize, w: usize) -> Rect {
        let y0 = ((self.y0 * h as f32).round() as usize).min(h);
        let y1 = ((self.y1 * h as f32).round() as usize).clamp(y0, h);
        let x0 = ((self.x0 * w as f32).round() as usize).min(w);
        let x1 = ((self.x1 * w as f32).round() as usize).clamp(x0, w);
        Rect {
            top: y0,
            left: x0,
            height: y1 - y0,
            width: x1 - x0,
        }
    }
}

/// Rotates hue by `degrees` inside `rect`.
pub fn recolor_region(image: &Image, rect: Rect, degrees: f32) -> Image {
    let mut out = image.clone();
    for y in rect.top..rect.top + rect.height {
        for x in rect.left..rect.left + rect.width {
            let (h, s, v) = rgb_to_hsv(image.pixel(y, x));
            out.set_pixel(y, x, hsv_to_rgb(h + degrees, s, v));
        }
    }
    out
}

/// Copies `src` of `donor` onto `image` with its top-left at `(top, left)`.
pub fn paste(image: &Image, donor: &Image, src: Rect, top: usize, left: usize) -> Image {
    let mut out = image.clone();
    for dy in 0..src.height {
        for dx in 0..src.width {
            out.set_pixel(top + dy, left + dx, donor.pixel(src.top + dy, src.left + dx));
        }
    }
    out
}

/// Rectangle size for an occluder covering `area` of an `h x w` image, with a
/// random aspect ratio in `[0.5, 2]`, clipped to the image.
pub fn occluder_size<R: Rng + ?Sized>(h: usize, w: usize, area: f32, rng: &mut R) -> (usize, usize) {
    let target = area * (h * w) as f32;
    let aspect = rng.random_range(0.5f32..=2.0);
    let rh = ((target * aspect).sqrt().round() as usize).clamp(1, h);
    let rw = ((target / rh as f32).round() as usize).clamp(1, w);
    (rh, rw)
}

/// Crop-and-paste occlusion. Returns the view and the pasted rectangle.
pub fn occlude<R: Rng + ?Sized>(image: &Image, donor: &Image, area: f32, rng: &mut R) -> (Image, Rect) {
    let (h, w) = (image.height(), image.width());
    let (mut rh, mut rw) = occluder_size(h, w, area, rng);
    rh = rh.min(donor.height());
    rw = rw.min(donor.width());
    let src = Rect {
        top: rng.random_range(0..=donor.height() - rh),
        left: rng.random_range(0..=donor.width() - rw),
        height: rh,
        width: rw,
    };
    let top = rng.random_range(0..=h - rh);
    let left = rng.random_range(0..=w - rw);
    let out = paste(image, donor, src, top, left);
    (
        out,
        Rect {
            top,
            left,
            height: rh,
            width: rw,
        },
    )
}

/// Applies the view-specific transform only (no geometric jitter).
pub fn apply_view<R: Rng + ?Sized>(
    image: &Image,
    kind: ViewKind,
    donor: Option<&Image>,
    cfg: &AugConfig,
    rng: &mut R,
) -> Result<Image> {
    let out = match kind {
        ViewKind::Unchanged => image.clone(),
        ViewKind::Lighting => {
            let b = draw(rng, cfg.brightness);
            let c = draw(rng, cfg.contrast);
            lighting(image, b, c)
        }
        ViewKind::Blurred => gaussian_blur(image, draw(rng, cfg.blur_sigma)),
        ViewKind::ClothingChange => {
            let rect = cfg.torso.to_rect(image.height(), image.width());
            recolor_region(image, rect, draw(rng, cfg.hue_shift))
        }
        ViewKind::Occlusion => {
            let donor = donor.ok_or_else(|| Error::Argument("occlusion view requires a donor image".into()))?;
            occlude(image, donor, draw(rng, cfg.occlusion_area), rng).0
        }
        ViewKind::Grayscale => grayscale(image),
    };
    Ok(out)
}

/// Geometric jitter (when enabled) followed by the view transform.
pub fn generate_view<R: Rng + ?Sized>(
    image: &Image,
    kind: ViewKind,
    donor: Option<&Image>,
    cfg: &AugConfig,
    rng: &mut R,
) -> Result<Image> {
    if kind == ViewKind::Occlusion && donor.is_none() {
        return Err(Error::Argument("occlusion view requires a donor image".into()));
    }
    let base = if cfg.geometric {
        geometric_jitter(image, cfg, rng)
    } else {
        image.clone()
    };
    apply_view(&base, kind, donor, cfg, rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub kinds: (ViewKind, ViewKind),
    pub a: Image,
    pub b: Image,
}

/// Draws two distinct view kinds uniformly from `kinds` and renders both.
pub fn sample_view_pair<R: Rng + ?Sized>(
    image: &Image,
    donors: &[Image],
    kinds: &[ViewKind],
    cfg: &AugConfig,
    rng: &mut R,
) -> Result<ViewPair> {
    if donors.is_empty() {
        return Err(Error::Argument("donor pool is empty".into()));
    }
    if kinds.len() < 2 {
        return Err(Error::Argument("need at least two view kinds".into()));
    }
    let i = rng.random_range(0..kinds.len());
    let mut j = rng.random_range(0..kinds.len() - 1);
    if j >= i {
        j += 1;
    }
    let (ka, kb) = (kinds[i], kinds[j]);
    let donor_a = donors.choose(rng).expect("nonempty");
    let a = generate_view(image, ka, Some(donor_a), cfg, rng)?;
    let donor_b = donors.choose(rng).expect("nonempty");
    let b = generate_view(image, kb, Some(donor_b), cfg, rng)?;
    Ok(ViewPair { kinds: (ka, kb), a, b })
}

/// `theta_m <- m * theta_m + (1 - m) * theta`, element-wise.
pub fn momentum_update(encoder: &ParamSet, momentum: &mut ParamSet, m: f32) -> Result<()> {
    if encoder.len() != momentum.len() {
        return Err(Error::Contract("encoder and momentum encoder differ in parameter count".into()));
    }
    for i in 0..encoder.len() {
        if encoder.get(i).shape() != momentum.get(i).shape() {
            return Err(Error::Shape {
                op: "momentum_update",
                lhs: encoder.get(i).shape().to_vec(),
                rhs: momentum.get(i).shape().to_vec(),
            });
        }
    }
    for i in 0..encoder.len() {
        let src = encoder.get(i).data();
        for (t, &s) in momentum.get_mut(i).data_mut().iter_mut().zip(src) {
            *t = m * *t + (1.0 - m) * s;
        }
    }
    Ok(())
}

/// Symmetric InfoNCE: query projections of each view against momentum keys of
/// the other view, in-batch negatives, averaged over both directions.
///
/// Returns the loss and the encoder gradients.
pub fn info_nce_gradients(
    encoder: &ReidModel,
    momentum: &ReidModel,
    pairs: &[(Image, Image)],
    tau: f64,
) -> Result<(f32, Vec<Option<crate::tensor::Tensor>>)> {
    if pairs.len() < 2 {
        return Err(Error::Argument("contrastive step needs a batch of at least 2 (no negatives)".into()));
    }
    if encoder.kind() != BranchKind::Encoder || momentum.kind() != BranchKind::Encoder {
        return Err(Error::Argument("contrastive step needs encoder models".into()));
    }
    let keys = |img: &Image| -> Result<Vec<f32>> {
        let mut t = Tape::<f32>::new();
        let v = momentum.params().bind_frozen(&mut t);
        let f = momentum.forward(&mut t, &v, img, PromptSel::Empty)?;
        Ok(t.value(f.projection.expect("encoder projects")).data().to_vec())
    };
    let b = pairs.len();
    let d = encoder.config().embed_dim;
    let mut ka = Vec::with_capacity(b * d);
    let mut kb = Vec::with_capacity(b * d);
    for (a, bb) in pairs {
        ka.extend(keys(a)?);
        kb.extend(keys(bb)?);
    }

    let mut tape = Tape::<f32>::new();
    let vars = encoder.params().bind(&mut tape);
    let mut qa = Vec::with_capacity(b);
    let mut qb = Vec::with_capacity(b);
    for (a, bb) in pairs {
        qa.push(encoder.forward(&mut tape, &vars, a, PromptSel::Empty)?.projection.expect("encoder"));
        qb.push(encoder.forward(&mut tape, &vars, bb, PromptSel::Empty)?.projection.expect("encoder"));
    }
    let qa = tape.concat_rows(&qa)?;
    let qb = tape.concat_rows(&qb)?;
    let ka = tape.constant(crate::tensor::Tensor::new(&[b, d], ka)?);
    let kb = tape.constant(crate::tensor::Tensor::new(&[b, d], kb)?);
    let loss = symmetric_info_nce(&mut tape, qa, qb, ka, kb, tau)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite("contrastive loss".into()));
    }
    let mut grads = tape.backward(loss)?;
    Ok((value, vars.iter().map(|&v| grads.take(v)).collect()))
}

/// `0.5 * (CE(qa kb^T / tau) + CE(qb ka^T / tau))` with diagonal targets.
pub fn symmetric_info_nce<T: crate::tensor::Real>(
    tape: &mut Tape<T>,
    qa: crate::tape::Var,
    qb: crate::tape::Var,
    ka: crate::tape::Var,
    kb: crate::tape::Var,
    tau: f64,
) -> Result<crate::tape::Var> {
    let b = tape.shape(qa)[0];
    let targets: Vec<usize> = (0..b).collect();
    let mut one_way = |q, k| -> Result<crate::tape::Var> {
        let kt = tape.transpose(k)?;
        let logits = tape.matmul(q, kt)?;
        let logits = tape.scale(logits, 1.0 / tau);
        let probs = tape.softmax_rows(logits)?;
        cross_entropy(tape, probs, &targets)
    };
    let l1 = one_way(qa, kb)?;
    let l2 = one_way(qb, ka)?;
    let s = tape.add(l1, l2)?;
    Ok(tape.scale(s, 0.5))
}

/// One contrastive update: gradient step on the encoder, then EMA of the
/// momentum encoder.
pub fn contrastive_step(
    encoder: &mut ReidModel,
    momentum: &mut ReidModel,
    opt: &mut SgdMomentum,
    pairs: &[(Image, Image)],
    tau: f64,
    ema: f32,
) -> Result<f32> {
    let (loss, grads) = info_nce_gradients(encoder, momentum, pairs, tau)?;
    opt.step(encoder.params_mut(), &grads)?;
    momentum_update(encoder.params(), momentum.params_mut(), ema)?;
    Ok(loss)
}
