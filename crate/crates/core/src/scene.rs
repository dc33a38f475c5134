//! Procedural pedestrians rendered under five scene conditions, the dataset
//! split plan, and identity-balanced (PK) batch sampling.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

#[allow(unused_imports)] // float math in no_std; shadowed by inherent methods on some toolchains
use num_traits::Float;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{hsv_to_rgb, luminance, Image};

pub const IMG_HEIGHT: usize = 32;
pub const IMG_WIDTH: usize = 16;
pub const SHAPE_LEVELS: usize = 4;
/// Number of distinct body-shape combinations (four parameters, four levels each).
pub const MAX_IDENTITIES: usize = SHAPE_LEVELS.pow(4);
pub const CAMERAS_PER_SCENE: usize = 2;

const TORSO_WIDTH: [f32; 4] = [4.0, 6.0, 8.0, 10.0];
const TORSO_HEIGHT: [f32; 4] = [6.0, 8.0, 10.0, 12.0];
const HEAD_RADIUS: [f32; 4] = [1.5, 2.0, 2.5, 3.0];
const LEG_LENGTH: [f32; 4] = [6.0, 8.0, 10.0, 12.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scene {
    General,
    LowResolution,
    ClothingChange,
    Occlusion,
    CrossModality,
}

impl Scene {
    pub const ALL: [Scene; 5] = [
        Scene::General,
        Scene::LowResolution,
        Scene::ClothingChange,
        Scene::Occlusion,
        Scene::CrossModality,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Scene> {
        Scene::ALL.get(i).copied().ok_or(Error::Index {
            what: "scene",
            index: i,
            len: Scene::ALL.len(),
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Scene::General => "general",
            Scene::LowResolution => "low_resolution",
            Scene::ClothingChange => "clothing_change",
            Scene::Occlusion => "occlusion",
            Scene::CrossModality => "cross_modality",
        }
    }
}

impl FromStr for Scene {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scene::ALL
            .iter()
            .copied()
            .find(|sc| sc.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown scene `{s}`")))
    }
}

/// Appearance of one identity: four quantized shape levels and two hues.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentitySpec {
    pub torso_width: u8,
    pub torso_height: u8,
    pub head_radius: u8,
    pub leg_length: u8,
    /// Degrees.
    pub torso_hue: f32,
    pub leg_hue: f32,
}

impl IdentitySpec {
    pub fn shape_code(&self) -> usize {
        let l = SHAPE_LEVELS;
        ((self.torso_width as usize * l + self.torso_height as usize) * l + self.head_radius as usize) * l
            + self.leg_length as usize
    }
}

/// Draws `n` identities with pairwise distinct shape codes.
pub fn make_identities<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Vec<IdentitySpec>> {
    if n > MAX_IDENTITIES {
        return Err(Error::Config(format!(
            "{n} identities requested, at most {MAX_IDENTITIES} distinct body shapes exist"
        )));
    }
    let mut codes: Vec<usize> = (0..MAX_IDENTITIES).collect();
    codes.shuffle(rng);
    let l = SHAPE_LEVELS;
    Ok(codes[..n]
        .iter()
        .map(|&c| IdentitySpec {
            torso_width: (c / (l * l * l) % l) as u8,
            torso_height: (c / (l * l) % l) as u8,
            head_radius: (c / l % l) as u8,
            leg_length: (c % l) as u8,
            torso_hue: rng.random_range(0.0..360.0),
            leg_hue: rng.random_range(0.0..360.0),
        })
        .collect())
}

/// Fixed per-camera background hue, value and texture phase.
fn camera_style(camera: usize) -> (f32, f32, f32) {
    let hue = (camera as f32 * 137.508) % 360.0;
    let val = 0.2 + 0.2 * ((camera as f32 * 0.618_034) % 1.0);
    let phase = camera as f32 * 1.7;
    (hue, val, phase)
}

/// Background pixel for a camera: a smooth gradient with a stripe texture.
fn background_pixel(camera: usize, y: f32, x: f32) -> [f32; 3] {
    let (hue, val, phase) = camera_style(camera);
    let v = val + 0.08 * (y * 0.45 + phase).sin() * (x * 0.7 + phase).cos() + 0.1 * (y / IMG_HEIGHT as f32 - 0.5);
    hsv_to_rgb(hue, 0.25, v.clamp(0.0, 1.0))
}

const SKIN: [f32; 3] = [0.85, 0.68, 0.55];
const SUPERSAMPLE: usize = 3;

/// Silhouette geometry of a spec at a horizontal/vertical offset.
struct Body {
    cx: f32,
    top: f32,
    head_r: f32,
    torso_w: f32,
    torso_h: f32,
    leg_len: f32,
}

impl Body {
    fn new(spec: &IdentitySpec, cx: f32, top: f32) -> Body {
        Body {
            cx,
            top,
            head_r: HEAD_RADIUS[spec.head_radius as usize],
            torso_w: TORSO_WIDTH[spec.torso_width as usize],
            torso_h: TORSO_HEIGHT[spec.torso_height as usize],
            leg_len: LEG_LENGTH[spec.leg_length as usize],
        }
    }

    /// 0 background, 1 head, 2 torso, 3 legs.
    fn part(&self, y: f32, x: f32) -> u8 {
        let head_cy = self.top + self.head_r;
        if (y - head_cy).powi(2) + (x - self.cx).powi(2) <= self.head_r * self.head_r {
            return 1;
        }
        let torso_top = self.top + 2.0 * self.head_r;
        let torso_bot = torso_top + self.torso_h;
        if y >= torso_top && y < torso_bot && (x - self.cx).abs() <= self.torso_w / 2.0 {
            return 2;
        }
        let leg_w = self.torso_w * 0.4;
        if y >= torso_bot && y < torso_bot + self.leg_len {
            let dx = (x - self.cx).abs();
            if dx >= 0.5 && dx <= 0.5 + leg_w {
                return 3;
            }
        }
        0
    }
}

/// Renders `spec` as seen by `camera` under `scene`.
pub fn render_sample<R: Rng + ?Sized>(spec: &IdentitySpec, scene: Scene, camera: usize, rng: &mut R) -> Image {
    let mut spec = *spec;
    if scene == Scene::ClothingChange {
        spec.torso_hue = rng.random_range(0.0..360.0);
    }
    let cx = IMG_WIDTH as f32 / 2.0 + rng.random_range(-0.5f32..=0.5);
    let top = rng.random_range(0.5f32..=1.5);
    let body = Body::new(&spec, cx, top);
    let torso = hsv_to_rgb(spec.torso_hue, 0.75, 0.85);
    let legs = hsv_to_rgb(spec.leg_hue, 0.8, 0.8);
    let gain = 0.9 + 0.2 * ((camera as f32 * 0.414_214) % 1.0);

    let mut img = Image::filled(IMG_HEIGHT, IMG_WIDTH, [0.0; 3]);
    let ss = SUPERSAMPLE as f32;
    for y in 0..IMG_HEIGHT {
        for x in 0..IMG_WIDTH {
            let mut acc = [0.0f32; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let py = y as f32 + (sy as f32 + 0.5) / ss;
                    let px = x as f32 + (sx as f32 + 0.5) / ss;
                    let c = match body.part(py, px) {
                        1 => SKIN,
                        2 => torso,
                        3 => legs,
                        _ => background_pixel(camera, py, px),
                    };
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            let n = (SUPERSAMPLE * SUPERSAMPLE) as f32;
            let noise: f32 = rng.random_range(-0.03..=0.03);
            img.set_pixel(y, x, acc.map(|v| (v / n * gain + noise).clamp(0.0, 1.0)));
        }
    }

    match scene {
        Scene::General => {
            let b = rng.random_range(0.85f32..=1.15);
            let c = rng.random_range(0.85f32..=1.15);
            let mean = img.mean();
            for v in img.data_mut() {
                *v = ((*v - mean) * c + mean * b).clamp(0.0, 1.0);
            }
        }
        Scene::LowResolution => img = down_up(&img, 4),
        Scene::ClothingChange => {}
        Scene::Occlusion => {
            let area = rng.random_range(0.1f32..=0.4);
            let aspect = rng.random_range(0.5f32..=2.0);
            let target = area * (IMG_HEIGHT * IMG_WIDTH) as f32;
            let rh = ((target * aspect).sqrt().round() as usize).clamp(1, IMG_HEIGHT);
            let rw = ((target / rh as f32).round() as usize).clamp(1, IMG_WIDTH);
            let y0 = rng.random_range(0..=IMG_HEIGHT - rh);
            let x0 = rng.random_range(0..=IMG_WIDTH - rw);
            let oy = rng.random_range(0.0f32..8.0);
            let ox = rng.random_range(0.0f32..8.0);
            for y in y0..y0 + rh {
                for x in x0..x0 + rw {
                    let c = background_pixel(camera, y as f32 + oy, x as f32 + ox);
                    img.set_pixel(y, x, c.map(|v| (v * gain).clamp(0.0, 1.0)));
                }
            }
        }
        Scene::CrossModality => {
            for y in 0..IMG_HEIGHT {
                for x in 0..IMG_WIDTH {
                    let l = luminance(img.pixel(y, x)).clamp(0.0, 1.0);
                    img.set_pixel(y, x, [l; 3]);
                }
            }
        }
    }
    img
}

/// Average-pools by `factor` and upsamples back with bilinear interpolation.
pub fn down_up(image: &Image, factor: usize) -> Image {
    let (h, w) = (image.height(), image.width());
    let (sh, sw) = (h / factor, w / factor);
    let mut small = Image::filled(sh, sw, [0.0; 3]);
    let n = (factor * factor) as f32;
    for y in 0..sh {
        for x in 0..sw {
            let mut acc = [0.0f32; 3];
            for dy in 0..factor {
                for dx in 0..factor {
                    let p = image.pixel(y * factor + dy, x * factor + dx);
                    for k in 0..3 {
                        acc[k] += p[k];
                    }
                }
            }
            small.set_pixel(y, x, acc.map(|v| v / n));
        }
    }
    let mut out = Image::filled(h, w, [0.0; 3]);
    for y in 0..h {
        let sy = (y as f32 + 0.5) / factor as f32 - 0.5;
        for x in 0..w {
            let sx = (x as f32 + 0.5) / factor as f32 - 0.5;
            out.set_pixel(y, x, small.sample_bilinear(sy, sx));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

/// Labels of one image, without pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleMeta {
    pub identity: usize,
    pub scene: usize,
    /// Global camera id: `scene * CAMERAS_PER_SCENE + local`.
    pub camera: usize,
    pub split: Split,
}

/// Per-(identity, scene) split sizes `(query, gallery, train)`.
pub fn split_sizes(per_scene: usize) -> Result<(usize, usize, usize)> {
    if per_scene < 3 {
        return Err(Error::Config(format!(
            "images per identity and scene must be at least 3, got {per_scene}"
        )));
    }
    let q = (per_scene / 5).max(1);
    Ok((q, q, per_scene - 2 * q))
}

/// Labels for every image in order identity-major, then scene, then index.
/// Queries use the scene's first camera and gallery images its second, so a
/// query never shares a camera with its true matches.
pub fn plan_dataset(num_ids: usize, per_scene: usize) -> Result<Vec<SampleMeta>> {
    if num_ids < 2 {
        return Err(Error::Config("at least 2 identities are required".into()));
    }
    let (q, g, _) = split_sizes(per_scene)?;
    let mut out = Vec::with_capacity(num_ids * Scene::ALL.len() * per_scene);
    for identity in 0..num_ids {
        for scene in 0..Scene::ALL.len() {
            let cam0 = scene * CAMERAS_PER_SCENE;
            for i in 0..per_scene {
                let (split, camera) = if i < q {
                    (Split::Query, cam0)
                } else if i < q + g {
                    (Split::Gallery, cam0 + 1)
                } else {
                    (Split::Train, cam0 + (i - q - g) % CAMERAS_PER_SCENE)
                };
                out.push(SampleMeta {
                    identity,
                    scene,
                    camera,
                    split,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub meta: SampleMeta,
}

/// Identity specs for a dataset seed.
pub fn dataset_identities(num_ids: usize, seed: u64) -> Result<Vec<IdentitySpec>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    make_identities(num_ids, &mut rng)
}

/// Renders image `index` of a plan. Each image draws from its own stream, so
/// rendering order does not matter.
pub fn render_planned(specs: &[IdentitySpec], meta: &SampleMeta, index: usize, seed: u64) -> Result<Image> {
    let spec = specs.get(meta.identity).ok_or(Error::Index {
        what: "identity",
        index: meta.identity,
        len: specs.len(),
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    Ok(render_sample(spec, Scene::from_index(meta.scene)?, meta.camera, &mut rng))
}

/// Plans and renders a whole dataset.
pub fn generate(num_ids: usize, per_scene: usize, seed: u64) -> Result<Vec<Sample>> {
    let specs = dataset_identities(num_ids, seed)?;
    let plan = plan_dataset(num_ids, per_scene)?;
    plan.iter()
        .enumerate()
        .map(|(i, m)| {
            Ok(Sample {
                image: render_planned(&specs, m, i, seed)?,
                meta: *m,
            })
        })
        .collect()
}

/// Identity-balanced sampler: `P` identities, `K` images each.
#[derive(Debug, Clone)]
pub struct PkSampler {
    groups: Vec<(usize, Vec<usize>)>,
    p: usize,
    k: usize,
}

impl PkSampler {
    /// `labels[i]` is the identity of item `i`.
    pub fn new(labels: &[usize], p: usize, k: usize) -> Result<Self> {
        if p < 2 || k < 2 {
            return Err(Error::Config(format!("PK sampling needs P >= 2 and K >= 2, got P={p} K={k}")));
        }
        let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
        let mut order: Vec<usize> = (0..labels.len()).collect();
        order.sort_by_key(|&i| (labels[i], i));
        for i in order {
            match groups.last_mut() {
                Some((id, items)) if *id == labels[i] => items.push(i),
                _ => groups.push((labels[i], vec![i])),
            }
        }
        if let Some((id, items)) = groups.iter().find(|(_, items)| items.len() < k) {
            return Err(Error::Config(format!(
                "identity {id} has {} training images, K={k} required",
                items.len()
            )));
        }
        if groups.len() < p {
            return Err(Error::Config(format!(
                "{} identities available, P={p} required",
                groups.len()
            )));
        }
        Ok(PkSampler { groups, p, k })
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    pub fn num_identities(&self) -> usize {
        self.groups.len()
    }

    /// Item indices of one batch, identity-major.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch_size());
        for (_, items) in self.groups.choose_multiple(rng, self.p) {
            out.extend(items.choose_multiple(rng, self.k).copied());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeSet;

    #[test]
    fn identities_have_distinct_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ids = make_identities(MAX_IDENTITIES, &mut rng).unwrap();
        let codes: BTreeSet<usize> = ids.iter().map(|s| s.shape_code()).collect();
        assert_eq!(codes.len(), MAX_IDENTITIES);
        assert!(make_identities(MAX_IDENTITIES + 1, &mut rng).is_err());
    }

    #[test]
    fn plan_sizes_and_split_counts() {
        let plan = plan_dataset(10, 6).unwrap();
        assert_eq!(plan.len(), 300);
        let plan = plan_dataset(40, 10).unwrap();
        let count = |s| plan.iter().filter(|m| m.split == s).count();
        assert_eq!((count(Split::Train), count(Split::Query), count(Split::Gallery)), (1200, 400, 400));
        assert!(plan_dataset(4, 2).is_err());
    }

    #[test]
    fn query_never_shares_camera_with_matching_gallery() {
        let plan = plan_dataset(6, 7).unwrap();
        for q in plan.iter().filter(|m| m.split == Split::Query) {
            let matches: Vec<_> = plan
                .iter()
                .filter(|g| g.split == Split::Gallery && g.identity == q.identity)
                .collect();
            assert!(!matches.is_empty());
            assert!(matches.iter().all(|g| g.camera != q.camera));
        }
    }

    #[test]
    fn rendering_is_deterministic_and_in_range() {
        let a = generate(3, 3, 9).unwrap();
        let b = generate(3, 3, 9).unwrap();
        assert_eq!(a, b);
        let c = generate(3, 3, 10).unwrap();
        assert_ne!(a, c);
        for s in &a {
            assert_eq!((s.image.height(), s.image.width()), (IMG_HEIGHT, IMG_WIDTH));
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn cross_modality_is_gray() {
        let specs = dataset_identities(2, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = render_sample(&specs[0], Scene::CrossModality, 8, &mut rng);
        for p in img.data().chunks(3) {
            assert!(p[0] == p[1] && p[1] == p[2]);
        }
    }

    #[test]
    fn pk_batches_have_p_ids_k_each() {
        let labels: Vec<usize> = (0..60).map(|i| i % 10).collect();
        let s = PkSampler::new(&labels, 4, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut seen = BTreeSet::new();
        for _ in 0..200 {
            let b = s.sample(&mut rng);
            assert_eq!(b.len(), 12);
            let ids: BTreeSet<usize> = b.iter().map(|&i| labels[i]).collect();
            assert_eq!(ids.len(), 4);
            for id in ids {
                assert_eq!(b.iter().filter(|&&i| labels[i] == id).count(), 3);
            }
            let uniq: BTreeSet<usize> = b.iter().copied().collect();
            assert_eq!(uniq.len(), 12);
            seen.extend(b);
        }
        assert_eq!(seen.len(), 60);
    }

    #[test]
    fn pk_names_deficient_identity() {
        let labels = [0, 0, 0, 1, 1, 2, 2, 2];
        match PkSampler::new(&labels, 2, 3) {
            Err(Error::Config(msg)) => assert!(msg.contains("identity 1"), "{msg}"),
            other => panic!("{other:?}"),
        }
        assert!(PkSampler::new(&[0, 0, 1, 1], 3, 2).is_err());
    }
}
