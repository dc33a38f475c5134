//! Retrieval metrics (CMC, mAP), distance matrices, and the scene-label noise
//! model used by the bank ensembles.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::cmp::Ordering;

#[allow(unused_imports)] // float math in no_std; shadowed by inherent methods on some toolchains
use num_traits::Float;
use rand::Rng;

use crate::error::{Error, Result};
use crate::scene::SampleMeta;
use crate::tensor::Tensor;

/// Scales every row of a `N x D` matrix to unit length (rows below `1e-12`
/// norm are left as-is).
pub fn l2_normalize_rows(t: &mut Tensor) -> Result<()> {
    if t.rank() != 2 {
        return Err(Error::Shape {
            op: "l2_normalize_rows",
            lhs: t.shape().to_vec(),
            rhs: Vec::new(),
        });
    }
    let d = t.cols();
    for row in t.data_mut().chunks_mut(d.max(1)) {
        let n = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if n > 1e-12 {
            row.iter_mut().for_each(|v| *v = (*v as f64 / n) as f32);
        }
    }
    Ok(())
}

/// Euclidean distances between rows of `q` (`Q x D`) and `g` (`G x D`).
pub fn distance_matrix(q: &Tensor, g: &Tensor) -> Result<Tensor> {
    if q.rank() != 2 || g.rank() != 2 || q.cols() != g.cols() {
        return Err(Error::Shape {
            op: "distance_matrix",
            lhs: q.shape().to_vec(),
            rhs: g.shape().to_vec(),
        });
    }
    let (nq, ng, d) = (q.rows(), g.rows(), q.cols());
    let mut out = Vec::with_capacity(nq * ng);
    for i in 0..nq {
        let a = &q.data()[i * d..(i + 1) * d];
        for j in 0..ng {
            let b = &g.data()[j * d..(j + 1) * d];
            let s: f64 = a.iter().zip(b).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum();
            out.push(s.sqrt() as f32);
        }
    }
    Tensor::new(&[nq, ng], out)
}

/// Identity and camera of one retrieval item.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Label {
    pub identity: usize,
    pub camera: usize,
}

impl From<&SampleMeta> for Label {
    fn from(m: &SampleMeta) -> Self {
        Label {
            identity: m.identity,
            camera: m.camera,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieval {
    /// `cmc[k]`: fraction of evaluated queries with a true match within the top `k + 1`.
    pub cmc: Vec<f64>,
    /// Average precision of each evaluated query, in query order.
    pub ap: Vec<f64>,
    pub map: f64,
    /// Queries with at least one valid match.
    pub num_valid: usize,
    /// Queries dropped for lack of a valid match.
    pub num_skipped: usize,
}

impl Retrieval {
    /// CMC at rank `k` (1-based); saturates past the gallery length.
    pub fn rank(&self, k: usize) -> f64 {
        if self.cmc.is_empty() || k == 0 {
            return 0.0;
        }
        self.cmc[(k - 1).min(self.cmc.len() - 1)]
    }
}

/// Ranks the gallery for every query. Gallery items sharing both identity and
/// camera with the query are removed; ties in distance are broken by gallery
/// index.
pub fn evaluate(dist: &Tensor, query: &[Label], gallery: &[Label]) -> Result<Retrieval> {
    if dist.rank() != 2 || dist.rows() != query.len() || dist.cols() != gallery.len() {
        return Err(Error::Shape {
            op: "evaluate",
            lhs: dist.shape().to_vec(),
            rhs: alloc::vec![query.len(), gallery.len()],
        });
    }
    let ng = gallery.len();
    let mut hits = alloc::vec![0usize; ng];
    let mut ap = Vec::with_capacity(query.len());
    let mut skipped = 0;
    let mut order: Vec<usize> = Vec::with_capacity(ng);
    for (qi, q) in query.iter().enumerate() {
        let row = &dist.data()[qi * ng..(qi + 1) * ng];
        order.clear();
        order.extend((0..ng).filter(|&j| !(gallery[j].identity == q.identity && gallery[j].camera == q.camera)));
        order.sort_by(|&a, &b| match row[a].total_cmp(&row[b]) {
            Ordering::Equal => a.cmp(&b),
            o => o,
        });
        let mut found = 0usize;
        let mut first = None;
        let mut sum_prec = 0.0f64;
        for (r, &j) in order.iter().enumerate() {
            if gallery[j].identity == q.identity {
                found += 1;
                first.get_or_insert(r);
                sum_prec += found as f64 / (r + 1) as f64;
            }
        }
        match first {
            Some(r) => {
                hits[r] += 1;
                ap.push(sum_prec / found as f64);
            }
            None => skipped += 1,
        }
    }
    let valid = ap.len();
    if valid == 0 {
        return Err(Error::Argument("no query has a valid gallery match".into()));
    }
    let mut cmc = Vec::with_capacity(ng);
    let mut acc = 0usize;
    for h in hits {
        acc += h;
        cmc.push(acc as f64 / valid as f64);
    }
    let map = ap.iter().sum::<f64>() / valid as f64;
    Ok(Retrieval {
        cmc,
        ap,
        map,
        num_valid: valid,
        num_skipped: skipped,
    })
}

/// One line of a retrieval report.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub dataset: String,
    pub rank1: f64,
    pub rank5: f64,
    pub map: f64,
    pub num_query: usize,
    pub num_gallery: usize,
    pub num_skipped: usize,
}

fn select_rows(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let d = t.cols();
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        data.extend_from_slice(t.row(r));
    }
    Tensor::new(&[rows.len(), d], data)
}

/// L2-normalizes both feature sets and evaluates them as one query/gallery split.
pub fn evaluate_features(name: &str, qf: &Tensor, q: &[Label], gf: &Tensor, g: &[Label]) -> Result<EvalRow> {
    let mut qf = qf.clone();
    let mut gf = gf.clone();
    l2_normalize_rows(&mut qf)?;
    l2_normalize_rows(&mut gf)?;
    let dist = distance_matrix(&qf, &gf)?;
    let r = evaluate(&dist, q, g)?;
    Ok(EvalRow {
        dataset: name.to_string(),
        rank1: r.rank(1),
        rank5: r.rank(5),
        map: r.map,
        num_query: q.len(),
        num_gallery: g.len(),
        num_skipped: r.num_skipped,
    })
}

/// Per-scene rows (query and gallery both restricted to that scene) followed
/// by a `joint` row over the union.
pub fn evaluate_by_scene(
    scene_names: &[&str],
    qf: &Tensor,
    qm: &[SampleMeta],
    gf: &Tensor,
    gm: &[SampleMeta],
) -> Result<Vec<EvalRow>> {
    if qf.rows() != qm.len() || gf.rows() != gm.len() {
        return Err(Error::Contract(format!(
            "{} query features for {} labels, {} gallery features for {} labels",
            qf.rows(),
            qm.len(),
            gf.rows(),
            gm.len()
        )));
    }
    let mut rows = Vec::with_capacity(scene_names.len() + 1);
    for (s, name) in scene_names.iter().enumerate() {
        let qi: Vec<usize> = (0..qm.len()).filter(|&i| qm[i].scene == s).collect();
        let gi: Vec<usize> = (0..gm.len()).filter(|&i| gm[i].scene == s).collect();
        if qi.is_empty() || gi.is_empty() {
            continue;
        }
        let ql: Vec<Label> = qi.iter().map(|&i| Label::from(&qm[i])).collect();
        let gl: Vec<Label> = gi.iter().map(|&i| Label::from(&gm[i])).collect();
        rows.push(evaluate_features(
            name,
            &select_rows(qf, &qi)?,
            &ql,
            &select_rows(gf, &gi)?,
            &gl,
        )?);
    }
    let ql: Vec<Label> = qm.iter().map(Label::from).collect();
    let gl: Vec<Label> = gm.iter().map(Label::from).collect();
    rows.push(evaluate_features("joint", qf, &ql, gf, &gl)?);
    Ok(rows)
}

/// Per-sample random draws of a simulated scene classifier. The same draws
/// serve every noise level, so a sample wrong at noise `a` stays wrong (with
/// the same wrong scene) at any `b > a`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierDraws {
    truth: Vec<usize>,
    u: Vec<f64>,
    wrong: Vec<usize>,
    num_scenes: usize,
}

impl ClassifierDraws {
    pub fn new<R: Rng + ?Sized>(truth: &[usize], num_scenes: usize, rng: &mut R) -> Result<Self> {
        if num_scenes < 2 {
            return Err(Error::Argument("scene noise needs at least two scenes".into()));
        }
        if let Some(&s) = truth.iter().find(|&&s| s >= num_scenes) {
            return Err(Error::Index {
                what: "scene label",
                index: s,
                len: num_scenes,
            });
        }
        let mut u = Vec::with_capacity(truth.len());
        let mut wrong = Vec::with_capacity(truth.len());
        for &t in truth {
            u.push(rng.random::<f64>());
            let mut w = rng.random_range(0..num_scenes - 1);
            if w >= t {
                w += 1;
            }
            wrong.push(w);
        }
        Ok(ClassifierDraws {
            truth: truth.to_vec(),
            u,
            wrong,
            num_scenes,
        })
    }

    /// Predicted scene of every sample at `noise` in `[0, 1]`.
    pub fn predict(&self, noise: f64) -> Vec<usize> {
        self.truth
            .iter()
            .zip(&self.u)
            .zip(&self.wrong)
            .map(|((&t, &u), &w)| if u < noise { w } else { t })
            .collect()
    }

    /// Classifier probabilities: `1 - noise` on the predicted scene, the rest
    /// spread evenly over the other scenes.
    pub fn soft_weights(&self, predicted: usize, noise: f64) -> Vec<f64> {
        let other = noise / (self.num_scenes - 1) as f64;
        (0..self.num_scenes)
            .map(|s| if s == predicted { 1.0 - noise } else { other })
            .collect()
    }
}
