//! Named-tensor checkpoints.
//!
//! Layout, little-endian throughout: magic `VRSR`, version byte 1, u32 tensor
//! count, then per tensor a u16 name length, the UTF-8 name, a u8 rank, rank
//! u32 dims and the f32 payload; finally a u64 step counter and 32 bytes of
//! RNG state.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use versreid_core::model::{BranchKind, ModelConfig, ReidModel};
use versreid_core::optim::SgdMomentum;
use versreid_core::{ParamSet, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VRSR";
pub const VERSION: u8 = 1;
/// Rank-1 tensor holding the model shape, see [`config_tensor`].
pub const CONFIG_TENSOR: &str = "meta.model_config";
/// Prefix of optimizer velocity tensors.
pub const OPTIM_PREFIX: &str = "optim.";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub step: u64,
    pub rng_state: [u8; 32],
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            encode_tensor(&mut out, name, t);
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng_state);
        out
    }

    /// Parses a checkpoint; errors give the byte offset and, inside the
    /// tensor table, the record being read.
    pub fn decode(bytes: &[u8]) -> std::result::Result<Checkpoint, (usize, String)> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err((0, "bad magic, expected VRSR".into()));
        }
        let version = r.u8("version")?;
        if version != VERSION {
            return Err((4, format!("unsupported version {version}")));
        }
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for i in 0..count {
            let start = r.pos;
            let ctx = |what: &str, name: Option<&str>| match name {
                Some(n) => format!("tensor record {i} (`{n}`): {what}"),
                None => format!("tensor record {i}: {what}"),
            };
            let len = r.u16(&ctx("name length", None))? as usize;
            let name_bytes = r.take(len, &ctx("name", None))?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| (start + 2, ctx("name is not UTF-8", None)))?
                .to_string();
            let rank = r.u8(&ctx("rank", Some(&name)))? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32(&ctx("dims", Some(&name)))? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or((r.pos, ctx("dims overflow", Some(&name))))?;
            let payload = r.take(n, &ctx("payload", Some(&name)))?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| (start, ctx(&e.to_string(), Some(&name))))?;
            tensors.push((name, t));
        }
        let step = u64::from_le_bytes(r.take(8, "step counter")?.try_into().expect("8 bytes"));
        let rng_state: [u8; 32] = r.take(32, "rng state")?.try_into().expect("32 bytes");
        if r.pos != bytes.len() {
            return Err((r.pos, "trailing bytes after rng state".into()));
        }
        Ok(Checkpoint {
            tensors,
            step,
            rng_state,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::decode(&bytes).map_err(|(offset, msg)| Error::Parse {
            path: path.to_path_buf(),
            offset,
            msg,
        })
    }

    /// SHA-256 of the encoded file, hex.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.encode()))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Packs a model, its shape and optionally optimizer velocity.
    pub fn from_model(model: &ReidModel, opt: Option<&SgdMomentum>, step: u64, rng_state: [u8; 32]) -> Self {
        let mut tensors: Vec<(String, Tensor)> = model
            .params()
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        tensors.push((CONFIG_TENSOR.to_string(), config_tensor(model.config())));
        if let Some(opt) = opt {
            for (i, v) in opt.velocity().iter().enumerate() {
                tensors.push((format!("{OPTIM_PREFIX}{}", model.params().name(i)), v.clone()));
            }
        }
        Checkpoint {
            tensors,
            step,
            rng_state,
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let t = self
            .get(CONFIG_TENSOR)
            .ok_or_else(|| Error::Data(format!("checkpoint lacks `{CONFIG_TENSOR}`")))?;
        config_from_tensor(t)
    }

    /// Branch kind, from which prompt or projection tensors are present.
    pub fn kind(&self) -> Result<BranchKind> {
        if self.get("prompts.scene").is_some() {
            Ok(BranchKind::Bank)
        } else if self.get("prompts.versatile").is_some() {
            Ok(BranchKind::VBranch)
        } else if self.get("proj.fc1.weight").is_some() {
            Ok(BranchKind::Encoder)
        } else {
            Err(Error::Data("checkpoint holds no prompts or projection head".into()))
        }
    }

    /// Rebuilds the model stored in this checkpoint.
    pub fn to_model(&self) -> Result<ReidModel> {
        let cfg = self.model_config()?;
        let kind = self.kind()?;
        // Initial values are discarded; any generator will do.
        let mut model = ReidModel::new(cfg, kind, &mut ChaCha8Rng::seed_from_u64(0))?;
        let mut ps = ParamSet::new();
        for (name, _) in model.params().iter() {
            let t = self
                .get(name)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks parameter `{name}`")))?;
            ps.push(name, t.clone());
        }
        model.load_params(ps)?;
        Ok(model)
    }

    /// Optimizer velocity for `model`, if the checkpoint carries it.
    pub fn velocity(&self, model: &ReidModel) -> Option<Vec<Tensor>> {
        model
            .params()
            .iter()
            .map(|(n, _)| self.get(&format!("{OPTIM_PREFIX}{n}")).cloned())
            .collect()
    }
}

/// SHA-256 over names, shapes and values of a parameter set, hex.
pub fn params_hash(params: &ParamSet) -> String {
    let mut buf = Vec::new();
    for (name, t) in params.iter() {
        encode_tensor(&mut buf, name, t);
    }
    hex::encode(Sha256::digest(buf))
}

fn encode_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// `[H, W, patch, stride, D, depth, heads, mlp, S, N, M, classes]`.
pub fn config_tensor(c: &ModelConfig) -> Tensor {
    let v = [
        c.img_height,
        c.img_width,
        c.patch_size,
        c.patch_stride,
        c.embed_dim,
        c.depth,
        c.num_heads,
        c.mlp_ratio,
        c.num_scenes,
        c.prompts_per_scene,
        c.num_versatile,
        c.num_classes,
    ];
    Tensor::new(&[v.len()], v.iter().map(|&x| x as f32).collect()).expect("rank-1 shape")
}

fn config_from_tensor(t: &Tensor) -> Result<ModelConfig> {
    let d = t.data();
    if t.rank() != 1 || d.len() != 12 || d.iter().any(|v| !(*v >= 0.0) || v.fract() != 0.0) {
        return Err(Error::Data(format!("malformed `{CONFIG_TENSOR}` tensor")));
    }
    let u = |i: usize| d[i] as usize;
    Ok(ModelConfig {
        img_height: u(0),
        img_width: u(1),
        patch_size: u(2),
        patch_stride: u(3),
        embed_dim: u(4),
        depth: u(5),
        num_heads: u(6),
        mlp_ratio: u(7),
        num_scenes: u(8),
        prompts_per_scene: u(9),
        num_versatile: u(10),
        num_classes: u(11),
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], (usize, String)> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err((
                self.pos,
                format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            )),
        }
    }

    fn u8(&mut self, what: &str) -> std::result::Result<u8, (usize, String)> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> std::result::Result<u16, (usize, String)> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, (usize, String)> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}
