//! Synthetic dataset directories: `manifest.tsv` plus `img/NNNNNN.ppm`.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use versreid_core::scene::{dataset_identities, plan_dataset, render_planned, Sample, Split};

use crate::error::{Error, Result};
use crate::manifest::{Manifest, Record};
use crate::ppm;

/// A loaded dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.meta.split == split).collect()
    }

    pub fn num_identities(&self) -> usize {
        self.manifest.num_identities()
    }
}

/// Renders a dataset into `out` and writes its manifest.
pub fn generate_dataset(out: &Path, num_ids: usize, per_scene: usize, seed: u64) -> Result<Manifest> {
    let specs = dataset_identities(num_ids, seed)?;
    let plan = plan_dataset(num_ids, per_scene)?;
    let img_dir = out.join("img");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let records = plan
        .par_iter()
        .enumerate()
        .map(|(i, meta)| {
            let image = render_planned(&specs, meta, i, seed)?;
            let file = format!("img/{i:06}.ppm");
            ppm::write(&out.join(&file), &image)?;
            Ok(Record { file, meta: *meta })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        seed,
        config: vec![
            ("ids".into(), num_ids.to_string()),
            ("per_scene".into(), per_scene.to_string()),
        ],
        records,
    };
    manifest.write(out)?;
    log::info!("wrote {} images to {}", manifest.records.len(), out.display());
    Ok(manifest)
}

/// Reads the manifest and every image it lists.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest = Manifest::read(root)?;
    manifest.validate(root)?;
    let samples = manifest
        .records
        .par_iter()
        .map(|r| {
            Ok(Sample {
                image: ppm::read(&root.join(&r.file))?,
                meta: r.meta,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        root: root.to_path_buf(),
        manifest,
        samples,
    })
}
