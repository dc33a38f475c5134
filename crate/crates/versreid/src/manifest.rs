//! Dataset manifest: one tab-separated record per image, preceded by
//! `# seed=` and `# config=` comment lines.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use versreid_core::scene::{SampleMeta, Scene, Split};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    /// Path relative to the dataset root.
    pub file: String,
    pub meta: SampleMeta,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub seed: u64,
    /// Generation parameters as ordered `key=value` pairs.
    pub config: Vec<(String, String)>,
    pub records: Vec<Record>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = format!("# seed={}\n# config=", self.seed);
        let cfg: Vec<String> = self.config.iter().map(|(k, v)| format!("{k}={v}")).collect();
        s.push_str(&cfg.join(";"));
        s.push('\n');
        for r in &self.records {
            let scene = Scene::from_index(r.meta.scene).map(Scene::as_str).unwrap_or("?");
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}",
                r.file,
                r.meta.identity,
                scene,
                r.meta.camera,
                r.meta.split.as_str()
            );
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Manifest> {
        let err = |line: usize, msg: String| Error::Line {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut seed = None;
        let mut config = Vec::new();
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            if let Some(rest) = line.strip_prefix('#') {
                let rest = rest.trim();
                if let Some(v) = rest.strip_prefix("seed=") {
                    seed = Some(v.parse().map_err(|_| err(n, format!("invalid seed `{v}`")))?);
                } else if let Some(v) = rest.strip_prefix("config=") {
                    for kv in v.split(';').filter(|s| !s.is_empty()) {
                        let (k, v) = kv
                            .split_once('=')
                            .ok_or_else(|| err(n, format!("config entry `{kv}` lacks `=`")))?;
                        config.push((k.to_string(), v.to_string()));
                    }
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(err(n, format!("expected 5 tab-separated fields, found {}", cols.len())));
            }
            let num = |s: &str, what: &str| -> Result<usize> {
                s.parse().map_err(|_| err(n, format!("invalid {what} `{s}`")))
            };
            let scene = cols[2]
                .parse::<Scene>()
                .map_err(|e| err(n, e.to_string()))?;
            let split = cols[4]
                .parse::<Split>()
                .map_err(|e| err(n, e.to_string()))?;
            records.push(Record {
                file: cols[0].to_string(),
                meta: SampleMeta {
                    identity: num(cols[1], "identity")?,
                    scene: scene.index(),
                    camera: num(cols[3], "camera")?,
                    split,
                },
            });
        }
        let seed = seed.ok_or_else(|| err(1, "missing `# seed=` line".into()))?;
        Ok(Manifest {
            seed,
            config,
            records,
        })
    }

    pub fn path_in(dir: &Path) -> PathBuf {
        dir.join(MANIFEST_FILE)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = Self::path_in(dir);
        fs::write(&path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(dir: &Path) -> Result<Manifest> {
        let path = Self::path_in(dir);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text, &path)
    }

    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Number of identity classes (`max identity + 1`).
    pub fn num_identities(&self) -> usize {
        self.records.iter().map(|r| r.meta.identity + 1).max().unwrap_or(0)
    }

    /// Checks that every file exists under `root` and that every identity
    /// has training images.
    pub fn validate(&self, root: &Path) -> Result<()> {
        for r in &self.records {
            let p = root.join(&r.file);
            if !p.is_file() {
                return Err(Error::Data(format!("manifest references missing file {}", p.display())));
            }
        }
        let n = self.num_identities();
        let mut has_train = vec![false; n];
        for r in self.records.iter().filter(|r| r.meta.split == Split::Train) {
            has_train[r.meta.identity] = true;
        }
        if let Some(id) = has_train.iter().position(|&b| !b) {
            return Err(Error::Data(format!("identity {id} has no training images")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Manifest {
        Manifest {
            seed: 42,
            config: vec![("ids".into(), "2".into()), ("per_scene".into(), "3".into())],
            records: vec![
                Record {
                    file: "img/000000.ppm".into(),
                    meta: SampleMeta {
                        identity: 0,
                        scene: 4,
                        camera: 8,
                        split: Split::Query,
                    },
                },
                Record {
                    file: "img/000001.ppm".into(),
                    meta: SampleMeta {
                        identity: 1,
                        scene: 0,
                        camera: 1,
                        split: Split::Train,
                    },
                },
            ],
        }
    }

    #[test]
    fn text_round_trip() {
        let m = sample();
        let text = m.to_text();
        assert!(text.starts_with("# seed=42\n# config=ids=2;per_scene=3\n"));
        assert!(text.contains("img/000000.ppm\t0\tcross_modality\t8\tquery\n"));
        assert_eq!(Manifest::parse(&text, Path::new("m")).unwrap(), m);
        assert_eq!(m.config_value("per_scene"), Some("3"));
    }

    #[test]
    fn bad_lines_are_located() {
        let text = "# seed=1\na\t0\tgeneral\t0\ttrain\nb\t0\tunderwater\t0\ttrain\n";
        match Manifest::parse(text, Path::new("m")) {
            Err(Error::Line { line, msg, .. }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("underwater"));
            }
            other => panic!("{other:?}"),
        }
        assert!(Manifest::parse("a\t0\tgeneral\t0\ttrain\n", Path::new("m")).is_err());
    }
}
