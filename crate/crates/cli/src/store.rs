//! Artifact directory layout, content hashes and the provenance record that
//! ties every artifact to the exact inputs it was built from.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use cir2_core::checkpoint::sha256;
use cir2_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";
pub const TRAIN_TRIPLETS: &str = "train.triplets";
pub const VAL_TRIPLETS: &str = "val.triplets";
pub const RUN_CONFIG: &str = "run_config.toml";
pub const FILTER_CKPT: &str = "filter.ckpt";
pub const FILTER_LOG: &str = "filter.log.jsonl";
pub const INDEX: &str = "val.emb";
pub const TRAIN_ZT: &str = "train.zt";
pub const VAL_ZT: &str = "val.zt";
pub const FILTER_TOPK: &str = "filter.topk.jsonl";
pub const FILTER_RANKINGS: &str = "filter.rankings.jsonl";
pub const FILTER_SUBSETS: &str = "filter.subsets.jsonl";
const PROVENANCE: &str = "provenance.json";

pub fn rerank_ckpt(variant: &str) -> String {
    format!("rerank-{variant}.ckpt")
}

pub fn rerank_log(variant: &str) -> String {
    format!("rerank-{variant}.log.jsonl")
}

pub fn rerank_rankings(variant: &str) -> String {
    format!("rerank-{variant}.rankings.jsonl")
}

pub fn rerank_subsets(variant: &str) -> String {
    format!("rerank-{variant}.subsets.jsonl")
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct Entry {
    sha256: String,
    inputs: BTreeMap<String, String>,
}

/// Data directory plus its provenance record.
pub struct Store {
    pub dir: PathBuf,
    pub force: bool,
    record: BTreeMap<String, Entry>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

impl Store {
    pub fn open(dir: &Path, force: bool) -> Result<Self> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let p = dir.join(PROVENANCE);
        let record = if p.exists() {
            let text = fs::read_to_string(&p).map_err(io_err(&p))?;
            serde_json::from_str(&text).map_err(|e| Error::Format {
                path: p.clone(),
                msg: e.to_string(),
            })?
        } else {
            BTreeMap::new()
        };
        Ok(Store {
            dir: dir.to_path_buf(),
            force,
            record,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn file_hash(&self, name: &str) -> Result<String> {
        let p = self.path(name);
        let bytes = fs::read(&p).map_err(io_err(&p))?;
        Ok(hex::encode(sha256(&bytes)))
    }

    /// Refuses to replace existing outputs unless forced.
    pub fn check_writable(&self, names: &[&str]) -> Result<()> {
        if self.force {
            return Ok(());
        }
        for n in names {
            if self.path(n).exists() {
                return Err(Error::Config(format!(
                    "{} exists; pass --force to overwrite",
                    self.path(n).display()
                )));
            }
        }
        Ok(())
    }

    /// Verifies that `name` is unchanged since it was recorded and that
    /// every input it was built from is unchanged too.
    pub fn verify(&self, name: &str) -> Result<()> {
        let entry = self
            .record
            .get(name)
            .ok_or_else(|| Error::Provenance(format!("{name} has no provenance record; regenerate it")))?;
        let now = self.file_hash(name)?;
        if now != entry.sha256 {
            return Err(Error::Provenance(format!("{name} changed since it was written")));
        }
        for (input, hash) in &entry.inputs {
            let now = self.file_hash(input)?;
            if &now != hash {
                return Err(Error::Provenance(format!(
                    "{name} was built from a different {input}; rebuild it"
                )));
            }
        }
        Ok(())
    }

    /// Records `name` as derived from `inputs` (at their current contents).
    pub fn record(&mut self, name: &str, inputs: &[&str]) -> Result<()> {
        let mut deps = BTreeMap::new();
        for i in inputs {
            deps.insert(i.to_string(), self.file_hash(i)?);
        }
        let entry = Entry {
            sha256: self.file_hash(name)?,
            inputs: deps,
        };
        self.record.insert(name.to_string(), entry);
        let p = self.path(PROVENANCE);
        let text = serde_json::to_string_pretty(&self.record).expect("record serializes");
        fs::write(&p, text).map_err(io_err(&p))
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, text).map_err(io_err(&p))
    }

    pub fn read_text(&self, name: &str) -> Result<String> {
        let p = self.path(name);
        fs::read_to_string(&p).map_err(io_err(&p))
    }

    pub fn write_jsonl<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<()> {
        let p = self.path(name);
        let f = fs::File::create(&p).map_err(io_err(&p))?;
        let mut w = BufWriter::new(f);
        for r in rows {
            serde_json::to_writer(&mut w, r).expect("row serializes");
            w.write_all(b"\n").map_err(io_err(&p))?;
        }
        w.flush().map_err(io_err(&p))
    }

    pub fn read_jsonl<T: DeserializeOwned>(&self, name: &str) -> Result<Vec<T>> {
        let p = self.path(name);
        let f = fs::File::open(&p).map_err(io_err(&p))?;
        let mut out = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(io_err(&p))?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                msg: format!("{}: {e}", p.display()),
            })?);
        }
        Ok(out)
    }
}
