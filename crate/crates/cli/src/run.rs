//! Run-directory bookkeeping: default paths, the writer lock and stage records.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use chrono::Utc;
use cotmed::client::ClientStats;
use cotmed::jsonl::RunLock;
use cotmed::report::{stage_path, write_stage, FileDigest, StageRecord};
use cotmed::ModelSpec;

pub struct Run {
    pub dir: PathBuf,
    _lock: Option<RunLock>,
}

impl Run {
    /// Opens (creating if needed) a run directory and takes its writer lock.
    pub fn open(dir: &Path) -> anyhow::Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating run directory {}", dir.display()))?;
        let lock = RunLock::acquire(dir).with_context(|| format!("locking run directory {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            _lock: Some(lock),
        })
    }

    /// `<run>/<sub>/<file>`
    pub fn path(&self, sub: &str, file: &str) -> PathBuf {
        self.dir.join(sub).join(file)
    }

    pub fn stage(&self, name: &str) -> StageBuilder {
        StageBuilder {
            run: self.dir.clone(),
            record: StageRecord {
                stage: name.to_string(),
                inputs: Vec::new(),
                outputs: Vec::new(),
                models: Vec::new(),
                seeds: BTreeMap::new(),
                config: serde_json::Value::Null,
                cache: None,
                completed_at: Utc::now(),
            },
        }
    }
}

pub struct StageBuilder {
    run: PathBuf,
    record: StageRecord,
}

impl StageBuilder {
    fn display(&self, path: &Path) -> String {
        match path.strip_prefix(&self.run) {
            Ok(rel) => rel.to_string_lossy().into_owned(),
            Err(_) => std::path::absolute(path)
                .unwrap_or_else(|_| path.to_path_buf())
                .to_string_lossy()
                .into_owned(),
        }
    }

    pub fn input(mut self, path: &Path) -> anyhow::Result<Self> {
        let d = FileDigest::of(path, self.display(path)).with_context(|| format!("reading {}", path.display()))?;
        self.record.inputs.push(d);
        Ok(self)
    }

    pub fn inputs<'a>(mut self, paths: impl IntoIterator<Item = &'a PathBuf>) -> anyhow::Result<Self> {
        for p in paths {
            self = self.input(p)?;
        }
        Ok(self)
    }

    pub fn model(mut self, spec: &ModelSpec) -> Self {
        self.record.models.push(spec.clone());
        self
    }

    pub fn seed(mut self, name: &str, seed: u64) -> Self {
        self.record.seeds.insert(name.to_string(), seed);
        self
    }

    pub fn config<T: serde::Serialize>(mut self, cfg: &T) -> Self {
        self.record.config = serde_json::to_value(cfg).unwrap_or(serde_json::Value::Null);
        self
    }

    pub fn cache(mut self, stats: ClientStats) -> Self {
        self.record.cache = Some(stats);
        self
    }

    /// Digests the outputs and writes `<run>/stages/<stage>.json`. A stage
    /// run more than once (chains per mode, evaluate per model) accumulates:
    /// earlier files keep their entries unless this invocation rewrote them.
    pub fn finish(mut self, outputs: &[&Path]) -> anyhow::Result<()> {
        for p in outputs {
            let d = FileDigest::of(p, self.display(p)).with_context(|| format!("reading {}", p.display()))?;
            self.record.outputs.push(d);
        }
        self.record.completed_at = Utc::now();
        if let Ok(text) = std::fs::read_to_string(stage_path(&self.run, &self.record.stage)) {
            if let Ok(prev) = serde_json::from_str::<StageRecord>(&text) {
                merge(&mut self.record, prev);
            }
        }
        write_stage(&self.run, &self.record)?;
        Ok(())
    }
}

fn merge(record: &mut StageRecord, prev: StageRecord) {
    fn keep_old(new: &mut Vec<FileDigest>, old: Vec<FileDigest>) {
        let mut merged: Vec<FileDigest> = old.into_iter().filter(|o| !new.iter().any(|n| n.path == o.path)).collect();
        merged.append(new);
        *new = merged;
    }
    keep_old(&mut record.inputs, prev.inputs);
    keep_old(&mut record.outputs, prev.outputs);
    let mut models: Vec<ModelSpec> = prev.models.into_iter().filter(|m| !record.models.contains(m)).collect();
    models.append(&mut record.models);
    record.models = models;
    for (k, v) in prev.seeds {
        record.seeds.entry(k).or_insert(v);
    }
}
