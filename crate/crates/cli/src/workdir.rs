use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use softpipe::tasks::Dataset;
use softpipe::{Error, Result};

use crate::config::ExperimentConfig;

pub struct Workdir {
    root: PathBuf,
    cfg: ExperimentConfig,
}

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

impl Workdir {
    pub fn new(root: PathBuf, cfg: ExperimentConfig) -> Self {
        Self { root, cfg }
    }

    pub fn cfg(&self) -> &ExperimentConfig {
        &self.cfg
    }

    fn under(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    /// Artifact paths given on the command line are taken relative to the
    /// workdir.
    pub fn resolve(&self, p: Option<PathBuf>) -> Option<PathBuf> {
        p.map(|p| self.under(&p))
    }

    pub fn datasets(&self) -> PathBuf {
        self.under(&self.cfg.paths.datasets)
    }

    pub fn ckpts(&self) -> PathBuf {
        self.under(&self.cfg.paths.ckpts)
    }

    pub fn reports(&self) -> PathBuf {
        self.under(&self.cfg.paths.reports)
    }

    pub fn dataset_path(&self, name: &str) -> PathBuf {
        self.datasets().join(format!("{name}.jsonl"))
    }

    pub fn ckpt_path(&self, name: &str) -> PathBuf {
        self.ckpts().join(format!("{name}.ckpt"))
    }

    /// Fails with the command that would produce `path` when it is absent.
    pub fn require(&self, path: PathBuf, command: &str) -> Result<PathBuf> {
        if path.exists() {
            Ok(path)
        } else {
            Err(Error::MissingPrerequisite {
                path,
                command: command.to_string(),
            })
        }
    }

    pub fn load_dataset(&self, name: &str) -> Result<Dataset> {
        let path = self.require(self.dataset_path(name), &gen_data_command(name))?;
        Dataset::load_jsonl(&path)
    }

    /// Datasets used with α > 0 must carry back-translated references.
    pub fn load_backtranslated(&self, name: &str) -> Result<Dataset> {
        let data = self.load_dataset(name)?;
        if self.cfg.finetune.alpha > 0.0 && data.records.iter().any(|r| r.backtranslation.is_none()) {
            return Err(Error::MissingPrerequisite {
                path: self.dataset_path(name),
                command: format!("softpipe backtranslate --dataset {name}"),
            });
        }
        Ok(data)
    }

    pub fn ensure_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))
    }

    pub fn ensure_parent(&self, path: &Path) -> Result<()> {
        match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => self.ensure_dir(p),
            _ => Ok(()),
        }
    }

    /// Writes `reports/<file_name>` wrapping `body` with the resolved config
    /// and the crate version.
    pub fn write_report(&self, file_name: &str, command: &str, body: &impl Serialize) -> Result<PathBuf> {
        let dir = self.reports();
        self.ensure_dir(&dir)?;
        let path = dir.join(file_name);
        let doc = json!({
            "version": env!("CARGO_PKG_VERSION"),
            "command": command,
            "config": self.cfg,
            "report": body,
        });
        fs::write(&path, serde_json::to_vec_pretty(&doc)?).map_err(|e| io(&path, e))?;
        Ok(path)
    }

    pub fn write_text(&self, path: &Path, text: &str) -> Result<()> {
        self.ensure_parent(path)?;
        fs::write(path, text).map_err(|e| io(path, e))
    }
}

pub fn gen_data_command(name: &str) -> String {
    match name {
        "a" | "b" => format!("softpipe gen-data --style {name}"),
        other => format!("softpipe gen-data --out datasets/{other}.jsonl"),
    }
}
