use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;

pub const FILE_NAME: &str = "manifest.txt";

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Everything needed to rerun one command. One per run, written at the end.
#[derive(Debug, Clone)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub seed: Option<u64>,
    pub config: Option<String>,
    pub started: u64,
    pub finished: Option<u64>,
    pub status: String,
    pub checkpoints: Vec<(String, String)>,
    pub outputs: Vec<PathBuf>,
    pub notes: Vec<(String, String)>,
}

impl RunManifest {
    pub fn start(command: &str) -> Self {
        Self {
            command: command.to_string(),
            argv: std::env::args().collect(),
            seed: None,
            config: None,
            started: now(),
            finished: None,
            status: "running".into(),
            checkpoints: Vec::new(),
            outputs: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn checkpoint(&mut self, path: &Path, id: String) {
        self.checkpoints.push((path.display().to_string(), id));
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) {
        self.outputs.push(path.into());
    }

    pub fn note(&mut self, key: &str, value: impl ToString) {
        self.notes.push((key.to_string(), value.to_string()));
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "command={}", self.command);
        let _ = writeln!(s, "argv={}", self.argv.join(" "));
        let _ = writeln!(s, "seed={}", self.seed.map_or("none".into(), |v| v.to_string()));
        if let Ok(v) = std::env::var("FFAD_SEED") {
            let _ = writeln!(s, "env.FFAD_SEED={v}");
        }
        let _ = writeln!(s, "started_unix={}", self.started);
        let _ = writeln!(s, "finished_unix={}", self.finished.map_or("none".into(), |v| v.to_string()));
        let _ = writeln!(s, "status={}", self.status);
        let _ = writeln!(s, "version={}", env!("CARGO_PKG_VERSION"));
        for (k, v) in &self.notes {
            let _ = writeln!(s, "note.{k}={v}");
        }
        for (path, id) in &self.checkpoints {
            let _ = writeln!(s, "checkpoint={path} id={id}");
        }
        for p in &self.outputs {
            let _ = writeln!(s, "output={}", p.display());
        }
        if let Some(c) = &self.config {
            s.push_str("[config]\n");
            s.push_str(c);
        }
        s
    }

    pub fn finish(mut self, dir: &Path, status: &str) -> anyhow::Result<PathBuf> {
        self.finished = Some(now());
        self.status = status.to_string();
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(FILE_NAME);
        fs::write(&path, self.to_text()).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
