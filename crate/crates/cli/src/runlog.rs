use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::Failure;

/// One line of the run log.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub command: String,
    pub args: Vec<String>,
    /// Seconds since the Unix epoch at start.
    pub started: f64,
    pub seconds: f64,
    pub exit_code: i32,
    pub status: &'static str,
    pub error: Option<String>,
    pub stage: Option<&'static str>,
    pub device: String,
    pub config_hash: Option<String>,
    /// The fully resolved configuration, as TOML.
    pub config: Option<String>,
    pub seeds: BTreeMap<&'static str, u64>,
    pub versions: BTreeMap<&'static str, String>,
    pub model_fingerprint: Option<String>,
    pub outputs: Vec<String>,
    #[serde(skip)]
    clock: Option<Instant>,
}

impl RunRecord {
    pub fn start(command: &str, args: Vec<String>) -> RunRecord {
        let started = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64());
        let versions = BTreeMap::from([
            ("dehaze", env!("CARGO_PKG_VERSION").to_string()),
            (
                "checkpoint_format",
                dehaze_core::checkpoint::FORMAT_VERSION.to_string(),
            ),
        ]);
        RunRecord {
            command: command.to_string(),
            args,
            started,
            seconds: 0.0,
            exit_code: 0,
            status: "running",
            error: None,
            stage: None,
            device: "cpu".into(),
            config_hash: None,
            config: None,
            seeds: BTreeMap::new(),
            versions,
            model_fingerprint: None,
            outputs: Vec::new(),
            clock: Some(Instant::now()),
        }
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn finish(&mut self, code: i32, failure: Option<Failure>) {
        self.seconds = self.clock.map_or(0.0, |c| c.elapsed().as_secs_f64());
        self.exit_code = code;
        match failure {
            None => self.status = "ok",
            Some(Failure::User(m)) => {
                self.status = "user-error";
                self.error = Some(m);
            }
            Some(Failure::Runtime { stage, message }) => {
                self.status = "runtime-error";
                self.stage = Some(stage);
                self.error = Some(message);
            }
        }
    }

    pub fn append(&self, path: &Path) -> std::io::Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        writeln!(f, "{}", serde_json::to_string(self).expect("run record serializes"))
    }
}
