//! Session directories:
//!
//! ```text
//! <root>/<id>/config.json              submitted SessionConfig
//! <root>/<id>/state.json               network + head + report at the last committed cursor
//! <root>/<id>/report.json              copy of the report for readers
//! <root>/<id>/records/<idx>.json       one FeedbackRecord per corrected sample
//! <root>/<id>/records/<idx>_corrected.png
//! ```
//!
//! `state.json` is the commit point. A record may exist for an index the
//! state has not reached yet; it is rewritten when that sample is redone.

use std::fs;
use std::path::{Path, PathBuf};

use hitta_core::checkpoint::Checkpoint;
use hitta_core::datagen::write_mask;
use hitta_core::feedback_adapt::FeedbackRecord;
use hitta_core::harness::{StreamReport, StreamSession};
use hitta_core::mask::LabelMap;
use hitta_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::api::SessionConfig;

const CONFIG: &str = "config.json";
const STATE: &str = "state.json";
const REPORT: &str = "report.json";
const RECORDS: &str = "records";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SavedState {
    pub checkpoint: Checkpoint,
    pub report: StreamReport,
}

#[derive(Debug, Clone)]
pub struct SessionDir {
    pub path: PathBuf,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_vec_pretty(value).map_err(|e| Error::format("json document", e))?;
    write_atomic(path, &text)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&text).map_err(|e| Error::format("json document", e))
}

impl SessionDir {
    pub fn create(root: &Path, id: &str, cfg: &SessionConfig) -> Result<Self> {
        let path = root.join(id);
        if path.exists() {
            return Err(Error::Conflict(format!("session directory {} already exists", path.display())));
        }
        fs::create_dir_all(path.join(RECORDS)).map_err(|e| Error::io(&path, e))?;
        let dir = Self { path };
        write_json(&dir.path.join(CONFIG), cfg)?;
        Ok(dir)
    }

    pub fn open(path: PathBuf) -> Self {
        Self { path }
    }

    pub fn id(&self) -> String {
        self.path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default()
    }

    pub fn config(&self) -> Result<SessionConfig> {
        read_json(&self.path.join(CONFIG))
    }

    pub fn record_path(&self, index: usize) -> PathBuf {
        self.path.join(RECORDS).join(format!("{index:05}.json"))
    }

    pub fn write_record(&self, index: usize, record: &FeedbackRecord, corrected: &LabelMap) -> Result<()> {
        let png = self.path.join(RECORDS).join(format!("{index:05}_corrected.png"));
        write_mask(&png, corrected)?;
        write_json(&self.record_path(index), record)
    }

    pub fn read_record(&self, index: usize) -> Result<FeedbackRecord> {
        read_json(&self.record_path(index))
    }

    pub fn save_state(&self, session: &mut StreamSession) -> Result<()> {
        let report = session.report().clone();
        let (net, head) = session.parts_mut();
        let state = SavedState {
            checkpoint: Checkpoint::capture(net, head),
            report,
        };
        write_json(&self.path.join(STATE), &state)?;
        write_json(&self.path.join(REPORT), &state.report)
    }

    /// `None` until the first sample is committed.
    pub fn load_state(&self) -> Result<Option<SavedState>> {
        let path = self.path.join(STATE);
        if !path.exists() {
            return Ok(None);
        }
        read_json(&path).map(Some)
    }
}
