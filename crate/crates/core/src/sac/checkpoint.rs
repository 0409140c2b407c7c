use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::buffer::ReplayBuffer;
use super::trainer::Trainer;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "cmta-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// Suite the run trained on.
    pub suite: String,
    pub seed: u64,
    pub trainer: Trainer,
    /// False when the replay buffer was dropped to keep the file small; the
    /// trainer then resumes with an empty buffer.
    pub includes_buffer: bool,
}

#[derive(Deserialize)]
struct Header {
    format: String,
    version: u32,
}

impl Checkpoint {
    pub fn new(suite: &str, seed: u64, trainer: &Trainer, include_buffer: bool) -> Result<Self> {
        let mut trainer = trainer.clone();
        if !include_buffer {
            trainer.buffer = ReplayBuffer::new(trainer.config.buffer_capacity, trainer.config.n_tasks)?;
        }
        Ok(Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            suite: suite.to_string(),
            seed,
            trainer,
            includes_buffer: include_buffer,
        })
    }

    /// Writes to a temporary sibling, then renames into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            serde_json::to_writer(&mut w, self).map_err(|e| Error::Checkpoint(e.to_string()))?;
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        let header: Header = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{} is not a checkpoint: {e}", path.display())))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown checkpoint format `{}`", header.format)));
        }
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                header.version
            )));
        }
        let ck: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("corrupt checkpoint: {e}")))?;
        let t = &ck.trainer;
        if !t.adam.same_layout(&t.model.store) {
            return Err(Error::Checkpoint("optimizer state does not match the parameters".into()));
        }
        t.model.config.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(ck)
    }

    /// Loads only the header fields, without parsing tensors.
    pub fn read_version(path: &Path) -> Result<u32> {
        let r = BufReader::new(File::open(path)?);
        let header: Header = serde_json::from_reader(r).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(header.version)
    }
}
