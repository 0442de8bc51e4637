//! Versioned JSON checkpoints. Floats are written in shortest round-trip form
//! and parsed exactly, so save → load reproduces every parameter bitwise.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    version: u32,
    kind: String,
    model: T,
}

pub fn save<T: Serialize>(kind: &str, model: &T, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(
        &mut w,
        &Envelope {
            version: CHECKPOINT_VERSION,
            kind: kind.to_string(),
            model,
        },
    )?;
    w.flush()?;
    Ok(())
}

pub fn load<T: DeserializeOwned>(kind: &str, path: &Path) -> Result<T> {
    let env: Envelope<T> = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    if env.version != CHECKPOINT_VERSION {
        return Err(Error::config(format!(
            "{}: checkpoint version {} (expected {CHECKPOINT_VERSION})",
            path.display(),
            env.version
        )));
    }
    if env.kind != kind {
        return Err(Error::config(format!(
            "{}: checkpoint holds a {} model, expected {kind}",
            path.display(),
            env.kind
        )));
    }
    Ok(env.model)
}
