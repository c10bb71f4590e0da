//! Record-per-line JSON files.
//!
//! Dataset schema v1: each line is one [`Scene`] object with top-level keys
//! `scene_id`, `current_index`, `agents`, `polylines`. Agents carry
//! `agent_id`, `category`, `is_interest` and `states` (objects with `x`, `y`,
//! `heading`, `vx`, `vy`, `valid`); polylines carry `polyline_id`,
//! `lane_type` and `points` (objects with `x`, `y`, `dir_x`, `dir_y`).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::Scene;
use crate::error::{Error, Result};

/// Writes one JSON record per line.
pub fn write_jsonl<T: Serialize>(records: &[T], path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads one JSON record per non-blank line, naming the offending line and
/// field path on failure.
pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let de = &mut serde_json::Deserializer::from_str(&line);
        let record = serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            Error::Malformed {
                line: i + 1,
                field,
                message: e.into_inner().to_string(),
            }
        })?;
        records.push(record);
    }
    Ok(records)
}

pub fn save_dataset(scenes: &[Scene], path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(scenes, path)
}

/// Loads and validates every scene in a dataset file.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Scene>> {
    let scenes: Vec<Scene> = read_jsonl(path)?;
    for s in &scenes {
        s.validate()?;
    }
    Ok(scenes)
}
