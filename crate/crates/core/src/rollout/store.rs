//! Newline-delimited JSON episode files, one episode per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::EpisodeRecord;
use crate::error::{Error, Result};

pub fn read_episodes(path: impl AsRef<Path>) -> Result<Vec<EpisodeRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_episodes_from(file).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// Parses and validates every line; the first bad line aborts with its
/// 1-based line number. Blank lines are skipped.
pub fn read_episodes_from(reader: impl Read) -> Result<Vec<EpisodeRecord>> {
    let mut episodes = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io("<stream>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let episode: EpisodeRecord = serde_json::from_str(&line).map_err(|e| Error::Line {
            line: line_no,
            message: format!("parse error: {e}"),
        })?;
        episode.validate().map_err(|e| Error::Line {
            line: line_no,
            message: e.to_string(),
        })?;
        episodes.push(episode);
    }
    Ok(episodes)
}

pub fn write_episodes(episodes: &[EpisodeRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_episodes_to(episodes, &mut w).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_episodes_to(episodes: &[EpisodeRecord], mut w: impl Write) -> Result<()> {
    for e in episodes {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n").map_err(|e| Error::io("<stream>", e))?;
    }
    Ok(())
}
