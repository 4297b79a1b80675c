//! Append-only command log. One JSON object per line, each carrying a
//! sequence number one greater than the previous line's.

use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::controller::Command;
use crate::FleetError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub seq: u64,
    pub command: Command,
}

#[derive(Debug)]
pub struct Journal {
    path: PathBuf,
    file: File,
    next_seq: u64,
}

impl Journal {
    /// Opens (creating if needed) and reads the journal. A final line with
    /// no newline is the remnant of an interrupted append and is cut off.
    pub fn open(path: &Path) -> Result<(Self, Vec<JournalEntry>), FleetError> {
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)?;
        let mut text = Vec::new();
        file.read_to_end(&mut text)?;

        let complete = text.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
        if complete < text.len() {
            log::warn!(
                "{}: dropping {} bytes of a torn final record",
                path.display(),
                text.len() - complete
            );
            file.set_len(complete as u64)?;
            file.seek(SeekFrom::End(0))?;
        }

        let corrupt = |line: usize, message: String| FleetError::Journal {
            path: path.to_path_buf(),
            message: format!("line {line}: {message}"),
        };
        let mut entries = Vec::new();
        for (i, line) in text[..complete].split(|b| *b == b'\n').enumerate() {
            if line.is_empty() {
                continue;
            }
            let entry: JournalEntry =
                serde_json::from_slice(line).map_err(|e| corrupt(i + 1, e.to_string()))?;
            let expected = entries.len() as u64 + 1;
            if entry.seq != expected {
                return Err(corrupt(i + 1, format!("sequence {} where {expected} was expected", entry.seq)));
            }
            entries.push(entry);
        }
        let next_seq = entries.len() as u64 + 1;
        Ok((
            Self {
                path: path.to_path_buf(),
                file,
                next_seq,
            },
            entries,
        ))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    /// Durably appends one command and returns its sequence number.
    pub fn append(&mut self, command: &Command) -> Result<u64, FleetError> {
        let entry = JournalEntry {
            seq: self.next_seq,
            command: command.clone(),
        };
        let mut line = serde_json::to_vec(&entry).expect("commands serialize");
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.sync_data()?;
        self.next_seq += 1;
        Ok(entry.seq)
    }
}
