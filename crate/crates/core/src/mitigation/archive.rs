//! Bundle archive: JSON lines behind a
//! `{"format":"lvlm-fairness-bundles","version":1}` header, one
//! [`RationaleBundle`] per line, append only.

use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::RationaleBundle;

pub const BUNDLE_FORMAT: &str = "lvlm-fairness-bundles";
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

pub struct BundleArchive {
    file: Mutex<File>,
}

fn invalid(message: String) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, message)
}

impl BundleArchive {
    /// Open for appending, writing the header if the file is new or empty.
    pub fn open(path: &Path) -> io::Result<Self> {
        let fresh = std::fs::metadata(path).map_or(true, |m| m.len() == 0);
        if !fresh {
            read_bundles(path)?;
        }
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            let header = serde_json::to_string(&Header {
                format: BUNDLE_FORMAT.into(),
                version: BUNDLE_VERSION,
            })?;
            writeln!(file, "{header}")?;
        }
        Ok(BundleArchive { file: Mutex::new(file) })
    }

    pub fn append(&self, bundle: &RationaleBundle) -> io::Result<()> {
        let line = serde_json::to_string(bundle)?;
        let mut file = self.file.lock().expect("archive lock");
        writeln!(file, "{line}")?;
        file.flush()
    }
}

pub fn read_bundles(path: &Path) -> io::Result<Vec<RationaleBundle>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Header = lines
        .next()
        .and_then(|l| serde_json::from_str(l).ok())
        .ok_or_else(|| invalid(format!("{} has no bundle header", path.display())))?;
    if header.format != BUNDLE_FORMAT || header.version != BUNDLE_VERSION {
        return Err(invalid(format!(
            "{}: unsupported archive {} v{}",
            path.display(),
            header.format,
            header.version
        )));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| invalid(format!("{} line {}: {e}", path.display(), i + 2))))
        .collect()
}
