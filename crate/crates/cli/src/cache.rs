//! On-disk cache of return-probability rows.
//!
//! ```text
//! # rwalk-cache v1
//! sha256=<hex digest of the series key>
//! 0,1.0000000000000000e0,0.0000000000000000e0
//! ...
//! ```

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rwalk_core::SeriesRow;
use sha2::{Digest, Sha256};

use crate::table::{format_row, parse_row};
use crate::CliError;

pub const HEADER: &str = "# rwalk-cache v1";

/// Hex digest identifying one series independently of its length.
pub fn digest(key: &str) -> String {
    let mut h = Sha256::new();
    h.update(key.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub struct Cache {
    path: PathBuf,
    digest: String,
}

impl Cache {
    pub fn new(dir: &Path, key: &str) -> Self {
        let digest = digest(key);
        Cache {
            path: dir.join(format!("{}.csv", &digest[..16])),
            digest,
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Cached rows, or nothing when the file is absent, malformed or keyed
    /// by another digest.
    pub fn load(&self) -> Vec<SeriesRow> {
        let Ok(text) = fs::read_to_string(&self.path) else {
            return Vec::new();
        };
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Vec::new();
        }
        if lines.next().and_then(|l| l.strip_prefix("sha256=")) != Some(self.digest.as_str()) {
            return Vec::new();
        }
        let mut rows = Vec::new();
        for line in lines {
            match parse_row(line) {
                Some(r) if r.n == rows.len() => rows.push(r),
                _ => return Vec::new(),
            }
        }
        rows
    }

    /// Appends the rows past the cached ones, starting a fresh file when the
    /// cache is unusable.
    pub fn store(&self, rows: &[SeriesRow]) -> Result<(), CliError> {
        let have = self.load().len();
        let io = |source| CliError::Io {
            path: self.path.clone(),
            source,
        };
        if let Some(dir) = self.path.parent() {
            fs::create_dir_all(dir).map_err(io)?;
        }
        let mut out = if have == 0 {
            let mut f = fs::File::create(&self.path).map_err(io)?;
            write!(f, "{HEADER}\nsha256={}\n", self.digest).map_err(io)?;
            f
        } else {
            OpenOptions::new()
                .append(true)
                .open(&self.path)
                .map_err(io)?
        };
        let mut buf = String::new();
        for r in rows.iter().skip(have) {
            buf.push_str(&format_row(r));
        }
        out.write_all(buf.as_bytes()).map_err(io)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_and_extend() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Cache::new(dir.path(), "key");
        assert!(cache.load().is_empty());
        let rows: Vec<_> = (0..10)
            .map(|n| SeriesRow::new(n, 1.0 / (n + 1) as f64, 1e-17 * n as f64))
            .collect();
        cache.store(&rows[..4]).unwrap();
        assert_eq!(cache.load(), rows[..4].to_vec());
        cache.store(&rows).unwrap();
        assert_eq!(cache.load(), rows);
        let other = Cache {
            path: cache.path.clone(),
            digest: digest("other"),
        };
        assert!(other.load().is_empty());
    }
}
