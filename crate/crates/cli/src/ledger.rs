//! Append-only record of executed commands.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use mrilab::Error;

pub const LEDGER_HEADER: &str = "command\tconfig_hash\tseed\tstarted\tfinished\tstatus\tartifacts";

#[derive(Clone, Debug, PartialEq)]
pub struct LedgerEntry {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub started: u64,
    pub finished: u64,
    /// `ran` or `reused`.
    pub status: String,
    pub artifacts: Vec<PathBuf>,
}

impl LedgerEntry {
    fn to_line(&self) -> String {
        let arts: Vec<String> = self.artifacts.iter().map(|p| p.display().to_string()).collect();
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.command,
            self.config_hash,
            self.seed,
            self.started,
            self.finished,
            self.status,
            arts.join(";")
        )
    }

    fn from_line(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 7 {
            return None;
        }
        Some(Self {
            command: f[0].to_string(),
            config_hash: f[1].to_string(),
            seed: f[2].parse().ok()?,
            started: f[3].parse().ok()?,
            finished: f[4].parse().ok()?,
            status: f[5].to_string(),
            artifacts: f[6].split(';').filter(|s| !s.is_empty()).map(PathBuf::from).collect(),
        })
    }
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Tab-separated ledger file; lines are only ever appended.
#[derive(Clone, Debug)]
pub struct RunLedger {
    path: PathBuf,
}

impl RunLedger {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, Error> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        if !path.exists() {
            std::fs::write(&path, format!("{LEDGER_HEADER}\n")).map_err(|e| Error::io(&path, e))?;
        }
        Ok(Self { path })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, entry: &LedgerEntry) -> Result<(), Error> {
        let mut f = OpenOptions::new().append(true).open(&self.path).map_err(|e| Error::io(&self.path, e))?;
        writeln!(f, "{}", entry.to_line()).map_err(|e| Error::io(&self.path, e))
    }

    pub fn entries(&self) -> Result<Vec<LedgerEntry>, Error> {
        let text = std::fs::read_to_string(&self.path).map_err(|e| Error::io(&self.path, e))?;
        Ok(text.lines().skip(1).filter_map(LedgerEntry::from_line).collect())
    }

    /// Recorded artifacts that no longer exist on disk.
    pub fn missing_artifacts(&self) -> Result<Vec<PathBuf>, Error> {
        Ok(self.entries()?.into_iter().flat_map(|e| e.artifacts).filter(|p| !p.exists()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_and_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let l = RunLedger::open(dir.path().join("ledger.tsv")).unwrap();
        let e = LedgerEntry {
            command: "gen-data".into(),
            config_hash: "abc".into(),
            seed: 3,
            started: 10,
            finished: 12,
            status: "ran".into(),
            artifacts: vec![dir.path().join("x"), dir.path().join("y")],
        };
        l.append(&e).unwrap();
        l.append(&LedgerEntry { status: "reused".into(), ..e.clone() }).unwrap();
        let back = RunLedger::open(dir.path().join("ledger.tsv")).unwrap().entries().unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0], e);
        assert_eq!(l.missing_artifacts().unwrap().len(), 4);
    }
}
