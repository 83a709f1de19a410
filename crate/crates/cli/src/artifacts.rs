//! Output directory handling: exclusive lock, atomic writes and the
//! checksum manifest.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

pub const LOCK_FILE: &str = ".mfc.lock";
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const MANIFEST_SCHEMA: &str = "# schema: manifest v1";

/// Held while an experiment writes into a directory; removed on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    /// Creates `dir` if needed and takes its lock. Fails with
    /// `AlreadyExists` when another process holds it (or a crashed run left
    /// it behind).
    pub fn acquire(dir: &Path) -> io::Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        let mut f = OpenOptions::new().write(true).create_new(true).open(&path)?;
        writeln!(f, "{}", std::process::id())?;
        Ok(Self { path })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Sink handed to [`write_atomic`] callbacks.
pub type Sink<'a> = io::BufWriter<&'a mut File>;

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, fill: impl FnOnce(&mut Sink<'_>) -> io::Result<()>) -> io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = io::BufWriter::new(tmp.as_file_mut());
        fill(&mut w)?;
        w.flush()?;
    }
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn sha256_file(path: &Path) -> io::Result<String> {
    let mut hasher = Sha256::new();
    io::copy(&mut File::open(path)?, &mut hasher)?;
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Path relative to the run directory, `/`-separated.
    pub file: String,
    pub bytes: u64,
    pub sha256: String,
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<ManifestEntry>) -> io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        let name = entry.file_name();
        if name == LOCK_FILE || name == MANIFEST_FILE {
            continue;
        }
        if entry.file_type()?.is_dir() {
            collect(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("walked from root");
            out.push(ManifestEntry {
                file: rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"),
                bytes: entry.metadata()?.len(),
                sha256: sha256_file(&path)?,
            });
        }
    }
    Ok(())
}

/// Checksums every file under `dir` (except the lock and the manifest
/// itself) and writes `manifest.csv`.
pub fn write_manifest(dir: &Path) -> io::Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    collect(dir, dir, &mut entries)?;
    entries.sort_by(|a, b| a.file.cmp(&b.file));
    write_atomic(&dir.join(MANIFEST_FILE), |w| {
        writeln!(w, "{MANIFEST_SCHEMA}")?;
        writeln!(w, "file,bytes,sha256")?;
        for e in &entries {
            writeln!(w, "{},{},{}", e.file, e.bytes, e.sha256)?;
        }
        Ok(())
    })?;
    Ok(entries)
}
