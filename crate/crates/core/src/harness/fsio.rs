use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use tempfile::NamedTempFile;

use crate::error::{Error, Result};
use crate::synthgen::read_labels;
use crate::synthgen::{Dataset, Labels};

use super::labels::LabelCapability;

/// Writes through a temporary file in the target directory and renames it
/// into place, so readers never see a partial file.
pub fn write_atomic<F>(path: &Path, fill: F) -> Result<()>
where
    F: FnOnce(&mut dyn Write) -> Result<()>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = NamedTempFile::new_in(dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        fill(&mut w)?;
        w.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, |w| Ok(w.write_all(text.as_bytes())?))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let f = fs::File::open(path)
        .map_err(|e| Error::MissingInput(format!("dataset {}: {e}", path.display())))?;
    Dataset::read_from(BufReader::new(f))
}

/// Reads the label sidecar. Requires a capability, which unsupervised
/// fitness cannot obtain.
pub fn load_labels(path: &Path, _cap: &LabelCapability) -> Result<Labels> {
    let f = fs::File::open(path)
        .map_err(|e| Error::LabelAccess(format!("label sidecar {} unavailable: {e}", path.display())))?;
    read_labels(BufReader::new(f))
}
