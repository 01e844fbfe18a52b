use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::error::Category;

use super::{CorpusError, CorpusSplit, Dialog};
use crate::taxonomy::LabelSpace;

/// Load and validate a corpus against the default label space.
pub fn load_corpus(path: &Path) -> Result<CorpusSplit, CorpusError> {
    load_corpus_with(path, &LabelSpace::default())
}

pub fn load_corpus_with(path: &Path, space: &LabelSpace) -> Result<CorpusSplit, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let split = parse_corpus(&text)?;
    split.validate(space)?;
    Ok(split)
}

/// Parse without validation. Blank lines are skipped.
pub fn parse_corpus(text: &str) -> Result<CorpusSplit, CorpusError> {
    let mut split = CorpusSplit::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let dialog: Dialog = serde_json::from_str(line).map_err(|e| {
            let line = i + 1;
            let message = e.to_string();
            match e.classify() {
                Category::Data => CorpusError::Schema { line, message },
                _ => CorpusError::Parse { line, message },
            }
        })?;
        split.push(dialog);
    }
    Ok(split)
}

pub fn write_corpus(split: &CorpusSplit, mut out: impl Write) -> std::io::Result<()> {
    for d in split.iter() {
        serde_json::to_writer(&mut out, d)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_corpus(split: &CorpusSplit, path: &Path) -> Result<(), CorpusError> {
    let io_err = |source| CorpusError::Io { path: path.display().to_string(), source };
    let mut buf = Vec::new();
    write_corpus(split, &mut buf).map_err(io_err)?;
    fs::write(path, buf).map_err(io_err)
}
