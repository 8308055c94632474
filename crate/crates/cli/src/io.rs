use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use csreplay::corpus::{parse_conllu, parse_jsonl, Corpus};
use csreplay::{Error, LanguageId, Result};
use serde::Serialize;

/// Parses a corpus file, choosing the format from the extension
/// (`.jsonl`/`.json` or CoNLL-U otherwise).
pub fn read_corpus(path: &Path, lang: LanguageId) -> Result<Corpus> {
    let file = BufReader::new(File::open(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?);
    match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl" | "json") => parse_jsonl(file, lang),
        _ => parse_conllu(file, lang),
    }
}

/// Output directory for a command; created on first use.
pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn create(root: Option<&Path>) -> Result<Self> {
        let root = root.ok_or_else(|| Error::Usage("an output directory is required (--out)".into()))?;
        fs::create_dir_all(root)?;
        Ok(OutDir { root: root.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::data(e.to_string()))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn csv(&self, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header).map_err(csv_err)?;
        for row in rows {
            w.write_record(&row).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::data(e.to_string()))?;
        self.write(name, &bytes)
    }

    pub fn writer(&self, name: &str) -> Result<BufWriter<File>> {
        Ok(BufWriter::new(File::create(self.path(name))?))
    }
}

pub fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::data(format!("{other:?}")),
    }
}

pub fn flush(mut w: impl Write) -> Result<()> {
    w.flush()?;
    Ok(())
}
