use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{Problem, Symbols};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: problem {id:?} fails validation: {message}")]
    Invalid { line: usize, id: String, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes one JSON object per line with fields in a fixed order.
pub fn write_corpus(path: &Path, problems: &[Problem]) -> Result<(), CorpusError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for p in problems {
        let line = serde_json::to_string(p).expect("problems always serialize");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn load_corpus(path: &Path) -> Result<Vec<Problem>, CorpusError> {
    load_corpus_with(path, &Symbols::default())
}

/// Loads and validates a JSONL corpus; blank lines are skipped.
pub fn load_corpus_with(path: &Path, symbols: &Symbols) -> Result<Vec<Problem>, CorpusError> {
    let file = File::open(path).map_err(io_err(path))?;
    read_corpus(BufReader::new(file), symbols)
}

pub fn read_corpus<R: Read>(reader: BufReader<R>, symbols: &Symbols) -> Result<Vec<Problem>, CorpusError> {
    let mut problems = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| CorpusError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let p: Problem = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        p.validate(symbols).map_err(|message| CorpusError::Invalid {
            line: line_no,
            id: p.id.clone(),
            message,
        })?;
        problems.push(p);
    }
    Ok(problems)
}
