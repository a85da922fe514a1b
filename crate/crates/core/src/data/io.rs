//! Line-delimited JSON dataset and corpus files.
//!
//! The first line is a header object
//! `{"format":"laser-ds","version":1,"kind":...,"gen_config":...}`; each
//! following line is one record. Token ids are plain integer arrays.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Corpus, CorpusDoc, Dataset, GenConfig, TrainingExample};

pub const DATA_FORMAT: &str = "laser-ds";
pub const DATA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataFileError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("missing header line")]
    MissingHeader,
    #[error("bad header: {0}")]
    BadHeader(String),
    #[error("unsupported format {format:?} (expected {DATA_FORMAT:?})")]
    WrongFormat { format: String },
    #[error("unsupported version {version} (expected {DATA_VERSION})")]
    WrongVersion { version: u32 },
    #[error("malformed record at line {line}: {message} (last good line {last_good})")]
    BadRecord { line: usize, last_good: usize, message: String },
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    kind: String,
    gen_config: GenConfig,
}

fn write_lines<T: Serialize>(
    path: &Path,
    header: &Header,
    records: &[T],
) -> Result<(), DataFileError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, header).map_err(|e| DataFileError::BadHeader(e.to_string()))?;
    w.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut w, r)
            .map_err(|e| DataFileError::BadRecord { line: 0, last_good: 0, message: e.to_string() })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_header(line: Option<Result<String, std::io::Error>>) -> Result<Header, DataFileError> {
    let line = line.ok_or(DataFileError::MissingHeader)??;
    let header: Header =
        serde_json::from_str(&line).map_err(|e| DataFileError::BadHeader(e.to_string()))?;
    if header.format != DATA_FORMAT {
        return Err(DataFileError::WrongFormat { format: header.format });
    }
    if header.version != DATA_VERSION {
        return Err(DataFileError::WrongVersion { version: header.version });
    }
    Ok(header)
}

fn read_records<T: for<'de> Deserialize<'de>>(
    lines: std::io::Lines<BufReader<File>>,
) -> Result<(Header, Vec<T>), DataFileError> {
    let mut lines = lines;
    let header = read_header(lines.next())?;
    let mut records = Vec::new();
    let mut last_good = 1usize;
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: T = serde_json::from_str(&line).map_err(|e| DataFileError::BadRecord {
            line: line_no,
            last_good,
            message: e.to_string(),
        })?;
        records.push(record);
        last_good = line_no;
    }
    Ok((header, records))
}

pub fn save_dataset(path: &Path, dataset: &Dataset) -> Result<(), DataFileError> {
    let header = Header {
        format: DATA_FORMAT.into(),
        version: DATA_VERSION,
        kind: dataset.kind.clone(),
        gen_config: dataset.gen_config.clone(),
    };
    write_lines(path, &header, &dataset.examples)
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DataFileError> {
    let lines = BufReader::new(File::open(path)?).lines();
    let (header, examples): (Header, Vec<TrainingExample>) = read_records(lines)?;
    Ok(Dataset { kind: header.kind, gen_config: header.gen_config, examples })
}

pub fn save_corpus(path: &Path, corpus: &Corpus) -> Result<(), DataFileError> {
    let header = Header {
        format: DATA_FORMAT.into(),
        version: DATA_VERSION,
        kind: "corpus".into(),
        gen_config: corpus.gen_config.clone(),
    };
    write_lines(path, &header, &corpus.docs)
}

pub fn load_corpus(path: &Path) -> Result<Corpus, DataFileError> {
    let lines = BufReader::new(File::open(path)?).lines();
    let (header, docs): (Header, Vec<CorpusDoc>) = read_records(lines)?;
    Ok(Corpus { gen_config: header.gen_config, docs })
}
