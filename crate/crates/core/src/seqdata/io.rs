//! JSON Lines persistence for datasets.
//!
//! Line 1 is a header carrying the grammar, split, seed and (when present) the
//! corruption spec. Every further line is one sample. Paths ending in `.gz`
//! are gzip-compressed transparently.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Corruption, CorruptionSpec, DataError, Dataset, PhaseGrammar, Result, SequenceSample, Split};

pub const FORMAT_TAG: &str = "csl-seqdata/1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    grammar: PhaseGrammar,
    split: Split,
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    corruption: Option<CorruptionSpec>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleRecord {
    id: String,
    frames: Vec<Vec<f64>>,
    labels: Vec<u32>,
    error_mask: Vec<u8>,
    corruption: Option<Corruption>,
}

impl From<&SequenceSample> for SampleRecord {
    fn from(s: &SequenceSample) -> Self {
        Self {
            id: s.id.clone(),
            frames: s.frames.rows().into_iter().map(|r| r.to_vec()).collect(),
            labels: s.labels.iter().map(|&l| l as u32).collect(),
            error_mask: s.error_mask.iter().map(|&e| e as u8).collect(),
            corruption: s.corruption.clone(),
        }
    }
}

impl SampleRecord {
    fn into_sample(self, feature_dim: usize) -> Result<SequenceSample> {
        let schema = |message: String| DataError::Schema {
            id: self.id.clone(),
            message,
        };
        let t = self.frames.len();
        if let Some(row) = self.frames.iter().find(|r| r.len() != feature_dim) {
            return Err(schema(format!(
                "frame width {} differs from feature_dim {feature_dim}",
                row.len()
            )));
        }
        if let Some(&bad) = self.error_mask.iter().find(|&&m| m > 1) {
            return Err(schema(format!("error_mask entry {bad} is not 0 or 1")));
        }
        let flat: Vec<f64> = self.frames.iter().flatten().copied().collect();
        let frames = Array2::from_shape_vec((t, feature_dim), flat)
            .map_err(|e| schema(e.to_string()))?;
        Ok(SequenceSample {
            frames,
            labels: self.labels.iter().map(|&l| l as usize).collect(),
            error_mask: self.error_mask.iter().map(|&m| m == 1).collect(),
            corruption: self.corruption,
            id: self.id,
        })
    }
}

/// Serialises a dataset to its canonical JSON Lines form.
pub fn write_jsonl<W: Write>(ds: &Dataset, mut out: W) -> Result<()> {
    let header = Header {
        format: FORMAT_TAG.to_string(),
        grammar: ds.grammar.clone(),
        split: ds.split,
        seed: ds.seed,
        corruption: ds.corruption.clone(),
    };
    serde_json::to_writer(&mut out, &header).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    for s in &ds.samples {
        serde_json::to_writer(&mut out, &SampleRecord::from(s)).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Dataset> {
    let mut lines = input.lines().enumerate();
    let header: Header = match lines.next() {
        Some((_, line)) => parse_line(&line?, 1)?,
        None => {
            return Err(DataError::Parse {
                line: 1,
                message: "empty file, missing header".into(),
            })
        }
    };
    if header.format != FORMAT_TAG {
        return Err(DataError::Parse {
            line: 1,
            message: format!("unsupported format `{}`", header.format),
        });
    }
    header.grammar.validate()?;
    let mut samples = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleRecord = parse_line(&line, i + 1)?;
        samples.push(record.into_sample(header.grammar.feature_dim)?);
    }
    let ds = Dataset {
        grammar: header.grammar,
        samples,
        split: header.split,
        seed: header.seed,
        corruption: header.corruption,
    };
    ds.validate()?;
    Ok(ds)
}

fn parse_line<T: serde::de::DeserializeOwned>(line: &str, line_no: usize) -> Result<T> {
    serde_json::from_str(line).map_err(|e| DataError::Parse {
        line: line_no,
        message: e.to_string(),
    })
}

fn is_gzip(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

pub fn write_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    ds.validate()?;
    let file = BufWriter::new(File::create(path)?);
    if is_gzip(path) {
        let mut enc = GzEncoder::new(file, Compression::default());
        write_jsonl(ds, &mut enc)?;
        enc.finish()?.flush()?;
    } else {
        write_jsonl(ds, file)?;
    }
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path)?;
    let reader: Box<dyn Read> = if is_gzip(path) {
        Box::new(GzDecoder::new(file))
    } else {
        Box::new(file)
    };
    read_jsonl(BufReader::new(reader))
}

/// SHA-256 of the canonical serialisation of the whole dataset.
pub fn dataset_fingerprint(ds: &Dataset) -> String {
    let mut buf = Vec::new();
    write_jsonl(ds, &mut buf).expect("writing to memory cannot fail");
    hex::encode(Sha256::digest(&buf))
}

/// SHA-256 of the grammar alone; two datasets with equal grammar fingerprints
/// share class set, feature width and generating distribution.
pub fn grammar_fingerprint(grammar: &PhaseGrammar) -> String {
    let bytes = serde_json::to_vec(grammar).expect("grammar serialises");
    hex::encode(Sha256::digest(&bytes))
}
