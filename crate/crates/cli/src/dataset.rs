//! Labelled record files: a little-endian binary layout and a CSV twin.
//!
//! Binary layout: `"VLFD"`, version `u16`, record count `u32`, record
//! length `u32`, then per record one `u8` label followed by the samples as
//! `f32`. Everything is little-endian.

use std::io::{Read, Write};
use std::path::Path;

use msrt_core::datagen::{SignalRecord, N_CLASSES};

use crate::error::{CliError, CliResult, ParseError};

pub const MAGIC: [u8; 4] = *b"VLFD";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 14;

/// Records held at f32 precision, widened to f64 for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    record_len: usize,
    labels: Vec<usize>,
    records: Vec<Vec<f64>>,
}

impl Dataset {
    /// Checks lengths, labels and ranges; samples are rounded to f32.
    pub fn new(record_len: usize, labels: Vec<usize>, mut records: Vec<Vec<f64>>) -> CliResult<Self> {
        if labels.len() != records.len() {
            return Err(CliError::Validation(format!(
                "{} labels for {} records",
                labels.len(),
                records.len()
            )));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= N_CLASSES) {
            return Err(CliError::Validation(format!("record {i}: label {y} out of range")));
        }
        for (i, r) in records.iter_mut().enumerate() {
            if r.len() != record_len {
                return Err(CliError::Validation(format!(
                    "record {i} has {} samples, expected {record_len}",
                    r.len()
                )));
            }
            for x in r.iter_mut() {
                let q = *x as f32;
                if !q.is_finite() {
                    return Err(CliError::Validation(format!(
                        "record {i}: sample {x} is not representable as a finite f32"
                    )));
                }
                *x = q as f64;
            }
        }
        Ok(Dataset {
            record_len,
            labels,
            records,
        })
    }

    pub fn from_signals(record_len: usize, signals: &[SignalRecord]) -> CliResult<Self> {
        Self::new(
            record_len,
            signals.iter().map(|s| s.label).collect(),
            signals.iter().map(|s| s.samples.clone()).collect(),
        )
    }

    pub fn record_len(&self) -> usize {
        self.record_len
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn records(&self) -> &[Vec<f64>] {
        &self.records
    }

    pub fn sample_refs(&self) -> Vec<&[f64]> {
        self.records.iter().map(Vec::as_slice).collect()
    }

    /// Subset in the order of `indices`.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            record_len: self.record_len,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    /// Applies `f` to every record, keeping labels.
    pub fn try_map<F>(&self, mut f: F) -> CliResult<Dataset>
    where
        F: FnMut(&[f64]) -> CliResult<Vec<f64>>,
    {
        let records = self.records.iter().map(|r| f(r)).collect::<CliResult<Vec<_>>>()?;
        Dataset::new(self.record_len, self.labels.clone(), records)
    }

    pub fn encoded_len(count: usize, record_len: usize) -> u128 {
        HEADER_LEN as u128 + count as u128 * (1 + 4 * record_len as u128)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::encoded_len(self.len(), self.record_len) as usize);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.record_len as u32).to_le_bytes());
        for (y, r) in self.labels.iter().zip(&self.records) {
            out.push(*y as u8);
            for &x in r {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ParseError> {
        if bytes.len() < HEADER_LEN {
            return Err(ParseError::new(
                bytes.len() as u64,
                format!("truncated header: expected {HEADER_LEN} bytes, found {}", bytes.len()),
            ));
        }
        if bytes[..4] != MAGIC {
            return Err(ParseError::new(0, format!("bad magic {:?}, expected \"VLFD\"", &bytes[..4])));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(ParseError::new(4, format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let record_len = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
        let expected = Self::encoded_len(count, record_len);
        let actual = bytes.len() as u128;
        if expected != actual {
            let what = if actual < expected { "truncated payload" } else { "trailing bytes" };
            return Err(ParseError::new(
                expected.min(actual) as u64,
                format!(
                    "{what}: {count} records of length {record_len} need {expected} bytes, found {actual}"
                ),
            ));
        }

        let mut labels = Vec::with_capacity(count);
        let mut records = Vec::with_capacity(count);
        let mut pos = HEADER_LEN;
        for i in 0..count {
            let y = bytes[pos] as usize;
            if y >= N_CLASSES {
                return Err(ParseError::new(pos as u64, format!("record {i}: label {y} out of range")));
            }
            pos += 1;
            let mut r = Vec::with_capacity(record_len);
            for chunk in bytes[pos..pos + 4 * record_len].chunks_exact(4) {
                let x = f32::from_le_bytes(chunk.try_into().unwrap());
                if !x.is_finite() {
                    return Err(ParseError::new(pos as u64, format!("record {i}: non-finite sample")));
                }
                r.push(x as f64);
                pos += 4;
            }
            labels.push(y);
            records.push(r);
        }
        Ok(Dataset {
            record_len,
            labels,
            records,
        })
    }

    /// CSV with header `label,s0,...,s{L-1}`; samples use the shortest
    /// decimal form that round-trips through f32.
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["label".to_string()];
        header.extend((0..self.record_len).map(|i| format!("s{i}")));
        wr.write_record(&header)?;
        for (y, r) in self.labels.iter().zip(&self.records) {
            let mut row = vec![y.to_string()];
            row.extend(r.iter().map(|&x| (x as f32).to_string()));
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, String> {
        let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
        let header = rd.headers().map_err(|e| e.to_string())?.clone();
        if header.get(0) != Some("label") {
            return Err("header must start with `label`".into());
        }
        for (i, h) in header.iter().skip(1).enumerate() {
            if h != format!("s{i}") {
                return Err(format!("header column {} is `{h}`, expected `s{i}`", i + 1));
            }
        }
        let record_len = header.len() - 1;
        let mut labels = Vec::new();
        let mut records = Vec::new();
        for row in rd.records() {
            let row = row.map_err(|e| e.to_string())?;
            let line = row.position().map_or(0, |p| p.line());
            let y: usize = row[0]
                .trim()
                .parse()
                .map_err(|_| format!("line {line}: bad label `{}`", &row[0]))?;
            if y >= N_CLASSES {
                return Err(format!("line {line}: label {y} out of range"));
            }
            let mut samples = Vec::with_capacity(record_len);
            for field in row.iter().skip(1) {
                let x: f32 = field
                    .trim()
                    .parse()
                    .map_err(|_| format!("line {line}: bad sample `{field}`"))?;
                if !x.is_finite() {
                    return Err(format!("line {line}: non-finite sample"));
                }
                samples.push(x as f64);
            }
            labels.push(y);
            records.push(samples);
        }
        Ok(Dataset {
            record_len,
            labels,
            records,
        })
    }
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Reads binary or CSV, chosen by the `.csv` extension.
pub fn read_dataset(path: &Path) -> CliResult<Dataset> {
    if is_csv(path) {
        let f = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
        Dataset::read_csv(std::io::BufReader::new(f)).map_err(|m| CliError::syntax(path, m))
    } else {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Dataset::from_bytes(&bytes).map_err(|e| CliError::parse(path, e))
    }
}

/// Encodes for `path` (binary or CSV, by extension).
pub fn encode_for(path: &Path, data: &Dataset) -> Vec<u8> {
    if is_csv(path) {
        let mut buf = Vec::new();
        data.write_csv(&mut buf).expect("writing CSV to memory");
        buf
    } else {
        data.to_bytes()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dataset {
        Dataset::new(3, vec![0, 9], vec![vec![0.1, -2.0, 3.5], vec![1e-3, 0.0, -0.25]]).unwrap()
    }

    #[test]
    fn binary_round_trip_is_exact() {
        let d = small();
        let bytes = d.to_bytes();
        assert_eq!(bytes.len(), HEADER_LEN + 2 * (1 + 12));
        assert_eq!(Dataset::from_bytes(&bytes).unwrap(), d);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let d = small();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("label,s0,s1,s2\n"));
        assert_eq!(Dataset::read_csv(&buf[..]).unwrap(), d);
    }

    #[test]
    fn empty_dataset_encodes_header_only() {
        let d = Dataset::new(1000, vec![], vec![]).unwrap();
        let bytes = d.to_bytes();
        assert_eq!(bytes.len(), HEADER_LEN);
        let back = Dataset::from_bytes(&bytes).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.record_len(), 1000);
    }

    #[test]
    fn truncation_names_both_counts() {
        let bytes = small().to_bytes();
        let err = Dataset::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.message.contains("need 40 bytes, found 37"), "{err}");
        assert_eq!(err.offset, 37);
    }

    #[test]
    fn header_faults_point_at_their_field() {
        let mut bytes = small().to_bytes();
        bytes[1] = b'X';
        assert_eq!(Dataset::from_bytes(&bytes).unwrap_err().offset, 0);
        let mut bytes = small().to_bytes();
        bytes[4] = 7;
        assert_eq!(Dataset::from_bytes(&bytes).unwrap_err().offset, 4);
        let mut bytes = small().to_bytes();
        bytes[HEADER_LEN + 13] = 10;
        assert_eq!(Dataset::from_bytes(&bytes).unwrap_err().offset, (HEADER_LEN + 13) as u64);
    }

    #[test]
    fn construction_rejects_bad_records() {
        assert!(Dataset::new(2, vec![0], vec![vec![1.0]]).is_err());
        assert!(Dataset::new(1, vec![10], vec![vec![1.0]]).is_err());
        assert!(Dataset::new(1, vec![0], vec![vec![1e300]]).is_err());
    }
}
