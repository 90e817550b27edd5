//! Line-delimited JSON files for corpora, edit streams and subspace exports.
//!
//! The first line is a header naming the format, its version and the kind of
//! payload; every further line is one record tagged with its `role`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::{EditRequest, MemoryModel};
use crate::subspace::SubspaceSnapshot;

pub const FORMAT_NAME: &str = "oedit-records";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Corpus,
    Stream,
    Subspace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "snake_case")]
pub enum Record {
    Header {
        format: String,
        version: u32,
        kind: RecordKind,
    },
    Shape {
        d: usize,
        d_m: usize,
        n_vocab: usize,
    },
    Codebook {
        index: usize,
        vector: Vec<f64>,
    },
    Weights {
        row: usize,
        vector: Vec<f64>,
    },
    Pretrain {
        index: usize,
        label: usize,
        key: Vec<f64>,
    },
    Heldout {
        index: usize,
        label: usize,
        key: Vec<f64>,
    },
    Covariance {
        row: usize,
        vector: Vec<f64>,
    },
    Edit {
        index: usize,
        target_index: usize,
        key_samples: Vec<Vec<f64>>,
        paraphrase_keys: Vec<Vec<f64>>,
        unrelated_keys: Vec<Vec<f64>>,
    },
    Schedule {
        iteration: usize,
        r: usize,
        q: usize,
        lambda3: f64,
        q_cap: usize,
    },
    DeltaTotal {
        row: usize,
        vector: Vec<f64>,
    },
    CgsBasis {
        column: usize,
        singular_value: f64,
        vector: Vec<f64>,
    },
    GradBasis {
        column: usize,
        vector: Vec<f64>,
    },
}

fn vec_of(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

fn rows_of(m: &DMatrix<f64>) -> impl Iterator<Item = Vec<f64>> + '_ {
    m.row_iter().map(|r| r.iter().copied().collect())
}

fn columns_of(m: &DMatrix<f64>) -> impl Iterator<Item = Vec<f64>> + '_ {
    m.column_iter().map(|c| c.iter().copied().collect())
}

fn write_records(path: &Path, kind: RecordKind, records: impl IntoIterator<Item = Record>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let header = Record::Header {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        kind,
    };
    for record in std::iter::once(header).chain(records) {
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn read_records(path: &Path, kind: RecordKind) -> Result<Vec<(usize, Record)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| Error::Format {
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push((i + 1, record));
    }
    match records.first() {
        Some((_, Record::Header { format, version, kind: k }))
            if format == FORMAT_NAME && *version == FORMAT_VERSION && *k == kind => {}
        Some((_, Record::Header { format, version, kind: k })) => {
            return Err(Error::Format {
                line: 1,
                message: format!("expected {FORMAT_NAME} v{FORMAT_VERSION} {kind:?}, found {format} v{version} {k:?}"),
            })
        }
        _ => {
            return Err(Error::Format {
                line: 1,
                message: "missing header".into(),
            })
        }
    }
    Ok(records.into_iter().skip(1).collect())
}

fn bad(line: usize, message: impl Into<String>) -> Error {
    Error::Format {
        line,
        message: message.into(),
    }
}

pub fn write_corpus(path: &Path, model: &MemoryModel) -> Result<()> {
    let mut records = vec![Record::Shape {
        d: model.d(),
        d_m: model.d_m(),
        n_vocab: model.n_vocab(),
    }];
    records.extend(rows_of(&model.codebook).enumerate().map(|(index, vector)| Record::Codebook { index, vector }));
    records.extend(rows_of(&model.weights).enumerate().map(|(row, vector)| Record::Weights { row, vector }));
    records.extend(columns_of(&model.pretrain_keys).enumerate().map(|(index, key)| Record::Pretrain {
        index,
        label: model.pretrain_labels[index],
        key,
    }));
    records.extend(columns_of(&model.heldout_keys).enumerate().map(|(index, key)| Record::Heldout {
        index,
        label: model.heldout_labels[index],
        key,
    }));
    records.extend(rows_of(&model.covariance).enumerate().map(|(row, vector)| Record::Covariance { row, vector }));
    write_records(path, RecordKind::Corpus, records)
}

pub fn read_corpus(path: &Path) -> Result<MemoryModel> {
    let records = read_records(path, RecordKind::Corpus)?;
    let (d, d_m, n_vocab) = match records.first() {
        Some((_, Record::Shape { d, d_m, n_vocab })) => (*d, *d_m, *n_vocab),
        _ => return Err(bad(2, "corpus file has no shape record")),
    };
    let mut codebook = Vec::new();
    let mut weights = Vec::new();
    let mut covariance = Vec::new();
    let mut pre = (Vec::new(), Vec::new());
    let mut held = (Vec::new(), Vec::new());
    for (line, record) in records.into_iter().skip(1) {
        let check = |v: &Vec<f64>, n: usize, expected_index: usize, got: usize| {
            if v.len() != n || expected_index != got {
                Err(bad(line, "vector length or position out of order"))
            } else {
                Ok(())
            }
        };
        match record {
            Record::Codebook { index, vector } => {
                check(&vector, d, codebook.len(), index)?;
                codebook.push(vector);
            }
            Record::Weights { row, vector } => {
                check(&vector, d_m, weights.len(), row)?;
                weights.push(vector);
            }
            Record::Covariance { row, vector } => {
                check(&vector, d_m, covariance.len(), row)?;
                covariance.push(vector);
            }
            Record::Pretrain { index, label, key } => {
                check(&key, d_m, pre.0.len(), index)?;
                pre.0.push(DVector::from_vec(key));
                pre.1.push(label);
            }
            Record::Heldout { index, label, key } => {
                check(&key, d_m, held.0.len(), index)?;
                held.0.push(DVector::from_vec(key));
                held.1.push(label);
            }
            _ => return Err(bad(line, "unexpected record in a corpus file")),
        }
    }
    let from_rows = |rows: Vec<Vec<f64>>, n: usize, cols: usize, what: &str| {
        if rows.len() != n {
            return Err(bad(0, format!("expected {n} {what} rows, found {}", rows.len())));
        }
        Ok(DMatrix::from_row_iterator(n, cols, rows.into_iter().flatten()))
    };
    let codebook = from_rows(codebook, n_vocab, d, "codebook")?;
    let weights = from_rows(weights, d, d_m, "weight")?;
    let covariance = from_rows(covariance, d_m, d_m, "covariance")?;
    if pre.0.is_empty() || held.0.is_empty() {
        return Err(bad(0, "corpus file lacks pre-training or held-out keys"));
    }
    if pre.1.iter().chain(held.1.iter()).any(|&l| l >= n_vocab) {
        return Err(bad(0, "label outside the codebook"));
    }
    let values = |labels: &[usize]| {
        DMatrix::from_columns(
            &labels
                .iter()
                .map(|&l| codebook.row(l).transpose())
                .collect::<Vec<_>>(),
        )
    };
    Ok(MemoryModel {
        pretrain_values: values(&pre.1),
        heldout_values: values(&held.1),
        weights,
        pretrain_keys: DMatrix::from_columns(&pre.0),
        pretrain_labels: pre.1,
        heldout_keys: DMatrix::from_columns(&held.0),
        heldout_labels: held.1,
        covariance,
        codebook,
    })
}

pub fn write_stream(path: &Path, stream: &[EditRequest]) -> Result<()> {
    let all = |v: &[DVector<f64>]| v.iter().map(vec_of).collect::<Vec<_>>();
    let records = stream.iter().enumerate().map(|(index, req)| Record::Edit {
        index,
        target_index: req.target_index,
        key_samples: all(&req.key_samples),
        paraphrase_keys: all(&req.paraphrase_keys),
        unrelated_keys: all(&req.unrelated_keys),
    });
    write_records(path, RecordKind::Stream, records)
}

pub fn read_stream(path: &Path) -> Result<Vec<EditRequest>> {
    let records = read_records(path, RecordKind::Stream)?;
    let all = |v: Vec<Vec<f64>>| v.into_iter().map(DVector::from_vec).collect::<Vec<_>>();
    let mut out = Vec::with_capacity(records.len());
    for (line, record) in records {
        match record {
            Record::Edit {
                index,
                target_index,
                key_samples,
                paraphrase_keys,
                unrelated_keys,
            } if index == out.len() => out.push(EditRequest {
                key_samples: all(key_samples),
                target_index,
                paraphrase_keys: all(paraphrase_keys),
                unrelated_keys: all(unrelated_keys),
            }),
            _ => return Err(bad(line, "expected the next edit record")),
        }
    }
    Ok(out)
}

pub fn write_subspace(path: &Path, snapshot: &SubspaceSnapshot) -> Result<()> {
    let mut records = vec![Record::Schedule {
        iteration: snapshot.iteration,
        r: snapshot.r,
        q: snapshot.q,
        lambda3: snapshot.lambda3,
        q_cap: snapshot.q_cap,
    }];
    records.extend(rows_of(&snapshot.delta_total).enumerate().map(|(row, vector)| Record::DeltaTotal { row, vector }));
    records.extend(columns_of(&snapshot.cgs_basis).enumerate().map(|(column, vector)| Record::CgsBasis {
        column,
        singular_value: snapshot.cgs_singular_values[column],
        vector,
    }));
    records.extend(columns_of(&snapshot.grad_basis).enumerate().map(|(column, vector)| Record::GradBasis { column, vector }));
    write_records(path, RecordKind::Subspace, records)
}

pub fn read_subspace(path: &Path) -> Result<SubspaceSnapshot> {
    let records = read_records(path, RecordKind::Subspace)?;
    let (iteration, r, q, lambda3, q_cap) = match records.first() {
        Some((_, Record::Schedule { iteration, r, q, lambda3, q_cap })) => (*iteration, *r, *q, *lambda3, *q_cap),
        _ => return Err(bad(2, "subspace file has no schedule record")),
    };
    let mut total = Vec::new();
    let mut cgs = Vec::new();
    let mut sv = Vec::new();
    let mut grad = Vec::new();
    for (line, record) in records.into_iter().skip(1) {
        match record {
            Record::DeltaTotal { row, vector } if row == total.len() => total.push(vector),
            Record::CgsBasis { column, singular_value, vector } if column == cgs.len() => {
                cgs.push(DVector::from_vec(vector));
                sv.push(singular_value);
            }
            Record::GradBasis { column, vector } if column == grad.len() => grad.push(DVector::from_vec(vector)),
            _ => return Err(bad(line, "unexpected or out-of-order subspace record")),
        }
    }
    let d = total.len();
    let d_m = total.first().map_or(0, |r| r.len());
    if total.iter().any(|r| r.len() != d_m) || cgs.iter().chain(grad.iter()).any(|c| c.len() != d) {
        return Err(bad(0, "inconsistent vector lengths"));
    }
    let basis = |cols: Vec<DVector<f64>>| {
        if cols.is_empty() {
            DMatrix::zeros(d, 0)
        } else {
            DMatrix::from_columns(&cols)
        }
    };
    Ok(SubspaceSnapshot {
        iteration,
        r,
        q,
        lambda3,
        q_cap,
        delta_total: DMatrix::from_row_iterator(d, d_m, total.into_iter().flatten()),
        cgs_basis: basis(cgs),
        cgs_singular_values: sv,
        grad_basis: basis(grad),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::{synth_edit_stream, synth_model, CorpusConfig};

    fn cfg() -> CorpusConfig {
        CorpusConfig {
            d: 6,
            d_m: 8,
            n_vocab: 10,
            n_pretrain: 3,
            n_heldout: 5,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn corpus_and_stream_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let model = synth_model(&cfg()).unwrap();
        let path = dir.path().join("corpus.jsonl");
        write_corpus(&path, &model).unwrap();
        assert_eq!(read_corpus(&path).unwrap(), model);

        let stream = synth_edit_stream(&model, 4, &cfg()).unwrap();
        let path = dir.path().join("stream.jsonl");
        write_stream(&path, &stream).unwrap();
        assert_eq!(read_stream(&path).unwrap(), stream);
        // a stream file is not a corpus file
        assert!(matches!(read_corpus(&path), Err(Error::Format { line: 1, .. })));
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"role\":\"shape\",\"d\":1,\"d_m\":1,\"n_vocab\":1}\n").unwrap();
        assert!(matches!(read_stream(&path), Err(Error::Format { .. })));
        std::fs::write(&path, "not json\n").unwrap();
        assert!(matches!(read_stream(&path), Err(Error::Format { line: 1, .. })));
    }
}
