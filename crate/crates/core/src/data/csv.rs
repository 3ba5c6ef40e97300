//! CSV dataset format: header `label,f0,...,f{d-1}`, one sample per row.
//!
//! Values are parsed as decimal floats and rounded to the nearest f32 so
//! that CSV and FEMB round-trips hash identically. The class count is
//! inferred as `max(label) + 1`.

use std::path::Path;

use crate::data::{DatasetMeta, EmbeddingDataset};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub fn load(path: &Path) -> Result<EmbeddingDataset> {
    let mut reader = ::csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;

    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.is_empty() || &headers[0] != "label" {
        return Err(Error::Format {
            offset: 0,
            message: format!(
                "csv header must start with \"label\", got {:?}",
                headers.iter().take(1).collect::<Vec<_>>()
            ),
        });
    }
    let d = headers.len() - 1;
    if d == 0 {
        return Err(Error::Format { offset: 0, message: "csv header has no feature columns".into() });
    }
    for (j, name) in headers.iter().skip(1).enumerate() {
        let expect = format!("f{j}");
        if name != expect {
            return Err(Error::Format {
                offset: 0,
                message: format!("csv header column {} is {name:?}, expected {expect:?}", j + 1),
            });
        }
    }

    let mut data: Vec<f64> = Vec::new();
    let mut y: Vec<u32> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let offset = record.position().map_or(0, |p| p.byte());
        if record.len() != d + 1 {
            return Err(Error::Format {
                offset,
                message: format!("row has {} fields, expected {}", record.len(), d + 1),
            });
        }
        let label: u32 = record[0].trim().parse().map_err(|_| Error::Format {
            offset,
            message: format!("bad label {:?}", &record[0]),
        })?;
        y.push(label);
        for j in 1..=d {
            let v: f32 = record[j].trim().parse().map_err(|_| Error::Format {
                offset,
                message: format!("bad float {:?} in column f{}", &record[j], j - 1),
            })?;
            data.push(v as f64);
        }
    }
    if y.is_empty() {
        return Err(Error::Data(format!("{}: csv contains no data rows", path.display())));
    }

    let num_classes = y.iter().copied().max().unwrap_or(0) as usize + 1;
    let x = Matrix::from_vec(y.len(), d, data)?;
    let meta = DatasetMeta { extractor_id: String::new(), source: "csv".into(), num_classes };
    EmbeddingDataset::new(x, y, meta)
}

pub fn save(dataset: &EmbeddingDataset, path: &Path) -> Result<()> {
    let mut writer = ::csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec!["label".to_string()];
    header.extend((0..dataset.d()).map(|j| format!("f{j}")));
    writer.write_record(&header).map_err(|e| csv_error(path, e))?;
    for i in 0..dataset.n() {
        let mut row = vec![dataset.y()[i].to_string()];
        // f32 Display prints the shortest string that parses back exactly.
        row.extend(dataset.x().row(i).iter().map(|&v| (v as f32).to_string()));
        writer.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    writer.flush()?;
    Ok(())
}

fn csv_error(path: &Path, e: ::csv::Error) -> Error {
    match e.kind() {
        ::csv::ErrorKind::Io(_) => Error::Data(format!("{}: {e}", path.display())),
        _ => Error::Format {
            offset: e.position().map_or(0, |p| p.byte()),
            message: e.to_string(),
        },
    }
}
