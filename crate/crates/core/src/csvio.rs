//! CSV datasets: header `x1,…,xD,y`, optional `#` comment lines before the header.
//!
//! Floats are written in shortest round-trip decimal form.

use std::io::{Read, Write};
use std::path::Path;

use crate::datagen::DatasetTabular;
use crate::elbo::Task;
use crate::error::{Error, Result};
use crate::nncore::Matrix;

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("{other:?}")),
    }
}

fn write_comments<W: Write>(w: &mut W, comments: &[String]) -> Result<()> {
    for c in comments {
        writeln!(w, "# {c}")?;
    }
    Ok(())
}

/// Writes a numeric table with `#` comment lines and a header.
pub fn write_table<W: Write>(mut w: W, comments: &[String], header: &[String], rows: &Matrix) -> Result<()> {
    if header.len() != rows.cols() {
        return Err(Error::shape("csv header", rows.cols(), header.len()));
    }
    write_comments(&mut w, comments)?;
    let mut out = csv::Writer::from_writer(w);
    out.write_record(header).map_err(csv_err)?;
    for i in 0..rows.rows() {
        out.write_record(rows.row(i).iter().map(|v| v.to_string())).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a numeric table; returns the header and the values.
pub fn read_table<R: Read>(r: R) -> Result<(Vec<String>, Matrix)> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(r);
    let header: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(str::to_owned).collect();
    let mut data = Vec::new();
    let mut rows = 0;
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        if rec.len() != header.len() {
            return Err(Error::Format(format!(
                "row {} has {} fields, header has {}",
                line + 1,
                rec.len(),
                header.len()
            )));
        }
        for (field, name) in rec.iter().zip(&header) {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Format(format!("row {}, column {name}: `{field}` is not a number", line + 1)))?;
            data.push(v);
        }
        rows += 1;
    }
    let m = Matrix::from_vec(rows, header.len(), data)?;
    Ok((header, m))
}

pub fn feature_header(d: usize, prefix: &str) -> Vec<String> {
    (1..=d).map(|j| format!("{prefix}{j}")).collect()
}

pub fn write_dataset<W: Write>(w: W, data: &DatasetTabular, comments: &[String]) -> Result<()> {
    let d = data.n_features();
    let mut header = feature_header(d, "x");
    header.push("y".into());
    let rows = Matrix::from_fn(data.len(), d + 1, |i, j| if j < d { data.x.get(i, j) } else { data.y[i] });
    write_table(w, comments, &header, &rows)
}

/// Per-feature latent components as `phi1,…,phiD`.
pub fn write_latent<W: Write>(w: W, ssv: &Matrix, comments: &[String]) -> Result<()> {
    write_table(w, comments, &feature_header(ssv.cols(), "phi"), ssv)
}

pub fn read_dataset<R: Read>(r: R, task: Task) -> Result<DatasetTabular> {
    let (header, table) = read_table(r)?;
    let d = header.len().checked_sub(1).filter(|&d| d > 0).ok_or_else(|| {
        Error::Format("dataset needs at least one feature column and a y column".into())
    })?;
    let mut expected = feature_header(d, "x");
    expected.push("y".into());
    if header != expected {
        return Err(Error::Format(format!("dataset header must be {}, got {}", expected.join(","), header.join(","))));
    }
    let x = Matrix::from_fn(table.rows(), d, |i, j| table.get(i, j));
    let y = table.column(d);
    DatasetTabular::new(x, y, task)
}

pub fn save_dataset(path: &Path, data: &DatasetTabular, comments: &[String]) -> Result<()> {
    write_dataset(std::fs::File::create(path)?, data, comments)
}

pub fn load_dataset(path: &Path, task: Task) -> Result<DatasetTabular> {
    read_dataset(std::fs::File::open(path)?, task)
}
