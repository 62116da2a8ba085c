use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rbm_cascade::Result;

/// CSV writer with a fixed header. Floats use the shortest round-trip form.
pub struct Table {
    w: csv::Writer<BufWriter<File>>,
    width: usize,
}

impl Table {
    pub fn create(path: &Path, columns: &[&str]) -> Result<Table> {
        let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
        w.write_record(columns).map_err(csv_err)?;
        Ok(Table { w, width: columns.len() })
    }

    pub fn row(&mut self, cells: &[String]) -> Result<()> {
        debug_assert_eq!(cells.len(), self.width);
        self.w.write_record(cells).map_err(csv_err)
    }

    pub fn finish(mut self) -> Result<()> {
        self.w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> rbm_cascade::Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => io.into(),
        other => rbm_cascade::Error::Format(format!("{other:?}")),
    }
}

/// Formats a float; non-finite values become empty cells.
pub fn f(x: f64) -> String {
    if x.is_finite() {
        format!("{x}")
    } else {
        String::new()
    }
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| rbm_cascade::Error::Format(e.to_string()))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Reads a CSV into its header and string rows.
pub fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec.map_err(csv_err)?.iter().map(String::from).collect());
    }
    Ok((header, rows))
}
