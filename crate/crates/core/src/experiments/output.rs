//! CSV tables with `# key=value` metadata lines ahead of the header row.

use crate::error::{QvError, Result};
use crate::qv::QvCurve;

/// Floats are written with 17 significant digits.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub meta: Vec<(String, String)>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(meta: Vec<(String, String)>, header: &[&str]) -> Self {
        Self {
            meta,
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.push((key.into(), value.to_string()));
        self
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.meta {
            out.push_str(&format!("# {k}={v}\n"));
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for row in &self.rows {
            w.write_record(row.iter().map(|&v| fmt_float(v))).expect("in-memory write");
        }
        out.push_str(&String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii output"));
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut meta = Vec::new();
        for line in text.lines().take_while(|l| l.starts_with('#')) {
            if let Some((k, v)) = line.trim_start_matches('#').trim().split_once('=') {
                meta.push((k.to_string(), v.to_string()));
            }
        }
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        let bad = |e: csv::Error| QvError::Argument(format!("malformed CSV: {e}"));
        let header = r.headers().map_err(bad)?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(bad)?;
            rows.push(
                rec.iter()
                    .map(|f| f.parse::<f64>().map_err(|_| QvError::Argument(format!("not a number: {f}"))))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        Ok(Self { meta, header, rows })
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }
}

/// `t, value` for scalar curves, `t, v11, v12, ..., vdd` (row-major) otherwise.
pub fn curve_table(curve: &QvCurve, meta: Vec<(String, String)>) -> Table {
    let mut header = vec!["t".to_string()];
    if curve.d == 1 {
        header.push("value".into());
    } else {
        for r in 1..=curve.d {
            for c in 1..=curve.d {
                header.push(format!("v{r}{c}"));
            }
        }
    }
    let mut t = Table {
        meta,
        header,
        rows: Vec::new(),
    }
    .with_meta("level", curve.level)
    .with_meta("method", curve.method.as_str());
    for (time, v) in curve.eval_times.iter().zip(&curve.values) {
        let mut row = vec![*time];
        row.extend(v);
        t.rows.push(row);
    }
    t
}

/// `t, x1[, x2, ...]`.
pub fn path_table(times: &[f64], columns: &[Vec<f64>], meta: Vec<(String, String)>) -> Table {
    let mut header = vec!["t".to_string()];
    header.extend((1..=columns.len()).map(|i| format!("x{i}")));
    let rows = times
        .iter()
        .enumerate()
        .map(|(i, &t)| std::iter::once(t).chain(columns.iter().map(|c| c[i])).collect())
        .collect();
    Table { meta, header, rows }
}
