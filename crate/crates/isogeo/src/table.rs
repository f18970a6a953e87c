//! Result tables and their CSV / JSON forms.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{HarnessError, Result};

pub const CSV_HEADER: [&str; 6] = ["experiment", "row_key", "col_key", "value", "se", "seed"];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Cell {
    pub row: String,
    pub col: String,
    /// NaN marks a cell whose row failed.
    #[serde(serialize_with = "nan_as_null", deserialize_with = "null_as_nan")]
    pub value: f64,
    #[serde(serialize_with = "nan_as_null", deserialize_with = "null_as_nan")]
    pub se: f64,
}

impl PartialEq for Cell {
    // Bitwise, so NaN cells compare equal to themselves.
    fn eq(&self, other: &Self) -> bool {
        self.row == other.row
            && self.col == other.col
            && self.value.to_bits() == other.value.to_bits()
            && self.se.to_bits() == other.se.to_bits()
    }
}

fn nan_as_null<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_none()
    }
}

fn null_as_nan<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

/// Rectangular grid of estimates keyed by row and column labels. Cells are
/// stored row-major in the order of `rows` and `cols`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub experiment: String,
    pub seed: u64,
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub cells: Vec<Cell>,
}

impl ResultTable {
    pub fn new(experiment: impl Into<String>, seed: u64, cols: Vec<String>) -> Self {
        ResultTable {
            experiment: experiment.into(),
            seed,
            rows: Vec::new(),
            cols,
            cells: Vec::new(),
        }
    }

    /// Appends a row of `(value, se)` pairs, one per column.
    pub fn push_row(&mut self, key: impl Into<String>, values: &[(f64, f64)]) -> Result<()> {
        let key = key.into();
        if values.len() != self.cols.len() {
            return Err(HarnessError::format(
                "table row",
                format!("row {key} has {} cells, table has {} columns", values.len(), self.cols.len()),
            ));
        }
        if self.rows.contains(&key) {
            return Err(HarnessError::format("table row", format!("duplicate row {key}")));
        }
        for (col, &(value, se)) in self.cols.iter().zip(values) {
            self.cells.push(Cell {
                row: key.clone(),
                col: col.clone(),
                value,
                se,
            });
        }
        self.rows.push(key);
        Ok(())
    }

    /// A row whose cells are all NaN.
    pub fn push_failed_row(&mut self, key: impl Into<String>) -> Result<()> {
        let nan = vec![(f64::NAN, f64::NAN); self.cols.len()];
        self.push_row(key, &nan)
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn get(&self, row: &str, col: &str) -> Option<&Cell> {
        let r = self.rows.iter().position(|k| k == row)?;
        let c = self.cols.iter().position(|k| k == col)?;
        self.cells.get(r * self.cols.len() + c)
    }

    pub fn value(&self, row: &str, col: &str) -> Option<f64> {
        self.get(row, col).map(|c| c.value)
    }

    /// Cells agree with the row and column keys, in row-major order.
    pub fn is_rectangular(&self) -> bool {
        self.cells.len() == self.rows.len() * self.cols.len()
            && self.cells.iter().enumerate().all(|(k, c)| {
                let (r, j) = (k / self.cols.len().max(1), k % self.cols.len().max(1));
                c.row == self.rows[r] && c.col == self.cols[j]
            })
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER).map_err(csv_err)?;
        let seed = self.seed.to_string();
        for c in &self.cells {
            w.write_record([
                self.experiment.as_str(),
                &c.row,
                &c.col,
                &format_float(c.value),
                &format_float(c.se),
                &seed,
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| HarnessError::format("csv", e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| HarnessError::format("csv", e.to_string()))
    }

    /// Parses CSV produced by [`ResultTable::to_csv`]. Rows and columns are
    /// recovered in order of first appearance; a header-only file gives
    /// `None`.
    pub fn from_csv(text: &str) -> Result<Option<ResultTable>> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(csv_err)?;
        if header.iter().ne(CSV_HEADER) {
            return Err(HarnessError::format("csv", format!("unexpected header {header:?}")));
        }
        let mut table: Option<ResultTable> = None;
        for record in r.records() {
            let rec = record.map_err(csv_err)?;
            let field = |i: usize| rec.get(i).unwrap_or_default();
            let seed: u64 = field(5)
                .parse()
                .map_err(|_| HarnessError::format("csv", format!("bad seed {:?}", field(5))))?;
            let t = table.get_or_insert_with(|| ResultTable::new(field(0), seed, Vec::new()));
            if t.experiment != field(0) || t.seed != seed {
                return Err(HarnessError::format("csv", "mixed experiments in one table"));
            }
            let (row, col) = (field(1).to_string(), field(2).to_string());
            if !t.rows.contains(&row) {
                t.rows.push(row.clone());
            }
            if t.rows.len() == 1 && !t.cols.contains(&col) {
                t.cols.push(col.clone());
            }
            t.cells.push(Cell {
                row,
                col,
                value: parse_float(field(3))?,
                se: parse_float(field(4))?,
            });
        }
        match table {
            Some(t) if !t.is_rectangular() => Err(HarnessError::format("csv", "table is not rectangular")),
            other => Ok(other),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| HarnessError::format("json", e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<ResultTable> {
        let t: ResultTable = serde_json::from_str(text).map_err(|e| HarnessError::format("json", e.to_string()))?;
        if !t.is_rectangular() {
            return Err(HarnessError::format("json", "table is not rectangular"));
        }
        Ok(t)
    }
}

/// Seventeen significant digits, enough for a lossless `f64` round trip.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn parse_float(s: &str) -> Result<f64> {
    s.parse().map_err(|_| HarnessError::format("number", format!("{s:?}")))
}

fn csv_err(e: csv::Error) -> HarnessError {
    HarnessError::format("csv", e.to_string())
}
