use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::MetricsError;

/// Cell embeddings with ids and labels; the label may be empty.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub cell_ids: Vec<String>,
    pub labels: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn has_labels(&self) -> bool {
        !self.labels.is_empty() && self.labels.iter().all(|l| !l.is_empty())
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("cell_id\tlabel");
        for d in 0..self.dim() {
            write!(s, "\te_{d}").unwrap();
        }
        s.push('\n');
        for ((id, label), row) in self.cell_ids.iter().zip(&self.labels).zip(&self.rows) {
            s.push_str(id);
            s.push('\t');
            s.push_str(label);
            for v in row {
                write!(s, "\t{v}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self, MetricsError> {
        let fail = |line: usize, msg: String| MetricsError::Format { line, msg };
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().ok_or_else(|| fail(1, "empty file".into()))?.split('\t').collect();
        if header.len() < 3 || header[0] != "cell_id" || header[1] != "label" {
            return Err(fail(1, "header must start with cell_id, label, e_0".into()));
        }
        for (d, h) in header[2..].iter().enumerate() {
            if *h != format!("e_{d}") {
                return Err(fail(1, format!("column {} is {h}, expected e_{d}", d + 3)));
            }
        }
        let dim = header.len() - 2;
        let mut table = Self {
            cell_ids: Vec::new(),
            labels: Vec::new(),
            rows: Vec::new(),
        };
        for (i, line) in lines.enumerate() {
            let ln = i + 2;
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != dim + 2 {
                return Err(fail(ln, format!("{} fields, expected {}", f.len(), dim + 2)));
            }
            let row = f[2..]
                .iter()
                .map(|v| match v.parse::<f64>() {
                    Ok(x) if x.is_finite() => Ok(x),
                    _ => Err(fail(ln, format!("invalid value {v:?}"))),
                })
                .collect::<Result<Vec<_>, _>>()?;
            table.cell_ids.push(f[0].to_string());
            table.labels.push(f[1].to_string());
            table.rows.push(row);
        }
        if table.rows.is_empty() {
            return Err(fail(2, "no rows".into()));
        }
        Ok(table)
    }
}

pub fn write_embedding_tsv(path: &Path, table: &EmbeddingTable) -> Result<(), MetricsError> {
    fs::write(path, table.to_tsv()).map_err(|source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_embedding_tsv(path: &Path) -> Result<EmbeddingTable, MetricsError> {
    let text = fs::read_to_string(path).map_err(|source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    EmbeddingTable::from_tsv(&text)
}
