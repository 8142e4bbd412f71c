use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{CellMatrix, CorpusError, SparseCell};

pub const MATRIX_FILE: &str = "matrix.mtx";
pub const GENES_FILE: &str = "genes.tsv";
pub const CELLS_FILE: &str = "cells.tsv";

const MTX_HEADER: &str = "%%MatrixMarket matrix coordinate real general";

fn read(path: &Path) -> Result<String, CorpusError> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_err(file: &Path, line: usize, msg: impl Into<String>) -> CorpusError {
    CorpusError::Parse {
        file: file.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Read a matrix directory (`matrix.mtx`, `genes.tsv`, `cells.tsv`).
///
/// The MatrixMarket file is cells x genes with 1-based indices. Explicit
/// zeros are dropped.
pub fn load_matrix(dir: &Path) -> Result<CellMatrix, CorpusError> {
    let genes_path = dir.join(GENES_FILE);
    let gene_names: Vec<String> = read(&genes_path)?
        .lines()
        .map(|l| l.trim_end_matches('\r').to_string())
        .filter(|l| !l.is_empty())
        .collect();

    let cells_path = dir.join(CELLS_FILE);
    let cells_text = read(&cells_path)?;
    let mut lines = cells_text.lines().enumerate();
    let header: Vec<&str> = match lines.next() {
        Some((_, h)) => h.trim_end_matches('\r').split('\t').collect(),
        None => return Err(parse_err(&cells_path, 1, "missing header")),
    };
    if header.first() != Some(&"cell_id") {
        return Err(parse_err(&cells_path, 1, "header must start with cell_id"));
    }
    let type_col = header.iter().position(|h| *h == "cell_type");
    let pert_col = header.iter().position(|h| *h == "perturbation");
    let mut cell_ids = Vec::new();
    let mut types = Vec::new();
    let mut perts = Vec::new();
    for (i, line) in lines {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != header.len() {
            return Err(parse_err(
                &cells_path,
                i + 1,
                format!("expected {} columns, found {}", header.len(), cols.len()),
            ));
        }
        cell_ids.push(cols[0].to_string());
        if let Some(c) = type_col {
            types.push(cols[c].to_string());
        }
        if let Some(c) = pert_col {
            perts.push(cols[c].to_string());
        }
    }

    let mtx_path = dir.join(MATRIX_FILE);
    let mtx = read(&mtx_path)?;
    let mut lines = mtx.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim().eq_ignore_ascii_case(MTX_HEADER) => {}
        _ => return Err(parse_err(&mtx_path, 1, format!("expected `{MTX_HEADER}`"))),
    }
    let mut size: Option<(usize, usize, usize)> = None;
    let mut cells = vec![SparseCell::default(); cell_ids.len()];
    let mut seen = 0usize;
    let mut pairs = HashSet::new();
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('%') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(parse_err(&mtx_path, lineno, "expected three fields"));
        }
        let Some((rows, cols, _)) = size else {
            let parse = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| parse_err(&mtx_path, lineno, format!("bad size field {s:?}")))
            };
            let dims = (parse(fields[0])?, parse(fields[1])?, parse(fields[2])?);
            if dims.0 != cell_ids.len() {
                return Err(parse_err(
                    &mtx_path,
                    lineno,
                    format!("{} rows but {} cells in {CELLS_FILE}", dims.0, cell_ids.len()),
                ));
            }
            if dims.1 != gene_names.len() {
                return Err(parse_err(
                    &mtx_path,
                    lineno,
                    format!("{} columns but {} genes in {GENES_FILE}", dims.1, gene_names.len()),
                ));
            }
            size = Some(dims);
            continue;
        };
        let idx = |s: &str, limit: usize| -> Result<usize, CorpusError> {
            match s.parse::<usize>() {
                Ok(v) if v >= 1 && v <= limit => Ok(v - 1),
                _ => Err(parse_err(&mtx_path, lineno, format!("index {s:?} out of range 1..={limit}"))),
            }
        };
        let c = idx(fields[0], rows)?;
        let g = idx(fields[1], cols)?;
        let v: f64 = fields[2]
            .parse()
            .map_err(|_| parse_err(&mtx_path, lineno, format!("bad value {:?}", fields[2])))?;
        if !v.is_finite() || v < 0.0 {
            return Err(parse_err(&mtx_path, lineno, format!("negative or non-finite value {v}")));
        }
        seen += 1;
        if !pairs.insert((c, g)) {
            return Err(parse_err(&mtx_path, lineno, format!("duplicate entry ({}, {})", c + 1, g + 1)));
        }
        if v == 0.0 {
            continue;
        }
        let cell = &mut cells[c];
        let pos = cell.genes.partition_point(|&x| (x as usize) < g);
        cell.genes.insert(pos, g as u32);
        cell.values.insert(pos, v);
    }
    let Some((_, _, nnz)) = size else {
        return Err(parse_err(&mtx_path, 1, "missing size line"));
    };
    if seen != nnz {
        return Err(parse_err(
            &mtx_path,
            mtx.lines().count(),
            format!("size line declares {nnz} entries, found {seen}"),
        ));
    }
    CellMatrix::new(
        cells,
        gene_names,
        cell_ids,
        type_col.map(|_| types),
        pert_col.map(|_| perts),
    )
}

/// Write `matrix` in the directory format read by [`load_matrix`].
pub fn save_matrix(matrix: &CellMatrix, dir: &Path) -> Result<(), CorpusError> {
    let io = |path: PathBuf| move |source| CorpusError::Io { path, source };
    fs::create_dir_all(dir).map_err(io(dir.to_path_buf()))?;

    let mut mtx = String::new();
    writeln!(mtx, "{MTX_HEADER}").unwrap();
    writeln!(mtx, "{} {} {}", matrix.n_cells(), matrix.n_genes(), matrix.n_entries()).unwrap();
    for (c, g, v) in matrix.entries() {
        writeln!(mtx, "{} {} {}", c + 1, g + 1, v).unwrap();
    }
    let path = dir.join(MATRIX_FILE);
    fs::write(&path, mtx).map_err(io(path.clone()))?;

    let mut genes = String::new();
    for g in matrix.gene_names() {
        writeln!(genes, "{g}").unwrap();
    }
    let path = dir.join(GENES_FILE);
    fs::write(&path, genes).map_err(io(path.clone()))?;

    let mut cells = String::from("cell_id");
    if matrix.cell_types().is_some() {
        cells.push_str("\tcell_type");
    }
    if matrix.perturbations().is_some() {
        cells.push_str("\tperturbation");
    }
    cells.push('\n');
    for (i, id) in matrix.cell_ids().iter().enumerate() {
        cells.push_str(id);
        if let Some(t) = matrix.cell_types() {
            write!(cells, "\t{}", t[i]).unwrap();
        }
        if let Some(p) = matrix.perturbations() {
            write!(cells, "\t{}", p[i]).unwrap();
        }
        cells.push('\n');
    }
    let path = dir.join(CELLS_FILE);
    fs::write(&path, cells).map_err(io(path.clone()))
}
