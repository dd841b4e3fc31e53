//! Text formats shared by every stage.
//!
//! XMC data files start with a header `N D L` followed by one line per sample:
//!
//! ```text
//! 2 4 3
//! 0,2 1:0.5 3:1.0
//! 1 0:2.0
//! ```
//!
//! Dense matrices use a `n_rows n_cols` header and one whitespace-separated row
//! per line. Generic sparse matrices use the same header with rows written as
//! `col:value` tokens (an empty line is an empty row).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{DenseMatrix, SparseMatrix};
use crate::error::{Error, Result};

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn parse_header(line: Option<&str>, n: usize, what: &str) -> Result<Vec<usize>> {
    let line = line.ok_or_else(|| Error::parse(1, format!("missing {what} header")))?;
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != n {
        return Err(Error::parse(
            1,
            format!("{what} header must have {n} fields, got `{line}`"),
        ));
    }
    fields
        .iter()
        .map(|f| {
            f.parse::<usize>()
                .map_err(|_| Error::parse(1, format!("bad header field `{f}`")))
        })
        .collect()
}

fn parse_value(token: &str, line: usize) -> Result<f32> {
    let v: f32 = token
        .parse()
        .map_err(|_| Error::parse(line, format!("bad value `{token}`")))?;
    if !v.is_finite() {
        return Err(Error::parse(line, format!("non-finite value `{token}`")));
    }
    Ok(v)
}

fn parse_pairs<'a>(
    tokens: impl Iterator<Item = &'a str>,
    n_cols: usize,
    line: usize,
) -> Result<Vec<(u32, f32)>> {
    let mut row = Vec::new();
    for token in tokens {
        let (idx, val) = token
            .split_once(':')
            .ok_or_else(|| Error::parse(line, format!("expected index:value, got `{token}`")))?;
        let idx: usize = idx
            .parse()
            .map_err(|_| Error::parse(line, format!("bad index `{idx}`")))?;
        if idx >= n_cols {
            return Err(Error::parse(
                line,
                format!("index {idx} out of range for dimension {n_cols}"),
            ));
        }
        row.push((idx as u32, parse_value(val, line)?));
    }
    row.sort_unstable_by_key(|&(j, _)| j);
    if let Some(w) = row.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::parse(line, format!("duplicate index {}", w[0].0)));
    }
    Ok(row)
}

/// Parses the XMC text format from any reader.
pub fn read_xmc_text<R: BufRead>(reader: R) -> Result<(SparseMatrix, SparseMatrix)> {
    let mut lines = reader.lines();
    let header = lines
        .next()
        .transpose()
        .map_err(|e| Error::parse(1, e.to_string()))?;
    let dims = parse_header(header.as_deref(), 3, "`N D L`")?;
    let (n, d, l) = (dims[0], dims[1], dims[2]);

    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (k, line) in lines.enumerate() {
        let lineno = k + 2;
        let line = line.map_err(|e| Error::parse(lineno, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        if features.len() == n {
            return Err(Error::parse(lineno, format!("more than {n} samples")));
        }
        let mut tokens = line.split_whitespace();
        let first = if line.starts_with(char::is_whitespace) {
            None
        } else {
            tokens.next()
        };
        let label_token = match first {
            Some(t) if !t.contains(':') => t,
            Some(t) => {
                return Err(Error::parse(
                    lineno,
                    format!("empty label list (line starts with feature `{t}`)"),
                ))
            }
            None => return Err(Error::parse(lineno, "empty label list")),
        };
        let mut row_labels = Vec::new();
        for lab in label_token.split(',') {
            let id: usize = lab
                .parse()
                .map_err(|_| Error::parse(lineno, format!("bad label `{lab}`")))?;
            if id >= l {
                return Err(Error::parse(
                    lineno,
                    format!("label {id} out of range for {l} labels"),
                ));
            }
            row_labels.push(id as u32);
        }
        labels.push(row_labels);
        features.push(parse_pairs(tokens, d, lineno)?);
    }
    if features.len() != n {
        return Err(Error::parse(
            features.len() + 1,
            format!("header declares {n} samples, found {}", features.len()),
        ));
    }
    Ok((
        SparseMatrix::from_rows(d, features)?,
        SparseMatrix::from_label_sets(l, &labels)?,
    ))
}

/// Loads features and binary labels from an XMC text file.
pub fn load_xmc_text(path: impl AsRef<Path>) -> Result<(SparseMatrix, SparseMatrix)> {
    let path = path.as_ref();
    read_xmc_text(open(path)?).map_err(|e| match e {
        Error::Parse { line, msg } => Error::parse(line, format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_xmc_text<W: Write>(
    mut w: W,
    features: &SparseMatrix,
    labels: &SparseMatrix,
) -> Result<()> {
    if features.n_rows() != labels.n_rows() {
        return Err(Error::Shape(format!(
            "{} feature rows vs {} label rows",
            features.n_rows(),
            labels.n_rows()
        )));
    }
    let io = |e| Error::io("<writer>", e);
    writeln!(
        w,
        "{} {} {}",
        features.n_rows(),
        features.n_cols(),
        labels.n_cols()
    )
    .map_err(io)?;
    for i in 0..features.n_rows() {
        let labs: Vec<String> = labels.row(i).indices.iter().map(|l| l.to_string()).collect();
        write!(w, "{}", labs.join(",")).map_err(io)?;
        for (j, v) in features.row(i).iter() {
            write!(w, " {j}:{v}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn save_xmc_text(
    path: impl AsRef<Path>,
    features: &SparseMatrix,
    labels: &SparseMatrix,
) -> Result<()> {
    let path = path.as_ref();
    write_xmc_text(create(path)?, features, labels).map_err(|e| relabel_io(e, path))
}

pub fn read_dense<R: BufRead>(reader: R) -> Result<DenseMatrix> {
    let mut lines = reader.lines();
    let header = lines
        .next()
        .transpose()
        .map_err(|e| Error::parse(1, e.to_string()))?;
    let dims = parse_header(header.as_deref(), 2, "`n_rows n_cols`")?;
    let (n_rows, n_cols) = (dims[0], dims[1]);
    let mut values = Vec::with_capacity(n_rows * n_cols);
    let mut seen = 0;
    for (k, line) in lines.enumerate() {
        let lineno = k + 2;
        let line = line.map_err(|e| Error::parse(lineno, e.to_string()))?;
        if seen == n_rows {
            if line.trim().is_empty() {
                continue;
            }
            return Err(Error::parse(lineno, format!("more than {n_rows} rows")));
        }
        let before = values.len();
        for tok in line.split_whitespace() {
            values.push(parse_value(tok, lineno)?);
        }
        if values.len() - before != n_cols {
            return Err(Error::parse(
                lineno,
                format!("expected {n_cols} values, got {}", values.len() - before),
            ));
        }
        seen += 1;
    }
    if seen != n_rows {
        return Err(Error::parse(
            seen + 1,
            format!("header declares {n_rows} rows, found {seen}"),
        ));
    }
    DenseMatrix::new(n_rows, n_cols, values)
}

pub fn write_dense<W: Write>(mut w: W, m: &DenseMatrix) -> Result<()> {
    let io = |e| Error::io("<writer>", e);
    writeln!(w, "{} {}", m.n_rows(), m.n_cols()).map_err(io)?;
    for row in m.rows() {
        let mut first = true;
        for v in row {
            if !first {
                w.write_all(b" ").map_err(io)?;
            }
            write!(w, "{v}").map_err(io)?;
            first = false;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_dense(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    let path = path.as_ref();
    read_dense(open(path)?)
}

pub fn save_dense(path: impl AsRef<Path>, m: &DenseMatrix) -> Result<()> {
    let path = path.as_ref();
    write_dense(create(path)?, m).map_err(|e| relabel_io(e, path))
}

pub fn read_sparse<R: BufRead>(reader: R) -> Result<SparseMatrix> {
    let mut lines = reader.lines();
    let header = lines
        .next()
        .transpose()
        .map_err(|e| Error::parse(1, e.to_string()))?;
    let dims = parse_header(header.as_deref(), 2, "`n_rows n_cols`")?;
    let (n_rows, n_cols) = (dims[0], dims[1]);
    let mut rows = Vec::with_capacity(n_rows);
    for (k, line) in lines.enumerate() {
        let lineno = k + 2;
        let line = line.map_err(|e| Error::parse(lineno, e.to_string()))?;
        if rows.len() == n_rows {
            if line.trim().is_empty() {
                continue;
            }
            return Err(Error::parse(lineno, format!("more than {n_rows} rows")));
        }
        rows.push(parse_pairs(line.split_whitespace(), n_cols, lineno)?);
    }
    if rows.len() != n_rows {
        return Err(Error::parse(
            rows.len() + 1,
            format!("header declares {n_rows} rows, found {}", rows.len()),
        ));
    }
    SparseMatrix::from_rows(n_cols, rows)
}

pub fn write_sparse<W: Write>(mut w: W, m: &SparseMatrix) -> Result<()> {
    let io = |e| Error::io("<writer>", e);
    writeln!(w, "{} {}", m.n_rows(), m.n_cols()).map_err(io)?;
    for row in m.rows() {
        let mut first = true;
        for (j, v) in row.iter() {
            if !first {
                w.write_all(b" ").map_err(io)?;
            }
            write!(w, "{j}:{v}").map_err(io)?;
            first = false;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_sparse(path: impl AsRef<Path>) -> Result<SparseMatrix> {
    let path = path.as_ref();
    read_sparse(open(path)?)
}

pub fn save_sparse(path: impl AsRef<Path>, m: &SparseMatrix) -> Result<()> {
    let path = path.as_ref();
    write_sparse(create(path)?, m).map_err(|e| relabel_io(e, path))
}

fn relabel_io(e: Error, path: &Path) -> Error {
    match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<(SparseMatrix, SparseMatrix)> {
        read_xmc_text(s.as_bytes())
    }

    #[test]
    fn parses_simple_file() {
        let (x, y) = parse("2 4 3\n0,2 1:0.5 3:1.0\n1 0:2\n").unwrap();
        assert_eq!(x.n_rows(), 2);
        assert_eq!(x.n_cols(), 4);
        assert_eq!(y.n_cols(), 3);
        assert_eq!(x.row(0).indices, &[1, 3]);
        assert_eq!(x.row(0).values, &[0.5, 1.0]);
        assert_eq!(y.row(0).indices, &[0, 2]);
        assert_eq!(y.row(1).indices, &[1]);
        assert!(y.is_binary());
    }

    #[test]
    fn accepts_eurlex_shaped_header() {
        let (x, y) = parse("1 186104 3956\n3955 186103:1\n").unwrap();
        assert_eq!((x.n_rows(), x.n_cols(), y.n_cols()), (1, 186104, 3956));
    }

    #[test]
    fn sample_without_features_is_a_zero_row() {
        let (x, _) = parse("1 3 2\n1\n").unwrap();
        assert!(x.row(0).is_empty());
    }

    #[test]
    fn rejects_duplicate_feature() {
        let err = parse("1 4 1\n0 2:1.0 2:2.0\n").unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn rejects_bad_inputs() {
        // malformed header
        assert!(parse("2 4\n0 1:1\n").is_err());
        assert!(parse("a b c\n").is_err());
        // feature index out of range
        assert!(parse("1 4 3\n0 4:1\n").is_err());
        // label out of range
        assert!(parse("1 4 3\n3 1:1\n").is_err());
        // non-finite value
        assert!(parse("1 4 3\n0 1:nan\n").is_err());
        assert!(parse("1 4 3\n0 1:inf\n").is_err());
        // empty label list
        assert!(parse("1 4 3\n 1:1\n").is_err());
        assert!(parse("1 4 3\n1:1 2:1\n").is_err());
        // sample count mismatch
        assert!(parse("2 4 3\n0 1:1\n").is_err());
        assert!(parse("1 4 3\n0 1:1\n1 1:1\n").is_err());
    }

    #[test]
    fn xmc_round_trip() {
        let text = "3 5 4\n0,2 1:0.5 3:1.25\n3 0:2\n1,2,3\n";
        let (x, y) = parse(text).unwrap();
        let mut out = Vec::new();
        write_xmc_text(&mut out, &x, &y).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), text);
    }

    #[test]
    fn dense_round_trip_is_exact() {
        let m = DenseMatrix::new(2, 3, vec![0.1, -2.5e-7, 3.0, 1.0 / 3.0, 0.0, 1e10]).unwrap();
        let mut out = Vec::new();
        write_dense(&mut out, &m).unwrap();
        assert_eq!(read_dense(out.as_slice()).unwrap(), m);
    }

    #[test]
    fn dense_rejects_ragged_rows() {
        assert!(read_dense("2 2\n1 2\n3\n".as_bytes()).is_err());
        assert!(read_dense("2 2\n1 2\n".as_bytes()).is_err());
    }

    #[test]
    fn sparse_round_trip_keeps_empty_rows() {
        let m = SparseMatrix::from_rows(4, vec![vec![(1, 0.5)], vec![], vec![(0, 1.0), (3, -2.0)]])
            .unwrap();
        let mut out = Vec::new();
        write_sparse(&mut out, &m).unwrap();
        assert_eq!(read_sparse(out.as_slice()).unwrap(), m);
    }
}
