//! Text formats: MatrixMarket for sparse matrices, TSV for dense data, JSON lines for
//! traces. Floats are written with 17 significant digits so every value round-trips.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use cggm::solver::TraceEntry;
use cggm::SparseMatrix;
use nalgebra::DMatrix;

use crate::error::{CliError, CliResult};

/// Storage layout declared in a MatrixMarket header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Symmetry {
    General,
    /// Only the lower triangle is stored.
    Symmetric,
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| CliError::io(path, e))?))
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_mtx_to(out: &mut impl Write, m: &SparseMatrix, symmetry: Symmetry) -> std::io::Result<()> {
    let entries: Vec<(usize, usize, f64)> = match symmetry {
        Symmetry::General => m.iter().collect(),
        Symmetry::Symmetric => m.iter().filter(|&(i, j, _)| i >= j).collect(),
    };
    let kind = match symmetry {
        Symmetry::General => "general",
        Symmetry::Symmetric => "symmetric",
    };
    writeln!(out, "%%MatrixMarket matrix coordinate real {kind}")?;
    writeln!(out, "{} {} {}", m.nrows(), m.ncols(), entries.len())?;
    for (i, j, v) in entries {
        writeln!(out, "{} {} {}", i + 1, j + 1, fmt_f64(v))?;
    }
    Ok(())
}

pub fn write_mtx(path: &Path, m: &SparseMatrix, symmetry: Symmetry) -> CliResult<()> {
    let mut w = create(path)?;
    write_mtx_to(&mut w, m, symmetry).and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

/// Parses coordinate `real` or `integer` MatrixMarket text. Symmetric files are mirrored.
pub fn parse_mtx(text: impl BufRead, origin: &str) -> CliResult<SparseMatrix> {
    let bad = |line: usize, msg: &str| CliError::Data(format!("{origin}:{line}: {msg}"));
    let mut lines = text.lines().enumerate().map(|(k, l)| (k + 1, l));
    let (_, header) = lines.next().ok_or_else(|| bad(1, "empty file"))?;
    let header = header.map_err(|e| bad(1, &e.to_string()))?;
    let fields: Vec<String> = header.split_whitespace().map(str::to_ascii_lowercase).collect();
    if fields.len() != 5 || fields[0] != "%%matrixmarket" || fields[1] != "matrix" || fields[2] != "coordinate" {
        return Err(bad(1, "expected `%%MatrixMarket matrix coordinate <field> <symmetry>`"));
    }
    if fields[3] != "real" && fields[3] != "integer" {
        return Err(bad(1, &format!("unsupported field `{}`", fields[3])));
    }
    let symmetric = match fields[4].as_str() {
        "general" => false,
        "symmetric" => true,
        other => return Err(bad(1, &format!("unsupported symmetry `{other}`"))),
    };
    let mut size: Option<(usize, usize, usize)> = None;
    let mut trip = Vec::new();
    for (no, line) in lines {
        let line = line.map_err(|e| bad(no, &e.to_string()))?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('%') {
            continue;
        }
        let f: Vec<&str> = t.split_whitespace().collect();
        match size {
            None => {
                let [r, c, n] = f[..] else { return Err(bad(no, "expected `rows cols entries`")) };
                let parse = |s: &str| s.parse::<usize>().map_err(|_| bad(no, &format!("invalid size `{s}`")));
                size = Some((parse(r)?, parse(c)?, parse(n)?));
            }
            Some((rows, cols, _)) => {
                let [i, j, v] = f[..] else { return Err(bad(no, "expected `row col value`")) };
                let i: usize = i.parse().map_err(|_| bad(no, &format!("invalid row `{i}`")))?;
                let j: usize = j.parse().map_err(|_| bad(no, &format!("invalid column `{j}`")))?;
                let v: f64 = v.parse().map_err(|_| bad(no, &format!("invalid value `{v}`")))?;
                if i == 0 || j == 0 || i > rows || j > cols {
                    return Err(bad(no, &format!("entry ({i}, {j}) outside {rows}×{cols}")));
                }
                if !v.is_finite() {
                    return Err(bad(no, "non-finite value"));
                }
                trip.push((i - 1, j - 1, v));
                if symmetric && i != j {
                    trip.push((j - 1, i - 1, v));
                }
            }
        }
    }
    let (rows, cols, declared) = size.ok_or_else(|| CliError::Data(format!("{origin}: missing size line")))?;
    let stored = if symmetric { trip.iter().filter(|e| e.0 >= e.1).count() } else { trip.len() };
    if stored != declared {
        return Err(CliError::Data(format!("{origin}: header declares {declared} entries, found {stored}")));
    }
    SparseMatrix::from_triplets(rows, cols, &trip).map_err(|e| CliError::Data(format!("{origin}: {e}")))
}

pub fn read_mtx(path: &Path) -> CliResult<SparseMatrix> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    parse_mtx(BufReader::new(f), &path.display().to_string())
}

/// Writes `m` as TSV with a header row `prefix1 … prefixN`.
pub fn write_tsv(path: &Path, m: &DMatrix<f64>, prefix: &str) -> CliResult<()> {
    let io = |e: csv::Error| CliError::Data(format!("{}: {e}", path.display()));
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_path(path).map_err(io)?;
    w.write_record((1..=m.ncols()).map(|j| format!("{prefix}{j}"))).map_err(io)?;
    for i in 0..m.nrows() {
        w.write_record(m.row(i).iter().map(|&v| fmt_f64(v))).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Reads a TSV file with a header row into an `n × columns` matrix.
pub fn read_tsv(path: &Path) -> CliResult<DMatrix<f64>> {
    let origin = path.display().to_string();
    let mut r = csv::ReaderBuilder::new().delimiter(b'\t').from_path(path).map_err(|e| CliError::Data(format!("{origin}: {e}")))?;
    let width = r.headers().map_err(|e| CliError::Data(format!("{origin}: {e}")))?.len();
    let mut vals = Vec::new();
    let mut rows = 0;
    for (k, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Data(format!("{origin}: {e}")))?;
        for cell in rec.iter() {
            let v: f64 = cell.trim().parse().map_err(|_| CliError::Data(format!("{origin}: row {}: invalid number `{cell}`", k + 1)))?;
            vals.push(v);
        }
        rows += 1;
    }
    if width == 0 || rows == 0 {
        return Err(CliError::Data(format!("{origin}: no data")));
    }
    Ok(DMatrix::from_row_slice(rows, width, &vals))
}

/// One JSON object per outer iteration.
pub fn write_trace(path: &Path, trace: &[TraceEntry]) -> CliResult<()> {
    let mut w = create(path)?;
    for t in trace {
        serde_json::to_writer(&mut w, t).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        writeln!(w).map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> SparseMatrix {
        SparseMatrix::from_triplets(3, 3, &[(0, 0, 2.0), (1, 0, 0.1), (0, 1, 0.1), (2, 2, 1.0 / 3.0)]).unwrap()
    }

    fn roundtrip(m: &SparseMatrix, s: Symmetry) -> SparseMatrix {
        let mut buf = Vec::new();
        write_mtx_to(&mut buf, m, s).unwrap();
        parse_mtx(&buf[..], "buf").unwrap()
    }

    #[test]
    fn symmetric_stores_lower_triangle_one_based() {
        let mut buf = Vec::new();
        write_mtx_to(&mut buf, &sample(), Symmetry::Symmetric).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "%%MatrixMarket matrix coordinate real symmetric");
        assert_eq!(lines[1], "3 3 3");
        assert!(lines[2].starts_with("1 1 2.0000000000000000e0"));
        assert!(lines[3].starts_with("2 1 "));
    }

    #[test]
    fn values_round_trip_exactly() {
        for s in [Symmetry::General, Symmetry::Symmetric] {
            assert_eq!(roundtrip(&sample(), s), sample());
        }
    }

    #[test]
    fn rejects_malformed_input() {
        for text in [
            "",
            "%%MatrixMarket matrix array real general\n1 1\n1\n",
            "%%MatrixMarket matrix coordinate complex general\n1 1 1\n1 1 1 0\n",
            "%%MatrixMarket matrix coordinate real general\n2 2 1\n3 1 1.0\n",
            "%%MatrixMarket matrix coordinate real general\n2 2 2\n1 1 1.0\n",
            "%%MatrixMarket matrix coordinate real general\n2 2 1\n1 1 abc\n",
        ] {
            assert!(matches!(parse_mtx(text.as_bytes(), "t"), Err(CliError::Data(_))), "{text}");
        }
    }

    #[test]
    fn comments_and_integer_fields() {
        let text = "%%MatrixMarket matrix coordinate integer general\n% note\n2 3 1\n\n2 3 7\n";
        let m = parse_mtx(text.as_bytes(), "t").unwrap();
        assert_eq!((m.nrows(), m.ncols(), m.get(1, 2)), (2, 3, 7.0));
    }

    #[test]
    fn tsv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        let m = DMatrix::from_row_slice(2, 3, &[0.1, -2.5e-300, 3.0, 1.0 / 7.0, 0.0, -1e10]);
        write_tsv(&path, &m, "x").unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("x1\tx2\tx3\n"));
        assert_eq!(read_tsv(&path).unwrap(), m);
    }

    #[test]
    fn ragged_tsv_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tsv");
        std::fs::write(&path, "a\tb\n1\t2\n3\n").unwrap();
        assert!(matches!(read_tsv(&path), Err(CliError::Data(_))));
    }
}
