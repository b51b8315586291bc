//! Reading a covariance matrix from CSV.

use std::path::Path;

use momglm::{Error, Result};
use nalgebra::DMatrix;

/// Reads a square numeric CSV. A first row that does not parse as numbers is
/// treated as a header. When `expected_p` is given the size must match it.
pub fn read_sigma_csv(path: &Path, expected_p: Option<usize>) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(r) => rows.push(r),
            Err(_) if i == 0 => continue,
            Err(e) => {
                return Err(Error::Parse(format!("{} row {}: {e}", path.display(), i + 1)));
            }
        }
    }
    let p = rows.len();
    if p == 0 {
        return Err(Error::Parse(format!("{} holds no matrix rows", path.display())));
    }
    if let Some(r) = rows.iter().position(|r| r.len() != p) {
        return Err(Error::DimensionMismatch(format!(
            "sigma row {} has {} entries, expected {p}",
            r + 1,
            rows[r].len()
        )));
    }
    if let Some(q) = expected_p {
        if q != p {
            return Err(Error::DimensionMismatch(format!("sigma is {p}x{p} but the data have p = {q}")));
        }
    }
    Ok(DMatrix::from_fn(p, p, |i, j| rows[i][j]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn file(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    #[test]
    fn header_is_optional() {
        let a = read_sigma_csv(file("1,0.5\n0.5,2\n").path(), Some(2)).unwrap();
        let b = read_sigma_csv(file("x1,x2\n1,0.5\n0.5,2\n").path(), None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[(1, 1)], 2.0);
    }

    #[test]
    fn shape_errors() {
        let e = read_sigma_csv(file("1,0\n0,1\n").path(), Some(3)).unwrap_err();
        assert_eq!(e.name(), "DimensionMismatch");
        let e = read_sigma_csv(file("1,0,0\n0,1,0\n").path(), None).unwrap_err();
        assert_eq!(e.name(), "DimensionMismatch");
        let e = read_sigma_csv(file("1,0\n0,oops\n").path(), None).unwrap_err();
        assert_eq!(e.name(), "Parse");
    }
}
