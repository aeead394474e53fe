//! Representation export as CSV and binary PGM.

use std::fs;
use std::path::Path;

use musrep::{Error, Result};
use ndarray::Array2;

fn io(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One CSV row per component, values in shortest round-trip form.
pub fn to_csv(a: &Array2<f64>) -> String {
    let mut s = String::new();
    for row in a.rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

pub fn parse_csv(text: &str) -> Result<Array2<f64>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let row = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::InvalidConfig(format!("csv line {}: {e}", i + 1)))?;
        rows.push(row);
    }
    let cols = rows.first().map_or(0, Vec::len);
    if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
        return Err(Error::LengthMismatch(cols, bad.len()));
    }
    let n = rows.len();
    Array2::from_shape_vec((n, cols), rows.into_iter().flatten().collect())
        .map_err(|e| Error::InvalidConfig(e.to_string()))
}

/// 8-bit grey levels: rows reordered by `order`, `log1p` then min-max scaled to 0..=255.
pub fn to_gray(a: &Array2<f64>, order: &[usize]) -> Array2<u8> {
    let compressed = a.mapv(|v| v.max(0.0).ln_1p());
    let lo = compressed.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = compressed.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    Array2::from_shape_fn((order.len(), a.ncols()), |(r, t)| {
        if !(span > 0.0) {
            return 0;
        }
        let v = (compressed[[order[r], t]] - lo) / span;
        (v * 255.0).round().clamp(0.0, 255.0) as u8
    })
}

/// Binary PGM (`P5`), width = frames, height = components.
pub fn to_pgm(gray: &Array2<u8>) -> Vec<u8> {
    let (h, w) = gray.dim();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(gray.iter());
    out
}

/// Writes `<stem>.csv` (raw values) and `<stem>.pgm` (rows sorted by `order`) into `dir`.
pub fn export_representation(a: &Array2<f64>, order: &[usize], dir: &Path, stem: &str) -> Result<()> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("representation to export".into()));
    }
    if order.len() != a.nrows() {
        return Err(Error::LengthMismatch(a.nrows(), order.len()));
    }
    fs::create_dir_all(dir).map_err(io(dir))?;
    let csv = dir.join(format!("{stem}.csv"));
    fs::write(&csv, to_csv(a)).map_err(io(&csv))?;
    let pgm = dir.join(format!("{stem}.pgm"));
    fs::write(&pgm, to_pgm(&to_gray(a, order))).map_err(io(&pgm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zeros_export_black() {
        let a = Array2::zeros((3, 4));
        let g = to_gray(&a, &[0, 1, 2]);
        assert!(g.iter().all(|&v| v == 0));
        assert!(to_csv(&a).lines().all(|l| l == "0,0,0,0"));
    }

    #[test]
    fn one_hot_lands_on_sorted_row() {
        let mut a = Array2::zeros((3, 2));
        a[[0, 1]] = 2.0;
        // component 0 has the highest frequency, so it is drawn last
        let g = to_gray(&a, &[2, 1, 0]);
        assert_eq!(g[[2, 1]], 255);
        assert_eq!(g.iter().filter(|&&v| v != 0).count(), 1);
    }

    #[test]
    fn csv_round_trip() {
        let a = array![[0.1, 1e-7, 3.25], [123456.789, 0.0, 2.0 / 3.0]];
        let back = parse_csv(&to_csv(&a)).unwrap();
        assert_eq!(back.dim(), a.dim());
        for (x, y) in a.iter().zip(&back) {
            assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn pgm_header() {
        let g = Array2::from_elem((2, 3), 7u8);
        let bytes = to_pgm(&g);
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 6);
    }
}
