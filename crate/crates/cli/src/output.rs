//! CSV emission with 17 significant digits and content hashing.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use sha2::{Digest, Sha256};

use pseudopde::mild::FieldEstimate;
use pseudopde::SpaceTimeGrid;

/// `v` with 17 significant digits.
pub fn float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A CSV document whose first line names the config hash.
pub struct Csv {
    text: String,
}

impl Csv {
    pub fn new(config_hash: &str, header: &[String]) -> Self {
        let mut text = format!("# config_sha256={config_hash}\n");
        text.push_str(&header.join(","));
        text.push('\n');
        Csv { text }
    }

    pub fn row(&mut self, cells: &[String]) {
        self.text.push_str(&cells.join(","));
        self.text.push('\n');
    }

    pub fn bytes(&self) -> &[u8] {
        self.text.as_bytes()
    }

    pub fn write(&self, path: &Path) -> io::Result<String> {
        fs::write(path, self.bytes())?;
        Ok(sha256_hex(self.bytes()))
    }
}

pub fn coordinate_header(d: usize, prefix: &[&str], suffix: &[&str]) -> Vec<String> {
    prefix
        .iter()
        .map(|s| s.to_string())
        .chain((1..=d).map(|k| format!("x{k}")))
        .chain(suffix.iter().map(|s| s.to_string()))
        .collect()
}

/// `t, x1..xd, value, stderr` for every grid cell, time-major.
pub fn field_csv(config_hash: &str, grid: &SpaceTimeGrid, field: &FieldEstimate) -> Csv {
    let d = grid.dimension();
    let mut csv = Csv::new(config_hash, &coordinate_header(d, &["t"], &["value", "stderr"]));
    let mut x = vec![0.0; d];
    let mut line = String::new();
    for (i, &t) in grid.times().iter().enumerate() {
        for node in 0..grid.node_count() {
            grid.node_into(node, &mut x);
            line.clear();
            line.push_str(&float(t));
            for v in &x {
                let _ = write!(line, ",{}", float(*v));
            }
            let _ = write!(
                line,
                ",{},{}",
                float(field.value.at(i, node)),
                float(field.stderr.at(i, node))
            );
            csv.text.push_str(&line);
            csv.text.push('\n');
        }
    }
    csv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_with_seventeen_digits() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, f64::MIN_POSITIVE] {
            let s = float(v);
            assert_eq!(s.parse::<f64>().unwrap(), v);
            let mantissa = s.split('e').next().unwrap().replace(['-', '.'], "");
            assert_eq!(mantissa.len(), 17, "{s}");
        }
        assert_eq!(float(f64::NAN), "NaN");
    }

    #[test]
    fn csv_starts_with_hash_line() {
        let mut csv = Csv::new("abc", &coordinate_header(2, &["t"], &["value"]));
        csv.row(&[float(0.0), float(1.0), float(2.0), float(3.0)]);
        let text = std::str::from_utf8(csv.bytes()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# config_sha256=abc");
        assert_eq!(lines[1], "t,x1,x2,value");
        assert_eq!(lines.len(), 3);
    }
}
