//! Bit-stable CSV tables, run manifests and field dumps.
//!
//! Numbers are written as `{:.16e}` (17 significant digits, dot decimal), which
//! round-trips every `f64` and does not depend on locale.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{Rank, SpectralField, TorusGrid};

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// A numeric table with named columns.
#[derive(Debug, Clone, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table { header: header.iter().map(|s| s.to_string()).collect(), rows: vec![] }
    }

    /// Table from equal-length named columns.
    pub fn from_columns(cols: &[(&str, &[f64])]) -> Result<Self> {
        let n = cols.first().map(|c| c.1.len()).unwrap_or(0);
        if cols.iter().any(|c| c.1.len() != n) {
            return Err(Error::InvalidArgument("columns differ in length".into()));
        }
        let mut t = Table::new(&cols.iter().map(|c| c.0).collect::<Vec<_>>());
        for i in 0..n {
            t.rows.push(cols.iter().map(|c| c.1[i]).collect());
        }
        Ok(t)
    }

    pub fn push(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.header.len() {
            return Err(Error::InvalidArgument(format!(
                "row has {} values, table has {} columns",
                row.len(),
                self.header.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            let cells: Vec<String> = r.iter().map(|&x| fmt_f64(x)).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }
}

/// Writes `contents` to `path`, creating parent directories.
pub fn write_bytes(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Output directory that records the digest of every file it writes.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    written: BTreeMap<String, String>,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(RunDir { root, written: BTreeMap::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, name: &str, contents: &[u8]) -> Result<PathBuf> {
        let path = self.root.join(name);
        write_bytes(&path, contents)?;
        self.written.insert(name.to_string(), sha256_hex(contents));
        Ok(path)
    }

    pub fn write_table(&mut self, name: &str, table: &Table) -> Result<PathBuf> {
        self.write(name, table.to_csv().as_bytes())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    pub fn write_field(&mut self, stem: &str, field: &SpectralField, format: FieldFormat) -> Result<PathBuf> {
        let (head, data_name, data) = field_dump(stem, field, format)?;
        self.write(&data_name, &data)?;
        self.write(&format!("{stem}.json"), &head)
    }

    /// Writes `manifest.json` listing the resolved config, its digest and the
    /// digest of every output written so far.
    pub fn finish<C: Serialize>(mut self, subcommand: &str, config: &C) -> Result<Manifest> {
        let config = serde_json::to_value(config)?;
        let canonical = serde_json::to_string(&config)?;
        let manifest = Manifest {
            tool: "stochflow".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            subcommand: subcommand.into(),
            config_digest: sha256_hex(format!("{subcommand}\n{canonical}").as_bytes()),
            config,
            outputs: std::mem::take(&mut self.written),
        };
        self.write_json("manifest.json", &manifest)?;
        Ok(manifest)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub config_digest: String,
    pub config: serde_json::Value,
    /// File name to SHA-256 of its contents.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldFormat {
    Csv,
    Bin,
}

/// Header of a field dump; the values live next to it in `data`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldHeader {
    pub d: usize,
    pub n: usize,
    pub keep: usize,
    pub rank: String,
    pub format: FieldFormat,
    /// Relative to the header. CSV: one row per node, one column per
    /// component; bin: little-endian `f64`, component-major.
    pub data: String,
}

/// Header bytes, data file name and data bytes of a field dump.
pub fn field_dump(stem: &str, field: &SpectralField, format: FieldFormat) -> Result<(Vec<u8>, String, Vec<u8>)> {
    let g = field.grid();
    let ext = match format {
        FieldFormat::Csv => "csv",
        FieldFormat::Bin => "bin",
    };
    let header = FieldHeader {
        d: g.d(),
        n: g.n(),
        keep: g.keep(),
        rank: field.rank().name().into(),
        format,
        data: format!("{stem}.{ext}"),
    };
    let phys = field.physical();
    let bytes = match format {
        FieldFormat::Csv => {
            let cols: Vec<String> = (0..phys.len()).map(|i| format!("c{i}")).collect();
            let mut t = Table { header: cols, rows: Vec::with_capacity(g.len()) };
            for p in 0..g.len() {
                t.rows.push(phys.iter().map(|c| c[p]).collect());
            }
            t.to_csv().into_bytes()
        }
        FieldFormat::Bin => phys.iter().flatten().flat_map(|x| x.to_le_bytes()).collect(),
    };
    let mut head = serde_json::to_string_pretty(&header)?;
    head.push('\n');
    Ok((head.into_bytes(), header.data, bytes))
}

/// Writes `<stem>.json` and `<stem>.csv`/`<stem>.bin` under `dir` and returns
/// the header path.
pub fn write_field(dir: &Path, stem: &str, field: &SpectralField, format: FieldFormat) -> Result<PathBuf> {
    let (head, data_name, data) = field_dump(stem, field, format)?;
    write_bytes(&dir.join(data_name), &data)?;
    let path = dir.join(format!("{stem}.json"));
    write_bytes(&path, &head)?;
    Ok(path)
}

/// Reads a field dump from its JSON header.
pub fn read_field(header_path: &Path) -> Result<SpectralField> {
    let text = fs::read_to_string(header_path).map_err(|e| Error::io(header_path, e))?;
    let h: FieldHeader = serde_json::from_str(&text)?;
    let rank = match h.rank.as_str() {
        "scalar" => Rank::Scalar,
        "vector" => Rank::Vector,
        other => return Err(Error::Config(format!("{}: unknown rank {other:?}", header_path.display()))),
    };
    if h.n < 2 || h.keep > h.n / 2 {
        return Err(Error::Config(format!("{}: inconsistent n/keep", header_path.display())));
    }
    let grid = TorusGrid::with_dealias(h.d, h.n, h.keep.max(1) as f64 / (h.n / 2) as f64)?;
    if grid.keep() != h.keep {
        return Err(Error::Config(format!("{}: cannot rebuild dealias mask", header_path.display())));
    }
    let nc = rank.components(h.d);
    let len = grid.len();
    let data_path = header_path.parent().unwrap_or(Path::new(".")).join(&h.data);
    let mut values = vec![vec![0.0; len]; nc];
    match h.format {
        FieldFormat::Csv => {
            let text = fs::read_to_string(&data_path).map_err(|e| Error::io(&data_path, e))?;
            let mut lines = text.lines();
            lines.next();
            for p in 0..len {
                let line = lines
                    .next()
                    .ok_or_else(|| Error::Config(format!("{}: expected {len} rows", data_path.display())))?;
                let cells: Vec<&str> = line.split(',').collect();
                if cells.len() != nc {
                    return Err(Error::Config(format!("{}: row {} has {} columns", data_path.display(), p + 2, cells.len())));
                }
                for (c, cell) in cells.iter().enumerate() {
                    values[c][p] = cell.trim().parse().map_err(|_| {
                        Error::Config(format!("{}: bad number {cell:?} on row {}", data_path.display(), p + 2))
                    })?;
                }
            }
        }
        FieldFormat::Bin => {
            let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
            if bytes.len() != 8 * nc * len {
                return Err(Error::Config(format!("{}: wrong size", data_path.display())));
            }
            for (i, chunk) in bytes.chunks_exact(8).enumerate() {
                values[i / len][i % len] = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
        }
    }
    SpectralField::from_physical(&grid, rank, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trips_doubles() {
        let xs = [0.1, -1.0 / 3.0, 1e-300, 6.02214076e23, 0.0];
        let t = Table::from_columns(&[("x", &xs)]).unwrap();
        let csv = t.to_csv();
        for (line, x) in csv.lines().skip(1).zip(xs) {
            assert_eq!(line.parse::<f64>().unwrap().to_bits(), x.to_bits());
        }
        assert!(csv.starts_with("x\n1.0000000000000001e-1\n"));
    }

    #[test]
    fn field_dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = TorusGrid::new(2, 8).unwrap();
        let f = SpectralField::random_band_limited(&g, Rank::Vector, 2, 3, true);
        for fmt in [FieldFormat::Csv, FieldFormat::Bin] {
            let p = write_field(dir.path(), "u", &f, fmt).unwrap();
            let back = read_field(&p).unwrap();
            assert_eq!(**back.grid(), *g);
            assert_eq!(back.physical(), f.physical());
        }
    }

    #[test]
    fn manifest_lists_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = RunDir::create(dir.path()).unwrap();
        run.write("a.csv", b"x\n1\n").unwrap();
        let m = run.finish("run", &serde_json::json!({"k": 1})).unwrap();
        assert_eq!(m.outputs["a.csv"], sha256_hex(b"x\n1\n"));
        assert!(dir.path().join("manifest.json").exists());
    }
}
