//! Atomic file output and the snapshot CSV layout.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::diffusion::Trajectory;
use crate::error::Result;

/// Writes `bytes` to a sibling temp file, syncs, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    if let Err(e) = fs::rename(&tmp, path) {
        let _ = fs::remove_file(&tmp);
        return Err(e.into());
    }
    Ok(())
}

/// Fixed-format float for CSV output so reruns are byte-identical.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.12e}")
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

/// Minimal CSV table with a fixed header.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn push_f64(&mut self, row: &[f64]) {
        self.push(row.iter().map(|v| fmt_f64(*v)).collect());
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }
}

/// Snapshot table with columns `t, x, rho[, j]`.
pub fn snapshot_table(traj: &Trajectory) -> CsvTable {
    let with_flux = traj.fluxes.is_some();
    let mut table = if with_flux {
        CsvTable::new(&["t", "x", "rho", "j"])
    } else {
        CsvTable::new(&["t", "x", "rho"])
    };
    for (k, (t, rho)) in traj.times.iter().zip(&traj.states).enumerate() {
        let grid = rho.grid();
        for (i, r) in rho.values().iter().enumerate() {
            let mut row = vec![*t, grid.node(i), *r];
            if let Some(f) = &traj.fluxes {
                row.push(f[k].values()[i]);
            }
            table.push_f64(&row);
        }
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_only_table() {
        let t = CsvTable::new(&["a", "b"]);
        assert_eq!(t.to_csv(), "a,b\n");
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = std::env::temp_dir().join(format!("hk-io-{}", std::process::id()));
        let p = dir.join("x.csv");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "two");
        let leftovers: Vec<_> = fs::read_dir(&dir)
            .unwrap()
            .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().contains(".tmp-"))
            .collect();
        assert!(leftovers.is_empty());
        fs::remove_dir_all(&dir).unwrap();
    }
}
