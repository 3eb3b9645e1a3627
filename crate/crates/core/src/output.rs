//! Run directories: strength histories as CSV, field snapshots as BFM1 rasters.
//!
//! Layout of a run directory:
//!
//! ```text
//! index.txt            grid line, static rasters, one line per snapshot raster
//! elevation.bin        BFM1 raster
//! overlay.bin          BFM1 raster
//! snapshots/           red/blue density rasters and a unit table per snapshot
//! strength.csv         time, one column per flow unit (persons)
//! casualties.csv       time, one column per flow unit (cumulative persons)
//! units.csv            flow units and batteries with their initial placement
//! events.csv           status changes
//! summary.json         final outcome of every unit
//! ```
//!
//! A BFM1 raster is the bytes `BFM1`, `nx` and `ny` as little-endian u64, then
//! `nx * ny` little-endian f64 values in row-major order (row 0 is the south edge).

use std::fs::{self, File};
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::scenario::Scenario;
use crate::solver::{RunResult, Simulation, SnapshotSink};
use crate::terrain::{Grid, Raster};
use crate::units::Side;

pub const MAGIC: &[u8; 4] = b"BFM1";

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "BFM_OUT";

/// Output root: the explicit directory, else `$BFM_OUT`, else `runs`.
pub fn output_root(explicit: Option<&Path>) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from),
    }
}

pub fn run_dir_name(scenario: &str, seed: u64) -> String {
    let clean: String = scenario
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{clean}-seed{seed}")
}

pub fn write_bfm1(path: &Path, nx: usize, ny: usize, data: &[f64]) -> io::Result<()> {
    assert_eq!(data.len(), nx * ny, "raster size");
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(nx as u64).to_le_bytes())?;
    w.write_all(&(ny as u64).to_le_bytes())?;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()
}

/// Reads a BFM1 raster as `(nx, ny, data)`.
pub fn read_bfm1(path: &Path) -> io::Result<(usize, usize, Vec<f64>)> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, format!("{}: {m}", path.display()));
    if bytes.len() < 20 || &bytes[..4] != MAGIC {
        return Err(bad("not a BFM1 raster"));
    }
    let word = |k: usize| u64::from_le_bytes(bytes[k..k + 8].try_into().expect("8 bytes")) as usize;
    let (nx, ny) = (word(4), word(12));
    if bytes.len() != 20 + nx * ny * 8 {
        return Err(bad("length does not match the header"));
    }
    let data = bytes[20..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((nx, ny, data))
}

fn write_raster(path: &Path, grid: &Grid, r: &Raster) -> io::Result<()> {
    write_bfm1(path, grid.nx, grid.ny, &r.data)
}

fn csv_err(e: csv::Error) -> io::Error {
    io::Error::new(io::ErrorKind::Other, e)
}

/// Writes a `time` column followed by one column per unit.
fn write_series(path: &Path, ids: &[u32], labels: &[String], times: &[f64], rows: &[Vec<f64>]) -> io::Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let header: Vec<String> = std::iter::once("time".to_string())
        .chain(ids.iter().zip(labels).map(|(id, l)| format!("{id}:{l}")))
        .collect();
    w.write_record(&header).map_err(csv_err)?;
    for (t, row) in times.iter().zip(rows) {
        let rec: Vec<String> = std::iter::once(t.to_string()).chain(row.iter().map(f64::to_string)).collect();
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()
}

#[derive(Serialize)]
struct UnitRow<'a> {
    id: u32,
    label: &'a str,
    side: Side,
    kind: &'static str,
    x: f64,
    y: f64,
    bearing_deg: f64,
    strength: f64,
}

fn write_units(path: &Path, scenario: &Scenario) -> io::Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for u in &scenario.units {
        w.serialize(UnitRow {
            id: u.id,
            label: &u.label,
            side: u.side,
            kind: "infantry",
            x: u.formation.center.x,
            y: u.formation.center.y,
            bearing_deg: u.formation.bearing.to_degrees(),
            strength: u.formation.strength,
        })
        .map_err(csv_err)?;
    }
    for a in &scenario.artillery {
        w.serialize(UnitRow {
            id: a.id,
            label: &a.label,
            side: a.side,
            kind: "artillery",
            x: a.position.x,
            y: a.position.y,
            bearing_deg: a.bearing.to_degrees(),
            strength: a.guns as f64,
        })
        .map_err(csv_err)?;
    }
    w.flush()
}

/// Writes the histories, unit table, events and summary of a finished run.
pub fn write_run(dir: &Path, scenario: &Scenario, result: &RunResult) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    let labels: Vec<String> = result.units.iter().map(|u| u.label.clone()).collect();
    write_series(&dir.join("strength.csv"), &result.unit_ids, &labels, &result.times, &result.strength)?;
    write_series(&dir.join("casualties.csv"), &result.unit_ids, &labels, &result.times, &result.casualties)?;
    write_units(&dir.join("units.csv"), scenario)?;
    let mut w = csv::Writer::from_path(dir.join("events.csv")).map_err(csv_err)?;
    for e in &result.events {
        w.serialize(e).map_err(csv_err)?;
    }
    w.flush()?;
    let json = serde_json::to_string_pretty(result).map_err(io::Error::other)?;
    fs::write(dir.join("summary.json"), json)
}

#[derive(Serialize)]
struct SnapshotRow {
    id: u32,
    side: Side,
    kind: &'static str,
    strength: f64,
    x: Option<f64>,
    y: Option<f64>,
    bearing_deg: f64,
    status: crate::units::UnitStatus,
}

/// Snapshot writer for one run directory.
pub struct DirSink {
    dir: PathBuf,
    index: BufWriter<File>,
}

impl DirSink {
    /// Creates the directory, the static rasters and the index header.
    pub fn create(dir: &Path, scenario: &Scenario) -> io::Result<Self> {
        fs::create_dir_all(dir.join("snapshots"))?;
        let g = scenario.map.grid;
        write_raster(&dir.join("elevation.bin"), &g, &scenario.map.elevation)?;
        write_raster(&dir.join("overlay.bin"), &g, &scenario.map.overlay)?;
        let mut index = BufWriter::new(File::create(dir.join("index.txt"))?);
        writeln!(index, "grid {} {} {} {} {}", g.nx, g.ny, g.ds, g.origin.x, g.origin.y)?;
        writeln!(index, "static elevation elevation.bin")?;
        writeln!(index, "static overlay overlay.bin")?;
        index.flush()?;
        Ok(Self {
            dir: dir.to_path_buf(),
            index,
        })
    }
}

impl SnapshotSink for DirSink {
    fn snapshot(&mut self, sim: &Simulation) -> io::Result<()> {
        let g = sim.grid();
        let stamp = format!("{:08.0}", sim.time);
        for side in [Side::Red, Side::Blue] {
            let rel = format!("snapshots/t{stamp}-{side}.bin");
            write_raster(&self.dir.join(&rel), &g, &sim.side_density(side))?;
            writeln!(self.index, "density {} {side} {rel}", sim.time)?;
        }
        let rel = format!("snapshots/t{stamp}-units.csv");
        let mut w = csv::Writer::from_path(self.dir.join(&rel)).map_err(csv_err)?;
        for s in sim.summaries().into_iter().chain(sim.artillery_summaries()) {
            w.serialize(SnapshotRow {
                id: s.id,
                side: s.side,
                kind: if s.artillery { "artillery" } else { "infantry" },
                strength: s.strength,
                x: s.centroid.map(|c| c.x),
                y: s.centroid.map(|c| c.y),
                bearing_deg: s.bearing.to_degrees(),
                status: s.status,
            })
            .map_err(csv_err)?;
        }
        w.flush()?;
        writeln!(self.index, "units {} {rel}", sim.time)?;
        self.index.flush()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bfm1_roundtrip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.bin");
        let data: Vec<f64> = (0..12).map(|k| k as f64 * 0.25 - 1.0).collect();
        write_bfm1(&p, 4, 3, &data).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"BFM1");
        assert_eq!(u64::from_le_bytes(bytes[4..12].try_into().unwrap()), 4);
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 3);
        assert_eq!(f64::from_le_bytes(bytes[20..28].try_into().unwrap()), -1.0);
        assert_eq!(read_bfm1(&p).unwrap(), (4, 3, data));
        fs::write(&p, &bytes[..30]).unwrap();
        assert_eq!(read_bfm1(&p).unwrap_err().kind(), io::ErrorKind::InvalidData);
    }

    #[test]
    fn run_dir_names() {
        assert_eq!(run_dir_name("brigade", 0), "brigade-seed0");
        assert_eq!(run_dir_name("a b/c", 12), "a_b_c-seed12");
        assert_eq!(output_root(Some(Path::new("/x"))), PathBuf::from("/x"));
    }
}
