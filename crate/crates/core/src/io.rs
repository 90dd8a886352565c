//! Output formats: CSV time series, binary two-parameter grids with a JSON header, and
//! atomic file writes.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::control::TraceRow;
use crate::stochastic::{Ensemble, Process, TwoParamProcess};

/// Round-trip decimal form; non-finite values as `inf`, `-inf`, `nan`.
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:?}")
    } else {
        crate::ext_real::label(x).to_string()
    }
}

/// One row per `(path, node)`: `path,t,<names...>`.
pub fn process_csv(p: &Process, ens: &Ensemble, names: &[String]) -> String {
    let mut s = String::from("path,t");
    for c in 0..p.dim() {
        match names.get(c) {
            Some(n) => write!(s, ",{n}").unwrap(),
            None => write!(s, ",v{c}").unwrap(),
        }
    }
    s.push('\n');
    for q in 0..p.paths() {
        for i in 0..p.nodes() {
            write!(s, "{q},{}", fmt_f64(ens.t(i))).unwrap();
            for v in p.at(i, q) {
                write!(s, ",{}", fmt_f64(*v)).unwrap();
            }
            s.push('\n');
        }
    }
    s
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from("iter,cost,residual,step,backtracks\n");
    for r in rows {
        writeln!(s, "{},{},{},{},{}", r.iter, fmt_f64(r.cost), fmt_f64(r.residual), fmt_f64(r.step), r.backtracks)
            .unwrap();
    }
    s
}

/// Header describing the raw little-endian `f64` dump of a two-parameter process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridHeader {
    pub dtype: String,
    /// Axis order of the dump, slowest first.
    pub layout: Vec<String>,
    pub t_nodes: usize,
    pub s_nodes: usize,
    pub paths: usize,
    pub rows: usize,
    pub cols: usize,
    pub horizon: f64,
    pub steps: usize,
}

pub fn two_param_binary(z: &TwoParamProcess, ens: &Ensemble) -> (GridHeader, Vec<u8>) {
    let header = GridHeader {
        dtype: "f64le".into(),
        layout: ["t", "s", "path", "row", "col"].map(String::from).to_vec(),
        t_nodes: z.t_nodes(),
        s_nodes: z.s_nodes(),
        paths: z.paths(),
        rows: z.rows(),
        cols: z.cols(),
        horizon: ens.grid().horizon,
        steps: ens.steps(),
    };
    let bytes = z.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    (header, bytes)
}

pub fn read_two_param_binary(header: &GridHeader, bytes: &[u8]) -> Option<Vec<f64>> {
    let count = header.t_nodes * header.s_nodes * header.paths * header.rows * header.cols;
    if bytes.len() != 8 * count {
        return None;
    }
    Some(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes through a temporary file in the same directory followed by a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}
