use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::traj::CellId;

const MAGIC: &[u8; 4] = b"TJCE";
const VERSION: u32 = 1;

/// One `d`-dimensional vector per grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    n_nodes: usize,
    d: usize,
    data: Vec<f32>,
}

impl EmbeddingTable {
    pub fn new(n_nodes: usize, d: usize, data: Vec<f32>) -> Result<Self> {
        if d == 0 || data.len() != n_nodes * d {
            return Err(Error::Shape {
                left: vec![n_nodes, d],
                right: vec![data.len()],
                context: "embedding table",
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding table".into()));
        }
        Ok(EmbeddingTable { n_nodes, d, data })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn lookup(&self, cell: CellId) -> Result<&[f32]> {
        if cell.0 >= self.n_nodes {
            return Err(Error::CellOutOfRange {
                index: cell.0,
                n_nodes: self.n_nodes,
            });
        }
        Ok(self.row(cell.0))
    }

    /// Path of the text file holding the grid hash next to `path`.
    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".grid");
        PathBuf::from(s)
    }

    /// Writes the binary table and its grid-hash sidecar.
    pub fn save(&self, path: &Path, grid_hash: &str) -> Result<()> {
        let mut out = Vec::with_capacity(24 + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.n_nodes as u64).to_le_bytes());
        out.extend_from_slice(&(self.d as u64).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))?;
        let side = Self::sidecar_path(path);
        std::fs::write(&side, format!("{grid_hash}\n")).map_err(|e| Error::io(&side, e))
    }

    /// Reads a table; when `grid_hash` is given it must match the sidecar.
    pub fn load(path: &Path, grid_hash: Option<&str>) -> Result<Self> {
        if let Some(expected) = grid_hash {
            let side = Self::sidecar_path(path);
            let found = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
            if found.trim() != expected {
                return Err(Error::Incompatible(format!(
                    "embedding table built for grid {}, expected {expected}",
                    found.trim()
                )));
            }
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 24 || &bytes[..4] != MAGIC {
            return Err(Error::Corrupt("not an embedding table".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Incompatible(format!("embedding table version {version}")));
        }
        let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let d = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        let payload = &bytes[24..];
        if Some(payload.len()) != n.checked_mul(d).and_then(|x| x.checked_mul(4)) {
            return Err(Error::Corrupt(format!("embedding payload of {} bytes for {n} x {d}", payload.len())));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(n, d, data)
    }
}
