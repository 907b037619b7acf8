use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use super::Measure;
use crate::error::{Error, Result};
use crate::traj::Trajectory;

const MAGIC: &[u8; 4] = b"TJDM";
const VERSION: u32 = 1;

/// Dense `m x n` matrix of measure values between queries and candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub query_ids: Vec<String>,
    pub candidate_ids: Vec<String>,
    /// Row-major, `values[i * n + j]`.
    pub values: Vec<f64>,
}

impl DistanceMatrix {
    pub fn rows(&self) -> usize {
        self.query_ids.len()
    }

    pub fn cols(&self) -> usize {
        self.candidate_ids.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.cols();
        &self.values[i * n..(i + 1) * n]
    }

    /// `query_id,candidate_id,distance`, one line per pair.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "query_id,candidate_id,distance").map_err(io)?;
        for (i, q) in self.query_ids.iter().enumerate() {
            for (j, c) in self.candidate_ids.iter().enumerate() {
                writeln!(w, "{q},{c},{:?}", self.get(i, j)).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    /// Binary block: magic, version (u32), m and n (u64), then `m * n`
    /// little-endian f64 values row-major. Ids are not stored.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.rows() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&(self.cols() as u64).to_le_bytes()).map_err(io)?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// Reads a binary block; ids are synthesized as row/column indices.
    pub fn read_binary(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut head = [0u8; 24];
        r.read_exact(&mut head)
            .map_err(|_| Error::Corrupt("distance matrix header truncated".into()))?;
        if &head[..4] != MAGIC {
            return Err(Error::Corrupt("not a distance matrix file".into()));
        }
        let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Incompatible(format!("distance matrix version {version}")));
        }
        let m = u64::from_le_bytes(head[8..16].try_into().unwrap()) as usize;
        let n = u64::from_le_bytes(head[16..24].try_into().unwrap()) as usize;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        if bytes.len() != m * n * 8 {
            return Err(Error::Corrupt(format!(
                "expected {} payload bytes, found {}",
                m * n * 8,
                bytes.len()
            )));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(DistanceMatrix {
            query_ids: (0..m).map(|i| i.to_string()).collect(),
            candidate_ids: (0..n).map(|j| j.to_string()).collect(),
            values,
        })
    }
}

/// Evaluates `measure` on every (query, candidate) pair. The parallel and
/// serial paths compute each entry independently, so they agree bitwise.
pub fn pairwise_matrix(
    queries: &[Trajectory],
    candidates: &[Trajectory],
    measure: &Measure,
    parallel: bool,
) -> Result<DistanceMatrix> {
    if queries.is_empty() || candidates.is_empty() {
        return Err(Error::InvalidArgument("pairwise matrix needs nonempty sets".into()));
    }
    let row = |i: usize| -> Result<Vec<f64>> {
        candidates
            .iter()
            .enumerate()
            .map(|(j, c)| {
                measure
                    .distance(&queries[i].points, &c.points)
                    .map_err(|e| Error::AtPair {
                        query: i,
                        candidate: j,
                        source: Box::new(e),
                    })
            })
            .collect()
    };
    let rows: Vec<Vec<f64>> = if parallel {
        (0..queries.len()).into_par_iter().map(row).collect::<Result<_>>()?
    } else {
        (0..queries.len()).map(row).collect::<Result<_>>()?
    };
    Ok(DistanceMatrix {
        query_ids: queries.iter().map(|t| t.id.clone()).collect(),
        candidate_ids: candidates.iter().map(|t| t.id.clone()).collect(),
        values: rows.concat(),
    })
}

/// Per query, the indices of the `k` nearest candidates in ascending
/// distance; ties go to the lower candidate index.
pub fn knn_ground_truth(matrix: &DistanceMatrix, k: usize) -> Result<Vec<Vec<usize>>> {
    if k > matrix.cols() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds {} candidates",
            matrix.cols()
        )));
    }
    Ok((0..matrix.rows())
        .map(|i| {
            let row = matrix.row(i);
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
            order.truncate(k);
            order
        })
        .collect())
}
