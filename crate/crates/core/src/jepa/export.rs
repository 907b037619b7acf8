use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TJEM";
const VERSION: u32 = 1;

fn ids_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".ids");
    PathBuf::from(s)
}

/// Writes a `count x d` float32 matrix with a header, plus a sidecar
/// `<path>.ids` listing one id per line in row order.
pub fn write_embeddings(path: &Path, ids: &[String], vectors: &[Vec<f32>]) -> Result<()> {
    if ids.len() != vectors.len() {
        return Err(Error::InvalidArgument(format!("{} ids for {} vectors", ids.len(), vectors.len())));
    }
    let d = vectors.first().map_or(0, Vec::len);
    if vectors.iter().any(|v| v.len() != d) {
        return Err(Error::InvalidArgument("embeddings have differing dimensions".into()));
    }
    if let Some(bad) = ids.iter().find(|id| id.contains('\n')) {
        return Err(Error::InvalidArgument(format!("id {bad:?} contains a newline")));
    }
    let mut out = Vec::with_capacity(24 + vectors.len() * d * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(vectors.len() as u64).to_le_bytes());
    out.extend_from_slice(&(d as u64).to_le_bytes());
    for v in vectors.iter().flatten() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))?;
    let side = ids_path(path);
    let mut f = std::io::BufWriter::new(std::fs::File::create(&side).map_err(|e| Error::io(&side, e))?);
    for id in ids {
        writeln!(f, "{id}").map_err(|e| Error::io(&side, e))?;
    }
    f.flush().map_err(|e| Error::io(&side, e))
}

pub fn read_embeddings(path: &Path) -> Result<(Vec<String>, Vec<Vec<f32>>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 24 || &bytes[..4] != MAGIC {
        return Err(Error::Corrupt("not an embedding matrix".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Incompatible(format!("embedding matrix version {version}")));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let d = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let payload = &bytes[24..];
    if Some(payload.len()) != n.checked_mul(d).and_then(|x| x.checked_mul(4)) {
        return Err(Error::Corrupt("embedding matrix payload size".into()));
    }
    let flat: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let vectors = if d == 0 {
        vec![Vec::new(); n]
    } else {
        flat.chunks_exact(d).map(<[f32]>::to_vec).collect()
    };
    let side = ids_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let ids: Vec<String> = text.lines().map(str::to_string).collect();
    if ids.len() != n {
        return Err(Error::Corrupt(format!("{} ids for {n} embeddings", ids.len())));
    }
    Ok((ids, vectors))
}
