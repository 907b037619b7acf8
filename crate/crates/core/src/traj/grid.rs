use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CellId, GpsPoint, PointMetric, METERS_PER_DEGREE};
use crate::error::{Error, Result};

/// Whether the bounding box is in lon/lat degrees (cell size in meters) or
/// in planar toy units (cell size in the same units).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridMode {
    Geographic,
    Planar,
}

/// Uniform partition of a bounding box into square cells, indexed
/// row-major from the minimum corner.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    bbox: [f64; 4],
    cell_size: f64,
    mode: GridMode,
    n_cols: usize,
    n_rows: usize,
    cell_w: f64,
    cell_h: f64,
}

// Tolerance when deriving cell counts, so that a bbox built as an exact
// multiple of the cell width does not gain a sliver column.
const COUNT_SLACK: f64 = 1e-9;

impl GridSpec {
    /// `bbox` is `[min_lon, min_lat, max_lon, max_lat]`.
    pub fn new(bbox: [f64; 4], cell_size: f64, mode: GridMode) -> Result<Self> {
        let [min_lon, min_lat, max_lon, max_lat] = bbox;
        if bbox.iter().any(|v| !v.is_finite()) || min_lon >= max_lon || min_lat >= max_lat {
            return Err(Error::InvalidArgument(format!("degenerate bbox {bbox:?}")));
        }
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(Error::InvalidArgument(format!("cell size {cell_size} must be positive")));
        }
        let (cell_w, cell_h) = match mode {
            GridMode::Planar => (cell_size, cell_size),
            GridMode::Geographic => {
                let mid_lat = 0.5 * (min_lat + max_lat);
                let h = cell_size / METERS_PER_DEGREE;
                (h / mid_lat.to_radians().cos(), h)
            }
        };
        let n_cols = (((max_lon - min_lon) / cell_w) - COUNT_SLACK).ceil().max(1.0) as usize;
        let n_rows = (((max_lat - min_lat) / cell_h) - COUNT_SLACK).ceil().max(1.0) as usize;
        Ok(GridSpec {
            bbox,
            cell_size,
            mode,
            n_cols,
            n_rows,
            cell_w,
            cell_h,
        })
    }

    /// Builds a grid with exactly `n_cols x n_rows` cells anchored at the
    /// given minimum corner.
    pub fn from_origin(
        min_lon: f64,
        min_lat: f64,
        n_cols: usize,
        n_rows: usize,
        cell_size: f64,
        mode: GridMode,
    ) -> Result<Self> {
        if n_cols == 0 || n_rows == 0 {
            return Err(Error::InvalidArgument("grid needs at least one cell".into()));
        }
        let (max_lon, max_lat) = match mode {
            GridMode::Planar => (
                min_lon + n_cols as f64 * cell_size,
                min_lat + n_rows as f64 * cell_size,
            ),
            GridMode::Geographic => {
                let h = cell_size / METERS_PER_DEGREE;
                let max_lat = min_lat + n_rows as f64 * h;
                let mid_lat = 0.5 * (min_lat + max_lat);
                (min_lon + n_cols as f64 * h / mid_lat.to_radians().cos(), max_lat)
            }
        };
        let grid = GridSpec::new([min_lon, min_lat, max_lon, max_lat], cell_size, mode)?;
        debug_assert_eq!((grid.n_cols, grid.n_rows), (n_cols, n_rows));
        Ok(grid)
    }

    pub fn bbox(&self) -> [f64; 4] {
        self.bbox
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn mode(&self) -> GridMode {
        self.mode
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cells(&self) -> usize {
        self.n_cols * self.n_rows
    }

    /// Cell extent in coordinate units (degrees in geographic mode).
    pub fn cell_extent(&self) -> (f64, f64) {
        (self.cell_w, self.cell_h)
    }

    pub fn metric(&self) -> PointMetric {
        match self.mode {
            GridMode::Geographic => PointMetric::Haversine,
            GridMode::Planar => PointMetric::Euclidean,
        }
    }

    pub fn contains(&self, p: &GpsPoint) -> bool {
        let [min_lon, min_lat, max_lon, max_lat] = self.bbox;
        (min_lon..=max_lon).contains(&p.lon) && (min_lat..=max_lat).contains(&p.lat)
    }

    pub fn cell_of(&self, p: &GpsPoint) -> Result<CellId> {
        if !self.contains(p) {
            return Err(Error::OutOfGrid {
                lon: p.lon,
                lat: p.lat,
            });
        }
        // Points on the max edge belong to the last row/column.
        let col = (((p.lon - self.bbox[0]) / self.cell_w).floor() as usize).min(self.n_cols - 1);
        let row = (((p.lat - self.bbox[1]) / self.cell_h).floor() as usize).min(self.n_rows - 1);
        Ok(CellId(row * self.n_cols + col))
    }

    /// Cell of the point after clamping it into the bounding box.
    pub fn nearest_cell(&self, p: &GpsPoint) -> CellId {
        let [min_lon, min_lat, max_lon, max_lat] = self.bbox;
        let q = GpsPoint {
            lon: p.lon.clamp(min_lon, max_lon),
            lat: p.lat.clamp(min_lat, max_lat),
        };
        self.cell_of(&q).expect("clamped point lies inside the grid")
    }

    pub fn row_col(&self, cell: CellId) -> (usize, usize) {
        (cell.0 / self.n_cols, cell.0 % self.n_cols)
    }

    pub fn cell_at(&self, row: usize, col: usize) -> CellId {
        CellId(row * self.n_cols + col)
    }

    pub fn cell_center(&self, cell: CellId) -> Result<GpsPoint> {
        if cell.0 >= self.n_cells() {
            return Err(Error::CellOutOfRange {
                index: cell.0,
                n_nodes: self.n_cells(),
            });
        }
        let (row, col) = self.row_col(cell);
        Ok(GpsPoint {
            lon: self.bbox[0] + (col as f64 + 0.5) * self.cell_w,
            lat: self.bbox[1] + (row as f64 + 0.5) * self.cell_h,
        })
    }

    /// Canonical textual form; the basis of [`GridSpec::hash`].
    pub fn canonical(&self) -> String {
        let mode = match self.mode {
            GridMode::Geographic => "geographic",
            GridMode::Planar => "planar",
        };
        format!(
            "mode={mode};bbox={:?},{:?},{:?},{:?};cell_size={:?}",
            self.bbox[0], self.bbox[1], self.bbox[2], self.bbox[3], self.cell_size
        )
    }

    /// Hex SHA-256 of the canonical form, used to tie embedding tables and
    /// checkpoints to the grid they were built on.
    pub fn hash(&self) -> String {
        hex_digest(self.canonical().as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
