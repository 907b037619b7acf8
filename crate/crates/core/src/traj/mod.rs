//! Trajectory data model, grid discretization, preprocessing and the
//! randomized robustness transforms.

mod grid;
mod io;
mod synth;
mod transform;

pub use grid::{GridMode, GridSpec};
pub use io::{load_trajectories, write_cell_dataset, write_trajectories, TrajFormat};
pub use synth::synth_generate;
pub use transform::{distort, downsample, interleave, odd_even_split};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean Earth radius in meters, shared by the haversine distance and the
/// meter/degree conversions so that both agree.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

/// Length in meters of one degree of latitude.
pub const METERS_PER_DEGREE: f64 = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;

/// A WGS-84 position, or a planar coordinate pair in toy mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpsPoint {
    pub lon: f64,
    pub lat: f64,
}

impl GpsPoint {
    pub fn new(lon: f64, lat: f64) -> Result<Self> {
        if !lon.is_finite() || !(-180.0..=180.0).contains(&lon) {
            return Err(Error::InvalidArgument(format!("longitude {lon} outside [-180, 180]")));
        }
        if !lat.is_finite() || !(-90.0..=90.0).contains(&lat) {
            return Err(Error::InvalidArgument(format!("latitude {lat} outside [-90, 90]")));
        }
        Ok(GpsPoint { lon, lat })
    }
}

/// How the distance between two points is measured. Never inferred from
/// the data: the caller states it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointMetric {
    /// Great-circle distance in meters between lon/lat degrees.
    Haversine,
    /// Plain Euclidean distance in coordinate units.
    Euclidean,
}

impl PointMetric {
    #[inline]
    pub fn distance(self, a: &GpsPoint, b: &GpsPoint) -> f64 {
        match self {
            PointMetric::Haversine => haversine_m(a, b),
            PointMetric::Euclidean => (a.lon - b.lon).hypot(a.lat - b.lat),
        }
    }
}

pub fn haversine_m(a: &GpsPoint, b: &GpsPoint) -> f64 {
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat * 0.5).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon * 0.5).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub points: Vec<GpsPoint>,
}

impl Trajectory {
    pub fn new(id: impl Into<String>, points: Vec<GpsPoint>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyTrajectory);
        }
        Ok(Trajectory {
            id: id.into(),
            points,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Convenience constructor for planar toy coordinates.
    pub fn from_xy(id: impl Into<String>, xy: &[(f64, f64)]) -> Result<Self> {
        let points = xy
            .iter()
            .map(|&(x, y)| GpsPoint::new(x, y))
            .collect::<Result<Vec<_>>>()?;
        Trajectory::new(id, points)
    }
}

/// Row-major index of one grid cell: `row * n_cols + col`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellId(pub usize);

impl CellId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellTrajectory {
    pub source_id: String,
    pub cells: Vec<CellId>,
}

impl CellTrajectory {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

/// Keeps trajectories whose length lies in `[min_len, max_len]` and whose
/// points all fall inside the grid bounding box.
pub fn preprocess(
    data: &[Trajectory],
    grid: &GridSpec,
    min_len: usize,
    max_len: usize,
) -> Result<Vec<Trajectory>> {
    if min_len > max_len {
        return Err(Error::InvalidArgument(format!(
            "min_len {min_len} exceeds max_len {max_len}"
        )));
    }
    Ok(data
        .iter()
        .filter(|t| (min_len..=max_len).contains(&t.len()))
        .filter(|t| t.points.iter().all(|p| grid.contains(p)))
        .cloned()
        .collect())
}

pub fn point_to_cell(p: &GpsPoint, grid: &GridSpec) -> Result<CellId> {
    grid.cell_of(p)
}

pub fn trajectory_to_cells(t: &Trajectory, grid: &GridSpec) -> Result<CellTrajectory> {
    let cells = t
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| grid.cell_of(p).map_err(|e| Error::at_point(i, e)))
        .collect::<Result<Vec<_>>>()?;
    Ok(CellTrajectory {
        source_id: t.id.clone(),
        cells,
    })
}

/// Like [`trajectory_to_cells`] but snaps points outside the grid to the
/// nearest border cell instead of failing.
pub fn trajectory_to_cells_snapped(t: &Trajectory, grid: &GridSpec) -> CellTrajectory {
    CellTrajectory {
        source_id: t.id.clone(),
        cells: t.points.iter().map(|p| grid.nearest_cell(p)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_grid() -> GridSpec {
        GridSpec::new([0.0, 0.0, 10.0, 10.0], 1.0, GridMode::Planar).unwrap()
    }

    fn line(id: &str, n: usize) -> Trajectory {
        let xy: Vec<_> = (0..n).map(|i| (0.5 + (i % 9) as f64, 0.5)).collect();
        Trajectory::from_xy(id, &xy).unwrap()
    }

    #[test]
    fn rejects_out_of_range_coordinates() {
        assert!(GpsPoint::new(0.0, 95.0).is_err());
        assert!(GpsPoint::new(181.0, 0.0).is_err());
        assert!(GpsPoint::new(-180.0, -90.0).is_ok());
    }

    #[test]
    fn preprocess_length_window_is_inclusive() {
        let grid = toy_grid();
        let data = vec![line("a", 19), line("b", 20), line("c", 200), line("d", 201)];
        let kept = preprocess(&data, &grid, 20, 200).unwrap();
        let ids: Vec<_> = kept.iter().map(|t| t.id.as_str()).collect();
        assert_eq!(ids, ["b", "c"]);
    }

    #[test]
    fn preprocess_drops_trajectories_leaving_the_bbox() {
        let grid = toy_grid();
        let mut t = line("x", 50);
        t.points[17] = GpsPoint::new(11.0, 0.5).unwrap();
        assert!(preprocess(&[t], &grid, 20, 200).unwrap().is_empty());
    }

    #[test]
    fn preprocess_rejects_inverted_window() {
        assert!(preprocess(&[], &toy_grid(), 10, 5).is_err());
    }

    #[test]
    fn preprocess_is_idempotent() {
        let grid = toy_grid();
        let mut data: Vec<_> = (5..40).map(|n| line(&format!("t{n}"), n)).collect();
        data[3].points[0] = GpsPoint::new(50.0, 50.0).unwrap();
        let once = preprocess(&data, &grid, 10, 30).unwrap();
        let twice = preprocess(&once, &grid, 10, 30).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn cells_keep_length_and_repeats() {
        let grid = toy_grid();
        let t = Trajectory::from_xy("r", &[(0.2, 0.2), (0.3, 0.4), (0.9, 0.9)]).unwrap();
        let c = trajectory_to_cells(&t, &grid).unwrap();
        assert_eq!(c.cells, vec![CellId(0); 3]);

        let t = Trajectory::from_xy("d", &[(0.5, 0.5), (1.5, 0.5), (1.5, 1.5)]).unwrap();
        let c = trajectory_to_cells(&t, &grid).unwrap();
        assert_eq!(c.cells, vec![CellId(0), CellId(1), CellId(11)]);
    }

    #[test]
    fn cell_error_names_point_index() {
        let grid = toy_grid();
        let t = Trajectory::from_xy("e", &[(0.5, 0.5), (1.5, 0.5), (12.0, 0.5)]).unwrap();
        match trajectory_to_cells(&t, &grid) {
            Err(Error::AtPoint { index, .. }) => assert_eq!(index, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn haversine_matches_known_distance() {
        // One degree of latitude along a meridian.
        let a = GpsPoint::new(0.0, 0.0).unwrap();
        let b = GpsPoint::new(0.0, 1.0).unwrap();
        assert!((haversine_m(&a, &b) - METERS_PER_DEGREE).abs() < 1e-6);
    }
}
