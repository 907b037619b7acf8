use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{GridSpec, Trajectory};
use crate::error::{Error, Result};

// Compass moves over the 8-neighborhood, ordered clockwise from north so
// that adjacent entries are 45 degrees apart.
const MOVES: [(isize, isize); 8] = [
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
];

/// Heading persistence of the synthetic walker: probability of keeping the
/// current heading, of turning by 45 degrees, and of pausing in place.
const KEEP_HEADING: f64 = 0.7;
const TURN: f64 = 0.25;

/// Random-walk trajectories over grid cell centers. Each step moves to one
/// of the 8 neighbouring cells or stays put; headings are persistent so the
/// walks resemble vehicle traces rather than Brownian noise.
pub fn synth_generate(
    count: usize,
    grid: &GridSpec,
    len_range: (usize, usize),
    seed: u64,
) -> Result<Vec<Trajectory>> {
    let (min_len, max_len) = len_range;
    if count == 0 || min_len == 0 || min_len > max_len {
        return Err(Error::InvalidArgument(format!(
            "bad synthetic request: count {count}, lengths {len_range:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, cols) = (grid.n_rows() as isize, grid.n_cols() as isize);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let len = rng.random_range(min_len..=max_len);
        let mut row = rng.random_range(0..grid.n_rows()) as isize;
        let mut col = rng.random_range(0..grid.n_cols()) as isize;
        let mut heading = rng.random_range(0..MOVES.len());
        let mut points = Vec::with_capacity(len);
        for _ in 0..len {
            points.push(grid.cell_center(grid.cell_at(row as usize, col as usize))?);
            let u = rng.random::<f64>();
            if u >= KEEP_HEADING + TURN {
                continue;
            }
            if u >= KEEP_HEADING {
                heading = if rng.random::<bool>() {
                    (heading + 1) % 8
                } else {
                    (heading + 7) % 8
                };
            }
            // Bounce off the border by reversing the offending component.
            let (mut dr, mut dc) = MOVES[heading];
            if !(0..rows).contains(&(row + dr)) {
                dr = -dr;
            }
            if !(0..cols).contains(&(col + dc)) {
                dc = -dc;
            }
            if let Some(h) = MOVES.iter().position(|&m| m == (dr, dc)) {
                heading = h;
            }
            row = (row + dr).clamp(0, rows - 1);
            col = (col + dc).clamp(0, cols - 1);
        }
        out.push(Trajectory::new(format!("synth-{i}"), points)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::{trajectory_to_cells, GridMode};
    use super::*;

    fn grid() -> GridSpec {
        GridSpec::from_origin(-8.69, 41.14, 16, 12, 100.0, GridMode::Geographic).unwrap()
    }

    #[test]
    fn deterministic_under_seed() {
        let g = grid();
        assert_eq!(
            synth_generate(1, &g, (20, 40), 7).unwrap(),
            synth_generate(1, &g, (20, 40), 7).unwrap()
        );
        assert_ne!(
            synth_generate(3, &g, (20, 40), 7).unwrap(),
            synth_generate(3, &g, (20, 40), 8).unwrap()
        );
    }

    #[test]
    fn walks_stay_inside_and_move_to_neighbours() {
        let g = grid();
        for t in synth_generate(200, &g, (5, 60), 1).unwrap() {
            assert!((5..=60).contains(&t.len()));
            assert!(t.points.iter().all(|p| g.contains(p)));
            let cells = trajectory_to_cells(&t, &g).unwrap().cells;
            for w in cells.windows(2) {
                let (r0, c0) = g.row_col(w[0]);
                let (r1, c1) = g.row_col(w[1]);
                assert!(r0.abs_diff(r1) <= 1 && c0.abs_diff(c1) <= 1);
            }
        }
    }

    #[test]
    fn rejects_empty_request() {
        assert!(synth_generate(0, &grid(), (5, 6), 1).is_err());
        assert!(synth_generate(1, &grid(), (7, 6), 1).is_err());
    }
}
