use rand::Rng;

use super::{GpsPoint, PointMetric, Trajectory, METERS_PER_DEGREE};
use crate::error::{Error, Result};

/// Splits into odd-indexed points `{X1, X3, ...}` and even-indexed points
/// `{X2, X4, ...}` (1-based positions).
pub fn odd_even_split(t: &Trajectory) -> Result<(Trajectory, Trajectory)> {
    if t.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "odd/even split needs at least 2 points, got {}",
            t.len()
        )));
    }
    let odd = t.points.iter().step_by(2).copied().collect();
    let even = t.points.iter().skip(1).step_by(2).copied().collect();
    Ok((
        Trajectory {
            id: t.id.clone(),
            points: odd,
        },
        Trajectory {
            id: t.id.clone(),
            points: even,
        },
    ))
}

/// Inverse of [`odd_even_split`].
pub fn interleave(odd: &Trajectory, even: &Trajectory) -> Trajectory {
    let mut points = Vec::with_capacity(odd.len() + even.len());
    let mut a = odd.points.iter();
    let mut b = even.points.iter();
    loop {
        match (a.next(), b.next()) {
            (None, None) => break,
            (x, y) => points.extend(x.into_iter().chain(y).copied()),
        }
    }
    Trajectory {
        id: odd.id.clone(),
        points,
    }
}

/// Drops each interior point independently with probability `rho_s`.
/// Endpoints are always kept.
pub fn downsample<R: Rng + ?Sized>(t: &Trajectory, rho_s: f64, rng: &mut R) -> Result<Trajectory> {
    if !(0.0..1.0).contains(&rho_s) {
        return Err(Error::InvalidArgument(format!("down-sampling rate {rho_s} outside [0, 1)")));
    }
    let n = t.len();
    let points = t
        .points
        .iter()
        .enumerate()
        .filter(|&(i, _)| {
            // Draw for every interior point so the rng stream does not
            // depend on earlier outcomes.
            let keep = rng.random::<f64>() >= rho_s;
            i == 0 || i + 1 == n || keep
        })
        .map(|(_, p)| *p)
        .collect();
    Ok(Trajectory {
        id: t.id.clone(),
        points,
    })
}

/// Shifts each point with probability `rho_d` by an offset drawn uniformly
/// from the disc of radius `magnitude` (meters for haversine data, units
/// for planar data).
pub fn distort<R: Rng + ?Sized>(
    t: &Trajectory,
    rho_d: f64,
    magnitude: f64,
    metric: PointMetric,
    rng: &mut R,
) -> Result<Trajectory> {
    if !(0.0..=1.0).contains(&rho_d) {
        return Err(Error::InvalidArgument(format!("distortion rate {rho_d} outside [0, 1]")));
    }
    if !(magnitude > 0.0) {
        return Err(Error::InvalidArgument(format!("distortion magnitude {magnitude} must be positive")));
    }
    let points = t
        .points
        .iter()
        .map(|p| {
            let selected = rng.random::<f64>() < rho_d;
            let radius = magnitude * rng.random::<f64>().sqrt();
            let angle = rng.random::<f64>() * std::f64::consts::TAU;
            if !selected {
                return *p;
            }
            let (dx, dy) = (radius * angle.cos(), radius * angle.sin());
            let shifted = match metric {
                PointMetric::Euclidean => GpsPoint {
                    lon: p.lon + dx,
                    lat: p.lat + dy,
                },
                PointMetric::Haversine => GpsPoint {
                    lon: p.lon + dx / (METERS_PER_DEGREE * p.lat.to_radians().cos()),
                    lat: p.lat + dy / METERS_PER_DEGREE,
                },
            };
            GpsPoint {
                lon: shifted.lon.clamp(-180.0, 180.0),
                lat: shifted.lat.clamp(-90.0, 90.0),
            }
        })
        .collect();
    Ok(Trajectory {
        id: t.id.clone(),
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::super::haversine_m;
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(n: usize) -> Trajectory {
        let xy: Vec<_> = (0..n).map(|i| (i as f64 * 0.001, 41.0 + i as f64 * 0.0005)).collect();
        Trajectory::from_xy("s", &xy).unwrap()
    }

    #[test]
    fn split_of_five() {
        let t = seq(5);
        let (a, b) = odd_even_split(&t).unwrap();
        assert_eq!(a.points, vec![t.points[0], t.points[2], t.points[4]]);
        assert_eq!(b.points, vec![t.points[1], t.points[3]]);
    }

    #[test]
    fn split_of_two_and_one() {
        let t = seq(2);
        let (a, b) = odd_even_split(&t).unwrap();
        assert_eq!((a.points, b.points), (vec![t.points[0]], vec![t.points[1]]));
        assert!(odd_even_split(&seq(1)).is_err());
    }

    proptest! {
        #[test]
        fn split_then_interleave_is_identity(n in 2usize..300) {
            let t = seq(n);
            let (a, b) = odd_even_split(&t).unwrap();
            prop_assert_eq!(interleave(&a, &b), t);
        }

        #[test]
        fn downsample_keeps_endpoints(seed in any::<u64>(), rho in 0.0f64..0.99) {
            let t = seq(40);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = downsample(&t, rho, &mut rng).unwrap();
            prop_assert!(d.len() >= 2);
            prop_assert_eq!(d.points[0], t.points[0]);
            prop_assert_eq!(*d.points.last().unwrap(), *t.points.last().unwrap());
        }
    }

    #[test]
    fn zero_rates_are_identities() {
        let t = seq(30);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(downsample(&t, 0.0, &mut rng).unwrap(), t);
        assert_eq!(distort(&t, 0.0, 100.0, PointMetric::Haversine, &mut rng).unwrap(), t);
    }

    #[test]
    fn downsample_rejects_bad_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(downsample(&seq(5), 1.0, &mut rng).is_err());
        assert!(downsample(&seq(5), -0.1, &mut rng).is_err());
        assert!(distort(&seq(5), 1.5, 10.0, PointMetric::Haversine, &mut rng).is_err());
    }

    #[test]
    fn downsample_retention_rate() {
        let t = seq(10_000);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let d = downsample(&t, 0.5, &mut rng).unwrap();
        let interior_kept = (d.len() - 2) as f64 / (t.len() - 2) as f64;
        assert!((interior_kept - 0.5).abs() <= 0.02, "kept {interior_kept}");
    }

    #[test]
    fn distortion_stays_within_radius() {
        let t = seq(2_000);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = distort(&t, 1.0, 50.0, PointMetric::Haversine, &mut rng).unwrap();
        assert_eq!(d.len(), t.len());
        let mut moved = 0;
        for (a, b) in t.points.iter().zip(&d.points) {
            let dist = haversine_m(a, b);
            assert!(dist <= 50.0 * (1.0 + 1e-6), "moved {dist} m");
            moved += (dist > 0.0) as usize;
        }
        assert_eq!(moved, t.len());
    }

    #[test]
    fn tiny_distortion_is_near_identity() {
        let t = seq(50);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = distort(&t, 1.0, 1e-9, PointMetric::Haversine, &mut rng).unwrap();
        for (a, b) in t.points.iter().zip(&d.points) {
            assert!((a.lon - b.lon).abs() < 1e-12 && (a.lat - b.lat).abs() < 1e-12);
        }
    }

    #[test]
    fn transforms_are_reproducible() {
        let t = seq(100);
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = downsample(&t, 0.3, &mut rng).unwrap();
            let b = distort(&t, 0.3, 100.0, PointMetric::Haversine, &mut rng).unwrap();
            (a, b)
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }
}
