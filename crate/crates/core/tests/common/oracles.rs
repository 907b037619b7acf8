//! Slow reference implementations used to cross-check the library.

use std::collections::HashMap;

pub type Pt = (f64, f64);

pub fn dist(a: Pt, b: Pt) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

/// Edit distance by top-down recursion over suffixes.
pub fn edr(a: &[Pt], b: &[Pt], eps: f64) -> f64 {
    fn go(a: &[Pt], b: &[Pt], i: usize, j: usize, eps: f64, memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if i == a.len() {
            return b.len() - j;
        }
        if j == b.len() {
            return a.len() - i;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let sub = usize::from(dist(a[i], b[j]) > eps);
        let v = (go(a, b, i + 1, j + 1, eps, memo) + sub)
            .min(go(a, b, i + 1, j, eps, memo) + 1)
            .min(go(a, b, i, j + 1, eps, memo) + 1);
        memo.insert((i, j), v);
        v
    }
    go(a, b, 0, 0, eps, &mut HashMap::new()) as f64
}

/// Longest common subsequence length, considering every option at each
/// step rather than taking a match greedily.
pub fn lcss_len(a: &[Pt], b: &[Pt], eps: f64) -> usize {
    fn go(a: &[Pt], b: &[Pt], i: usize, j: usize, eps: f64, memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if i == a.len() || j == b.len() {
            return 0;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let mut v = go(a, b, i + 1, j, eps, memo).max(go(a, b, i, j + 1, eps, memo));
        if dist(a[i], b[j]) <= eps {
            v = v.max(1 + go(a, b, i + 1, j + 1, eps, memo));
        }
        memo.insert((i, j), v);
        v
    }
    go(a, b, 0, 0, eps, &mut HashMap::new())
}

pub fn lcss_distance(a: &[Pt], b: &[Pt], eps: f64) -> f64 {
    1.0 - lcss_len(a, b, eps) as f64 / a.len().min(b.len()) as f64
}

/// Maximum over every point of its distance to the closest point of the
/// other trajectory, checking all pairs.
pub fn hausdorff(a: &[Pt], b: &[Pt]) -> f64 {
    let directed = |x: &[Pt], y: &[Pt]| {
        x.iter()
            .map(|&p| y.iter().map(|&q| dist(p, q)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    directed(a, b).max(directed(b, a))
}

/// Discrete Fréchet by recursion from the final pair back to the start.
pub fn frechet(a: &[Pt], b: &[Pt]) -> f64 {
    fn go(a: &[Pt], b: &[Pt], i: usize, j: usize, memo: &mut HashMap<(usize, usize), f64>) -> f64 {
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let d = dist(a[i], b[j]);
        let v = match (i, j) {
            (0, 0) => d,
            (0, _) => d.max(go(a, b, 0, j - 1, memo)),
            (_, 0) => d.max(go(a, b, i - 1, 0, memo)),
            _ => d.max(
                go(a, b, i - 1, j, memo)
                    .min(go(a, b, i, j - 1, memo))
                    .min(go(a, b, i - 1, j - 1, memo)),
            ),
        };
        memo.insert((i, j), v);
        v
    }
    go(a, b, a.len() - 1, b.len() - 1, &mut HashMap::new())
}

pub fn euclid(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0f64;
    for i in 0..a.len() {
        let d = a[i] as f64 - b[i] as f64;
        s += d * d;
    }
    s.sqrt()
}

/// Rank of `truth` found by fully sorting the candidates on
/// (distance, id).
pub fn rank_by_sort(query: &[f32], db: &[Vec<f32>], ids: &[String], subset: &[usize], truth: usize) -> usize {
    let mut rows: Vec<(f64, &str, usize)> = subset.iter().map(|&j| (euclid(query, &db[j]), ids[j].as_str(), j)).collect();
    rows.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap().then(x.1.cmp(y.1)));
    rows.iter().position(|r| r.2 == truth).unwrap() + 1
}

/// Mean over queries of `|pred[..kp] ∩ truth[..kt]| / kt`, by linear scans.
pub fn overlap(pred: &[Vec<usize>], truth: &[Vec<usize>], kp: usize, kt: usize) -> f64 {
    let mut total = 0.0;
    for q in 0..pred.len() {
        let mut hits = 0;
        for x in &pred[q][..kp] {
            if truth[q][..kt].contains(x) {
                hits += 1;
            }
        }
        total += hits as f64 / kt as f64;
    }
    total / pred.len() as f64
}

/// Candidates ordered by distance with ties by index, via selection sort.
pub fn order_by_selection(distances: &[f64], exclude: usize) -> Vec<usize> {
    let mut left: Vec<usize> = (0..distances.len()).filter(|&i| i != exclude).collect();
    let mut out = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for k in 1..left.len() {
            let (c, b) = (left[k], left[best]);
            if distances[c] < distances[b] || (distances[c] == distances[b] && c < b) {
                best = k;
            }
        }
        out.push(left.remove(best));
    }
    out
}
