//! Nondominated sorting and NSGA-III environmental selection for two
//! minimised objectives.

use rand::Rng;

pub type Objectives = [f64; 2];

const INTERCEPT_EPS: f64 = 1e-12;

/// `a` dominates `b`: no worse in both objectives, better in one.
pub fn dominates(a: &Objectives, b: &Objectives) -> bool {
    a[0] <= b[0] && a[1] <= b[1] && (a[0] < b[0] || a[1] < b[1])
}

/// Fronts of indices; front 0 is the nondominated set. Indices within a
/// front are ascending.
pub fn fast_nondominated_sort(points: &[Objectives]) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut dominated_by = vec![0usize; n];
    let mut dominates_list: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut current = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            if dominates(&points[i], &points[j]) {
                dominates_list[i].push(j);
            } else if dominates(&points[j], &points[i]) {
                dominated_by[i] += 1;
            }
        }
        if dominated_by[i] == 0 {
            current.push(i);
        }
    }
    let mut fronts = Vec::new();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &i in &current {
            for &j in &dominates_list[i] {
                dominated_by[j] -= 1;
                if dominated_by[j] == 0 {
                    next.push(j);
                }
            }
        }
        next.sort_unstable();
        fronts.push(current);
        current = next;
    }
    fronts
}

/// Front rank of every point.
pub fn ranks(fronts: &[Vec<usize>], n: usize) -> Vec<usize> {
    let mut r = vec![usize::MAX; n];
    for (k, f) in fronts.iter().enumerate() {
        for &i in f {
            r[i] = k;
        }
    }
    r
}

/// Das-Dennis simplex lattice with `p` divisions over `m` objectives:
/// C(p+m−1, m−1) points.
pub fn das_dennis(p: usize, m: usize) -> Vec<Vec<f64>> {
    fn rec(left: usize, depth: usize, m: usize, p: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<f64>>) {
        if depth == m - 1 {
            cur.push(left);
            out.push(cur.iter().map(|&k| k as f64 / p as f64).collect());
            cur.pop();
            return;
        }
        for k in (0..=left).rev() {
            cur.push(k);
            rec(left - k, depth + 1, m, p, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if m == 0 || p == 0 {
        if m > 0 {
            out.push(vec![1.0 / m as f64; m]);
        }
        return out;
    }
    rec(p, 0, m, p, &mut Vec::new(), &mut out);
    out
}

/// Translated, intercept-scaled objectives of `members`.
fn normalize(points: &[Objectives], members: &[usize]) -> Vec<Objectives> {
    let mut ideal = [f64::INFINITY; 2];
    for &i in members {
        for j in 0..2 {
            ideal[j] = ideal[j].min(points[i][j]);
        }
    }
    let shifted: Vec<Objectives> = members
        .iter()
        .map(|&i| [points[i][0] - ideal[0], points[i][1] - ideal[1]])
        .collect();
    // extreme point per axis by achievement scalarisation
    let mut extremes = [[0.0; 2]; 2];
    for axis in 0..2 {
        let w = |j: usize| if j == axis { 1.0 } else { 1e-6 };
        let mut best = f64::INFINITY;
        for s in &shifted {
            let asf = (s[0] / w(0)).max(s[1] / w(1));
            if asf < best {
                best = asf;
                extremes[axis] = *s;
            }
        }
    }
    let nadir = [
        shifted.iter().map(|s| s[0]).fold(0.0, f64::max),
        shifted.iter().map(|s| s[1]).fold(0.0, f64::max),
    ];
    // hyperplane a·x = 1 through both extremes
    let [[a, b], [c, d]] = extremes;
    let det = a * d - b * c;
    let mut intercepts = nadir;
    if det.abs() > INTERCEPT_EPS {
        let ax = (d - b) / det;
        let ay = (a - c) / det;
        let cand = [1.0 / ax, 1.0 / ay];
        if cand.iter().all(|v| v.is_finite() && *v > INTERCEPT_EPS) {
            intercepts = cand;
        }
    }
    for j in 0..2 {
        if intercepts[j] <= INTERCEPT_EPS {
            intercepts[j] = if nadir[j] > INTERCEPT_EPS { nadir[j] } else { 1.0 };
        }
    }
    shifted
        .iter()
        .map(|s| [s[0] / intercepts[0], s[1] / intercepts[1]])
        .collect()
}

/// Nearest reference line by perpendicular distance; ties to the lower
/// reference index.
pub fn associate(point: &Objectives, refs: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, r) in refs.iter().enumerate() {
        let rr = r[0] * r[0] + r[1] * r[1];
        let t = (point[0] * r[0] + point[1] * r[1]) / rr;
        let (dx, dy) = (point[0] - t * r[0], point[1] - t * r[1]);
        let dist = (dx * dx + dy * dy).sqrt();
        if dist < best.1 {
            best = (k, dist);
        }
    }
    best
}

/// Chooses `n` survivors from `points` (indices ascending). Whole fronts
/// are kept while they fit; the splitting front is resolved by reference
/// point niching, after first keeping its best individual on each objective.
pub fn environmental_select(points: &[Objectives], n: usize, refs: &[Vec<f64>], rng: &mut impl Rng) -> Vec<usize> {
    if points.len() <= n {
        return (0..points.len()).collect();
    }
    let fronts = fast_nondominated_sort(points);
    let mut chosen: Vec<usize> = Vec::with_capacity(n);
    let mut last: &[usize] = &[];
    for f in &fronts {
        if chosen.len() + f.len() <= n {
            chosen.extend(f);
            if chosen.len() == n {
                chosen.sort_unstable();
                return chosen;
            }
        } else {
            last = f;
            break;
        }
    }
    let members: Vec<usize> = chosen.iter().chain(last).copied().collect();
    let normed = normalize(points, &members);
    let assoc: Vec<(usize, f64)> = normed.iter().map(|p| associate(p, refs)).collect();
    let mut niche = vec![0usize; refs.len()];
    for a in &assoc[..chosen.len()] {
        niche[a.0] += 1;
    }
    let offset = chosen.len();
    let mut taken = vec![false; last.len()];
    let take = |k: usize, chosen: &mut Vec<usize>, niche: &mut Vec<usize>, taken: &mut Vec<bool>| {
        taken[k] = true;
        chosen.push(last[k]);
        niche[assoc[offset + k].0] += 1;
    };

    if chosen.is_empty() {
        let lex = |a: usize, b: usize| {
            let mut best = 0;
            for k in 1..last.len() {
                let (p, q) = (points[last[k]], points[last[best]]);
                if (p[a], p[b]) < (q[a], q[b]) {
                    best = k;
                }
            }
            best
        };
        for k in [lex(0, 1), lex(1, 0)] {
            if chosen.len() < n && !taken[k] {
                take(k, &mut chosen, &mut niche, &mut taken);
            }
        }
    }

    let mut excluded = vec![false; refs.len()];
    while chosen.len() < n {
        let min = (0..refs.len()).filter(|&j| !excluded[j]).map(|j| niche[j]).min();
        let Some(min) = min else { break };
        let candidates: Vec<usize> = (0..refs.len()).filter(|&j| !excluded[j] && niche[j] == min).collect();
        let j = candidates[rng.random_range(0..candidates.len())];
        let pool: Vec<usize> = (0..last.len()).filter(|&k| !taken[k] && assoc[offset + k].0 == j).collect();
        if pool.is_empty() {
            excluded[j] = true;
            continue;
        }
        let k = if niche[j] == 0 {
            let mut best = pool[0];
            for &k in &pool[1..] {
                if assoc[offset + k].1 < assoc[offset + best].1 {
                    best = k;
                }
            }
            best
        } else {
            pool[rng.random_range(0..pool.len())]
        };
        take(k, &mut chosen, &mut niche, &mut taken);
    }
    chosen.sort_unstable();
    chosen
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::RngStream;

    fn brute_force(points: &[Objectives]) -> Vec<Vec<usize>> {
        let mut left: Vec<usize> = (0..points.len()).collect();
        let mut fronts = Vec::new();
        while !left.is_empty() {
            let front: Vec<usize> = left
                .iter()
                .copied()
                .filter(|&i| !left.iter().any(|&j| dominates(&points[j], &points[i])))
                .collect();
            left.retain(|i| !front.contains(i));
            fronts.push(front);
        }
        fronts
    }

    #[test]
    fn hand_fronts() {
        assert_eq!(fast_nondominated_sort(&[[1.0, 1.0]]), vec![vec![0]]);
        let f = fast_nondominated_sort(&[[1.0, 2.0], [2.0, 1.0], [2.0, 2.0]]);
        assert_eq!(f, vec![vec![0, 1], vec![2]]);
    }

    #[test]
    fn matches_brute_force() {
        for seed in 0..5 {
            let mut rng = RngStream::new(seed, 0);
            let pts: Vec<Objectives> = (0..300)
                .map(|_| [rng.random_range(0..20) as f64, rng.random_range(0..20) as f64])
                .collect();
            assert_eq!(fast_nondominated_sort(&pts), brute_force(&pts));
        }
    }

    #[test]
    fn lattice_sizes() {
        assert_eq!(das_dennis(99, 2).len(), 100);
        assert_eq!(das_dennis(4, 3).len(), 15);
        for p in das_dennis(12, 3) {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn association_tie_goes_to_lower_index() {
        let refs = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(associate(&[1.0, 1.0], &refs).0, 0);
        assert_eq!(associate(&[0.1, 1.0], &refs).0, 1);
    }

    #[test]
    fn selection_keeps_extremes_and_size() {
        let refs = das_dennis(99, 2);
        let mut rng = RngStream::new(3, 0);
        for _ in 0..50 {
            // one nondominated curve larger than the population
            let n = rng.random_range(5..40);
            let pts: Vec<Objectives> = (0..n)
                .map(|i| {
                    let x = i as f64 / n as f64 + rng.random_range(0.0..0.01);
                    [x, 1.0 - x * x]
                })
                .collect();
            let keep = rng.random_range(2..n);
            let s = environmental_select(&pts, keep, &refs, &mut rng);
            assert_eq!(s.len(), keep);
            let best0 = (0..n).min_by(|&a, &b| pts[a][0].total_cmp(&pts[b][0])).unwrap();
            let best1 = (0..n).min_by(|&a, &b| pts[a][1].total_cmp(&pts[b][1])).unwrap();
            assert!(s.contains(&best0) && s.contains(&best1));
        }
    }

    #[test]
    fn survivors_never_dominated_by_discarded() {
        let refs = das_dennis(99, 2);
        let mut rng = RngStream::new(4, 0);
        for _ in 0..50 {
            let pts: Vec<Objectives> = (0..60)
                .map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])
                .collect();
            let s = environmental_select(&pts, 20, &refs, &mut rng);
            for i in (0..pts.len()).filter(|i| !s.contains(i)) {
                assert!(s.iter().all(|&k| !dominates(&pts[i], &pts[k])));
            }
        }
    }
}
