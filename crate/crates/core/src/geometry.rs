//! Behavior-descriptor space, centroidal Voronoi tessellations and the
//! distance statistics built on top of them.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const MAX_BD_DIM: usize = 8;

/// Axis-aligned box bounding the behavior-descriptor space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BdSpace {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BdSpace {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let space = Self { lower, upper };
        space.validate()?;
        Ok(space)
    }

    /// The same `[lo, hi]` interval on every axis.
    pub fn cube(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.lower.len();
        if dim == 0 || dim > MAX_BD_DIM {
            return Err(Error::invalid(format!(
                "behavior space dimension must be in 1..={MAX_BD_DIM}, got {dim}"
            )));
        }
        if self.upper.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: self.upper.len(),
            });
        }
        for (i, (lo, hi)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::invalid(format!(
                    "axis {i}: lower bound {lo} must be below upper bound {hi}"
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn diagonal(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| (hi - lo) * (hi - lo))
            .sum::<f64>()
            .sqrt()
    }

    pub fn contains(&self, point: &[f64]) -> bool {
        point.len() == self.dim()
            && point
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(x, (lo, hi))| *lo <= *x && *x <= *hi)
    }
}

/// A point in the behavior-descriptor space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BehaviorDescriptor(pub Vec<f64>);

impl BehaviorDescriptor {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid(format!(
                "behavior descriptor has non-finite components: {coords:?}"
            )));
        }
        Ok(Self(coords))
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|c| c.is_finite())
    }

    pub fn distance(&self, other: &BehaviorDescriptor) -> f64 {
        euclidean(&self.0, &other.0)
    }
}

impl From<Vec<f64>> for BehaviorDescriptor {
    fn from(coords: Vec<f64>) -> Self {
        Self(coords)
    }
}

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    squared_distance(a, b).sqrt()
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Cell centers of a tessellated behavior space, sorted lexicographically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Centroids {
    pub dim: usize,
    pub n_cells: usize,
    pub seed: u64,
    /// Row-major `n_cells x dim`.
    pub points: Vec<f64>,
}

impl Centroids {
    pub fn from_points(dim: usize, seed: u64, points: Vec<f64>) -> Result<Self> {
        if dim == 0 || points.is_empty() || points.len() % dim != 0 {
            return Err(Error::invalid(format!(
                "{} coordinates cannot form centroids of dimension {dim}",
                points.len()
            )));
        }
        Ok(Self {
            dim,
            n_cells: points.len() / dim,
            seed,
            points,
        })
    }

    pub fn point(&self, index: usize) -> &[f64] {
        &self.points[index * self.dim..(index + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks_exact(self.dim)
    }

    /// Index of the closest centroid; ties go to the lowest index.
    pub fn nearest_cell(&self, bd: &[f64]) -> usize {
        debug_assert_eq!(bd.len(), self.dim);
        let mut best = 0;
        let mut best_dist = f64::INFINITY;
        for (i, c) in self.iter().enumerate() {
            let d = squared_distance(c, bd);
            if d < best_dist {
                best_dist = d;
                best = i;
            }
        }
        best
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: Centroids =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if c.dim == 0 || c.points.len() != c.n_cells * c.dim {
            return Err(Error::format(path, "points length does not match n_cells x dim"));
        }
        Ok(c)
    }
}

/// Parameters of the Lloyd iteration behind [`build_cvt`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvtParams {
    pub n_cells: usize,
    pub n_samples: usize,
    pub max_iters: usize,
}

impl Default for CvtParams {
    fn default() -> Self {
        Self {
            n_cells: 256,
            n_samples: 25_600,
            max_iters: 100,
        }
    }
}

/// Centroidal Voronoi tessellation of `space` by Lloyd's k-means over
/// uniform samples, with k-means++ seeding.
///
/// Lloyd stops once no centroid moves more than `1e-5` of the box diagonal.
/// Empty clusters are re-seeded at the sample farthest from its centroid.
pub fn build_cvt(
    space: &BdSpace,
    n_cells: usize,
    n_samples: usize,
    max_iters: usize,
    seed: u64,
) -> Result<Centroids> {
    space.validate()?;
    if n_cells == 0 {
        return Err(Error::invalid("n_cells must be at least 1"));
    }
    if n_cells > n_samples {
        return Err(Error::invalid(format!(
            "n_cells ({n_cells}) exceeds n_samples ({n_samples})"
        )));
    }
    let dim = space.dim();
    let mut rng = rng::derived_rng(seed, rng::stream::CVT, 0);

    let mut samples = Vec::with_capacity(n_samples * dim);
    for _ in 0..n_samples {
        for (lo, hi) in space.lower.iter().zip(&space.upper) {
            samples.push(rng.random_range(*lo..*hi));
        }
    }
    let sample = |i: usize| &samples[i * dim..(i + 1) * dim];

    // k-means++ seeding
    let mut centers = Vec::with_capacity(n_cells * dim);
    let first = rng.random_range(0..n_samples);
    centers.extend_from_slice(sample(first));
    let mut min_d2: Vec<f64> = (0..n_samples)
        .map(|i| squared_distance(sample(i), &centers[..dim]))
        .collect();
    for _ in 1..n_cells {
        let total: f64 = min_d2.iter().sum();
        let chosen = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n_samples - 1;
            for (i, d) in min_d2.iter().enumerate() {
                if target < *d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            rng.random_range(0..n_samples)
        };
        let start = centers.len();
        centers.extend_from_slice(sample(chosen));
        let c = centers[start..].to_vec();
        for (i, d) in min_d2.iter_mut().enumerate() {
            *d = d.min(squared_distance(sample(i), &c));
        }
    }

    let tol = 1e-5 * space.diagonal();
    let mut assign = vec![0usize; n_samples];
    let mut dist = vec![0f64; n_samples];
    let mut sums = vec![0f64; n_cells * dim];
    let mut counts = vec![0usize; n_cells];
    for _ in 0..max_iters {
        for i in 0..n_samples {
            let p = sample(i);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (k, c) in centers.chunks_exact(dim).enumerate() {
                let d = squared_distance(p, c);
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            assign[i] = best;
            dist[i] = best_d;
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        counts.iter_mut().for_each(|c| *c = 0);
        for i in 0..n_samples {
            let k = assign[i];
            counts[k] += 1;
            for (s, x) in sums[k * dim..(k + 1) * dim].iter_mut().zip(sample(i)) {
                *s += x;
            }
        }
        let mut max_shift: f64 = 0.0;
        for k in 0..n_cells {
            let new: Vec<f64> = if counts[k] == 0 {
                // Farthest sample from its own centroid; taken out of the pool
                // so two empty clusters never land on the same point.
                let far = (0..n_samples)
                    .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                    .unwrap_or(0);
                dist[far] = 0.0;
                sample(far).to_vec()
            } else {
                sums[k * dim..(k + 1) * dim]
                    .iter()
                    .map(|s| s / counts[k] as f64)
                    .collect()
            };
            let old = &mut centers[k * dim..(k + 1) * dim];
            max_shift = max_shift.max(euclidean(old, &new));
            old.copy_from_slice(&new);
        }
        if max_shift < tol {
            break;
        }
    }

    let mut rows: Vec<&[f64]> = centers.chunks_exact(dim).collect();
    rows.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let points = rows.concat();
    Centroids::from_points(dim, seed, points)
}

/// Mean Euclidean distance over all unordered pairs of descriptors.
pub fn spread(bds: &[BehaviorDescriptor]) -> Result<f64> {
    let points: Vec<&[f64]> = bds.iter().map(|b| b.coords()).collect();
    spread_of(&points)
}

pub(crate) fn spread_of(points: &[&[f64]]) -> Result<f64> {
    let k = points.len();
    if k < 2 {
        return Err(Error::invalid(format!(
            "spread needs at least two descriptors, got {k}"
        )));
    }
    let dim = points[0].len();
    if let Some(bad) = points.iter().find(|p| p.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: bad.len(),
        });
    }
    let mut total = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            total += euclidean(points[i], points[j]);
        }
    }
    Ok(2.0 * total / (k * (k - 1)) as f64)
}

/// Weiszfeld iteration for the point minimizing the summed distance to `bds`.
///
/// Starts at the arithmetic mean, so symmetric inputs keep their center.
pub fn geometric_median(
    bds: &[BehaviorDescriptor],
    tol: f64,
    max_iters: usize,
) -> Result<BehaviorDescriptor> {
    let Some(first) = bds.first() else {
        return Err(Error::invalid("geometric median of an empty set"));
    };
    let dim = first.dim();
    if let Some(bad) = bds.iter().find(|b| b.dim() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: bad.dim(),
        });
    }
    let mut m: Vec<f64> = (0..dim)
        .map(|d| rng::stable_mean(bds.iter().map(|b| b.0[d])))
        .collect();
    for _ in 0..max_iters {
        let mut num = vec![0.0; dim];
        let mut den = 0.0;
        for b in bds {
            let d = euclidean(&m, &b.0);
            if d < 1e-12 {
                return Ok(b.clone());
            }
            for (n, x) in num.iter_mut().zip(&b.0) {
                *n += x / d;
            }
            den += 1.0 / d;
        }
        let next: Vec<f64> = num.iter().map(|n| n / den).collect();
        let step = euclidean(&next, &m);
        m = next;
        if step < tol {
            break;
        }
    }
    Ok(BehaviorDescriptor(m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bd(c: &[f64]) -> BehaviorDescriptor {
        BehaviorDescriptor(c.to_vec())
    }

    fn unit_square() -> BdSpace {
        BdSpace::cube(2, 0.0, 1.0).unwrap()
    }

    #[test]
    fn space_validation() {
        assert!(BdSpace::new(vec![0.0], vec![0.0]).is_err());
        assert!(BdSpace::new(vec![], vec![]).is_err());
        assert!(BdSpace::cube(9, 0.0, 1.0).is_err());
        assert!(BdSpace::new(vec![0.0, 0.0], vec![1.0]).is_err());
        assert!(BdSpace::cube(8, -1.0, 1.0).is_ok());
    }

    #[test]
    fn single_cell_is_box_center() {
        let c = build_cvt(&unit_square(), 1, 50_000, 100, 3).unwrap();
        assert_eq!(c.n_cells, 1);
        assert!((c.point(0)[0] - 0.5).abs() < 0.01);
        assert!((c.point(0)[1] - 0.5).abs() < 0.01);
    }

    #[test]
    fn cvt_is_bit_reproducible() {
        let a = build_cvt(&unit_square(), 2, 1000, 100, 11).unwrap();
        let b = build_cvt(&unit_square(), 2, 1000, 100, 11).unwrap();
        assert_eq!(a, b);
        let bits = |c: &Centroids| c.points.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    /// Exhaustive 1-D 2-means: scan every split of the sorted samples.
    fn one_dim_two_means_oracle(mut xs: Vec<f64>) -> (f64, f64) {
        xs.sort_by(f64::total_cmp);
        let n = xs.len();
        let mut prefix = vec![0.0; n + 1];
        let mut prefix2 = vec![0.0; n + 1];
        for (i, x) in xs.iter().enumerate() {
            prefix[i + 1] = prefix[i] + x;
            prefix2[i + 1] = prefix2[i] + x * x;
        }
        let sse = |a: usize, b: usize| {
            let m = (b - a) as f64;
            let s = prefix[b] - prefix[a];
            prefix2[b] - prefix2[a] - s * s / m
        };
        let split = (1..n)
            .min_by(|&i, &j| (sse(0, i) + sse(i, n)).total_cmp(&(sse(0, j) + sse(j, n))))
            .unwrap();
        (
            prefix[split] / split as f64,
            (prefix[n] - prefix[split]) / (n - split) as f64,
        )
    }

    #[test]
    fn two_cells_on_unit_interval_match_exhaustive_oracle() {
        let space = BdSpace::cube(1, 0.0, 1.0).unwrap();
        let c = build_cvt(&space, 2, 100_000, 100, 5).unwrap();
        // Oracle runs on the same uniform design, drawn independently.
        let mut r = rng::rng_from_seed(99);
        let xs: Vec<f64> = (0..100_000).map(|_| r.random::<f64>()).collect();
        let (lo, hi) = one_dim_two_means_oracle(xs);
        assert!((lo - 0.25).abs() < 0.01 && (hi - 0.75).abs() < 0.01);
        assert!((c.point(0)[0] - 0.25).abs() < 0.02, "{:?}", c.points);
        assert!((c.point(1)[0] - 0.75).abs() < 0.02, "{:?}", c.points);
    }

    #[test]
    fn centroids_are_sorted_inside_and_distinct() {
        let space = BdSpace::cube(2, -15.0, 15.0).unwrap();
        let c = build_cvt(&space, 64, 6400, 50, 1).unwrap();
        for i in 0..c.n_cells {
            assert!(space.contains(c.point(i)));
            if i > 0 {
                assert!(c.point(i - 1) < c.point(i), "not strictly sorted at {i}");
            }
        }
    }

    #[test]
    fn cvt_rejects_bad_sizes() {
        assert!(build_cvt(&unit_square(), 0, 10, 10, 0).is_err());
        assert!(build_cvt(&unit_square(), 11, 10, 10, 0).is_err());
    }

    #[test]
    fn nearest_cell_exact_hit_and_tie_break() {
        let pts = vec![
            0.0, 0.0, //
            5.0, 5.0, //
            -1.0, 0.0, //
            9.0, 9.0, //
            3.0, 3.0, //
            1.0, 0.0,
        ];
        let c = Centroids::from_points(2, 0, pts).unwrap();
        assert_eq!(c.nearest_cell(&[5.0, 5.0]), 1);
        assert_eq!(c.nearest_cell(&[3.0, 3.0]), 4);
        // (0,0) is equidistant to cells 2 and 5 but cell 0 sits on it; use a
        // point equidistant from 2 and 5 only.
        let c2 = Centroids::from_points(2, 0, vec![9.0, 9.0, 8.0, 8.0, -1.0, 0.0, 7.0, 7.0, 6.0, 6.0, 1.0, 0.0])
            .unwrap();
        assert_eq!(c2.nearest_cell(&[0.0, 0.0]), 2);
        // Far outside the box still gets assigned.
        assert_eq!(c2.nearest_cell(&[1e6, 1e6]), 0);
    }

    #[test]
    fn nearest_cell_matches_linear_scan() {
        let space = BdSpace::cube(2, -15.0, 15.0).unwrap();
        let c = build_cvt(&space, 128, 2560, 30, 4).unwrap();
        let mut r = rng::rng_from_seed(8);
        for _ in 0..1000 {
            let q = [r.random_range(-20.0..20.0), r.random_range(-20.0..20.0)];
            let mut best = (f64::INFINITY, usize::MAX);
            for k in 0..c.n_cells {
                let p = c.point(k);
                let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
                if d < best.0 {
                    best = (d, k);
                }
            }
            assert_eq!(c.nearest_cell(&q), best.1);
        }
    }

    #[test]
    fn spread_hand_cases() {
        assert_eq!(spread(&vec![bd(&[1.0, 2.0]); 5]).unwrap(), 0.0);
        assert_eq!(spread(&[bd(&[0.0, 0.0]), bd(&[3.0, 4.0])]).unwrap(), 5.0);
        let s = spread(&[bd(&[0.0, 0.0]), bd(&[3.0, 4.0]), bd(&[0.0, 0.0])]).unwrap();
        assert!((s - 10.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn spread_rejects_singletons_and_mixed_dims() {
        assert!(spread(&[bd(&[1.0])]).is_err());
        assert!(spread(&[]).is_err());
        assert!(spread(&[bd(&[1.0]), bd(&[1.0, 2.0])]).is_err());
    }

    fn points(max: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        (2..=max).prop_flat_map(|k| {
            proptest::collection::vec(proptest::collection::vec(-50.0..50.0f64, 2), k)
        })
    }

    proptest! {
        #[test]
        fn spread_matches_double_loop(pts in points(64)) {
            let bds: Vec<_> = pts.iter().map(|p| bd(p)).collect();
            let mut sum = 0.0;
            let mut pairs = 0usize;
            for i in 0..pts.len() {
                for j in 0..pts.len() {
                    if i < j {
                        sum += ((pts[i][0] - pts[j][0]).powi(2) + (pts[i][1] - pts[j][1]).powi(2)).sqrt();
                        pairs += 1;
                    }
                }
            }
            let s = spread(&bds).unwrap();
            prop_assert!((s - sum / pairs as f64).abs() < 1e-12);
        }

        #[test]
        fn spread_is_permutation_translation_and_scale_invariant(
            pts in points(16),
            shift in proptest::collection::vec(-100.0..100.0f64, 2),
            alpha in 0.0..10.0f64,
            rot in 0usize..16,
        ) {
            let bds: Vec<_> = pts.iter().map(|p| bd(p)).collect();
            let base = spread(&bds).unwrap();
            let mut permuted = bds.clone();
            permuted.rotate_left(rot % bds.len());
            permuted.reverse();
            prop_assert!((spread(&permuted).unwrap() - base).abs() < 1e-9);
            let shifted: Vec<_> = pts.iter().map(|p| bd(&[p[0] + shift[0], p[1] + shift[1]])).collect();
            prop_assert!((spread(&shifted).unwrap() - base).abs() < 1e-9);
            let scaled: Vec<_> = pts.iter().map(|p| bd(&[alpha * p[0], alpha * p[1]])).collect();
            prop_assert!((spread(&scaled).unwrap() - alpha * base).abs() < 1e-9 * (1.0 + alpha * base));
        }
    }

    #[test]
    fn median_degenerate_cases() {
        let single = geometric_median(&[bd(&[2.0, -1.0])], 1e-9, 100).unwrap();
        assert_eq!(single, bd(&[2.0, -1.0]));
        let pair = geometric_median(&[bd(&[0.0, 0.0]), bd(&[2.0, 0.0])], 1e-9, 100).unwrap();
        assert_eq!(pair, bd(&[1.0, 0.0]));
        assert!(geometric_median(&[], 1e-9, 10).is_err());
    }

    fn median_objective(m: &[f64], pts: &[Vec<f64>]) -> f64 {
        pts.iter().map(|p| euclidean(m, p)).sum()
    }

    /// Grid search with successive zooming around the best grid node.
    fn grid_search_min(pts: &[Vec<f64>]) -> f64 {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in pts {
            for d in 0..2 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        let n = 200;
        let mut best = (f64::INFINITY, [0.0, 0.0]);
        for _ in 0..8 {
            let step = [(hi[0] - lo[0]) / n as f64, (hi[1] - lo[1]) / n as f64];
            for i in 0..=n {
                for j in 0..=n {
                    let m = [lo[0] + i as f64 * step[0], lo[1] + j as f64 * step[1]];
                    let f = median_objective(&m, pts);
                    if f < best.0 {
                        best = (f, m);
                    }
                }
            }
            for d in 0..2 {
                lo[d] = best.1[d] - 2.0 * step[d];
                hi[d] = best.1[d] + 2.0 * step[d];
            }
        }
        best.0
    }

    #[test]
    fn median_matches_grid_search() {
        let mut r = rng::rng_from_seed(21);
        for _ in 0..5 {
            let pts: Vec<Vec<f64>> = (0..5)
                .map(|_| vec![r.random_range(-5.0..5.0), r.random_range(-5.0..5.0)])
                .collect();
            let bds: Vec<_> = pts.iter().map(|p| bd(p)).collect();
            let m = geometric_median(&bds, 1e-12, 10_000).unwrap();
            let ours = median_objective(m.coords(), &pts);
            let oracle = grid_search_min(&pts);
            assert!((ours - oracle).abs() < 1e-6, "weiszfeld {ours} vs grid {oracle}");
        }
    }

    #[test]
    fn centroids_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        let c = build_cvt(&unit_square(), 4, 400, 20, 2).unwrap();
        c.save(&path).unwrap();
        assert_eq!(Centroids::load(&path).unwrap(), c);
    }
}
