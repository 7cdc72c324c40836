//! Gradient schemes, geodesic geometry on the unit sphere, even subsampling
//! and nearest-reference selection.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::rng::keyed_rng;

pub type Vec3 = [f64; 3];

pub const UNIT_TOLERANCE: f64 = 1e-6;

pub fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn norm(a: &Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: &Vec3) -> Vec3 {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

pub fn check_unit(v: &Vec3) -> Result<()> {
    if (norm(v) - 1.0).abs() > UNIT_TOLERANCE || v.iter().any(|c| !c.is_finite()) {
        return Err(Error::Validation(format!(
            "vector {v:?} is not unit norm (|v| = {})",
            norm(v)
        )));
    }
    Ok(())
}

/// Diffusion-encoding directions paired with b-values (s/mm²).
///
/// Entries with `b > 0` carry unit directions. A `b = 0` entry may carry the
/// zero vector, following the bvecs text convention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientScheme {
    directions: Vec<Vec3>,
    bvalues: Vec<f64>,
}

impl GradientScheme {
    pub fn new(directions: Vec<Vec3>, bvalues: Vec<f64>) -> Result<Self> {
        if directions.len() != bvalues.len() {
            return Err(Error::Validation(format!(
                "{} directions but {} b-values",
                directions.len(),
                bvalues.len()
            )));
        }
        for (d, &b) in directions.iter().zip(&bvalues) {
            if !(b >= 0.0 && b.is_finite()) {
                return Err(Error::Validation(format!("b-value {b} must be finite and non-negative")));
            }
            if b == 0.0 && norm(d) == 0.0 {
                continue;
            }
            check_unit(d)?;
        }
        Ok(Self { directions, bvalues })
    }

    /// A single-shell scheme with every direction at `bvalue`.
    pub fn shell(directions: Vec<Vec3>, bvalue: f64) -> Result<Self> {
        let n = directions.len();
        Self::new(directions, vec![bvalue; n])
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn directions(&self) -> &[Vec3] {
        &self.directions
    }

    pub fn bvalues(&self) -> &[f64] {
        &self.bvalues
    }

    pub fn direction(&self, i: usize) -> &Vec3 {
        &self.directions[i]
    }

    pub fn bvalue(&self, i: usize) -> f64 {
        self.bvalues[i]
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            directions: indices.iter().map(|&i| self.directions[i]).collect(),
            bvalues: indices.iter().map(|&i| self.bvalues[i]).collect(),
        }
    }

    /// Indices of diffusion-weighted (`b > 0`) entries.
    pub fn weighted_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.bvalues[i] > 0.0).collect()
    }

    pub fn unweighted_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.bvalues[i] == 0.0).collect()
    }

    pub fn parse(bvals: &str, bvecs: &str) -> Result<Self> {
        let bvalues = parse_row(bvals.trim())?;
        let rows: Vec<&str> = bvecs.lines().filter(|l| !l.trim().is_empty()).collect();
        if rows.len() != 3 {
            return Err(Error::Parse(format!("bvecs needs 3 rows, found {}", rows.len())));
        }
        let cols: Vec<Vec<f64>> = rows.iter().map(|r| parse_row(r)).collect::<Result<_>>()?;
        if cols.iter().any(|c| c.len() != bvalues.len()) {
            return Err(Error::Parse(format!(
                "bvecs rows have {}/{}/{} entries for {} b-values",
                cols[0].len(),
                cols[1].len(),
                cols[2].len(),
                bvalues.len()
            )));
        }
        let directions = (0..bvalues.len()).map(|i| [cols[0][i], cols[1][i], cols[2][i]]).collect();
        Self::new(directions, bvalues)
    }

    pub fn bvals_text(&self) -> String {
        join_row(&self.bvalues)
    }

    pub fn bvecs_text(&self) -> String {
        let mut out = String::new();
        for axis in 0..3 {
            let row: Vec<f64> = self.directions.iter().map(|d| d[axis]).collect();
            let _ = writeln!(out, "{}", join_row(&row).trim_end());
        }
        out
    }

    pub fn read(bvals: &Path, bvecs: &Path) -> Result<Self> {
        let a = std::fs::read_to_string(bvals).map_err(io_err(bvals))?;
        let b = std::fs::read_to_string(bvecs).map_err(io_err(bvecs))?;
        Self::parse(&a, &b)
    }

    pub fn write(&self, bvals: &Path, bvecs: &Path) -> Result<()> {
        std::fs::write(bvals, self.bvals_text()).map_err(io_err(bvals))?;
        std::fs::write(bvecs, self.bvecs_text()).map_err(io_err(bvecs))?;
        Ok(())
    }
}

fn parse_row(line: &str) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|e| Error::Parse(format!("'{t}': {e}"))))
        .collect()
}

fn join_row(values: &[f64]) -> String {
    let mut s = values.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(" ");
    s.push('\n');
    s
}

/// Parses a bvecs-format file holding target directions only.
pub fn parse_directions(bvecs: &str) -> Result<Vec<Vec3>> {
    let rows: Vec<&str> = bvecs.lines().filter(|l| !l.trim().is_empty()).collect();
    if rows.len() != 3 {
        return Err(Error::Parse(format!("bvecs needs 3 rows, found {}", rows.len())));
    }
    let cols: Vec<Vec<f64>> = rows.iter().map(|r| parse_row(r)).collect::<Result<_>>()?;
    if cols[1].len() != cols[0].len() || cols[2].len() != cols[0].len() {
        return Err(Error::Parse("bvecs rows differ in length".into()));
    }
    let dirs: Vec<Vec3> = (0..cols[0].len()).map(|i| [cols[0][i], cols[1][i], cols[2][i]]).collect();
    for d in &dirs {
        check_unit(d)?;
    }
    Ok(dirs)
}

/// Great-circle distance `arccos(a·b)` between unit vectors, in `[0, π]`.
pub fn geodesic_distance(a: &Vec3, b: &Vec3) -> Result<f64> {
    check_unit(a)?;
    check_unit(b)?;
    Ok(dot(a, b).clamp(-1.0, 1.0).acos())
}

/// Distance that treats `g` and `-g` as the same encoding: `min(d, π − d)`.
pub fn antipodal_distance(a: &Vec3, b: &Vec3) -> Result<f64> {
    let d = geodesic_distance(a, b)?;
    Ok(d.min(PI - d))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    /// `arccos(a·b)`.
    #[default]
    Geodesic,
    /// `min(d, π − d)`.
    Antipodal,
}

impl DistanceMetric {
    pub fn distance(self, a: &Vec3, b: &Vec3) -> Result<f64> {
        match self {
            Self::Geodesic => geodesic_distance(a, b),
            Self::Antipodal => antipodal_distance(a, b),
        }
    }
}

/// The `r` entries of `low` nearest to `target`, closest first, ties by index.
pub fn select_references(low: &GradientScheme, target: &Vec3, r: usize) -> Result<Vec<usize>> {
    select_references_with(low, target, r, DistanceMetric::Geodesic)
}

pub fn select_references_with(
    low: &GradientScheme,
    target: &Vec3,
    r: usize,
    metric: DistanceMetric,
) -> Result<Vec<usize>> {
    if r == 0 {
        return Err(Error::Validation("reference count must be positive".into()));
    }
    if r > low.len() {
        return Err(Error::Validation(format!(
            "requested {r} references but only {} directions are available",
            low.len()
        )));
    }
    let mut ranked = low
        .directions()
        .iter()
        .enumerate()
        .map(|(i, d)| metric.distance(d, target).map(|dist| (dist, i)))
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(ranked.into_iter().take(r).map(|(_, i)| i).collect())
}

/// A subset of a scheme together with the indices left out of it.
#[derive(Clone, Debug, PartialEq)]
pub struct Subsample {
    pub scheme: GradientScheme,
    /// Indices into the source scheme, ascending.
    pub selected: Vec<usize>,
    /// Remaining indices, ascending; these are the up-sampling targets.
    pub complement: Vec<usize>,
}

/// Greedy farthest-point subset of size `k` under the antipodally symmetric
/// distance. The first point is drawn from `seed`; each next point maximises
/// its minimum distance to the points already chosen (ties by lower index).
pub fn subsample_even(scheme: &GradientScheme, k: usize, seed: u64) -> Result<Subsample> {
    let n = scheme.len();
    if k == 0 || k > n {
        return Err(Error::Validation(format!("cannot select {k} of {n} directions")));
    }
    let dirs = scheme.directions();
    for d in dirs {
        check_unit(d)?;
    }
    let mut chosen = vec![false; n];
    let first = keyed_rng(seed, &[0x5ab5]).random_range(0..n);
    chosen[first] = true;
    let mut nearest: Vec<f64> = dirs
        .iter()
        .map(|d| antipodal_distance(d, &dirs[first]))
        .collect::<Result<_>>()?;
    for _ in 1..k {
        let mut best: Option<(f64, usize)> = None;
        for i in (0..n).filter(|&i| !chosen[i]) {
            if best.is_none_or(|(bd, _)| nearest[i] > bd) {
                best = Some((nearest[i], i));
            }
        }
        let (_, pick) = best.expect("k <= n leaves a candidate");
        chosen[pick] = true;
        for i in 0..n {
            let d = antipodal_distance(&dirs[i], &dirs[pick])?;
            if d < nearest[i] {
                nearest[i] = d;
            }
        }
    }
    let selected: Vec<usize> = (0..n).filter(|&i| chosen[i]).collect();
    let complement: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
    Ok(Subsample {
        scheme: scheme.subset(&selected),
        selected,
        complement,
    })
}

/// Smallest pairwise antipodally symmetric distance within a direction set.
pub fn min_pairwise_antipodal(dirs: &[Vec3]) -> Result<f64> {
    let mut best = f64::INFINITY;
    for i in 0..dirs.len() {
        for j in i + 1..dirs.len() {
            best = best.min(antipodal_distance(&dirs[i], &dirs[j])?);
        }
    }
    Ok(best)
}

/// `n` well-spread unit directions on the full sphere (Fibonacci lattice).
pub fn fibonacci_directions(n: usize) -> Vec<Vec3> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            normalize(&[r * phi.cos(), r * phi.sin(), z])
        })
        .collect()
}

/// `n` directions spread over the upper hemisphere, so no two are close to
/// antipodal. Suited to diffusion schemes where `g` and `-g` are equivalent.
pub fn hemisphere_directions(n: usize) -> Vec<Vec3> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            normalize(&[r * phi.cos(), r * phi.sin(), z])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const E1: Vec3 = [1.0, 0.0, 0.0];
    const E2: Vec3 = [0.0, 1.0, 0.0];
    const E3: Vec3 = [0.0, 0.0, 1.0];

    #[test]
    fn geodesic_distance_examples() {
        assert_eq!(geodesic_distance(&E1, &E1).unwrap(), 0.0);
        assert!((geodesic_distance(&E1, &E2).unwrap() - PI / 2.0).abs() < 1e-15);
        assert!((geodesic_distance(&E1, &[-1.0, 0.0, 0.0]).unwrap() - PI).abs() < 1e-15);
    }

    #[test]
    fn geodesic_distance_rejects_non_unit() {
        let err = geodesic_distance(&[2.0, 0.0, 0.0], &E1).unwrap_err();
        assert!(err.to_string().contains("[2.0, 0.0, 0.0]"));
    }

    #[test]
    fn clamping_avoids_nan_for_rounded_inputs() {
        let a = normalize(&[1.0, 1e-9, 0.0]);
        let d = geodesic_distance(&a, &a).unwrap();
        assert!(d.is_finite());
    }

    #[test]
    fn select_exact_member() {
        let low = GradientScheme::shell(vec![E1, E2, E3], 1000.0).unwrap();
        assert_eq!(select_references(&low, &E2, 1).unwrap(), vec![1]);
    }

    #[test]
    fn select_matches_brute_force_with_index_tiebreak() {
        let diag = normalize(&[1.0, 1.0, 1.0]);
        let low = GradientScheme::shell(vec![E1, E2, E3, diag], 1000.0).unwrap();
        let target = normalize(&[1.0, 1.0, 0.0]);
        // brute force: d(diag) = acos(2/√6) ≈ 0.6155, d(e1) = d(e2) = π/4
        let d: Vec<f64> = low.directions().iter().map(|v| dot(v, &target).acos()).collect();
        assert!((d[3] - (2.0 / 6f64.sqrt()).acos()).abs() < 1e-12);
        assert!(d[3] < d[0] && (d[0] - d[1]).abs() < 1e-12);
        assert_eq!(select_references(&low, &target, 2).unwrap(), vec![3, 0]);
    }

    #[test]
    fn select_full_set_is_sorted_permutation() {
        let dirs = fibonacci_directions(12);
        let low = GradientScheme::shell(dirs.clone(), 1000.0).unwrap();
        let target = normalize(&[0.3, -0.2, 0.9]);
        let all = select_references(&low, &target, 12).unwrap();
        let mut sorted = all.clone();
        sorted.sort();
        assert_eq!(sorted, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn select_rejects_too_many() {
        let low = GradientScheme::shell(vec![E1, E2], 1000.0).unwrap();
        assert!(select_references(&low, &E1, 3).is_err());
    }

    #[test]
    fn antipodal_metric_prefers_flipped_neighbour() {
        let low = GradientScheme::shell(vec![E2, [-1.0, 0.0, 0.0]], 1000.0).unwrap();
        let target = normalize(&[1.0, 0.1, 0.0]);
        assert_eq!(select_references(&low, &target, 1).unwrap(), vec![0]);
        assert_eq!(
            select_references_with(&low, &target, 1, DistanceMetric::Antipodal).unwrap(),
            vec![1]
        );
    }

    #[test]
    fn subsample_full_set_is_identity() {
        let s = GradientScheme::shell(fibonacci_directions(10), 1000.0).unwrap();
        let sub = subsample_even(&s, 10, 4).unwrap();
        assert_eq!(sub.selected, (0..10).collect::<Vec<_>>());
        assert!(sub.complement.is_empty());
        assert_eq!(sub.scheme, s);
    }

    #[test]
    fn subsample_octahedron_is_optimal() {
        let verts = vec![E1, [-1.0, 0.0, 0.0], E2, [0.0, -1.0, 0.0], E3, [0.0, 0.0, -1.0]];
        let s = GradientScheme::shell(verts.clone(), 1000.0).unwrap();
        // brute force over all C(6,3) subsets
        let mut best = 0.0f64;
        for a in 0..6 {
            for b in a + 1..6 {
                for c in b + 1..6 {
                    let m = min_pairwise_antipodal(&[verts[a], verts[b], verts[c]]).unwrap();
                    best = best.max(m);
                }
            }
        }
        assert!((best - PI / 2.0).abs() < 1e-12);
        for seed in 0..6 {
            let sub = subsample_even(&s, 3, seed).unwrap();
            let got = min_pairwise_antipodal(sub.scheme.directions()).unwrap();
            assert!((got - best).abs() < 1e-12, "seed {seed}");
        }
    }

    #[test]
    fn subsample_is_deterministic_and_rejects_oversize() {
        let s = GradientScheme::shell(fibonacci_directions(40), 1000.0).unwrap();
        assert_eq!(subsample_even(&s, 12, 9).unwrap(), subsample_even(&s, 12, 9).unwrap());
        assert!(subsample_even(&s, 41, 0).is_err());
    }

    #[test]
    fn subsample_beats_random_subsets() {
        let dirs = fibonacci_directions(90);
        let s = GradientScheme::shell(dirs.clone(), 1000.0).unwrap();
        let sub = subsample_even(&s, 30, 1).unwrap();
        let ours = min_pairwise_antipodal(sub.scheme.directions()).unwrap();
        let mut rng = keyed_rng(77, &[]);
        for _ in 0..100 {
            let idx = rand::seq::index::sample(&mut rng, 90, 30).into_vec();
            let pick: Vec<Vec3> = idx.iter().map(|&i| dirs[i]).collect();
            assert!(ours >= min_pairwise_antipodal(&pick).unwrap());
        }
    }

    #[test]
    fn bvals_bvecs_text_round_trip() {
        let mut dirs = fibonacci_directions(5);
        dirs.insert(0, [0.0, 0.0, 0.0]);
        let mut b = vec![1000.0; 5];
        b.insert(0, 0.0);
        let s = GradientScheme::new(dirs, b).unwrap();
        let back = GradientScheme::parse(&s.bvals_text(), &s.bvecs_text()).unwrap();
        assert_eq!(back, s);
        assert_eq!(s.bvecs_text().lines().count(), 3);
        assert_eq!(s.bvals_text().lines().count(), 1);
    }

    #[test]
    fn hemisphere_set_is_antipodally_spread() {
        let hemi = min_pairwise_antipodal(&hemisphere_directions(90)).unwrap();
        let full = min_pairwise_antipodal(&fibonacci_directions(90)).unwrap();
        assert!(hemi > full);
        assert!(hemi > 0.1);
    }

    #[test]
    fn parse_rejects_ragged_bvecs() {
        assert!(GradientScheme::parse("0 1000", "1 0\n0 1\n0").is_err());
    }

    fn unit() -> impl Strategy<Value = Vec3> {
        (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0)
            .prop_filter("non-degenerate", |(x, y, z)| x * x + y * y + z * z > 1e-3)
            .prop_map(|(x, y, z)| normalize(&[x, y, z]))
    }

    proptest! {
        #[test]
        fn distance_is_symmetric_and_bounded(a in unit(), b in unit()) {
            let ab = geodesic_distance(&a, &b).unwrap();
            let ba = geodesic_distance(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=PI).contains(&ab));
            prop_assert!(geodesic_distance(&a, &a).unwrap() < 1e-6);
        }

        #[test]
        fn selected_distances_non_decreasing(t in unit(), r in 1usize..20) {
            let low = GradientScheme::shell(fibonacci_directions(20), 1000.0).unwrap();
            let idx = select_references(&low, &t, r).unwrap();
            let d: Vec<f64> = idx.iter().map(|&i| geodesic_distance(low.direction(i), &t).unwrap()).collect();
            prop_assert!(d.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
