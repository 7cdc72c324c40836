//! Synthetic tensor fields and their simulated diffusion-weighted signals.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qspace::{check_unit, cross, dot, normalize, GradientScheme, Vec3};
use crate::rng::keyed_rng;
use crate::volume::DwiVolume;

pub const DEFAULT_VOXEL_SIZE: [f64; 3] = [1.25, 1.25, 1.25];

/// Unique elements of a symmetric 3×3 matrix: `[xx, yy, zz, xy, xz, yz]`.
pub type Sym3 = [f64; 6];

pub fn sym3_matrix(d: &Sym3) -> [[f64; 3]; 3] {
    [[d[0], d[3], d[4]], [d[3], d[1], d[5]], [d[4], d[5], d[2]]]
}

/// `gᵀ D g`.
pub fn quadratic_form(d: &Sym3, g: &Vec3) -> f64 {
    d[0] * g[0] * g[0]
        + d[1] * g[1] * g[1]
        + d[2] * g[2] * g[2]
        + 2.0 * (d[3] * g[0] * g[1] + d[4] * g[0] * g[2] + d[5] * g[1] * g[2])
}

/// Tensor with principal axis `v1` and eigenvalues `(λ1, λ2, λ3)`; the two
/// minor axes complete `v1` to a right-handed orthonormal frame.
pub fn tensor_from_eigen(v1: &Vec3, eigenvalues: [f64; 3]) -> Sym3 {
    let v1 = normalize(v1);
    let helper = if v1[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let v2 = normalize(&cross(&v1, &helper));
    let v3 = cross(&v1, &v2);
    let mut d = [0.0; 6];
    for (v, l) in [v1, v2, v3].iter().zip(eigenvalues) {
        d[0] += l * v[0] * v[0];
        d[1] += l * v[1] * v[1];
        d[2] += l * v[2] * v[2];
        d[3] += l * v[0] * v[1];
        d[4] += l * v[0] * v[2];
        d[5] += l * v[1] * v[2];
    }
    d
}

/// Region predicate over voxel-centre coordinates `(x, y, z)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    /// Axis-aligned box, bounds inclusive.
    Box { min: [f64; 3], max: [f64; 3] },
    Ellipsoid { center: [f64; 3], radii: [f64; 3] },
    /// Points inside `base` and outside every shape in `minus`.
    Difference { base: std::boxed::Box<Shape>, minus: Vec<Shape> },
}

impl Shape {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        match self {
            Shape::Box { min, max } => (0..3).all(|a| p[a] >= min[a] && p[a] <= max[a]),
            Shape::Ellipsoid { center, radii } => {
                (0..3).map(|a| ((p[a] - center[a]) / radii[a]).powi(2)).sum::<f64>() <= 1.0
            }
            Shape::Difference { base, minus } => base.contains(p) && !minus.iter().any(|m| m.contains(p)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub name: String,
    pub shape: Shape,
    pub direction: Vec3,
    /// Principal eigenvalue first (mm²/s).
    pub eigenvalues: [f64; 3],
    pub s0: f64,
    /// Relative per-voxel spread of S0, drawn uniformly in `±s0_jitter`.
    pub s0_jitter: f64,
}

/// Per-voxel diffusion tensors (mm²/s), baseline signal and mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorField {
    pub shape: [usize; 3],
    pub tensors: Vec<Sym3>,
    pub s0: Vec<f64>,
    pub mask: Vec<bool>,
    pub voxel_size: [f64; 3],
}

impl TensorField {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.shape[0] * (y + self.shape[1] * z)
    }

    pub fn mean_masked_s0(&self) -> f64 {
        let (sum, n) = self
            .s0
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

pub fn generate_tensor_field(shape: [usize; 3], regions: &[RegionSpec], seed: u64) -> Result<TensorField> {
    if shape.contains(&0) {
        return Err(Error::Validation(format!("field shape {shape:?} must be positive")));
    }
    for r in regions {
        if r.eigenvalues.iter().any(|&l| !(l >= 0.0)) {
            return Err(Error::Validation(format!("region '{}' has negative eigenvalues", r.name)));
        }
        check_unit(&r.direction)?;
        if !(r.s0 >= 0.0) || !(0.0..1.0).contains(&r.s0_jitter) {
            return Err(Error::Validation(format!("region '{}' has invalid S0 settings", r.name)));
        }
    }
    let n = shape.iter().product();
    let mut field = TensorField {
        shape,
        tensors: vec![[0.0; 6]; n],
        s0: vec![0.0; n],
        mask: vec![false; n],
        voxel_size: DEFAULT_VOXEL_SIZE,
    };
    let tensors: Vec<Sym3> = regions.iter().map(|r| tensor_from_eigen(&r.direction, r.eigenvalues)).collect();
    let mut rng = keyed_rng(seed, &[0x7e45]);
    let mut conflicts: Vec<(String, String, usize)> = Vec::new();
    for z in 0..shape[2] {
        for y in 0..shape[1] {
            for x in 0..shape[0] {
                let p = [x as f64, y as f64, z as f64];
                let hits: Vec<usize> = (0..regions.len()).filter(|&i| regions[i].shape.contains(p)).collect();
                let jitter: f64 = rng.random_range(-1.0..1.0);
                if hits.len() > 1 {
                    let pair = (regions[hits[0]].name.clone(), regions[hits[1]].name.clone());
                    match conflicts.iter_mut().find(|c| c.0 == pair.0 && c.1 == pair.1) {
                        Some(c) => c.2 += 1,
                        None => conflicts.push((pair.0, pair.1, 1)),
                    }
                    continue;
                }
                if let Some(&r) = hits.first() {
                    let i = field.index(x, y, z);
                    field.tensors[i] = tensors[r];
                    field.s0[i] = regions[r].s0 * (1.0 + regions[r].s0_jitter * jitter);
                    field.mask[i] = true;
                }
            }
        }
    }
    if !conflicts.is_empty() {
        let list: Vec<String> =
            conflicts.iter().map(|(a, b, n)| format!("'{a}' and '{b}' ({n} voxels)")).collect();
        return Err(Error::Validation(format!("overlapping regions: {}", list.join(", "))));
    }
    Ok(field)
}

pub const BAR_EIGENVALUES: [f64; 3] = [1.6e-3, 0.2e-3, 0.2e-3];
pub const BACKGROUND_DIFFUSIVITY: f64 = 0.8e-3;

/// Region list for an isotropic elliptical background crossed by two
/// non-overlapping orthogonal anisotropic bars, one along x and one along y.
/// The seed shifts the bars by up to a few voxels.
pub fn two_bar_regions(shape: [usize; 3], seed: u64) -> Vec<RegionSpec> {
    let [nx, ny, nz] = shape.map(|s| s as f64);
    let (cx, cy, cz) = ((nx - 1.0) / 2.0, (ny - 1.0) / 2.0, (nz - 1.0) / 2.0);
    let mut rng = keyed_rng(seed, &[0xba25]);
    let shift_x = (nx / 16.0).floor().max(1.0);
    let shift_y = (ny / 16.0).floor().max(1.0);
    let dx: f64 = rng.random_range(-shift_x..=shift_x).round();
    let dy: f64 = rng.random_range(-shift_y..=shift_y).round();
    let half_w = (ny.min(nx) / 16.0).max(1.0);
    let z_span = [-1.0, nz];
    // Horizontal bar in the upper half, vertical bar in the lower half.
    let bar_x = Shape::Box {
        min: [cx - 0.3 * nx + dx, cy - 0.2 * ny + dy - half_w, z_span[0]],
        max: [cx + 0.3 * nx + dx, cy - 0.2 * ny + dy + half_w, z_span[1]],
    };
    let bar_y = Shape::Box {
        min: [cx + dx - half_w, cy - 0.05 * ny + dy, z_span[0]],
        max: [cx + dx + half_w, cy + 0.35 * ny + dy, z_span[1]],
    };
    let ellipse = Shape::Ellipsoid { center: [cx, cy, cz], radii: [0.45 * nx, 0.45 * ny, nz.max(1.0) * 4.0] };
    let background = Shape::Difference { base: Box::new(ellipse), minus: vec![bar_x.clone(), bar_y.clone()] };
    vec![
        RegionSpec {
            name: "background".into(),
            shape: background,
            direction: [1.0, 0.0, 0.0],
            eigenvalues: [BACKGROUND_DIFFUSIVITY; 3],
            s0: 1.0,
            s0_jitter: 0.05,
        },
        RegionSpec {
            name: "bar_x".into(),
            shape: bar_x,
            direction: [1.0, 0.0, 0.0],
            eigenvalues: BAR_EIGENVALUES,
            s0: 1.2,
            s0_jitter: 0.05,
        },
        RegionSpec {
            name: "bar_y".into(),
            shape: bar_y,
            direction: [0.0, 1.0, 0.0],
            eigenvalues: BAR_EIGENVALUES,
            s0: 1.2,
            s0_jitter: 0.05,
        },
    ]
}

pub fn two_bar_phantom(shape: [usize; 3], seed: u64) -> Result<TensorField> {
    generate_tensor_field(shape, &two_bar_regions(shape, seed), seed)
}

/// Signal `S0·exp(−b gᵀDg)` per scheme entry, optionally with Rician noise of
/// standard deviation `mean in-mask S0 / snr`. Volume `i` draws its noise from
/// a stream keyed by `(seed, i)`.
pub fn simulate_dwi(field: &TensorField, scheme: &GradientScheme, snr: Option<f64>, seed: u64) -> Result<Vec<DwiVolume>> {
    if scheme.is_empty() {
        return Err(Error::Validation("gradient scheme is empty".into()));
    }
    let sigma = match snr {
        Some(s) if !(s > 0.0 && s.is_finite()) => {
            return Err(Error::Validation(format!("snr {s} must be positive")));
        }
        Some(s) => Some(field.mean_masked_s0() / s),
        None => None,
    };
    (0..scheme.len())
        .map(|i| {
            let g = scheme.direction(i);
            let b = scheme.bvalue(i);
            let mut rng = keyed_rng(seed, &[0x0d1, i as u64]);
            let data = (0..field.len())
                .map(|v| {
                    if !field.mask[v] {
                        return 0.0;
                    }
                    let s = field.s0[v] * (-b * quadratic_form(&field.tensors[v], g)).exp();
                    match sigma {
                        None => s,
                        Some(sd) => {
                            let n1: f64 = StandardNormal.sample(&mut rng);
                            let n2: f64 = StandardNormal.sample(&mut rng);
                            ((s + sd * n1).powi(2) + (sd * n2).powi(2)).sqrt()
                        }
                    }
                })
                .collect();
            DwiVolume::new(field.shape, data, *g, b, field.voxel_size)
        })
        .collect()
}

/// The synthetic acquisition: `b0_count` unweighted volumes followed by
/// `n_dirs` hemisphere directions at `bvalue`.
pub fn synthetic_scheme(n_dirs: usize, b0_count: usize, bvalue: f64) -> Result<GradientScheme> {
    let mut dirs = vec![[0.0; 3]; b0_count];
    let mut bvals = vec![0.0; b0_count];
    dirs.extend(crate::qspace::hemisphere_directions(n_dirs));
    bvals.extend(std::iter::repeat_n(bvalue, n_dirs));
    GradientScheme::new(dirs, bvals)
}

/// Angle between two axes in radians, ignoring sign.
pub fn axis_angle(a: &Vec3, b: &Vec3) -> f64 {
    dot(&normalize(a), &normalize(b)).abs().min(1.0).acos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qspace::fibonacci_directions;
    use crate::tensorfit::{eigen, fa};

    fn single(shape: Shape, direction: Vec3, eigenvalues: [f64; 3], name: &str) -> RegionSpec {
        RegionSpec { name: name.into(), shape, direction, eigenvalues, s0: 1.0, s0_jitter: 0.0 }
    }

    fn whole(n: usize) -> Shape {
        Shape::Box { min: [0.0; 3], max: [n as f64; 3] }
    }

    #[test]
    fn isotropic_region_has_zero_fa() {
        let f = generate_tensor_field([3, 3, 2], &[single(whole(3), [0.0, 0.0, 1.0], [1e-3; 3], "iso")], 1).unwrap();
        for t in &f.tensors {
            assert!(fa(eigen(t).0).abs() < 1e-12);
        }
    }

    #[test]
    fn principal_axis_follows_direction() {
        let f = generate_tensor_field(
            [2, 2, 1],
            &[single(whole(2), [1.0, 0.0, 0.0], [1.5e-3, 0.3e-3, 0.3e-3], "bar")],
            1,
        )
        .unwrap();
        for t in &f.tensors {
            let (_, v1) = eigen(t);
            assert!((v1[0].abs() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn overlapping_regions_are_reported() {
        let a = single(Shape::Box { min: [0.0, 1.0, 0.0], max: [4.0, 2.0, 0.0] }, [1.0, 0.0, 0.0], [1e-3; 3], "a");
        let b = single(Shape::Box { min: [1.0, 0.0, 0.0], max: [2.0, 4.0, 0.0] }, [0.0, 1.0, 0.0], [1e-3; 3], "b");
        let msg = generate_tensor_field([5, 5, 1], &[a, b], 0).unwrap_err().to_string();
        assert!(msg.contains("'a' and 'b' (4 voxels)"), "{msg}");
    }

    #[test]
    fn signal_equation_examples() {
        let region = single(whole(1), [1.0, 0.0, 0.0], [1.5e-3, 0.5e-3, 0.5e-3], "r");
        let f = generate_tensor_field([1, 1, 1], &[region], 0).unwrap();
        let scheme = GradientScheme::new(vec![[0.0; 3], [1.0, 0.0, 0.0]], vec![0.0, 1000.0]).unwrap();
        let v = simulate_dwi(&f, &scheme, None, 0).unwrap();
        assert_eq!(v[0].data()[0], 1.0);
        assert!((v[1].data()[0] - (-1.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn isotropic_signal_is_direction_independent() {
        let f = generate_tensor_field([2, 2, 2], &[single(whole(2), [1.0, 0.0, 0.0], [0.9e-3; 3], "iso")], 3).unwrap();
        let scheme = GradientScheme::shell(fibonacci_directions(12), 1000.0).unwrap();
        let v = simulate_dwi(&f, &scheme, None, 0).unwrap();
        for vol in &v[1..] {
            for (a, b) in vol.data().iter().zip(v[0].data()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn two_bar_phantom_properties() {
        let f = two_bar_phantom([64, 64, 9], 5).unwrap();
        let bars = f.tensors.iter().zip(&f.mask).filter(|(t, &m)| m && fa(eigen(t).0) > 0.8).count();
        let iso = f.tensors.iter().zip(&f.mask).filter(|(t, &m)| m && fa(eigen(t).0) < 1e-9).count();
        assert!(bars > 500 && iso > 3 * bars, "bars {bars} iso {iso}");
        assert!((fa(BAR_EIGENVALUES) - 0.86).abs() < 0.01);
        assert!(!f.mask[f.index(0, 0, 0)]);
        assert_ne!(two_bar_phantom([64, 64, 9], 6).unwrap(), f);
        assert_eq!(two_bar_phantom([64, 64, 9], 5).unwrap(), f);
        assert!(two_bar_phantom([32, 32, 3], 11).is_ok());
    }

    #[test]
    fn noise_is_seeded_per_volume() {
        let f = two_bar_phantom([16, 16, 2], 1).unwrap();
        let scheme = synthetic_scheme(6, 1, 1000.0).unwrap();
        let a = simulate_dwi(&f, &scheme, Some(20.0), 9).unwrap();
        let b = simulate_dwi(&f, &scheme.subset(&[3]), Some(20.0), 9).unwrap();
        assert_eq!(a, simulate_dwi(&f, &scheme, Some(20.0), 9).unwrap());
        // volume 3 alone uses stream (9, 0) rather than (9, 3)
        assert_ne!(a[3].data(), b[0].data());
        assert!(a.iter().all(|v| v.data().iter().zip(&f.mask).all(|(s, &m)| m || *s == 0.0)));
    }

    #[test]
    fn rician_noise_has_expected_spread_in_background() {
        let f = generate_tensor_field([40, 40, 4], &[single(whole(40), [1.0, 0.0, 0.0], [0.0; 3], "flat")], 0).unwrap();
        let scheme = GradientScheme::shell(vec![[0.0, 0.0, 1.0]], 1000.0).unwrap();
        let v = simulate_dwi(&f, &scheme, Some(20.0), 2).unwrap();
        let n = v[0].data().len() as f64;
        let mean = v[0].data().iter().sum::<f64>() / n;
        let var = v[0].data().iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
        assert!((var.sqrt() - 0.05).abs() < 0.003, "sd {}", var.sqrt());
    }

    proptest::proptest! {
        #[test]
        fn signal_is_sign_symmetric_and_bounded(
            x in -1.0f64..1.0, y in -1.0f64..1.0, z in 0.1f64..1.0,
            l1 in 0.0f64..3e-3, l2 in 0.0f64..3e-3, l3 in 0.0f64..3e-3,
        ) {
            let g = normalize(&[x, y, z]);
            let d = tensor_from_eigen(&normalize(&[0.3, -0.5, 0.8]), [l1, l2, l3]);
            let q1 = quadratic_form(&d, &g);
            let q2 = quadratic_form(&d, &[-g[0], -g[1], -g[2]]);
            proptest::prop_assert!((q1 - q2).abs() < 1e-18);
            let s = (-1000.0 * q1).exp();
            proptest::prop_assert!(s > 0.0 && s <= 1.0 + 1e-12);
        }
    }
}
