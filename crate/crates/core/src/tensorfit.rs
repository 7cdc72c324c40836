//! Single-tensor fitting by log-linear least squares, FA and colored FA.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen};

use crate::error::{Error, Result};
use crate::phantom::{Sym3, TensorField};
use crate::qspace::{GradientScheme, Vec3};
use crate::volume::{DwiSet, DwiVolume};

/// Design columns are built with `b / B_SCALE` so all seven unknowns have
/// comparable magnitude; tensor estimates are rescaled afterwards.
const B_SCALE: f64 = 1000.0;
const UNKNOWNS: usize = 7;

fn design_row(g: &Vec3, b: f64) -> [f64; UNKNOWNS] {
    let s = b / B_SCALE;
    [
        1.0,
        -s * g[0] * g[0],
        -s * g[1] * g[1],
        -s * g[2] * g[2],
        -2.0 * s * g[0] * g[1],
        -2.0 * s * g[0] * g[2],
        -2.0 * s * g[1] * g[2],
    ]
}

fn design(scheme: &GradientScheme) -> DMatrix<f64> {
    DMatrix::from_fn(scheme.len(), UNKNOWNS, |r, c| design_row(scheme.direction(r), scheme.bvalue(r))[c])
}

fn rank(a: &DMatrix<f64>) -> usize {
    let sv = a.clone().svd(false, false).singular_values;
    let tol = sv.max() * 1e-10 * a.nrows().max(a.ncols()) as f64;
    sv.iter().filter(|&&s| s > tol).count()
}

fn solve_ls(a: &DMatrix<f64>, y: &DVector<f64>) -> Option<DVector<f64>> {
    a.clone().svd(true, true).solve(y, 1e-12).ok()
}

/// Fits `ln S = ln S0 − b gᵀDg` per voxel by ordinary least squares.
///
/// `volumes` pairs with `scheme` entry by entry; `s0_volumes` are extra
/// unweighted measurements. Non-positive signals are dropped from a voxel's
/// fit, and voxels left with fewer than seven measurements are masked out.
/// The mask starts as the voxels with a positive mean unweighted signal.
pub fn fit_tensor(volumes: &[DwiVolume], scheme: &GradientScheme, s0_volumes: &[DwiVolume]) -> Result<TensorField> {
    if volumes.len() != scheme.len() {
        return Err(Error::Validation(format!(
            "{} volumes for {} scheme entries",
            volumes.len(),
            scheme.len()
        )));
    }
    let mut all: Vec<&DwiVolume> = volumes.iter().collect();
    all.extend(s0_volumes);
    let first = all.first().ok_or_else(|| Error::Validation("no volumes to fit".into()))?;
    let dims = first.dims();
    if let Some(v) = all.iter().find(|v| v.dims() != dims) {
        return Err(Error::Shape(format!("volume dims {:?} differ from {dims:?}", v.dims())));
    }
    let mut dirs = scheme.directions().to_vec();
    let mut bvals = scheme.bvalues().to_vec();
    for v in s0_volumes {
        dirs.push([0.0; 3]);
        bvals.push(0.0);
        if v.bvalue != 0.0 {
            return Err(Error::Validation(format!("S0 volume has b = {}", v.bvalue)));
        }
    }
    let full = GradientScheme::new(dirs, bvals)?;
    let unweighted = full.unweighted_indices();
    let a = design(&full);
    let r = rank(&a);
    if unweighted.is_empty() || r < UNKNOWNS {
        let weighted = full.weighted_indices().len();
        return Err(Error::Singular(format!(
            "tensor design matrix has rank {r} < {UNKNOWNS}: scheme has {weighted} weighted directions and {} unweighted volumes; \
             at least 6 non-collinear weighted directions and one b=0 measurement are required",
            unweighted.len()
        )));
    }
    let pinv = a.clone().pseudo_inverse(1e-12).map_err(|e| Error::Singular(e.to_string()))?;

    let n = dims.iter().product::<usize>();
    let m = full.len();
    let mut field = TensorField {
        shape: dims,
        tensors: vec![[0.0; 6]; n],
        s0: vec![0.0; n],
        mask: vec![false; n],
        voxel_size: first.voxel_size,
    };
    let mut y = DVector::zeros(m);
    for v in 0..n {
        let base = unweighted.iter().map(|&i| all[i].data()[v]).sum::<f64>() / unweighted.len() as f64;
        if !(base > 0.0) {
            continue;
        }
        let usable: Vec<usize> = (0..m).filter(|&i| all[i].data()[v] > 0.0).collect();
        if usable.len() < UNKNOWNS {
            continue;
        }
        let x = if usable.len() == m {
            for i in 0..m {
                y[i] = all[i].data()[v].ln();
            }
            &pinv * &y
        } else {
            let sub = a.select_rows(&usable);
            if rank(&sub) < UNKNOWNS {
                continue;
            }
            let ys = DVector::from_iterator(usable.len(), usable.iter().map(|&i| all[i].data()[v].ln()));
            match solve_ls(&sub, &ys) {
                Some(x) => x,
                None => continue,
            }
        };
        field.s0[v] = x[0].exp();
        for k in 0..6 {
            field.tensors[v][k] = x[k + 1] / B_SCALE;
        }
        field.mask[v] = true;
    }
    Ok(field)
}

/// Fits every volume of a set, splitting weighted and unweighted entries.
pub fn fit_set(set: &DwiSet) -> Result<TensorField> {
    let scheme = set.scheme()?;
    let weighted = set.weighted();
    let vols: Vec<DwiVolume> = weighted.iter().map(|&i| set.volumes[i].clone()).collect();
    let s0: Vec<DwiVolume> = set.unweighted().iter().map(|&i| set.volumes[i].clone()).collect();
    fit_tensor(&vols, &scheme.subset(&weighted), &s0)
}

/// Eigenvalues in descending order and the principal unit eigenvector.
///
/// When the largest eigenvalue is repeated, the eigenvector whose absolute
/// components are lexicographically largest is returned, with a
/// non-negative first non-zero component.
pub fn eigen(d: &Sym3) -> ([f64; 3], Vec3) {
    let m = Matrix3::new(d[0], d[3], d[4], d[3], d[1], d[5], d[4], d[5], d[2]);
    let e = SymmetricEigen::new(m);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| e.eigenvalues[j].total_cmp(&e.eigenvalues[i]));
    let vals = order.map(|i| e.eigenvalues[i]);
    let scale = vals.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let tol = 1e-9 * scale;
    let candidates = order
        .iter()
        .filter(|&&i| (e.eigenvalues[i] - vals[0]).abs() <= tol)
        .map(|&i| {
            let c = e.eigenvectors.column(i);
            [c[0], c[1], c[2]]
        });
    let key = |v: &Vec3| v.map(f64::abs);
    let best = candidates
        .max_by(|a, b| {
            let (ka, kb) = (key(a), key(b));
            ka[0].total_cmp(&kb[0]).then(ka[1].total_cmp(&kb[1])).then(ka[2].total_cmp(&kb[2]))
        })
        .unwrap_or([1.0, 0.0, 0.0]);
    let sign = best.iter().find(|c| c.abs() > 0.0).map_or(1.0, |c| c.signum());
    (vals, best.map(|c| c * sign))
}

/// Fractional anisotropy `√(3/2)·‖λ − λ̄‖ / ‖λ‖`, with eigenvalues clamped at 0.
pub fn fa(eigenvalues: [f64; 3]) -> f64 {
    let l = eigenvalues.map(|v| v.max(0.0));
    let norm = (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]).sqrt();
    if norm == 0.0 {
        return 0.0;
    }
    let mean = (l[0] + l[1] + l[2]) / 3.0;
    let dev = ((l[0] - mean).powi(2) + (l[1] - mean).powi(2) + (l[2] - mean).powi(2)).sqrt();
    (1.5f64.sqrt() * dev / norm).min(1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FaMap {
    pub shape: [usize; 3],
    pub values: Vec<f64>,
    /// `|v1|·FA` per voxel.
    pub color: Vec<[f64; 3]>,
    pub mask: Vec<bool>,
}

pub fn colored_fa(field: &TensorField) -> FaMap {
    let n = field.len();
    let mut map = FaMap { shape: field.shape, values: vec![0.0; n], color: vec![[0.0; 3]; n], mask: field.mask.clone() };
    for v in (0..n).filter(|&v| field.mask[v]) {
        let (vals, v1) = eigen(&field.tensors[v]);
        let f = fa(vals);
        map.values[v] = f;
        map.color[v] = v1.map(|c| (c.abs() * f).min(1.0));
    }
    map
}

impl FaMap {
    pub fn slice_len(&self) -> usize {
        self.shape[0] * self.shape[1]
    }

    /// FA values of axial slice `z`, row-major `ny × nx`.
    pub fn slice(&self, z: usize) -> &[f64] {
        let n = self.slice_len();
        &self.values[z * n..(z + 1) * n]
    }

    pub fn slice_mask(&self, z: usize) -> &[bool] {
        let n = self.slice_len();
        &self.mask[z * n..(z + 1) * n]
    }

    /// FA as a scalar volume in the toolkit format.
    pub fn to_volume(&self, voxel_size: [f64; 3]) -> Result<DwiVolume> {
        Ok(DwiVolume::new(self.shape, self.values.clone(), [0.0; 3], 0.0, voxel_size)?.with_source("fa"))
    }

    /// Writes axial slice `z` of the colored map as an RGB PNG.
    pub fn write_color_png(&self, z: usize, path: &Path) -> Result<()> {
        if z >= self.shape[2] {
            return Err(Error::Validation(format!("slice {z} out of range 0..{}", self.shape[2])));
        }
        let [nx, ny, _] = self.shape;
        let img = image::RgbImage::from_fn(nx as u32, ny as u32, |x, y| {
            let c = self.color[x as usize + nx * (y as usize + ny * z)];
            image::Rgb(c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        });
        img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_tensor_field, simulate_dwi, synthetic_scheme, tensor_from_eigen, RegionSpec, Shape};
    use crate::qspace::{hemisphere_directions, normalize};

    fn uniform_field(d: Sym3, shape: [usize; 3]) -> TensorField {
        let n = shape.iter().product();
        TensorField { shape, tensors: vec![d; n], s0: vec![1.0; n], mask: vec![true; n], voxel_size: [1.0; 3] }
    }

    fn fit_noiseless(field: &TensorField, n_dirs: usize) -> TensorField {
        let scheme = synthetic_scheme(n_dirs, 1, 1000.0).unwrap();
        let set = DwiSet::new(simulate_dwi(field, &scheme, None, 0).unwrap()).unwrap();
        fit_set(&set).unwrap()
    }

    #[test]
    fn fa_closed_forms() {
        assert!(fa([1.0, 1.0, 1.0]).abs() < 1e-15);
        assert!((fa([1.0, 0.0, 0.0]) - 1.0).abs() < 1e-15);
        // |λ − λ̄| = √6/3 and |λ| = √6
        assert!((fa([2.0, 1.0, 1.0]) - 1.5f64.sqrt() / 3.0).abs() < 1e-15);
        assert!((fa([2.0, 1.0, 1.0]) - 0.4082).abs() < 1e-4);
        assert_eq!(fa([0.0; 3]), 0.0);
        assert_eq!(fa([-1.0, -1.0, 0.0]), 0.0);
    }

    #[test]
    fn noiseless_round_trip_is_exact() {
        let d = [1.5e-3, 0.5e-3, 0.5e-3, 0.0, 0.0, 0.0];
        let f = fit_noiseless(&uniform_field(d, [2, 2, 1]), 30);
        for t in &f.tensors {
            for k in 0..6 {
                assert!((t[k] - d[k]).abs() < 1e-9);
            }
        }
        assert!(f.s0.iter().all(|s| (s - 1.0).abs() < 1e-9));
    }

    #[test]
    fn oblique_tensor_round_trip() {
        let d = tensor_from_eigen(&normalize(&[0.2, 0.7, -0.4]), [1.7e-3, 0.4e-3, 0.1e-3]);
        let f = fit_noiseless(&uniform_field(d, [1, 1, 1]), 6);
        for (k, (got, want)) in f.tensors[0].iter().zip(&d).enumerate() {
            assert!((got - want).abs() < 1e-9, "{k}");
        }
        let (vals, _) = eigen(&f.tensors[0]);
        assert!(vals.iter().all(|&l| l >= -1e-9));
    }

    #[test]
    fn no_attenuation_gives_zero_tensor() {
        let f = fit_noiseless(&uniform_field([0.0; 6], [1, 1, 1]), 12);
        assert!(f.tensors[0].iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn rank_deficiency_is_reported() {
        let single_shell = GradientScheme::shell(hemisphere_directions(10), 1000.0).unwrap();
        let field = uniform_field([1e-3, 1e-3, 1e-3, 0.0, 0.0, 0.0], [1, 1, 1]);
        let vols = simulate_dwi(&field, &single_shell, None, 0).unwrap();
        let err = fit_tensor(&vols, &single_shell, &[]).unwrap_err().to_string();
        assert!(err.contains("0 unweighted"), "{err}");

        let planar: Vec<Vec3> = (0..8)
            .map(|i| {
                let a = i as f64 * 0.4;
                [a.cos(), a.sin(), 0.0]
            })
            .collect();
        let mut dirs = vec![[0.0; 3]];
        dirs.extend(planar);
        let mut b = vec![0.0];
        b.extend([1000.0; 8]);
        let scheme = GradientScheme::new(dirs, b).unwrap();
        let vols = simulate_dwi(&field, &scheme, None, 0).unwrap();
        assert!(matches!(fit_tensor(&vols, &scheme, &[]), Err(Error::Singular(_))));
    }

    #[test]
    fn non_positive_signals_are_excluded() {
        let d = [1.2e-3, 0.6e-3, 0.3e-3, 0.1e-3, 0.0, 0.0];
        let field = uniform_field(d, [1, 1, 1]);
        let scheme = synthetic_scheme(12, 1, 1000.0).unwrap();
        let mut vols = simulate_dwi(&field, &scheme, None, 0).unwrap();
        vols[4] = DwiVolume::new([1, 1, 1], vec![0.0], vols[4].direction, 1000.0, [1.0; 3]).unwrap();
        let set = DwiSet::new(vols.clone()).unwrap();
        let f = fit_set(&set).unwrap();
        assert!(f.mask[0]);
        for (got, want) in f.tensors[0].iter().zip(&d) {
            assert!((got - want).abs() < 1e-9);
        }
        // too few usable measurements left
        for v in vols.iter_mut().skip(1).take(7) {
            *v = DwiVolume::new([1, 1, 1], vec![0.0], v.direction, 1000.0, [1.0; 3]).unwrap();
        }
        assert!(!fit_set(&DwiSet::new(vols).unwrap()).unwrap().mask[0]);
    }

    #[test]
    fn more_directions_fit_noisy_data_better() {
        let region = RegionSpec {
            name: "wm".into(),
            shape: Shape::Box { min: [0.0; 3], max: [10.0; 3] },
            direction: normalize(&[1.0, 1.0, 0.0]),
            eigenvalues: [1.5e-3, 0.4e-3, 0.3e-3],
            s0: 1.0,
            s0_jitter: 0.0,
        };
        let field = generate_tensor_field([10, 10, 1], &[region], 0).unwrap();
        let median_err = |n_dirs: usize| {
            let scheme = synthetic_scheme(n_dirs, 1, 1000.0).unwrap();
            let set = DwiSet::new(simulate_dwi(&field, &scheme, Some(20.0), 4).unwrap()).unwrap();
            let fit = fit_set(&set).unwrap();
            let mut errs: Vec<f64> = fit
                .tensors
                .iter()
                .zip(&field.tensors)
                .flat_map(|(a, b)| (0..6).map(move |k| (a[k] - b[k]).abs()))
                .collect();
            errs.sort_by(f64::total_cmp);
            errs[errs.len() / 2]
        };
        assert!(median_err(90) < median_err(30));
    }

    #[test]
    fn colored_fa_examples() {
        let iso = colored_fa(&uniform_field([1e-3, 1e-3, 1e-3, 0.0, 0.0, 0.0], [1, 1, 1]));
        assert_eq!(iso.color[0], [0.0; 3]);
        let l2 = {
            // FA of (1, l, l) is (1 − l)/√(1 + 2l²); solve (1 − l)² = 0.64(1 + 2l²)
            let (a, b, c): (f64, f64, f64) = (1.0 - 1.28, -2.0, 1.0 - 0.64);
            (-b - (b * b - 4.0 * a * c).sqrt()) / (2.0 * a)
        };
        let d = tensor_from_eigen(&[1.0, 0.0, 0.0], [1e-3, l2 * 1e-3, l2 * 1e-3]);
        let m = colored_fa(&uniform_field(d, [1, 1, 1]));
        assert!((m.values[0] - 0.8).abs() < 1e-12, "{}", m.values[0]);
        assert!((m.color[0][0] - 0.8).abs() < 1e-12 && m.color[0][1].abs() < 1e-12);
    }

    #[test]
    fn colored_fa_follows_rotation() {
        let v = normalize(&[0.3, 0.5, 0.81]);
        let d = tensor_from_eigen(&v, [1.6e-3, 0.3e-3, 0.2e-3]);
        let m = colored_fa(&uniform_field(d, [1, 1, 1]));
        let f = fa([1.6e-3, 0.3e-3, 0.2e-3]);
        for (c, va) in m.color[0].iter().zip(&v) {
            assert!((c - va.abs() * f).abs() < 1e-9);
        }
    }

    #[test]
    fn tied_principal_eigenvalues_pick_lexicographic_axis() {
        let d = [1e-3, 1e-3, 0.2e-3, 0.0, 0.0, 0.0];
        let (vals, v1) = eigen(&d);
        assert!((vals[0] - 1e-3).abs() < 1e-15);
        assert_eq!(v1.map(f64::abs), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn png_export_writes_rgb() {
        let dir = tempfile::tempdir().unwrap();
        let d = tensor_from_eigen(&[0.0, 1.0, 0.0], [1.6e-3, 0.2e-3, 0.2e-3]);
        let m = colored_fa(&uniform_field(d, [3, 2, 1]));
        let path = dir.path().join("cfa.png");
        m.write_color_png(0, &path).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (3, 2));
        assert_eq!(img.get_pixel(1, 1)[0], 0);
        assert!(img.get_pixel(1, 1)[1] > 200);
    }

    proptest::proptest! {
        #[test]
        fn fa_invariances(a in 0.0f64..5.0, b in 0.0f64..5.0, c in 0.01f64..5.0, s in 0.01f64..100.0) {
            let base = fa([a, b, c]);
            proptest::prop_assert!((0.0..=1.0).contains(&base));
            proptest::prop_assert!((fa([a * s, b * s, c * s]) - base).abs() < 1e-12);
            proptest::prop_assert!((fa([c, a, b]) - base).abs() < 1e-12);
        }
    }
}
