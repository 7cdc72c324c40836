//! Interpolation of reference slices with the linear coefficients that
//! express the target gradient in terms of the reference gradients.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qspace::{check_unit, dot, Vec3};
use crate::volume::DwiSlice;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterpOptions {
    /// Rescale coefficients to sum to one.
    #[serde(default)]
    pub renormalize: bool,
    /// Use `−b_i` for any reference on the far hemisphere from the target.
    /// The signal is symmetric under `b → −b`, so the coefficients found for
    /// the flipped gradients apply to the unchanged reference slices.
    #[serde(default)]
    pub antipodal_flip: bool,
}

/// Coefficients `c` with `Σ c_i·b_i = b_g`: the exact solution for three
/// references and the minimum-norm least-squares solution for more. A target
/// equal to a reference yields that reference's unit coefficient vector.
pub fn interp_coefficients(target: &Vec3, refs: &[Vec3]) -> Result<Vec<f64>> {
    interp_coefficients_with(target, refs, InterpOptions::default())
}

pub fn interp_coefficients_with(target: &Vec3, refs: &[Vec3], options: InterpOptions) -> Result<Vec<f64>> {
    check_unit(target)?;
    for r in refs {
        check_unit(r)?;
    }
    if refs.len() < 3 {
        return Err(Error::Validation(format!("interpolation needs at least 3 references, got {}", refs.len())));
    }
    let signs: Vec<f64> = refs
        .iter()
        .map(|r| if options.antipodal_flip && dot(r, target) < 0.0 { -1.0 } else { 1.0 })
        .collect();
    let basis: Vec<Vec3> = refs.iter().zip(&signs).map(|(r, s)| r.map(|v| v * s)).collect();

    let mut c = if let Some(hit) = basis.iter().position(|b| b == target) {
        let mut c = vec![0.0; refs.len()];
        c[hit] = 1.0;
        c
    } else {
        let a = DMatrix::from_fn(3, refs.len(), |row, col| basis[col][row]);
        let sv = a.clone().svd(false, false).singular_values;
        let rank = sv.iter().filter(|&&s| s > 1e-10 * sv.max()).count();
        if rank < 3 {
            return Err(Error::Singular(format!("reference gradients {refs:?} span only rank {rank}")));
        }
        if refs.len() == 3 {
            let m = Matrix3::from_fn(|row, col| basis[col][row]);
            let x = m
                .lu()
                .solve(&Vector3::from(*target))
                .ok_or_else(|| Error::Singular(format!("reference gradients {refs:?} are coplanar")))?;
            x.iter().copied().collect()
        } else {
            let pinv = a.pseudo_inverse(1e-12).map_err(|e| Error::Singular(e.to_string()))?;
            (pinv * DVector::from_column_slice(target)).iter().copied().collect()
        }
    };
    if options.renormalize {
        let sum: f64 = c.iter().sum();
        if sum.abs() < 1e-12 {
            return Err(Error::Singular("coefficients sum to zero and cannot be renormalised".into()));
        }
        c.iter_mut().for_each(|v| *v /= sum);
    }
    Ok(c)
}

/// `Σ c_i·X_i` with negative results clipped to zero.
pub fn interp_slice(coefficients: &[f64], refs: &[DwiSlice]) -> Result<DwiSlice> {
    let first = refs.first().ok_or_else(|| Error::Validation("no reference slices".into()))?;
    if coefficients.len() != refs.len() {
        return Err(Error::Shape(format!("{} coefficients for {} references", coefficients.len(), refs.len())));
    }
    for r in refs {
        first.check_same_shape(r)?;
    }
    let mut out = first.clone();
    for (i, px) in out.pixels.iter_mut().enumerate() {
        let mut acc = coefficients[0] * refs[0].pixels[i];
        for k in 1..refs.len() {
            acc += coefficients[k] * refs[k].pixels[i];
        }
        *px = acc.max(0.0);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qspace::normalize;
    use proptest::prelude::*;

    const E: [Vec3; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

    fn constant(v: f64) -> DwiSlice {
        DwiSlice::new(2, 3, vec![v; 6]).unwrap()
    }

    #[test]
    fn exact_member_gives_unit_vector() {
        let refs = [normalize(&[1.0, 0.2, 0.1]), normalize(&[0.1, 1.0, 0.3]), normalize(&[0.2, 0.1, 1.0])];
        assert_eq!(interp_coefficients(&refs[1], &refs).unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn solves_the_three_by_three_system() {
        let t = normalize(&[1.0, 1.0, 0.0]);
        let c = interp_coefficients(&t, &E).unwrap();
        let h = 0.5f64.sqrt();
        assert!((c[0] - h).abs() < 1e-15 && (c[1] - h).abs() < 1e-15 && c[2].abs() < 1e-15);
    }

    #[test]
    fn coplanar_references_are_rejected() {
        let refs = [E[0], E[1], normalize(&[1.0, 1.0, 0.0])];
        let err = interp_coefficients(&E[2], &refs).unwrap_err();
        assert!(matches!(err, Error::Singular(_)));
        assert!(err.to_string().contains("rank 2"));
        assert!(interp_coefficients(&E[2], &refs[..2]).is_err());
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn interp_slice_examples() {
        let a = DwiSlice::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let copy = interp_slice(&[1.0, 0.0, 0.0], &[a.clone(), constant(9.0), constant(7.0)]).unwrap();
        assert_eq!(copy.pixels, a.pixels);
        assert_eq!(interp_slice(&[0.5, 0.5], &[a.clone(), a.clone()]).unwrap().pixels, a.pixels);
        let h = 0.5f64.sqrt();
        let s = interp_slice(&[h, h, 0.0], &[constant(1.0), constant(1.0), constant(1.0)]).unwrap();
        assert!(s.pixels.iter().all(|v| (v - 1.4142).abs() < 1e-4));
        let neg = interp_slice(&[1.0, -2.0], &[constant(1.0), constant(1.0)]).unwrap();
        assert!(neg.pixels.iter().all(|v| *v == 0.0));
        assert!(interp_slice(&[1.0], &[a.clone(), a]).is_err());
    }

    #[test]
    fn options_change_the_solution() {
        let t = normalize(&[1.0, 1.0, 1.0]);
        let refs = [[-1.0, 0.0, 0.0], E[1], E[2]];
        let plain = interp_coefficients(&t, &refs).unwrap();
        assert!(plain[0] < 0.0);
        let flip = InterpOptions { antipodal_flip: true, renormalize: false };
        let flipped = interp_coefficients_with(&t, &refs, flip).unwrap();
        assert!((flipped[0] + plain[0]).abs() < 1e-15);
        assert_eq!(flipped[1..], plain[1..]);
        let norm = InterpOptions { renormalize: true, antipodal_flip: false };
        let c = interp_coefficients_with(&t, &E, norm).unwrap();
        assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    fn unit() -> impl Strategy<Value = Vec3> {
        (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0)
            .prop_filter("non-degenerate", |(x, y, z)| x * x + y * y + z * z > 1e-2)
            .prop_map(|(x, y, z)| normalize(&[x, y, z]))
    }

    proptest! {
        #[test]
        fn reconstructs_target(t in unit(), a in unit(), b in unit(), c in unit()) {
            let m = Matrix3::from_columns(&[a.into(), b.into(), c.into()]);
            prop_assume!(m.determinant().abs() > 0.1);
            let k = interp_coefficients(&t, &[a, b, c]).unwrap();
            for ax in 0..3 {
                prop_assert!((k[0] * a[ax] + k[1] * b[ax] + k[2] * c[ax] - t[ax]).abs() < 1e-10);
            }
        }

        #[test]
        fn least_squares_residual_is_orthogonal(t in unit(), refs in proptest::collection::vec(unit(), 4..8)) {
            let a = DMatrix::from_fn(3, refs.len(), |r, c| refs[c][r]);
            let sv = a.clone().svd(false, false).singular_values;
            prop_assume!(sv.min() > 0.1);
            let k = interp_coefficients(&t, &refs).unwrap();
            let recon = &a * DVector::from_vec(k);
            let resid = DVector::from_column_slice(&t) - recon;
            let proj = a.transpose() * resid;
            prop_assert!(proj.amax() < 1e-10);
        }

        #[test]
        fn interp_slice_is_linear(s in 0.1f64..3.0, c0 in -1.0f64..1.0, c1 in -1.0f64..1.0) {
            let x = DwiSlice::new(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
            let y = DwiSlice::new(1, 3, vec![0.5, 0.1, 2.0]).unwrap();
            let scale = |d: &DwiSlice| DwiSlice::new(1, 3, d.pixels.iter().map(|v| v * s).collect()).unwrap();
            let base = interp_slice(&[c0, c1], &[x.clone(), y.clone()]).unwrap();
            let scaled = interp_slice(&[c0, c1], &[scale(&x), scale(&y)]).unwrap();
            for i in 0..3 {
                prop_assert!((scaled.pixels[i] - s * base.pixels[i]).abs() < 1e-12);
            }
        }
    }
}
