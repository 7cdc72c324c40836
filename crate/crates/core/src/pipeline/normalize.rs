//! Per-slice min-max normalisation and output masking.

use crate::error::{Error, Result};
use crate::volume::DwiSlice;

/// Scales pixels to `[0, 1]` and records the original `(min, max)`. A
/// constant slice maps to zeros with `norm_min = norm_max`.
pub fn normalize_slice(slice: &DwiSlice) -> DwiSlice {
    let min = slice.pixels.iter().copied().fold(f64::INFINITY, f64::min);
    let max = slice.pixels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (min, max) = if slice.pixels.is_empty() { (0.0, 0.0) } else { (min, max) };
    let range = max - min;
    let pixels = slice
        .pixels
        .iter()
        .map(|&v| if range > 0.0 { (v - min) / range } else { 0.0 })
        .collect();
    DwiSlice { pixels, norm_min: min, norm_max: max, ..slice.clone() }
}

/// Maps normalised pixels back through the recorded `(min, max)`.
pub fn denormalize_slice(slice: &DwiSlice) -> DwiSlice {
    denormalize_with(slice, slice.norm_min, slice.norm_max)
}

pub fn denormalize_with(slice: &DwiSlice, min: f64, max: f64) -> DwiSlice {
    let range = max - min;
    let pixels = slice.pixels.iter().map(|&v| v * range + min).collect();
    DwiSlice { pixels, norm_min: 0.0, norm_max: 1.0, ..slice.clone() }
}

/// Mean of the references' recorded `(min, max)`, used to restore the
/// intensity of a generated slice whose own range is unknown.
pub fn reference_range(references: &[DwiSlice]) -> Result<(f64, f64)> {
    if references.is_empty() {
        return Err(Error::Validation("no reference slices".into()));
    }
    let n = references.len() as f64;
    Ok((
        references.iter().map(|r| r.norm_min).sum::<f64>() / n,
        references.iter().map(|r| r.norm_max).sum::<f64>() / n,
    ))
}

/// Zeroes generated pixels outside the union of non-zero reference pixels.
pub fn mask_output(generated: &DwiSlice, references: &[DwiSlice]) -> Result<DwiSlice> {
    for r in references {
        generated.check_same_shape(r)?;
    }
    let mut out = generated.clone();
    for (i, px) in out.pixels.iter_mut().enumerate() {
        if references.iter().all(|r| r.pixels[i] == 0.0) {
            *px = 0.0;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn slice(p: Vec<f64>) -> DwiSlice {
        DwiSlice::new(1, p.len(), p).unwrap()
    }

    #[test]
    fn normalisation_examples() {
        let s = slice(vec![3.0, 5.0, 7.0]);
        let n = normalize_slice(&s);
        assert_eq!(n.pixels, vec![0.0, 0.5, 1.0]);
        assert_eq!((n.norm_min, n.norm_max), (3.0, 7.0));
        let back = denormalize_slice(&n);
        for (a, b) in back.pixels.iter().zip(&s.pixels) {
            assert!((a - b).abs() < 1e-12);
        }

        let c = normalize_slice(&slice(vec![5.0; 4]));
        assert_eq!(c.pixels, vec![0.0; 4]);
        assert_eq!((c.norm_min, c.norm_max), (5.0, 5.0));
        assert_eq!(denormalize_slice(&c).pixels, vec![5.0; 4]);

        let unit = slice(vec![0.0, 0.25, 1.0]);
        let u = normalize_slice(&unit);
        assert_eq!(u.pixels, unit.pixels);
        assert_eq!((u.norm_min, u.norm_max), (0.0, 1.0));
    }

    #[test]
    fn reference_range_is_the_mean() {
        let mut a = slice(vec![0.0]);
        let mut b = slice(vec![0.0]);
        (a.norm_min, a.norm_max) = (1.0, 3.0);
        (b.norm_min, b.norm_max) = (2.0, 7.0);
        assert_eq!(reference_range(&[a, b]).unwrap(), (1.5, 5.0));
        assert!(reference_range(&[]).is_err());
    }

    #[test]
    fn masking_examples() {
        let g = slice(vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(mask_output(&g, &[slice(vec![1.0; 4])]).unwrap(), g);
        assert_eq!(mask_output(&g, &[slice(vec![0.0; 4]), slice(vec![0.0; 4])]).unwrap().pixels, vec![0.0; 4]);
        let half = mask_output(&g, &[slice(vec![0.0, 0.0, 1.0, 0.0]), slice(vec![0.0, 0.0, 0.0, 2.0])]).unwrap();
        assert_eq!(half.pixels, vec![0.0, 0.0, 3.0, 4.0]);
        assert!(mask_output(&g, &[slice(vec![1.0; 3])]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_exact(p in proptest::collection::vec(-1e3f64..1e3, 2..40)) {
            let s = slice(p);
            let n = normalize_slice(&s);
            prop_assume!(n.norm_max > n.norm_min);
            prop_assert!(n.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
            let back = denormalize_slice(&n);
            for (a, b) in back.pixels.iter().zip(&s.pixels) {
                prop_assert!((a - b).abs() < 1e-12 * b.abs().max(1.0) * 1e3);
            }
        }
    }
}
