//! Completing a low-resolution acquisition with generated target volumes.

use log::{info, warn};

use crate::error::{Error, Result};
use crate::pipeline::normalize::mask_output;
use crate::qspace::{select_references_with, DistanceMetric, GradientScheme, Vec3};
use crate::registry::{SliceRequest, Upsampler};
use crate::rng::derive_seed;
use crate::volume::{DwiSet, DwiVolume};

pub const ACQUIRED_SOURCE: &str = "acquired";

/// Source tag of a volume produced by `method`.
pub fn generated_source(method: &str) -> String {
    format!("generated:{method}")
}

pub fn is_generated(v: &DwiVolume) -> bool {
    v.source.as_deref().is_some_and(|s| s.starts_with("generated:"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpsampleOptions {
    pub metric: DistanceMetric,
    /// Slices handed to the up-sampler per call.
    pub chunk: usize,
    /// Direction tolerance for recognising a target as already acquired.
    pub match_tolerance: f64,
}

impl Default for UpsampleOptions {
    fn default() -> Self {
        Self { metric: DistanceMetric::Geodesic, chunk: 32, match_tolerance: 1e-6 }
    }
}

#[derive(Clone, Debug)]
pub struct UpsampleResult {
    /// The low set followed by one volume per target not already acquired.
    pub set: DwiSet,
    /// Target indices that matched an acquired direction and were skipped.
    pub passed_through: Vec<usize>,
}

fn same_direction(a: &Vec3, b: &Vec3, tol: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

/// Seed of the sample for target `target` and axial slice `slice`.
pub fn sample_seed(seed: u64, target: usize, slice: usize) -> u64 {
    derive_seed(seed, &[target as u64, slice as u64])
}

/// Generates every target direction of `targets` from the nearest acquired
/// directions of `low`, slice by slice, masks each slice by the references
/// and appends the stacked volumes to the acquired ones.
pub fn upsample_volume(low: &DwiSet, targets: &GradientScheme, upsampler: &dyn Upsampler, seed: u64, options: &UpsampleOptions) -> Result<UpsampleResult> {
    let dims = low.dims().ok_or_else(|| Error::Validation("the low-resolution set is empty".into()))?;
    let weighted = low.weighted();
    if weighted.is_empty() {
        return Err(Error::Validation("the low-resolution set has no weighted volumes".into()));
    }
    let low_scheme = low.scheme()?.subset(&weighted);
    let r = upsampler.references();
    if r > weighted.len() {
        return Err(Error::Validation(format!("{r} references requested but only {} weighted volumes are acquired", weighted.len())));
    }
    let template = &low.volumes[weighted[0]];
    let mut passed_through = Vec::new();
    let mut jobs = Vec::new();
    for ti in 0..targets.len() {
        let dir = *targets.direction(ti);
        let b = targets.bvalue(ti);
        let acquired = low
            .volumes
            .iter()
            .any(|v| (v.bvalue - b).abs() <= 1e-6 * b.max(1.0) && (b <= 0.0 || same_direction(&v.direction, &dir, options.match_tolerance)));
        if acquired {
            warn!("target {ti} (b={b}, {dir:?}) is already acquired; keeping the acquired volume");
            passed_through.push(ti);
            continue;
        }
        if b <= 0.0 {
            return Err(Error::Validation(format!("target {ti} is unweighted but the low set has no b=0 volume")));
        }
        let refs = select_references_with(&low_scheme, &dir, r, options.metric)?;
        jobs.push((ti, dir, b, refs.into_iter().map(|i| weighted[i]).collect::<Vec<_>>()));
    }

    let nz = dims[2];
    let mut requests = Vec::with_capacity(jobs.len() * nz);
    for (ti, dir, _, refs) in &jobs {
        for z in 0..nz {
            requests.push(SliceRequest {
                target: *dir,
                directions: refs.iter().map(|&i| low.volumes[i].direction).collect(),
                references: refs.iter().map(|&i| low.volumes[i].slice(z)).collect(),
                seed: sample_seed(seed, *ti, z),
            });
        }
    }
    let mut slices = Vec::with_capacity(requests.len());
    let chunk = options.chunk.max(1);
    for (k, part) in requests.chunks(chunk).enumerate() {
        info!(
            "{}: slices {}..{} of {}",
            upsampler.method(),
            k * chunk,
            k * chunk + part.len(),
            requests.len()
        );
        let generated = upsampler.generate(part)?;
        if generated.len() != part.len() {
            return Err(Error::Shape(format!("{} slices generated for {} requests", generated.len(), part.len())));
        }
        for (g, q) in generated.iter().zip(part) {
            slices.push(mask_output(g, &q.references)?);
        }
    }

    let mut volumes = low.volumes.clone();
    for (j, (_, dir, b, _)) in jobs.iter().enumerate() {
        let v = DwiVolume::from_slices(&slices[j * nz..(j + 1) * nz], *dir, *b, template.voxel_size)?;
        volumes.push(v.with_source(generated_source(upsampler.method())));
    }
    Ok(UpsampleResult { set: DwiSet::new(volumes)?, passed_through })
}
