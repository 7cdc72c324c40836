//! Dataset manifests: which directions are acquired, which are targets, the
//! references of every target and the subject splits.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffusion::ConditioningSample;
use crate::error::{io_err, Error, Result};
use crate::pipeline::normalize::normalize_slice;
use crate::qspace::{select_references_with, subsample_even, DistanceMetric, GradientScheme, Vec3};
use crate::volume::{DwiSet, DwiVolume};

pub const MANIFEST_FORMAT: &str = "qup-manifest-v1";

/// Relative sizes of the train, validation and test splits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 8, val: 1, test: 1 }
    }
}

impl FromStr for SplitRatios {
    type Err = Error;

    /// Parses `train/val/test`, for example `8/1/1`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('/').collect();
        let parse = |p: &str| p.trim().parse::<usize>().map_err(|_| Error::Parse(format!("bad split ratio '{s}', expected train/val/test")));
        match parts.as_slice() {
            [a, b, c] => {
                let r = Self { train: parse(a)?, val: parse(b)?, test: parse(c)? };
                if r.train + r.val + r.test == 0 {
                    return Err(Error::Parse(format!("split ratio '{s}' is all zero")));
                }
                Ok(r)
            }
            _ => Err(Error::Parse(format!("bad split ratio '{s}', expected train/val/test"))),
        }
    }
}

impl SplitRatios {
    /// Split of each of `n` subjects in order. Validation and test take their
    /// rounded share from the end of the list and training keeps the rest.
    /// With at least three subjects each non-zero ratio gets one subject.
    pub fn assign(&self, n: usize) -> Vec<Split> {
        let total = (self.train + self.val + self.test) as f64;
        let share = |r: usize| {
            let c = (n as f64 * r as f64 / total).round() as usize;
            if r > 0 && n >= 3 {
                c.max(1)
            } else {
                c
            }
        };
        let n_test = share(self.test).min(n);
        let n_val = share(self.val).min(n - n_test);
        let n_train = n - n_test - n_val;
        let mut out = vec![Split::Train; n_train];
        out.extend(std::iter::repeat_n(Split::Val, n_val));
        out.extend(std::iter::repeat_n(Split::Test, n_test));
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Parse(format!("unknown split '{s}', expected train, val or test"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    /// Directory holding the subject's volumes and bvals/bvecs.
    pub path: PathBuf,
    pub split: Split,
}

/// One generation problem: a target volume, its references and a slice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    /// Volume index of the target in the full set.
    pub target: usize,
    pub direction: Vec3,
    /// Volume indices of the references, nearest first.
    pub references: Vec<usize>,
    pub slice: usize,
}

/// How the acquired directions split into a low set and targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionPlan {
    /// Volume indices of unweighted volumes; they are kept with the low set.
    pub b0: Vec<usize>,
    /// Volume indices of the retained weighted directions, ascending.
    pub low: Vec<usize>,
    /// Volume indices of the held-out weighted directions, ascending.
    pub targets: Vec<usize>,
    /// Per target, the volume indices of its references, nearest first.
    pub target_references: Vec<Vec<usize>>,
}

/// Splits the weighted directions of `scheme` into `k_low` evenly spread
/// directions and targets, and picks `r` references per target.
pub fn plan_directions(scheme: &GradientScheme, k_low: usize, r: usize, seed: u64, metric: DistanceMetric) -> Result<DirectionPlan> {
    let weighted = scheme.weighted_indices();
    if weighted.is_empty() {
        return Err(Error::Validation("scheme has no diffusion-weighted directions".into()));
    }
    let b = scheme.bvalue(weighted[0]);
    if let Some(&i) = weighted.iter().find(|&&i| (scheme.bvalue(i) - b).abs() > 1e-6 * b.max(1.0)) {
        return Err(Error::Validation(format!(
            "multi-shell schemes are not supported: b={} at index {i} differs from b={b}",
            scheme.bvalue(i)
        )));
    }
    if k_low >= weighted.len() {
        return Err(Error::Validation(format!(
            "k_low={k_low} must be smaller than the {} weighted directions",
            weighted.len()
        )));
    }
    if r == 0 || r > k_low {
        return Err(Error::Validation(format!("references R={r} must be in 1..=k_low={k_low}")));
    }
    let shell = scheme.subset(&weighted);
    let sub = subsample_even(&shell, k_low, seed)?;
    let low: Vec<usize> = sub.selected.iter().map(|&i| weighted[i]).collect();
    let targets: Vec<usize> = sub.complement.iter().map(|&i| weighted[i]).collect();
    let target_references = targets
        .iter()
        .map(|&t| {
            let local = select_references_with(&sub.scheme, scheme.direction(t), r, metric)?;
            Ok(local.into_iter().map(|i| low[i]).collect())
        })
        .collect::<Result<_>>()?;
    Ok(DirectionPlan { b0: scheme.unweighted_indices(), low, targets, target_references })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildOptions {
    pub k_low: usize,
    pub references: usize,
    pub seed: u64,
    #[serde(default)]
    pub metric: DistanceMetric,
    #[serde(default)]
    pub split: SplitRatios,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub options: BuildOptions,
    /// The full acquisition shared by every subject.
    pub scheme: GradientScheme,
    pub dims: [usize; 3],
    pub plan: DirectionPlan,
    pub subjects: Vec<SubjectEntry>,
    /// One record per target and axial slice, shared by every subject.
    pub records: Vec<SampleRecord>,
}

/// Builds the manifest of a single in-memory set.
pub fn build_dataset(set: &DwiSet, k_low: usize, r: usize, seed: u64) -> Result<DatasetManifest> {
    let options = BuildOptions { k_low, references: r, seed, metric: DistanceMetric::default(), split: SplitRatios::default() };
    let dims = set.dims().ok_or_else(|| Error::Validation("empty DWI set".into()))?;
    DatasetManifest::new(&set.scheme()?, dims, Vec::new(), options)
}

impl DatasetManifest {
    pub fn new(scheme: &GradientScheme, dims: [usize; 3], subjects: Vec<SubjectEntry>, options: BuildOptions) -> Result<Self> {
        let plan = plan_directions(scheme, options.k_low, options.references, options.seed, options.metric)?;
        let mut records = Vec::with_capacity(plan.targets.len() * dims[2]);
        for (t, refs) in plan.targets.iter().zip(&plan.target_references) {
            for slice in 0..dims[2] {
                records.push(SampleRecord { target: *t, direction: *scheme.direction(*t), references: refs.clone(), slice });
            }
        }
        Ok(Self { format: MANIFEST_FORMAT.into(), options, scheme: scheme.clone(), dims, plan, subjects, records })
    }

    /// Builds a manifest for `dir`, which is either one subject (it holds a
    /// `bvals` file) or a directory of subject directories.
    pub fn build_from_dir(dir: &Path, options: BuildOptions) -> Result<Self> {
        let paths = subject_dirs(dir)?;
        let mut scheme: Option<(GradientScheme, [usize; 3])> = None;
        let mut ids = Vec::with_capacity(paths.len());
        for p in &paths {
            let set = DwiSet::read(p)?;
            let s = set.scheme()?;
            let dims = set.dims().ok_or_else(|| Error::Validation(format!("{}: no volumes", p.display())))?;
            match &scheme {
                None => scheme = Some((s, dims)),
                Some((first, fd)) => {
                    if !same_scheme(first, &s) || *fd != dims {
                        return Err(Error::Validation(format!(
                            "{}: acquisition differs from the first subject",
                            p.display()
                        )));
                    }
                }
            }
            ids.push(p.file_name().map_or_else(|| "subject".to_string(), |n| n.to_string_lossy().into_owned()));
        }
        let (scheme, dims) = scheme.expect("subject_dirs returns at least one directory");
        let splits = options.split.assign(paths.len());
        let subjects = ids
            .into_iter()
            .zip(paths)
            .zip(splits)
            .map(|((id, path), split)| SubjectEntry { id, path, split })
            .collect();
        Self::new(&scheme, dims, subjects, options)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let m: Self = serde_json::from_str(&text)?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::Validation(format!("{}: unknown manifest format '{}'", path.display(), m.format)));
        }
        Ok(m)
    }

    pub fn references(&self) -> usize {
        self.options.references
    }

    pub fn subjects_in(&self, split: Split) -> impl Iterator<Item = &SubjectEntry> {
        self.subjects.iter().filter(move |s| s.split == split)
    }

    /// The low-resolution part of a full set: b0 volumes then low directions.
    pub fn low_set(&self, full: &DwiSet) -> Result<DwiSet> {
        self.check_set(full)?;
        let idx: Vec<usize> = self.plan.b0.iter().chain(&self.plan.low).copied().collect();
        DwiSet::new(idx.iter().map(|&i| full.volumes[i].clone()).collect())
    }

    /// The held-out target directions of the scheme.
    pub fn target_scheme(&self) -> GradientScheme {
        self.scheme.subset(&self.plan.targets)
    }

    pub fn check_set(&self, set: &DwiSet) -> Result<()> {
        if !same_scheme(&self.scheme, &set.scheme()?) || set.dims() != Some(self.dims) {
            return Err(Error::Validation("DWI set does not match the manifest acquisition".into()));
        }
        Ok(())
    }

    /// Normalised conditioning samples of one set.
    pub fn samples_of(&self, set: &DwiSet) -> Result<Vec<ConditioningSample>> {
        self.check_set(set)?;
        self.records.iter().map(|rec| sample_from(set, rec)).collect()
    }

    /// Normalised conditioning samples of every subject in a split.
    pub fn load_split(&self, split: Split) -> Result<Vec<ConditioningSample>> {
        let mut out = Vec::new();
        for s in self.subjects_in(split) {
            out.extend(self.samples_of(&DwiSet::read(&s.path)?)?);
        }
        Ok(out)
    }
}

fn sample_from(set: &DwiSet, rec: &SampleRecord) -> Result<ConditioningSample> {
    let slice = |v: &DwiVolume| normalize_slice(&v.slice(rec.slice));
    let target = slice(&set.volumes[rec.target]);
    let references = rec.references.iter().map(|&i| slice(&set.volumes[i])).collect();
    let mut bmatrix = vec![rec.direction];
    bmatrix.extend(rec.references.iter().map(|&i| set.volumes[i].direction));
    ConditioningSample::new(target, references, bmatrix)
}

fn same_scheme(a: &GradientScheme, b: &GradientScheme) -> bool {
    a.len() == b.len()
        && a.bvalues().iter().zip(b.bvalues()).all(|(x, y)| (x - y).abs() <= 1e-6 * x.abs().max(1.0))
        && a.directions().iter().zip(b.directions()).all(|(x, y)| x.iter().zip(y).all(|(p, q)| (p - q).abs() <= 1e-6))
}

/// Subject directories under `dir`, sorted by name, or `dir` itself when it
/// holds a single subject.
pub fn subject_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join("bvals").is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let p = entry.map_err(io_err(dir))?.path();
        if p.is_dir() && p.join("bvals").is_file() {
            out.push(p);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::Validation(format!("{}: no DWI subjects found (expected bvals)", dir.display())));
    }
    Ok(out)
}
