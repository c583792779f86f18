//! Dataset container format, subject-independent splitting, and a synthetic
//! ECG generator.
//!
//! A dataset on disk is a directory with a `manifest.json` and one raw
//! sample file per window: little-endian IEEE-754 32-bit values, row-major,
//! time axis outermost, no header. Round-trips are bit-exact.
//!
//! The synthetic generator builds class-separable pulse trains so the whole
//! training stack can be exercised — and its accuracy claims tested —
//! without any real recordings.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;

#[derive(Debug)]
pub enum DataError {
    Io { path: PathBuf, source: std::io::Error },
    Json { path: PathBuf, source: serde_json::Error },
    /// A sample file's byte length disagrees with the manifest dimensions.
    SampleDimensions { id: String, expected: usize, got: usize },
    NonFiniteSample { id: String },
    LabelOutOfRange { id: String, label: usize, classes: usize },
    EmptySubject { id: String },
    DuplicateId { id: String },
    /// Manifest entries and supplied samples disagree.
    ManifestMismatch { detail: String },
    TooFewSubjects { got: usize, need: usize },
    BadFractions { detail: String },
    BadGeneratorArgs { detail: String },
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Io { path, source } => write!(f, "{}: {source}", path.display()),
            Self::Json { path, source } => write!(f, "{}: {source}", path.display()),
            Self::SampleDimensions { id, expected, got } => {
                write!(f, "sample {id}: expected {expected} values, file holds {got}")
            }
            Self::NonFiniteSample { id } => write!(f, "sample {id}: non-finite values"),
            Self::LabelOutOfRange { id, label, classes } => {
                write!(f, "sample {id}: label {label} out of range for {classes} classes")
            }
            Self::EmptySubject { id } => write!(f, "sample {id}: empty subject id"),
            Self::DuplicateId { id } => write!(f, "duplicate sample id {id}"),
            Self::ManifestMismatch { detail } => write!(f, "manifest mismatch: {detail}"),
            Self::TooFewSubjects { got, need } => {
                write!(f, "{got} subjects cannot fill {need} partitions")
            }
            Self::BadFractions { detail } => write!(f, "bad split fractions: {detail}"),
            Self::BadGeneratorArgs { detail } => write!(f, "bad generator arguments: {detail}"),
        }
    }
}

impl std::error::Error for DataError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Self::Io { source, .. } => Some(source),
            Self::Json { source, .. } => Some(source),
            _ => None,
        }
    }
}

/// One manifest row: where a sample lives and what it is.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub subject: String,
    pub label: usize,
    pub file: String,
}

/// Dataset-level metadata plus the sample index. Serialized verbatim as
/// `manifest.json`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub classes: usize,
    pub channels: usize,
    pub timestamps: usize,
    pub sampling_rate_hz: u32,
    pub samples: Vec<ManifestEntry>,
}

/// A loaded window: `timestamps x channels` of standardized signal values.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub subject: String,
    pub label: usize,
    pub window: Tensor<f32>,
}

/// The three split partitions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Partition {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Train => write!(f, "train"),
            Self::Validation => write!(f, "validation"),
            Self::Test => write!(f, "test"),
        }
    }
}

/// Subject-level split: every subject is assigned to exactly one partition,
/// so no subject's samples can leak across partitions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitAssignment {
    assignments: BTreeMap<String, Partition>,
}

impl SplitAssignment {
    pub fn partition_of(&self, subject: &str) -> Option<Partition> {
        self.assignments.get(subject).copied()
    }

    pub fn subjects(&self) -> impl Iterator<Item = (&str, Partition)> {
        self.assignments.iter().map(|(s, &p)| (s.as_str(), p))
    }

    /// Subject counts as (train, validation, test).
    pub fn counts(&self) -> (usize, usize, usize) {
        let mut c = (0, 0, 0);
        for &p in self.assignments.values() {
            match p {
                Partition::Train => c.0 += 1,
                Partition::Validation => c.1 += 1,
                Partition::Test => c.2 += 1,
            }
        }
        c
    }

    /// Splits sample indices by their subject's partition, preserving order.
    pub fn split_indices(&self, entries: &[ManifestEntry]) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let mut out = (Vec::new(), Vec::new(), Vec::new());
        for (i, e) in entries.iter().enumerate() {
            match self.partition_of(&e.subject) {
                Some(Partition::Train) => out.0.push(i),
                Some(Partition::Validation) => out.1.push(i),
                Some(Partition::Test) => out.2.push(i),
                None => {}
            }
        }
        out
    }
}

/// Unique subjects in order of first appearance.
fn subjects_in_order(manifest: &DatasetManifest) -> Vec<String> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for e in &manifest.samples {
        if seen.insert(e.subject.clone(), ()).is_none() {
            out.push(e.subject.clone());
        }
    }
    out
}

/// Deterministic subject-independent split. Subjects are shuffled by `seed`
/// and partitioned at the cumulative-fraction boundaries
/// `floor(f_train * S)` and `floor((f_train + f_val) * S)` — the rounding
/// that sends 198 subjects to 118/40/40 under (0.6, 0.2, 0.2). If flooring
/// empties a partition, one subject moves over from the largest partition.
pub fn subject_split(
    manifest: &DatasetManifest,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<SplitAssignment, DataError> {
    let (ft, fv, fe) = fractions;
    if !(ft > 0.0 && fv > 0.0 && fe > 0.0) || (ft + fv + fe - 1.0).abs() > 1e-9 {
        return Err(DataError::BadFractions {
            detail: format!("({ft}, {fv}, {fe}) must be positive and sum to 1"),
        });
    }
    let mut subjects = subjects_in_order(manifest);
    let total = subjects.len();
    if total < 3 {
        return Err(DataError::TooFewSubjects { got: total, need: 3 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    subjects.shuffle(&mut rng);

    let b1 = (ft * total as f64).floor() as usize;
    let b2 = ((ft + fv) * total as f64).floor() as usize;
    let mut sizes = [b1, b2 - b1, total - b2];
    // Flooring can zero out a partition on small subject counts; borrow from
    // the largest until all three are populated.
    while sizes.iter().any(|&s| s == 0) {
        let empty = sizes.iter().position(|&s| s == 0).expect("checked");
        let largest = (0..3).max_by_key(|&i| sizes[i]).expect("non-empty");
        sizes[largest] -= 1;
        sizes[empty] += 1;
    }

    let mut assignments = BTreeMap::new();
    for (i, subject) in subjects.into_iter().enumerate() {
        let partition = if i < sizes[0] {
            Partition::Train
        } else if i < sizes[0] + sizes[1] {
            Partition::Validation
        } else {
            Partition::Test
        };
        assignments.insert(subject, partition);
    }
    Ok(SplitAssignment { assignments })
}

fn validate_consistency(
    manifest: &DatasetManifest,
    samples: &[Sample],
) -> Result<(), DataError> {
    if manifest.samples.len() != samples.len() {
        return Err(DataError::ManifestMismatch {
            detail: format!(
                "{} manifest entries vs {} samples",
                manifest.samples.len(),
                samples.len()
            ),
        });
    }
    let mut ids = BTreeMap::new();
    for (entry, sample) in manifest.samples.iter().zip(samples.iter()) {
        if entry.id != sample.id
            || entry.subject != sample.subject
            || entry.label != sample.label
        {
            return Err(DataError::ManifestMismatch {
                detail: format!("entry {} disagrees with sample {}", entry.id, sample.id),
            });
        }
        if ids.insert(entry.id.clone(), ()).is_some() {
            return Err(DataError::DuplicateId { id: entry.id.clone() });
        }
        if entry.subject.is_empty() {
            return Err(DataError::EmptySubject { id: entry.id.clone() });
        }
        if entry.label >= manifest.classes {
            return Err(DataError::LabelOutOfRange {
                id: entry.id.clone(),
                label: entry.label,
                classes: manifest.classes,
            });
        }
        let expected = manifest.timestamps * manifest.channels;
        if sample.window.shape() != [manifest.timestamps, manifest.channels] {
            return Err(DataError::SampleDimensions {
                id: entry.id.clone(),
                expected,
                got: sample.window.len(),
            });
        }
        if !sample.window.all_finite() {
            return Err(DataError::NonFiniteSample { id: entry.id.clone() });
        }
    }
    Ok(())
}

/// Writes a dataset directory: `manifest.json` plus one raw little-endian
/// f32 file per sample at the manifest's relative paths.
pub fn write_dataset(
    root: &Path,
    manifest: &DatasetManifest,
    samples: &[Sample],
) -> Result<(), DataError> {
    validate_consistency(manifest, samples)?;
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| DataError::Io { path, source }
    };
    fs::create_dir_all(root).map_err(io_err(root))?;

    let manifest_path = root.join("manifest.json");
    let json = serde_json::to_string_pretty(manifest).map_err(|source| DataError::Json {
        path: manifest_path.clone(),
        source,
    })?;
    fs::write(&manifest_path, json + "\n").map_err(io_err(&manifest_path))?;

    for (entry, sample) in manifest.samples.iter().zip(samples.iter()) {
        let path = root.join(&entry.file);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let mut file = fs::File::create(&path).map_err(io_err(&path))?;
        let mut bytes = Vec::with_capacity(4 * sample.window.len());
        for &v in sample.window.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        file.write_all(&bytes).map_err(io_err(&path))?;
    }
    Ok(())
}

/// Reads a dataset directory written by [`write_dataset`], validating every
/// invariant the manifest declares.
pub fn read_dataset(root: &Path) -> Result<(DatasetManifest, Vec<Sample>), DataError> {
    let manifest_path = root.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|source| DataError::Io {
        path: manifest_path.clone(),
        source,
    })?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|source| DataError::Json {
            path: manifest_path,
            source,
        })?;

    let expected = manifest.timestamps * manifest.channels;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let path = root.join(&entry.file);
        let mut bytes = Vec::new();
        fs::File::open(&path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|source| DataError::Io {
                path: path.clone(),
                source,
            })?;
        if bytes.len() != 4 * expected {
            return Err(DataError::SampleDimensions {
                id: entry.id.clone(),
                expected,
                got: bytes.len() / 4,
            });
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let window = Tensor::new(vec![manifest.timestamps, manifest.channels], values)
            .expect("length checked above");
        samples.push(Sample {
            id: entry.id.clone(),
            subject: entry.subject.clone(),
            label: entry.label,
            window,
        });
    }
    validate_consistency(&manifest, &samples)?;
    Ok((manifest, samples))
}

/// Knobs for [`generate_synthetic_with`]. The defaults are the published
/// generator; tests zero the noise or pin the subject factor to probe the
/// deterministic core.
#[derive(Clone, Debug)]
pub struct SyntheticOptions {
    pub classes: usize,
    pub subjects: usize,
    pub samples_per_subject: usize,
    pub timestamps: usize,
    pub channels: usize,
    /// Standard deviation of the additive Gaussian noise.
    pub noise_std: f64,
    /// Per-subject amplitude factor range (uniform).
    pub subject_factor: (f64, f64),
}

impl SyntheticOptions {
    pub fn new(
        classes: usize,
        subjects: usize,
        samples_per_subject: usize,
        timestamps: usize,
        channels: usize,
    ) -> Self {
        Self {
            classes,
            subjects,
            samples_per_subject,
            timestamps,
            channels,
            noise_std: 0.05,
            subject_factor: (0.8, 1.2),
        }
    }
}

/// Class-k morphology parameters: Gaussian-bump pulse trains whose width,
/// amplitude, and period all move with the class index.
fn class_shape(k: usize, timestamps: usize) -> (f64, f64, f64) {
    let width = 4.0 + 2.0 * k as f64;
    let amplitude = 1.0 + 0.3 * k as f64;
    let period = timestamps as f64 / 4.0 + 5.0 * k as f64;
    (width, amplitude, period)
}

/// Synthetic multichannel pulse-train dataset. Each class is a periodic
/// Gaussian-bump train (width `4 + 2k`, amplitude `1 + 0.3k`, period
/// `T/4 + 5k`); channels replay the same train with a one-sample-per-channel
/// phase lag; each subject scales amplitudes by a uniform factor; Gaussian
/// noise is added per sample. Labels cycle round-robin over the flat sample
/// index, so `S * per_subject` divisible by K gives exactly balanced
/// classes. Deterministic per seed.
pub fn generate_synthetic_with(
    opts: &SyntheticOptions,
    seed: u64,
) -> Result<(DatasetManifest, Vec<Sample>), DataError> {
    if opts.classes < 2 {
        return Err(DataError::BadGeneratorArgs {
            detail: format!("need at least 2 classes, got {}", opts.classes),
        });
    }
    if opts.subjects < 3 {
        return Err(DataError::BadGeneratorArgs {
            detail: format!("need at least 3 subjects, got {}", opts.subjects),
        });
    }
    if opts.samples_per_subject == 0 || opts.timestamps == 0 || opts.channels == 0 {
        return Err(DataError::BadGeneratorArgs {
            detail: "samples per subject, timestamps, and channels must be positive".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, opts.noise_std.max(f64::MIN_POSITIVE))
        .expect("std is positive and finite");

    let t = opts.timestamps;
    let c = opts.channels;
    let mut entries = Vec::new();
    let mut samples = Vec::new();
    for s in 0..opts.subjects {
        let subject = format!("subj{s:03}");
        let factor = rng.random_range(opts.subject_factor.0..=opts.subject_factor.1);
        for j in 0..opts.samples_per_subject {
            let flat = s * opts.samples_per_subject + j;
            let label = flat % opts.classes;
            let (width, amplitude, period) = class_shape(label, t);
            let sigma = width / 2.0;
            let mut values = vec![0.0f32; t * c];
            for ch in 0..c {
                let lag = ch as f64;
                // Enough pulse centers to cover the window plus spill-over
                // from both ends.
                let pulses = (t as f64 / period).ceil() as i64 + 2;
                for ti in 0..t {
                    let mut v = 0.0f64;
                    for m in -2..pulses {
                        let center = m as f64 * period + lag;
                        let d = (ti as f64 - center) / sigma;
                        v += amplitude * (-0.5 * d * d).exp();
                    }
                    v *= factor;
                    if opts.noise_std > 0.0 {
                        v += noise.sample(&mut rng);
                    }
                    values[ti * c + ch] = v as f32;
                }
            }
            let id = format!("s{s:03}_{j:03}");
            entries.push(ManifestEntry {
                id: id.clone(),
                subject: subject.clone(),
                label,
                file: format!("samples/{id}.f32"),
            });
            samples.push(Sample {
                id,
                subject: subject.clone(),
                label,
                window: Tensor::new(vec![t, c], values).expect("constructed length"),
            });
        }
    }
    let manifest = DatasetManifest {
        name: "synthetic".into(),
        classes: opts.classes,
        channels: c,
        timestamps: t,
        sampling_rate_hz: 250,
        samples: entries,
    };
    Ok((manifest, samples))
}

/// [`generate_synthetic_with`] at the default noise and subject-factor
/// settings.
pub fn generate_synthetic(
    classes: usize,
    subjects: usize,
    samples_per_subject: usize,
    timestamps: usize,
    channels: usize,
    seed: u64,
) -> Result<(DatasetManifest, Vec<Sample>), DataError> {
    generate_synthetic_with(
        &SyntheticOptions::new(classes, subjects, samples_per_subject, timestamps, channels),
        seed,
    )
}
