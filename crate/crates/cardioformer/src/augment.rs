//! Training-time augmentation pool: exactly one technique, selected
//! uniformly, is applied to each raw sample window per forward pass.
//! Evaluation applies none.
//!
//! Augmentations act on the raw `T x C` window before patching. Masks and
//! noise are drawn from the caller's random stream, so per-sample derived
//! seeds keep multi-sample batches deterministic.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugmentationKind {
    None,
    Shuffle,
    TemporalMask,
    FreqMask,
    Jitter,
    Scale,
    Drop,
}

impl AugmentationKind {
    fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Shuffle => "shuffle",
            Self::TemporalMask => "temporal_mask",
            Self::FreqMask => "freq_mask",
            Self::Jitter => "jitter",
            Self::Scale => "scale",
            Self::Drop => "drop",
        }
    }
}

/// One augmentation technique plus its degree. The parameter is a
/// probability or ratio in [0,1] for shuffle/temporal_mask/freq_mask/drop
/// and a non-negative spread for jitter/scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentationSpec {
    kind: AugmentationKind,
    parameter: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum AugmentError {
    UnknownKind { text: String },
    BadParameter { kind: &'static str, detail: String },
    EmptyPool,
}

impl fmt::Display for AugmentError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::UnknownKind { text } => write!(f, "unknown augmentation {text:?}"),
            Self::BadParameter { kind, detail } => write!(f, "{kind}: {detail}"),
            Self::EmptyPool => write!(f, "augmentation pool is empty"),
        }
    }
}

impl std::error::Error for AugmentError {}

impl AugmentationSpec {
    pub fn new(kind: AugmentationKind, parameter: f64) -> Result<Self, AugmentError> {
        let bad = |detail: String| AugmentError::BadParameter {
            kind: kind.name(),
            detail,
        };
        if !parameter.is_finite() || parameter < 0.0 {
            return Err(bad(format!("parameter {parameter} must be finite and >= 0")));
        }
        match kind {
            AugmentationKind::Shuffle
            | AugmentationKind::TemporalMask
            | AugmentationKind::FreqMask
            | AugmentationKind::Drop => {
                if parameter > 1.0 {
                    return Err(bad(format!("parameter {parameter} must lie in [0, 1]")));
                }
            }
            AugmentationKind::None | AugmentationKind::Jitter | AugmentationKind::Scale => {}
        }
        Ok(Self { kind, parameter })
    }

    pub fn none() -> Self {
        Self {
            kind: AugmentationKind::None,
            parameter: 0.0,
        }
    }

    pub fn kind(&self) -> AugmentationKind {
        self.kind
    }

    pub fn parameter(&self) -> f64 {
        self.parameter
    }
}

impl fmt::Display for AugmentationSpec {
    fmt_spec_display!();
}

/// Parses `<name><decimal>` (e.g. `drop0.5`, `jitter0.2`) or the bare word
/// `none`.
pub fn parse_spec(text: &str) -> Result<AugmentationSpec, AugmentError> {
    if text == "none" {
        return Ok(AugmentationSpec::none());
    }
    let split = text
        .find(|c: char| c.is_ascii_digit() || c == '.')
        .ok_or_else(|| AugmentError::UnknownKind { text: text.into() })?;
    let (name, number) = text.split_at(split);
    let kind = match name {
        "shuffle" => AugmentationKind::Shuffle,
        "temporal_mask" => AugmentationKind::TemporalMask,
        "freq_mask" => AugmentationKind::FreqMask,
        "jitter" => AugmentationKind::Jitter,
        "scale" => AugmentationKind::Scale,
        "drop" => AugmentationKind::Drop,
        _ => return Err(AugmentError::UnknownKind { text: text.into() }),
    };
    let parameter: f64 = number.parse().map_err(|_| AugmentError::BadParameter {
        kind: kind.name(),
        detail: format!("unparsable degree {number:?}"),
    })?;
    AugmentationSpec::new(kind, parameter)
}

/// Round half away from zero, the convention for mask counts.
fn round_count(x: f64) -> usize {
    x.round() as usize
}

/// Applies one augmentation to a `T x C` window, returning a fresh window of
/// the same shape.
pub fn apply<R: Rng + ?Sized>(
    window: &Tensor<f32>,
    spec: &AugmentationSpec,
    rng: &mut R,
) -> Tensor<f32> {
    debug_assert_eq!(window.rank(), 2, "augmentation expects a T x C window");
    let t = window.shape()[0];
    let c = window.shape()[1];
    let src = window.data();
    let p = spec.parameter;
    match spec.kind {
        AugmentationKind::None => window.clone(),
        AugmentationKind::Shuffle => {
            if rng.random::<f64>() >= p {
                return window.clone();
            }
            let mut perm: Vec<usize> = (0..c).collect();
            use rand::seq::SliceRandom;
            perm.shuffle(rng);
            let mut out = vec![0.0f32; t * c];
            for ti in 0..t {
                for (dst_c, &src_c) in perm.iter().enumerate() {
                    out[ti * c + dst_c] = src[ti * c + src_c];
                }
            }
            Tensor::new(vec![t, c], out).expect("same volume")
        }
        AugmentationKind::TemporalMask => {
            let count = round_count(p * t as f64).min(t);
            let rows = rand::seq::index::sample(rng, t, count);
            let mut out = src.to_vec();
            for row in rows {
                out[row * c..(row + 1) * c].fill(0.0);
            }
            Tensor::new(vec![t, c], out).expect("same volume")
        }
        AugmentationKind::FreqMask => {
            // Half-spectrum bins; zeroing a bin and its conjugate mirror
            // keeps the inverse transform real.
            let bins = t / 2 + 1;
            let count = round_count(p * bins as f64).min(bins);
            let mut planner = FftPlanner::<f32>::new();
            let fft = planner.plan_fft_forward(t);
            let ifft = planner.plan_fft_inverse(t);
            let mut out = vec![0.0f32; t * c];
            for ch in 0..c {
                let mut buf: Vec<Complex<f32>> = (0..t)
                    .map(|ti| Complex::new(src[ti * c + ch], 0.0))
                    .collect();
                fft.process(&mut buf);
                for bin in rand::seq::index::sample(rng, bins, count) {
                    buf[bin] = Complex::new(0.0, 0.0);
                    if bin > 0 && bin < t - bin {
                        buf[t - bin] = Complex::new(0.0, 0.0);
                    }
                }
                ifft.process(&mut buf);
                for ti in 0..t {
                    out[ti * c + ch] = buf[ti].re / t as f32;
                }
            }
            Tensor::new(vec![t, c], out).expect("same volume")
        }
        AugmentationKind::Jitter => {
            if p == 0.0 {
                return window.clone();
            }
            let noise = Normal::new(0.0, p).expect("positive finite std");
            let out = src
                .iter()
                .map(|&v| v + noise.sample(rng) as f32)
                .collect();
            Tensor::new(vec![t, c], out).expect("same volume")
        }
        AugmentationKind::Scale => {
            let factors: Vec<f32> = (0..c)
                .map(|_| rng.random_range(1.0 - p..=1.0 + p) as f32)
                .collect();
            let mut out = vec![0.0f32; t * c];
            for ti in 0..t {
                for ch in 0..c {
                    out[ti * c + ch] = src[ti * c + ch] * factors[ch];
                }
            }
            Tensor::new(vec![t, c], out).expect("same volume")
        }
        AugmentationKind::Drop => {
            let out = src
                .iter()
                .map(|&v| if rng.random::<f64>() < p { 0.0 } else { v })
                .collect();
            Tensor::new(vec![t, c], out).expect("same volume")
        }
    }
}

/// Uniformly selects one spec from the pool and applies it (training), or
/// returns the window untouched (evaluation).
pub fn select_and_apply<R: Rng + ?Sized>(
    window: &Tensor<f32>,
    pool: &[AugmentationSpec],
    rng: &mut R,
    training: bool,
) -> Result<Tensor<f32>, AugmentError> {
    if pool.is_empty() {
        return Err(AugmentError::EmptyPool);
    }
    if !training {
        return Ok(window.clone());
    }
    let choice = rng.random_range(0..pool.len());
    Ok(apply(window, &pool[choice], rng))
}
