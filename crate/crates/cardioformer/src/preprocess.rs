//! Signal preprocessing: resampling, per-recording standardization, R-peak
//! heartbeat segmentation with zero-padding, and fixed-window segmentation.

use std::fmt;

use crate::numerics::Tensor;

/// Moving-window width (samples at 250 Hz) for the energy integration stage
/// of the R-peak detector.
const INTEGRATION_WINDOW: usize = 30;
/// Minimum gap between two detected R-peaks.
const REFRACTORY: usize = 50;
/// Centered window for the rolling maximum that sets the detection
/// threshold (about one heartbeat at 250 Hz).
const ROLLING_MAX_WINDOW: usize = 250;
/// Fraction of the rolling maximum a sample's energy must exceed.
const THRESHOLD_FRACTION: f32 = 0.5;

#[derive(Debug, PartialEq)]
pub enum PreprocessError {
    BadRecording { detail: String },
    /// Source rate is not an integer multiple of the target rate.
    NonIntegerFactor { from_hz: u32, to_hz: u32 },
    /// The R-peak detector found nothing.
    NoHeartbeats,
    BadPeaks { detail: String },
    BadWindow { detail: String },
}

impl fmt::Display for PreprocessError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::BadRecording { detail } => write!(f, "bad recording: {detail}"),
            Self::NonIntegerFactor { from_hz, to_hz } => {
                write!(f, "{from_hz} Hz is not an integer multiple of {to_hz} Hz")
            }
            Self::NoHeartbeats => write!(f, "no heartbeats detected"),
            Self::BadPeaks { detail } => write!(f, "bad peak list: {detail}"),
            Self::BadWindow { detail } => write!(f, "bad window: {detail}"),
        }
    }
}

impl std::error::Error for PreprocessError {}

/// An unsegmented multichannel recording.
#[derive(Clone, Debug)]
pub struct RawRecording {
    signal: Tensor<f32>,
    sampling_rate_hz: u32,
    pub subject: String,
    pub label: usize,
}

impl RawRecording {
    /// `signal` is `T x C` with the time axis outermost.
    pub fn new(
        signal: Tensor<f32>,
        sampling_rate_hz: u32,
        subject: String,
        label: usize,
    ) -> Result<Self, PreprocessError> {
        if signal.rank() != 2 {
            return Err(PreprocessError::BadRecording {
                detail: format!("expected a T x C signal, got shape {:?}", signal.shape()),
            });
        }
        if signal.shape()[0] < 2 || signal.shape()[1] == 0 {
            return Err(PreprocessError::BadRecording {
                detail: format!("signal of shape {:?} is too small", signal.shape()),
            });
        }
        if sampling_rate_hz == 0 {
            return Err(PreprocessError::BadRecording {
                detail: "sampling rate must be positive".into(),
            });
        }
        if !signal.all_finite() {
            return Err(PreprocessError::BadRecording {
                detail: "signal contains non-finite values".into(),
            });
        }
        Ok(Self {
            signal,
            sampling_rate_hz,
            subject,
            label,
        })
    }

    pub fn signal(&self) -> &Tensor<f32> {
        &self.signal
    }

    pub fn sampling_rate_hz(&self) -> u32 {
        self.sampling_rate_hz
    }

    pub fn len(&self) -> usize {
        self.signal.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.signal.shape()[1]
    }
}

/// Integer-factor downsampling: each channel is low-pass filtered by a
/// moving average of width equal to the decimation factor, then decimated.
/// Output length is `floor(T / factor)`; every output sample is the mean of
/// one complete input block.
pub fn resample(rec: &RawRecording, target_rate_hz: u32) -> Result<RawRecording, PreprocessError> {
    if target_rate_hz == 0 || rec.sampling_rate_hz % target_rate_hz != 0 {
        return Err(PreprocessError::NonIntegerFactor {
            from_hz: rec.sampling_rate_hz,
            to_hz: target_rate_hz,
        });
    }
    let factor = (rec.sampling_rate_hz / target_rate_hz) as usize;
    if factor == 1 {
        return Ok(rec.clone());
    }
    let t_in = rec.len();
    let c = rec.channels();
    let t_out = t_in / factor;
    let src = rec.signal.data();
    let mut out = vec![0.0f32; t_out * c];
    for ti in 0..t_out {
        for ch in 0..c {
            let mut acc = 0.0f32;
            for k in 0..factor {
                acc += src[(ti * factor + k) * c + ch];
            }
            out[ti * c + ch] = acc / factor as f32;
        }
    }
    RawRecording::new(
        Tensor::new(vec![t_out, c], out).expect("constructed length"),
        target_rate_hz,
        rec.subject.clone(),
        rec.label,
    )
}

/// Per-recording standardization: each channel is shifted to zero mean and
/// scaled to unit population standard deviation. A zero-variance channel is
/// zeroed out instead; the returned list names those channels so the caller
/// can warn.
pub fn standardize(rec: &RawRecording) -> (RawRecording, Vec<usize>) {
    let t = rec.len();
    let c = rec.channels();
    let src = rec.signal.data();
    let mut out = vec![0.0f32; t * c];
    let mut zeroed = Vec::new();
    for ch in 0..c {
        let mut mean = 0.0f64;
        for ti in 0..t {
            mean += src[ti * c + ch] as f64;
        }
        mean /= t as f64;
        let mut var = 0.0f64;
        for ti in 0..t {
            let d = src[ti * c + ch] as f64 - mean;
            var += d * d;
        }
        var /= t as f64;
        if var == 0.0 {
            zeroed.push(ch);
            continue; // already zero-initialized
        }
        let inv_std = 1.0 / var.sqrt();
        for ti in 0..t {
            out[ti * c + ch] = ((src[ti * c + ch] as f64 - mean) * inv_std) as f32;
        }
    }
    let standardized = RawRecording::new(
        Tensor::new(vec![t, c], out).expect("constructed length"),
        rec.sampling_rate_hz,
        rec.subject.clone(),
        rec.label,
    )
    .expect("same dimensions as a valid recording");
    (standardized, zeroed)
}

/// Energy-based R-peak detector over the channel-averaged signal:
/// differentiate, square, integrate over a centered 30-sample window,
/// threshold at half the centered 250-sample rolling maximum, then take the
/// maximum of the averaged signal inside each above-threshold region and
/// enforce a 50-sample refractory gap (first peak kept). The window
/// constants assume a standardized 250 Hz recording.
pub fn detect_r_peaks(rec: &RawRecording) -> Result<Vec<usize>, PreprocessError> {
    let t = rec.len();
    let c = rec.channels();
    let src = rec.signal.data();
    let averaged: Vec<f32> = (0..t)
        .map(|ti| (0..c).map(|ch| src[ti * c + ch]).sum::<f32>() / c as f32)
        .collect();

    // Differentiate and square.
    let mut energy = vec![0.0f32; t];
    for ti in 1..t {
        let d = averaged[ti] - averaged[ti - 1];
        energy[ti] = d * d;
    }

    // Centered moving-window integration.
    let half_back = INTEGRATION_WINDOW / 2;
    let half_fwd = INTEGRATION_WINDOW - half_back - 1;
    let mut integrated = vec![0.0f32; t];
    for ti in 0..t {
        let lo = ti.saturating_sub(half_back);
        let hi = (ti + half_fwd + 1).min(t);
        let sum: f32 = energy[lo..hi].iter().sum();
        integrated[ti] = sum / INTEGRATION_WINDOW as f32;
    }

    // Centered rolling maximum sets a local threshold.
    let half_max = ROLLING_MAX_WINDOW / 2;
    let mut above = vec![false; t];
    for ti in 0..t {
        let lo = ti.saturating_sub(half_max);
        let hi = (ti + half_max + 1).min(t);
        let local_max = integrated[lo..hi].iter().fold(0.0f32, |a, &b| a.max(b));
        above[ti] = integrated[ti] > THRESHOLD_FRACTION * local_max && local_max > 0.0;
    }

    // One candidate per contiguous above-threshold region: the argmax of the
    // averaged signal inside it.
    let mut peaks = Vec::new();
    let mut ti = 0;
    while ti < t {
        if !above[ti] {
            ti += 1;
            continue;
        }
        let start = ti;
        while ti < t && above[ti] {
            ti += 1;
        }
        let mut best = start;
        for i in start..ti {
            if averaged[i] > averaged[best] {
                best = i;
            }
        }
        if let Some(&last) = peaks.last() {
            if best - last < REFRACTORY {
                continue;
            }
        }
        peaks.push(best);
    }
    if peaks.is_empty() {
        return Err(PreprocessError::NoHeartbeats);
    }
    Ok(peaks)
}

/// Cuts one window per R-peak: each beat spans midpoint-to-midpoint between
/// adjacent peaks (record boundaries at the ends) and is copied into a
/// zero-initialized `pad_to x C` window with its R-peak at the center. Beats
/// longer than `pad_to` are dropped as outliers; the second return value
/// counts them. A beat whose span is asymmetric enough to overrun the
/// window is clipped — the peak stays centered.
pub fn segment_heartbeats(
    rec: &RawRecording,
    peaks: &[usize],
    pad_to: usize,
) -> Result<(Vec<Tensor<f32>>, usize), PreprocessError> {
    if pad_to == 0 {
        return Err(PreprocessError::BadWindow {
            detail: "pad_to must be positive".into(),
        });
    }
    let t = rec.len();
    if peaks.is_empty() {
        return Err(PreprocessError::BadPeaks {
            detail: "empty peak list".into(),
        });
    }
    for (i, &p) in peaks.iter().enumerate() {
        if p >= t {
            return Err(PreprocessError::BadPeaks {
                detail: format!("peak {p} outside recording of length {t}"),
            });
        }
        if i > 0 && p <= peaks[i - 1] {
            return Err(PreprocessError::BadPeaks {
                detail: "peaks must be strictly increasing".into(),
            });
        }
    }

    let c = rec.channels();
    let src = rec.signal.data();
    let center = pad_to / 2;
    let mut windows = Vec::new();
    let mut discarded = 0usize;
    for (i, &peak) in peaks.iter().enumerate() {
        let lo = if i == 0 { 0 } else { (peaks[i - 1] + peak) / 2 };
        let hi = if i + 1 == peaks.len() {
            t
        } else {
            (peak + peaks[i + 1]) / 2
        };
        if hi - lo > pad_to {
            discarded += 1;
            continue;
        }
        let mut window = vec![0.0f32; pad_to * c];
        for src_t in lo..hi {
            // dst - center == src_t - peak keeps the R-peak at the center.
            let dst = match (center + src_t).checked_sub(peak) {
                Some(d) if d < pad_to => d,
                _ => continue,
            };
            window[dst * c..(dst + 1) * c].copy_from_slice(&src[src_t * c..(src_t + 1) * c]);
        }
        windows.push(Tensor::new(vec![pad_to, c], window).expect("constructed length"));
    }
    Ok((windows, discarded))
}

/// Consecutive non-overlapping windows of exactly `window_len` samples; the
/// trailing remainder is discarded. A recording shorter than one window
/// yields no samples.
pub fn segment_fixed_windows(
    rec: &RawRecording,
    window_len: usize,
) -> Result<Vec<Tensor<f32>>, PreprocessError> {
    if window_len == 0 {
        return Err(PreprocessError::BadWindow {
            detail: "window length must be positive".into(),
        });
    }
    let t = rec.len();
    let c = rec.channels();
    let src = rec.signal.data();
    let count = t / window_len;
    let mut out = Vec::with_capacity(count);
    for w in 0..count {
        let start = w * window_len * c;
        out.push(
            Tensor::new(
                vec![window_len, c],
                src[start..start + window_len * c].to_vec(),
            )
            .expect("constructed length"),
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recording(t: usize, c: usize, f: impl Fn(usize, usize) -> f32) -> RawRecording {
        let data = (0..t * c).map(|i| f(i / c, i % c)).collect();
        RawRecording::new(Tensor::new(vec![t, c], data).unwrap(), 250, "sub0".into(), 0).unwrap()
    }

    fn recording_at(rate: u32, t: usize, f: impl Fn(usize) -> f32) -> RawRecording {
        let data = (0..t).map(f).collect();
        RawRecording::new(Tensor::new(vec![t, 1], data).unwrap(), rate, "sub0".into(), 0).unwrap()
    }

    #[test]
    fn recording_validation() {
        assert!(RawRecording::new(Tensor::zeros(vec![2, 1]), 250, "s".into(), 0).is_ok());
        assert!(RawRecording::new(Tensor::zeros(vec![1, 1]), 250, "s".into(), 0).is_err());
        assert!(RawRecording::new(Tensor::zeros(vec![4]), 250, "s".into(), 0).is_err());
        assert!(RawRecording::new(Tensor::zeros(vec![4, 1]), 0, "s".into(), 0).is_err());
    }

    #[test]
    fn resample_by_four() {
        let rec = recording_at(1000, 4000, |t| t as f32);
        let out = resample(&rec, 250).unwrap();
        assert_eq!(out.len(), 1000);
        assert_eq!(out.sampling_rate_hz(), 250);
        assert_eq!(out.channels(), 1);
        // First block: mean of 0,1,2,3.
        assert_eq!(out.signal().data()[0], 1.5);
    }

    #[test]
    fn resample_preserves_constants() {
        let rec = recording_at(1000, 400, |_| 3.25);
        let out = resample(&rec, 250).unwrap();
        assert!(out.signal().data().iter().all(|&v| v == 3.25));
    }

    #[test]
    fn resample_kills_nyquist_alternation() {
        let rec = recording_at(1000, 400, |t| if t % 2 == 0 { 1.0 } else { -1.0 });
        let out = resample(&rec, 250).unwrap();
        let amp = out.signal().data().iter().fold(0.0f32, |a, &b| a.max(b.abs()));
        assert!(amp < 0.01, "residual amplitude {amp}");
    }

    #[test]
    fn resample_rejects_non_integer_factor() {
        let rec = recording_at(1000, 100, |t| t as f32);
        assert_eq!(
            resample(&rec, 300).unwrap_err(),
            PreprocessError::NonIntegerFactor { from_hz: 1000, to_hz: 300 }
        );
    }

    #[test]
    fn standardize_closed_form() {
        let rec = recording_at(250, 3, |t| (t + 1) as f32);
        let (out, zeroed) = standardize(&rec);
        assert!(zeroed.is_empty());
        let v = out.signal().data();
        assert!((v[0] + 1.2247449).abs() < 1e-5);
        assert!(v[1].abs() < 1e-6);
        assert!((v[2] - 1.2247449).abs() < 1e-5);
    }

    #[test]
    fn standardize_is_idempotent() {
        let rec = recording(100, 2, |t, c| ((t * 7 + c * 3) % 13) as f32 - 5.0);
        let (once, _) = standardize(&rec);
        let (twice, _) = standardize(&once);
        let diff = once.signal().max_abs_diff(twice.signal()).unwrap();
        assert!(diff < 1e-6, "idempotence violated by {diff}");
    }

    #[test]
    fn standardize_zeroes_constant_channel_with_warning() {
        let rec = recording(50, 2, |t, c| if c == 0 { 2.5 } else { t as f32 });
        let (out, zeroed) = standardize(&rec);
        assert_eq!(zeroed, vec![0]);
        for ti in 0..50 {
            assert_eq!(out.signal().data()[ti * 2], 0.0);
        }
    }

    #[test]
    fn detects_impulse_train() {
        let rec = recording(1000, 1, |t, _| {
            if t >= 50 && (t - 50) % 100 == 0 {
                1.0
            } else {
                0.0
            }
        });
        let peaks = detect_r_peaks(&rec).unwrap();
        let expected: Vec<usize> = (0..10).map(|i| 50 + 100 * i).collect();
        assert_eq!(peaks.len(), expected.len(), "peaks {peaks:?}");
        for (&got, &want) in peaks.iter().zip(expected.iter()) {
            assert!(
                got.abs_diff(want) <= 2,
                "peak {got} too far from expected {want}"
            );
        }
    }

    #[test]
    fn flat_signal_has_no_heartbeats() {
        let rec = recording(500, 2, |_, _| 0.0);
        assert_eq!(detect_r_peaks(&rec).unwrap_err(), PreprocessError::NoHeartbeats);
        assert!(PreprocessError::NoHeartbeats.to_string().contains("no heartbeats"));
    }

    #[test]
    fn refractory_suppresses_close_pulses() {
        let rec = recording(400, 1, |t, _| {
            if t == 100 || t == 120 {
                1.0
            } else {
                0.0
            }
        });
        let peaks = detect_r_peaks(&rec).unwrap();
        assert_eq!(peaks.len(), 1, "peaks {peaks:?}");
    }

    #[test]
    fn peaks_are_strictly_increasing() {
        let rec = recording(1500, 2, |t, c| {
            let phase = (t as f32 + c as f32) / 120.0 * std::f32::consts::TAU;
            phase.sin().powi(7)
        });
        let peaks = detect_r_peaks(&rec).unwrap();
        assert!(peaks.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn heartbeat_windows_are_centered() {
        let rec = recording(400, 2, |t, _| t as f32);
        let peaks = vec![100, 200, 300];
        let (windows, discarded) = segment_heartbeats(&rec, &peaks, 300).unwrap();
        assert_eq!(windows.len(), 3);
        assert_eq!(discarded, 0);
        for (w, &peak) in windows.iter().zip(peaks.iter()) {
            assert_eq!(w.shape(), &[300, 2]);
            // The R-peak sample sits at the center row.
            assert_eq!(w.data()[150 * 2], peak as f32);
        }
    }

    #[test]
    fn single_short_beat_gets_zero_padding() {
        let rec = recording(80, 1, |t, _| (t + 1) as f32);
        let (windows, discarded) = segment_heartbeats(&rec, &[40], 300).unwrap();
        assert_eq!(windows.len(), 1);
        assert_eq!(discarded, 0);
        let zeros = windows[0].data().iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeros, 300 - 80);
    }

    #[test]
    fn long_beats_are_discarded() {
        let rec = recording(800, 1, |t, _| t as f32);
        // Single peak: the beat is the whole 800-sample recording.
        let (windows, discarded) = segment_heartbeats(&rec, &[400], 300).unwrap();
        assert!(windows.is_empty());
        assert_eq!(discarded, 1);
    }

    #[test]
    fn heartbeat_segmentation_validates_peaks() {
        let rec = recording(100, 1, |t, _| t as f32);
        assert!(segment_heartbeats(&rec, &[], 50).is_err());
        assert!(segment_heartbeats(&rec, &[150], 50).is_err());
        assert!(segment_heartbeats(&rec, &[30, 30], 50).is_err());
        assert!(segment_heartbeats(&rec, &[30], 0).is_err());
    }

    #[test]
    fn fixed_windows_examples() {
        let rec = recording(2500, 3, |t, _| t as f32);
        assert_eq!(segment_fixed_windows(&rec, 250).unwrap().len(), 10);

        let rec = recording(2501, 3, |t, _| t as f32);
        let windows = segment_fixed_windows(&rec, 250).unwrap();
        assert_eq!(windows.len(), 10);

        let rec = recording(249, 3, |t, _| t as f32);
        assert!(segment_fixed_windows(&rec, 250).unwrap().is_empty());

        assert!(segment_fixed_windows(&rec, 0).is_err());
    }

    #[test]
    fn fixed_windows_tile_a_prefix() {
        let rec = recording(1030, 2, |t, c| (t * 2 + c) as f32);
        let windows = segment_fixed_windows(&rec, 100).unwrap();
        assert_eq!(windows.len(), 10);
        let mut reassembled = Vec::new();
        for w in &windows {
            reassembled.extend_from_slice(w.data());
        }
        assert_eq!(&rec.signal().data()[..reassembled.len()], &reassembled[..]);
    }
}
