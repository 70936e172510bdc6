//! Waveform generation and reference reconstructions.
//!
//! [`WaveformSpec`] describes a target as DC, sinusoid, or piecewise-linear
//! ramp; [`sample`] turns it into a per-channel [`VoltageProgram`] on the
//! per-channel update grid, and [`ZohReference`] provides the ideal
//! zero-order-hold reconstruction used for error analysis against simulated
//! electrode traces.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scheduler::{ProgramKind, VoltageProgram};

/// One breakpoint of a piecewise-linear ramp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Breakpoint {
    pub time_s: f64,
    pub value_v: f64,
}

/// Shape of a target waveform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WaveformKind {
    Dc {
        value_v: f64,
    },
    Sine {
        amplitude_v: f64,
        frequency_hz: f64,
        #[serde(default)]
        phase_rad: f64,
        #[serde(default)]
        offset_v: f64,
    },
    PiecewiseLinear {
        breakpoints: Vec<Breakpoint>,
    },
}

/// A waveform with its duration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveformSpec {
    #[serde(flatten)]
    pub kind: WaveformKind,
    pub duration_s: f64,
}

/// Waveform construction and sampling failures.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum WaveformError {
    #[error("instantaneous value {value_v} V exceeds the ±{full_scale_v} V full scale")]
    AmplitudeExceedsFullScale { value_v: f64, full_scale_v: f64 },
    #[error("duration {duration_s} s is not a whole number of 1/{rate_hz} Hz sample periods")]
    DurationNotSampleAligned { duration_s: f64, rate_hz: u64 },
    #[error("piecewise-linear breakpoints must be strictly increasing in time")]
    BreakpointsNotIncreasing,
    #[error("sample rate must be positive")]
    ZeroRate,
}

impl WaveformSpec {
    pub fn dc(value_v: f64, duration_s: f64) -> Self {
        Self {
            kind: WaveformKind::Dc { value_v },
            duration_s,
        }
    }

    pub fn sine(amplitude_v: f64, frequency_hz: f64, phase_rad: f64, offset_v: f64, duration_s: f64) -> Self {
        Self {
            kind: WaveformKind::Sine {
                amplitude_v,
                frequency_hz,
                phase_rad,
                offset_v,
            },
            duration_s,
        }
    }

    /// Instantaneous value at time `t`. Piecewise-linear ramps hold their
    /// first value before the first breakpoint and their last value after
    /// the final one.
    pub fn value_at(&self, t_s: f64) -> f64 {
        match &self.kind {
            WaveformKind::Dc { value_v } => *value_v,
            WaveformKind::Sine {
                amplitude_v,
                frequency_hz,
                phase_rad,
                offset_v,
            } => {
                amplitude_v * (2.0 * std::f64::consts::PI * frequency_hz * t_s + phase_rad).sin()
                    + offset_v
            }
            WaveformKind::PiecewiseLinear { breakpoints } => {
                if breakpoints.is_empty() {
                    return 0.0;
                }
                if t_s <= breakpoints[0].time_s {
                    return breakpoints[0].value_v;
                }
                for pair in breakpoints.windows(2) {
                    let (a, b) = (pair[0], pair[1]);
                    if t_s <= b.time_s {
                        let frac = (t_s - a.time_s) / (b.time_s - a.time_s);
                        return a.value_v + frac * (b.value_v - a.value_v);
                    }
                }
                breakpoints.last().unwrap().value_v
            }
        }
    }

    /// Worst-case magnitude over the duration, used for range checks.
    fn peak_abs_v(&self, rate_hz: u64) -> f64 {
        match &self.kind {
            WaveformKind::Dc { value_v } => value_v.abs(),
            WaveformKind::Sine {
                amplitude_v,
                offset_v,
                ..
            } => amplitude_v.abs() + offset_v.abs(),
            WaveformKind::PiecewiseLinear { breakpoints } => {
                let _ = rate_hz;
                breakpoints
                    .iter()
                    .fold(0.0_f64, |m, b| m.max(b.value_v.abs()))
            }
        }
    }
}

/// Samples a waveform at `t = k / rate_hz` for `k = 0 .. duration * rate`,
/// producing the channel's voltage program. DC specs stay DC regardless of
/// the rate.
pub fn sample(
    spec: &WaveformSpec,
    rate_hz: u64,
    full_scale_v: f64,
    channel: u32,
) -> Result<VoltageProgram, WaveformError> {
    if rate_hz == 0 {
        return Err(WaveformError::ZeroRate);
    }
    if let WaveformKind::PiecewiseLinear { breakpoints } = &spec.kind {
        if breakpoints.windows(2).any(|p| p[1].time_s <= p[0].time_s) {
            return Err(WaveformError::BreakpointsNotIncreasing);
        }
    }
    let peak = spec.peak_abs_v(rate_hz);
    if peak > full_scale_v {
        return Err(WaveformError::AmplitudeExceedsFullScale {
            value_v: peak,
            full_scale_v,
        });
    }

    if let WaveformKind::Dc { value_v } = spec.kind {
        return Ok(VoltageProgram::dc(channel, value_v));
    }

    let count_exact = spec.duration_s * rate_hz as f64;
    let count = count_exact.round();
    if count < 1.0 || (count_exact - count).abs() > 1e-6 {
        return Err(WaveformError::DurationNotSampleAligned {
            duration_s: spec.duration_s,
            rate_hz,
        });
    }
    let samples: Vec<f64> = (0..count as usize)
        .map(|k| spec.value_at(k as f64 / rate_hz as f64))
        .collect();
    Ok(VoltageProgram::waveform(channel, samples, rate_hz))
}

/// Ideal zero-order-hold reconstruction of a voltage program, evaluable at
/// any time: the value at `t` is the sample at `floor(t * rate)`.
#[derive(Debug, Clone, PartialEq)]
pub enum ZohReference {
    Dc { value_v: f64 },
    Sampled { samples_v: Vec<f64>, rate_hz: u64 },
}

/// Builds the zero-order-hold reference of a program.
pub fn zoh_reference(program: &VoltageProgram) -> ZohReference {
    match &program.kind {
        ProgramKind::Dc { value_v } => ZohReference::Dc { value_v: *value_v },
        ProgramKind::Waveform { samples_v, rate_hz } => ZohReference::Sampled {
            samples_v: samples_v.clone(),
            rate_hz: *rate_hz,
        },
    }
}

impl ZohReference {
    pub fn value_at(&self, t_s: f64) -> f64 {
        match self {
            ZohReference::Dc { value_v } => *value_v,
            ZohReference::Sampled { samples_v, rate_hz } => {
                if samples_v.is_empty() {
                    return 0.0;
                }
                let idx = (t_s * *rate_hz as f64).floor().max(0.0) as usize;
                samples_v[idx.min(samples_v.len() - 1)]
            }
        }
    }

    /// Sample period, `None` for DC.
    pub fn period_s(&self) -> Option<f64> {
        match self {
            ZohReference::Dc { .. } => None,
            ZohReference::Sampled { rate_hz, .. } => Some(1.0 / *rate_hz as f64),
        }
    }
}

/// RMS and worst-case deviation between a trace and its reference.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ErrorStats {
    pub rms_v: f64,
    pub max_abs_v: f64,
}

fn stats(errors: impl Iterator<Item = f64>) -> ErrorStats {
    let mut sum_sq = 0.0;
    let mut max_abs = 0.0_f64;
    let mut count = 0usize;
    for e in errors {
        sum_sq += e * e;
        max_abs = max_abs.max(e.abs());
        count += 1;
    }
    ErrorStats {
        rms_v: if count == 0 { 0.0 } else { (sum_sq / count as f64).sqrt() },
        max_abs_v: max_abs,
    }
}

/// Reconstruction error of a simulated electrode trace against a ZOH
/// reference, reported separately at the per-channel sample instants and
/// over the full span of the trace.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ReconstructionError {
    /// Error sampled where the reference's value is freshly delivered
    /// (just before each sample instant, and at the trace end).
    pub at_samples: ErrorStats,
    /// Error over every provided trace point.
    pub full_span: ErrorStats,
}

/// Compares a trace, given as `(time_s, voltage_v)` pairs on a shared time
/// span, against a ZOH reference.
pub fn reconstruction_error(
    times_s: &[f64],
    values_v: &[f64],
    reference: &ZohReference,
) -> ReconstructionError {
    assert_eq!(times_s.len(), values_v.len(), "trace axes must match");
    if times_s.is_empty() {
        return ReconstructionError::default();
    }
    let full_span = stats(
        times_s
            .iter()
            .zip(values_v.iter())
            .map(|(&t, &v)| v - reference.value_at(t)),
    );

    // Boundary samples: the last trace point at or before the end of each
    // hold interval, where the delivered value should have settled.
    let at_samples = match reference.period_s() {
        None => stats(std::iter::once(
            values_v[values_v.len() - 1] - reference.value_at(times_s[times_s.len() - 1]),
        )),
        Some(period) => {
            let mut errors = Vec::new();
            let t_end = times_s[times_s.len() - 1];
            let mut boundary = period;
            let mut idx = 0usize;
            while boundary <= t_end + period * 1e-9 {
                while idx + 1 < times_s.len() && times_s[idx + 1] < boundary - period * 1e-9 {
                    idx += 1;
                }
                errors.push(values_v[idx] - reference.value_at(times_s[idx]));
                boundary += period;
            }
            errors.push(values_v[values_v.len() - 1] - reference.value_at(t_end));
            stats(errors.into_iter())
        }
    };

    ReconstructionError {
        at_samples,
        full_span,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dc_sampling_is_rate_invariant() {
        let spec = WaveformSpec::dc(3.75, 1e-3);
        for rate in [1_000u64, 37_500, 1_000_000] {
            let program = sample(&spec, rate, 10.0, 0).unwrap();
            assert_eq!(program.kind, ProgramKind::Dc { value_v: 3.75 });
        }
    }

    #[test]
    fn quarter_period_sine_sampling() {
        let f0 = 1000.0;
        let spec = WaveformSpec::sine(2.0, f0, 0.0, 0.0, 1e-3);
        let program = sample(&spec, 4 * f0 as u64, 10.0, 0).unwrap();
        let ProgramKind::Waveform { samples_v, .. } = &program.kind else {
            panic!("expected waveform")
        };
        let expected = [0.0, 2.0, 0.0, -2.0];
        for (k, s) in samples_v.iter().enumerate() {
            assert!((s - expected[k % 4]).abs() < 1e-9, "sample {k} = {s}");
        }
    }

    #[test]
    fn piecewise_linear_ramp_matches_interpolation_oracle() {
        let spec = WaveformSpec {
            kind: WaveformKind::PiecewiseLinear {
                breakpoints: vec![
                    Breakpoint {
                        time_s: 0.0,
                        value_v: 0.0,
                    },
                    Breakpoint {
                        time_s: 10e-6,
                        value_v: 10.0,
                    },
                ],
            },
            duration_s: 10e-6,
        };
        let program = sample(&spec, 1_000_000, 10.0, 0).unwrap();
        let ProgramKind::Waveform { samples_v, .. } = &program.kind else {
            panic!("expected waveform")
        };
        assert_eq!(samples_v.len(), 10);
        // Independent interpolation: v(t) = t * (10 / 10 us).
        for (k, s) in samples_v.iter().enumerate() {
            let oracle = k as f64 * 1e-6 * (10.0 / 10e-6);
            assert!((s - oracle).abs() < 1e-9, "sample {k}: {s} vs {oracle}");
            assert!((s - k as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn amplitude_beyond_full_scale_is_rejected() {
        let spec = WaveformSpec::sine(9.0, 1000.0, 0.0, 2.0, 1e-3);
        assert!(matches!(
            sample(&spec, 1_000_000, 10.0, 0),
            Err(WaveformError::AmplitudeExceedsFullScale { .. })
        ));
    }

    #[test]
    fn non_monotonic_breakpoints_are_rejected() {
        let spec = WaveformSpec {
            kind: WaveformKind::PiecewiseLinear {
                breakpoints: vec![
                    Breakpoint {
                        time_s: 1e-6,
                        value_v: 0.0,
                    },
                    Breakpoint {
                        time_s: 1e-6,
                        value_v: 5.0,
                    },
                ],
            },
            duration_s: 2e-6,
        };
        assert!(matches!(
            sample(&spec, 1_000_000, 10.0, 0),
            Err(WaveformError::BreakpointsNotIncreasing)
        ));
    }

    #[test]
    fn zoh_holds_between_samples() {
        let program = VoltageProgram::waveform(0, vec![1.0, 2.0, 3.0], 1_000_000);
        let zoh = zoh_reference(&program);
        assert_eq!(zoh.value_at(0.0), 1.0);
        assert_eq!(zoh.value_at(0.5e-6), 1.0);
        assert_eq!(zoh.value_at(1.5e-6), 2.0);
        assert_eq!(zoh.value_at(10e-6), 3.0);
    }

    #[test]
    fn identical_trace_has_zero_error() {
        let program = VoltageProgram::waveform(0, vec![1.0, -2.0, 3.0, 0.5], 1_000_000);
        let zoh = zoh_reference(&program);
        let times: Vec<f64> = (0..40).map(|k| k as f64 * 0.1e-6).collect();
        let values: Vec<f64> = times.iter().map(|&t| zoh.value_at(t)).collect();
        let err = reconstruction_error(&times, &values, &zoh);
        assert_eq!(err.full_span.rms_v, 0.0);
        assert_eq!(err.at_samples.max_abs_v, 0.0);
    }

    #[test]
    fn constant_offset_shows_up_as_rms_and_max() {
        let program = VoltageProgram::waveform(0, vec![1.0, -2.0, 3.0, 0.5], 1_000_000);
        let zoh = zoh_reference(&program);
        let times: Vec<f64> = (0..40).map(|k| k as f64 * 0.1e-6).collect();
        let values: Vec<f64> = times.iter().map(|&t| zoh.value_at(t) + 1e-3).collect();
        let err = reconstruction_error(&times, &values, &zoh);
        assert!((err.full_span.rms_v - 1e-3).abs() < 1e-12);
        assert!((err.full_span.max_abs_v - 1e-3).abs() < 1e-12);
        assert!((err.at_samples.rms_v - 1e-3).abs() < 1e-12);
    }
}
