//! Log-mel spectrogram frontend for the audio encoder.
//!
//! Fixed analysis chain, chosen once and shared by every consumer so that
//! token streams are reproducible:
//!
//! * Hann window (periodic), length = `window` samples, hop = `hop`;
//! * DFT of length `window` (no zero padding), power spectrum over the
//!   `window/2 + 1` non-negative bins;
//! * triangular mel filterbank, HTK mel scale `2595 * log10(1 + f/700)`,
//!   `mel_bins` filters spanning 0 Hz to Nyquist, unnormalized;
//! * natural log with an additive floor of 1e-10.
//!
//! Frame count for a clip of `len` samples is `1 + (len - window) / hop`;
//! clips shorter than one window are rejected.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub window: usize,
    pub hop: usize,
    pub mel_bins: usize,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig { sample_rate: 16_000, window: 400, hop: 160, mel_bins: 64 }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.window == 0 || self.hop == 0 || self.mel_bins == 0 {
            return Err(Error::Config("mel parameters must all be positive".into()));
        }
        if self.window < 2 * self.mel_bins {
            return Err(Error::Config(format!(
                "{} mel bins cannot be filled from a {}-sample window",
                self.mel_bins, self.window
            )));
        }
        Ok(())
    }

    /// Frames produced by a clip of `len` samples.
    pub fn frame_count(&self, len: usize) -> Result<usize> {
        if len < self.window {
            return Err(Error::Input(format!(
                "clip of {len} samples is shorter than one {}-sample analysis window",
                self.window
            )));
        }
        Ok(1 + (len - self.window) / self.hop)
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Precomputed window, FFT plan and filterbank.
pub struct MelFrontend {
    config: MelConfig,
    window_fn: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    /// Dense filter matrix, `mel_bins` rows of `window/2 + 1` weights.
    filters: Vec<f64>,
    bins: usize,
}

impl MelFrontend {
    pub fn new(config: MelConfig) -> Result<Self> {
        config.validate()?;
        let n = config.window;
        let window_fn: Vec<f64> = (0..n)
            .map(|i| 0.5 * (1.0 - (std::f64::consts::TAU * i as f64 / n as f64).cos()))
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(n);
        let bins = n / 2 + 1;
        let filters = build_filterbank(&config, bins);
        Ok(MelFrontend { config, window_fn, fft, filters, bins })
    }

    pub fn config(&self) -> &MelConfig {
        &self.config
    }

    /// Log-mel features, row-major `frame_count x mel_bins`.
    pub fn log_mel(&self, samples: &[f64]) -> Result<(Vec<f64>, usize)> {
        let frames = self.config.frame_count(samples.len())?;
        let n = self.config.window;
        let mb = self.config.mel_bins;
        let mut out = vec![0.0; frames * mb];
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        for f in 0..frames {
            let start = f * self.config.hop;
            for i in 0..n {
                buf[i] = Complex::new(samples[start + i] * self.window_fn[i], 0.0);
            }
            self.fft.process(&mut buf);
            // power over the non-negative half-spectrum
            let row = &mut out[f * mb..(f + 1) * mb];
            for m in 0..mb {
                let wrow = &self.filters[m * self.bins..(m + 1) * self.bins];
                let mut e = 0.0;
                for k in 0..self.bins {
                    let w = wrow[k];
                    if w != 0.0 {
                        e += w * buf[k].norm_sqr();
                    }
                }
                row[m] = (e + LOG_FLOOR).ln();
            }
        }
        Ok((out, frames))
    }
}

fn build_filterbank(config: &MelConfig, bins: usize) -> Vec<f64> {
    let nyquist = config.sample_rate as f64 / 2.0;
    let mb = config.mel_bins;
    let mel_max = hz_to_mel(nyquist);
    // mb + 2 anchor points in mel space, converted back to Hz
    let anchors: Vec<f64> = (0..mb + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (mb + 1) as f64))
        .collect();
    let bin_hz = config.sample_rate as f64 / config.window as f64;
    let mut filters = vec![0.0; mb * bins];
    for m in 0..mb {
        let (lo, center, hi) = (anchors[m], anchors[m + 1], anchors[m + 2]);
        for k in 0..bins {
            let f = k as f64 * bin_hz;
            let w = if f <= center {
                (f - lo) / (center - lo)
            } else {
                (hi - f) / (hi - center)
            };
            if w > 0.0 {
                filters[m * bins + k] = w;
            }
        }
    }
    filters
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count_formula() {
        let c = MelConfig::default();
        // 16000 samples -> 1 + (16000 - 400) / 160 = 98
        assert_eq!(c.frame_count(16_000).unwrap(), 98);
        assert_eq!(c.frame_count(400).unwrap(), 1);
        assert_eq!(c.frame_count(559).unwrap(), 1);
        assert_eq!(c.frame_count(560).unwrap(), 2);
        assert!(c.frame_count(399).is_err());
    }

    #[test]
    fn mel_scale_round_trip() {
        for f in [0.0, 100.0, 440.0, 1000.0, 7999.0] {
            let back = mel_to_hz(hz_to_mel(f));
            assert!((back - f).abs() < 1e-6, "{f} -> {back}");
        }
    }

    #[test]
    fn silence_sits_at_the_log_floor() {
        let fe = MelFrontend::new(MelConfig::default()).unwrap();
        let (mel, frames) = fe.log_mel(&vec![0.0; 800]).unwrap();
        assert_eq!(frames, 3);
        for &v in &mel {
            assert!((v - LOG_FLOOR.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn tone_energy_lands_near_the_matching_filter() {
        let fe = MelFrontend::new(MelConfig::default()).unwrap();
        let freq = 440.0;
        let samples: Vec<f64> = (0..1600)
            .map(|i| 0.7 * (std::f64::consts::TAU * freq * i as f64 / 16_000.0).sin())
            .collect();
        let (mel, frames) = fe.log_mel(&samples).unwrap();
        let mb = fe.config().mel_bins;
        // find the hottest mel bin of the first frame
        let row = &mel[0..mb];
        let hot = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        // which filter should contain 440 Hz?
        let mel_max = hz_to_mel(8000.0);
        let mel_of_tone = hz_to_mel(freq);
        let expected = (mel_of_tone / mel_max * (mb + 1) as f64).round() as usize;
        assert!(
            (hot as i64 - expected as i64).abs() <= 1,
            "hot bin {hot}, expected near {expected}"
        );
        assert!(frames > 1);
        // energy is far above the floor
        assert!(row[hot] > LOG_FLOOR.ln() + 10.0);
    }

    #[test]
    fn filterbank_rows_are_nonempty_and_bounded() {
        let c = MelConfig::default();
        let bins = c.window / 2 + 1;
        let filters = build_filterbank(&c, bins);
        for m in 0..c.mel_bins {
            let row = &filters[m * bins..(m + 1) * bins];
            let sum: f64 = row.iter().sum();
            assert!(sum > 0.0, "filter {m} is empty");
            assert!(row.iter().all(|&w| (0.0..=1.0 + 1e-12).contains(&w)));
        }
    }
}
