//! Signal preprocessing: DC removal, Butterworth low-pass and a notch comb
//! for mains interference, all applied zero-phase; plus windowed
//! correlation heatmaps.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Impulse-response level below which a section counts as settled.
pub const SETTLE_LEVEL: f64 = 1e-9;

/// Parameters of the preprocessing chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSpec {
    pub sample_rate_hz: f64,
    pub lowpass_cutoff_hz: f64,
    pub lowpass_order: usize,
    pub notch_base_hz: f64,
    /// Number of notches, at `notch_base_hz * k` for `k = 1..=notch_harmonics`.
    pub notch_harmonics: usize,
    pub notch_q: f64,
}

impl Default for FilterSpec {
    fn default() -> Self {
        FilterSpec {
            sample_rate_hz: 131_072.0,
            lowpass_cutoff_hz: 30_000.0,
            lowpass_order: 4,
            notch_base_hz: 50.0,
            notch_harmonics: 20,
            notch_q: 30.0,
        }
    }
}

impl FilterSpec {
    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate_hz / 2.0;
        let bad = |m: String| Err(Error::Config(m));
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            return bad(format!("sample rate {} must be positive", self.sample_rate_hz));
        }
        if !(self.lowpass_cutoff_hz > 0.0 && self.lowpass_cutoff_hz < nyquist) {
            return bad(format!(
                "low-pass cutoff {} Hz must lie in (0, {nyquist})",
                self.lowpass_cutoff_hz
            ));
        }
        if self.lowpass_order == 0 {
            return bad("low-pass order must be at least 1".into());
        }
        if !(self.notch_base_hz > 0.0 && self.notch_base_hz.is_finite()) {
            return bad(format!("notch base {} Hz must be positive", self.notch_base_hz));
        }
        let top = self.notch_base_hz * self.notch_harmonics as f64;
        if top >= nyquist {
            return bad(format!("highest notch {top} Hz is not below Nyquist {nyquist}"));
        }
        if !(self.notch_q > 0.0 && self.notch_q.is_finite()) {
            return bad(format!("notch Q {} must be positive", self.notch_q));
        }
        Ok(())
    }

    pub fn notch_frequencies(&self) -> Vec<f64> {
        (1..=self.notch_harmonics)
            .map(|k| self.notch_base_hz * k as f64)
            .collect()
    }
}

/// One second-order section, normalized so that `a0 = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    fn normalized(b: [f64; 3], a0: f64, a1: f64, a2: f64) -> Self {
        Biquad {
            b: [b[0] / a0, b[1] / a0, b[2] / a0],
            a: [a1 / a0, a2 / a0],
        }
    }

    /// Bilinear-transform low-pass section with the given Q, prewarped at `f0`.
    pub fn lowpass(f0: f64, fs: f64, q: f64) -> Self {
        let w0 = 2.0 * PI * f0 / fs;
        let (s, c) = w0.sin_cos();
        let alpha = s / (2.0 * q);
        let k = (1.0 - c) / 2.0;
        Biquad::normalized([k, 2.0 * k, k], 1.0 + alpha, -2.0 * c, 1.0 - alpha)
    }

    /// First-order bilinear low-pass stored as a degenerate biquad.
    pub fn lowpass_first_order(f0: f64, fs: f64) -> Self {
        let k = (PI * f0 / fs).tan();
        Biquad::normalized([k, k, 0.0], 1.0 + k, k - 1.0, 0.0)
    }

    /// Second-order notch at `f0` with quality factor `q`.
    pub fn notch(f0: f64, fs: f64, q: f64) -> Self {
        let w0 = 2.0 * PI * f0 / fs;
        let (s, c) = w0.sin_cos();
        let alpha = s / (2.0 * q);
        Biquad::normalized([1.0, -2.0 * c, 1.0], 1.0 + alpha, -2.0 * c, 1.0 - alpha)
    }

    /// Largest pole magnitude.
    pub fn pole_radius(&self) -> f64 {
        let [a1, a2] = self.a;
        let disc = a1 * a1 - 4.0 * a2;
        if disc < 0.0 {
            a2.sqrt()
        } else {
            let r = disc.sqrt();
            ((-a1 + r) / 2.0).abs().max(((-a1 - r) / 2.0).abs())
        }
    }

    pub fn is_stable(&self) -> bool {
        self.pole_radius() < 1.0
    }

    /// Samples for the slowest mode to fall below [`SETTLE_LEVEL`].
    pub fn settling_len(&self) -> usize {
        let r = self.pole_radius();
        if r <= 0.0 {
            return 3;
        }
        (SETTLE_LEVEL.ln() / r.ln()).ceil() as usize + 3
    }

    pub fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// Complex frequency response magnitude at `f` Hz.
    pub fn magnitude(&self, f: f64, fs: f64) -> f64 {
        let w = 2.0 * PI * f / fs;
        let (s1, c1) = w.sin_cos();
        let (s2, c2) = (2.0 * w).sin_cos();
        let nr = self.b[0] + self.b[1] * c1 + self.b[2] * c2;
        let ni = -(self.b[1] * s1 + self.b[2] * s2);
        let dr = 1.0 + self.a[0] * c1 + self.a[1] * c2;
        let di = -(self.a[0] * s1 + self.a[1] * s2);
        (nr.hypot(ni)) / (dr.hypot(di))
    }

    /// Transposed direct-form II state reached after a unit step settles.
    fn step_state(&self) -> [f64; 2] {
        let g = self.dc_gain();
        [g - self.b[0], self.b[2] - self.a[1] * g]
    }

    fn run(&self, x: &mut [f64], mut z: [f64; 2]) {
        let [b0, b1, b2] = self.b;
        let [a1, a2] = self.a;
        for v in x.iter_mut() {
            let xin = *v;
            let y = b0 * xin + z[0];
            z[0] = b1 * xin - a1 * y + z[1];
            z[1] = b2 * xin - a2 * y;
            *v = y;
        }
    }
}

/// Ordered second-order sections applied one after another.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BiquadCascade {
    pub sections: Vec<Biquad>,
}

impl BiquadCascade {
    /// Butterworth low-pass of the given order.
    pub fn butterworth_lowpass(order: usize, cutoff: f64, fs: f64) -> Self {
        let mut sections: Vec<Biquad> = (0..order / 2)
            .map(|k| {
                let theta = (2 * k + 1) as f64 * PI / (2 * order) as f64;
                Biquad::lowpass(cutoff, fs, 1.0 / (2.0 * theta.sin()))
            })
            .collect();
        if order % 2 == 1 {
            sections.push(Biquad::lowpass_first_order(cutoff, fs));
        }
        BiquadCascade { sections }
    }

    pub fn notch_comb(spec: &FilterSpec) -> Self {
        BiquadCascade {
            sections: spec
                .notch_frequencies()
                .into_iter()
                .map(|f| Biquad::notch(f, spec.sample_rate_hz, spec.notch_q))
                .collect(),
        }
    }

    pub fn is_stable(&self) -> bool {
        self.sections.iter().all(Biquad::is_stable)
    }

    pub fn settling_len(&self) -> usize {
        self.sections
            .iter()
            .map(Biquad::settling_len)
            .max()
            .unwrap_or(0)
    }

    pub fn magnitude(&self, f: f64, fs: f64) -> f64 {
        self.sections.iter().map(|s| s.magnitude(f, fs)).product()
    }

    /// Causal filtering from rest.
    pub fn filter(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        for s in &self.sections {
            s.run(&mut y, [0.0; 2]);
        }
        y
    }

    /// Causal pass whose state starts at the steady state of a constant
    /// input equal to `x[0]`.
    fn filter_settled(&self, x: &mut [f64]) {
        let Some(&x0) = x.first() else { return };
        let mut level = x0;
        for s in &self.sections {
            let z = s.step_state().map(|v| v * level);
            s.run(x, z);
            level *= s.dc_gain();
        }
    }

    /// Zero-phase filtering. The ends are extended by odd reflection over
    /// `3 * settling_len()` samples (capped at `len - 1`) and the
    /// forward-backward and backward-forward passes are averaged, so a
    /// symmetric input stays symmetric even when the padding is shorter
    /// than the filter memory.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        if n < 2 || self.sections.is_empty() {
            return x.to_vec();
        }
        let a = self.forward_backward(x);
        let rev: Vec<f64> = x.iter().rev().copied().collect();
        let b = self.forward_backward(&rev);
        a.iter().zip(b.iter().rev()).map(|(p, q)| 0.5 * (p + q)).collect()
    }

    fn forward_backward(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        let pad = (3 * self.settling_len()).min(n - 1);
        let (first, last) = (x[0], x[n - 1]);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * first - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * last - x[n - 1 - i]));
        self.filter_settled(&mut ext);
        ext.reverse();
        self.filter_settled(&mut ext);
        ext.reverse();
        ext.drain(pad..pad + n).collect()
    }
}

/// Subtracts the arithmetic mean. A second pass removes the rounding
/// residue left by the first.
pub fn remove_dc(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::Empty("remove_dc"));
    }
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let mut y: Vec<f64> = x.iter().map(|v| v - m).collect();
    let r = y.iter().sum::<f64>() / n;
    y.iter_mut().for_each(|v| *v -= r);
    Ok(y)
}

pub fn lowpass(x: &[f64], spec: &FilterSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    Ok(BiquadCascade::butterworth_lowpass(
        spec.lowpass_order,
        spec.lowpass_cutoff_hz,
        spec.sample_rate_hz,
    )
    .filtfilt(x))
}

pub fn notch_comb(x: &[f64], spec: &FilterSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    Ok(BiquadCascade::notch_comb(spec).filtfilt(x))
}

/// DC removal, low-pass, then the notch comb. Filter edge transients leave
/// a tiny offset, so the result is re-centred at the end.
pub fn preprocess(x: &[f64], spec: &FilterSpec) -> Result<Vec<f64>> {
    let y = remove_dc(x)?;
    let y = lowpass(&y, spec)?;
    let y = notch_comb(&y, spec)?;
    remove_dc(&y)
}

/// Pearson correlation between every pair of windows `x[i*stride..][..window_len]`.
///
/// A zero-variance window correlates 1 with itself and 0 with the rest.
pub fn correlation_heatmap(x: &[f64], window_len: usize, stride: usize) -> Result<Vec<Vec<f64>>> {
    if window_len == 0 || stride == 0 {
        return Err(Error::Config("window length and stride must be positive".into()));
    }
    if window_len > x.len() {
        return Err(Error::dim(
            "correlation_heatmap",
            format!("window {window_len} longer than signal {}", x.len()),
        ));
    }
    let count = (x.len() - window_len) / stride + 1;
    let centred: Vec<Option<Vec<f64>>> = (0..count)
        .map(|i| {
            let w = &x[i * stride..i * stride + window_len];
            let m = w.iter().sum::<f64>() / window_len as f64;
            let c: Vec<f64> = w.iter().map(|v| v - m).collect();
            let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            (norm > 0.0).then(|| c.iter().map(|v| v / norm).collect())
        })
        .collect();
    let mut out = vec![vec![0.0; count]; count];
    for i in 0..count {
        out[i][i] = 1.0;
        for j in 0..i {
            let r = match (&centred[i], &centred[j]) {
                (Some(a), Some(b)) => {
                    let d: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
                    d.clamp(-1.0, 1.0)
                }
                _ => 0.0,
            };
            out[i][j] = r;
            out[j][i] = r;
        }
    }
    Ok(out)
}
