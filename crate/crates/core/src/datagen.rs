//! Synthetic VLF lightning waveforms for the ten transient classes, and
//! dataset splitting helpers.
//!
//! Time is measured in samples; at the nominal 1 MSPS rate one sample is
//! one microsecond, so every `_us` range below is also a sample count.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::CLASS_NAMES;
use crate::error::{Error, Result};

pub const N_CLASSES: usize = 10;

/// Waveform family behind a class label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    /// Cloud-to-ground return stroke: double exponential with overshoot.
    ReturnStroke,
    /// Preliminary breakdown pulse train.
    PulseTrain,
    /// Narrow bipolar event.
    NarrowBipolar,
    /// Narrow bipolar event followed by a damped ringing tail.
    RingingBipolar,
    /// Several return-stroke-like pulses in one window.
    MultiPulse,
    /// Return stroke plus a delayed, attenuated, smoothed replica.
    Reflected,
    /// Chirped decaying oscillation with a slow rise.
    Sferic,
}

/// Inclusive parameter range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Span(pub f64, pub f64);

impl Span {
    fn draw<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        if self.0 == self.1 {
            self.0
        } else {
            rng.random_range(self.0..=self.1)
        }
    }

    fn draw_count<R: Rng + ?Sized>(self, rng: &mut R) -> usize {
        rng.random_range(self.0 as usize..=self.1 as usize)
    }
}

/// Every tunable of the generator, in one place.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSpec {
    /// Family and forced polarity (`None` draws a random sign) per label.
    pub classes: [(Family, Option<f64>); N_CLASSES],
    pub cg_rise_us: Span,
    pub cg_decay_us: Span,
    /// Opposite-polarity overshoot as a fraction of the main peak.
    pub cg_overshoot: Span,
    pub pbp_count: Span,
    pub pbp_gap_us: Span,
    pub pbp_width_us: Span,
    /// Amplitude of the first pulselet relative to the last.
    pub pbp_growth_start: Span,
    pub nbe_width_us: Span,
    /// Trailing-lobe amplitude relative to the leading lobe.
    pub nbe_undershoot: Span,
    pub ring_freq_khz: Span,
    pub ring_decay_us: Span,
    pub ring_amplitude: Span,
    pub mp_count: Span,
    pub mp_gap_us: Span,
    pub mp_decay_us: Span,
    pub mp_relative_amp: Span,
    pub ir_delay_us: Span,
    pub ir_scale: Span,
    /// Moving-average length applied to the replica.
    pub ir_smooth_us: Span,
    pub sw_start_khz: Span,
    pub sw_end_khz: Span,
    pub sw_duration_us: Span,
    pub sw_rise_us: Span,
    pub sw_decay_us: Span,
}

pub const CLASS_SPEC: ClassSpec = ClassSpec {
    classes: [
        (Family::ReturnStroke, Some(-1.0)),
        (Family::ReturnStroke, Some(1.0)),
        (Family::PulseTrain, Some(-1.0)),
        (Family::PulseTrain, Some(1.0)),
        (Family::NarrowBipolar, Some(-1.0)),
        (Family::NarrowBipolar, Some(1.0)),
        (Family::RingingBipolar, None),
        (Family::MultiPulse, None),
        (Family::Reflected, None),
        (Family::Sferic, None),
    ],
    cg_rise_us: Span(1.0, 4.0),
    cg_decay_us: Span(20.0, 60.0),
    cg_overshoot: Span(0.10, 0.25),
    pbp_count: Span(3.0, 8.0),
    pbp_gap_us: Span(20.0, 80.0),
    pbp_width_us: Span(3.0, 8.0),
    pbp_growth_start: Span(0.25, 0.5),
    nbe_width_us: Span(10.0, 30.0),
    nbe_undershoot: Span(0.3, 0.6),
    ring_freq_khz: Span(40.0, 80.0),
    ring_decay_us: Span(20.0, 60.0),
    ring_amplitude: Span(0.2, 0.4),
    mp_count: Span(2.0, 5.0),
    mp_gap_us: Span(50.0, 160.0),
    mp_decay_us: Span(8.0, 20.0),
    mp_relative_amp: Span(0.5, 1.0),
    ir_delay_us: Span(100.0, 300.0),
    ir_scale: Span(0.3, 0.7),
    ir_smooth_us: Span(5.0, 15.0),
    sw_start_khz: Span(20.0, 35.0),
    sw_end_khz: Span(5.0, 12.0),
    sw_duration_us: Span(500.0, 700.0),
    sw_rise_us: Span(20.0, 50.0),
    sw_decay_us: Span(150.0, 350.0),
};

/// Record-level generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub input_len: usize,
    /// Nominal onset sample (the pre-trigger window).
    pub onset: usize,
    /// Onset is drawn uniformly from `onset ± onset_jitter`.
    pub onset_jitter: usize,
    pub amplitude: (f64, f64),
    /// Noise sigma as a fraction of the peak amplitude.
    pub noise: (f64, f64),
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            input_len: 1000,
            onset: 100,
            onset_jitter: 50,
            amplitude: (0.5, 2.0),
            noise: (0.01, 0.05),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.input_len == 0 {
            return bad("input_len must be positive");
        }
        if self.onset_jitter > self.onset || self.onset + self.onset_jitter >= self.input_len {
            return bad("onset window must lie inside the record");
        }
        let (a0, a1) = self.amplitude;
        if !(a0 > 0.0 && a0 <= a1 && a1.is_finite()) {
            return bad("amplitude range must be positive and ordered");
        }
        let (n0, n1) = self.noise;
        if !(n0 >= 0.0 && n0 <= n1 && n1.is_finite()) {
            return bad("noise range must be nonnegative and ordered");
        }
        Ok(())
    }
}

/// Generator parameters kept with each record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub onset: usize,
    pub amplitude: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignalRecord {
    pub samples: Vec<f64>,
    pub label: usize,
    pub meta: RecordMeta,
}

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-record seed derived from the dataset seed, class and index.
pub fn record_seed(seed: u64, class: usize, index: usize) -> u64 {
    let a = mix(seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let b = mix(a ^ (class as u64).wrapping_mul(0xd1b5_4a32_d192_ed03));
    mix(b ^ (index as u64).wrapping_mul(0x8cb9_2ba7_2f3d_8dd7))
}

fn check_class(class: usize) -> Result<()> {
    if class >= N_CLASSES {
        return Err(Error::Contract(format!(
            "class index {class} out of range 0..{N_CLASSES}"
        )));
    }
    Ok(())
}

/// Noise-free waveform for `class`, onset at sample 0, unit peak magnitude
/// with the dominant extremum carrying the class polarity.
pub fn clean_shape<R: Rng + ?Sized>(class: usize, len: usize, rng: &mut R) -> Result<Vec<f64>> {
    check_class(class)?;
    let spec = &CLASS_SPEC;
    let (family, polarity) = spec.classes[class];
    let sign = polarity.unwrap_or_else(|| if rng.random_bool(0.5) { 1.0 } else { -1.0 });
    let mut s = vec![0.0; len];
    match family {
        Family::ReturnStroke => {
            let tr = spec.cg_rise_us.draw(rng);
            let td = spec.cg_decay_us.draw(rng);
            let over = spec.cg_overshoot.draw(rng);
            add_stroke(&mut s, 0.0, tr, td, over, 1.0);
        }
        Family::PulseTrain => {
            let n = spec.pbp_count.draw_count(rng);
            let start = spec.pbp_growth_start.draw(rng);
            let mut at = 0.0;
            for k in 0..n {
                let grow = start + (1.0 - start) * k as f64 / (n - 1) as f64;
                let amp = grow * rng.random_range(0.9..=1.0);
                let w = spec.pbp_width_us.draw(rng);
                let r = spec.nbe_undershoot.draw(rng);
                add_bipolar(&mut s, at, w, r, amp);
                at += w + spec.pbp_gap_us.draw(rng);
            }
        }
        Family::NarrowBipolar | Family::RingingBipolar => {
            let w = spec.nbe_width_us.draw(rng);
            let r = spec.nbe_undershoot.draw(rng);
            add_bipolar(&mut s, 0.0, w, r, 1.0);
            if family == Family::RingingBipolar {
                let f = spec.ring_freq_khz.draw(rng) / 1000.0;
                let tau = spec.ring_decay_us.draw(rng);
                let a = spec.ring_amplitude.draw(rng);
                for (i, v) in s.iter_mut().enumerate() {
                    let u = i as f64 - w;
                    if u >= 0.0 {
                        *v += a * (2.0 * PI * f * u).sin() * (-u / tau).exp();
                    }
                }
            }
        }
        Family::MultiPulse => {
            let n = spec.mp_count.draw_count(rng);
            let mut at = 0.0;
            for k in 0..n {
                let amp = if k == 0 { 1.0 } else { spec.mp_relative_amp.draw(rng) };
                let tr = spec.cg_rise_us.draw(rng);
                let td = spec.mp_decay_us.draw(rng);
                add_stroke(&mut s, at, tr, td, 0.0, amp);
                at += spec.mp_gap_us.draw(rng);
            }
        }
        Family::Reflected => {
            let tr = spec.cg_rise_us.draw(rng);
            let td = spec.cg_decay_us.draw(rng);
            let over = spec.cg_overshoot.draw(rng);
            add_stroke(&mut s, 0.0, tr, td, over, 1.0);
            let delay = spec.ir_delay_us.draw(rng).round() as usize;
            let scale = spec.ir_scale.draw(rng);
            let m = spec.ir_smooth_us.draw(rng).round() as usize;
            let smooth = moving_average(&s, m.max(1));
            for i in delay..len {
                s[i] += scale * smooth[i - delay];
            }
        }
        Family::Sferic => {
            let f0 = spec.sw_start_khz.draw(rng) / 1000.0;
            let f1 = spec.sw_end_khz.draw(rng) / 1000.0;
            let dur = spec.sw_duration_us.draw(rng);
            let rise = spec.sw_rise_us.draw(rng);
            let decay = spec.sw_decay_us.draw(rng);
            let rate = (f1 - f0) / dur;
            for (i, v) in s.iter_mut().enumerate() {
                let u = i as f64;
                // frequency sweeps linearly from f0 to f1 then holds
                let phase = if u < dur {
                    f0 * u + 0.5 * rate * u * u
                } else {
                    f0 * dur + 0.5 * rate * dur * dur + f1 * (u - dur)
                };
                let env = (1.0 - (-u / rise).exp()).powi(2) * (-u / decay).exp();
                *v = env * (2.0 * PI * phase).sin();
            }
        }
    }
    orient(&mut s, sign);
    Ok(s)
}

/// Double-exponential stroke starting at `at`, normalized to peak `amp`,
/// with an opposite-polarity lobe of relative size `over`.
fn add_stroke(s: &mut [f64], at: f64, tr: f64, td: f64, over: f64, amp: f64) {
    let t_peak = (td / tr).ln() * tr * td / (td - tr);
    let norm = (-t_peak / td).exp() - (-t_peak / tr).exp();
    let lobe_start = t_peak + td;
    let lobe_len = 2.0 * td;
    for (i, v) in s.iter_mut().enumerate() {
        let u = i as f64 - at;
        if u < 0.0 {
            continue;
        }
        let mut y = ((-u / td).exp() - (-u / tr).exp()) / norm;
        let z = (u - lobe_start) / lobe_len;
        if (0.0..=1.0).contains(&z) {
            y -= over * (PI * z).sin().powi(2);
        }
        *v += amp * y;
    }
}

/// Two half-sine lobes of opposite sign spanning `width` samples.
fn add_bipolar(s: &mut [f64], at: f64, width: f64, undershoot: f64, amp: f64) {
    let half = width / 2.0;
    for (i, v) in s.iter_mut().enumerate() {
        let u = i as f64 - at;
        if u < 0.0 || u > width {
            continue;
        }
        *v += if u <= half {
            amp * (PI * u / half).sin()
        } else {
            -amp * undershoot * (PI * (u - half) / half).sin()
        };
    }
}

fn moving_average(x: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let mut acc = 0.0;
    for i in 0..x.len() {
        acc += x[i];
        if i >= m {
            acc -= x[i - m];
        }
        out[i] = acc / m as f64;
    }
    out
}

/// Scales to unit peak and flips so the dominant extremum has sign `sign`.
fn orient(s: &mut [f64], sign: f64) {
    let (mut lo, mut hi) = (0.0f64, 0.0f64);
    for &v in s.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let (peak, dominant) = if hi >= -lo { (hi, 1.0) } else { (-lo, -1.0) };
    if peak == 0.0 {
        return;
    }
    let k = sign * dominant / peak;
    s.iter_mut().for_each(|v| *v *= k);
}

/// One record of class `class` with the default generator settings.
pub fn gen_waveform(class: usize, seed: u64) -> Result<SignalRecord> {
    gen_waveform_with(class, seed, &GenConfig::default())
}

pub fn gen_waveform_with(class: usize, seed: u64, cfg: &GenConfig) -> Result<SignalRecord> {
    check_class(class)?;
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let j = cfg.onset_jitter as i64;
    let onset = (cfg.onset as i64 + rng.random_range(-j..=j)) as usize;
    let amplitude = rng.random_range(cfg.amplitude.0..=cfg.amplitude.1);
    let noise_sigma = amplitude * rng.random_range(cfg.noise.0..=cfg.noise.1);
    let shape = clean_shape(class, cfg.input_len - onset, &mut rng)?;
    let mut samples = vec![0.0; cfg.input_len];
    for (v, s) in samples[onset..].iter_mut().zip(&shape) {
        *v = amplitude * s;
    }
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma)
            .map_err(|e| Error::Config(format!("noise sigma: {e}")))?;
        samples.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    Ok(SignalRecord {
        samples,
        label: class,
        meta: RecordMeta {
            onset,
            amplitude,
            noise_sigma,
            seed,
        },
    })
}

/// `per_class` records of every class, deterministically shuffled.
pub fn gen_dataset(per_class: usize, seed: u64) -> Result<Vec<SignalRecord>> {
    gen_dataset_with(per_class, seed, &GenConfig::default())
}

pub fn gen_dataset_with(per_class: usize, seed: u64, cfg: &GenConfig) -> Result<Vec<SignalRecord>> {
    use rayon::prelude::*;
    if per_class == 0 {
        return Err(Error::Config("per_class must be at least 1".into()));
    }
    cfg.validate()?;
    let mut records = (0..N_CLASSES * per_class)
        .into_par_iter()
        .map(|i| {
            let (class, index) = (i / per_class, i % per_class);
            gen_waveform_with(class, record_seed(seed, class, index), cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ 0x5348_5546_464c_4521));
    records.shuffle(&mut rng);
    Ok(records)
}

/// Shuffled partition of `0..n` into `k` folds whose sizes differ by at
/// most one (the first `n % k` folds get the extra index).
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold needs k >= 2, got {k}")));
    }
    if k > n {
        return Err(Error::Config(format!("cannot split {n} items into {k} folds")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut at = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        folds.push(idx[at..at + size].to_vec());
        at += size;
    }
    Ok(folds)
}

/// Trigger rule: fires when the peak magnitude reaches `threshold`.
pub fn threshold_trigger(x: &[f64], threshold: f64) -> bool {
    x.iter().fold(0.0f64, |m, v| m.max(v.abs())) >= threshold
}

pub fn class_name(class: usize) -> Option<&'static str> {
    CLASS_NAMES.get(class).copied()
}
