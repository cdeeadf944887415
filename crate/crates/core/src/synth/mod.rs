//! Synthetic repetition sequences with exact cycle annotations.
//!
//! Each sequence gets its own motif: a smooth random trajectory over one
//! cycle, tapered to zero at both ends. The motif is planted `N` times with
//! jittered periods and at least one background frame between instances.
//! Gaps carry a slowly drifting background, an optional one-off distractor
//! segment, and white noise covers everything.

mod format;

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use format::{decode_dataset, encode_dataset, read_dataset, write_dataset};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::Interval;

/// Mean cycle lengths below this many frames are "short".
pub const SHORT_PERIOD_FRAMES: f64 = 30.0;
/// Mean cycle lengths above this many frames are "long".
pub const LONG_PERIOD_FRAMES: f64 = 60.0;

const MOTIF_HARMONICS: usize = 3;
const PERIOD_JITTER: f64 = 0.15;
const BACKGROUND_DECAY: f64 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeriodClass {
    Short,
    Medium,
    Long,
}

impl PeriodClass {
    pub fn from_mean_frames(mean: f64) -> Self {
        if mean < SHORT_PERIOD_FRAMES {
            PeriodClass::Short
        } else if mean > LONG_PERIOD_FRAMES {
            PeriodClass::Long
        } else {
            PeriodClass::Medium
        }
    }

    pub fn code(self) -> u8 {
        match self {
            PeriodClass::Short => 0,
            PeriodClass::Medium => 1,
            PeriodClass::Long => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(PeriodClass::Short),
            1 => Some(PeriodClass::Medium),
            2 => Some(PeriodClass::Long),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PeriodClass::Short => "short",
            PeriodClass::Medium => "medium",
            PeriodClass::Long => "long",
        }
    }

    pub const ALL: [PeriodClass; 3] = [PeriodClass::Short, PeriodClass::Medium, PeriodClass::Long];
}

/// One feature sequence with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    pub seq_len: usize,
    pub input_dim: usize,
    /// Row-major `seq_len × input_dim` features.
    pub features: Vec<f32>,
    /// Cycle intervals sorted by midpoint, pairwise disjoint.
    pub cycles: Vec<Interval>,
    pub period_class: PeriodClass,
    pub seed: u64,
}

impl SequenceSample {
    pub fn true_count(&self) -> usize {
        self.cycles.len()
    }

    pub fn features_tensor(&self) -> Tensor {
        let data = self.features.iter().map(|&v| f64::from(v)).collect();
        Tensor::matrix(self.seq_len, self.input_dim, data).expect("sample layout")
    }

    /// Mean cycle duration in frames.
    pub fn mean_period_frames(&self) -> f64 {
        if self.cycles.is_empty() {
            return 0.0;
        }
        // durations are whole frames; rounding removes float error at the class boundaries
        let total: f64 = self
            .cycles
            .iter()
            .map(|c| (c.dur() * self.seq_len as f64).round())
            .sum();
        total / self.cycles.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub seq_len: usize,
    pub input_dim: usize,
    /// Inclusive `[min, max]` number of planted cycles.
    pub count_range: [usize; 2],
    /// Inclusive `[min, max]` base period in frames.
    pub period_range: [usize; 2],
    /// Number of latent trajectory dimensions mixed into the feature channels.
    pub motif_dim: usize,
    pub motif_amplitude: f64,
    pub noise_std: f64,
    pub interruption_probability: f64,
    pub background_drift_std: f64,
    pub master_seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            seq_len: 128,
            input_dim: 16,
            count_range: [2, 8],
            period_range: [8, 40],
            motif_dim: 4,
            motif_amplitude: 1.0,
            noise_std: 0.05,
            interruption_probability: 0.2,
            background_drift_std: 0.02,
            master_seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let [n_min, n_max] = self.count_range;
        let [p_min, p_max] = self.period_range;
        if self.seq_len == 0 {
            return Err(Error::config("generator.seq_len", "must be >= 1"));
        }
        if self.input_dim == 0 {
            return Err(Error::config("generator.input_dim", "must be >= 1"));
        }
        if self.motif_dim == 0 {
            return Err(Error::config("generator.motif_dim", "must be >= 1"));
        }
        if n_min > n_max {
            return Err(Error::config("generator.count_range", "min exceeds max"));
        }
        if p_min < 2 || p_min > p_max {
            return Err(Error::config(
                "generator.period_range",
                "needs 2 <= min <= max frames",
            ));
        }
        if n_max * p_min > self.seq_len {
            return Err(Error::config(
                "generator.count_range",
                format!(
                    "{n_max} cycles of at least {p_min} frames do not fit in {} frames",
                    self.seq_len
                ),
            ));
        }
        for (field, v) in [
            ("generator.noise_std", self.noise_std),
            ("generator.background_drift_std", self.background_drift_std),
            ("generator.motif_amplitude", self.motif_amplitude),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(field, format!("must be finite and >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.interruption_probability) {
            return Err(Error::config(
                "generator.interruption_probability",
                "must lie in [0, 1]",
            ));
        }
        Ok(())
    }

    /// Seed of sample `index`.
    pub fn sample_seed(&self, index: u64) -> u64 {
        splitmix64(self.master_seed ^ splitmix64(index.wrapping_add(0x5151_5151)))
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Smooth trajectory over a unit phase, mixed into feature channels.
struct Motif {
    /// `[motif_dim][harmonic]` cosine and sine coefficients.
    cos: Vec<[f64; MOTIF_HARMONICS]>,
    sin: Vec<[f64; MOTIF_HARMONICS]>,
    /// `[input_dim][motif_dim]` mixing matrix.
    mix: Vec<Vec<f64>>,
    offset: Vec<f64>,
}

impl Motif {
    fn random<R: Rng>(motif_dim: usize, input_dim: usize, amplitude: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut coeffs = || {
            let mut c = [0.0; MOTIF_HARMONICS];
            for (h, v) in c.iter_mut().enumerate() {
                *v = normal.sample(rng) / (h as f64 + 1.0);
            }
            c
        };
        let cos: Vec<_> = (0..motif_dim).map(|_| coeffs()).collect();
        let sin: Vec<_> = (0..motif_dim).map(|_| coeffs()).collect();
        let scale = amplitude * (2.0 / motif_dim as f64).sqrt();
        let mix = (0..input_dim)
            .map(|_| (0..motif_dim).map(|_| normal.sample(rng) * scale).collect())
            .collect();
        let offset = (0..motif_dim).map(|_| normal.sample(rng)).collect();
        Motif { cos, sin, mix, offset }
    }

    /// Feature vector at phase `phi ∈ [0, 1]`; zero at both ends.
    fn at(&self, phi: f64, gain: f64, out: &mut [f64]) {
        let envelope = (PI * phi).sin();
        let latent: Vec<f64> = (0..self.cos.len())
            .map(|k| {
                let mut v = self.offset[k];
                for h in 0..MOTIF_HARMONICS {
                    let w = 2.0 * PI * (h + 1) as f64 * phi;
                    v += self.cos[k][h] * w.cos() + self.sin[k][h] * w.sin();
                }
                v * envelope * gain
            })
            .collect();
        for (o, row) in out.iter_mut().zip(&self.mix) {
            *o += row.iter().zip(&latent).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

/// Draws the cycle lengths and gaps of one sequence.
fn layout<R: Rng>(cfg: &GeneratorConfig, count: usize, rng: &mut R) -> Result<(Vec<usize>, Vec<usize>)> {
    let t = cfg.seq_len;
    let [p_min, p_max] = cfg.period_range;
    if count == 0 {
        return Ok((Vec::new(), vec![t]));
    }
    let min_total = count * p_min + (count - 1);
    if min_total > t {
        return Err(Error::Generation(format!(
            "{count} cycles of {p_min}+ frames with separating gaps need {min_total} frames, have {t}"
        )));
    }
    let cap = ((t - (count - 1)) / count).min(p_max).max(p_min);
    let base = rng.random_range(p_min as f64..=cap as f64);
    let mut lengths: Vec<usize> = (0..count)
        .map(|_| {
            let jitter = 1.0 + rng.random_range(-PERIOD_JITTER..=PERIOD_JITTER);
            ((base * jitter).round() as usize).clamp(p_min.max(2), p_max.max(2))
        })
        .collect();
    while lengths.iter().sum::<usize>() + (count - 1) > t {
        let i = (0..count).max_by_key(|&i| (lengths[i], std::cmp::Reverse(i))).unwrap();
        lengths[i] -= 1;
    }
    // Spare frames go to the count+1 gaps; interior gaps keep one frame each.
    let spare = t - lengths.iter().sum::<usize>() - (count - 1);
    let mut gaps = vec![0usize; count + 1];
    for g in gaps.iter_mut().take(count).skip(1) {
        *g = 1;
    }
    let weights: Vec<f64> = (0..=count).map(|_| rng.random_range(0.0..1.0)).collect();
    let total_w: f64 = weights.iter().sum();
    let mut given = 0;
    for (g, w) in gaps.iter_mut().zip(&weights) {
        let share = ((w / total_w) * spare as f64).floor() as usize;
        *g += share;
        given += share;
    }
    gaps[rng.random_range(0..=count)] += spare - given;
    Ok((lengths, gaps))
}

pub fn generate_sample(cfg: &GeneratorConfig, index: u64) -> Result<SequenceSample> {
    cfg.validate()?;
    let seed = cfg.sample_seed(index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t, c) = (cfg.seq_len, cfg.input_dim);

    let motif = Motif::random(cfg.motif_dim, c, cfg.motif_amplitude, &mut rng);
    let distractor = Motif::random(cfg.motif_dim, c, cfg.motif_amplitude, &mut rng);
    let count = rng.random_range(cfg.count_range[0]..=cfg.count_range[1]);
    let (lengths, gaps) = layout(cfg, count, &mut rng)?;

    let mut frames = vec![0.0f64; t * c];

    // Drifting background everywhere; cycles are added on top.
    let drift = Normal::new(0.0, cfg.background_drift_std.max(f64::MIN_POSITIVE)).unwrap();
    let mut level = vec![0.0; c];
    for f in 0..t {
        for (ch, l) in level.iter_mut().enumerate() {
            if cfg.background_drift_std > 0.0 {
                *l = BACKGROUND_DECAY * *l + drift.sample(&mut rng);
            }
            frames[f * c + ch] = *l;
        }
    }

    let mut cycles = Vec::with_capacity(count);
    let mut cursor = gaps[0];
    for (k, &len) in lengths.iter().enumerate() {
        let gain = 1.0 + rng.random_range(-0.1..=0.1);
        for f in 0..len {
            let phi = (f as f64 + 0.5) / len as f64;
            motif.at(phi, gain, &mut frames[(cursor + f) * c..(cursor + f + 1) * c]);
        }
        cycles.push(Interval::from_endpoints(
            cursor as f64 / t as f64,
            (cursor + len) as f64 / t as f64,
        )?);
        cursor += len + gaps[k + 1];
    }

    if rng.random_bool(cfg.interruption_probability) {
        // One-off distractor inside the widest gap, clear of the cycles on both sides.
        let (widest, &width) = gaps.iter().enumerate().max_by_key(|&(i, g)| (*g, std::cmp::Reverse(i))).unwrap();
        if width >= 6 {
            let len = rng.random_range(4..=width - 2);
            let gap_start = gaps[..widest].iter().sum::<usize>() + lengths[..widest].iter().sum::<usize>();
            let start = gap_start + 1 + rng.random_range(0..=width - 2 - len);
            for f in 0..len {
                let phi = (f as f64 + 0.5) / len as f64;
                distractor.at(phi, 1.0, &mut frames[(start + f) * c..(start + f + 1) * c]);
            }
        }
    }

    if cfg.noise_std > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_std).unwrap();
        for v in frames.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }

    let mean = if count == 0 {
        0.0
    } else {
        lengths.iter().sum::<usize>() as f64 / count as f64
    };
    Ok(SequenceSample {
        seq_len: t,
        input_dim: c,
        features: frames.into_iter().map(|v| v as f32).collect(),
        cycles,
        period_class: PeriodClass::from_mean_frames(mean),
        seed,
    })
}

/// Random channel permutation, per-channel sign flips and optional time
/// reversal. The generator's distribution is invariant under all three, so the
/// result is another draw with consistently transformed annotations.
pub fn augment<R: Rng + ?Sized>(sample: &SequenceSample, rng: &mut R) -> SequenceSample {
    let (t, c) = (sample.seq_len, sample.input_dim);
    let mut channels: Vec<usize> = (0..c).collect();
    channels.shuffle(rng);
    let signs: Vec<f32> = (0..c).map(|_| if rng.random_bool(0.5) { -1.0 } else { 1.0 }).collect();
    let reverse = rng.random_bool(0.5);
    let mut features = vec![0.0f32; t * c];
    for f in 0..t {
        let src = if reverse { t - 1 - f } else { f };
        for (ch, (&from, &sign)) in channels.iter().zip(&signs).enumerate() {
            features[f * c + ch] = sign * sample.features[src * c + from];
        }
    }
    let cycles = if reverse {
        sample
            .cycles
            .iter()
            .rev()
            .map(|iv| Interval::new(1.0 - iv.mid(), iv.dur()).expect("mirrored interval stays valid"))
            .collect()
    } else {
        sample.cycles.clone()
    };
    SequenceSample {
        features,
        cycles,
        ..sample.clone()
    }
}

/// Train/validation/test samples drawn from consecutive, disjoint index ranges.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<SequenceSample>,
    pub val: Vec<SequenceSample>,
    pub test: Vec<SequenceSample>,
}

pub fn generate_split(cfg: &GeneratorConfig, n_train: usize, n_val: usize, n_test: usize) -> Result<DatasetSplit> {
    let range = |start: usize, n: usize| -> Result<Vec<SequenceSample>> {
        (start..start + n).map(|i| generate_sample(cfg, i as u64)).collect()
    };
    Ok(DatasetSplit {
        train: range(0, n_train)?,
        val: range(n_train, n_val)?,
        test: range(n_train + n_val, n_test)?,
    })
}
