//! Synthetic multimodal classification data.
//!
//! Each class has one fixed unit-norm prototype per modality. A sample of
//! class `y` observes `strength_m · μ[y][m] + N(0, σ_m²)` on modality `m`.
//! Lowering one modality's strength makes it the weak modality. Every sample
//! draws from its own RNG stream keyed by `(seed, index)`, so output never
//! depends on how generation is partitioned.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CpscError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySpec {
    pub dim: usize,
    /// Scale of the class prototype in this modality.
    pub strength: f64,
    /// Standard deviation of the ambient noise.
    pub noise: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    None,
    Gaussian,
    SaltPepper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AppliedAt {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    /// Noise strength ε.
    pub strength: f64,
    /// Modalities the corruption touches.
    pub modalities: Vec<usize>,
    pub applied_at: AppliedAt,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self {
            kind: CorruptionKind::None,
            strength: 0.0,
            modalities: Vec::new(),
            applied_at: AppliedAt::Test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSpec {
    pub classes: usize,
    pub samples: usize,
    pub modalities: Vec<ModalitySpec>,
    #[serde(default)]
    pub corruption: CorruptionSpec,
    pub seed: u64,
}

impl GenSpec {
    /// Two modalities of width 16 with the given signal strengths.
    pub fn imbalanced(strengths: &[f64], classes: usize, samples: usize, seed: u64) -> Self {
        Self {
            classes,
            samples,
            modalities: strengths
                .iter()
                .map(|&strength| ModalitySpec {
                    dim: 16,
                    strength,
                    noise: 0.5,
                })
                .collect(),
            corruption: CorruptionSpec::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CpscError::Config(m));
        if self.classes < 2 {
            return bad("need at least 2 classes".into());
        }
        if self.modalities.is_empty() {
            return bad("need at least one modality".into());
        }
        for (m, ms) in self.modalities.iter().enumerate() {
            if ms.dim == 0 {
                return bad(format!("modality {m} has zero width"));
            }
            if !(ms.strength >= 0.0) || !(ms.noise >= 0.0) {
                return bad(format!("modality {m}: strength and noise must be non-negative"));
            }
        }
        let c = &self.corruption;
        if !(c.strength >= 0.0) {
            return bad("corruption strength must be non-negative".into());
        }
        if let Some(&m) = c.modalities.iter().find(|&&m| m >= self.modalities.len()) {
            return bad(format!("corruption targets unknown modality {m}"));
        }
        Ok(())
    }

    pub fn input_dims(&self) -> Vec<usize> {
        self.modalities.iter().map(|m| m.dim).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub features: Vec<Vec<f64>>,
    pub label: usize,
    /// Noise-free signal per modality. Diagnostics only, never trained on.
    pub clean: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: GenSpec,
    /// `prototypes[class][modality]`, unit norm.
    pub prototypes: Vec<Vec<Vec<f64>>>,
    pub samples: Vec<LabeledSample>,
}

/// SplitMix64 finalizer, used to key per-sample RNG streams.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent RNG for `(seed, purpose, index)`.
pub fn stream_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(seed ^ mix(purpose)) ^ index))
}

const PROTOTYPE_STREAM: u64 = 1;
const SAMPLE_STREAM: u64 = 2;
const CORRUPTION_STREAM: u64 = 3;

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn prototypes(spec: &GenSpec) -> Vec<Vec<Vec<f64>>> {
    let mut rng = stream_rng(spec.seed, PROTOTYPE_STREAM, 0);
    (0..spec.classes)
        .map(|_| {
            spec.modalities
                .iter()
                .map(|ms| {
                    let v: Vec<f64> = (0..ms.dim).map(|_| gaussian(&mut rng)).collect();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    v.into_iter().map(|x| x / norm).collect()
                })
                .collect()
        })
        .collect()
}

impl Dataset {
    /// Samples `0..spec.samples`.
    pub fn generate(spec: &GenSpec) -> Result<Self> {
        Self::generate_range(spec, 0, spec.samples)
    }

    /// Samples `offset..offset + count` of the stream defined by `spec`.
    /// Disjoint ranges are i.i.d. draws sharing the same prototypes.
    pub fn generate_range(spec: &GenSpec, offset: usize, count: usize) -> Result<Self> {
        spec.validate()?;
        let prototypes = prototypes(spec);
        let samples = (offset..offset + count)
            .map(|i| {
                let mut rng = stream_rng(spec.seed, SAMPLE_STREAM, i as u64);
                let label = rng.random_range(0..spec.classes);
                let mut features = Vec::with_capacity(spec.modalities.len());
                let mut clean = Vec::with_capacity(spec.modalities.len());
                for (m, ms) in spec.modalities.iter().enumerate() {
                    let signal: Vec<f64> = prototypes[label][m].iter().map(|p| ms.strength * p).collect();
                    let observed = signal.iter().map(|s| s + ms.noise * gaussian(&mut rng)).collect();
                    features.push(observed);
                    clean.push(signal);
                }
                LabeledSample {
                    features,
                    label,
                    clean,
                }
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            prototypes,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Applies the spec's corruption to `samples`, drawing from per-sample
    /// streams offset by `stream`.
    pub fn corrupt_samples(samples: &mut [LabeledSample], corruption: &CorruptionSpec, seed: u64, stream: u64) {
        if corruption.kind == CorruptionKind::None || corruption.strength == 0.0 {
            return;
        }
        for &m in &corruption.modalities {
            let range = feature_range(samples, m);
            for (i, s) in samples.iter_mut().enumerate() {
                let mut rng = stream_rng(seed ^ mix(stream), CORRUPTION_STREAM + m as u64, i as u64);
                s.features[m] = corrupt(&s.features[m], corruption.kind, corruption.strength, range, &mut rng);
            }
        }
    }
}

/// Smallest and largest entry of modality `m` across `samples`.
pub fn feature_range(samples: &[LabeledSample], m: usize) -> (f64, f64) {
    samples
        .iter()
        .flat_map(|s| s.features[m].iter().copied())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)))
}

/// Salt-and-pepper replacement probability for strength `eps`.
pub fn salt_pepper_probability(eps: f64) -> f64 {
    (eps / 20.0).clamp(0.0, 1.0)
}

/// Gaussian: adds `N(0, ε²)` per entry. Salt-and-pepper: with probability
/// `min(ε/20, 1)` per entry, replaces it by `range.0` or `range.1` on a fair
/// coin.
pub fn corrupt<R: Rng>(features: &[f64], kind: CorruptionKind, eps: f64, range: (f64, f64), rng: &mut R) -> Vec<f64> {
    if eps == 0.0 {
        return features.to_vec();
    }
    match kind {
        CorruptionKind::None => features.to_vec(),
        CorruptionKind::Gaussian => features
            .iter()
            .map(|&x| {
                let z: f64 = rng.sample(StandardNormal);
                x + eps * z
            })
            .collect(),
        CorruptionKind::SaltPepper => {
            let p = salt_pepper_probability(eps);
            features
                .iter()
                .map(|&x| {
                    if rng.random::<f64>() < p {
                        if rng.random::<bool>() {
                            range.1
                        } else {
                            range.0
                        }
                    } else {
                        x
                    }
                })
                .collect()
        }
    }
}
