//! Synthetic bags with planted core and background concepts, and
//! embedding-space corruptions.
//!
//! Concepts are split into four equal blocks of `C / 4`: core concepts of
//! class 0, core concepts of class 1, background 0, background 1. A bag of
//! class `y` with background `b` holds `n_core` instances around the class
//! mean `μ_y` and `n_spur` instances around the background mean `β_b`. The
//! four means are orthonormal. In the training split the background agrees
//! with the class with probability `spurious_corr`; the test split is
//! balanced over the four (class, background) groups with
//! `group_id = 2 y + b`.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bagio::{Bag, DatasetManifest, Instance, Split};
use crate::error::{Error, Result};
use crate::numeric::{seeded_rng, softmax};

const MEANS_STREAM: u64 = 1 << 62;
const BAG_STREAM: u64 = (1 << 62) | (1 << 48);
const CORRUPT_STREAM: u64 = (1 << 62) | (1 << 49);

/// Logit bonus of the planted concept in synthetic clip scores.
pub const PLANTED_LOGIT: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_train: usize,
    pub n_test: usize,
    #[serde(rename = "D")]
    pub embed_dim: usize,
    #[serde(rename = "C")]
    pub num_concepts: usize,
    pub num_classes: usize,
    /// Probability that a training bag's background matches its class.
    pub spurious_corr: f64,
    pub n_core: usize,
    pub n_spur: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_train: 800,
            n_test: 400,
            embed_dim: 16,
            num_concepts: 12,
            num_classes: 2,
            spurious_corr: 0.95,
            n_core: 2,
            n_spur: 3,
            noise_sigma: 0.5,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes != 2 {
            return bad(format!("synthetic benchmark is binary, got num_classes = {}", self.num_classes));
        }
        if self.n_core == 0 {
            return bad("n_core must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.spurious_corr) {
            return bad(format!("spurious_corr must lie in [0, 1], got {}", self.spurious_corr));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and non-negative".into());
        }
        if self.embed_dim < 4 {
            return bad("D must be at least 4 to hold four orthonormal means".into());
        }
        if self.num_concepts < 4 || !self.num_concepts.is_multiple_of(4) {
            return bad(format!("C must be a positive multiple of 4, got {}", self.num_concepts));
        }
        if self.n_train == 0 || self.n_test == 0 || !self.n_test.is_multiple_of(4) {
            return bad("n_train must be positive and n_test a positive multiple of 4".into());
        }
        Ok(())
    }

    fn block(&self) -> usize {
        self.num_concepts / 4
    }

    pub fn core_concepts(&self, class: usize) -> std::ops::Range<usize> {
        let k = self.block();
        class * k..(class + 1) * k
    }

    pub fn background_concepts(&self, background: usize) -> std::ops::Range<usize> {
        let k = self.block();
        (2 + background) * k..(3 + background) * k
    }

    pub fn role_of(&self, concept_id: usize) -> Role {
        if concept_id < 2 * self.block() {
            Role::Core
        } else {
            Role::Spurious
        }
    }

    pub fn concept_names(&self) -> Vec<String> {
        (0..self.num_concepts)
            .map(|c| {
                let k = self.block();
                let (kind, owner) = if c < 2 * k { ("core", c / k) } else { ("bg", c / k - 2) };
                format!("{kind}{owner}_{}", c % k)
            })
            .collect()
    }

    pub fn manifest(&self, split: Split) -> DatasetManifest {
        DatasetManifest {
            num_classes: self.num_classes,
            embed_dim: self.embed_dim,
            num_concepts: self.num_concepts,
            concept_names: self.concept_names(),
            split,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Core,
    Spurious,
}

/// Role of an instance from its planted concept id.
pub fn instance_role(spec: &SynthSpec, instance: &Instance) -> Option<Role> {
    instance.concept_ids.first().map(|&c| spec.role_of(c))
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub train: Vec<Bag>,
    pub test: Vec<Bag>,
    /// Class means then background means, each of length `D`.
    pub means: Vec<Array1<f64>>,
}

/// Four orthonormal vectors in `R^D` from the QR factorization of a seeded
/// Gaussian matrix: `μ_0, μ_1, β_0, β_1`.
pub fn orthonormal_means(spec: &SynthSpec) -> Vec<Array1<f64>> {
    let mut rng = seeded_rng(spec.seed, MEANS_STREAM);
    let g = DMatrix::<f64>::from_fn(spec.embed_dim, 4, |_, _| StandardNormal.sample(&mut rng));
    let q = g.qr().q();
    (0..4)
        .map(|j| Array1::from_iter(q.column(j).iter().copied()))
        .collect()
}

fn planted_clip(c: usize, planted: usize) -> Vec<f64> {
    let logits: Vec<f64> = (0..c)
        .map(|k| if k == planted { PLANTED_LOGIT } else { 0.0 })
        .collect();
    softmax(&logits)
}

fn sample_instance(
    spec: &SynthSpec,
    mean: &Array1<f64>,
    concepts: std::ops::Range<usize>,
    noise: &Normal<f64>,
    rng: &mut ChaCha8Rng,
) -> Instance {
    let planted = rng.random_range(concepts);
    let embedding = mean.iter().map(|m| m + noise.sample(rng)).collect();
    Instance {
        embedding,
        clip_scores: planted_clip(spec.num_concepts, planted),
        concept_ids: vec![planted],
        bbox: None,
        mask_area: None,
    }
}

fn make_bag(
    spec: &SynthSpec,
    means: &[Array1<f64>],
    split: Split,
    index: usize,
) -> Bag {
    let split_tag = match split {
        Split::Train => 0u64,
        Split::Val => 1,
        Split::Test => 2,
    };
    let mut rng = seeded_rng(spec.seed, BAG_STREAM | (split_tag << 40) | index as u64);
    let (label, background, group_id) = match split {
        Split::Test => {
            let g = index % 4;
            (g / 2, g % 2, Some(g as u32))
        }
        _ => {
            let y = index % 2;
            let agrees = rng.random_bool(spec.spurious_corr);
            (y, if agrees { y } else { 1 - y }, None)
        }
    };
    let noise = Normal::new(0.0, spec.noise_sigma).expect("sigma validated");
    let mut instances: Vec<Instance> = (0..spec.n_core)
        .map(|_| sample_instance(spec, &means[label], spec.core_concepts(label), &noise, &mut rng))
        .collect();
    for _ in 0..spec.n_spur {
        instances.push(sample_instance(
            spec,
            &means[2 + background],
            spec.background_concepts(background),
            &noise,
            &mut rng,
        ));
    }
    instances.shuffle(&mut rng);
    let prefix = if split == Split::Test { "test" } else { "train" };
    Bag {
        image_id: format!("{prefix}-{index:05}"),
        label,
        group_id,
        instances,
    }
}

/// Background index of a generated bag, from its spurious instances.
pub fn bag_background(spec: &SynthSpec, bag: &Bag) -> Option<usize> {
    bag.instances.iter().find_map(|i| {
        let c = *i.concept_ids.first()?;
        (spec.role_of(c) == Role::Spurious).then(|| c / spec.block() - 2)
    })
}

pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let means = orthonormal_means(spec);
    let train = (0..spec.n_train)
        .into_par_iter()
        .map(|i| make_bag(spec, &means, Split::Train, i))
        .collect();
    let test = (0..spec.n_test)
        .into_par_iter()
        .map(|i| make_bag(spec, &means, Split::Test, i))
        .collect();
    Ok(SynthData { train, test, means })
}

/// Provenance record written next to generated bagpacks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub spec: SynthSpec,
    pub core_concepts: Vec<Vec<usize>>,
    pub background_concepts: Vec<Vec<usize>>,
    pub group_id_rule: String,
}

impl Sidecar {
    pub fn new(spec: &SynthSpec) -> Self {
        Self {
            spec: spec.clone(),
            core_concepts: (0..2).map(|y| spec.core_concepts(y).collect()).collect(),
            background_concepts: (0..2).map(|b| spec.background_concepts(b).collect()).collect(),
            group_id_rule: "2 * class + background".into(),
        }
    }
}

// ---------------------------------------------------------------------------
// corruptions

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussNoise,
    ShotNoise,
    BlurMix,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 3] = [Self::GaussNoise, Self::ShotNoise, Self::BlurMix];

    pub fn name(self) -> &'static str {
        match self {
            Self::GaussNoise => "gauss_noise",
            Self::ShotNoise => "shot_noise",
            Self::BlurMix => "blur_mix",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Self::GaussNoise => 0,
            Self::ShotNoise => 1,
            Self::BlurMix => 2,
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown corruption kind {s:?}")))
    }
}

/// Perturbs embeddings with severity-scaled noise; clip scores are kept.
///
/// * `gauss_noise`: additive `N(0, σ²)` with `σ = 0.1 s RMS(h)`.
/// * `shot_noise`: each coordinate scaled by `Poisson(λ) / λ`, `λ = 100 / s²`
///   (relative std `0.1 s`).
/// * `blur_mix`: `h ← (1 - w) h + w mean_bag(h)` with `w = 0.15 s`.
///
/// The random stream depends on the seed, kind and bag index but not on the
/// severity, so severities of one kind share their underlying draws.
pub fn corrupt(bags: &[Bag], kind: CorruptionKind, severity: u8, seed: u64) -> Result<Vec<Bag>> {
    if !(1..=5).contains(&severity) {
        return Err(Error::Config(format!("severity must lie in 1..=5, got {severity}")));
    }
    let s = severity as f64;
    Ok(bags
        .par_iter()
        .enumerate()
        .map(|(idx, bag)| {
            let stream = CORRUPT_STREAM | (kind.tag() << 40) | idx as u64;
            let mut rng = seeded_rng(seed, stream);
            let mut out = bag.clone();
            match kind {
                CorruptionKind::GaussNoise => {
                    for inst in &mut out.instances {
                        let d = inst.embedding.len().max(1) as f64;
                        let rms = (inst.embedding.iter().map(|v| v * v).sum::<f64>() / d).sqrt();
                        let sigma = 0.1 * s * rms;
                        for v in &mut inst.embedding {
                            let e: f64 = StandardNormal.sample(&mut rng);
                            *v += sigma * e;
                        }
                    }
                }
                CorruptionKind::ShotNoise => {
                    let lambda = 100.0 / (s * s);
                    let poisson = Poisson::new(lambda).expect("positive rate");
                    for inst in &mut out.instances {
                        for v in &mut inst.embedding {
                            *v *= poisson.sample(&mut rng) / lambda;
                        }
                    }
                }
                CorruptionKind::BlurMix => {
                    let w = 0.15 * s;
                    let mean = bag.embedding_matrix().mean_axis(ndarray::Axis(0));
                    if let Some(mean) = mean {
                        for inst in &mut out.instances {
                            for (v, m) in inst.embedding.iter_mut().zip(mean.iter()) {
                                *v = (1.0 - w) * *v + w * m;
                            }
                        }
                    }
                }
            }
            out
        })
        .collect())
}

/// Every (kind, severity 1..5) cell for the given kinds.
pub fn corruption_suite(
    bags: &[Bag],
    kinds: &[CorruptionKind],
    seed: u64,
) -> Result<Vec<crate::metrics::SuiteCell>> {
    let mut cells = Vec::with_capacity(kinds.len() * 5);
    for &kind in kinds {
        for severity in 1..=5u8 {
            cells.push(crate::metrics::SuiteCell {
                corruption: kind.name().to_string(),
                severity,
                bags: corrupt(bags, kind, severity, seed)?,
            });
        }
    }
    Ok(cells)
}
