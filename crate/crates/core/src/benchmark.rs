//! Spurious-correlation benchmark: attention pooling against the
//! mean-pooling ablation on synthetic bags.

use serde::{Deserialize, Serialize};

use crate::bagio::Bag;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport};
use crate::milmodel::{attention_weights, AttentionKind, ModelParams};
use crate::synthbench::{bag_background, generate, instance_role, Role, SynthSpec};
use crate::training::{train, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub spec: SynthSpec,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            spec: SynthSpec::default(),
            train: TrainConfig {
                lr: 1e-2,
                epochs: 60,
                batch_bags: 32,
                ..Default::default()
            },
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResult {
    pub report: EvalReport,
    /// Group accuracies weighted by the training split's group frequencies.
    pub train_weighted_acc: f64,
    /// Mean attention weight of core and of spurious instances.
    pub alpha_core: f64,
    pub alpha_spurious: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub attention: ModelResult,
    pub uniform: ModelResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub runs: Vec<SeedResult>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

impl BenchReport {
    fn over(&self, f: impl Fn(&SeedResult) -> f64) -> f64 {
        mean(self.runs.iter().map(f))
    }

    /// Mean over seeds of attention worst-group minus uniform worst-group.
    pub fn worst_group_gap(&self) -> f64 {
        self.over(|r| {
            r.attention.report.worst_group_acc.unwrap_or(0.0) - r.uniform.report.worst_group_acc.unwrap_or(0.0)
        })
    }

    /// Mean over seeds of |attention - uniform| train-weighted accuracy.
    pub fn weighted_avg_gap(&self) -> f64 {
        self.over(|r| (r.attention.train_weighted_acc - r.uniform.train_weighted_acc).abs())
    }

    /// Mean over seeds of |attention - uniform| balanced test accuracy.
    pub fn balanced_avg_gap(&self) -> f64 {
        self.over(|r| (r.attention.report.avg_acc - r.uniform.report.avg_acc).abs())
    }
}

/// Mean α over core instances and over spurious instances.
pub fn attention_mass(params: &ModelParams, bags: &[Bag], spec: &SynthSpec) -> Result<(f64, f64)> {
    let (mut core, mut spur) = ((0.0, 0usize), (0.0, 0usize));
    for bag in bags {
        let alpha = attention_weights(params, bag.embedding_matrix().view())?;
        for (inst, a) in bag.instances.iter().zip(alpha.iter()) {
            match instance_role(spec, inst) {
                Some(Role::Core) => {
                    core.0 += a;
                    core.1 += 1;
                }
                Some(Role::Spurious) => {
                    spur.0 += a;
                    spur.1 += 1;
                }
                None => {}
            }
        }
    }
    if core.1 == 0 || spur.1 == 0 {
        return Err(Error::Protocol("bags lack core or spurious instances".into()));
    }
    Ok((core.0 / core.1 as f64, spur.0 / spur.1 as f64))
}

/// Group accuracies weighted by how often each (class, background) group
/// occurs in the training split.
pub fn train_weighted_accuracy(report: &EvalReport, train_bags: &[Bag], spec: &SynthSpec) -> Result<f64> {
    let mut counts = [0usize; 4];
    for bag in train_bags {
        let b = bag_background(spec, bag)
            .ok_or_else(|| Error::Protocol(format!("bag {} has no background instance", bag.image_id)))?;
        counts[2 * bag.label + b] += 1;
    }
    let total: usize = counts.iter().sum();
    let mut acc = 0.0;
    for (g, &n) in counts.iter().enumerate() {
        if n == 0 {
            continue;
        }
        let a = report
            .per_group_acc
            .get(&(g as u32))
            .ok_or_else(|| Error::Protocol(format!("test split lacks group {g}")))?;
        acc += a * n as f64 / total as f64;
    }
    Ok(acc)
}

fn fit(kind: AttentionKind, cfg: &BenchConfig, seed: u64, train_bags: &[Bag], test: &[Bag]) -> Result<ModelResult> {
    let spec = SynthSpec { seed, ..cfg.spec.clone() };
    let mut tcfg = cfg.train.clone();
    tcfg.seed = seed;
    tcfg.model.attention = kind;
    let dims = crate::training::model_dims(&spec.manifest(crate::bagio::Split::Train));
    let out = train(train_bags, dims, &tcfg)?;
    let report = evaluate(&out.params, test)?;
    let (alpha_core, alpha_spurious) = attention_mass(&out.params, test, &spec)?;
    Ok(ModelResult {
        train_weighted_acc: train_weighted_accuracy(&report, train_bags, &spec)?,
        report,
        alpha_core,
        alpha_spurious,
    })
}

/// Trains both pooling variants per seed on freshly generated data.
pub fn run_spurious_benchmark(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.seeds.is_empty() {
        return Err(Error::Config("benchmark needs at least one seed".into()));
    }
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let data = generate(&SynthSpec { seed, ..cfg.spec.clone() })?;
        runs.push(SeedResult {
            seed,
            attention: fit(cfg.train.model.attention, cfg, seed, &data.train, &data.test)?,
            uniform: fit(AttentionKind::Uniform, cfg, seed, &data.train, &data.test)?,
        });
    }
    Ok(BenchReport { runs })
}
