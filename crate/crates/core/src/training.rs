//! Losses, analytic gradients, Adam, and the training loop.
//!
//! For a mini-batch of `B_bags` bags holding `S` instances in total:
//!
//! ```text
//! L_cls     = (1/B_bags) Σ_j  -log softmax(logits_j)[y_j]
//! L_concept = -(1/S)     Σ_i  ẑ_i · ĉ_i        ĉ_i = clip_i / |clip_i|
//! L_total   = L_cls + λ L_concept
//! ```

use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bagio::{Bag, DatasetManifest};
use crate::error::{Error, Result};
use crate::milmodel::{forward, normalize_rows, Attention, ModelConfig, ModelDims, ModelParams, Tensors};
use crate::numeric::{log_sum_exp, seeded_rng, NORM_EPS};

/// Gradients share the parameter layout.
pub type GradientSet = Tensors;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum EasyHard {
    #[default]
    Off,
    On {
        warmup_epochs: usize,
        easy_quantile: f64,
    },
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub lambda_concept: f64,
    pub epochs: usize,
    pub batch_bags: usize,
    pub seed: u64,
    pub easy_hard: EasyHard,
    pub model: ModelConfig,
    /// Fill `wall_ms` in the epoch log. Off by default so logs are
    /// byte-reproducible.
    pub record_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            lambda_concept: 0.1,
            epochs: 50,
            batch_bags: 32,
            seed: 0,
            easy_hard: EasyHard::Off,
            model: ModelConfig::default(),
            record_timing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)".into());
        }
        if !(self.eps_adam > 0.0 && self.eps_adam.is_finite()) {
            return bad("eps_adam must be positive".into());
        }
        if !(self.lambda_concept >= 0.0 && self.lambda_concept.is_finite()) {
            return bad(format!("lambda_concept must be >= 0, got {}", self.lambda_concept));
        }
        if self.batch_bags == 0 {
            return bad("batch_bags must be at least 1".into());
        }
        if let EasyHard::On { easy_quantile, .. } = self.easy_hard {
            if !(easy_quantile > 0.0 && easy_quantile < 1.0) {
                return bad(format!("easy_quantile must lie in (0, 1), got {easy_quantile}"));
            }
        }
        self.model.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps_adam,
        }
    }
}

// ---------------------------------------------------------------------------
// losses

/// Mean cross-entropy over bags, log-sum-exp stable.
pub fn loss_cls(logits_batch: &[Array1<f64>], labels: &[usize]) -> Result<f64> {
    if logits_batch.len() != labels.len() {
        return Err(Error::Shape("logits and labels differ in length".into()));
    }
    if logits_batch.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (logits, &y) in logits_batch.iter().zip(labels) {
        if y >= logits.len() {
            return Err(Error::schema(
                "labels",
                "label",
                format!("{y} out of range for {} classes", logits.len()),
            ));
        }
        sum += log_sum_exp(logits.as_slice().expect("contiguous")) - logits[y];
    }
    Ok(sum / logits_batch.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConceptLoss {
    pub value: f64,
    /// Set when the batch held no segments; `value` is then 0.
    pub empty: bool,
}

/// `-(1/B) Σ_i ẑ_i · ĉ_i` over row-normalized matrices.
pub fn loss_concept(z_hat_all: ArrayView2<f64>, clip_hat_all: ArrayView2<f64>) -> Result<ConceptLoss> {
    if z_hat_all.dim() != clip_hat_all.dim() {
        return Err(Error::Shape(format!(
            "concept matrices {:?} vs {:?}",
            z_hat_all.dim(),
            clip_hat_all.dim()
        )));
    }
    let b = z_hat_all.nrows();
    if b == 0 {
        log::warn!("concept loss over an empty batch is defined as 0");
        return Ok(ConceptLoss { value: 0.0, empty: true });
    }
    let sum: f64 = z_hat_all
        .rows()
        .into_iter()
        .zip(clip_hat_all.rows())
        .map(|(a, c)| a.dot(&c))
        .sum();
    Ok(ConceptLoss {
        value: -sum / b as f64,
        empty: false,
    })
}

pub fn loss_total(cls: f64, concept: f64, lambda_concept: f64) -> f64 {
    cls + lambda_concept * concept
}

/// Batch-level scalars from one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub total: f64,
    pub cls: f64,
    pub concept: f64,
    pub segments: usize,
    pub correct: usize,
    /// Max-softmax confidence and correctness per bag, batch order.
    pub per_bag: Vec<BagConfidence>,
}

/// Forward-only evaluation of the batch objective, built from the public
/// loss functions. Clip targets are not touched when `lambda_concept == 0`.
pub fn batch_loss(params: &ModelParams, bags: &[&Bag], lambda_concept: f64) -> Result<BatchLoss> {
    let mut logits = Vec::with_capacity(bags.len());
    let mut labels = Vec::with_capacity(bags.len());
    let mut z_hats = Vec::new();
    let mut clips = Vec::new();
    let mut per_bag = Vec::with_capacity(bags.len());
    for bag in bags {
        let trace = forward(params, bag.embedding_matrix().view())?;
        let probs = trace.probabilities();
        let pred = trace.predicted();
        per_bag.push(BagConfidence {
            confidence: probs[pred],
            correct: pred == bag.label,
        });
        if lambda_concept != 0.0 {
            clips.push(normalize_rows(&bag.clip_matrix()).0);
            z_hats.push(trace.z_hat.clone());
        }
        logits.push(trace.logits);
        labels.push(bag.label);
    }
    let cls = loss_cls(&logits, &labels)?;
    let segments: usize = bags.iter().map(|b| b.len()).sum();
    let concept = if lambda_concept != 0.0 {
        let zv: Vec<_> = z_hats.iter().map(|m| m.view()).collect();
        let cv: Vec<_> = clips.iter().map(|m| m.view()).collect();
        let z_all = ndarray::concatenate(Axis(0), &zv).map_err(|e| Error::Shape(e.to_string()))?;
        let c_all = ndarray::concatenate(Axis(0), &cv).map_err(|e| Error::Shape(e.to_string()))?;
        loss_concept(z_all.view(), c_all.view())?.value
    } else {
        0.0
    };
    Ok(BatchLoss {
        total: loss_total(cls, concept, lambda_concept),
        cls,
        concept,
        segments,
        correct: per_bag.iter().filter(|c| c.correct).count(),
        per_bag,
    })
}

// ---------------------------------------------------------------------------
// analytic gradients

struct BagPass {
    grads: GradientSet,
    cls: f64,
    /// Σ_i ẑ_i · ĉ_i over the bag's instances.
    alignment: f64,
    confidence: BagConfidence,
}

fn bag_backward(
    params: &ModelParams,
    bag: &Bag,
    cls_scale: f64,
    concept_scale: f64,
) -> Result<BagPass> {
    let h = bag.embedding_matrix();
    let trace = forward(params, h.view())?;
    let t = &params.tensors;
    let mut g = t.zeros_like();

    // classifier
    let probs = Array1::from(trace.probabilities());
    let pred = trace.predicted();
    let cls = log_sum_exp(trace.logits.as_slice().expect("contiguous")) - trace.logits[bag.label];
    let mut g_logits = probs.clone();
    g_logits[bag.label] -= 1.0;
    g_logits *= cls_scale;
    g.classifier_w = outer(&g_logits, &trace.c_agg);
    g.classifier_b = g_logits.clone();
    let g_c = t.classifier_w.t().dot(&g_logits);

    // aggregation and attention softmax
    let pooled = if params.config.aggregate_normalized { &trace.z_hat } else { &trace.z };
    let g_alpha = pooled.dot(&g_c);
    let mean_g = trace.alpha.dot(&g_alpha);
    let g_scores = (&trace.alpha * &(g_alpha - mean_g)) / params.config.temperature;
    match (&t.attention, &mut g.attention) {
        (Attention::Mlp { score, .. }, Attention::Mlp { hidden: gh, score: gs }) => {
            let act = trace.attn_hidden.as_ref().expect("mlp trace carries activations");
            *gs = act.t().dot(&g_scores);
            let mut g_pre = outer(&g_scores, score);
            g_pre *= &act.mapv(|a| 1.0 - a * a);
            *gh = standard(g_pre.t().dot(&h));
        }
        (Attention::Linear { .. }, Attention::Linear { w: gw }) => {
            *gw = h.t().dot(&g_scores);
        }
        _ => {}
    }

    // per-instance concept gradients
    let g_pooled = outer(&trace.alpha, &g_c);
    let mut g_zhat = if params.config.aggregate_normalized {
        g_pooled.clone()
    } else {
        Array2::zeros(trace.z_hat.raw_dim())
    };
    let mut alignment = 0.0;
    if concept_scale != 0.0 {
        let (clip_hat, _) = normalize_rows(&bag.clip_matrix());
        alignment = trace
            .z_hat
            .rows()
            .into_iter()
            .zip(clip_hat.rows())
            .map(|(a, c)| a.dot(&c))
            .sum();
        g_zhat.scaled_add(-concept_scale, &clip_hat);
    }
    let mut g_z = normalize_rows_backward(&trace.z_hat, &trace.z_norms, &g_zhat);
    if !params.config.aggregate_normalized {
        g_z += &g_pooled;
    }
    g.concept_head = standard(g_z.t().dot(&h));

    if let Some(name) = g.all_finite() {
        return Err(Error::Numerical {
            tensor: format!("gradient of {name} (bag {})", bag.image_id),
        });
    }
    Ok(BagPass {
        grads: g,
        cls,
        alignment,
        confidence: BagConfidence {
            confidence: probs[pred],
            correct: pred == bag.label,
        },
    })
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let col = a.view().insert_axis(Axis(1));
    let row = b.view().insert_axis(Axis(0));
    standard(col.dot(&row))
}

/// Matrix products of transposed views come back column-major; parameter
/// tensors are kept row-major.
fn standard(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

/// Backward of `ẑ = z / |z|` row-wise: `(g - ẑ (ẑ · g)) / |z|`, zero for
/// rows under the norm threshold.
fn normalize_rows_backward(z_hat: &Array2<f64>, norms: &Array1<f64>, g: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(g.raw_dim());
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let n = norms[i];
        if n < NORM_EPS {
            continue;
        }
        let zh = z_hat.row(i);
        let gi = g.row(i);
        let proj = zh.dot(&gi);
        row.assign(&((&gi - &(&zh * proj)) / n));
    }
    out
}

/// Exact gradients of `L_total` over a batch. Per-bag work runs in parallel;
/// contributions are summed in bag order so the result does not depend on
/// the worker count.
pub fn backward(params: &ModelParams, bags: &[&Bag], lambda_concept: f64) -> Result<(BatchLoss, GradientSet)> {
    if bags.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let segments: usize = bags.iter().map(|b| b.len()).sum();
    let cls_scale = 1.0 / bags.len() as f64;
    let concept_scale = lambda_concept / segments as f64;

    let passes: Vec<BagPass> = bags
        .par_iter()
        .map(|bag| bag_backward(params, bag, cls_scale, concept_scale))
        .collect::<Result<_>>()?;

    let mut grads = params.tensors.zeros_like();
    let mut cls_sum = 0.0;
    let mut alignment = 0.0;
    let mut per_bag = Vec::with_capacity(passes.len());
    for pass in passes {
        grads.add_scaled(&pass.grads, 1.0);
        cls_sum += pass.cls;
        alignment += pass.alignment;
        per_bag.push(pass.confidence);
    }
    let cls = cls_sum / bags.len() as f64;
    let concept = if lambda_concept != 0.0 { -alignment / segments as f64 } else { 0.0 };
    Ok((
        BatchLoss {
            total: loss_total(cls, concept, lambda_concept),
            cls,
            concept,
            segments,
            correct: per_bag.iter().filter(|c| c.correct).count(),
            per_bag,
        },
        grads,
    ))
}

// ---------------------------------------------------------------------------
// Adam

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        TrainConfig::default().adam()
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &Tensors) -> Self {
        let zeros: Vec<Vec<f64>> = params.named().iter().map(|t| vec![0.0; t.data.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update at step `t >= 1`.
pub fn adam_step(
    params: &mut Tensors,
    grads: &GradientSet,
    state: &mut AdamState,
    t: u64,
    cfg: &AdamConfig,
) -> Result<()> {
    if t == 0 {
        return Err(Error::Config("Adam step index starts at 1".into()));
    }
    let grads: Vec<&[f64]> = grads.named().into_iter().map(|g| g.data).collect();
    let slices = params.slices_mut();
    if slices.len() != grads.len() || slices.len() != state.m.len() {
        return Err(Error::Shape("optimizer state does not match parameters".into()));
    }
    let bc1 = 1.0 - cfg.beta1.powf(t as f64);
    let bc2 = 1.0 - cfg.beta2.powf(t as f64);
    for (((theta, g), m), v) in slices.into_iter().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        if theta.len() != g.len() {
            return Err(Error::Shape("gradient tensor size mismatch".into()));
        }
        for k in 0..theta.len() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            theta[k] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// batch scheduling

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BagConfidence {
    pub confidence: f64,
    pub correct: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchKind {
    Plain,
    Easy,
    Hard,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub batches: Vec<Vec<usize>>,
    pub kinds: Vec<BatchKind>,
    /// Why the plan fell back to plain shuffling, if it did.
    pub note: Option<String>,
}

/// Shuffled indices `0..n` cut into batches of `batch` bags.
pub fn plain_batches(n: usize, batch: usize, rng: &mut impl Rng) -> BatchPlan {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let batches: Vec<Vec<usize>> = order.chunks(batch).map(|c| c.to_vec()).collect();
    BatchPlan {
        kinds: vec![BatchKind::Plain; batches.len()],
        batches,
        note: None,
    }
}

/// Easy/hard alternation after warm-up.
///
/// Bags are ranked by max-softmax confidence (descending, ties by index).
/// The top `easy_quantile` share that were classified correctly form the
/// easy pool; everything else, including misclassified high-confidence
/// bags, forms the hard pool. Each pool is shuffled and batches alternate
/// easy, hard, easy, ... with leftovers of the longer pool at the end.
pub fn schedule_easy_hard(
    confidences: &[BagConfidence],
    epoch: usize,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> BatchPlan {
    let n = confidences.len();
    let (warmup, quantile) = match cfg.easy_hard {
        EasyHard::On { warmup_epochs, easy_quantile } if epoch > warmup_epochs => {
            (warmup_epochs, easy_quantile)
        }
        _ => return plain_batches(n, cfg.batch_bags, rng),
    };
    let _ = warmup;

    let mut ranked: Vec<usize> = (0..n).collect();
    ranked.sort_by(|&a, &b| {
        confidences[b]
            .confidence
            .total_cmp(&confidences[a].confidence)
            .then(a.cmp(&b))
    });
    let easy_slots = (quantile * n as f64).floor() as usize;
    let mut easy = Vec::new();
    let mut hard = Vec::new();
    for (rank, &i) in ranked.iter().enumerate() {
        if rank < easy_slots && confidences[i].correct {
            easy.push(i);
        } else {
            hard.push(i);
        }
    }
    if easy.is_empty() || hard.is_empty() {
        let mut plan = plain_batches(n, cfg.batch_bags, rng);
        let which = if easy.is_empty() { "easy" } else { "hard" };
        log::info!("epoch {epoch}: {which} pool empty, using plain shuffling");
        plan.note = Some(format!("{which} pool empty"));
        return plan;
    }
    hard.sort_unstable();
    easy.shuffle(rng);
    hard.shuffle(rng);

    let mut easy_batches = easy.chunks(cfg.batch_bags).map(|c| c.to_vec());
    let mut hard_batches = hard.chunks(cfg.batch_bags).map(|c| c.to_vec());
    let mut batches = Vec::new();
    let mut kinds = Vec::new();
    loop {
        let e = easy_batches.next();
        let h = hard_batches.next();
        if e.is_none() && h.is_none() {
            break;
        }
        if let Some(b) = e {
            batches.push(b);
            kinds.push(BatchKind::Easy);
        }
        if let Some(b) = h {
            batches.push(b);
            kinds.push(BatchKind::Hard);
        }
    }
    BatchPlan {
        batches,
        kinds,
        note: None,
    }
}

// ---------------------------------------------------------------------------
// training loop

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_cls: f64,
    pub loss_concept: f64,
    pub loss_total: f64,
    pub train_acc: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
}

pub fn model_dims(manifest: &DatasetManifest) -> ModelDims {
    ModelDims {
        embed_dim: manifest.embed_dim,
        num_concepts: manifest.num_concepts,
        num_classes: manifest.num_classes,
    }
}

/// Trains from a seeded initialization. Epoch metrics are accumulated from
/// the forward passes made while training (before each batch's update).
pub fn train(bags: &[Bag], dims: ModelDims, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if bags.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let params = ModelParams::init(dims, cfg.model.clone(), cfg.seed)?;
    train_from(params, bags, cfg)
}

/// Continues training from given parameters.
pub fn train_from(mut params: ModelParams, bags: &[Bag], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    params.validate()?;
    let adam = cfg.adam();
    let mut state = AdamState::new(&params.tensors);
    let mut rng = seeded_rng(cfg.seed, 100);
    let mut step = 0u64;
    let mut confidences: Option<Vec<BagConfidence>> = None;
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let plan = match &confidences {
            Some(conf) => schedule_easy_hard(conf, epoch, cfg, &mut rng),
            None => plain_batches(bags.len(), cfg.batch_bags, &mut rng),
        };

        let mut cls_sum = 0.0;
        let mut alignment_sum = 0.0;
        let mut segments = 0usize;
        let mut correct = 0usize;
        let mut epoch_conf = vec![
            BagConfidence {
                confidence: 0.0,
                correct: false
            };
            bags.len()
        ];
        for batch in &plan.batches {
            let members: Vec<&Bag> = batch.iter().map(|&i| &bags[i]).collect();
            let (loss, grads) = backward(&params, &members, cfg.lambda_concept)?;
            step += 1;
            adam_step(&mut params.tensors, &grads, &mut state, step, &adam)?;

            cls_sum += loss.cls * members.len() as f64;
            alignment_sum += -loss.concept * loss.segments as f64;
            segments += loss.segments;
            correct += loss.correct;
            for (&i, c) in batch.iter().zip(loss.per_bag) {
                epoch_conf[i] = c;
            }
        }
        if let Some(name) = params.tensors.all_finite() {
            return Err(Error::Numerical { tensor: name.into() });
        }

        let loss_cls = cls_sum / bags.len() as f64;
        let loss_concept = if cfg.lambda_concept != 0.0 {
            -alignment_sum / segments as f64
        } else {
            0.0
        };
        log.push(EpochLog {
            epoch,
            loss_cls,
            loss_concept,
            loss_total: loss_total(loss_cls, loss_concept, cfg.lambda_concept),
            train_acc: correct as f64 / bags.len() as f64,
            wall_ms: if cfg.record_timing {
                started.elapsed().as_millis() as u64
            } else {
                0
            },
        });
        confidences = Some(epoch_conf);
    }
    Ok(TrainOutcome { params, log })
}

/// Writes the epoch log as CSV with a header row.
pub fn write_log_csv<W: std::io::Write>(log: &[EpochLog], mut out: W) -> std::io::Result<()> {
    writeln!(out, "epoch,loss_cls,loss_concept,loss_total,train_acc,wall_ms")?;
    for e in log {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            e.epoch, e.loss_cls, e.loss_concept, e.loss_total, e.train_acc, e.wall_ms
        )?;
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bagio::Instance;
    use crate::milmodel::AttentionKind;
    use ndarray::array;

    #[test]
    fn cls_loss_examples() {
        let l = loss_cls(&[Array1::zeros(4)], &[2]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-15);
        let l = loss_cls(&[array![0.0, 1e6, 0.0]], &[1]).unwrap();
        assert!(l.abs() < 1e-12);
        let a = loss_cls(&[array![0.3, -0.2]], &[0]).unwrap();
        let b = loss_cls(&[array![1.5, 0.1]], &[1]).unwrap();
        let ab = loss_cls(&[array![0.3, -0.2], array![1.5, 0.1]], &[0, 1]).unwrap();
        assert!((ab - (a + b) / 2.0).abs() < 1e-15);
        assert!(loss_cls(&[array![0.0, 0.0]], &[2]).is_err());
    }

    #[test]
    fn concept_loss_examples() {
        let z = array![[0.6, 0.8], [1.0, 0.0]];
        assert!((loss_concept(z.view(), z.view()).unwrap().value + 1.0).abs() < 1e-15);
        let orth = array![[-0.8, 0.6], [0.0, 1.0]];
        assert_eq!(loss_concept(z.view(), orth.view()).unwrap().value, 0.0);
        let opp = array![[0.6, 0.8], [-1.0, 0.0]];
        assert!(loss_concept(z.view(), opp.view()).unwrap().value.abs() < 1e-15);
        let empty = Array2::<f64>::zeros((0, 2));
        let l = loss_concept(empty.view(), empty.view()).unwrap();
        assert!(l.empty && l.value == 0.0);
    }

    #[test]
    fn total_loss_examples() {
        assert!((loss_total(1.0, -1.0, 0.1) - 0.9).abs() < 1e-15);
        assert_eq!(loss_total(1.7, -0.4, 0.0), 1.7);
        assert_eq!(loss_total(4f64.ln(), 0.0, 0.1), 4f64.ln());
    }

    fn scalar_tensors(theta: f64) -> Tensors {
        Tensors {
            concept_head: array![[theta]],
            attention: Attention::Uniform,
            classifier_w: Array2::zeros((0, 0)),
            classifier_b: Array1::zeros(0),
        }
    }

    /// Independent scalar Adam trace.
    fn scalar_adam(theta0: f64, grads: &[f64], cfg: &AdamConfig) -> f64 {
        let (mut theta, mut m, mut v) = (theta0, 0.0, 0.0);
        for (i, g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mh = m / (1.0 - cfg.beta1.powi(t));
            let vh = v / (1.0 - cfg.beta2.powi(t));
            theta -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
        theta
    }

    #[test]
    fn adam_examples() {
        let cfg = AdamConfig::default();
        // zero gradient leaves parameters alone
        let mut p = scalar_tensors(0.25);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &scalar_tensors(0.0), &mut st, 1, &cfg).unwrap();
        assert_eq!(p.concept_head[[0, 0]], 0.25);

        // first step of unit gradient moves by lr / (1 + eps)
        let mut p = scalar_tensors(0.0);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &scalar_tensors(1.0), &mut st, 1, &cfg).unwrap();
        assert!((p.concept_head[[0, 0]] + cfg.lr / (1.0 + cfg.eps)).abs() < 1e-18);

        // two steps against the scalar oracle
        let cfg = AdamConfig { lr: 0.01, ..cfg };
        let mut p = scalar_tensors(0.5);
        let mut st = AdamState::new(&p);
        for t in 1..=2 {
            adam_step(&mut p, &scalar_tensors(0.3), &mut st, t, &cfg).unwrap();
        }
        assert_eq!(p.concept_head[[0, 0]], scalar_adam(0.5, &[0.3, 0.3], &cfg));
        assert!(adam_step(&mut p, &scalar_tensors(0.3), &mut st, 0, &cfg).is_err());
    }

    fn conf(values: &[f64]) -> Vec<BagConfidence> {
        values
            .iter()
            .map(|&c| BagConfidence { confidence: c, correct: true })
            .collect()
    }

    fn easy_hard_cfg(batch: usize) -> TrainConfig {
        TrainConfig {
            batch_bags: batch,
            easy_hard: EasyHard::On { warmup_epochs: 5, easy_quantile: 0.5 },
            ..Default::default()
        }
    }

    #[test]
    fn schedule_off_equals_plain() {
        let cfg = TrainConfig { batch_bags: 3, ..Default::default() };
        let a = schedule_easy_hard(&conf(&[0.5; 8]), 10, &cfg, &mut seeded_rng(1, 0));
        let b = plain_batches(8, 3, &mut seeded_rng(1, 0));
        assert_eq!(a, b);
        // also during warm-up
        let cfg = easy_hard_cfg(3);
        let a = schedule_easy_hard(&conf(&[0.5; 8]), 5, &cfg, &mut seeded_rng(1, 0));
        assert_eq!(a, b);
    }

    #[test]
    fn schedule_splits_by_confidence() {
        let cfg = easy_hard_cfg(5);
        let c = conf(&[0.9, 0.1, 0.8, 0.2, 0.7, 0.3, 0.95, 0.4, 0.85, 0.5]);
        let plan = schedule_easy_hard(&c, 6, &cfg, &mut seeded_rng(3, 0));
        assert_eq!(plan.kinds, vec![BatchKind::Easy, BatchKind::Hard]);
        let mut easy = plan.batches[0].clone();
        easy.sort();
        assert_eq!(easy, vec![0, 2, 4, 6, 8]);
        let mut hard = plan.batches[1].clone();
        hard.sort();
        assert_eq!(hard, vec![1, 3, 5, 7, 9]);
    }

    #[test]
    fn schedule_tie_rule_and_misclassified() {
        let cfg = easy_hard_cfg(2);
        let mut c = conf(&[0.6; 10]);
        c[1].correct = false;
        let plan = schedule_easy_hard(&c, 6, &cfg, &mut seeded_rng(3, 0));
        let mut easy: Vec<usize> = plan
            .batches
            .iter()
            .zip(&plan.kinds)
            .filter(|(_, k)| **k == BatchKind::Easy)
            .flat_map(|(b, _)| b.clone())
            .collect();
        easy.sort();
        assert_eq!(easy, vec![0, 2, 3, 4]);
        assert_eq!(&plan.kinds[..4], &[BatchKind::Easy, BatchKind::Hard, BatchKind::Easy, BatchKind::Hard]);
    }

    #[test]
    fn schedule_empty_pool_falls_back() {
        let cfg = easy_hard_cfg(4);
        let c: Vec<BagConfidence> = (0..6)
            .map(|_| BagConfidence { confidence: 0.9, correct: false })
            .collect();
        let plan = schedule_easy_hard(&c, 9, &cfg, &mut seeded_rng(0, 0));
        assert!(plan.note.is_some());
        assert!(plan.kinds.iter().all(|k| *k == BatchKind::Plain));
    }

    fn toy_bags() -> Vec<Bag> {
        (0..12)
            .map(|j| {
                let y = j % 2;
                let s = if y == 0 { 1.0 } else { -1.0 };
                Bag {
                    image_id: format!("b{j}"),
                    label: y,
                    group_id: None,
                    instances: (0..2)
                        .map(|i| Instance {
                            embedding: vec![s + 0.1 * i as f64, 0.2 * j as f64 - 1.0, 0.5],
                            clip_scores: vec![0.7, 0.2, 0.1],
                            concept_ids: vec![],
                            bbox: None,
                            mask_area: None,
                        })
                        .collect(),
                }
            })
            .collect()
    }

    fn toy_dims() -> ModelDims {
        ModelDims { embed_dim: 3, num_concepts: 3, num_classes: 2 }
    }

    #[test]
    fn zero_lr_keeps_initialization() {
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 3,
            batch_bags: 4,
            model: ModelConfig { hidden: 4, ..Default::default() },
            ..Default::default()
        };
        let out = train(&toy_bags(), toy_dims(), &cfg).unwrap();
        let init = ModelParams::init(toy_dims(), cfg.model.clone(), cfg.seed).unwrap();
        assert_eq!(out.params, init);
        assert_eq!(out.log.len(), 3);
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let cfg = TrainConfig {
            lr: 0.05,
            epochs: 30,
            batch_bags: 4,
            seed: 11,
            model: ModelConfig { hidden: 4, ..Default::default() },
            ..Default::default()
        };
        let a = train(&toy_bags(), toy_dims(), &cfg).unwrap();
        let b = train(&toy_bags(), toy_dims(), &cfg).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.params, b.params);
        assert_eq!(a.log.last().unwrap().train_acc, 1.0);
    }

    #[test]
    fn gradient_of_uniform_attention_is_softmax_regression() {
        // V = 0 gives uniform attention; with lambda = 0 the classifier
        // gradient is the softmax-regression gradient on the pooled vector.
        let mut p = ModelParams::init(
            toy_dims(),
            ModelConfig { hidden: 4, attention: AttentionKind::Mlp, ..Default::default() },
            3,
        )
        .unwrap();
        if let Attention::Mlp { hidden, .. } = &mut p.tensors.attention {
            hidden.fill(0.0);
        }
        let bags = toy_bags();
        let batch: Vec<&Bag> = bags.iter().take(3).collect();
        let (_, g) = backward(&p, &batch, 0.0).unwrap();

        let mut expected = Array2::<f64>::zeros((2, 3));
        for bag in &batch {
            let z = bag.embedding_matrix().dot(&p.tensors.concept_head.t());
            let (zh, _) = normalize_rows(&z);
            let c = zh.mean_axis(Axis(0)).unwrap();
            let logits = p.tensors.classifier_w.dot(&c) + &p.tensors.classifier_b;
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for k in 0..2 {
                let delta = e[k] / s - if k == bag.label { 1.0 } else { 0.0 };
                for j in 0..3 {
                    expected[[k, j]] += delta * c[j] / batch.len() as f64;
                }
            }
        }
        for (a, b) in g.classifier_w.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn duplicated_batch_has_same_gradient() {
        let p = ModelParams::init(toy_dims(), ModelConfig { hidden: 4, ..Default::default() }, 5).unwrap();
        let bags = toy_bags();
        let once: Vec<&Bag> = bags.iter().take(4).collect();
        let twice: Vec<&Bag> = once.iter().chain(once.iter()).copied().collect();
        let (la, ga) = backward(&p, &once, 0.1).unwrap();
        let (lb, gb) = backward(&p, &twice, 0.1).unwrap();
        assert!((la.total - lb.total).abs() < 1e-14);
        let a: Vec<f64> = ga.named().iter().flat_map(|t| t.data.to_vec()).collect();
        let b: Vec<f64> = gb.named().iter().flat_map(|t| t.data.to_vec()).collect();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-14 * x.abs().max(1.0));
        }
    }

    #[test]
    fn config_rejects_bad_values() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.lambda_concept = -0.1;
        assert!(cfg.validate().is_err());
        cfg = TrainConfig { lr: -1.0, ..Default::default() };
        assert!(cfg.validate().is_err());
        cfg = TrainConfig {
            easy_hard: EasyHard::On { warmup_epochs: 1, easy_quantile: 1.0 },
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        assert!(train(&[], toy_dims(), &TrainConfig::default()).is_err());
    }
}
