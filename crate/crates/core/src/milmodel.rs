//! Attention-based multiple-instance concept-bottleneck model.
//!
//! Per bag of `N` instance embeddings `H` (`N x D`):
//!
//! ```text
//! z_i   = W_c h_i                      concept activations (C)
//! ẑ_i   = z_i / |z_i|                  zero row if |z_i| < 1e-12
//! e_i   = v · tanh(V h_i)              (mlp)   or  w · h_i  (linear)
//! α     = softmax(e / T)
//! c_agg = Σ α_i ẑ_i                    (or Σ α_i z_i when not normalized)
//! logits = W_cls c_agg + b_cls
//! ```

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{argmax, seeded_rng, softmax, NORM_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    /// `e_i = v · tanh(V h_i)`
    Mlp,
    /// `e_i = w · h_i`
    Linear,
    /// Uniform weights (mean pooling); used as an ablation.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub attention: AttentionKind,
    /// Hidden width `A` of the attention MLP.
    pub hidden: usize,
    /// Aggregate normalized concept rows (true) or raw activations (false).
    pub aggregate_normalized: bool,
    pub temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            attention: AttentionKind::Mlp,
            hidden: 128,
            aggregate_normalized: true,
            temperature: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive and finite, got {}",
                self.temperature
            )));
        }
        if self.attention == AttentionKind::Mlp && self.hidden == 0 {
            return Err(Error::Config("attention hidden width must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub embed_dim: usize,
    pub num_concepts: usize,
    pub num_classes: usize,
}

/// Attention scorer weights. The same shape doubles as its gradient.
#[derive(Debug, Clone, PartialEq)]
pub enum Attention {
    Mlp { hidden: Array2<f64>, score: Array1<f64> },
    Linear { w: Array1<f64> },
    Uniform,
}

impl Attention {
    fn zeros_like(&self) -> Self {
        match self {
            Attention::Mlp { hidden, score } => Attention::Mlp {
                hidden: Array2::zeros(hidden.raw_dim()),
                score: Array1::zeros(score.raw_dim()),
            },
            Attention::Linear { w } => Attention::Linear {
                w: Array1::zeros(w.raw_dim()),
            },
            Attention::Uniform => Attention::Uniform,
        }
    }
}

/// View of one parameter tensor, row-major.
#[derive(Debug)]
pub struct NamedTensor<'a> {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

/// The trainable tensors of the model, in a fixed order. Shared by
/// [`ModelParams`] and gradient sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensors {
    /// `C x D`, no bias.
    pub concept_head: Array2<f64>,
    pub attention: Attention,
    /// `K x C`
    pub classifier_w: Array2<f64>,
    /// `K`
    pub classifier_b: Array1<f64>,
}

impl Tensors {
    pub fn zeros_like(&self) -> Self {
        Self {
            concept_head: Array2::zeros(self.concept_head.raw_dim()),
            attention: self.attention.zeros_like(),
            classifier_w: Array2::zeros(self.classifier_w.raw_dim()),
            classifier_b: Array1::zeros(self.classifier_b.raw_dim()),
        }
    }

    pub fn named(&self) -> Vec<NamedTensor<'_>> {
        fn view<'a>(name: &'static str, shape: &[usize], data: Option<&'a [f64]>) -> NamedTensor<'a> {
            NamedTensor {
                name,
                shape: shape.to_vec(),
                data: data.expect("parameter tensors are contiguous"),
            }
        }
        let mut out = vec![view(
            "concept_head",
            self.concept_head.shape(),
            self.concept_head.as_slice(),
        )];
        match &self.attention {
            Attention::Mlp { hidden, score } => {
                out.push(view("attention_hidden", hidden.shape(), hidden.as_slice()));
                out.push(view("attention_score", score.shape(), score.as_slice()));
            }
            Attention::Linear { w } => out.push(view("attention_linear", w.shape(), w.as_slice())),
            Attention::Uniform => {}
        }
        out.push(view("classifier_w", self.classifier_w.shape(), self.classifier_w.as_slice()));
        out.push(view("classifier_b", self.classifier_b.shape(), self.classifier_b.as_slice()));
        out
    }

    /// Mutable flat views in the same order as [`Tensors::named`].
    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(5);
        out.push(self.concept_head.as_slice_mut().expect("contiguous"));
        match &mut self.attention {
            Attention::Mlp { hidden, score } => {
                out.push(hidden.as_slice_mut().expect("contiguous"));
                out.push(score.as_slice_mut().expect("contiguous"));
            }
            Attention::Linear { w } => out.push(w.as_slice_mut().expect("contiguous")),
            Attention::Uniform => {}
        }
        out.push(self.classifier_w.as_slice_mut().expect("contiguous"));
        out.push(self.classifier_b.as_slice_mut().expect("contiguous"));
        out
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Tensors, scale: f64) {
        let src: Vec<&[f64]> = other.named().into_iter().map(|t| t.data).collect();
        for (dst, src) in self.slices_mut().into_iter().zip(src) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn all_finite(&self) -> Option<&'static str> {
        self.named()
            .into_iter()
            .find(|t| t.data.iter().any(|v| !v.is_finite()))
            .map(|t| t.name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub dims: ModelDims,
    pub tensors: Tensors,
}

fn xavier(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
}

impl ModelParams {
    /// Xavier-uniform initialization for every weight matrix and the
    /// attention vector; zero classifier bias. Each tensor draws from its
    /// own seeded stream.
    pub fn init(dims: ModelDims, config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if dims.embed_dim == 0 || dims.num_concepts == 0 || dims.num_classes < 2 {
            return Err(Error::Config(format!("invalid model dimensions {dims:?}")));
        }
        let (d, c, k, a) = (dims.embed_dim, dims.num_concepts, dims.num_classes, config.hidden);
        let concept_head = xavier(&mut seeded_rng(seed, 1), c, d, d, c);
        let attention = match config.attention {
            AttentionKind::Mlp => Attention::Mlp {
                hidden: xavier(&mut seeded_rng(seed, 2), a, d, d, a),
                score: xavier(&mut seeded_rng(seed, 3), 1, a, a, 1).remove_axis(Axis(0)),
            },
            AttentionKind::Linear => Attention::Linear {
                w: xavier(&mut seeded_rng(seed, 4), 1, d, d, 1).remove_axis(Axis(0)),
            },
            AttentionKind::Uniform => Attention::Uniform,
        };
        let classifier_w = xavier(&mut seeded_rng(seed, 5), k, c, c, k);
        Ok(Self {
            config,
            dims,
            tensors: Tensors {
                concept_head,
                attention,
                classifier_w,
                classifier_b: Array1::zeros(k),
            },
        })
    }

    /// Checks shapes against `dims` and that every entry is finite.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let ModelDims { embed_dim: d, num_concepts: c, num_classes: k } = self.dims;
        let t = &self.tensors;
        let mut ok = t.concept_head.dim() == (c, d)
            && t.classifier_w.dim() == (k, c)
            && t.classifier_b.len() == k;
        ok &= match (&t.attention, self.config.attention) {
            (Attention::Mlp { hidden, score }, AttentionKind::Mlp) => {
                hidden.dim() == (self.config.hidden, d) && score.len() == self.config.hidden
            }
            (Attention::Linear { w }, AttentionKind::Linear) => w.len() == d,
            (Attention::Uniform, AttentionKind::Uniform) => true,
            _ => false,
        };
        if !ok {
            return Err(Error::Shape("parameter shapes disagree with model dims/config".into()));
        }
        if let Some(name) = t.all_finite() {
            return Err(Error::Numerical { tensor: name.into() });
        }
        Ok(())
    }

    fn check_input(&self, embeddings: &ArrayView2<f64>) -> Result<()> {
        if embeddings.nrows() == 0 {
            return Err(Error::Shape("bag has no instances".into()));
        }
        if embeddings.ncols() != self.dims.embed_dim {
            return Err(Error::Shape(format!(
                "embedding width {} != D = {}",
                embeddings.ncols(),
                self.dims.embed_dim
            )));
        }
        Ok(())
    }
}

/// Everything computed on the way from embeddings to logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Raw concept activations, `N x C`.
    pub z: Array2<f64>,
    /// Row-normalized activations, `N x C`.
    pub z_hat: Array2<f64>,
    /// Row norms of `z`.
    pub z_norms: Array1<f64>,
    /// Attention scores before temperature scaling.
    pub scores: Array1<f64>,
    /// `tanh(V h_i)` rows for the MLP scorer, `N x A`.
    pub attn_hidden: Option<Array2<f64>>,
    pub alpha: Array1<f64>,
    pub c_agg: Array1<f64>,
    pub logits: Array1<f64>,
}

impl ForwardTrace {
    pub fn predicted(&self) -> usize {
        argmax(self.logits.as_slice().expect("contiguous"))
    }

    pub fn probabilities(&self) -> Vec<f64> {
        softmax(self.logits.as_slice().expect("contiguous"))
    }
}

/// `Z = H W_cᵀ`
pub fn concept_project(params: &ModelParams, embeddings: ArrayView2<f64>) -> Result<Array2<f64>> {
    params.check_input(&embeddings)?;
    Ok(embeddings.dot(&params.tensors.concept_head.t()))
}

/// Divides each row by its L2 norm; rows with norm below `1e-12` become zero.
/// Returns the normalized matrix and the row norms.
pub fn normalize_rows(z: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let mut out = z.clone();
    let mut norms = Array1::zeros(z.nrows());
    for (mut row, norm) in out.rows_mut().into_iter().zip(norms.iter_mut()) {
        let n = row.dot(&row).sqrt();
        *norm = n;
        if n < NORM_EPS {
            row.fill(0.0);
        } else {
            row /= n;
        }
    }
    (out, norms)
}

fn attention_scores(
    params: &ModelParams,
    embeddings: &ArrayView2<f64>,
) -> (Array1<f64>, Option<Array2<f64>>) {
    match &params.tensors.attention {
        Attention::Mlp { hidden, score } => {
            let act = embeddings.dot(&hidden.t()).mapv(f64::tanh);
            (act.dot(score), Some(act))
        }
        Attention::Linear { w } => (embeddings.dot(w), None),
        Attention::Uniform => (Array1::zeros(embeddings.nrows()), None),
    }
}

fn scaled_softmax(scores: &Array1<f64>, temperature: f64) -> Array1<f64> {
    let scaled: Vec<f64> = scores.iter().map(|s| s / temperature).collect();
    Array1::from(softmax(&scaled))
}

/// Attention weights `α = softmax(e / T)` over the bag's instances.
pub fn attention_weights(params: &ModelParams, embeddings: ArrayView2<f64>) -> Result<Array1<f64>> {
    params.check_input(&embeddings)?;
    let (scores, _) = attention_scores(params, &embeddings);
    Ok(scaled_softmax(&scores, params.config.temperature))
}

pub fn forward(params: &ModelParams, embeddings: ArrayView2<f64>) -> Result<ForwardTrace> {
    params.check_input(&embeddings)?;
    let t = &params.tensors;
    let z = embeddings.dot(&t.concept_head.t());
    let (z_hat, z_norms) = normalize_rows(&z);
    let (scores, attn_hidden) = attention_scores(params, &embeddings);
    let alpha = scaled_softmax(&scores, params.config.temperature);
    let pooled = if params.config.aggregate_normalized { &z_hat } else { &z };
    let c_agg = alpha.dot(pooled);
    let logits = t.classifier_w.dot(&c_agg) + &t.classifier_b;

    for (name, finite) in [
        ("concept activations", z.iter().all(|v| v.is_finite())),
        ("attention weights", alpha.iter().all(|v| v.is_finite())),
        ("logits", logits.iter().all(|v| v.is_finite())),
    ] {
        if !finite {
            return Err(Error::Numerical { tensor: name.into() });
        }
    }

    Ok(ForwardTrace {
        z,
        z_hat,
        z_norms,
        scores,
        attn_hidden,
        alpha,
        c_agg,
        logits,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceExplanation {
    pub index: usize,
    pub alpha: f64,
    pub top_concepts: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    /// Instances ordered by descending attention weight.
    pub instances: Vec<InstanceExplanation>,
    pub bag_concepts: Vec<(String, f64)>,
}

/// One line of the explanation JSONL output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub image_id: String,
    pub predicted: usize,
    pub label: usize,
    pub instances: Vec<InstanceExplanation>,
    pub bag_concepts: Vec<(String, f64)>,
}

fn top_concepts(values: &[f64], names: &[String], top_m: usize) -> Vec<(String, f64)> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .take(top_m)
        .map(|i| (names[i].clone(), values[i]))
        .collect()
}

pub fn explain(trace: &ForwardTrace, concept_names: &[String], top_m: usize) -> Result<Explanation> {
    let c = trace.z_hat.ncols();
    if concept_names.len() != c {
        return Err(Error::Shape(format!("{} concept names for C = {c}", concept_names.len())));
    }
    if top_m > c {
        return Err(Error::Config(format!("top_m = {top_m} exceeds C = {c}")));
    }
    let mut order: Vec<usize> = (0..trace.alpha.len()).collect();
    order.sort_by(|&a, &b| trace.alpha[b].total_cmp(&trace.alpha[a]).then(a.cmp(&b)));
    let instances = order
        .into_iter()
        .map(|i| {
            let row = trace.z_hat.row(i);
            let zero = row.iter().all(|v| *v == 0.0);
            InstanceExplanation {
                index: i,
                alpha: trace.alpha[i],
                top_concepts: if zero {
                    Vec::new()
                } else {
                    top_concepts(row.as_slice().expect("contiguous"), concept_names, top_m)
                },
            }
        })
        .collect();
    Ok(Explanation {
        instances,
        bag_concepts: top_concepts(trace.c_agg.as_slice().expect("contiguous"), concept_names, top_m),
    })
}
