//! Contrastive (InfoNCE) and geo-classification losses, their combination,
//! and exact gradients of the combined objective.
//!
//! Batch losses are arithmetic means of per-sample losses. Both softmax-style
//! losses subtract the row maximum before exponentiating.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{geo_logits, Dense, Encoder, EncoderParams, FeatureSource, MoCoState, ParamSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Softmax temperature `λ > 0`.
    pub temperature: f64,
    /// Weight of the contrastive term.
    pub alpha: f64,
    /// Weight of the geo-classification term.
    pub beta: f64,
    /// Number of geo-clusters `K`.
    pub n_clusters: usize,
    /// Representation fed to the geo head.
    #[serde(default)]
    pub geo_features: FeatureSource,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.2,
            alpha: 1.0,
            beta: 1.0,
            n_clusters: 100,
            geo_features: FeatureSource::Projection,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        check_temperature(self.temperature)?;
        if !(self.alpha >= 0.0 && self.beta >= 0.0)
            || !self.alpha.is_finite()
            || !self.beta.is_finite()
        {
            return Err(Error::config(
                "loss weights must be finite and non-negative",
            ));
        }
        if self.alpha == 0.0 && self.beta == 0.0 {
            return Err(Error::config("alpha and beta cannot both be zero"));
        }
        if self.n_clusters == 0 {
            return Err(Error::config("K must be at least 1"));
        }
        Ok(())
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!(
            "temperature must be positive, got {t}"
        )))
    }
}

fn check_finite_input(a: ArrayView2<'_, f64>, what: &str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite values in {what}")))
    }
}

/// Per-sample losses and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub per_sample: Array1<f64>,
    pub mean: f64,
}

impl LossValue {
    fn new(per_sample: Array1<f64>) -> Self {
        let mean = per_sample.mean().unwrap_or(0.0);
        Self { per_sample, mean }
    }
}

/// Row-wise `logsumexp` and softmax of `logits`, max-subtracted.
fn log_softmax_parts(logits: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let mut probs = logits.clone();
    let mut lse = Array1::zeros(logits.nrows());
    for (mut row, out) in probs.outer_iter_mut().zip(lse.iter_mut()) {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
        *out = m + s.ln();
    }
    (lse, probs)
}

/// Logit matrix `[z.ẑ, z.k_1, ..., z.k_J] / λ`, one row per query.
fn contrastive_logits(
    z: ArrayView2<'_, f64>,
    z_pos: ArrayView2<'_, f64>,
    negatives: ArrayView2<'_, f64>,
    temperature: f64,
) -> Result<Array2<f64>> {
    check_temperature(temperature)?;
    if z.dim() != z_pos.dim() {
        return Err(Error::shape(format!(
            "queries {:?} vs keys {:?}",
            z.dim(),
            z_pos.dim()
        )));
    }
    if negatives.ncols() != z.ncols() {
        return Err(Error::shape(format!(
            "negatives have dimension {}, queries {}",
            negatives.ncols(),
            z.ncols()
        )));
    }
    check_finite_input(z, "queries")?;
    check_finite_input(z_pos, "positive keys")?;
    check_finite_input(negatives, "negatives")?;
    let n = z.nrows();
    let j = negatives.nrows();
    let mut logits = Array2::zeros((n, j + 1));
    let pos = (&z * &z_pos).sum_axis(Axis(1));
    logits.column_mut(0).assign(&pos);
    logits
        .slice_mut(ndarray::s![.., 1..])
        .assign(&z.dot(&negatives.t()));
    logits.mapv_inplace(|v| v / temperature);
    Ok(logits)
}

/// InfoNCE:
/// `L = -log( exp(z.ẑ/λ) / (exp(z.ẑ/λ) + Σ_j exp(z.k_j/λ)) )` per row.
///
/// Rows of `z`, `z_pos` and `negatives` are expected to be unit-norm. The
/// temporal variant uses the same formula; only how `z_pos` is produced differs.
pub fn info_nce(
    z: ArrayView2<'_, f64>,
    z_pos: ArrayView2<'_, f64>,
    negatives: ArrayView2<'_, f64>,
    temperature: f64,
) -> Result<LossValue> {
    if negatives.nrows() == 0 {
        return Err(Error::Validation(
            "InfoNCE needs at least one negative".into(),
        ));
    }
    let logits = contrastive_logits(z, z_pos, negatives, temperature)?;
    let (lse, _) = log_softmax_parts(&logits);
    Ok(LossValue::new(&lse - &logits.column(0)))
}

/// InfoNCE and the gradient of its batch mean w.r.t. `z`.
pub fn info_nce_grad(
    z: ArrayView2<'_, f64>,
    z_pos: ArrayView2<'_, f64>,
    negatives: ArrayView2<'_, f64>,
    temperature: f64,
) -> Result<(LossValue, Array2<f64>)> {
    if negatives.nrows() == 0 {
        return Err(Error::Validation(
            "InfoNCE needs at least one negative".into(),
        ));
    }
    let logits = contrastive_logits(z, z_pos, negatives, temperature)?;
    let (lse, mut probs) = log_softmax_parts(&logits);
    let value = LossValue::new(&lse - &logits.column(0));
    // dL/dlogit = p - onehot(0); dlogit/dz = [ẑ, k_j] / λ
    probs.column_mut(0).mapv_inplace(|p| p - 1.0);
    let scale = 1.0 / (temperature * z.nrows() as f64);
    let mut grad = probs.slice(ndarray::s![.., 1..]).dot(&negatives);
    Zip::from(grad.rows_mut())
        .and(probs.column(0))
        .and(z_pos.rows())
        .for_each(|mut g, &p0, kpos| g.scaled_add(p0, &kpos));
    grad.mapv_inplace(|v| v * scale);
    Ok((value, grad))
}

fn check_labels(labels: &[usize], n: usize, k: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::shape(format!(
            "{} labels for {n} rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&c| c >= k) {
        return Err(Error::Validation(format!("label {bad} outside 0..{k}")));
    }
    Ok(())
}

/// Cross-entropy `-log softmax(logits)[c]` per row against one-hot labels
/// (0-based cluster or class indices).
pub fn geo_cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> Result<LossValue> {
    geo_cross_entropy_grad(logits, labels).map(|(v, _)| v)
}

/// Cross-entropy and the gradient of its batch mean w.r.t. the logits.
pub fn geo_cross_entropy_grad(
    logits: &Array2<f64>,
    labels: &[usize],
) -> Result<(LossValue, Array2<f64>)> {
    check_labels(labels, logits.nrows(), logits.ncols())?;
    check_finite_input(logits.view(), "logits")?;
    let (lse, mut probs) = log_softmax_parts(logits);
    let per: Array1<f64> = labels
        .iter()
        .enumerate()
        .map(|(i, &c)| lse[i] - logits[[i, c]])
        .collect();
    let n = logits.nrows() as f64;
    for (i, &c) in labels.iter().enumerate() {
        probs[[i, c]] -= 1.0;
    }
    probs.mapv_inplace(|v| v / n);
    Ok((LossValue::new(per), probs))
}

/// `L_f = α L_contrastive + β L_geo`.
pub fn combined_loss(contrastive: f64, geo: f64, alpha: f64, beta: f64) -> Result<f64> {
    if !contrastive.is_finite() {
        return Err(Error::Numeric("contrastive term is not finite".into()));
    }
    if !geo.is_finite() {
        return Err(Error::Numeric("geo term is not finite".into()));
    }
    Ok(alpha * contrastive + beta * geo)
}

/// Inputs of one contrastive training step (flattened, centred images).
#[derive(Debug, Clone)]
pub struct PretrainBatch {
    /// Views routed through the query encoder.
    pub query: Array2<f64>,
    /// Views routed through the key encoder.
    pub key: Array2<f64>,
    /// Geo-labels of the batch's areas, when the geo term is active.
    pub geo_labels: Option<Vec<usize>>,
}

/// Loss values and gradients of one step. The key encoder and the queue
/// receive no gradient.
#[derive(Debug, Clone)]
pub struct StepGradients {
    pub query: EncoderParams,
    pub geo_head: Option<Dense>,
    pub contrastive: f64,
    pub geo: f64,
    pub total: f64,
    /// Key embeddings of the batch (detached), ready to be enqueued.
    pub keys: Array2<f64>,
}

fn head_backward(
    source: &Array2<f64>,
    head: &Dense,
    grad_logits: &Array2<f64>,
) -> (Dense, Array2<f64>) {
    let grads = Dense {
        weight: source.t().dot(grad_logits),
        bias: grad_logits.sum_axis(Axis(0)),
    };
    (grads, grad_logits.dot(&head.weight.t()))
}

/// Exact gradients of the mean combined loss w.r.t. `θ_q` and `θ_c`.
///
/// The contrastive sum runs over the queue's current fill; an empty queue
/// contributes a zero contrastive term (no negatives to contrast against).
pub fn loss_gradients(
    state: &MoCoState,
    batch: &PretrainBatch,
    cfg: &LossConfig,
) -> Result<StepGradients> {
    cfg.validate()?;
    let keys = Encoder::encode(&state.key, &batch.key)?;
    let trace = Encoder::forward(&state.query, &batch.query)?;
    let z = trace.embeddings();

    let (contrastive, mut grad_embed) = if state.queue.is_empty() {
        (0.0, Array2::zeros(z.raw_dim()))
    } else {
        let negatives = state.queue.snapshot()?;
        let (value, grad) =
            info_nce_grad(z.view(), keys.view(), negatives.view(), cfg.temperature)?;
        (value.mean, grad * cfg.alpha)
    };

    let mut grad_features = None;
    let (geo, head_grads) = match (&state.geo_head, &batch.geo_labels) {
        (Some(head), Some(labels)) => {
            let source = trace.source(cfg.geo_features);
            let logits = geo_logits(head, source)?;
            let (value, grad_logits) = geo_cross_entropy_grad(&logits, labels)?;
            let grad_logits = grad_logits * cfg.beta;
            let (head_grads, grad_source) = head_backward(source, head, &grad_logits);
            match cfg.geo_features {
                FeatureSource::Projection => grad_embed += &grad_source,
                FeatureSource::Backbone => grad_features = Some(grad_source),
            }
            (value.mean, Some(head_grads))
        }
        (None, None) => (0.0, None),
        (Some(_), None) => {
            return Err(Error::Validation(
                "geo head present but batch has no geo-labels".into(),
            ))
        }
        (None, Some(_)) => {
            return Err(Error::Validation(
                "batch has geo-labels but state has no geo head".into(),
            ))
        }
    };

    let total = combined_loss(contrastive, geo, cfg.alpha, cfg.beta)?;
    let query = Encoder::backward(
        &state.query,
        &trace,
        Some(grad_embed.view()),
        grad_features.as_ref().map(|g| g.view()),
    );
    if !query.all_finite() || head_grads.as_ref().is_some_and(|h| !h.all_finite()) {
        return Err(Error::Numeric(
            "non-finite gradient of the combined loss".into(),
        ));
    }
    Ok(StepGradients {
        query,
        geo_head: head_grads,
        contrastive,
        geo,
        total,
        keys,
    })
}

/// Forward-only value of the mean combined loss (no gradients).
pub fn combined_objective(
    state: &MoCoState,
    batch: &PretrainBatch,
    cfg: &LossConfig,
) -> Result<f64> {
    let keys = Encoder::encode(&state.key, &batch.key)?;
    let trace = Encoder::forward(&state.query, &batch.query)?;
    let contrastive = if state.queue.is_empty() {
        0.0
    } else {
        let negatives = state.queue.snapshot()?;
        info_nce(
            trace.embeddings().view(),
            keys.view(),
            negatives.view(),
            cfg.temperature,
        )?
        .mean
    };
    let geo = match (&state.geo_head, &batch.geo_labels) {
        (Some(head), Some(labels)) => {
            geo_cross_entropy(&geo_logits(head, trace.source(cfg.geo_features))?, labels)?.mean
        }
        _ => 0.0,
    };
    combined_loss(contrastive, geo, cfg.alpha, cfg.beta)
}

/// Gradients of a plain cross-entropy classifier on top of the encoder
/// (geo-only pretraining and the supervised baseline).
#[derive(Debug, Clone)]
pub struct ClassifierGradients {
    pub encoder: EncoderParams,
    pub head: Dense,
    pub loss: f64,
}

pub fn classifier_gradients(
    encoder: &EncoderParams,
    head: &Dense,
    x: &Array2<f64>,
    labels: &[usize],
    source: FeatureSource,
) -> Result<ClassifierGradients> {
    let trace = Encoder::forward(encoder, x)?;
    let input = trace.source(source);
    let logits = geo_logits(head, input)?;
    let (value, grad_logits) = geo_cross_entropy_grad(&logits, labels)?;
    let (head_grads, grad_source) = head_backward(input, head, &grad_logits);
    let grads = match source {
        FeatureSource::Projection => {
            Encoder::backward(encoder, &trace, Some(grad_source.view()), None)
        }
        FeatureSource::Backbone => {
            Encoder::backward(encoder, &trace, None, Some(grad_source.view()))
        }
    };
    if !value.mean.is_finite() || !grads.all_finite() {
        return Err(Error::Numeric(
            "non-finite classifier loss or gradient".into(),
        ));
    }
    Ok(ClassifierGradients {
        encoder: grads,
        head: head_grads,
        loss: value.mean,
    })
}

/// Forward-only classifier loss.
pub fn classifier_objective(
    encoder: &EncoderParams,
    head: &Dense,
    x: &Array2<f64>,
    labels: &[usize],
    source: FeatureSource,
) -> Result<f64> {
    let trace = Encoder::forward(encoder, x)?;
    Ok(geo_cross_entropy(&geo_logits(head, trace.source(source))?, labels)?.mean)
}
