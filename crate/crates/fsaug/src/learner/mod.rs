//! The differentiable base model: a small convolutional embedding network
//! with closed-form prototype / ridge-regression heads, soft-label
//! cross-entropy, exact analytic gradients, and Nesterov SGD.
//!
//! Everything is generic over the scalar type: training runs in f32 by
//! default, while gradient and solver oracles run the identical code in f64.

mod heads;
mod net;
mod optim;

pub use heads::{head_fit, head_logits, HeadState};
pub use optim::{sgd_step, LrSchedule, OptState, OptimizerConfig};

use num_traits::Float;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datastore::{Geometry, ImageTensor, ValueDomain};
use crate::episodic::{Episode, FeatureMixPlan};
use crate::error::{Error, Result};
use crate::imgaug::SoftLabel;
use crate::rng::RngStream;

// ---------------------------------------------------------------------------
// Scalars and matrices
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Scalar type the model runs in.
pub trait Real:
    Float + num_traits::NumAssign + std::iter::Sum + std::fmt::Debug + Send + Sync + 'static
{
    const PRECISION: Precision;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    fn from_f32(x: f32) -> Self {
        Self::from_f64(x as f64)
    }
}

impl Real for f32 {
    const PRECISION: Precision = Precision::F32;

    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const PRECISION: Precision = Precision::F64;

    fn from_f64(x: f64) -> Self {
        x
    }

    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense row-major matrix. Small and deliberately simple; every reduction
/// runs in index order so results are bitwise reproducible.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<T>>) -> Self {
        let r = rows.len();
        let c = rows.first().map(|v| v.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            debug_assert_eq!(row.len(), c);
            data.extend(row);
        }
        Self { rows: r, cols: c, data }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut T {
        &mut self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// self (m x k) * other (k x n).
    pub fn matmul(&self, other: &Mat<T>) -> Mat<T> {
        assert_eq!(self.cols, other.rows);
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.at(i, k);
                if a == T::zero() {
                    continue;
                }
                let orow = other.row(k);
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// self (m x k) * otherᵀ where other is (n x k).
    pub fn matmul_nt(&self, other: &Mat<T>) -> Mat<T> {
        assert_eq!(self.cols, other.cols);
        let mut out = Mat::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let arow = self.row(i);
            for j in 0..other.rows {
                let mut acc = T::zero();
                for (&a, &b) in arow.iter().zip(other.row(j)) {
                    acc += a * b;
                }
                *out.at_mut(i, j) = acc;
            }
        }
        out
    }

    /// selfᵀ (k x m) * other (k x n) -> m x n.
    pub fn matmul_tn(&self, other: &Mat<T>) -> Mat<T> {
        assert_eq!(self.rows, other.rows);
        let mut out = Mat::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let arow = self.row(k);
            let brow = other.row(k);
            for (i, &a) in arow.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Mat<T> {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                *out.at_mut(c, r) = self.at(r, c);
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Architecture and parameters
// ---------------------------------------------------------------------------

fn default_ridge_lambda() -> f64 {
    1.0
}

/// Embedding-network architecture: one 3x3 conv (stride 1, zero padding 1),
/// ReLU, and 2x2 max-pool per block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub input: Geometry,
    pub widths: Vec<usize>,
    #[serde(default = "default_ridge_lambda")]
    pub ridge_lambda: f64,
}

impl ArchConfig {
    pub fn new(input: Geometry, widths: Vec<usize>) -> Self {
        Self {
            input,
            widths,
            ridge_lambda: default_ridge_lambda(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("widths must be non-empty and positive".into()));
        }
        if self.ridge_lambda <= 0.0 {
            return Err(Error::Config("ridge_lambda must be positive".into()));
        }
        let div = 1usize << self.widths.len();
        if self.input.height % div != 0 || self.input.width % div != 0 {
            return Err(Error::Config(format!(
                "input {}x{} not divisible by 2^{} (one halving per block)",
                self.input.height,
                self.input.width,
                self.widths.len()
            )));
        }
        Ok(())
    }

    pub fn blocks(&self) -> usize {
        self.widths.len()
    }

    /// Final-block channels x final spatial cells.
    pub fn embedding_dim(&self) -> usize {
        let div = 1usize << self.widths.len();
        self.widths.last().unwrap() * (self.input.height / div) * (self.input.width / div)
    }

    /// Per-block parameter layout in the flat parameter vector.
    pub fn layouts(&self) -> Vec<BlockLayout> {
        let mut layouts = Vec::with_capacity(self.widths.len());
        let mut offset = 0;
        let mut in_c = self.input.channels;
        let mut in_h = self.input.height;
        let mut in_w = self.input.width;
        for &out_c in &self.widths {
            let w_off = offset;
            let b_off = offset + out_c * in_c * 9;
            offset = b_off + out_c;
            layouts.push(BlockLayout {
                w_off,
                b_off,
                in_c,
                out_c,
                in_h,
                in_w,
            });
            in_c = out_c;
            in_h /= 2;
            in_w /= 2;
        }
        layouts
    }

    /// Index of the ridge scale in the flat parameter vector.
    pub fn alpha_index(&self) -> usize {
        let mut count = 0;
        let mut in_c = self.input.channels;
        for &out_c in &self.widths {
            count += out_c * in_c * 9 + out_c;
            in_c = out_c;
        }
        count
    }

    pub fn beta_index(&self) -> usize {
        self.alpha_index() + 1
    }

    pub fn param_count(&self) -> usize {
        self.alpha_index() + 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockLayout {
    pub w_off: usize,
    pub b_off: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub in_h: usize,
    pub in_w: usize,
}

/// Flat parameter vector: per block all conv weights then biases, followed
/// by the ridge scale alpha and bias beta.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Real> {
    pub arch: ArchConfig,
    pub data: Vec<T>,
}

impl<T: Real> ModelParams<T> {
    /// He-normal weight init, zero biases, alpha = 1, beta = 0. Draws are
    /// made in f64 so every precision sees the same initial values.
    pub fn init(arch: ArchConfig, rng: &mut RngStream) -> Result<Self> {
        arch.validate()?;
        let mut data = vec![T::zero(); arch.param_count()];
        for layout in arch.layouts() {
            let std = (2.0 / (layout.in_c as f64 * 9.0)).sqrt();
            for i in 0..layout.out_c * layout.in_c * 9 {
                let z: f64 = StandardNormal.sample(rng);
                data[layout.w_off + i] = T::from_f64(z * std);
            }
        }
        let alpha_index = arch.alpha_index();
        data[alpha_index] = T::one();
        Ok(Self { arch, data })
    }

    pub fn zeros(arch: ArchConfig) -> Result<Self> {
        arch.validate()?;
        let data = vec![T::zero(); arch.param_count()];
        Ok(Self { arch, data })
    }

    pub fn alpha(&self) -> T {
        self.data[self.arch.alpha_index()]
    }

    pub fn beta(&self) -> T {
        self.data[self.arch.beta_index()]
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            arch: self.arch.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Heads and loss
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Prototype,
    Ridge,
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prototype" => Ok(HeadKind::Prototype),
            "ridge" => Ok(HeadKind::Ridge),
            other => Err(Error::Config(format!("unknown head `{other}`"))),
        }
    }
}

/// Scalar loss plus the gradient block, same shape as the parameter vector.
#[derive(Debug, Clone)]
pub struct LossValue<T> {
    pub loss: T,
    pub grad: Vec<T>,
}

/// Forward-only episode outcome.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeOutcome {
    pub loss: f64,
    /// Fraction of queries whose strict argmax matches the label argmax;
    /// ties count as wrong.
    pub accuracy: f64,
}

/// Embed a batch of normalized images; one row per image, order-preserving.
pub fn embed<T: Real>(params: &ModelParams<T>, images: &[ImageTensor]) -> Result<Mat<T>> {
    let dim = params.arch.embedding_dim();
    let mut out = Mat::zeros(images.len(), dim);
    for (i, img) in images.iter().enumerate() {
        check_embed_input(&params.arch, img)?;
        let e = net::embed_one(params, img);
        out.data[i * dim..(i + 1) * dim].copy_from_slice(&e);
    }
    Ok(out)
}

fn check_embed_input(arch: &ArchConfig, img: &ImageTensor) -> Result<()> {
    if img.geometry != arch.input {
        return Err(Error::Geometry(format!(
            "image {:?} does not match architecture input {:?}",
            img.geometry, arch.input
        )));
    }
    if img.domain != ValueDomain::Normalized {
        return Err(Error::Geometry(
            "embedding network expects normalized images".into(),
        ));
    }
    Ok(())
}

/// Convex combination of embedding rows and labels with lambda ~ Beta(a, a);
/// partners are drawn uniformly from the set.
pub fn feature_mixup<T: Real>(
    embeddings: &mut Mat<T>,
    labels: &mut [SoftLabel],
    alpha: f64,
    rng: &mut RngStream,
) -> FeatureMixPlan {
    let plan = FeatureMixPlan::sample(embeddings.rows, alpha, rng);
    let label_snapshot: Vec<SoftLabel> = labels.to_vec();
    for i in 0..labels.len() {
        labels[i] = SoftLabel::mix(&label_snapshot[i], &label_snapshot[plan.partner[i]], plan.lambda[i]);
    }
    apply_mix_plan(embeddings, &plan);
    plan
}

fn apply_mix_plan<T: Real>(embeddings: &mut Mat<T>, plan: &FeatureMixPlan) {
    let snapshot = embeddings.clone();
    for i in 0..embeddings.rows {
        let lam = T::from_f64(plan.lambda[i]);
        let partner = snapshot.row(plan.partner[i]);
        let own = snapshot.row(i);
        let row = &mut embeddings.data[i * embeddings.cols..(i + 1) * embeddings.cols];
        for ((r, &a), &b) in row.iter_mut().zip(own).zip(partner) {
            *r = lam * a + (T::one() - lam) * b;
        }
    }
}

/// Backpropagate through a chain of mix plans applied in order.
fn mix_plans_backward<T: Real>(d_embeddings: &Mat<T>, plans: &[FeatureMixPlan]) -> Mat<T> {
    let mut grad = d_embeddings.clone();
    for plan in plans.iter().rev() {
        let incoming = grad.clone();
        let mut out = Mat::zeros(grad.rows, grad.cols);
        for i in 0..grad.rows {
            let lam = T::from_f64(plan.lambda[i]);
            let p = plan.partner[i];
            for c in 0..grad.cols {
                let g = incoming.at(i, c);
                *out.at_mut(i, c) += lam * g;
                *out.at_mut(p, c) += (T::one() - lam) * g;
            }
        }
        grad = out;
    }
    grad
}

fn labels_matrix<T: Real>(items: &[crate::episodic::LabeledImage], ways: usize) -> Result<Mat<T>> {
    let mut out = Mat::zeros(items.len(), ways);
    for (i, li) in items.iter().enumerate() {
        if li.label.len() != ways {
            return Err(Error::Config(format!(
                "label length {} does not match ways {}",
                li.label.len(),
                ways
            )));
        }
        if !li.label.is_simplex() {
            return Err(Error::NumericFailure {
                stage: "label-simplex".into(),
            });
        }
        for (c, &w) in li.label.0.iter().enumerate() {
            *out.at_mut(i, c) = T::from_f64(w);
        }
    }
    Ok(out)
}

/// Strict argmax; `None` when the maximum is not unique.
pub fn strict_argmax<T: PartialOrd + Copy>(row: &[T]) -> Option<usize> {
    let mut best = 0;
    let mut ties = false;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
            ties = false;
        } else if *v == row[best] {
            ties = true;
        }
    }
    if ties {
        None
    } else {
        Some(best)
    }
}

struct ForwardPass<T: Real> {
    support_emb: Mat<T>,
    query_emb: Mat<T>,
    support_labels: Mat<T>,
    query_labels: Mat<T>,
    state: HeadState<T>,
    logits: Mat<T>,
    softmax: Mat<T>,
    loss: T,
    accuracy: f64,
    support_traces: Vec<net::Trace<T>>,
    query_traces: Vec<net::Trace<T>>,
}

fn forward_episode<T: Real>(
    params: &ModelParams<T>,
    episode: &Episode,
    head: HeadKind,
    with_traces: bool,
) -> Result<ForwardPass<T>> {
    let support_images: Vec<&ImageTensor> = episode.support.iter().map(|li| &li.image).collect();
    let query_images: Vec<&ImageTensor> = episode.query.iter().map(|li| &li.image).collect();

    let dim = params.arch.embedding_dim();
    let embed_set = |imgs: &[&ImageTensor]| -> Result<(Mat<T>, Vec<net::Trace<T>>)> {
        let mut out = Mat::zeros(imgs.len(), dim);
        let mut traces = Vec::new();
        for (i, img) in imgs.iter().enumerate() {
            check_embed_input(&params.arch, img)?;
            let e = if with_traces {
                let (trace, e) = net::forward_trace(params, img);
                traces.push(trace);
                e
            } else {
                net::embed_one(params, img)
            };
            out.data[i * dim..(i + 1) * dim].copy_from_slice(&e);
        }
        Ok((out, traces))
    };

    let (mut support_emb, support_traces) = embed_set(&support_images)?;
    let (mut query_emb, query_traces) = embed_set(&query_images)?;
    if !support_emb.data.iter().chain(&query_emb.data).all(|v| v.is_finite()) {
        return Err(Error::NumericFailure {
            stage: "embed".into(),
        });
    }

    for plan in &episode.support_mix {
        apply_mix_plan(&mut support_emb, plan);
    }
    for plan in &episode.query_mix {
        apply_mix_plan(&mut query_emb, plan);
    }

    let support_labels = labels_matrix::<T>(&episode.support, episode.ways)?;
    let query_labels = labels_matrix::<T>(&episode.query, episode.ways)?;

    let state = head_fit(
        head,
        &support_emb,
        &support_labels,
        params.arch.ridge_lambda,
    )?;
    let logits = head_logits(&state, &query_emb, params.alpha(), params.beta());
    if !logits.data.iter().all(|v| v.is_finite()) {
        return Err(Error::NumericFailure {
            stage: "logits".into(),
        });
    }

    // Soft cross-entropy via logsumexp, plus softmax for the backward pass.
    let n_q = logits.rows;
    let mut softmax = Mat::zeros(n_q, logits.cols);
    let mut loss = T::zero();
    let mut correct = 0usize;
    for q in 0..n_q {
        let row = logits.row(q);
        let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for &l in row {
            sum += (l - m).exp();
        }
        let lse = m + sum.ln();
        let mut dot = T::zero();
        for c in 0..logits.cols {
            *softmax.at_mut(q, c) = (logits.at(q, c) - lse).exp();
            dot += query_labels.at(q, c) * logits.at(q, c);
        }
        loss += lse - dot;

        let truth = strict_argmax(query_labels.row(q));
        let predicted = strict_argmax(row);
        if let (Some(t), Some(p)) = (truth, predicted) {
            if t == p {
                correct += 1;
            }
        }
    }
    loss /= T::from_f64(n_q as f64);
    if !loss.is_finite() {
        return Err(Error::NumericFailure {
            stage: "loss".into(),
        });
    }

    Ok(ForwardPass {
        support_emb,
        query_emb,
        support_labels,
        query_labels,
        state,
        logits,
        softmax,
        loss,
        accuracy: correct as f64 / n_q.max(1) as f64,
        support_traces,
        query_traces,
    })
}

/// Forward-only query loss and accuracy for one episode.
pub fn episode_loss<T: Real>(
    params: &ModelParams<T>,
    episode: &Episode,
    head: HeadKind,
) -> Result<EpisodeOutcome> {
    let pass = forward_episode(params, episode, head, false)?;
    Ok(EpisodeOutcome {
        loss: pass.loss.to_f64(),
        accuracy: pass.accuracy,
    })
}

/// Soft cross-entropy on the query set with the exact analytic gradient
/// through the head solve, feature mixup, and the embedding network.
pub fn loss_and_grad<T: Real>(
    params: &ModelParams<T>,
    episode: &Episode,
    head: HeadKind,
) -> Result<LossValue<T>> {
    let pass = forward_episode(params, episode, head, true)?;
    let n_q = pass.logits.rows;

    // dL/dlogits = (softmax - y) / n_q.
    let mut dlogits = Mat::zeros(n_q, pass.logits.cols);
    let inv = T::from_f64(1.0 / n_q as f64);
    for i in 0..dlogits.data.len() {
        dlogits.data[i] = (pass.softmax.data[i] - pass.query_labels.data[i]) * inv;
    }

    let back = heads::head_backward(
        &pass.state,
        &pass.support_emb,
        &pass.support_labels,
        &pass.query_emb,
        params.alpha(),
        &dlogits,
    );

    // Undo feature mixup (linear), routing gradients back to raw embeddings.
    let d_support = mix_plans_backward(&back.d_support, &episode.support_mix);
    let d_query = mix_plans_backward(&back.d_query, &episode.query_mix);

    let mut grad = vec![T::zero(); params.arch.param_count()];
    grad[params.arch.alpha_index()] = back.d_alpha;
    grad[params.arch.beta_index()] = back.d_beta;

    for (i, trace) in pass.support_traces.iter().enumerate() {
        net::backward_trace(params, trace, d_support.row(i), &mut grad);
    }
    for (i, trace) in pass.query_traces.iter().enumerate() {
        net::backward_trace(params, trace, d_query.row(i), &mut grad);
    }

    if !grad.iter().all(|v| v.is_finite()) {
        return Err(Error::NumericFailure {
            stage: "backward".into(),
        });
    }

    Ok(LossValue {
        loss: pass.loss,
        grad,
    })
}
