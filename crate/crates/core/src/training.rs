//! Standard, Jacobian-regularized and universal-adversarial training, and
//! clean evaluation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{build_lenet, softmax_cross_entropy, Network, ParamGrads};
use crate::rng::{sample_unit_sphere, RngStream};
use crate::scalar::Scalar;
use crate::tensor::{argmax, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerKind {
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
    SgdMomentum { lr: f64, momentum: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerKind {
    pub fn learning_rate(&self) -> f64 {
        match *self {
            OptimizerKind::Adam { lr, .. } | OptimizerKind::SgdMomentum { lr, .. } => lr,
        }
    }
}

/// Optimizer state for one network.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    steps: i32,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, net: &Network<T>) -> Self {
        let zeros: Vec<Vec<T>> = net.params().iter().map(|p| vec![T::zero(); p.len()]).collect();
        Self {
            kind,
            second: if matches!(kind, OptimizerKind::Adam { .. }) {
                zeros.clone()
            } else {
                Vec::new()
            },
            first: zeros,
            steps: 0,
        }
    }

    /// One descent step along `grads`.
    pub fn step(&mut self, net: &mut Network<T>, grads: &ParamGrads<T>) {
        self.steps += 1;
        match self.kind {
            OptimizerKind::Adam { lr, beta1, beta2, eps } => {
                let (b1, b2) = (T::of(beta1), T::of(beta2));
                let c1 = T::one() - T::of(beta1.powi(self.steps));
                let c2 = T::one() - T::of(beta2.powi(self.steps));
                let (lr, eps) = (T::of(lr), T::of(eps));
                for (k, p) in net.params_mut().into_iter().enumerate() {
                    let g = grads.tensors[k].data();
                    let (m, v) = (&mut self.first[k], &mut self.second[k]);
                    for (i, w) in p.data_mut().iter_mut().enumerate() {
                        m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                        v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                        *w -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                    }
                }
            }
            OptimizerKind::SgdMomentum { lr, momentum } => {
                let (lr, mu) = (T::of(lr), T::of(momentum));
                for (k, p) in net.params_mut().into_iter().enumerate() {
                    let g = grads.tensors[k].data();
                    let m = &mut self.first[k];
                    for (i, w) in p.data_mut().iter_mut().enumerate() {
                        m[i] = mu * m[i] + g[i];
                        *w -= lr * m[i];
                    }
                }
            }
        }
    }
}

/// How `‖J(x)‖_F²` enters the joint loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JrMode {
    /// All `d` rows of every Jacobian.
    Exact,
    /// `n_proj` random unit projections per input.
    Projection(usize),
}

impl Default for JrMode {
    fn default() -> Self {
        JrMode::Projection(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UatConfig {
    pub epsilon: f64,
    /// Sign-step size on the shared perturbation; `epsilon / 4` when absent.
    pub attack_step: Option<f64>,
    /// Perturbation updates per batch.
    pub inner_iters: usize,
}

impl UatConfig {
    pub fn new(epsilon: f64) -> Self {
        Self {
            epsilon,
            attack_step: None,
            inner_iters: 1,
        }
    }

    pub fn step(&self) -> f64 {
        self.attack_step.unwrap_or(self.epsilon / 4.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lambda_jr: f64,
    pub jr_mode: JrMode,
    pub seed: u64,
    pub uat: Option<UatConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 100,
            optimizer: OptimizerKind::default(),
            lambda_jr: 0.0,
            jr_mode: JrMode::default(),
            seed: 0,
            uat: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive".into());
        }
        if !(self.lambda_jr >= 0.0) || !self.lambda_jr.is_finite() {
            return bad(format!("lambda_jr must be >= 0, got {}", self.lambda_jr));
        }
        if !(self.optimizer.learning_rate() > 0.0) {
            return bad("learning rate must be positive".into());
        }
        if self.jr_mode == JrMode::Projection(0) {
            return bad("n_proj must be at least 1".into());
        }
        if let Some(u) = &self.uat {
            if !(u.epsilon >= 0.0) || u.inner_iters == 0 || !(u.step() >= 0.0) {
                return bad(format!("invalid UAT settings {u:?}"));
            }
        }
        Ok(())
    }
}

/// Parts of the joint objective, averaged over the batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts<T> {
    pub total: T,
    pub ce: T,
    /// `λ/2 · mean ‖J‖_F²` (estimated in projection mode).
    pub jr: T,
}

/// `CE + λ/2 · (1/B) Σᵢ ‖J(xᵢ)‖_F²` and its parameter gradient.
///
/// In projection mode `‖J‖_F²` is replaced by `(d/k) Σ ‖vᵀJ‖²` over `k`
/// unit-sphere draws `v` per input, an unbiased estimate; the gradient is the
/// exact gradient of that estimate. With `λ = 0` no projections are drawn.
pub fn joint_loss<T: Scalar>(
    net: &Network<T>,
    batch: &Tensor<T>,
    labels: &[usize],
    lambda_jr: f64,
    mode: JrMode,
    rng: &mut RngStream,
) -> Result<(LossParts<T>, ParamGrads<T>)> {
    if !(lambda_jr >= 0.0) {
        return Err(Error::Argument(format!("lambda_jr must be >= 0, got {lambda_jr}")));
    }
    let (logits, trace) = net.forward(batch)?;
    let (ce, dlogits) = softmax_cross_entropy(&logits, labels)?;
    let mut grads = net.backward_params(&trace, &dlogits)?;
    if lambda_jr == 0.0 {
        return Ok((
            LossParts {
                total: ce,
                ce,
                jr: T::zero(),
            },
            grads,
        ));
    }
    let b = labels.len();
    let d = net.num_classes();
    let n = net.input_len();
    let k = match mode {
        JrMode::Exact => d,
        JrMode::Projection(k) if k >= 1 => k,
        JrMode::Projection(_) => return Err(Error::Argument("n_proj must be at least 1".into())),
    };
    let mut proj = Vec::with_capacity(b * k * d);
    for _ in 0..b {
        for r in 0..k {
            match mode {
                JrMode::Exact => proj.extend((0..d).map(|c| if c == r { T::one() } else { T::zero() })),
                JrMode::Projection(_) => proj.extend(sample_unit_sphere::<T>(d, rng)),
            }
        }
    }
    let proj = Tensor::new(vec![b * k, d], proj)?;
    // Exact mode sums all d rows (no d/k rescaling); projections rescale by d/k.
    let per_row = match mode {
        JrMode::Exact => 1.0,
        JrMode::Projection(_) => d as f64 / k as f64,
    };
    let scale = T::of(lambda_jr / 2.0 / b as f64 * per_row);
    let (sq, jr_grads) = if k == 1 {
        net.input_gradient_penalty(&trace, &proj, scale)?
    } else {
        let mut rep = Vec::with_capacity(b * k * n);
        for row in batch.data().chunks(n) {
            for _ in 0..k {
                rep.extend_from_slice(row);
            }
        }
        let (_, rep_trace) = net.forward(&Tensor::new(vec![b * k, n], rep)?)?;
        net.input_gradient_penalty(&rep_trace, &proj, scale)?
    };
    let jr = scale * sq.into_iter().sum::<T>();
    grads.add_scaled(&jr_grads, T::one());
    Ok((LossParts { total: ce + jr, ce, jr }, grads))
}

/// Per-epoch training record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub ce_loss: f64,
    pub jr_term: f64,
    /// Accuracy on the evaluation set, NaN without one.
    pub clean_acc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedModel<T> {
    pub network: Network<T>,
    pub config: TrainConfig,
    pub metrics: Vec<EpochMetrics>,
}

impl<T> TrainedModel<T> {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.metrics.last().map(|m| m.clean_acc)
    }
}

const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_JR: u64 = 2;
const STREAM_UAT: u64 = 3;

/// Standard or Jacobian-regularized training (or UAT when `config.uat` is set).
///
/// Deterministic given the config: initialization, shuffling, projection
/// draws and UAT perturbations use separate child streams of `config.seed`.
pub fn train<T: Scalar>(config: &TrainConfig, train_set: &Dataset, eval_set: Option<&Dataset>) -> Result<TrainedModel<T>> {
    train_with(config, train_set, eval_set, |_| {})
}

/// UAT training; errors if `config.uat` is absent.
pub fn uat_train<T: Scalar>(config: &TrainConfig, train_set: &Dataset, eval_set: Option<&Dataset>) -> Result<TrainedModel<T>> {
    if config.uat.is_none() {
        return Err(Error::Argument("uat_train needs a UAT configuration".into()));
    }
    train(config, train_set, eval_set)
}

/// [`train`] with a callback after every epoch.
pub fn train_with<T: Scalar>(
    config: &TrainConfig,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainedModel<T>> {
    config.validate()?;
    let root = RngStream::new(config.seed);
    let mut net = build_lenet::<T>(train_set.image_shape(), crate::data::NUM_CLASSES, &mut root.child(STREAM_INIT))?;
    let mut opt = Optimizer::new(config.optimizer, &net);
    let mut jr_rng = root.child(STREAM_JR);
    let uat_root = root.child(STREAM_UAT);
    let n = net.input_len();
    let mut metrics = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut shuffle = root.child(STREAM_SHUFFLE).child(epoch as u64);
        let batches = crate::data::batch_indices(train_set.len(), config.batch_size, Some(&mut shuffle))?;
        let mut delta: Option<Vec<T>> = config.uat.map(|u| {
            let mut r = uat_root.child(epoch as u64);
            (0..n).map(|_| T::of(r.uniform_range(-u.epsilon, u.epsilon))).collect()
        });
        let (mut tot, mut ce, mut jr) = (0.0, 0.0, 0.0);
        for (step, idx) in batches.iter().enumerate() {
            let (mut x, y) = train_set.batch::<T>(idx);
            if let (Some(u), Some(d)) = (config.uat.as_ref(), delta.as_mut()) {
                for _ in 0..u.inner_iters {
                    uat_ascent(&net, &x, &y, d, u)
                        .map_err(|e| diverged(epoch, step, e))?;
                }
                perturb_clamped(&mut x, d);
            }
            let (parts, grads) = joint_loss(&net, &x, &y, config.lambda_jr, config.jr_mode, &mut jr_rng)
                .map_err(|e| diverged(epoch, step, e))?;
            if !parts.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: format!("loss {}", parts.total),
                });
            }
            opt.step(&mut net, &grads);
            let w = idx.len() as f64;
            tot += parts.total.as_f64() * w;
            ce += parts.ce.as_f64() * w;
            jr += parts.jr.as_f64() * w;
        }
        let total_n = train_set.len() as f64;
        let m = EpochMetrics {
            epoch: epoch + 1,
            train_loss: tot / total_n,
            ce_loss: ce / total_n,
            jr_term: jr / total_n,
            clean_acc: match eval_set {
                Some(ds) => evaluate_clean(&net, ds)?,
                None => f64::NAN,
            },
        };
        log::info!(
            "epoch {} loss {:.5} ce {:.5} jr {:.5} acc {:.4}",
            m.epoch,
            m.train_loss,
            m.ce_loss,
            m.jr_term,
            m.clean_acc
        );
        on_epoch(&m);
        metrics.push(m);
    }
    Ok(TrainedModel {
        network: net,
        config: config.clone(),
        metrics,
    })
}

fn diverged(epoch: usize, step: usize, e: Error) -> Error {
    match e {
        Error::Numerical { msg, .. } => Error::Diverged { epoch, step, detail: msg },
        other => other,
    }
}

/// `x ← clamp(x + δ, 0, 1)` for every row of `x`.
pub fn perturb_clamped<T: Scalar>(x: &mut Tensor<T>, delta: &[T]) {
    let n = delta.len();
    for row in x.data_mut().chunks_mut(n) {
        for (v, &d) in row.iter_mut().zip(delta) {
            *v = (*v + d).max(T::zero()).min(T::one());
        }
    }
}

/// Summed input gradient of the cross-entropy at `clamp(x + δ)`, with the
/// clamp's derivative applied (zero where `x + δ` leaves `[0, 1]`).
pub fn perturbation_gradient<T: Scalar>(
    net: &Network<T>,
    x: &Tensor<T>,
    labels: &[usize],
    delta: &[T],
    clamp: bool,
) -> Result<(T, Vec<T>)> {
    let n = delta.len();
    let mut xp = x.clone();
    if clamp {
        perturb_clamped(&mut xp, delta);
    } else {
        for row in xp.data_mut().chunks_mut(n) {
            row.iter_mut().zip(delta).for_each(|(v, &d)| *v += d);
        }
    }
    let (logits, trace) = net.forward(&xp)?;
    let (loss, dl) = softmax_cross_entropy(&logits, labels)?;
    let gx = net.backward_input(&trace, &dl)?;
    let mut g = vec![T::zero(); n];
    for (row, xrow) in gx.data().chunks(n).zip(x.data().chunks(n)) {
        for i in 0..n {
            let raw = xrow[i] + delta[i];
            if !clamp || (raw >= T::zero() && raw <= T::one()) {
                g[i] += row[i];
            }
        }
    }
    Ok((loss, g))
}

/// `δ ← clip(δ + α · sign(∇_δ L), -ε, ε)`.
pub fn sign_step<T: Scalar>(delta: &mut [T], grad: &[T], step: T, epsilon: T) {
    for (d, &g) in delta.iter_mut().zip(grad) {
        let s = if g > T::zero() {
            T::one()
        } else if g < T::zero() {
            -T::one()
        } else {
            T::zero()
        };
        *d = (*d + step * s).max(-epsilon).min(epsilon);
    }
}

fn uat_ascent<T: Scalar>(net: &Network<T>, x: &Tensor<T>, y: &[usize], delta: &mut [T], u: &UatConfig) -> Result<()> {
    if u.epsilon == 0.0 {
        return Ok(());
    }
    let (_, g) = perturbation_gradient(net, x, y, delta, true)?;
    sign_step(delta, &g, T::of(u.step()), T::of(u.epsilon));
    Ok(())
}

const EVAL_BATCH: usize = 500;

/// Predicted classes (lowest index wins ties) of `clamp(x + δ)` or `x + δ`
/// for every example, evaluated in parallel batches.
pub fn predict<T: Scalar>(net: &Network<T>, ds: &Dataset, delta: Option<&[T]>, clamp: bool) -> Result<Vec<usize>> {
    let batches = crate::data::batch_indices(ds.len(), EVAL_BATCH, None)?;
    let parts: Vec<Vec<usize>> = batches
        .par_iter()
        .map(|idx| {
            let (mut x, _) = ds.batch::<T>(idx);
            if let Some(d) = delta {
                if clamp {
                    perturb_clamped(&mut x, d);
                } else {
                    let n = d.len();
                    for row in x.data_mut().chunks_mut(n) {
                        row.iter_mut().zip(d).for_each(|(v, &dd)| *v += dd);
                    }
                }
            }
            let logits = net.logits(&x)?;
            Ok((0..idx.len()).map(|i| argmax(logits.row(i))).collect())
        })
        .collect::<Result<_>>()?;
    Ok(parts.concat())
}

/// Fraction of examples whose predicted class equals the label.
pub fn evaluate_clean<T: Scalar>(net: &Network<T>, ds: &Dataset) -> Result<f64> {
    let pred = predict(net, ds, None, false)?;
    let correct = pred.iter().enumerate().filter(|&(i, &p)| p == ds.label(i)).count();
    Ok(correct as f64 / ds.len() as f64)
}
