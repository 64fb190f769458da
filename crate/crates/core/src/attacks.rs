//! Universal adversarial perturbations under an ℓ∞ budget: iterative
//! sign-gradient UAPs, stacked-Jacobian singular-vector UAPs, a random
//! baseline, and the evasion / targeted-success metrics.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{batch_indices, Dataset, Split, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::jacobian::{dominant_singular_direction, stacked_jacobian};
use crate::linalg::NormOrder;
use crate::nn::Network;
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::training::{perturbation_gradient, predict, sign_step};

/// A universal perturbation with its budget and provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perturbation<T> {
    pub delta: Vec<T>,
    /// Always `"linf"`: budgets are ℓ∞ balls.
    pub norm: String,
    pub epsilon: f64,
    pub attack: String,
    pub config_hash: String,
}

impl<T: Scalar> Perturbation<T> {
    pub fn new(delta: Vec<T>, epsilon: f64, attack: impl Into<String>, config_hash: impl Into<String>) -> Result<Self> {
        let p = Self {
            delta,
            norm: "linf".into(),
            epsilon,
            attack: attack.into(),
            config_hash: config_hash.into(),
        };
        if !p.within_budget() {
            return Err(Error::Domain(format!(
                "‖δ‖∞ = {} exceeds ε = {epsilon}",
                p.linf()
            )));
        }
        Ok(p)
    }

    pub fn linf(&self) -> f64 {
        self.delta.iter().fold(0.0, |m, x| m.max(x.as_f64().abs()))
    }

    /// `‖δ‖∞ ≤ ε + 1e-9`, with `ε` rounded to the storage precision of `T`.
    pub fn within_budget(&self) -> bool {
        self.linf() <= T::of(self.epsilon).as_f64() + 1e-9
    }

    pub fn zeros(n: usize, attack: &str) -> Self {
        Self::new(vec![T::zero(); n], 0.0, attack, "").unwrap()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub iterations: usize,
    pub batch_size: usize,
    /// Sign-step size; `epsilon / 10` when absent.
    pub step_size: Option<f64>,
    pub target_class: Option<usize>,
    pub seed: u64,
    pub craft_split: Split,
    pub clamp_inputs: bool,
    /// Start from a uniform draw in the ε-ball instead of zero.
    pub random_init: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.2,
            iterations: 100,
            batch_size: 200,
            step_size: None,
            target_class: None,
            seed: 0,
            craft_split: Split::Train,
            clamp_inputs: true,
            random_init: false,
        }
    }
}

impl AttackConfig {
    pub fn step(&self) -> f64 {
        self.step_size.unwrap_or(self.epsilon / 10.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Argument(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::Argument("iterations and batch size must be positive".into()));
        }
        if self.epsilon > 0.0 && !(self.step() > 0.0) {
            return Err(Error::Argument(format!("step size must be positive, got {}", self.step())));
        }
        if let Some(c) = self.target_class {
            if c >= NUM_CLASSES {
                return Err(Error::Domain(format!("target class {c} outside 0..{NUM_CLASSES}")));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("serializable")))
    }
}

/// State after one attack iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub iteration: usize,
    /// Mean cross-entropy of the batch before the update.
    pub loss: f64,
    pub linf: f64,
}

/// Untargeted SGD UAP: ascent on the true-label cross-entropy.
pub fn sgd_uap_untargeted<T: Scalar>(net: &Network<T>, data: &Dataset, config: &AttackConfig) -> Result<Perturbation<T>> {
    if config.target_class.is_some() {
        return Err(Error::Argument("untargeted attack given a target class".into()));
    }
    sgd_uap_with(net, data, config, |_, _| {})
}

/// Targeted SGD UAP: descent on the cross-entropy toward `config.target_class`.
pub fn sgd_uap_targeted<T: Scalar>(net: &Network<T>, data: &Dataset, config: &AttackConfig) -> Result<Perturbation<T>> {
    if config.target_class.is_none() {
        return Err(Error::Argument("targeted attack needs a target class".into()));
    }
    sgd_uap_with(net, data, config, |_, _| {})
}

/// Iterative sign-gradient UAP (targeted iff `config.target_class` is set),
/// calling `observer` with the perturbation after every projected update.
///
/// Each iteration takes the next `batch_size` examples of a shuffled pass
/// over `data` and applies `δ ← clip(δ ± α · sign(Σᵢ ∇_δ L(xᵢ + δ)), −ε, ε)`.
pub fn sgd_uap_with<T: Scalar>(
    net: &Network<T>,
    data: &Dataset,
    config: &AttackConfig,
    mut observer: impl FnMut(&StepRecord, &[T]),
) -> Result<Perturbation<T>> {
    config.validate()?;
    let n = net.input_len();
    if data.image_len() != n {
        return Err(Error::Shape(format!(
            "images of {} pixels for a network expecting {n}",
            data.image_len()
        )));
    }
    let mut rng = RngStream::new(config.seed);
    let mut init = rng.child(0);
    let eps = T::of(config.epsilon);
    let mut delta: Vec<T> = if config.random_init {
        (0..n).map(|_| T::of(init.uniform_range(-config.epsilon, config.epsilon))).collect()
    } else {
        vec![T::zero(); n]
    };
    let (sign, name) = match config.target_class {
        Some(_) => (-T::one(), "sgd-targeted"),
        None => (T::one(), "sgd-untargeted"),
    };
    let step = T::of(config.step()) * sign;
    let mut queue: Vec<Vec<usize>> = Vec::new();
    for iteration in 0..config.iterations {
        if queue.is_empty() {
            queue = batch_indices(data.len(), config.batch_size, Some(&mut rng))?;
            queue.reverse();
        }
        let idx = queue.pop().unwrap();
        let (x, y) = data.batch::<T>(&idx);
        let labels = match config.target_class {
            Some(c) => vec![c; y.len()],
            None => y,
        };
        let (loss, g) = perturbation_gradient(net, &x, &labels, &delta, config.clamp_inputs)?;
        if config.epsilon > 0.0 {
            sign_step(&mut delta, &g, step, eps);
        }
        let record = StepRecord {
            iteration: iteration + 1,
            loss: loss.as_f64(),
            linf: delta.iter().fold(0.0, |m, x| m.max(x.as_f64().abs())),
        };
        observer(&record, &delta);
    }
    Perturbation::new(delta, config.epsilon, name, config.hash())
}

/// Singular-vector UAP from the stacked Jacobian of `sample`: the dominant
/// (p, 2) direction, scaled so its largest coordinate equals `epsilon`
/// (for p = ∞ every coordinate is ±ε). Of ±δ the one with the higher UER on
/// `sample` is returned.
pub fn svd_uap<T: Scalar>(
    net: &Network<T>,
    sample: &Dataset,
    epsilon: f64,
    p: NormOrder,
    clamp_inputs: bool,
) -> Result<Perturbation<T>> {
    let net64 = net.cast::<f64>();
    let stacked = stacked_jacobian(&net64, &sample.images::<f64>())?;
    let dir = dominant_singular_direction(&stacked.matrix, p)?;
    let peak = dir.direction.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak == 0.0 {
        return Err(Error::Numerical {
            msg: "zero singular direction".into(),
            residual: 0.0,
        });
    }
    let plus: Vec<T> = dir.direction.iter().map(|&v| T::of(epsilon * v / peak)).collect();
    let minus: Vec<T> = plus.iter().map(|&v| -v).collect();
    let up = evaluate_uer(net, sample, &plus, clamp_inputs)?;
    let down = evaluate_uer(net, sample, &minus, clamp_inputs)?;
    let delta = if down > up { minus } else { plus };
    let tag = format!("svd-p{p}-n{}", sample.len());
    let hash = hex::encode(Sha256::digest(tag.as_bytes()));
    Perturbation::new(delta, epsilon, tag, hash)
}

/// Uniformly random ±ε sign pattern, the baseline for universal attacks.
pub fn random_uap<T: Scalar>(n: usize, epsilon: f64, rng: &mut RngStream) -> Perturbation<T> {
    let delta = (0..n).map(|_| T::of(epsilon * rng.sign())).collect();
    Perturbation::new(delta, epsilon, "random-sign", format!("seed-{}", rng.seed())).unwrap()
}

/// Fraction of examples whose prediction under `δ` differs from the label.
pub fn evaluate_uer<T: Scalar>(net: &Network<T>, ds: &Dataset, delta: &[T], clamp_inputs: bool) -> Result<f64> {
    let pred = predict(net, ds, Some(delta), clamp_inputs)?;
    let wrong = pred.iter().enumerate().filter(|&(i, &p)| p != ds.label(i)).count();
    Ok(wrong as f64 / ds.len() as f64)
}

/// Fraction of all examples (class-`c` ones included) predicted as `c` under `δ`.
pub fn evaluate_tsr<T: Scalar>(net: &Network<T>, ds: &Dataset, delta: &[T], c: usize, clamp_inputs: bool) -> Result<f64> {
    if c >= NUM_CLASSES {
        return Err(Error::Domain(format!("target class {c} outside 0..{NUM_CLASSES}")));
    }
    let pred = predict(net, ds, Some(delta), clamp_inputs)?;
    Ok(pred.iter().filter(|&&p| p == c).count() as f64 / ds.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    /// Untargeted SGD UAP, reported as UER.
    Untargeted,
    /// One targeted SGD UAP per class, reported as mean ± sd TSR.
    Targeted,
    /// Stacked-Jacobian ℓ∞ singular-vector UAP, reported as UER.
    Svd,
}

pub const DEFAULT_EPS_GRID: [f64; 5] = [0.10, 0.15, 0.20, 0.25, 0.30];
pub const SVD_SAMPLE: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub epsilon: f64,
    /// `"uer"` or `"tsr"`.
    pub metric: String,
    pub value: f64,
    /// Sample standard deviation over the per-class UAPs (0 for single UAPs).
    pub sd: f64,
    /// Per-class values for targeted sweeps.
    pub per_class: Vec<f64>,
}

/// Mean and sample standard deviation.
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Crafts on `craft` and evaluates on `eval` at every budget in `eps_list`
/// (non-empty, ascending); `base` supplies all other attack settings.
pub fn epsilon_sweep<T: Scalar>(
    net: &Network<T>,
    craft: &Dataset,
    eval: &Dataset,
    eps_list: &[f64],
    kind: AttackKind,
    base: &AttackConfig,
) -> Result<Vec<SweepRow>> {
    if eps_list.is_empty() {
        return Err(Error::Argument("empty epsilon list".into()));
    }
    if eps_list.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Argument("epsilon list must be ascending".into()));
    }
    let mut svd_sample = None;
    let mut rows = Vec::with_capacity(eps_list.len());
    for &epsilon in eps_list {
        let cfg = AttackConfig {
            epsilon,
            target_class: None,
            ..base.clone()
        };
        let row = match kind {
            AttackKind::Untargeted => {
                let p = sgd_uap_untargeted(net, craft, &cfg)?;
                single_row(epsilon, "uer", evaluate_uer(net, eval, &p.delta, cfg.clamp_inputs)?)
            }
            AttackKind::Svd => {
                if svd_sample.is_none() {
                    let per_class = (SVD_SAMPLE / NUM_CLASSES).max(1);
                    let mut r = RngStream::new(base.seed);
                    svd_sample = Some(crate::data::balanced_subset(craft, per_class, &mut r)?);
                }
                let p = svd_uap(net, svd_sample.as_ref().unwrap(), epsilon, NormOrder::LInf, cfg.clamp_inputs)?;
                single_row(epsilon, "uer", evaluate_uer(net, eval, &p.delta, cfg.clamp_inputs)?)
            }
            AttackKind::Targeted => {
                let mut per_class = Vec::with_capacity(NUM_CLASSES);
                for c in 0..NUM_CLASSES {
                    let tc = AttackConfig {
                        target_class: Some(c),
                        ..cfg.clone()
                    };
                    let p = sgd_uap_targeted(net, craft, &tc)?;
                    per_class.push(evaluate_tsr(net, eval, &p.delta, c, cfg.clamp_inputs)?);
                }
                let (value, sd) = mean_sd(&per_class);
                SweepRow {
                    epsilon,
                    metric: "tsr".into(),
                    value,
                    sd,
                    per_class,
                }
            }
        };
        log::info!("eps {epsilon}: {} = {:.4}", row.metric, row.value);
        rows.push(row);
    }
    Ok(rows)
}

fn single_row(epsilon: f64, metric: &str, value: f64) -> SweepRow {
    SweepRow {
        epsilon,
        metric: metric.into(),
        value,
        sd: 0.0,
        per_class: Vec::new(),
    }
}
