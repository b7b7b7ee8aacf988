//! Gradient descent / proximal mirror ascent training and the reweighting
//! baselines.
//!
//! One step of [`Trainer::step`]:
//!
//! 1. take the next minibatch of the epoch's shuffled order,
//! 2. update the EMA label-marginal estimate `p_emp`,
//! 3. form the importance-weighted gradient with weights `π(y)/p_emp(y)`,
//! 4. take an SGD-with-momentum step on θ,
//! 5. (adversarial methods) evaluate clipped losses at the new θ and update π.

use rand::seq::SliceRandom;

use crate::adversary::{
    adversary_gradient, ema_update, lagrange_alpha, mirror_proximal_update, AdversaryConfig, AdversaryState,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{accumulate_gradient, per_example_loss, predict, Architecture, Example, ModelParams};
use crate::rng;
use crate::simplex::{euclidean_project_simplex, kl_divergence, LabelDistribution};

#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    AdvShift,
    /// `π ≡ p_emp`: plain empirical risk.
    Erm,
    /// `π ≡ uniform`.
    Balanced,
    /// `π` held at a given distribution.
    Fixed(LabelDistribution),
    /// Unconstrained worst-case weights by projected gradient ascent.
    Agnostic,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::AdvShift => "advshift",
            Method::Erm => "erm",
            Method::Balanced => "balanced",
            Method::Fixed(_) => "fixed",
            Method::Agnostic => "agnostic",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub adversary: AdversaryConfig,
    pub arch: Architecture,
    pub theta_lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Step size of the agnostic baseline's projected ascent.
    pub agnostic_lr: f64,
    /// Multiply `theta_lr` by `factor` every `every` epochs.
    pub lr_decay: Option<(usize, f64)>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Erm,
            adversary: AdversaryConfig::default(),
            arch: Architecture::Linear,
            theta_lr: 0.1,
            momentum: 0.9,
            batch_size: 64,
            epochs: 20,
            seed: 0,
            agnostic_lr: 0.01,
            lr_decay: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adversary.validate()?;
        if !(self.theta_lr > 0.0 && self.theta_lr.is_finite()) {
            return Err(Error::config("theta_lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be positive"));
        }
        if !(self.agnostic_lr > 0.0 && self.agnostic_lr.is_finite()) {
            return Err(Error::config("agnostic_lr must be positive"));
        }
        if let Some((every, factor)) = self.lr_decay {
            if every == 0 || !(factor > 0.0 && factor.is_finite()) {
                return Err(Error::config("lr decay needs a positive period and factor"));
            }
        }
        Ok(())
    }

    pub fn theta_lr_at(&self, epoch: usize) -> f64 {
        match self.lr_decay {
            Some((every, factor)) => self.theta_lr * factor.powi((epoch / every) as i32),
            None => self.theta_lr,
        }
    }
}

/// Rates from the convergence analysis for a run of `total_steps` steps:
/// `η_θ = T^{-3/4}`, `λ = T^{-1/4}`, block length `B = T^{1/2}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheorySchedule {
    pub theta_lr: f64,
    pub lambda: f64,
    pub block: usize,
}

impl TheorySchedule {
    pub fn for_steps(total_steps: usize) -> Self {
        let t = total_steps.max(1) as f64;
        Self { theta_lr: t.powf(-0.75), lambda: t.powf(-0.25), block: t.sqrt().round().max(1.0) as usize }
    }

    /// Applies the rates, keeping `2γ_cλ = 1` and using the derived step.
    pub fn apply(&self, cfg: &mut TrainConfig) {
        cfg.theta_lr = self.theta_lr;
        cfg.momentum = 0.0;
        cfg.adversary.lambda = self.lambda;
        cfg.adversary.gamma_c = 1.0 / (2.0 * self.lambda);
        cfg.adversary.eta_pi = None;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub class_losses: Vec<f64>,
    pub class_errors: Vec<f64>,
    /// Weights in force at the end of the epoch.
    pub pi: LabelDistribution,
    pub p_emp: LabelDistribution,
    pub kl_pi_pemp: f64,
    /// Smallest entry `π` reached at any step of the epoch.
    pub min_pi: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn max_kl(&self) -> f64 {
        self.records.iter().map(|r| r.kl_pi_pemp).fold(0.0, f64::max)
    }

    pub fn min_pi(&self) -> f64 {
        self.records.iter().map(|r| r.min_pi).fold(f64::INFINITY, f64::min)
    }
}

/// What a single step did, for tracing.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub batch_loss: f64,
    pub alpha: f64,
    pub pi: LabelDistribution,
}

/// `(1/b) Σ π(y)/p_emp(y) ∇ℓ(x, y)` over `batch`.
pub fn weighted_theta_gradient(
    batch: &[&Example],
    pi: &LabelDistribution,
    p_emp: &LabelDistribution,
    params: &ModelParams,
) -> Result<Vec<f64>> {
    Ok(weighted_gradient_and_loss(batch, pi, p_emp, params)?.0)
}

fn weighted_gradient_and_loss(
    batch: &[&Example],
    pi: &LabelDistribution,
    p_emp: &LabelDistribution,
    params: &ModelParams,
) -> Result<(Vec<f64>, f64)> {
    if batch.is_empty() {
        return Err(Error::domain("empty minibatch"));
    }
    if pi.len() != p_emp.len() || pi.len() != params.num_classes() {
        return Err(Error::shape("pi, p_emp and model disagree on the number of classes"));
    }
    let b = batch.len() as f64;
    let mut grad = vec![0.0; params.num_params()];
    let mut loss = 0.0;
    for ex in batch {
        let y = ex.label;
        if y >= pi.len() {
            return Err(Error::shape(format!("label {y} out of range")));
        }
        let mass = p_emp.probs()[y];
        if mass <= 0.0 {
            return Err(Error::domain(format!("label {y} has zero mass in p_emp")));
        }
        let w = pi.probs()[y] / mass;
        loss += accumulate_gradient(params, ex, w / b, &mut grad)? / b;
    }
    Ok((grad, loss))
}

/// `v' = momentum·v + grad; θ' = θ − lr·v'`, in place.
pub fn sgd_momentum_step(params: &mut [f64], grad: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) -> Result<()> {
    if params.len() != grad.len() || params.len() != velocity.len() {
        return Err(Error::shape(format!("params {}, grad {}, velocity {}", params.len(), grad.len(), velocity.len())));
    }
    for ((p, g), v) in params.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    data: &'a Dataset,
    params: ModelParams,
    velocity: Vec<f64>,
    adversary: AdversaryState,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
    epoch_min_pi: f64,
    history: TrainHistory,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, data: &'a Dataset) -> Result<Self> {
        cfg.validate()?;
        data.check_covers_all_classes()?;
        if cfg.batch_size > data.len() {
            return Err(Error::config(format!("batch = {} exceeds dataset size {}", cfg.batch_size, data.len())));
        }
        let l = data.num_classes();
        if let Method::Fixed(pi) = &cfg.method {
            if pi.len() != l {
                return Err(Error::config(format!("fixed pi has {} classes, data {l}", pi.len())));
            }
        }
        let params = ModelParams::init(cfg.arch, data.dim(), l, rng::derive_seed(cfg.seed, "init", 0));
        let velocity = vec![0.0; params.num_params()];
        let mut trainer = Self {
            cfg,
            data,
            params,
            velocity,
            adversary: AdversaryState::new(l),
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
            epoch_min_pi: f64::INFINITY,
            history: TrainHistory::default(),
        };
        trainer.reshuffle();
        Ok(trainer)
    }

    /// Replaces the initial parameters (same shape required).
    pub fn with_params(mut self, params: ModelParams) -> Result<Self> {
        if params.num_params() != self.params.num_params() || params.num_classes() != self.params.num_classes() {
            return Err(Error::shape("replacement parameters have a different shape"));
        }
        self.params = params;
        Ok(self)
    }

    fn reshuffle(&mut self) {
        let mut rng = rng::stream(self.cfg.seed, "shuffle", self.epoch as u64);
        self.order = (0..self.data.len()).collect();
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn adversary(&self) -> &AdversaryState {
        &self.adversary
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.data.len().div_ceil(self.cfg.batch_size)
    }

    /// Weights used for the θ-gradient under the configured method.
    pub fn current_pi(&self) -> LabelDistribution {
        match &self.cfg.method {
            Method::AdvShift | Method::Agnostic => self.adversary.pi.clone(),
            Method::Erm => self.adversary.p_emp.clone(),
            Method::Balanced => LabelDistribution::uniform(self.data.num_classes()),
            Method::Fixed(pi) => pi.clone(),
        }
    }

    /// True once every minibatch of the current epoch has been taken;
    /// [`Trainer::run_epoch`] then only records and reshuffles.
    pub fn epoch_finished(&self) -> bool {
        self.cursor >= self.order.len()
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        if self.epoch_finished() {
            return Err(Error::domain("epoch exhausted; call run_epoch before stepping again"));
        }
        let end = (self.cursor + self.cfg.batch_size).min(self.order.len());
        let batch: Vec<&Example> = self.order[self.cursor..end].iter().map(|&i| &self.data.examples()[i]).collect();
        self.cursor = end;
        let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();

        self.adversary.p_emp = ema_update(&self.adversary.p_emp, &labels, self.cfg.adversary.beta)?;
        let pi = self.current_pi();
        let (grad, batch_loss) = weighted_gradient_and_loss(&batch, &pi, &self.adversary.p_emp, &self.params)?;
        let lr = self.cfg.theta_lr_at(self.epoch);
        sgd_momentum_step(self.params.weights_mut(), &grad, &mut self.velocity, lr, self.cfg.momentum)?;

        let mut alpha = 0.0;
        if matches!(self.cfg.method, Method::AdvShift | Method::Agnostic) {
            let losses = batch.iter().map(|ex| per_example_loss(&self.params, ex)).collect::<Result<Vec<_>>>()?;
            let adv = &self.cfg.adversary;
            let g = adversary_gradient(&labels, &losses, &self.adversary.p_emp, adv.clip)?;
            self.adversary.pi = if self.cfg.method == Method::AdvShift {
                alpha = lagrange_alpha(&self.adversary.pi, &self.adversary.p_emp, adv)?;
                mirror_proximal_update(&self.adversary, &g, alpha, adv)?
            } else {
                let moved: Vec<f64> =
                    self.adversary.pi.probs().iter().zip(&g).map(|(p, gi)| p + self.cfg.agnostic_lr * gi).collect();
                euclidean_project_simplex(&moved)?
            };
        }
        self.adversary.step += 1;
        let pi = self.current_pi();
        self.epoch_min_pi = self.epoch_min_pi.min(pi.min_entry());
        Ok(StepRecord { step: self.adversary.step, batch_loss, alpha, pi })
    }

    pub fn run_epoch(&mut self) -> Result<&EpochRecord> {
        while self.cursor < self.order.len() {
            self.step()?;
        }
        let (class_losses, class_errors) = class_loss_and_error(&self.params, self.data)?;
        let n = self.data.len() as f64;
        let counts = self.data.class_counts();
        let mean_loss = class_losses.iter().zip(&counts).map(|(l, &c)| l * c as f64).sum::<f64>() / n;
        let pi = self.current_pi();
        // The agnostic iterate can sit on the boundary, where KL to p_emp is
        // still finite because p_emp is interior.
        let kl_pi_pemp = kl_divergence(&pi, &self.adversary.p_emp)?;
        self.history.records.push(EpochRecord {
            epoch: self.epoch + 1,
            mean_loss,
            class_losses,
            class_errors,
            pi,
            p_emp: self.adversary.p_emp.clone(),
            kl_pi_pemp,
            min_pi: self.epoch_min_pi,
        });
        self.epoch += 1;
        self.epoch_min_pi = f64::INFINITY;
        self.reshuffle();
        Ok(self.history.records.last().expect("just pushed"))
    }

    pub fn finish(self) -> (ModelParams, TrainHistory) {
        (self.params, self.history)
    }
}

/// Mean loss and 0-1 error per class (NaN for empty classes).
pub fn class_loss_and_error(params: &ModelParams, data: &Dataset) -> Result<(Vec<f64>, Vec<f64>)> {
    let l = data.num_classes();
    let mut loss = vec![0.0; l];
    let mut err = vec![0.0; l];
    let mut count = vec![0usize; l];
    for ex in data.examples() {
        loss[ex.label] += per_example_loss(params, ex)?;
        if predict(params, &ex.features)? != ex.label {
            err[ex.label] += 1.0;
        }
        count[ex.label] += 1;
    }
    for k in 0..l {
        let c = count[k] as f64;
        loss[k] /= c;
        err[k] /= c;
    }
    Ok((loss, err))
}

/// Runs all configured epochs.
pub fn train(cfg: &TrainConfig, data: &Dataset) -> Result<(ModelParams, TrainHistory)> {
    let mut trainer = Trainer::new(cfg.clone(), data)?;
    for _ in 0..cfg.epochs {
        trainer.run_epoch()?;
    }
    Ok(trainer.finish())
}

/// Like [`train`] but also returns the parameters after every epoch.
pub fn train_with_checkpoints(cfg: &TrainConfig, data: &Dataset) -> Result<(Vec<ModelParams>, TrainHistory)> {
    let mut trainer = Trainer::new(cfg.clone(), data)?;
    let mut checkpoints = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        trainer.run_epoch()?;
        checkpoints.push(trainer.params().clone());
    }
    Ok((checkpoints, trainer.finish().1))
}
