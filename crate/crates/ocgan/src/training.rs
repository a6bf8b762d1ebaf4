//! Four-phase adversarial training with informative-negative mining.
//!
//! Each iteration consumes one image batch, one Gaussian noise draw, and one
//! uniform latent draw, shared across the phases:
//!
//! 1. **Classifier**: trained on frozen reconstructions of in-class samples
//!    (label 1) against frozen decodings of random latents (label 0).
//! 2. **Discriminators**: the latent discriminator separates encodings from
//!    uniform samples; the visual discriminator separates decoded random
//!    latents from real images. Discriminators always see *unmined* samples.
//! 3. **Mining**: past the warmup, the random latents are pushed uphill on
//!    the classifier's real-label loss — toward regions that decode to
//!    images the classifier rejects — and clamped back into the open box.
//! 4. **Generator**: encoder and decoder descend on
//!    `BCE(D_l(l1),1) + BCE(D_v(De(l2)),1) + λ·MSE(x, De(l1))` with
//!    `l1 = En(x+n)` and `l2` the (possibly mined) latents.
//!
//! Every phase updates only its own parameters; forward passes through other
//! networks run in `Frozen` mode so even their normalization statistics stay
//! untouched. Model selection tracks the checkpoint with the lowest
//! clean-image validation MSE.

use ndarray::{Array1, Array4, Axis};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::datasets::{self, EvalSplit, ImageBatch};
use crate::model::{networks, LatentBatch, ModelConfig, ModelError, NetKind, Networks};
use crate::nn::{mean_all, Adam, GradStore, Mode, ParameterStore};
use crate::rng;
use crate::Real;

/// Clamp margin keeping mined latents strictly inside the support.
pub const MINING_CLAMP_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at iteration {iteration}: {loss} is not finite")]
    Divergence { iteration: usize, loss: String },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
}

/// Which losses are active, mirroring the ablation ladder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Ablation {
    /// Denoising autoencoder only.
    #[serde(rename = "ae")]
    AeOnly,
    /// Autoencoder + latent discriminator.
    #[serde(rename = "ae+ld")]
    AeLatentDisc,
    /// Autoencoder + both discriminators.
    #[serde(rename = "ae+ld+vd")]
    AeBothDiscs,
    /// Both discriminators + classifier-guided mining.
    #[serde(rename = "full")]
    Full,
}

/// A loss term of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    Latent,
    Visual,
    Classifier,
}

impl Ablation {
    pub fn has_latent_disc(self) -> bool {
        !matches!(self, Ablation::AeOnly)
    }

    pub fn has_visual_disc(self) -> bool {
        matches!(self, Ablation::AeBothDiscs | Ablation::Full)
    }

    pub fn has_classifier(self) -> bool {
        matches!(self, Ablation::Full)
    }

    /// Active losses for this variant; mining additionally requires
    /// [`Ablation::has_classifier`].
    pub fn active_losses(self) -> Vec<LossKind> {
        let mut losses = vec![LossKind::Mse];
        if self.has_latent_disc() {
            losses.push(LossKind::Latent);
        }
        if self.has_visual_disc() {
            losses.push(LossKind::Visual);
        }
        if self.has_classifier() {
            losses.push(LossKind::Classifier);
        }
        losses
    }

    /// Networks that exist under this variant.
    pub fn net_kinds(self) -> Vec<NetKind> {
        let mut kinds = vec![NetKind::Encoder, NetKind::Decoder];
        if self.has_latent_disc() {
            kinds.push(NetKind::LatentDisc);
        }
        if self.has_visual_disc() {
            kinds.push(NetKind::VisualDisc);
        }
        if self.has_classifier() {
            kinds.push(NetKind::Classifier);
        }
        kinds
    }

    pub fn label(self) -> &'static str {
        match self {
            Ablation::AeOnly => "ae",
            Ablation::AeLatentDisc => "ae+ld",
            Ablation::AeBothDiscs => "ae+ld+vd",
            Ablation::Full => "full",
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lambda_mse: f64,
    pub mining_subiterations: usize,
    pub mining_step_size: f64,
    pub mining_warmup_iterations: usize,
    pub optimizer: OptimizerConfig,
    pub val_check_every: usize,
    pub noise_mean: f64,
    pub noise_variance: f64,
    pub seed: u64,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            batch_size: 64,
            lambda_mse: 10.0,
            mining_subiterations: 5,
            mining_step_size: 0.05,
            mining_warmup_iterations: 1000,
            optimizer: OptimizerConfig::default(),
            val_check_every: 500,
            noise_mean: 0.0,
            noise_variance: 0.2,
            seed: 0,
            ablation: Ablation::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size < 1 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.lambda_mse > 0.0) {
            return Err(TrainError::InvalidConfig("lambda_mse must be > 0".into()));
        }
        if !(self.mining_step_size > 0.0) {
            return Err(TrainError::InvalidConfig(
                "mining_step_size must be > 0".into(),
            ));
        }
        if !(self.noise_variance > 0.0) {
            return Err(TrainError::InvalidConfig(
                "noise_variance must be > 0".into(),
            ));
        }
        if self.val_check_every < 1 {
            return Err(TrainError::InvalidConfig(
                "val_check_every must be >= 1".into(),
            ));
        }
        for (label, v) in [
            ("learning_rate", self.optimizer.learning_rate),
            ("beta1", self.optimizer.beta1),
            ("beta2", self.optimizer.beta2),
        ] {
            if !(v > 0.0) {
                return Err(TrainError::InvalidConfig(format!("{label} must be > 0")));
            }
        }
        Ok(())
    }
}

/// Per-iteration losses; the generator total follows the full objective of
/// the training procedure, including the terms that carry no gradient.
#[derive(Debug, Clone, Copy)]
pub struct LossReport {
    pub iteration: usize,
    pub l_mse: f64,
    pub l_latent_disc: f64,
    pub l_visual_disc: f64,
    pub l_classifier: f64,
    pub l_generator_total: f64,
    pub val_mse: Option<f64>,
}

/// Mean squared error between a batch and its reconstruction.
pub fn mse_loss<R: Real>(x: &ImageBatch<R>, recon: &ImageBatch<R>) -> Result<R, ModelError> {
    if x.data().dim() != recon.data().dim() {
        let d = recon.data().dim();
        return Err(ModelError::Shape {
            expected: format!("{:?}", x.data().dim()),
            got: vec![d.0, d.1, d.2, d.3],
        });
    }
    Ok(mse_value(x.data(), recon.data()))
}

fn mse_value<R: Real>(x: &Array4<R>, r: &Array4<R>) -> R {
    let diff = x - r;
    mean_all(&diff.mapv(|v| v * v).into_dyn())
}

fn mse_with_grad<R: Real>(x: &Array4<R>, r: &Array4<R>) -> (R, Array4<R>) {
    let n = R::from_f64(x.len() as f64);
    let diff = r - x;
    let loss = diff.mapv(|v| v * v).sum() / n;
    let grad = diff.mapv(|v| (v + v) / n);
    (loss, grad)
}

fn softplus<R: Real>(z: R) -> R {
    if z > R::zero() {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Mean binary cross entropy against a constant 0/1 target, computed in the
/// numerically stable logit form.
pub fn bce_from_logits<R: Real>(logits: &Array1<R>, target: u8) -> R {
    assert!(target <= 1, "target must be 0 or 1");
    let t = R::from_f64(target as f64);
    let n = R::from_f64(logits.len() as f64);
    logits.iter().map(|&z| softplus(z) - t * z).sum::<R>() / n
}

fn bce_with_grad<R: Real>(logits: &Array1<R>, target: u8) -> (R, Array1<R>) {
    let loss = bce_from_logits(logits, target);
    let t = R::from_f64(target as f64);
    let n = R::from_f64(logits.len() as f64);
    let grad = logits.mapv(|z| (R::one() / (R::one() + (-z).exp()) - t) / n);
    (loss, grad)
}

/// Lift a per-logit gradient back to the `(batch, 1)` head output.
fn logit_grad_to_2d<R: Real>(grad: Array1<R>) -> ndarray::ArrayD<R> {
    let n = grad.len();
    grad.into_shape((n, 1)).expect("column vector").into_dyn()
}

/// Gradient-ascent mining of informative-negative latents.
///
/// Takes `subiterations` steps of size `step_size` uphill on
/// `BCE(C(De(l2)), 1)` with respect to `l2`, clamping back into the open box
/// after each step. No network parameter (or statistic) changes.
pub fn mine_informative_negatives<R: Real>(
    nets: &Networks,
    store: &ParameterStore<R>,
    l2: &LatentBatch<R>,
    subiterations: usize,
    step_size: f64,
) -> LatentBatch<R> {
    let step = R::from_f64(step_size);
    let hi = R::from_f64(1.0 - MINING_CLAMP_EPS);
    let lo = R::from_f64(-1.0 + MINING_CLAMP_EPS);
    let mut cur = l2.data.clone();
    for _ in 0..subiterations {
        let de_pass = nets
            .decoder
            .forward_cached(store, cur.clone().into_dyn(), Mode::Frozen);
        let cls_pass = nets
            .classifier
            .forward_cached(store, de_pass.output.clone(), Mode::Frozen);
        let logits = crate::nn::squeeze_logits(cls_pass.output.clone());
        let (_, dz) = bce_with_grad(&logits, 1);
        let dimg = nets
            .classifier
            .backward(store, &cls_pass, logit_grad_to_2d(dz), None);
        let dl2 = nets.decoder.backward(store, &de_pass, dimg, None);
        let dl2 = dl2.into_dimensionality::<ndarray::Ix4>().expect("latent rank");
        cur.zip_mut_with(&dl2, |c, &d| {
            let moved = *c + step * d;
            *c = if moved > hi {
                hi
            } else if moved < lo {
                lo
            } else {
                moved
            };
        });
    }
    LatentBatch { data: cur }
}

struct IterDraws<R: Real> {
    x: Array4<R>,
    noisy: Array4<R>,
    l1: Array4<R>,
    l2: Array4<R>,
    de_l1: Option<Array4<R>>,
    de_l2: Option<Array4<R>>,
}

/// Mutable training state: parameters, optimizers, RNG streams, the best
/// checkpoint so far, and the per-iteration loss log.
pub struct Trainer<R: Real> {
    nets: Networks,
    store: ParameterStore<R>,
    config: TrainConfig,
    opt_gen: Adam<R>,
    opt_disc: Adam<R>,
    opt_cls: Adam<R>,
    noise_rng: ChaCha8Rng,
    latent_rng: ChaCha8Rng,
    shuffle_rng: ChaCha8Rng,
    completed: usize,
    best_val_mse: f64,
    best_store: ParameterStore<R>,
    loss_log: Vec<LossReport>,
    draws: Option<IterDraws<R>>,
}

impl<R: Real> Trainer<R> {
    pub fn new(model_config: &ModelConfig, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let nets = networks(model_config)?;
        let mut store = ParameterStore::new();
        nets.init_params(&mut store, &config.ablation.net_kinds());
        let opt = &config.optimizer;
        let best_store = store.clone();
        Ok(Self {
            nets,
            store,
            opt_gen: Adam::new(opt.learning_rate, opt.beta1, opt.beta2),
            opt_disc: Adam::new(opt.learning_rate, opt.beta1, opt.beta2),
            opt_cls: Adam::new(opt.learning_rate, opt.beta1, opt.beta2),
            noise_rng: rng::stream(config.seed, "train/noise"),
            latent_rng: rng::stream(config.seed, "train/latent"),
            shuffle_rng: rng::stream(config.seed, "train/shuffle"),
            config,
            completed: 0,
            best_val_mse: f64::INFINITY,
            best_store,
            loss_log: Vec::new(),
            draws: None,
        })
    }

    pub fn networks(&self) -> &Networks {
        &self.nets
    }

    pub fn parameters(&self) -> &ParameterStore<R> {
        &self.store
    }

    pub fn best_parameters(&self) -> &ParameterStore<R> {
        &self.best_store
    }

    pub fn best_val_mse(&self) -> f64 {
        self.best_val_mse
    }

    pub fn iteration(&self) -> usize {
        self.completed
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn loss_log(&self) -> &[LossReport] {
        &self.loss_log
    }

    /// Draw the iteration's noise and uniform latents and pre-compute the
    /// shared frozen encoding `l1 = En(x+n)`.
    pub fn begin_iteration(&mut self, batch: &ImageBatch<R>) {
        let x = batch.data().clone();
        let noisy = datasets::add_noise_with(
            &x,
            self.config.noise_mean,
            self.config.noise_variance.sqrt(),
            &mut self.noise_rng,
        );
        let l2 = crate::model::sample_uniform_latent_with::<R>(
            &self.nets.latent,
            x.len_of(Axis(0)),
            &mut self.latent_rng,
        );
        let l1 = self
            .nets
            .encoder
            .forward(&self.store, noisy.clone().into_dyn(), Mode::Frozen)
            .into_dimensionality()
            .expect("latent rank");
        self.draws = Some(IterDraws {
            x,
            noisy,
            l1,
            l2: l2.data,
            de_l1: None,
            de_l2: None,
        });
    }

    fn frozen_decode(&self, latent: &Array4<R>) -> Array4<R> {
        self.nets
            .decoder
            .forward(&self.store, latent.clone().into_dyn(), Mode::Frozen)
            .into_dimensionality()
            .expect("image rank")
    }

    /// Classifier update; everything else stays fixed. Returns the
    /// classifier loss (0 when the variant has no classifier).
    pub fn classifier_step(&mut self) -> f64 {
        if !self.config.ablation.has_classifier() {
            return 0.0;
        }
        let draws = self.draws.as_mut().expect("begin_iteration first");
        if draws.de_l1.is_none() {
            draws.de_l1 = Some(
                self.nets
                    .decoder
                    .forward(&self.store, draws.l1.clone().into_dyn(), Mode::Frozen)
                    .into_dimensionality()
                    .expect("image rank"),
            );
        }
        if draws.de_l2.is_none() {
            draws.de_l2 = Some(
                self.nets
                    .decoder
                    .forward(&self.store, draws.l2.clone().into_dyn(), Mode::Frozen)
                    .into_dimensionality()
                    .expect("image rank"),
            );
        }
        let de_l1 = draws.de_l1.clone().unwrap();
        let de_l2 = draws.de_l2.clone().unwrap();

        let mut grads = GradStore::new();
        // Fake reconstructions first, as in the training procedure.
        let pass_fake =
            self.nets
                .classifier
                .forward_cached(&self.store, de_l2.into_dyn(), Mode::Train);
        pass_fake.commit_stats(&mut self.store);
        let (loss_fake, dz_fake) =
            bce_with_grad(&crate::nn::squeeze_logits(pass_fake.output.clone()), 0);
        let pass_real =
            self.nets
                .classifier
                .forward_cached(&self.store, de_l1.into_dyn(), Mode::Train);
        pass_real.commit_stats(&mut self.store);
        let (loss_real, dz_real) =
            bce_with_grad(&crate::nn::squeeze_logits(pass_real.output.clone()), 1);

        self.nets.classifier.backward(
            &self.store,
            &pass_fake,
            logit_grad_to_2d(dz_fake),
            Some(&mut grads),
        );
        self.nets.classifier.backward(
            &self.store,
            &pass_real,
            logit_grad_to_2d(dz_real),
            Some(&mut grads),
        );
        self.opt_cls.step(&mut self.store, &grads);
        (loss_fake + loss_real).as_f64()
    }

    /// Discriminator update; returns `(latent, visual)` losses
    /// (0 for discriminators the variant does not build).
    pub fn discriminator_step(&mut self) -> (f64, f64) {
        let ablation = self.config.ablation;
        if !ablation.has_latent_disc() && !ablation.has_visual_disc() {
            return (0.0, 0.0);
        }
        let mut grads = GradStore::new();
        let mut l_latent = 0.0;
        let mut l_visual = 0.0;

        if ablation.has_latent_disc() {
            let draws = self.draws.as_ref().expect("begin_iteration first");
            let l1 = draws.l1.clone();
            let l2 = draws.l2.clone();
            // Encodings are fakes (label 0); uniform samples are real (1).
            let pass_fake =
                self.nets
                    .latent_disc
                    .forward_cached(&self.store, l1.into_dyn(), Mode::Train);
            pass_fake.commit_stats(&mut self.store);
            let (lf, dzf) = bce_with_grad(&crate::nn::squeeze_logits(pass_fake.output.clone()), 0);
            let pass_real =
                self.nets
                    .latent_disc
                    .forward_cached(&self.store, l2.into_dyn(), Mode::Train);
            pass_real.commit_stats(&mut self.store);
            let (lr, dzr) = bce_with_grad(&crate::nn::squeeze_logits(pass_real.output.clone()), 1);
            self.nets.latent_disc.backward(
                &self.store,
                &pass_fake,
                logit_grad_to_2d(dzf),
                Some(&mut grads),
            );
            self.nets.latent_disc.backward(
                &self.store,
                &pass_real,
                logit_grad_to_2d(dzr),
                Some(&mut grads),
            );
            l_latent = (lf + lr).as_f64();
        }

        if ablation.has_visual_disc() {
            if self.draws.as_ref().expect("begin_iteration first").de_l2.is_none() {
                let l2 = self.draws.as_ref().unwrap().l2.clone();
                let decoded = self.frozen_decode(&l2);
                self.draws.as_mut().unwrap().de_l2 = Some(decoded);
            }
            let draws = self.draws.as_ref().unwrap();
            let fake_images = draws.de_l2.clone().unwrap();
            let x = draws.x.clone();
            let pass_fake = self.nets.visual_disc.forward_cached(
                &self.store,
                fake_images.into_dyn(),
                Mode::Train,
            );
            pass_fake.commit_stats(&mut self.store);
            let (lf, dzf) = bce_with_grad(&crate::nn::squeeze_logits(pass_fake.output.clone()), 0);
            let pass_real =
                self.nets
                    .visual_disc
                    .forward_cached(&self.store, x.into_dyn(), Mode::Train);
            pass_real.commit_stats(&mut self.store);
            let (lr, dzr) = bce_with_grad(&crate::nn::squeeze_logits(pass_real.output.clone()), 1);
            self.nets.visual_disc.backward(
                &self.store,
                &pass_fake,
                logit_grad_to_2d(dzf),
                Some(&mut grads),
            );
            self.nets.visual_disc.backward(
                &self.store,
                &pass_real,
                logit_grad_to_2d(dzr),
                Some(&mut grads),
            );
            l_visual = (lf + lr).as_f64();
        }

        self.opt_disc.step(&mut self.store, &grads);
        (l_latent, l_visual)
    }

    /// Whether mining is active at the current iteration.
    pub fn mining_active(&self) -> bool {
        self.config.ablation.has_classifier()
            && self.config.mining_subiterations > 0
            && self.completed >= self.config.mining_warmup_iterations
    }

    /// Replace the iteration's random latents with mined ones (no-op before
    /// the warmup or outside the full variant).
    pub fn mining_step(&mut self) {
        if !self.mining_active() {
            return;
        }
        let draws = self.draws.as_mut().expect("begin_iteration first");
        let mined = mine_informative_negatives(
            &self.nets,
            &self.store,
            &LatentBatch {
                data: draws.l2.clone(),
            },
            self.config.mining_subiterations,
            self.config.mining_step_size,
        );
        draws.l2 = mined.data;
        draws.de_l2 = None;
    }

    /// Generator (encoder + decoder) update. Returns
    /// `(l_mse, l_generator_total)` where the total mirrors the full
    /// training objective including its constant terms.
    pub fn generator_step(&mut self) -> (f64, f64) {
        let ablation = self.config.ablation;
        let draws = self.draws.take().expect("begin_iteration first");
        let lambda = R::from_f64(self.config.lambda_mse);
        let mut grads = GradStore::new();

        // l1 = En(x+n), with caches this time; values match the frozen pass.
        let enc_pass =
            self.nets
                .encoder
                .forward_cached(&self.store, draws.noisy.clone().into_dyn(), Mode::Train);
        enc_pass.commit_stats(&mut self.store);
        let l1 = enc_pass.output.clone();

        let dec_pass_recon =
            self.nets
                .decoder
                .forward_cached(&self.store, l1.clone(), Mode::Train);
        dec_pass_recon.commit_stats(&mut self.store);
        let recon = dec_pass_recon
            .output
            .clone()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("image rank");
        let (mse, dmse) = mse_with_grad(&draws.x, &recon);

        let mut dl1 = ndarray::ArrayD::<R>::zeros(l1.raw_dim());

        let mut latent_adv = R::zero();
        if ablation.has_latent_disc() {
            let dl_pass = self
                .nets
                .latent_disc
                .forward_cached(&self.store, l1.clone(), Mode::Frozen);
            let (loss, dz) = bce_with_grad(&crate::nn::squeeze_logits(dl_pass.output.clone()), 1);
            latent_adv = loss;
            let d = self
                .nets
                .latent_disc
                .backward(&self.store, &dl_pass, logit_grad_to_2d(dz), None);
            dl1 += &d;
        }

        let mut visual_adv = R::zero();
        let mut dec_pass_fake = None;
        if ablation.has_visual_disc() {
            let pass = self
                .nets
                .decoder
                .forward_cached(&self.store, draws.l2.clone().into_dyn(), Mode::Train);
            pass.commit_stats(&mut self.store);
            let dv_pass = self
                .nets
                .visual_disc
                .forward_cached(&self.store, pass.output.clone(), Mode::Frozen);
            let (loss, dz) = bce_with_grad(&crate::nn::squeeze_logits(dv_pass.output.clone()), 1);
            visual_adv = loss;
            let dimg = self
                .nets
                .visual_disc
                .backward(&self.store, &dv_pass, logit_grad_to_2d(dz), None);
            self.nets
                .decoder
                .backward(&self.store, &pass, dimg, Some(&mut grads));
            dec_pass_fake = Some(pass);
        }

        // λ·MSE path through the reconstruction decoder.
        let dmse_scaled = dmse.mapv(|v| v * lambda).into_dyn();
        let d = self
            .nets
            .decoder
            .backward(&self.store, &dec_pass_recon, dmse_scaled, Some(&mut grads));
        dl1 += &d;

        self.nets
            .encoder
            .backward(&self.store, &enc_pass, dl1, Some(&mut grads));
        self.opt_gen.step(&mut self.store, &grads);

        // Algorithm parity: log the constant terms the objective omits.
        let mut total = lambda.as_f64() * mse.as_f64();
        if ablation.has_latent_disc() {
            let logits = crate::nn::squeeze_logits(self.nets.latent_disc.forward(
                &self.store,
                draws.l2.clone().into_dyn(),
                Mode::Frozen,
            ));
            total += latent_adv.as_f64() + bce_from_logits(&logits, 0).as_f64();
        }
        if ablation.has_visual_disc() {
            let logits = crate::nn::squeeze_logits(self.nets.visual_disc.forward(
                &self.store,
                draws.x.clone().into_dyn(),
                Mode::Frozen,
            ));
            total += visual_adv.as_f64() + bce_from_logits(&logits, 0).as_f64();
        }
        drop(dec_pass_fake);
        (mse.as_f64(), total)
    }

    /// Clean-image reconstruction MSE in evaluation mode, chunked.
    pub fn validation_mse(&self, val: &ImageBatch<R>) -> Option<f64> {
        if val.is_empty() {
            return None;
        }
        let errors = crate::model::reconstruction_errors(&self.nets, &self.store, val.data());
        Some(errors.iter().sum::<f64>() / errors.len() as f64)
    }

    fn run_iteration(&mut self, batch: &ImageBatch<R>) -> Result<LossReport, TrainError> {
        self.begin_iteration(batch);
        let l_classifier = self.classifier_step();
        let (l_latent_disc, l_visual_disc) = self.discriminator_step();
        self.mining_step();
        let (l_mse, l_generator_total) = self.generator_step();
        let report = LossReport {
            iteration: self.completed,
            l_mse,
            l_latent_disc,
            l_visual_disc,
            l_classifier,
            l_generator_total,
            val_mse: None,
        };
        for (name, value) in [
            ("l_mse", l_mse),
            ("l_latent", l_latent_disc),
            ("l_visual", l_visual_disc),
            ("l_classifier", l_classifier),
            ("l_generator_total", l_generator_total),
        ] {
            if !value.is_finite() {
                return Err(TrainError::Divergence {
                    iteration: self.completed,
                    loss: name.to_string(),
                });
            }
        }
        Ok(report)
    }

    fn check_validation(&mut self, val: &ImageBatch<R>) -> Option<f64> {
        let measured = self.validation_mse(val)?;
        if measured < self.best_val_mse {
            self.best_val_mse = measured;
            self.best_store = self.store.clone();
        }
        Some(measured)
    }

    /// Run the full loop over shuffled batches.
    pub fn train(&mut self, split: &EvalSplit<R>) -> Result<(), TrainError> {
        if split.train.is_empty() {
            return Err(TrainError::EmptyTrainingSet);
        }
        // Baseline: the initialized parameters are the starting checkpoint.
        self.check_validation(&split.val);
        let total = self.config.iterations;
        'outer: loop {
            if self.completed >= total {
                break;
            }
            let epoch_seed: u64 = rand::Rng::gen(&mut self.shuffle_rng);
            for batch in datasets::batches(&split.train, self.config.batch_size, epoch_seed) {
                if self.completed >= total {
                    break 'outer;
                }
                let mut report = self.run_iteration(&batch)?;
                self.completed += 1;
                if self.completed % self.config.val_check_every == 0 {
                    report.val_mse = self.check_validation(&split.val);
                }
                self.loss_log.push(report);
            }
        }
        if total > 0 && self.completed % self.config.val_check_every != 0 {
            let measured = self.check_validation(&split.val);
            if let Some(last) = self.loss_log.last_mut() {
                last.val_mse = measured;
            }
        }
        Ok(())
    }
}

/// Build a trainer and run the whole loop.
pub fn train<R: Real>(
    split: &EvalSplit<R>,
    model_config: &ModelConfig,
    train_config: TrainConfig,
) -> Result<Trainer<R>, TrainError> {
    let mut trainer = Trainer::new(model_config, train_config)?;
    trainer.train(split)?;
    Ok(trainer)
}

/// Write the per-iteration loss log as CSV.
pub fn write_loss_csv(path: &std::path::Path, reports: &[LossReport]) -> std::io::Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        out,
        "iteration,l_mse,l_latent,l_visual,l_classifier,l_gen_total,val_mse"
    )?;
    for r in reports {
        let val = r.val_mse.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.iteration,
            r.l_mse,
            r.l_latent_disc,
            r.l_visual_disc,
            r.l_classifier,
            r.l_generator_total,
            val
        )?;
    }
    Ok(())
}
