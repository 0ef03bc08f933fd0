//! Adam optimization, the three-phase training step (critics, classifier,
//! generators), the deterministic training loop with checkpoint/resume, and
//! transfer initialization from a source checkpoint.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::features::{
    apply_normalization, fit_normalization, invert_normalization, random_segment,
    DatasetManifest, FeatureMatrix, NormalizationStats, MCEP_DIMS,
};
use crate::losses::{
    adv_loss_gan, adv_loss_wgan, adv_loss_wgan_gp, cycle_loss, generator_objective,
    linguistic_loss, speaker_loss, weight_clip, AblationFlags, AdversarialMode, LossWeights,
};
use crate::networks::{
    bind, build_classifier, build_critic, build_generator, classifier_forward, critic_forward,
    generator_forward, model_from_tensors, model_to_tensors, read_checkpoint, write_checkpoint,
    ClassifierConfig, CriticConfig, GeneratorConfig, ModelParameters, NetworkKind,
};
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub lr_generator: f64,
    pub lr_critic: f64,
    pub lr_classifier: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon_adam: f64,
    pub n_critic: usize,
    pub iterations: u64,
    pub seed: u64,
    pub batch_size: usize,
    pub segment_length: usize,
    pub checkpoint_interval: u64,
    pub weights: LossWeights,
    pub adversarial: AdversarialMode,
    pub ablation: AblationFlags,
    /// Feed each generator its own source domain in the linguistic loss
    /// (the literal printed form) instead of the identity-mapping convention.
    pub li_as_printed: bool,
    pub generator: GeneratorConfig,
    pub critic: CriticConfig,
    pub classifier: ClassifierConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lr_generator: 0.0002,
            lr_critic: 0.0001,
            lr_classifier: 0.0001,
            beta1: 0.5,
            beta2: 0.9,
            epsilon_adam: 1e-8,
            n_critic: 1,
            iterations: 200,
            seed: 0,
            batch_size: 1,
            segment_length: 128,
            checkpoint_interval: 100,
            weights: LossWeights::default(),
            adversarial: AdversarialMode::WganGp,
            ablation: AblationFlags::default(),
            li_as_printed: false,
            generator: GeneratorConfig::default(),
            critic: CriticConfig::default(),
            classifier: ClassifierConfig::default(),
        }
    }
}

impl TrainingConfig {
    /// Small networks and a short segment budget that train on one CPU core.
    /// Single-CPU preset: narrow networks, and learning rates / loss weights
    /// rebalanced for the small-tensor regime. The reconstruction losses are
    /// element means, so their per-element gradient scales as lambda / N,
    /// while the penalty-normalized critic pushes roughly 1 / sqrt(N) per
    /// element; at N ~ 3k the published weights leave the adversarial term
    /// dominating every update, so the identity-shaped losses are scaled up
    /// to converge within minutes instead of days.
    pub fn desk() -> Self {
        TrainingConfig {
            lr_generator: 0.003,
            lr_critic: 0.001,
            lr_classifier: 0.001,
            weights: LossWeights {
                lambda_cyc: 100.0,
                lambda_li: 50.0,
                lambda_sv: 1.0,
                lambda_gradient: 5.0,
            },
            generator: GeneratorConfig::desk(),
            critic: CriticConfig::desk(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr_generator <= 0.0 || self.lr_critic <= 0.0 || self.lr_classifier <= 0.0 {
            return Err(Error::contract("learning rates must be > 0".to_string()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::contract(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if self.batch_size == 0 || self.n_critic == 0 {
            return Err(Error::contract("batch_size and n_critic must be >= 1".to_string()));
        }
        if self.segment_length % 4 != 0 || self.segment_length == 0 {
            return Err(Error::contract(format!(
                "segment_length must be a positive multiple of 4, got {}",
                self.segment_length
            )));
        }
        self.weights.validate()?;
        self.adversarial.validate()?;
        Ok(())
    }
}

/// Bias-corrected Adam moments for one network's parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: IndexMap<String, Vec<f32>>,
    pub v: IndexMap<String, Vec<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(model: &ModelParameters<f32>) -> Self {
        let mut m = IndexMap::new();
        let mut v = IndexMap::new();
        for (name, p) in &model.params {
            m.insert(name.clone(), vec![0.0; p.value.len()]);
            v.insert(name.clone(), vec![0.0; p.value.len()]);
        }
        AdamState { m, v, t: 0 }
    }
}

/// One bias-corrected Adam update over every parameter that has a gradient.
/// Parameters without a gradient entry are left untouched.
pub fn adam_step(
    model: &mut ModelParameters<f32>,
    grads: &IndexMap<String, Vec<f32>>,
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    iteration: u64,
) -> Result<()> {
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - beta1.powf(t);
    let bc2 = 1.0 - beta2.powf(t);
    for (name, grad) in grads {
        if let Some(bad) = grad.iter().find(|g| !g.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite gradient {bad} for `{name}` at iteration {iteration}"
            )));
        }
        let param = model
            .params
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("gradient for unknown parameter `{name}`")))?;
        let m = state.m.get_mut(name).expect("state matches model");
        let v = state.v.get_mut(name).expect("state matches model");
        for i in 0..param.value.len() {
            let g = grad[i] as f64;
            let mi = beta1 * m[i] as f64 + (1.0 - beta1) * g;
            let vi = beta2 * v[i] as f64 + (1.0 - beta2) * g * g;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            param.value[i] =
                (param.value[i] as f64 - lr * m_hat / (v_hat.sqrt() + epsilon)) as f32;
        }
    }
    Ok(())
}

/// The five networks of one run.
#[derive(Debug, Clone)]
pub struct Models {
    pub gen_xy: ModelParameters<f32>,
    pub gen_yx: ModelParameters<f32>,
    pub critic_x: ModelParameters<f32>,
    pub critic_y: ModelParameters<f32>,
    pub classifier: ModelParameters<f32>,
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub gen_xy: AdamState,
    pub gen_yx: AdamState,
    pub critic_x: AdamState,
    pub critic_y: AdamState,
    pub classifier: AdamState,
}

impl OptimizerState {
    pub fn new(models: &Models) -> Self {
        OptimizerState {
            gen_xy: AdamState::new(&models.gen_xy),
            gen_yx: AdamState::new(&models.gen_yx),
            critic_x: AdamState::new(&models.critic_x),
            critic_y: AdamState::new(&models.critic_y),
            classifier: AdamState::new(&models.classifier),
        }
    }
}

/// Seeded construction of all five networks.
pub fn build_models(config: &TrainingConfig, seed: u64) -> Result<Models> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, u64::MAX));
    Ok(Models {
        gen_xy: build_generator(&config.generator, NetworkKind::GeneratorXy, &mut rng)?,
        gen_yx: build_generator(&config.generator, NetworkKind::GeneratorYx, &mut rng)?,
        critic_x: build_critic(&config.critic, NetworkKind::CriticX, &mut rng)?,
        critic_y: build_critic(&config.critic, NetworkKind::CriticY, &mut rng)?,
        classifier: build_classifier(&config.classifier, &mut rng)?,
    })
}

/// One normalized channels-major segment with its speaker label.
#[derive(Debug, Clone)]
pub struct Segment {
    /// `[24, frames]` row-major.
    pub data: Vec<f32>,
    pub frames: usize,
    pub speaker: usize,
}

impl Segment {
    pub fn from_features(fm: &FeatureMatrix) -> Segment {
        Segment { data: fm.to_channels_major(), frames: fm.frames, speaker: fm.speaker_id }
    }
}

/// Loss values of one iteration, in metrics-log field order.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LossReport {
    pub iter: u64,
    pub loss_adv_g: f64,
    pub loss_adv_dx: f64,
    pub loss_adv_dy: f64,
    pub loss_cyc: f64,
    pub loss_li: f64,
    pub loss_sv: f64,
    pub gp: f64,
    pub secs: f64,
}

impl LossReport {
    /// Everything except wall time, for determinism comparisons.
    pub fn loss_fields(&self) -> [f64; 7] {
        [
            self.loss_adv_g,
            self.loss_adv_dx,
            self.loss_adv_dy,
            self.loss_cyc,
            self.loss_li,
            self.loss_sv,
            self.gp,
        ]
    }
}

fn finite(tape: &Tape<f32>, v: Var, component: &str, iteration: u64) -> Result<f64> {
    let x = tape.scalar_value(v) as f64;
    if !x.is_finite() {
        return Err(Error::numeric(format!(
            "{component} is non-finite ({x}) at iteration {iteration}"
        )));
    }
    Ok(x)
}

fn leaf_segment(tape: &mut Tape<f32>, seg: &Segment) -> Result<Var> {
    tape.leaf(seg.data.clone(), vec![MCEP_DIMS, seg.frames], false)
}

pub fn extract_grads(
    tape: &Tape<f32>,
    grads: &crate::autodiff::Gradients,
    bound: &crate::networks::BoundParams,
) -> IndexMap<String, Vec<f32>> {
    let mut out = IndexMap::new();
    for (name, var) in bound.iter() {
        if let Some(g) = grads.get(var) {
            out.insert(name.clone(), tape.value(g).to_vec());
        }
    }
    out
}

/// One critic update for a single direction: real samples from the critic's
/// own domain against frozen-generator fakes. Returns (loss_d, gp).
#[allow(clippy::too_many_arguments)]
fn critic_phase(
    critic_model: &mut ModelParameters<f32>,
    critic_opt: &mut AdamState,
    gen_model: &ModelParameters<f32>,
    real: &[Segment],
    source: &[Segment],
    config: &TrainingConfig,
    rng: &mut impl Rng,
    iteration: u64,
    which: &str,
) -> Result<(f64, f64)> {
    let mut tape: Tape<f32> = Tape::new();
    let gen_b = bind(&mut tape, gen_model, false)?;
    let critic_b = bind(&mut tape, critic_model, true)?;
    let mut real_vars = Vec::with_capacity(real.len());
    let mut fake_vars = Vec::with_capacity(source.len());
    for seg in real {
        let v = leaf_segment(&mut tape, seg)?;
        real_vars.push(tape.reshape(v, &[1, MCEP_DIMS, seg.frames])?);
    }
    for seg in source {
        let v = leaf_segment(&mut tape, seg)?;
        let fake = generator_forward(&mut tape, &gen_b, &config.generator, v)?;
        fake_vars.push(tape.reshape(fake, &[1, MCEP_DIMS, seg.frames])?);
    }
    let (loss_d, gp_value) = match config.adversarial {
        AdversarialMode::Gan => {
            // pull saturated float32 sigmoid outputs back into (0, 1)
            let score = |t: &mut Tape<f32>, vars: &[Var]| -> Result<Vec<Var>> {
                vars.iter()
                    .map(|&v| {
                        let d = critic_forward(t, &critic_b, &config.critic, v, true)?;
                        let lo = t.clamp_min(d, 1e-7);
                        let neg = t.neg(lo);
                        let om = t.add_scalar(neg, 1.0);
                        let om_lo = t.clamp_min(om, 1e-7);
                        let neg2 = t.neg(om_lo);
                        Ok(t.add_scalar(neg2, 1.0))
                    })
                    .collect()
            };
            let d_real = score(&mut tape, &real_vars)?;
            let d_fake = score(&mut tape, &fake_vars)?;
            let (loss_d, _) = adv_loss_gan(&mut tape, &d_real, &d_fake)?;
            (loss_d, 0.0)
        }
        AdversarialMode::WganGp => {
            let out = adv_loss_wgan_gp(
                &mut tape,
                |t, v| critic_forward(t, &critic_b, &config.critic, v, false),
                &real_vars,
                &fake_vars,
                config.weights.lambda_gradient,
                rng,
            )?;
            let gp = finite(&tape, out.penalty, &format!("gp ({which})"), iteration)?;
            (out.loss_d, gp)
        }
        AdversarialMode::WganClip { .. } => {
            let score = |t: &mut Tape<f32>, vars: &[Var]| -> Result<Vec<Var>> {
                vars.iter()
                    .map(|&v| critic_forward(t, &critic_b, &config.critic, v, false))
                    .collect()
            };
            let d_real = score(&mut tape, &real_vars)?;
            let d_fake = score(&mut tape, &fake_vars)?;
            let (loss_d, _) = adv_loss_wgan(&mut tape, &d_real, &d_fake)?;
            (loss_d, 0.0)
        }
    };
    let loss_value = finite(&tape, loss_d, &format!("loss_adv_{which}"), iteration)?;
    let grads = tape.backward(loss_d, false)?;
    let grad_map = extract_grads(&tape, &grads, &critic_b);
    adam_step(
        critic_model,
        &grad_map,
        critic_opt,
        config.lr_critic,
        config.beta1,
        config.beta2,
        config.epsilon_adam,
        iteration,
    )?;
    if let AdversarialMode::WganClip { clip } = config.adversarial {
        weight_clip(critic_model, clip as f32)?;
    }
    Ok((loss_value, gp_value))
}

/// One full three-phase iteration: critic updates, a classifier update on
/// real samples, then a joint generator update. Returns the component losses.
pub fn train_step(
    models: &mut Models,
    opt: &mut OptimizerState,
    batch_x: &[Segment],
    batch_y: &[Segment],
    config: &TrainingConfig,
    rng: &mut impl Rng,
    iteration: u64,
) -> Result<LossReport> {
    let start = Instant::now();
    if batch_x.is_empty() || batch_y.is_empty() {
        return Err(Error::contract("train_step: empty batch".to_string()));
    }

    // phase 1: critics, generators frozen
    let mut loss_adv_dx = 0.0;
    let mut loss_adv_dy = 0.0;
    let mut gp = 0.0;
    for _ in 0..config.n_critic {
        let (dx, gx) = critic_phase(
            &mut models.critic_x,
            &mut opt.critic_x,
            &models.gen_yx,
            batch_x,
            batch_y,
            config,
            rng,
            iteration,
            "dx",
        )?;
        let (dy, gy) = critic_phase(
            &mut models.critic_y,
            &mut opt.critic_y,
            &models.gen_xy,
            batch_y,
            batch_x,
            config,
            rng,
            iteration,
            "dy",
        )?;
        loss_adv_dx = dx;
        loss_adv_dy = dy;
        gp = (gx + gy) / 2.0;
    }

    // phase 2: classifier on real samples with true labels
    {
        let mut tape: Tape<f32> = Tape::new();
        let cls_b = bind(&mut tape, &models.classifier, true)?;
        let mut probs = Vec::new();
        let mut labels = Vec::new();
        for seg in batch_x.iter().chain(batch_y) {
            let v = leaf_segment(&mut tape, seg)?;
            let v3 = tape.reshape(v, &[1, MCEP_DIMS, seg.frames])?;
            let (p, _) = classifier_forward(&mut tape, &cls_b, &config.classifier, v3)?;
            probs.push(p);
            labels.push(seg.speaker);
        }
        let (loss, _) = speaker_loss(&mut tape, &probs, &labels)?;
        finite(&tape, loss, "classifier loss", iteration)?;
        let grads = tape.backward(loss, false)?;
        let grad_map = extract_grads(&tape, &grads, &cls_b);
        adam_step(
            &mut models.classifier,
            &grad_map,
            &mut opt.classifier,
            config.lr_classifier,
            config.beta1,
            config.beta2,
            config.epsilon_adam,
            iteration,
        )?;
    }

    // phase 3: generators, critics and classifier frozen
    let mut tape: Tape<f32> = Tape::new();
    let gxy_b = bind(&mut tape, &models.gen_xy, true)?;
    let gyx_b = bind(&mut tape, &models.gen_yx, true)?;
    let cx_b = bind(&mut tape, &models.critic_x, false)?;
    let cy_b = bind(&mut tape, &models.critic_y, false)?;
    let cls_b = bind(&mut tape, &models.classifier, false)?;
    let sigmoid = matches!(config.adversarial, AdversarialMode::Gan);

    let x_vars: Vec<Var> =
        batch_x.iter().map(|s| leaf_segment(&mut tape, s)).collect::<Result<_>>()?;
    let y_vars: Vec<Var> =
        batch_y.iter().map(|s| leaf_segment(&mut tape, s)).collect::<Result<_>>()?;
    let fake_y: Vec<Var> = x_vars
        .iter()
        .map(|&v| generator_forward(&mut tape, &gxy_b, &config.generator, v))
        .collect::<Result<_>>()?;
    let fake_x: Vec<Var> = y_vars
        .iter()
        .map(|&v| generator_forward(&mut tape, &gyx_b, &config.generator, v))
        .collect::<Result<_>>()?;

    // adversarial term per direction: -mean log D(fake) in gan mode,
    // -mean D(fake) in wasserstein modes; the two directions are summed
    let mut direction_means = Vec::with_capacity(2);
    for (fakes, critic_b) in [(&fake_y, &cy_b), (&fake_x, &cx_b)] {
        let mut acc: Option<Var> = None;
        for &f in fakes.iter() {
            let frames = tape.shape(f)[1];
            let v3 = tape.reshape(f, &[1, MCEP_DIMS, frames])?;
            let d = critic_forward(&mut tape, critic_b, &config.critic, v3, sigmoid)?;
            let term = if sigmoid {
                let floored = tape.clamp_min(d, 1e-12);
                let l = tape.log(floored);
                tape.neg(l)
            } else {
                tape.neg(d)
            };
            acc = Some(match acc {
                Some(a) => tape.add(a, term)?,
                None => term,
            });
        }
        let total = acc.expect("non-empty batch");
        direction_means.push(tape.scale(total, 1.0 / fakes.len() as f32));
    }
    let adv_g = tape.add(direction_means[0], direction_means[1])?;

    // cycle term
    let zero = tape.leaf(vec![0.0], vec![1], false)?;
    let cyc = if config.ablation.use_cycle {
        let x_cycled: Vec<Var> = fake_y
            .iter()
            .map(|&v| generator_forward(&mut tape, &gyx_b, &config.generator, v))
            .collect::<Result<_>>()?;
        let y_cycled: Vec<Var> = fake_x
            .iter()
            .map(|&v| generator_forward(&mut tape, &gxy_b, &config.generator, v))
            .collect::<Result<_>>()?;
        cycle_loss(&mut tape, &x_vars, &x_cycled, &y_vars, &y_cycled)?
    } else {
        zero
    };

    // linguistic term
    let li = if config.ablation.use_li {
        if config.li_as_printed {
            linguistic_loss(&mut tape, &x_vars, &fake_y, &y_vars, &fake_x)?
        } else {
            let gxy_of_y: Vec<Var> = y_vars
                .iter()
                .map(|&v| generator_forward(&mut tape, &gxy_b, &config.generator, v))
                .collect::<Result<_>>()?;
            let gyx_of_x: Vec<Var> = x_vars
                .iter()
                .map(|&v| generator_forward(&mut tape, &gyx_b, &config.generator, v))
                .collect::<Result<_>>()?;
            linguistic_loss(&mut tape, &y_vars, &gxy_of_y, &x_vars, &gyx_of_x)?
        }
    } else {
        zero
    };

    // speaker term: frozen classifier on generated samples, source labels
    let sv = if config.ablation.use_sv {
        let mut probs = Vec::new();
        let mut labels = Vec::new();
        for (&f, seg) in fake_y.iter().zip(batch_x).chain(fake_x.iter().zip(batch_y)) {
            let v3 = tape.reshape(f, &[1, MCEP_DIMS, seg.frames])?;
            let (p, _) = classifier_forward(&mut tape, &cls_b, &config.classifier, v3)?;
            probs.push(p);
            labels.push(seg.speaker);
        }
        let (loss, _) = speaker_loss(&mut tape, &probs, &labels)?;
        loss
    } else {
        zero
    };

    let total =
        generator_objective(&mut tape, adv_g, cyc, li, sv, &config.weights, &config.ablation)?;
    let loss_adv_g = finite(&tape, adv_g, "loss_adv_g", iteration)?;
    let loss_cyc = finite(&tape, cyc, "loss_cyc", iteration)?;
    let loss_li = finite(&tape, li, "loss_li", iteration)?;
    let loss_sv = finite(&tape, sv, "loss_sv", iteration)?;
    finite(&tape, total, "generator objective", iteration)?;
    let grads = tape.backward(total, false)?;
    let gxy_grads = extract_grads(&tape, &grads, &gxy_b);
    let gyx_grads = extract_grads(&tape, &grads, &gyx_b);
    adam_step(
        &mut models.gen_xy,
        &gxy_grads,
        &mut opt.gen_xy,
        config.lr_generator,
        config.beta1,
        config.beta2,
        config.epsilon_adam,
        iteration,
    )?;
    adam_step(
        &mut models.gen_yx,
        &gyx_grads,
        &mut opt.gen_yx,
        config.lr_generator,
        config.beta1,
        config.beta2,
        config.epsilon_adam,
        iteration,
    )?;

    Ok(LossReport {
        iter: iteration,
        loss_adv_g,
        loss_adv_dx,
        loss_adv_dy,
        loss_cyc,
        loss_li,
        loss_sv,
        gp,
        secs: start.elapsed().as_secs_f64(),
    })
}

// ---- deterministic loop ----

/// SplitMix64-style mix so per-iteration streams are independent of each
/// other and of the model-init stream.
fn mix_seed(seed: u64, iteration: u64) -> u64 {
    let mut z = seed ^ iteration.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn iteration_rng(seed: u64, iteration: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, iteration))
}

/// Full mutable state of a run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub models: Models,
    pub opt: OptimizerState,
    pub norm_x: NormalizationStats,
    pub norm_y: NormalizationStats,
    pub iteration: u64,
}

const NORM_TAGS: [(&str, bool); 2] = [("x", true), ("y", false)];

/// Persist models, optimizer moments and normalization stats to one ETGC
/// file. Everything round-trips bit-exactly.
pub fn save_state(path: &Path, config: &TrainingConfig, state: &TrainState) -> Result<()> {
    let mut tensors: IndexMap<String, (Vec<usize>, Vec<f32>)> = IndexMap::new();
    for model in [
        &state.models.gen_xy,
        &state.models.gen_yx,
        &state.models.critic_x,
        &state.models.critic_y,
        &state.models.classifier,
    ] {
        model_to_tensors(model, &mut tensors);
    }
    for (model, adam) in [
        (&state.models.gen_xy, &state.opt.gen_xy),
        (&state.models.gen_yx, &state.opt.gen_yx),
        (&state.models.critic_x, &state.opt.critic_x),
        (&state.models.critic_y, &state.opt.critic_y),
        (&state.models.classifier, &state.opt.classifier),
    ] {
        let tag = model.kind.tag();
        for (name, p) in &model.params {
            tensors.insert(
                format!("adam.{tag}.{name}.m"),
                (p.shape.clone(), adam.m[name].clone()),
            );
            tensors.insert(
                format!("adam.{tag}.{name}.v"),
                (p.shape.clone(), adam.v[name].clone()),
            );
        }
        tensors.insert(format!("adam.{tag}.t"), (vec![1], vec![adam.t as f32]));
    }
    for (tag, is_x) in NORM_TAGS {
        let stats = if is_x { &state.norm_x } else { &state.norm_y };
        tensors.insert(format!("norm.{tag}.mean"), (vec![MCEP_DIMS], stats.mean.clone()));
        tensors.insert(format!("norm.{tag}.std"), (vec![MCEP_DIMS], stats.std.clone()));
        tensors.insert(
            format!("norm.{tag}.count"),
            (vec![1], vec![stats.sample_count as f32]),
        );
    }
    write_checkpoint(path, &serde_json::to_value(config)?, state.iteration, &tensors)
}

fn adam_from_tensors(
    model: &ModelParameters<f32>,
    tensors: &IndexMap<String, (Vec<usize>, Vec<f32>)>,
) -> Result<AdamState> {
    let tag = model.kind.tag();
    let mut adam = AdamState::new(model);
    for (name, p) in &model.params {
        for (suffix, store) in [("m", &mut adam.m), ("v", &mut adam.v)] {
            let key = format!("adam.{tag}.{name}.{suffix}");
            let (shape, data) = tensors
                .get(&key)
                .ok_or_else(|| Error::validation(format!("checkpoint missing `{key}`")))?;
            if *shape != p.shape {
                return Err(Error::validation(format!(
                    "checkpoint `{key}` shape {shape:?} mismatches parameter {:?}",
                    p.shape
                )));
            }
            store.insert(name.clone(), data.clone());
        }
    }
    let key = format!("adam.{tag}.t");
    let (_, t) = tensors
        .get(&key)
        .ok_or_else(|| Error::validation(format!("checkpoint missing `{key}`")))?;
    adam.t = t[0] as u64;
    Ok(adam)
}

fn norm_from_tensors(
    tag: &str,
    tensors: &IndexMap<String, (Vec<usize>, Vec<f32>)>,
) -> Result<NormalizationStats> {
    let get = |suffix: &str| -> Result<Vec<f32>> {
        let key = format!("norm.{tag}.{suffix}");
        tensors
            .get(&key)
            .map(|(_, d)| d.clone())
            .ok_or_else(|| Error::validation(format!("checkpoint missing `{key}`")))
    };
    Ok(NormalizationStats {
        mean: get("mean")?,
        std: get("std")?,
        sample_count: get("count")?[0] as u64,
    })
}

/// Inverse of [`save_state`]. The stored config is returned alongside.
pub fn load_state(path: &Path) -> Result<(TrainingConfig, TrainState)> {
    let (config_json, iteration, tensors) = read_checkpoint(path)?;
    let config: TrainingConfig = serde_json::from_value(config_json)
        .map_err(|e| Error::format(format!("{}: bad config in checkpoint: {e}", path.display())))?;
    config.validate()?;
    let template = build_models(&config, config.seed)?;
    let models = Models {
        gen_xy: model_from_tensors(&template.gen_xy, &tensors)?,
        gen_yx: model_from_tensors(&template.gen_yx, &tensors)?,
        critic_x: model_from_tensors(&template.critic_x, &tensors)?,
        critic_y: model_from_tensors(&template.critic_y, &tensors)?,
        classifier: model_from_tensors(&template.classifier, &tensors)?,
    };
    let opt = OptimizerState {
        gen_xy: adam_from_tensors(&models.gen_xy, &tensors)?,
        gen_yx: adam_from_tensors(&models.gen_yx, &tensors)?,
        critic_x: adam_from_tensors(&models.critic_x, &tensors)?,
        critic_y: adam_from_tensors(&models.critic_y, &tensors)?,
        classifier: adam_from_tensors(&models.classifier, &tensors)?,
    };
    let norm_x = norm_from_tensors("x", &tensors)?;
    let norm_y = norm_from_tensors("y", &tensors)?;
    Ok((config, TrainState { models, opt, norm_x, norm_y, iteration }))
}

/// In-memory domain: all recordings loaded and normalized once.
pub struct Domain {
    pub recordings: Vec<FeatureMatrix>,
}

impl Domain {
    pub fn load(manifest: &DatasetManifest, stats: &NormalizationStats) -> Result<Domain> {
        let recordings = (0..manifest.entries.len())
            .map(|i| Ok(apply_normalization(&manifest.load_entry(i)?, stats)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Domain { recordings })
    }

    fn sample(&self, length: usize, rng: &mut impl Rng) -> Result<Segment> {
        let idx = rng.gen_range(0..self.recordings.len());
        let seg = random_segment(&self.recordings[idx], length, rng)?;
        Ok(Segment::from_features(&seg))
    }
}

/// Run (or continue) training. Metrics append to `out_dir/metrics.jsonl`;
/// checkpoints land in `out_dir` every `checkpoint_interval` iterations and
/// at the end.
pub fn train_loop(
    manifest_x: &DatasetManifest,
    manifest_y: &DatasetManifest,
    config: &TrainingConfig,
    out_dir: &Path,
    resume: Option<TrainState>,
) -> Result<(TrainState, Vec<LossReport>)> {
    config.validate()?;
    manifest_x.validate(config.segment_length)?;
    manifest_y.validate(config.segment_length)?;
    std::fs::create_dir_all(out_dir)?;

    let mut state = match resume {
        Some(s) => s,
        None => {
            let norm_x = fit_normalization(manifest_x, |_| true)?;
            let norm_y = fit_normalization(manifest_y, |_| true)?;
            let models = build_models(config, config.seed)?;
            let opt = OptimizerState::new(&models);
            TrainState { models, opt, norm_x, norm_y, iteration: 0 }
        }
    };
    let domain_x = Domain::load(manifest_x, &state.norm_x)?;
    let domain_y = Domain::load(manifest_y, &state.norm_y)?;

    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)?;
    let mut reports = Vec::new();
    while state.iteration < config.iterations {
        let iter = state.iteration + 1;
        let mut rng = iteration_rng(config.seed, iter);
        let batch_x: Vec<Segment> = (0..config.batch_size)
            .map(|_| domain_x.sample(config.segment_length, &mut rng))
            .collect::<Result<_>>()?;
        let batch_y: Vec<Segment> = (0..config.batch_size)
            .map(|_| domain_y.sample(config.segment_length, &mut rng))
            .collect::<Result<_>>()?;
        let report = train_step(
            &mut state.models,
            &mut state.opt,
            &batch_x,
            &batch_y,
            config,
            &mut rng,
            iter,
        )?;
        writeln!(metrics, "{}", serde_json::to_string(&report)?)?;
        reports.push(report);
        state.iteration = iter;
        if config.checkpoint_interval > 0 && iter % config.checkpoint_interval == 0 {
            save_state(&out_dir.join(format!("checkpoint_{iter:06}.etgc")), config, &state)?;
        }
    }
    metrics.flush()?;
    save_state(&out_dir.join("checkpoint_final.etgc"), config, &state)?;
    Ok((state, reports))
}

// ---- transfer learning ----

/// Source checkpoint plus target-run description: everything except the
/// classifier head migrates.
#[derive(Debug, Clone)]
pub struct TransferPlan {
    pub source_checkpoint: std::path::PathBuf,
    pub target_speakers: usize,
    pub fine_tune_iterations: u64,
    pub seed: u64,
}

/// Name predicate for the migrated set: every parameter except the
/// classifier's final linear layer.
pub fn is_migrated(kind: NetworkKind, param_name: &str) -> bool {
    !(kind == NetworkKind::Classifier && param_name.starts_with("head."))
}

/// Build target models from a source checkpoint: generators, critics and the
/// classifier trunk copied bit-exactly; a fresh classifier head sized for
/// the target speaker count; optimizer state reset. Returns the adapted
/// config (speaker count, seed, iteration budget updated) and fresh state.
pub fn transfer_init(plan: &TransferPlan) -> Result<(TrainingConfig, TrainState)> {
    let (source_config, source) = load_state(&plan.source_checkpoint)?;
    let mut config = source_config;
    config.classifier.n_speakers = plan.target_speakers;
    config.seed = plan.seed;
    config.iterations = plan.fine_tune_iterations;

    let mut classifier = build_classifier::<f32>(
        &config.classifier,
        &mut ChaCha8Rng::seed_from_u64(mix_seed(plan.seed, u64::MAX - 1)),
    )?;
    for (name, param) in classifier.params.iter_mut() {
        if !is_migrated(NetworkKind::Classifier, name) {
            continue;
        }
        let src = source.models.classifier.get(name)?;
        if src.shape != param.shape {
            return Err(Error::validation(format!(
                "classifier trunk parameter `{name}` has shape {:?} in the source \
                 checkpoint but {:?} in the target topology",
                src.shape, param.shape
            )));
        }
        param.value = src.value.clone();
    }
    let models = Models {
        gen_xy: source.models.gen_xy,
        gen_yx: source.models.gen_yx,
        critic_x: source.models.critic_x,
        critic_y: source.models.critic_y,
        classifier,
    };
    let opt = OptimizerState::new(&models);
    let state = TrainState {
        models,
        opt,
        norm_x: source.norm_x,
        norm_y: source.norm_y,
        iteration: 0,
    };
    Ok((config, state))
}

// ---- inference ----

/// Which generator to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    X2y,
    Y2x,
}

impl std::str::FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x2y" => Ok(Direction::X2y),
            "y2x" => Ok(Direction::Y2x),
            other => Err(Error::contract(format!(
                "direction must be x2y or y2x, got `{other}`"
            ))),
        }
    }
}

/// Convert a whole recording: normalize with the source-domain stats, pad
/// time with zeros to a multiple of 4, run the generator, crop back to the
/// input frame count and denormalize with the target-domain stats. Output
/// frame count always equals input frame count.
pub fn convert_features(
    state: &TrainState,
    config: &TrainingConfig,
    direction: Direction,
    input: &FeatureMatrix,
) -> Result<FeatureMatrix> {
    if input.frames == 0 {
        return Err(Error::contract("cannot convert an empty recording".to_string()));
    }
    let (gen_model, norm_in, norm_out) = match direction {
        Direction::X2y => (&state.models.gen_xy, &state.norm_x, &state.norm_y),
        Direction::Y2x => (&state.models.gen_yx, &state.norm_y, &state.norm_x),
    };
    let normalized = apply_normalization(input, norm_in);
    let padded_frames = input.frames.div_ceil(4) * 4;
    // channels-major with zero padding on the right of the time axis
    let mut data = vec![0.0f32; MCEP_DIMS * padded_frames];
    for t in 0..normalized.frames {
        for (d, &v) in normalized.frame(t).iter().enumerate() {
            data[d * padded_frames + t] = v;
        }
    }
    let mut tape: Tape<f32> = Tape::new();
    let bound = bind(&mut tape, gen_model, false)?;
    let x = tape.leaf(data, vec![MCEP_DIMS, padded_frames], false)?;
    let y = generator_forward(&mut tape, &bound, &config.generator, x)?;
    tape.check_finite()?;
    let out = tape.value(y);
    let mut frames_major = vec![0.0f32; input.frames * MCEP_DIMS];
    for d in 0..MCEP_DIMS {
        for t in 0..input.frames {
            frames_major[t * MCEP_DIMS + d] = out[d * padded_frames + t];
        }
    }
    let converted = FeatureMatrix::new(frames_major, input.frames)?.with_tags(
        input.speaker_id,
        input.emotion,
        &input.language,
    );
    Ok(invert_normalization(&converted, norm_out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{synth_dataset, SynthConfig};
    use approx::assert_abs_diff_eq;
    use std::path::PathBuf;

    fn one_param_model(value: Vec<f32>) -> ModelParameters<f32> {
        let mut m = ModelParameters::new(NetworkKind::CriticX);
        let n = value.len();
        m.insert("w", vec![n], value);
        m
    }

    fn grads_of(value: Vec<f32>) -> IndexMap<String, Vec<f32>> {
        let mut g = IndexMap::new();
        g.insert("w".to_string(), value);
        g
    }

    #[test]
    fn adam_first_step_fixture() {
        let mut model = one_param_model(vec![0.0]);
        let mut state = AdamState::new(&model);
        adam_step(&mut model, &grads_of(vec![1.0]), &mut state, 0.0002, 0.5, 0.9, 1e-8, 1)
            .unwrap();
        // m_hat = v_hat = 1, so the update is -lr / (1 + eps)
        assert_abs_diff_eq!(model.params["w"].value[0], -0.0002, epsilon = 1e-8);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn adam_zero_gradient_is_noop_on_parameters() {
        let mut model = one_param_model(vec![0.75, -0.5]);
        let mut state = AdamState::new(&model);
        adam_step(
            &mut model,
            &grads_of(vec![0.0, 0.0]),
            &mut state,
            0.01,
            0.5,
            0.9,
            1e-8,
            1,
        )
        .unwrap();
        assert_eq!(model.params["w"].value, vec![0.75, -0.5]);
    }

    #[test]
    fn adam_is_deterministic_over_100_steps() {
        let run = || {
            let mut model = one_param_model(vec![1.0, -2.0, 0.5]);
            let mut state = AdamState::new(&model);
            for t in 1..=100u64 {
                let g: Vec<f32> =
                    model.params["w"].value.iter().map(|&w| 2.0 * w + (t as f32).sin()).collect();
                adam_step(&mut model, &grads_of(g), &mut state, 0.01, 0.5, 0.9, 1e-8, t).unwrap();
            }
            (model.params["w"].value.clone(), state.m["w"].clone(), state.v["w"].clone())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adam_rejects_non_finite_gradient_with_context() {
        let mut model = one_param_model(vec![0.0]);
        let mut state = AdamState::new(&model);
        let err = adam_step(
            &mut model,
            &grads_of(vec![f32::NAN]),
            &mut state,
            0.01,
            0.5,
            0.9,
            1e-8,
            7,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        let msg = err.to_string();
        assert!(msg.contains("`w`") && msg.contains("iteration 7"), "{msg}");
    }

    fn tiny_config() -> TrainingConfig {
        TrainingConfig {
            generator: GeneratorConfig { base_channels: 4, n_residual: 1, ..Default::default() },
            critic: CriticConfig { base_channels: 4, n_layers: 2 },
            classifier: ClassifierConfig {
                n_speakers: 4,
                embedding_dim: 8,
                conv_depth: 2,
                base_channels: 4,
            },
            segment_length: 32,
            iterations: 3,
            checkpoint_interval: 0,
            ..TrainingConfig::default()
        }
    }

    fn random_batch(config: &TrainingConfig, seed: u64, speakers: usize) -> Vec<Segment> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..config.batch_size)
            .map(|i| Segment {
                data: (0..MCEP_DIMS * config.segment_length)
                    .map(|_| rng.gen_range(-1.0..1.0))
                    .collect(),
                frames: config.segment_length,
                speaker: i % speakers,
            })
            .collect()
    }

    fn hash_params(model: &ModelParameters<f32>) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (name, p) in &model.params {
            name.hash(&mut h);
            for v in &p.value {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    #[test]
    fn train_step_reports_finite_losses_and_isolates_parameters() {
        let config = tiny_config();
        let mut models = build_models(&config, 1).unwrap();
        let mut opt = OptimizerState::new(&models);
        let batch_x = random_batch(&config, 2, 4);
        let batch_y = random_batch(&config, 3, 4);

        // snapshot everything, then verify each phase only moved its own set
        let before_gxy = hash_params(&models.gen_xy);
        let before_cx = hash_params(&models.critic_x);
        let before_cls = hash_params(&models.classifier);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let report =
            train_step(&mut models, &mut opt, &batch_x, &batch_y, &config, &mut rng, 1).unwrap();
        for v in report.loss_fields() {
            assert!(v.is_finite());
        }
        assert!(report.loss_cyc > 0.0 && report.loss_li > 0.0 && report.loss_sv > 0.0);
        // every network moved (no accidental freezing)
        assert_ne!(hash_params(&models.gen_xy), before_gxy);
        assert_ne!(hash_params(&models.critic_x), before_cx);
        assert_ne!(hash_params(&models.classifier), before_cls);
    }

    #[test]
    fn critic_phase_leaves_generators_and_classifier_untouched() {
        let config = tiny_config();
        let mut models = build_models(&config, 5).unwrap();
        let mut opt = OptimizerState::new(&models);
        let batch_x = random_batch(&config, 6, 4);
        let batch_y = random_batch(&config, 7, 4);
        let gxy = hash_params(&models.gen_xy);
        let gyx = hash_params(&models.gen_yx);
        let cls = hash_params(&models.classifier);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        critic_phase(
            &mut models.critic_x,
            &mut opt.critic_x,
            &models.gen_yx,
            &batch_x,
            &batch_y,
            &config,
            &mut rng,
            1,
            "dx",
        )
        .unwrap();
        assert_eq!(hash_params(&models.gen_xy), gxy);
        assert_eq!(hash_params(&models.gen_yx), gyx);
        assert_eq!(hash_params(&models.classifier), cls);
    }

    #[test]
    fn ablation_flags_zero_the_disabled_terms() {
        let mut config = tiny_config();
        config.ablation = AblationFlags { use_cycle: false, use_li: false, use_sv: false };
        let mut models = build_models(&config, 9).unwrap();
        let mut opt = OptimizerState::new(&models);
        let batch_x = random_batch(&config, 10, 4);
        let batch_y = random_batch(&config, 11, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let report =
            train_step(&mut models, &mut opt, &batch_x, &batch_y, &config, &mut rng, 1).unwrap();
        assert_eq!(report.loss_cyc, 0.0);
        assert_eq!(report.loss_li, 0.0);
        assert_eq!(report.loss_sv, 0.0);
        assert!(report.loss_adv_g.is_finite());
    }

    fn synth_pair(dir: &Path, seed: u64) -> (DatasetManifest, DatasetManifest) {
        let synth = SynthConfig {
            samples_per_domain: 6,
            speakers: 4,
            min_frames: 128,
            max_frames: 160,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        synth_dataset(&synth, &mut rng, dir).unwrap();
        let mx = DatasetManifest::load(&dir.join("manifest_a.json")).unwrap();
        let my = DatasetManifest::load(&dir.join("manifest_b.json")).unwrap();
        (mx, my)
    }

    #[test]
    fn train_loop_is_deterministic_in_its_loss_trajectory() {
        let dir = tempfile::tempdir().unwrap();
        let (mx, my) = synth_pair(dir.path(), 13);
        let config = tiny_config();
        let (_, reports_a) =
            train_loop(&mx, &my, &config, &dir.path().join("run_a"), None).unwrap();
        let (_, reports_b) =
            train_loop(&mx, &my, &config, &dir.path().join("run_b"), None).unwrap();
        assert_eq!(reports_a.len(), 3);
        for (a, b) in reports_a.iter().zip(&reports_b) {
            assert_eq!(a.loss_fields(), b.loss_fields(), "iteration {}", a.iter);
        }
        // metrics log exists, one JSON object per line with the agreed keys
        let log = std::fs::read_to_string(dir.path().join("run_a/metrics.jsonl")).unwrap();
        let lines: Vec<&str> = log.lines().collect();
        assert_eq!(lines.len(), 3);
        let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        for key in ["iter", "loss_adv_g", "loss_adv_dx", "loss_adv_dy", "loss_cyc", "loss_li", "loss_sv", "gp", "secs"]
        {
            assert!(first.get(key).is_some(), "missing key {key}");
        }
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_trajectory() {
        let dir = tempfile::tempdir().unwrap();
        let (mx, my) = synth_pair(dir.path(), 14);
        let mut config = tiny_config();
        config.iterations = 6;
        let (_, full) = train_loop(&mx, &my, &config, &dir.path().join("full"), None).unwrap();

        let mut half_config = config.clone();
        half_config.iterations = 3;
        train_loop(&mx, &my, &half_config, &dir.path().join("half"), None).unwrap();
        let ckpt: PathBuf = dir.path().join("half/checkpoint_final.etgc");
        let (stored_config, state) = load_state(&ckpt).unwrap();
        assert_eq!(state.iteration, 3);
        let mut resumed_config = stored_config;
        resumed_config.iterations = 6;
        let (_, tail) =
            train_loop(&mx, &my, &resumed_config, &dir.path().join("resumed"), Some(state))
                .unwrap();
        assert_eq!(tail.len(), 3);
        for (a, b) in full[3..].iter().zip(&tail) {
            assert_eq!(a.iter, b.iter);
            assert_eq!(a.loss_fields(), b.loss_fields(), "iteration {}", a.iter);
        }
    }

    #[test]
    fn empty_domain_manifest_fails_before_any_step() {
        let dir = tempfile::tempdir().unwrap();
        let (mx, _) = synth_pair(dir.path(), 15);
        let empty = DatasetManifest {
            speakers: vec!["a".to_string()],
            entries: vec![],
            root: dir.path().to_path_buf(),
        };
        let err = train_loop(&mx, &empty, &tiny_config(), &dir.path().join("out"), None)
            .unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn state_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config();
        let models = build_models(&config, 16).unwrap();
        let mut opt = OptimizerState::new(&models);
        opt.gen_xy.t = 5;
        for v in opt.gen_xy.m.values_mut() {
            v.iter_mut().enumerate().for_each(|(i, x)| *x = i as f32 * 0.01);
        }
        let state = TrainState {
            models,
            opt,
            norm_x: NormalizationStats {
                mean: vec![0.25; MCEP_DIMS],
                std: vec![1.5; MCEP_DIMS],
                sample_count: 77,
            },
            norm_y: NormalizationStats {
                mean: vec![-0.5; MCEP_DIMS],
                std: vec![0.75; MCEP_DIMS],
                sample_count: 99,
            },
            iteration: 5,
        };
        let path = dir.path().join("state.etgc");
        save_state(&path, &config, &state).unwrap();
        let (config2, state2) = load_state(&path).unwrap();
        assert_eq!(config, config2);
        assert_eq!(state2.iteration, 5);
        assert_eq!(state2.opt.gen_xy.t, 5);
        for (name, p) in &state.models.gen_xy.params {
            assert_eq!(p.value, state2.models.gen_xy.params[name].value, "{name}");
        }
        assert_eq!(state.opt.gen_xy.m, state2.opt.gen_xy.m);
        assert_eq!(state.norm_x.mean, state2.norm_x.mean);
        assert_eq!(state.norm_y.sample_count, state2.norm_y.sample_count);
    }

    #[test]
    fn transfer_migrates_everything_but_the_classifier_head() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config();
        let models = build_models(&config, 17).unwrap();
        let opt = OptimizerState::new(&models);
        let state = TrainState {
            models,
            opt,
            norm_x: NormalizationStats {
                mean: vec![0.0; MCEP_DIMS],
                std: vec![1.0; MCEP_DIMS],
                sample_count: 10,
            },
            norm_y: NormalizationStats {
                mean: vec![0.0; MCEP_DIMS],
                std: vec![1.0; MCEP_DIMS],
                sample_count: 10,
            },
            iteration: 9,
        };
        let ckpt = dir.path().join("source.etgc");
        save_state(&ckpt, &config, &state).unwrap();

        let plan = TransferPlan {
            source_checkpoint: ckpt,
            target_speakers: 2,
            fine_tune_iterations: 4,
            seed: 18,
        };
        let (target_config, target) = transfer_init(&plan).unwrap();
        assert_eq!(target_config.classifier.n_speakers, 2);
        assert_eq!(target.iteration, 0);
        // generators and critics: bit-exact copies
        for (src, dst) in [
            (&state.models.gen_xy, &target.models.gen_xy),
            (&state.models.gen_yx, &target.models.gen_yx),
            (&state.models.critic_x, &target.models.critic_x),
            (&state.models.critic_y, &target.models.critic_y),
        ] {
            for (name, p) in &src.params {
                assert_eq!(p.value, dst.params[name].value, "{name}");
            }
        }
        // classifier trunk bit-exact, head re-sized and re-drawn
        for (name, p) in &state.models.classifier.params {
            if is_migrated(NetworkKind::Classifier, name) {
                assert_eq!(p.value, target.models.classifier.params[name].value, "{name}");
            }
        }
        assert_eq!(target.models.classifier.params["head.weight"].shape, vec![2, 8]);
        assert_eq!(target.models.classifier.params["head.bias"].shape, vec![2]);
        // optimizer reset
        assert_eq!(target.opt.classifier.t, 0);
        assert_eq!(target.opt.gen_xy.t, 0);
    }

    #[test]
    fn transfer_rejects_mismatched_trunk_topology() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config();
        let models = build_models(&config, 19).unwrap();
        let opt = OptimizerState::new(&models);
        let state = TrainState {
            models,
            opt,
            norm_x: NormalizationStats {
                mean: vec![0.0; MCEP_DIMS],
                std: vec![1.0; MCEP_DIMS],
                sample_count: 10,
            },
            norm_y: NormalizationStats {
                mean: vec![0.0; MCEP_DIMS],
                std: vec![1.0; MCEP_DIMS],
                sample_count: 10,
            },
            iteration: 1,
        };
        // store a checkpoint whose recorded classifier topology is edited to
        // disagree with its own tensors
        let ckpt = dir.path().join("bad.etgc");
        save_state(&ckpt, &config, &state).unwrap();
        let (config_json, iteration, mut tensors) =
            crate::networks::read_checkpoint(&ckpt).unwrap();
        let key = "classifier.embed.weight";
        let (shape, data) = tensors.get(key).unwrap().clone();
        tensors.insert(key.to_string(), (vec![shape[0], shape[1] + 1], {
            let mut d = data;
            d.extend(vec![0.0; shape[0]]);
            d
        }));
        crate::networks::write_checkpoint(&ckpt, &config_json, iteration, &tensors).unwrap();
        let plan = TransferPlan {
            source_checkpoint: ckpt,
            target_speakers: 2,
            fine_tune_iterations: 1,
            seed: 20,
        };
        let err = transfer_init(&plan).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn convert_preserves_frame_count_even_when_padding() {
        let config = tiny_config();
        let models = build_models(&config, 23).unwrap();
        let opt = OptimizerState::new(&models);
        let state = TrainState {
            models,
            opt,
            norm_x: NormalizationStats {
                mean: vec![0.1; MCEP_DIMS],
                std: vec![1.2; MCEP_DIMS],
                sample_count: 10,
            },
            norm_y: NormalizationStats {
                mean: vec![-0.2; MCEP_DIMS],
                std: vec![0.8; MCEP_DIMS],
                sample_count: 10,
            },
            iteration: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for frames in [128usize, 130, 33] {
            let data: Vec<f32> =
                (0..frames * MCEP_DIMS).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let fm = FeatureMatrix::new(data, frames).unwrap();
            let out = convert_features(&state, &config, Direction::X2y, &fm).unwrap();
            assert_eq!(out.frames, frames);
            assert!(out.mcep.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn direction_parsing() {
        use std::str::FromStr;
        assert_eq!(Direction::from_str("x2y").unwrap(), Direction::X2y);
        assert_eq!(Direction::from_str("y2x").unwrap(), Direction::Y2x);
        assert!(Direction::from_str("sideways").is_err());
    }

    #[test]
    fn linguistic_loss_alone_drives_generators_toward_identity() {
        // fixed batch, cycle and adversarial terms off: minimizing the
        // identity-mapping L1 must make steady progress
        let config = TrainingConfig {
            generator: GeneratorConfig { base_channels: 4, n_residual: 1, ..Default::default() },
            segment_length: 16,
            ..tiny_config()
        };
        let mut gen: ModelParameters<f32> = build_generator(
            &config.generator,
            NetworkKind::GeneratorXy,
            &mut ChaCha8Rng::seed_from_u64(21),
        )
        .unwrap();
        let mut adam = AdamState::new(&gen);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let data: Vec<f32> =
            (0..MCEP_DIMS * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut losses = Vec::new();
        for t in 1..=50u64 {
            let mut tape: Tape<f32> = Tape::new();
            let bound = bind(&mut tape, &gen, true).unwrap();
            let x = tape.leaf(data.clone(), vec![MCEP_DIMS, 16], false).unwrap();
            let gx = generator_forward(&mut tape, &bound, &config.generator, x).unwrap();
            let loss = tape.l1_distance(gx, x).unwrap();
            losses.push(tape.scalar_value(loss));
            let grads = tape.backward(loss, false).unwrap();
            let grad_map = extract_grads(&tape, &grads, &bound);
            adam_step(&mut gen, &grad_map, &mut adam, 0.002, 0.5, 0.9, 1e-8, t).unwrap();
        }
        assert!(
            losses.last().unwrap() < &(0.5 * losses[0]),
            "loss did not drop: {:?} -> {:?}",
            losses[0],
            losses.last().unwrap()
        );
        let decreases = losses.windows(2).filter(|w| w[1] < w[0]).count();
        assert!(decreases >= 40, "only {decreases}/49 steps decreased");
    }
}

