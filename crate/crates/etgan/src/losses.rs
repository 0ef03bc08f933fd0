//! Differentiable loss terms: classic and Wasserstein adversarial losses,
//! cycle consistency, linguistic identity, speaker cross-entropy, the
//! gradient penalty, and the weighted full objective.

use crate::autodiff::{fl, Scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::networks::ModelParameters;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Floor under probabilities before taking logs.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_cyc: f64,
    pub lambda_li: f64,
    pub lambda_sv: f64,
    pub lambda_gradient: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_cyc: 10.0, lambda_li: 5.0, lambda_sv: 1.0, lambda_gradient: 5.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_cyc, self.lambda_li, self.lambda_sv, self.lambda_gradient];
        if all.iter().any(|&w| !w.is_finite() || w < 0.0) {
            return Err(Error::contract(format!("loss weights must be >= 0, got {self:?}")));
        }
        Ok(())
    }
}

/// How the critics are trained and scored.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum AdversarialMode {
    /// Sigmoid critic, log losses, non-saturating generator term.
    Gan,
    /// Unbounded critic with a gradient penalty on interpolated samples.
    WganGp,
    /// Unbounded critic with per-parameter weight clipping instead of the
    /// gradient penalty.
    WganClip { clip: f64 },
}

impl AdversarialMode {
    pub fn validate(&self) -> Result<()> {
        if let AdversarialMode::WganClip { clip } = self {
            if !clip.is_finite() || *clip <= 0.0 {
                return Err(Error::contract(format!("clip bound must be > 0, got {clip}")));
            }
        }
        Ok(())
    }
}

/// Which optional objective terms are active (one Table-row configuration).
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub use_cycle: bool,
    pub use_li: bool,
    pub use_sv: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags { use_cycle: true, use_li: true, use_sv: true }
    }
}

fn batch_mean<T: Scalar>(tape: &mut Tape<T>, items: &[Var]) -> Result<Var> {
    let mut acc = items
        .first()
        .copied()
        .ok_or_else(|| Error::contract("empty batch".to_string()))?;
    for &v in &items[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(tape.scale(acc, fl(1.0 / items.len() as f64)))
}

/// Classic adversarial losses from sigmoid-mode critic scores:
/// `loss_D = -mean(log D(y)) - mean(log(1 - D(G(x))))`,
/// `loss_G = -mean(log D(G(x)))` (non-saturating form).
pub fn adv_loss_gan<T: Scalar>(
    tape: &mut Tape<T>,
    d_real: &[Var],
    d_fake: &[Var],
) -> Result<(Var, Var)> {
    for &v in d_real.iter().chain(d_fake) {
        let x = tape.scalar_value(v).to_f64().unwrap_or(f64::NAN);
        if !(x > 0.0 && x < 1.0) {
            return Err(Error::contract(format!(
                "adv_loss_gan: critic score {x} outside (0, 1); use the sigmoid head"
            )));
        }
    }
    let log_real: Vec<Var> = d_real.iter().map(|&v| tape.log(v)).collect();
    let one_minus_fake: Vec<Var> = d_fake
        .iter()
        .map(|&v| {
            let n = tape.neg(v);
            tape.add_scalar(n, T::one())
        })
        .collect();
    let log_omf: Vec<Var> = one_minus_fake.iter().map(|&v| tape.log(v)).collect();
    let log_fake: Vec<Var> = d_fake.iter().map(|&v| tape.log(v)).collect();
    let mean_lr = batch_mean(tape, &log_real)?;
    let mean_lomf = batch_mean(tape, &log_omf)?;
    let mean_lf = batch_mean(tape, &log_fake)?;
    let sum_d = tape.add(mean_lr, mean_lomf)?;
    let loss_d = tape.neg(sum_d);
    let loss_g = tape.neg(mean_lf);
    Ok((loss_d, loss_g))
}

/// Wasserstein critic/generator losses with the penalty broken out so it can
/// be reported separately. `loss_d` already includes the penalty term.
pub struct WganLosses {
    pub loss_d: Var,
    pub loss_g: Var,
    pub penalty: Var,
}

/// Plain Wasserstein losses (no penalty): `loss_D = mean(D(fake)) -
/// mean(D(real))`, `loss_G = -mean(D(fake))`. Used with weight clipping.
pub fn adv_loss_wgan<T: Scalar>(
    tape: &mut Tape<T>,
    d_real: &[Var],
    d_fake: &[Var],
) -> Result<(Var, Var)> {
    let mean_real = batch_mean(tape, d_real)?;
    let mean_fake = batch_mean(tape, d_fake)?;
    let loss_d = tape.sub(mean_fake, mean_real)?;
    let loss_g = tape.neg(mean_fake);
    Ok((loss_d, loss_g))
}

/// Wasserstein losses with gradient penalty:
/// `loss_D = mean(D(fake)) - mean(D(real)) + lambda * mean((||grad_x D(x_hat)|| - 1)^2)`
/// with `x_hat = eps*real + (1-eps)*fake`, `eps ~ U(0,1)` per sample, and
/// `loss_G = -mean(D(fake))`. The penalty is built with a differentiable
/// inner backward pass, so it carries second-order gradients to the critic
/// parameters. The penalty treats `x_hat` as data: it does not propagate
/// into whatever produced the fake batch.
pub fn adv_loss_wgan_gp<T: Scalar, F>(
    tape: &mut Tape<T>,
    critic: F,
    real_batch: &[Var],
    fake_batch: &[Var],
    lambda_gradient: f64,
    rng: &mut impl Rng,
) -> Result<WganLosses>
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    if real_batch.len() != fake_batch.len() || real_batch.is_empty() {
        return Err(Error::contract(format!(
            "wgan-gp batches must be non-empty and equal length, got {} real / {} fake",
            real_batch.len(),
            fake_batch.len()
        )));
    }
    let mut d_real = Vec::with_capacity(real_batch.len());
    let mut d_fake = Vec::with_capacity(fake_batch.len());
    let mut penalties = Vec::with_capacity(real_batch.len());
    for (&r, &f) in real_batch.iter().zip(fake_batch) {
        if tape.shape(r) != tape.shape(f) {
            return Err(Error::dim(format!(
                "wgan-gp sample shapes differ: {:?} vs {:?}",
                tape.shape(r),
                tape.shape(f)
            )));
        }
        d_real.push(critic(tape, r)?);
        d_fake.push(critic(tape, f)?);

        let eps: f64 = rng.gen_range(0.0..1.0);
        let shape = tape.shape(r).to_vec();
        let mixed: Vec<T> = tape
            .value(r)
            .iter()
            .zip(tape.value(f))
            .map(|(&a, &b)| fl::<T>(eps) * a + fl::<T>(1.0 - eps) * b)
            .collect();
        let x_hat = tape.leaf(mixed, shape, true)?;
        let d_hat = critic(tape, x_hat)?;
        let grads = tape.backward(d_hat, true)?;
        let g = grads.get(x_hat).ok_or_else(|| {
            Error::contract(
                "gradient penalty: critic output does not depend on its input".to_string(),
            )
        })?;
        let norm = tape.l2_norm(g)?;
        let shifted = tape.add_scalar(norm, -T::one());
        penalties.push(tape.mul(shifted, shifted)?);
    }
    let mean_real = batch_mean(tape, &d_real)?;
    let mean_fake = batch_mean(tape, &d_fake)?;
    let mean_pen = batch_mean(tape, &penalties)?;
    let gap = tape.sub(mean_fake, mean_real)?;
    let penalty = tape.scale(mean_pen, fl(lambda_gradient));
    let loss_d = tape.add(gap, penalty)?;
    let loss_g = tape.neg(mean_fake);
    Ok(WganLosses { loss_d, loss_g, penalty })
}

fn mean_l1_pairs<T: Scalar>(
    tape: &mut Tape<T>,
    originals: &[Var],
    mapped: &[Var],
    what: &str,
) -> Result<Var> {
    if originals.len() != mapped.len() || originals.is_empty() {
        return Err(Error::dim(format!(
            "{what}: need equal non-empty batches, got {} and {}",
            originals.len(),
            mapped.len()
        )));
    }
    let terms: Vec<Var> = originals
        .iter()
        .zip(mapped)
        .map(|(&a, &b)| tape.l1_distance(b, a))
        .collect::<Result<_>>()?;
    batch_mean(tape, &terms)
}

/// Cycle-consistency loss: mean L1 of round-tripped samples against their
/// originals, summed over both directions.
pub fn cycle_loss<T: Scalar>(
    tape: &mut Tape<T>,
    x_batch: &[Var],
    x_cycled: &[Var],
    y_batch: &[Var],
    y_cycled: &[Var],
) -> Result<Var> {
    let lx = mean_l1_pairs(tape, x_batch, x_cycled, "cycle_loss x")?;
    let ly = mean_l1_pairs(tape, y_batch, y_cycled, "cycle_loss y")?;
    tape.add(lx, ly)
}

/// Linguistic (identity-mapping) loss: each generator applied to samples it
/// should leave unchanged, mean L1 against the input, summed over both
/// generators. The caller decides which domain feeds which generator (see
/// the `li_as_printed` training switch).
pub fn linguistic_loss<T: Scalar>(
    tape: &mut Tape<T>,
    y_batch: &[Var],
    gxy_of_y: &[Var],
    x_batch: &[Var],
    gyx_of_x: &[Var],
) -> Result<Var> {
    let ly = mean_l1_pairs(tape, y_batch, gxy_of_y, "linguistic_loss y")?;
    let lx = mean_l1_pairs(tape, x_batch, gyx_of_x, "linguistic_loss x")?;
    tape.add(ly, lx)
}

/// Mean cross-entropy of speaker distributions against true labels. The
/// returned flag reports whether any probability had to be clamped to
/// [`PROB_CLAMP`] before the log.
pub fn speaker_loss<T: Scalar>(
    tape: &mut Tape<T>,
    probs: &[Var],
    true_speaker: &[usize],
) -> Result<(Var, bool)> {
    if probs.len() != true_speaker.len() || probs.is_empty() {
        return Err(Error::contract(format!(
            "speaker_loss: need equal non-empty batches, got {} probs / {} labels",
            probs.len(),
            true_speaker.len()
        )));
    }
    let mut clamped = false;
    let mut terms = Vec::with_capacity(probs.len());
    for (&p, &label) in probs.iter().zip(true_speaker) {
        let k = tape.shape(p)[0];
        if label >= k {
            return Err(Error::validation(format!(
                "speaker label {label} out of range for {k} speakers"
            )));
        }
        let picked = tape.slice_channels(p, label, 1)?;
        if tape.scalar_value(picked).to_f64().unwrap_or(0.0) < PROB_CLAMP {
            clamped = true;
        }
        let floored = tape.clamp_min(picked, fl(PROB_CLAMP));
        let lp = tape.log(floored);
        let nll = tape.neg(lp);
        terms.push(tape.sum(nll));
    }
    let loss = batch_mean(tape, &terms)?;
    Ok((loss, clamped))
}

/// Weighted generator objective: adversarial terms plus the enabled
/// auxiliary terms scaled by their weights.
pub fn generator_objective<T: Scalar>(
    tape: &mut Tape<T>,
    adv_g: Var,
    cyc: Var,
    li: Var,
    sv: Var,
    weights: &LossWeights,
    flags: &AblationFlags,
) -> Result<Var> {
    weights.validate()?;
    let mut total = adv_g;
    if flags.use_cycle {
        let t = tape.scale(cyc, fl(weights.lambda_cyc));
        total = tape.add(total, t)?;
    }
    if flags.use_li {
        let t = tape.scale(li, fl(weights.lambda_li));
        total = tape.add(total, t)?;
    }
    if flags.use_sv {
        let t = tape.scale(sv, fl(weights.lambda_sv));
        total = tape.add(total, t)?;
    }
    Ok(total)
}

/// Finite-difference validation of every composed loss at random points,
/// mirroring the per-op suite but with the looser composed tolerance. Each
/// loss is driven through a small parametric network so the check covers the
/// whole chain from parameters to loss (including the double-backward
/// gradient-penalty path).
pub fn run_loss_suite(
    seed: u64,
    rounds: usize,
) -> Result<Vec<crate::autodiff::OpCheck>> {
    use crate::autodiff::{grad_check_multi, OpCheck};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const STEP: f64 = 1e-5;
    const LOSS_TOL: f64 = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = Vec::new();
    let mut check = |name: &'static str,
                     rng: &mut ChaCha8Rng,
                     run: &mut dyn FnMut(&mut ChaCha8Rng) -> Result<f64>|
     -> Result<()> {
        let mut worst = 0.0f64;
        for _ in 0..rounds {
            worst = worst.max(run(rng)?);
        }
        table.push(OpCheck { name, max_rel_err: worst, tolerance: LOSS_TOL });
        Ok(())
    };
    let point = |rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64| -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(lo..hi)).collect()
    };

    // classic adversarial loss through a sigmoid linear critic
    check("adv_loss_gan", &mut rng, &mut |rng| {
        let w = point(rng, 6, -0.5, 0.5);
        let xr = point(rng, 6, -1.0, 1.0);
        let xf = point(rng, 6, -1.0, 1.0);
        grad_check_multi(
            |t, v| {
                let w = v[0];
                let score = |t: &mut Tape<f64>, data: &Vec<f64>| -> Result<Var> {
                    let x = t.leaf(data.clone(), vec![6], false)?;
                    let p = t.mul(w, x)?;
                    let s = t.sum(p);
                    Ok(t.sigmoid(s))
                };
                let dr = score(t, &xr)?;
                let df = score(t, &xf)?;
                let (loss_d, _) = adv_loss_gan(t, &[dr], &[df])?;
                Ok(loss_d)
            },
            &[(w, vec![6])],
            STEP,
        )
    })?;

    // cycle loss through a shape-preserving conv generator applied twice
    check("cycle_loss", &mut rng, &mut |rng| {
        let w = point(rng, 2 * 2 * 3, -0.5, 0.5);
        let x = point(rng, 2 * 8, -1.0, 1.0);
        let y = point(rng, 2 * 8, -1.0, 1.0);
        grad_check_multi(
            |t, v| {
                let w = v[0];
                let xv = t.leaf(x.clone(), vec![2, 8], false)?;
                let yv = t.leaf(y.clone(), vec![2, 8], false)?;
                let gen = |t: &mut Tape<f64>, input: Var| t.conv1d(input, w, 1, 1);
                let x1 = gen(t, xv)?;
                let x_cycled = gen(t, x1)?;
                let y1 = gen(t, yv)?;
                let y_cycled = gen(t, y1)?;
                cycle_loss(t, &[xv], &[x_cycled], &[yv], &[y_cycled])
            },
            &[(w, vec![2, 2, 3])],
            STEP,
        )
    })?;

    // linguistic loss through one generator application per direction
    check("linguistic_loss", &mut rng, &mut |rng| {
        let w = point(rng, 2 * 2 * 3, -0.5, 0.5);
        let x = point(rng, 2 * 8, -1.0, 1.0);
        let y = point(rng, 2 * 8, -1.0, 1.0);
        grad_check_multi(
            |t, v| {
                let w = v[0];
                let xv = t.leaf(x.clone(), vec![2, 8], false)?;
                let yv = t.leaf(y.clone(), vec![2, 8], false)?;
                let gy = t.conv1d(yv, w, 1, 1)?;
                let gx = t.conv1d(xv, w, 1, 1)?;
                linguistic_loss(t, &[yv], &[gy], &[xv], &[gx])
            },
            &[(w, vec![2, 2, 3])],
            STEP,
        )
    })?;

    // speaker cross-entropy through a softmax linear head
    check("speaker_loss", &mut rng, &mut |rng| {
        let w = point(rng, 4 * 5, -0.5, 0.5);
        let x = point(rng, 5, -1.0, 1.0);
        grad_check_multi(
            |t, v| {
                let w = v[0];
                let xv = t.leaf(x.clone(), vec![5], false)?;
                let b = t.leaf(vec![0.0; 4], vec![4], false)?;
                let logits = t.linear(xv, w, b)?;
                let probs = t.softmax(logits)?;
                let (loss, _) = speaker_loss(t, &[probs], &[1])?;
                Ok(loss)
            },
            &[(w, vec![4, 5])],
            STEP,
        )
    })?;

    // full wasserstein critic loss including the double-backward penalty
    check("adv_loss_wgan_gp", &mut rng, &mut |rng| {
        let w = point(rng, 2 * 1 * 3 * 3, -0.5, 0.5);
        let xr = point(rng, 6 * 8, -1.0, 1.0);
        let xf = point(rng, 6 * 8, -1.0, 1.0);
        let eps_seed: u64 = rng.gen();
        grad_check_multi(
            |t, v| {
                let w = v[0];
                let r = t.leaf(xr.clone(), vec![1, 6, 8], false)?;
                let f = t.leaf(xf.clone(), vec![1, 6, 8], false)?;
                let critic = |t: &mut Tape<f64>, x: Var| {
                    let y = t.conv2d(x, w, (2, 2), (1, 1))?;
                    let sq = t.mul(y, y)?;
                    Ok(t.mean(sq))
                };
                let mut eps_rng = ChaCha8Rng::seed_from_u64(eps_seed);
                let out = adv_loss_wgan_gp(t, critic, &[r], &[f], 5.0, &mut eps_rng)?;
                Ok(out.loss_d)
            },
            &[(w, vec![2, 1, 3, 3])],
            STEP,
        )
    })?;

    // weighted full generator objective over conv-generated terms
    check("full_objective", &mut rng, &mut |rng| {
        let w = point(rng, 2 * 2 * 3, -0.5, 0.5);
        let x = point(rng, 2 * 8, -1.0, 1.0);
        let y = point(rng, 2 * 8, -1.0, 1.0);
        grad_check_multi(
            |t, v| {
                let w = v[0];
                let xv = t.leaf(x.clone(), vec![2, 8], false)?;
                let yv = t.leaf(y.clone(), vec![2, 8], false)?;
                let fake_y = t.conv1d(xv, w, 1, 1)?;
                let fake_x = t.conv1d(yv, w, 1, 1)?;
                let x_cycled = t.conv1d(fake_y, w, 1, 1)?;
                let y_cycled = t.conv1d(fake_x, w, 1, 1)?;
                // adversarial stand-in: mean squared critic response
                let sq = t.mul(fake_y, fake_y)?;
                let adv = t.mean(sq);
                let cyc = cycle_loss(t, &[xv], &[x_cycled], &[yv], &[y_cycled])?;
                let gy = t.conv1d(yv, w, 1, 1)?;
                let gx = t.conv1d(xv, w, 1, 1)?;
                let li = linguistic_loss(t, &[yv], &[gy], &[xv], &[gx])?;
                let flat = t.reshape(fake_y, &[16])?;
                let head = t.leaf(
                    (0..4 * 16).map(|i| ((i % 7) as f64 - 3.0) * 0.1).collect(),
                    vec![4, 16],
                    false,
                )?;
                let b = t.leaf(vec![0.0; 4], vec![4], false)?;
                let logits = t.linear(flat, head, b)?;
                let probs = t.softmax(logits)?;
                let (sv, _) = speaker_loss(t, &[probs], &[2])?;
                generator_objective(
                    t,
                    adv,
                    cyc,
                    li,
                    sv,
                    &LossWeights::default(),
                    &AblationFlags::default(),
                )
            },
            &[(w, vec![2, 2, 3])],
            STEP,
        )
    })?;

    Ok(table)
}

/// Clamp every parameter of `model` into `[-c, c]` in place.
pub fn weight_clip(model: &mut ModelParameters<f32>, c: f32) -> Result<()> {
    if !(c > 0.0) {
        return Err(Error::contract(format!("clip bound must be > 0, got {c}")));
    }
    for param in model.params.values_mut() {
        for v in param.value.iter_mut() {
            *v = v.clamp(-c, c);
        }
    }
    Ok(())
}
