//! Adversarial training with information distillation: a generator and
//! discriminator trained on real sprites, where each generated image is
//! conditioned on a code drawn from a frozen, pre-trained encoder and the
//! generator additionally pays a code-reconstruction penalty so that the
//! code dimensions keep steering the output.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::dsprites::{reduced_lattice, Dataset, LatticeSpec, NUM_POSITIONS};
use crate::error::{Error, Result};
use crate::models::{
    apply_grads, Checkpoint, Discriminator, Encoder, GanModel, Net, VaeModel, DEFAULT_NOISE_DIM,
};
use crate::tensor::optim::Optimizer;
use crate::tensor::rng::SeededRng;
use crate::tensor::{Tape, Tensor};
use crate::vae::reparameterize;

const LN_2PI: f32 = 1.837_877_1;

// derived-stream tags for this trainer
const TAG_GAN_INIT: u64 = 10;
const TAG_GAN_EPS: u64 = 11;
const TAG_GAN_NOISE: u64 = 12;
const TAG_GAN_SHUFFLE: u64 = 13;

/// Fake-batch pixel variance below this for five consecutive epochs trips
/// the mode-collapse watchdog.
const COLLAPSE_VARIANCE: f64 = 1e-6;
const COLLAPSE_EPOCHS: usize = 5;

#[derive(Debug, Clone)]
pub struct IdGanConfig {
    /// Checkpoint of the trained encoder/decoder pair; its latent_dim
    /// defines the code dimension.
    pub vae_checkpoint: PathBuf,
    pub noise_dim: usize,
    /// Distillation weight; 0 reduces training to a plain GAN.
    pub lambda: f32,
    pub g_learning_rate: f32,
    pub d_learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lattice: LatticeSpec,
    pub position_threshold: usize,
    pub checkpoint_every: usize,
}

impl Default for IdGanConfig {
    fn default() -> Self {
        IdGanConfig {
            vae_checkpoint: PathBuf::new(),
            noise_dim: DEFAULT_NOISE_DIM,
            lambda: 1.0,
            g_learning_rate: 1e-4,
            d_learning_rate: 1e-4,
            epochs: crate::vae::DEFAULT_EPOCHS,
            batch_size: crate::vae::DEFAULT_BATCH_SIZE,
            seed: 0,
            lattice: LatticeSpec::default(),
            position_threshold: NUM_POSITIONS,
            checkpoint_every: crate::vae::DEFAULT_CHECKPOINT_EVERY,
        }
    }
}

impl IdGanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.noise_dim == 0 {
            return Err(Error::Config("noise_dim must be >= 1".into()));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Config(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        for (name, lr) in [
            ("g_learning_rate", self.g_learning_rate),
            ("d_learning_rate", self.d_learning_rate),
        ] {
            if !lr.is_finite() || lr <= 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be finite and > 0, got {lr}"
                )));
            }
        }
        if self.position_threshold > NUM_POSITIONS {
            return Err(Error::Config(format!(
                "position_threshold must be <= {NUM_POSITIONS}, got {}",
                self.position_threshold
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be >= 1".into()));
        }
        Ok(())
    }

    pub fn meta(&self) -> Vec<(String, String)> {
        vec![
            ("lambda".into(), format!("{}", self.lambda)),
            ("g_learning_rate".into(), format!("{}", self.g_learning_rate)),
            ("d_learning_rate".into(), format!("{}", self.d_learning_rate)),
            (
                "position_threshold".into(),
                self.position_threshold.to_string(),
            ),
            ("epochs".into(), self.epochs.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("seed".into(), self.seed.to_string()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GanEpochRecord {
    pub epoch: usize,
    pub d_loss: f64,
    pub g_adv: f64,
    pub distill: f64,
    pub d_real_mean: f64,
    pub d_fake_mean: f64,
    pub seconds: f64,
}

pub const GAN_LOG_HEADER: &str = "epoch,d_loss,g_adv,distill,d_real_mean,d_fake_mean,seconds";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GanLog {
    pub records: Vec<GanEpochRecord>,
    /// Watchdog messages (mode collapse); never fatal.
    pub warnings: Vec<String>,
}

impl GanLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(GAN_LOG_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.3}\n",
                r.epoch, r.d_loss, r.g_adv, r.distill, r.d_real_mean, r.d_fake_mean, r.seconds
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Codes for the generator, drawn from the frozen encoder's posterior over
/// a real batch. The encoder is never attached to a tape here, so no
/// gradient can reach its parameters.
pub fn code_prior_sample(encoder: &Encoder, x: &Tensor, eps: &Tensor) -> Result<Tensor> {
    let (mu, log_var) = encoder.encode(x)?;
    if eps.dims() != mu.dims() {
        return Err(Error::ShapeMismatch {
            op: "code_prior_sample",
            lhs: mu.dims().to_vec(),
            rhs: eps.dims().to_vec(),
        });
    }
    Ok(reparameterize(&mu, &log_var, eps)?.detach())
}

/// Discriminator loss from raw logits:
/// mean softplus(-real) + mean softplus(fake), the stable logit-space form
/// of -mean log sigma(real) - mean log(1 - sigma(fake)).
pub fn d_loss_from_logits(real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    if real.dims() != fake.dims() {
        return Err(Error::ShapeMismatch {
            op: "d_loss",
            lhs: real.dims().to_vec(),
            rhs: fake.dims().to_vec(),
        });
    }
    let real_term = real.affine(-1.0, 0.0)?.softplus()?.mean()?;
    let fake_term = fake.softplus()?.mean()?;
    real_term.add(&fake_term)
}

pub fn d_loss(disc: &Discriminator, real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    d_loss_from_logits(&disc.discriminate(real)?, &disc.discriminate(fake)?)
}

/// Non-saturating generator loss from raw logits:
/// mean softplus(-fake) = -mean log sigma(fake).
pub fn g_adv_from_logits(fake: &Tensor) -> Result<Tensor> {
    fake.affine(-1.0, 0.0)?.softplus()?.mean()
}

pub fn g_adversarial_loss(disc: &Discriminator, fake: &Tensor) -> Result<Tensor> {
    g_adv_from_logits(&disc.discriminate(fake)?)
}

/// Gaussian code-reconstruction negative log-likelihood from posterior
/// stats: mean over the batch of
/// 1/2 sum_d [log_var + (c - mu)^2 exp(-log_var) + ln 2 pi].
pub fn distill_from_stats(c: &Tensor, mu: &Tensor, log_var: &Tensor) -> Result<Tensor> {
    if c.dims() != mu.dims() || c.dims() != log_var.dims() {
        return Err(Error::ShapeMismatch {
            op: "distillation_loss",
            lhs: c.dims().to_vec(),
            rhs: mu.dims().to_vec(),
        });
    }
    let n = c.dims().first().copied().unwrap_or(1) as f32;
    let diff = c.sub(mu)?;
    let quad = diff.mul(&diff)?.mul(&log_var.affine(-1.0, 0.0)?.exp()?)?;
    let per_elem = log_var.add(&quad)?.affine(1.0, LN_2PI)?;
    per_elem.sum()?.affine(0.5 / n, 0.0)
}

/// Distillation loss: re-encode the generated batch with the frozen encoder
/// and score the originating code under the resulting Gaussian. Gradients
/// flow through the image into the generator only.
pub fn distillation_loss(encoder: &Encoder, c: &Tensor, fake: &Tensor) -> Result<Tensor> {
    let (mu, log_var) = encoder.encode(fake)?;
    distill_from_stats(&c.detach(), &mu, &log_var)
}

pub struct IdGanRun {
    pub model: GanModel,
    pub log: GanLog,
    pub final_checkpoint: Option<PathBuf>,
}

/// Loads the frozen encoder from `config.vae_checkpoint` and trains.
pub fn train_idgan(config: &IdGanConfig, out_dir: Option<&Path>) -> Result<IdGanRun> {
    let ck = Checkpoint::load(&config.vae_checkpoint)?;
    let vae = VaeModel::from_checkpoint(&ck)?;
    train_idgan_with_encoder(config, &vae.encoder, out_dir)
}

/// Training loop against an already-loaded frozen encoder. Alternates one
/// discriminator step and one generator step per batch.
pub fn train_idgan_with_encoder(
    config: &IdGanConfig,
    encoder: &Encoder,
    out_dir: Option<&Path>,
) -> Result<IdGanRun> {
    config.validate()?;
    let code_dim = encoder.latent_dim;
    let view = reduced_lattice(
        &config.lattice,
        Some(config.position_threshold),
        crate::tensor::rng::mix_seed(config.seed, TAG_GAN_SHUFFLE),
    )?;
    let dataset = Dataset::materialize(&view)?;
    log::info!(
        "idgan: training on {} images, code_dim={}, noise_dim={}, lambda={}, epochs={}",
        dataset.len(),
        code_dim,
        config.noise_dim,
        config.lambda,
        config.epochs
    );

    let mut init_rng = SeededRng::derived(config.seed, TAG_GAN_INIT);
    let mut eps_rng = SeededRng::derived(config.seed, TAG_GAN_EPS);
    let mut noise_rng = SeededRng::derived(config.seed, TAG_GAN_NOISE);
    let mut model = GanModel::new(config.noise_dim, code_dim, &mut init_rng);
    let mut d_opt = Optimizer::adam(config.d_learning_rate);
    let mut g_opt = Optimizer::adam(config.g_learning_rate);

    let mut log = GanLog::default();
    let mut csv = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("gan_log.csv"))?);
            writeln!(f, "{GAN_LOG_HEADER}")?;
            Some(f)
        }
        None => None,
    };

    let mut low_variance_streak = 0usize;
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let mut sums = [0f64; 5]; // d_loss, g_adv, distill, d_real, d_fake
        let mut seen = 0usize;
        let mut fake_variance = 0f64;
        let mut fake_batches = 0usize;
        for (bi, batch) in view.batches(config.batch_size, epoch)?.iter().enumerate() {
            let n = batch.len();
            let x = dataset.batch_images(batch)?;
            let eps = eps_rng.gaussian_tensor(&[n, code_dim]);
            let noise = noise_rng.gaussian_tensor(&[n, config.noise_dim]);
            let step = (|| -> Result<[f64; 5]> {
                let c = code_prior_sample(encoder, &x, &eps)?;

                // discriminator step: generator output treated as constant
                let fake = model.generator.generate(&noise, &c)?.detach();
                let tape_d = Tape::new();
                let bound_d = model.discriminator.bind(&tape_d);
                let real_logits = bound_d.discriminate(&x)?;
                let fake_logits = bound_d.discriminate(&fake)?;
                let dl = d_loss_from_logits(&real_logits, &fake_logits)?;
                let d_real = mean_sigmoid(&real_logits);
                let d_fake = mean_sigmoid(&fake_logits);
                let grads = tape_d.backward(&dl)?;
                apply_grads(&mut d_opt, &mut model.discriminator, &bound_d, &grads)?;

                // generator step: discriminator parameters held constant,
                // gradients flow through its graph into the generator
                let tape_g = Tape::new();
                let bound_g = model.generator.bind(&tape_g);
                let fake = bound_g.generate(&noise, &c)?;
                let g_adv = g_adversarial_loss(&model.discriminator, &fake)?;
                let distill = distillation_loss(encoder, &c, &fake)?;
                let g_total = if config.lambda > 0.0 {
                    g_adv.add(&distill.affine(config.lambda, 0.0)?)?
                } else {
                    g_adv.clone()
                };
                let grads = tape_g.backward(&g_total)?;
                apply_grads(&mut g_opt, &mut model.generator, &bound_g, &grads)?;

                fake_variance += pixel_variance(&fake);
                Ok([
                    dl.item() as f64,
                    g_adv.item() as f64,
                    distill.item() as f64,
                    d_real,
                    d_fake,
                ])
            })();
            let vals = step.map_err(|e| match e {
                Error::NonFinite { op } => Error::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    detail: format!("op {op} produced a non-finite value"),
                },
                other => other,
            })?;
            for (s, v) in sums.iter_mut().zip(vals) {
                *s += v * n as f64;
            }
            seen += n;
            fake_batches += 1;
        }
        let record = GanEpochRecord {
            epoch,
            d_loss: sums[0] / seen as f64,
            g_adv: sums[1] / seen as f64,
            distill: sums[2] / seen as f64,
            d_real_mean: sums[3] / seen as f64,
            d_fake_mean: sums[4] / seen as f64,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::debug!(
            "idgan epoch {}: d={:.4} g_adv={:.4} distill={:.4} D(real)={:.3} D(fake)={:.3}",
            record.epoch,
            record.d_loss,
            record.g_adv,
            record.distill,
            record.d_real_mean,
            record.d_fake_mean
        );
        if let Some(f) = csv.as_mut() {
            writeln!(
                f,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.3}",
                record.epoch,
                record.d_loss,
                record.g_adv,
                record.distill,
                record.d_real_mean,
                record.d_fake_mean,
                record.seconds
            )?;
            f.flush()?;
        }
        log.records.push(record);

        if fake_variance / (fake_batches as f64) < COLLAPSE_VARIANCE {
            low_variance_streak += 1;
        } else {
            low_variance_streak = 0;
        }
        if low_variance_streak >= COLLAPSE_EPOCHS {
            let msg = format!(
                "possible mode collapse: fake-batch pixel variance below {COLLAPSE_VARIANCE} \
                 for {low_variance_streak} consecutive epochs (epoch {epoch})"
            );
            log::warn!("{msg}");
            log.warnings.push(msg);
        }

        if let Some(dir) = out_dir {
            if (epoch + 1) % config.checkpoint_every == 0 && epoch + 1 != config.epochs {
                save_gan_checkpoint(
                    &model,
                    &d_opt,
                    &g_opt,
                    config,
                    epoch + 1,
                    &dir.join(format!("gan_epoch_{:04}.dsnt", epoch + 1)),
                )?;
            }
        }
    }

    let final_checkpoint = match out_dir {
        Some(dir) => {
            let path = dir.join("gan_final.dsnt");
            save_gan_checkpoint(&model, &d_opt, &g_opt, config, config.epochs, &path)?;
            Some(path)
        }
        None => None,
    };
    Ok(IdGanRun {
        model,
        log,
        final_checkpoint,
    })
}

fn mean_sigmoid(logits: &Tensor) -> f64 {
    let d = logits.data();
    d.iter().map(|&l| 1.0 / (1.0 + (-l as f64).exp())).sum::<f64>() / d.len() as f64
}

fn pixel_variance(images: &Tensor) -> f64 {
    let d = images.data();
    let mean = d.iter().map(|&v| v as f64).sum::<f64>() / d.len() as f64;
    d.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d.len() as f64
}

fn save_gan_checkpoint(
    model: &GanModel,
    d_opt: &Optimizer,
    g_opt: &Optimizer,
    config: &IdGanConfig,
    epoch: usize,
    path: &Path,
) -> Result<()> {
    let mut meta = config.meta();
    meta.push(("epoch".into(), epoch.to_string()));
    let mut ck = model.to_checkpoint(&meta);
    // both optimizers share the checkpoint; parameter names are disjoint
    ck.push_optimizer(d_opt);
    ck.push_optimizer(g_opt);
    ck.save(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsprites::FactorSel;
    use crate::models::{param_hash, zero_head};
    use crate::vae::TAG_INIT;

    fn tiny_lattice() -> LatticeSpec {
        LatticeSpec {
            sels: [
                FactorSel::fixed(0),
                FactorSel::fixed(3),
                FactorSel::fixed(0),
                FactorSel { start: 0, stop: 32, step: 16 },
                FactorSel { start: 0, stop: 32, step: 16 },
            ],
        }
    }

    #[test]
    fn d_loss_closed_forms() {
        let zeros = Tensor::zeros(&[4]);
        let loss = d_loss_from_logits(&zeros, &zeros).unwrap().item();
        let expect = 2.0 * std::f64::consts::LN_2;
        assert!((loss as f64 - expect).abs() < 1e-6, "{loss}");

        // perfect discriminator
        let real = Tensor::full(&[4], 50.0);
        let fake = Tensor::full(&[4], -50.0);
        assert!(d_loss_from_logits(&real, &fake).unwrap().item() < 1e-8);

        // inverted discriminator: loss grows linearly in the real logit
        for m in [10f32, 20.0, 40.0] {
            let real = Tensor::full(&[4], -m);
            let fake = Tensor::full(&[4], -50.0);
            let loss = d_loss_from_logits(&real, &fake).unwrap().item();
            assert!((loss - m).abs() / m < 1e-3, "m={m} loss={loss}");
        }

        assert!(d_loss_from_logits(&zeros, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn g_loss_closed_forms() {
        let zeros = Tensor::zeros(&[4]);
        let loss = g_adv_from_logits(&zeros).unwrap().item();
        assert!((loss as f64 - std::f64::consts::LN_2).abs() < 1e-6);
        let fooled = Tensor::full(&[4], 50.0);
        assert!(g_adv_from_logits(&fooled).unwrap().item() < 1e-8);
    }

    #[test]
    fn zero_logit_composition() {
        let zeros = Tensor::zeros(&[8]);
        let total = d_loss_from_logits(&zeros, &zeros).unwrap().item()
            + g_adv_from_logits(&zeros).unwrap().item();
        assert!((total as f64 - 3.0 * std::f64::consts::LN_2).abs() < 1e-5);
    }

    #[test]
    fn non_saturating_gradient_survives_confident_discriminator() {
        // D is confident the sample is fake: logit = -20
        let tape = Tape::new();
        let l = tape.watch(&Tensor::full(&[1], -20.0));
        let ns = g_adv_from_logits(&l).unwrap();
        let g_ns = tape.backward(&ns).unwrap().get_data(&l).unwrap()[0];
        assert!(g_ns.abs() > 0.5, "non-saturating gradient {g_ns}");

        // the original min log(1 - D) form: gradient vanishes at the same point
        let tape = Tape::new();
        let l = tape.watch(&Tensor::full(&[1], -20.0));
        let sat = l.softplus().unwrap().affine(-1.0, 0.0).unwrap().mean().unwrap();
        let g_sat = tape.backward(&sat).unwrap().get_data(&l).unwrap()[0];
        assert!(g_sat.abs() < 1e-6, "saturating gradient {g_sat}");
    }

    #[test]
    fn distillation_closed_forms() {
        let c = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.0, 1.0, -2.0]).unwrap();
        let lv = Tensor::zeros(&[2, 3]);
        let loss = distill_from_stats(&c, &c, &lv).unwrap().item() as f64;
        let expect = 1.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((loss - expect).abs() < 1e-5, "{loss} vs {expect}");

        let mut off = c.clone();
        off.update(|_, v| *v += 1.0);
        let loss = distill_from_stats(&c, &off, &lv).unwrap().item() as f64;
        assert!((loss - (expect + 1.5)).abs() < 1e-5, "{loss}");
    }

    #[test]
    fn distillation_batch_permutation_invariant() {
        let c = Tensor::new(vec![3, 2], vec![0.1, 0.2, -0.5, 1.0, 2.0, -1.5]).unwrap();
        let mu = Tensor::new(vec![3, 2], vec![0.0, 0.4, -0.1, 0.9, 1.5, -1.0]).unwrap();
        let lv = Tensor::new(vec![3, 2], vec![0.3, -0.2, 0.0, 0.5, -0.4, 0.1]).unwrap();
        let a = distill_from_stats(&c, &mu, &lv).unwrap().item();
        let perm = |t: &Tensor| {
            let d = t.data();
            Tensor::new(vec![3, 2], vec![d[4], d[5], d[0], d[1], d[2], d[3]]).unwrap()
        };
        let b = distill_from_stats(&perm(&c), &perm(&mu), &perm(&lv)).unwrap().item();
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn code_sample_from_zero_head_encoder_is_standard_normal() {
        let mut rng = SeededRng::new(1);
        let mut enc = Encoder::new(3, &mut rng);
        zero_head(&mut enc);
        let x = Tensor::full(&[4, 1, 64, 64], 0.5);
        let eps = rng.gaussian_tensor(&[4, 3]);
        let c = code_prior_sample(&enc, &x, &eps).unwrap();
        assert_eq!(c.dims(), &[4, 3]);
        assert_eq!(c.data(), eps.data());
        assert!(!c.is_taped());
        // eps shape mismatch
        assert!(code_prior_sample(&enc, &x, &Tensor::zeros(&[4, 2])).is_err());
    }

    #[test]
    fn distillation_gradients_reach_generator_only() {
        let mut rng = SeededRng::new(2);
        let enc = Encoder::new(3, &mut rng);
        let model = GanModel::new(4, 3, &mut rng);
        let noise = rng.gaussian_tensor(&[2, 4]);
        let c = rng.gaussian_tensor(&[2, 3]);

        let tape = Tape::new();
        let bound_g = model.generator.bind(&tape);
        let bound_d = model.discriminator.bind(&tape);
        let fake = bound_g.generate(&noise, &c).unwrap();
        // discriminator participates in the graph but not in the root
        let _ = bound_d.discriminate(&fake).unwrap();
        let distill = distillation_loss(&enc, &c, &fake).unwrap();
        let grads = tape.backward(&distill).unwrap();

        let g_nonzero = bound_g
            .named_params()
            .iter()
            .any(|(_, t)| grads.get_data(t).is_some_and(|g| g.iter().any(|&v| v != 0.0)));
        assert!(g_nonzero, "generator received no gradient");
        for (name, t) in bound_d.named_params() {
            if let Some(g) = grads.get_data(t) {
                assert!(
                    g.iter().all(|&v| v == 0.0),
                    "discriminator param {name} received gradient"
                );
            }
        }
    }

    fn tiny_config(dir: &Path, epochs: usize, lambda: f32) -> IdGanConfig {
        IdGanConfig {
            vae_checkpoint: dir.join("vae.dsnt"),
            noise_dim: 4,
            lambda,
            epochs,
            batch_size: 3,
            seed: 21,
            lattice: tiny_lattice(),
            ..IdGanConfig::default()
        }
    }

    fn write_tiny_vae(dir: &Path) -> Encoder {
        let mut rng = SeededRng::derived(5, TAG_INIT);
        let vae = VaeModel::new(3, &mut rng);
        vae.to_checkpoint(&[]).save(&dir.join("vae.dsnt")).unwrap();
        vae.encoder
    }

    #[test]
    fn zero_epochs_keeps_initialization_and_freezes_encoder() {
        let dir = tempfile::tempdir().unwrap();
        let encoder = write_tiny_vae(dir.path());
        let before = param_hash(&encoder);
        let run = train_idgan(&tiny_config(dir.path(), 0, 1.0), None).unwrap();
        assert!(run.log.records.is_empty());
        assert_eq!(param_hash(&encoder), before);
        let mut rng = SeededRng::derived(21, TAG_GAN_INIT);
        let fresh = GanModel::new(4, 3, &mut rng);
        for ((_, a), (_, b)) in run.model.named_params().iter().zip(fresh.named_params()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn short_run_is_deterministic_and_freezes_encoder() {
        let dir = tempfile::tempdir().unwrap();
        let encoder = write_tiny_vae(dir.path());
        let before = param_hash(&encoder);
        let config = tiny_config(dir.path(), 2, 1.0);
        let a = train_idgan_with_encoder(&config, &encoder, None).unwrap();
        let b = train_idgan_with_encoder(&config, &encoder, None).unwrap();
        assert_eq!(param_hash(&encoder), before);
        let strip = |log: &GanLog| -> Vec<(f64, f64, f64, f64, f64)> {
            log.records
                .iter()
                .map(|r| (r.d_loss, r.g_adv, r.distill, r.d_real_mean, r.d_fake_mean))
                .collect()
        };
        assert_eq!(strip(&a.log), strip(&b.log));
        for ((na, ta), (_, tb)) in a.model.named_params().iter().zip(b.model.named_params()) {
            assert_eq!(ta.data(), tb.data(), "{na} differs between runs");
        }
        assert!(a
            .log
            .records
            .iter()
            .all(|r| r.d_loss.is_finite()
                && r.g_adv.is_finite()
                && r.distill.is_finite()));
    }

    #[test]
    fn lambda_zero_still_logs_distillation() {
        let dir = tempfile::tempdir().unwrap();
        let encoder = write_tiny_vae(dir.path());
        let run = train_idgan_with_encoder(&tiny_config(dir.path(), 1, 0.0), &encoder, None)
            .unwrap();
        let r = &run.log.records[0];
        assert!(r.distill.is_finite() && r.distill != 0.0);
    }
}
