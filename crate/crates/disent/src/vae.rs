//! Variational autoencoder training: reparameterized sampling, closed-form
//! KL against the standard-normal prior, Bernoulli reconstruction in logit
//! space, and the beta-weighted objective minimized over a factor lattice.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::dsprites::{reduced_lattice, Dataset, LatticeSpec, NUM_POSITIONS};
use crate::error::{Error, Result};
use crate::models::{apply_grads, Net, VaeModel};
use crate::tensor::optim::Optimizer;
use crate::tensor::rng::SeededRng;
use crate::tensor::{Tape, Tensor};

/// Sweep grid used by the experiments: every combination of these values.
pub const SWEEP_LATENT_DIMS: [usize; 3] = [3, 5, 10];
pub const SWEEP_BETAS: [f32; 3] = [0.5, 5.0, 100.0];
pub const SWEEP_LEARNING_RATES: [f32; 2] = [1e-4, 1e-5];
pub const SWEEP_POSITION_THRESHOLDS: [usize; 3] = [5, 16, 32];
pub const DEFAULT_EPOCHS: usize = 100;
pub const DEFAULT_BATCH_SIZE: usize = 256;
pub const DEFAULT_CHECKPOINT_EVERY: usize = 25;

// derived-stream tags, shared with the GAN trainer
pub(crate) const TAG_INIT: u64 = 0;
pub(crate) const TAG_EPS: u64 = 1;
pub(crate) const TAG_SHUFFLE: u64 = 2;

#[derive(Debug, Clone)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub beta: f32,
    pub learning_rate: f32,
    /// Largest pos_x label kept in the training view (0-based inclusive);
    /// 32 keeps the full position range.
    pub position_threshold: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lattice: LatticeSpec,
    pub checkpoint_every: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            latent_dim: SWEEP_LATENT_DIMS[0],
            beta: SWEEP_BETAS[0],
            learning_rate: SWEEP_LEARNING_RATES[0],
            position_threshold: NUM_POSITIONS,
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
            seed: 0,
            lattice: LatticeSpec::default(),
            checkpoint_every: DEFAULT_CHECKPOINT_EVERY,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be >= 1".into()));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::Config(format!(
                "beta must be finite and >= 0, got {}",
                self.beta
            )));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be finite and > 0, got {}",
                self.learning_rate
            )));
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
            ("beta".into(), format!("{}", self.beta)),
            ("learning_rate".into(), format!("{}", self.learning_rate)),
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
pub struct EpochRecord {
    pub epoch: usize,
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
    pub seconds: f64,
}

pub const TRAINING_LOG_HEADER: &str = "epoch,recon,kl,total,seconds";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<EpochRecord>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRAINING_LOG_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.3}\n",
                r.epoch, r.recon, r.kl, r.total, r.seconds
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// z = mu + exp(log_var / 2) * eps, the differentiable sampling path.
pub fn reparameterize(mu: &Tensor, log_var: &Tensor, eps: &Tensor) -> Result<Tensor> {
    if mu.dims() != log_var.dims() || mu.dims() != eps.dims() {
        return Err(Error::ShapeMismatch {
            op: "reparameterize",
            lhs: mu.dims().to_vec(),
            rhs: eps.dims().to_vec(),
        });
    }
    let std = log_var.affine(0.5, 0.0)?.exp()?;
    mu.add(&std.mul(eps)?)
}

/// KL(q || N(0, I)) summed over latent dims, averaged over the batch:
/// -1/2 sum_d (1 + log_var - mu^2 - exp(log_var)).
pub fn kl_standard_normal(mu: &Tensor, log_var: &Tensor) -> Result<Tensor> {
    if mu.dims() != log_var.dims() {
        return Err(Error::ShapeMismatch {
            op: "kl_standard_normal",
            lhs: mu.dims().to_vec(),
            rhs: log_var.dims().to_vec(),
        });
    }
    let n = mu.dims().first().copied().unwrap_or(1) as f32;
    let inner = log_var
        .affine(1.0, 1.0)?
        .sub(&mu.mul(mu)?)?
        .sub(&log_var.exp()?)?;
    inner.sum()?.affine(-0.5 / n, 0.0)
}

/// Bernoulli negative log-likelihood in logit space, summed over pixels and
/// averaged over the batch: softplus(l) - l * t per element.
pub fn bernoulli_recon_loss(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    if logits.dims() != target.dims() {
        return Err(Error::ShapeMismatch {
            op: "bernoulli_recon_loss",
            lhs: logits.dims().to_vec(),
            rhs: target.dims().to_vec(),
        });
    }
    if target.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Domain {
            op: "bernoulli_recon_loss",
            msg: "target pixels must lie in [0, 1]".into(),
        });
    }
    let n = logits.dims().first().copied().unwrap_or(1) as f32;
    let per_elem = logits.softplus()?.sub(&logits.mul(target)?)?;
    per_elem.sum()?.affine(1.0 / n, 0.0)
}

pub struct VaeLossTerms {
    pub total: Tensor,
    pub recon: Tensor,
    pub kl: Tensor,
}

/// One forward pass of the full objective: encode, sample, decode, then
/// total = recon + beta * kl. With beta = 0 total aliases recon exactly.
pub fn beta_vae_loss(
    model: &VaeModel,
    x: &Tensor,
    eps: &Tensor,
    beta: f32,
) -> Result<VaeLossTerms> {
    let (mu, log_var) = model.encoder.encode(x)?;
    let z = reparameterize(&mu, &log_var, eps)?;
    let logits = model.decoder.decode(&z)?;
    let recon = bernoulli_recon_loss(&logits, x)?;
    let kl = kl_standard_normal(&mu, &log_var)?;
    let total = if beta == 0.0 {
        recon.clone()
    } else {
        recon.add(&kl.affine(beta, 0.0)?)?
    };
    Ok(VaeLossTerms { total, recon, kl })
}

/// Artifacts produced by [`train_vae`]; checkpoints carry optimizer state so
/// runs can be inspected or resumed.
pub struct VaeRun {
    pub model: VaeModel,
    pub log: TrainingLog,
    pub final_checkpoint: Option<PathBuf>,
}

/// Full training loop. When `out_dir` is given, a checkpoint lands there
/// every `checkpoint_every` epochs plus at the end, and the log CSV is
/// appended to after each epoch.
pub fn train_vae(config: &VaeConfig, out_dir: Option<&Path>) -> Result<VaeRun> {
    config.validate()?;
    let view = reduced_lattice(
        &config.lattice,
        Some(config.position_threshold),
        crate::tensor::rng::mix_seed(config.seed, TAG_SHUFFLE),
    )?;
    let dataset = Dataset::materialize(&view)?;
    log::info!(
        "vae: training on {} images, latent_dim={}, beta={}, lr={}, epochs={}",
        dataset.len(),
        config.latent_dim,
        config.beta,
        config.learning_rate,
        config.epochs
    );

    let mut init_rng = SeededRng::derived(config.seed, TAG_INIT);
    let mut eps_rng = SeededRng::derived(config.seed, TAG_EPS);
    let mut model = VaeModel::new(config.latent_dim, &mut init_rng);
    let mut opt = Optimizer::adam(config.learning_rate);

    let mut log = TrainingLog::default();
    let mut csv = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("vae_log.csv"))?);
            writeln!(f, "{TRAINING_LOG_HEADER}")?;
            Some(f)
        }
        None => None,
    };

    for epoch in 0..config.epochs {
        let start = Instant::now();
        let (mut recon_sum, mut kl_sum, mut total_sum, mut seen) = (0f64, 0f64, 0f64, 0usize);
        for (bi, batch) in view.batches(config.batch_size, epoch)?.iter().enumerate() {
            let x = dataset.batch_images(batch)?;
            let n = batch.len();
            let eps = eps_rng.gaussian_tensor(&[n, config.latent_dim]);
            let step = (|| -> Result<(f64, f64, f64)> {
                let tape = Tape::new();
                let bound = model.bind(&tape);
                let terms = beta_vae_loss(&bound, &x, &eps, config.beta)?;
                let (r, k, t) = (
                    terms.recon.item() as f64,
                    terms.kl.item() as f64,
                    terms.total.item() as f64,
                );
                let grads = tape.backward(&terms.total)?;
                apply_grads(&mut opt, &mut model, &bound, &grads)?;
                Ok((r, k, t))
            })();
            let (r, k, t) = step.map_err(|e| match e {
                Error::NonFinite { op } => Error::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    detail: format!("op {op} produced a non-finite value"),
                },
                other => other,
            })?;
            recon_sum += r * n as f64;
            kl_sum += k * n as f64;
            total_sum += t * n as f64;
            seen += n;
        }
        let record = EpochRecord {
            epoch,
            recon: recon_sum / seen as f64,
            kl: kl_sum / seen as f64,
            total: total_sum / seen as f64,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::debug!(
            "vae epoch {}: recon={:.4} kl={:.4} total={:.4}",
            record.epoch,
            record.recon,
            record.kl,
            record.total
        );
        if let Some(f) = csv.as_mut() {
            writeln!(
                f,
                "{},{:.6},{:.6},{:.6},{:.3}",
                record.epoch, record.recon, record.kl, record.total, record.seconds
            )?;
            f.flush()?;
        }
        log.records.push(record);
        if let Some(dir) = out_dir {
            if (epoch + 1) % config.checkpoint_every == 0 && epoch + 1 != config.epochs {
                save_vae_checkpoint(&model, &opt, config, epoch + 1, &dir.join(format!(
                    "vae_epoch_{:04}.dsnt",
                    epoch + 1
                )))?;
            }
        }
    }

    let final_checkpoint = match out_dir {
        Some(dir) => {
            let path = dir.join("vae_final.dsnt");
            save_vae_checkpoint(&model, &opt, config, config.epochs, &path)?;
            Some(path)
        }
        None => None,
    };
    Ok(VaeRun {
        model,
        log,
        final_checkpoint,
    })
}

pub fn save_vae_checkpoint(
    model: &VaeModel,
    opt: &Optimizer,
    config: &VaeConfig,
    epoch: usize,
    path: &Path,
) -> Result<()> {
    let mut meta = config.meta();
    meta.push(("epoch".into(), epoch.to_string()));
    let mut ck = model.to_checkpoint(&meta);
    ck.push_optimizer(opt);
    ck.save(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsprites::FactorSel;
    use crate::models::zero_head;
    use proptest::prelude::*;

    fn tiny_lattice() -> LatticeSpec {
        // single image: square, mid scale, upright, centered
        LatticeSpec {
            sels: [
                FactorSel::fixed(0),
                FactorSel::fixed(3),
                FactorSel::fixed(0),
                FactorSel::fixed(15),
                FactorSel::fixed(15),
            ],
        }
    }

    #[test]
    fn reparameterize_identities() {
        let mu = Tensor::new(vec![1, 2], vec![0.3, -0.7]).unwrap();
        let lv = Tensor::zeros(&[1, 2]);
        let zero = Tensor::zeros(&[1, 2]);
        // eps = 0 -> z = mu
        let z = reparameterize(&mu, &lv, &zero).unwrap();
        assert_eq!(z.data(), mu.data());
        // mu = 0, log_var = 0 -> z = eps
        let eps = Tensor::new(vec![1, 2], vec![1.5, -2.5]).unwrap();
        let z = reparameterize(&zero, &lv, &eps).unwrap();
        assert_eq!(z.data(), eps.data());
        // mu = 1, log_var = ln 4, eps = 0.5 -> z = 1 + 2 * 0.5 = 2
        let mu = Tensor::full(&[1, 1], 1.0);
        let lv = Tensor::full(&[1, 1], 4f32.ln());
        let eps = Tensor::full(&[1, 1], 0.5);
        let z = reparameterize(&mu, &lv, &eps).unwrap();
        assert!((z.item() - 2.0).abs() < 1e-6);
        // dims mismatch
        assert!(reparameterize(&mu, &lv, &Tensor::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn kl_closed_forms() {
        let zero = Tensor::zeros(&[1, 1]);
        assert_eq!(kl_standard_normal(&zero, &zero).unwrap().item(), 0.0);
        let mu = Tensor::full(&[1, 1], 1.0);
        let kl = kl_standard_normal(&mu, &zero).unwrap().item();
        assert!((kl - 0.5).abs() < 1e-6, "{kl}");
        let lv = Tensor::full(&[1, 1], 4f32.ln());
        let kl = kl_standard_normal(&zero, &lv).unwrap().item();
        let expect = 0.5 * (4.0 - 1.0 - 4f64.ln());
        assert!((kl as f64 - expect).abs() < 1e-6, "{kl} vs {expect}");
    }

    /// Monte-Carlo estimate of KL(N(mu, var) || N(0, 1)) from 10^6 samples,
    /// accumulated in f64.
    fn mc_kl(mu: f64, log_var: f64, rng: &mut SeededRng) -> f64 {
        let std = (0.5 * log_var).exp();
        let n = 1_000_000;
        let mut acc = 0f64;
        for _ in 0..n {
            let e = rng.standard_normal() as f64;
            let z = mu + std * e;
            // log q(z) - log p(z); the sqrt(2 pi) terms cancel
            let log_q = -0.5 * log_var - 0.5 * e * e;
            let log_p = -0.5 * z * z;
            acc += log_q - log_p;
        }
        acc / n as f64
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mut rng = SeededRng::new(42);
        for (mu, lv) in [(0.0, 4f64.ln()), (1.0, 0.0), (-0.8, 0.9), (2.0, -1.5)] {
            let closed = kl_standard_normal(
                &Tensor::full(&[1, 1], mu as f32),
                &Tensor::full(&[1, 1], lv as f32),
            )
            .unwrap()
            .item() as f64;
            let est = mc_kl(mu, lv, &mut rng);
            let denom = closed.abs().max(0.05);
            assert!(
                (closed - est).abs() / denom < 0.01,
                "mu={mu} lv={lv}: closed {closed} vs mc {est}"
            );
        }
    }

    #[test]
    fn recon_loss_closed_forms() {
        // zero logits: ln 2 per pixel over a 64x64 image
        let logits = Tensor::zeros(&[1, 1, 64, 64]);
        let target = Tensor::full(&[1, 1, 64, 64], 1.0);
        let loss = bernoulli_recon_loss(&logits, &target).unwrap().item();
        let expect = 4096.0 * std::f64::consts::LN_2;
        assert!((loss as f64 - expect).abs() < 0.01, "{loss} vs {expect}");

        // saturated correct predictions
        let mut l = vec![50f32; 4096];
        let mut t = vec![1f32; 4096];
        for i in 0..2048 {
            l[i] = -50.0;
            t[i] = 0.0;
        }
        let loss = bernoulli_recon_loss(
            &Tensor::new(vec![1, 1, 64, 64], l).unwrap(),
            &Tensor::new(vec![1, 1, 64, 64], t).unwrap(),
        )
        .unwrap()
        .item();
        assert!(loss < 1e-8, "{loss}");

        // one confidently wrong pixel contributes about its logit magnitude
        let mut l = vec![-50f32; 4096];
        l[7] = 50.0;
        let t = vec![0f32; 4096];
        let loss = bernoulli_recon_loss(
            &Tensor::new(vec![1, 1, 64, 64], l).unwrap(),
            &Tensor::new(vec![1, 1, 64, 64], t).unwrap(),
        )
        .unwrap()
        .item();
        assert!((loss - 50.0).abs() < 1e-3, "{loss}");

        // out-of-range target rejected
        let bad = Tensor::full(&[1, 1, 64, 64], 1.5);
        assert!(bernoulli_recon_loss(&logits, &bad).is_err());
    }

    #[test]
    fn beta_zero_total_equals_recon_and_zero_head_kl() {
        let mut rng = SeededRng::new(3);
        let mut model = VaeModel::new(3, &mut rng);
        let x = Tensor::full(&[2, 1, 64, 64], 1.0);
        let eps = Tensor::zeros(&[2, 3]);
        let terms = beta_vae_loss(&model, &x, &eps, 0.0).unwrap();
        assert_eq!(terms.total.item(), terms.recon.item());

        zero_head(&mut model.encoder);
        let terms = beta_vae_loss(&model, &x, &eps, 1.0).unwrap();
        assert_eq!(terms.kl.item(), 0.0);
        assert_eq!(terms.total.item(), terms.recon.item());
    }

    #[test]
    fn total_is_affine_in_beta_with_slope_kl() {
        let mut rng = SeededRng::new(4);
        let model = VaeModel::new(3, &mut rng);
        let x = Tensor::full(&[2, 1, 64, 64], 0.5);
        let eps = rng.gaussian_tensor(&[2, 3]);
        let t1 = beta_vae_loss(&model, &x, &eps, 0.5).unwrap();
        let t2 = beta_vae_loss(&model, &x, &eps, 100.0).unwrap();
        let kl = t1.kl.item() as f64;
        let diff = t2.total.item() as f64 - t1.total.item() as f64;
        let expect = (100.0 - 0.5) * kl;
        assert!(
            (diff - expect).abs() <= 1e-4 * expect.abs().max(1.0),
            "{diff} vs {expect}"
        );
    }

    #[test]
    fn overfits_single_image() {
        let config = VaeConfig {
            latent_dim: 3,
            beta: 0.5,
            learning_rate: 1e-3,
            epochs: 500,
            batch_size: 1,
            seed: 7,
            lattice: tiny_lattice(),
            ..VaeConfig::default()
        };
        let run = train_vae(&config, None).unwrap();
        let final_recon = run.log.records.last().unwrap().recon;
        assert!(
            final_recon / 4096.0 < 0.05,
            "final recon per pixel {} not < 0.05",
            final_recon / 4096.0
        );
    }

    #[test]
    fn zero_epochs_keeps_initialization() {
        let config = VaeConfig {
            latent_dim: 3,
            epochs: 0,
            batch_size: 1,
            seed: 9,
            lattice: tiny_lattice(),
            ..VaeConfig::default()
        };
        let run = train_vae(&config, None).unwrap();
        assert!(run.log.records.is_empty());
        let mut rng = SeededRng::derived(9, TAG_INIT);
        let fresh = VaeModel::new(3, &mut rng);
        for ((_, a), (_, b)) in run.model.named_params().iter().zip(fresh.named_params()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn same_seed_same_checkpoint() {
        let config = VaeConfig {
            latent_dim: 3,
            epochs: 2,
            batch_size: 1,
            seed: 11,
            lattice: tiny_lattice(),
            ..VaeConfig::default()
        };
        let a = train_vae(&config, None).unwrap();
        let b = train_vae(&config, None).unwrap();
        for ((na, ta), (nb, tb)) in a.model.named_params().iter().zip(b.model.named_params()) {
            assert_eq!(na, &nb);
            assert_eq!(ta.data(), tb.data(), "{na} differs between runs");
        }
        let strip = |log: &TrainingLog| -> Vec<(usize, f64, f64, f64)> {
            log.records
                .iter()
                .map(|r| (r.epoch, r.recon, r.kl, r.total))
                .collect()
        };
        assert_eq!(strip(&a.log), strip(&b.log));
    }

    #[test]
    fn runaway_learning_rate_aborts_with_diagnostics() {
        let config = VaeConfig {
            latent_dim: 3,
            learning_rate: 1e30,
            epochs: 20,
            batch_size: 1,
            seed: 13,
            lattice: tiny_lattice(),
            ..VaeConfig::default()
        };
        match train_vae(&config, None) {
            Err(Error::NonFiniteLoss { .. }) => {}
            Err(e) => panic!("expected NonFiniteLoss, got {e}"),
            Ok(run) => {
                // if every op stayed finite, all logged values must be too
                assert!(run
                    .log
                    .records
                    .iter()
                    .all(|r| r.total.is_finite() && r.recon.is_finite() && r.kl.is_finite()));
            }
        }
    }

    #[test]
    fn checkpoint_files_written() {
        let dir = tempfile::tempdir().unwrap();
        let config = VaeConfig {
            latent_dim: 3,
            epochs: 3,
            batch_size: 1,
            seed: 15,
            lattice: tiny_lattice(),
            checkpoint_every: 2,
            ..VaeConfig::default()
        };
        let run = train_vae(&config, Some(dir.path())).unwrap();
        assert!(dir.path().join("vae_epoch_0002.dsnt").exists());
        assert!(dir.path().join("vae_final.dsnt").exists());
        let csv = std::fs::read_to_string(dir.path().join("vae_log.csv")).unwrap();
        assert!(csv.starts_with(TRAINING_LOG_HEADER));
        assert_eq!(csv.lines().count(), 4);
        assert_eq!(run.log.to_csv().lines().count(), 4);
        // saved checkpoint reproduces the in-memory model
        let ck = crate::models::Checkpoint::load(&dir.path().join("vae_final.dsnt")).unwrap();
        let loaded = VaeModel::from_checkpoint(&ck).unwrap();
        for ((_, a), (_, b)) in run.model.named_params().iter().zip(loaded.named_params()) {
            assert_eq!(a.data(), b.data());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn kl_is_nonnegative(
            mu in proptest::collection::vec(-5f32..5.0, 4),
            lv in proptest::collection::vec(-10f32..10.0, 4),
        ) {
            let mu = Tensor::new(vec![1, 4], mu).unwrap();
            let lv = Tensor::new(vec![1, 4], lv).unwrap();
            let kl = kl_standard_normal(&mu, &lv).unwrap().item();
            prop_assert!(kl >= -1e-6, "kl = {kl}");
        }
    }
}
