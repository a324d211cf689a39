//! Command implementations behind the `disent` binary: dataset generation,
//! both training steps, traversal rendering and metric evaluation. Each
//! command echoes its fully-resolved settings into the output directory.

use std::path::{Path, PathBuf};

use crate::config::{lattice_to_keys, take_lattice, write_resolved, KvConfig};
use crate::dsprites::{reduced_lattice, Dataset, NUM_POSITIONS};
use crate::error::{Error, Result};
use crate::idgan::{train_idgan, IdGanConfig};
use crate::metrics::{
    fvm, mig, recon_stats, EncoderCodes, FvmParams, MetricReport, MigParams, RepresentationTable,
};
use crate::models::{Checkpoint, GanModel, VaeModel};
use crate::tensor::rng::SeededRng;
use crate::traversal::{
    generalization_probe, grid_pixel_size, render_traversal_decoder, render_traversal_generator,
    write_grid, TraversalSpec,
};
use crate::vae::{train_vae, VaeConfig};

/// Noise stream tag for generator-mode traversal.
const TAG_TRAVERSE_NOISE: u64 = 20;

pub fn cmd_gen_data(spec_path: Option<&Path>, out: &Path) -> Result<()> {
    let mut cfg = match spec_path {
        Some(p) => KvConfig::load(p)?,
        None => KvConfig::default(),
    };
    let lattice = take_lattice(&mut cfg)?;
    let threshold: usize = cfg.take_or("position_threshold", NUM_POSITIONS)?;
    let seed: u64 = cfg.take_or("seed", 0)?;
    cfg.finish()?;
    let view = reduced_lattice(&lattice, Some(threshold), seed)?;
    println!("{}", view.len());
    let dataset = Dataset::materialize(&view)?;
    dataset.save(out)?;
    log::info!("gen-data: wrote {} images to {}", dataset.len(), out.display());
    Ok(())
}

fn take_vae_config(cfg: &mut KvConfig) -> Result<(VaeConfig, PathBuf)> {
    let output_dir: PathBuf = cfg.take_required("output_dir")?;
    let defaults = VaeConfig::default();
    let config = VaeConfig {
        latent_dim: cfg.take_required("latent_dim")?,
        beta: cfg.take_or("beta", defaults.beta)?,
        learning_rate: cfg.take_or("learning_rate", defaults.learning_rate)?,
        position_threshold: cfg.take_or("position_threshold", defaults.position_threshold)?,
        epochs: cfg.take_or("epochs", defaults.epochs)?,
        batch_size: cfg.take_or("batch_size", defaults.batch_size)?,
        seed: cfg.take_or("seed", defaults.seed)?,
        lattice: take_lattice(cfg)?,
        checkpoint_every: cfg.take_or("checkpoint_every", defaults.checkpoint_every)?,
    };
    Ok((config, output_dir))
}

pub fn cmd_train_vae(config_path: &Path) -> Result<()> {
    let mut cfg = KvConfig::load(config_path)?;
    let (config, output_dir) = take_vae_config(&mut cfg)?;
    cfg.finish()?;
    config.validate()?;
    let mut resolved = config.meta();
    resolved.push(("latent_dim".into(), config.latent_dim.to_string()));
    resolved.push(("checkpoint_every".into(), config.checkpoint_every.to_string()));
    resolved.extend(lattice_to_keys(&config.lattice));
    resolved.push(("output_dir".into(), output_dir.display().to_string()));
    write_resolved(&output_dir, &resolved)?;
    let run = train_vae(&config, Some(&output_dir))?;
    if let Some(last) = run.log.records.last() {
        println!(
            "epoch {} recon={:.4} kl={:.4} total={:.4}",
            last.epoch, last.recon, last.kl, last.total
        );
    }
    println!(
        "checkpoint {}",
        run.final_checkpoint.expect("out_dir given").display()
    );
    Ok(())
}

fn take_idgan_config(cfg: &mut KvConfig, vae_checkpoint: &Path) -> Result<(IdGanConfig, PathBuf)> {
    let output_dir: PathBuf = cfg.take_required("output_dir")?;
    let defaults = IdGanConfig::default();
    let config = IdGanConfig {
        vae_checkpoint: vae_checkpoint.to_path_buf(),
        noise_dim: cfg.take_or("noise_dim", defaults.noise_dim)?,
        lambda: cfg.take_or("lambda", defaults.lambda)?,
        g_learning_rate: cfg.take_or("g_learning_rate", defaults.g_learning_rate)?,
        d_learning_rate: cfg.take_or("d_learning_rate", defaults.d_learning_rate)?,
        epochs: cfg.take_or("epochs", defaults.epochs)?,
        batch_size: cfg.take_or("batch_size", defaults.batch_size)?,
        seed: cfg.take_or("seed", defaults.seed)?,
        lattice: take_lattice(cfg)?,
        position_threshold: cfg.take_or("position_threshold", defaults.position_threshold)?,
        checkpoint_every: cfg.take_or("checkpoint_every", defaults.checkpoint_every)?,
    };
    Ok((config, output_dir))
}

pub fn cmd_train_idgan(config_path: &Path, vae_checkpoint: &Path) -> Result<()> {
    let mut cfg = KvConfig::load(config_path)?;
    let (config, output_dir) = take_idgan_config(&mut cfg, vae_checkpoint)?;
    cfg.finish()?;
    config.validate()?;
    let mut resolved = config.meta();
    resolved.push(("noise_dim".into(), config.noise_dim.to_string()));
    resolved.push(("checkpoint_every".into(), config.checkpoint_every.to_string()));
    resolved.push((
        "vae_checkpoint".into(),
        config.vae_checkpoint.display().to_string(),
    ));
    resolved.extend(lattice_to_keys(&config.lattice));
    resolved.push(("output_dir".into(), output_dir.display().to_string()));
    write_resolved(&output_dir, &resolved)?;
    let run = train_idgan(&config, Some(&output_dir))?;
    if let Some(last) = run.log.records.last() {
        println!(
            "epoch {} d_loss={:.4} g_adv={:.4} distill={:.4}",
            last.epoch, last.d_loss, last.g_adv, last.distill
        );
    }
    for w in &run.log.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "checkpoint {}",
        run.final_checkpoint.expect("out_dir given").display()
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraverseMode {
    Decoder,
    Generator,
}

/// `lo..hi` sweeps inclusively; `lo..<hi` excludes the upper bound.
pub fn parse_range(s: &str) -> Result<(f32, f32, bool)> {
    let (lo, rest) = s
        .split_once("..")
        .ok_or_else(|| Error::Config(format!("range must be lo..hi or lo..<hi, got {s:?}")))?;
    let (hi, inclusive) = match rest.strip_prefix('<') {
        Some(hi) => (hi, false),
        None => (rest, true),
    };
    let parse = |v: &str| -> Result<f32> {
        v.trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad range bound {v:?}")))
    };
    Ok((parse(lo)?, parse(hi)?, inclusive))
}

pub fn cmd_traverse(
    checkpoint: &Path,
    mode: TraverseMode,
    range: &str,
    step: f32,
    out: &Path,
    seed: u64,
) -> Result<()> {
    let (lo, hi, inclusive) = parse_range(range)?;
    let ck = Checkpoint::load(checkpoint)?;
    std::fs::create_dir_all(out)?;
    let (grid, threshold) = match mode {
        TraverseMode::Decoder => {
            let model = VaeModel::from_checkpoint(&ck)?;
            let spec = TraversalSpec {
                lo,
                hi,
                inclusive,
                step,
                code_dim: model.latent_dim(),
            };
            let t = ck.meta_usize("position_threshold").ok();
            (render_traversal_decoder(&model.decoder, &spec)?, t)
        }
        TraverseMode::Generator => {
            let model = GanModel::from_checkpoint(&ck)?;
            let spec = TraversalSpec {
                lo,
                hi,
                inclusive,
                step,
                code_dim: model.generator.code_dim,
            };
            let mut rng = SeededRng::derived(seed, TAG_TRAVERSE_NOISE);
            let noise: Vec<f32> = (0..model.generator.noise_dim)
                .map(|_| rng.standard_normal())
                .collect();
            let t = ck.meta_usize("position_threshold").ok();
            (
                render_traversal_generator(&model.generator, &spec, &noise)?,
                t,
            )
        }
    };
    write_grid(&grid, &out.join("traversal.pgm"))?;
    std::fs::write(out.join("codes.csv"), crate::traversal::codes_csv(&grid))?;
    if let Some(t) = threshold.filter(|&t| t < NUM_POSITIONS) {
        let report = generalization_probe(&grid, t)?;
        std::fs::write(out.join("probe.txt"), report.to_text())?;
    }
    let resolved = vec![
        ("checkpoint".into(), checkpoint.display().to_string()),
        (
            "mode".into(),
            match mode {
                TraverseMode::Decoder => "decoder".into(),
                TraverseMode::Generator => "generator".to_string(),
            },
        ),
        ("range".into(), range.to_string()),
        ("step".into(), step.to_string()),
        ("seed".into(), seed.to_string()),
    ];
    write_resolved(out, &resolved)?;
    let (w, h) = grid_pixel_size(grid.rows, grid.cols);
    println!("{} codes, {}x{} grid, {}x{} px", grid.codes.len(), grid.rows, grid.cols, w, h);
    Ok(())
}

pub fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    seed: u64,
    num_votes: usize,
    samples_per_vote: usize,
    num_bins: usize,
) -> Result<()> {
    let model = VaeModel::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let dataset = Dataset::load(data)?;
    let view = dataset.view(seed)?;
    std::fs::create_dir_all(out)?;

    let source = EncoderCodes {
        encoder: &model.encoder,
    };
    let table = RepresentationTable::from_source(&source, &view)?;
    table.write_csv(&out.join("representation.csv"))?;

    let fvm_report = fvm(
        &source,
        &view,
        &FvmParams {
            num_votes,
            samples_per_vote,
            seed,
        },
    )?;
    let mig_report = mig(&table, &MigParams { num_bins })?;
    let recon = recon_stats(&model, &view)?;
    std::fs::write(out.join("mi.csv"), mig_report.mi_csv())?;

    let report = MetricReport {
        fvm_accuracy: fvm_report.accuracy,
        fvm_excluded: fvm_report.excluded_factors,
        mig_score: mig_report.score,
        mi: mig_report.mi,
        recon,
        table_rows: table.len(),
        num_votes,
        samples_per_vote,
        num_bins,
        seed,
    };
    std::fs::write(out.join("metrics.txt"), report.to_text())?;
    let resolved = vec![
        ("checkpoint".into(), checkpoint.display().to_string()),
        ("data".into(), data.display().to_string()),
        ("seed".into(), seed.to_string()),
        ("num_votes".into(), num_votes.to_string()),
        ("samples_per_vote".into(), samples_per_vote.to_string()),
        ("num_bins".into(), num_bins.to_string()),
    ];
    write_resolved(out, &resolved)?;
    println!(
        "fvm={:.4} mig={:.4} bce_per_pixel={:.4}",
        report.fvm_accuracy, report.mig_score, report.recon.bce_per_pixel
    );
    Ok(())
}
