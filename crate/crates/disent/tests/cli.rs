//! End-to-end exercises of the `disent` binary: a miniature pipeline from
//! dataset generation through both training stages, traversal and metrics,
//! plus the error paths that must reach the user with a clear message.

use std::path::Path;
use std::process::{Command, Output};

fn disent(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_disent"))
        .args(args)
        .output()
        .expect("binary should launch")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_ok(out: &Output, context: &str) {
    assert!(
        out.status.success(),
        "{context} failed\nstdout: {}\nstderr: {}",
        stdout(out),
        stderr(out)
    );
}

#[test]
fn pipeline_end_to_end_miniature() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    // A 16-image lattice: one shape, one scale, one orientation, 4x4 grid
    // of positions.
    let spec = root.join("lattice.txt");
    std::fs::write(
        &spec,
        "shape=0\nscale=0\norientation=0\npos_x=0:32:8\npos_y=0:32:8\n",
    )
    .unwrap();
    let data = root.join("mini.dspr");
    let out = disent(&[
        "gen-data",
        "--spec",
        spec.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
    ]);
    assert_ok(&out, "gen-data");
    assert_eq!(stdout(&out).trim(), "16");
    assert!(data.is_file());

    // One epoch of VAE training on the same lattice.
    let vae_dir = root.join("vae");
    let vae_cfg = root.join("vae.txt");
    std::fs::write(
        &vae_cfg,
        format!(
            "output_dir={}\nlatent_dim=2\nbeta=1\nepochs=1\nbatch_size=8\nseed=7\n\
             position_threshold=16\n\
             shape=0\nscale=0\norientation=0\npos_x=0:32:8\npos_y=0:32:8\n",
            vae_dir.display()
        ),
    )
    .unwrap();
    let out = disent(&["train-vae", "--config", vae_cfg.to_str().unwrap()]);
    assert_ok(&out, "train-vae");
    let vae_ckpt = vae_dir.join("vae_final.dsnt");
    assert!(vae_ckpt.is_file());
    assert!(vae_dir.join("vae_log.csv").is_file());
    let resolved = std::fs::read_to_string(vae_dir.join("resolved_config.txt")).unwrap();
    assert!(resolved.contains("latent_dim=2"));
    assert!(resolved.contains("pos_x=0:32:8"));
    assert!(stdout(&out).contains("checkpoint"));

    // Decoder traversal: range -1..1 step 1 gives 3 values per dimension,
    // 9 codes in a 3x3 grid of 64-px tiles with 2-px gutters.
    let trav_dir = root.join("trav");
    let out = disent(&[
        "traverse",
        "--checkpoint",
        vae_ckpt.to_str().unwrap(),
        "--range",
        "-1..1",
        "--step",
        "1",
        "--out",
        trav_dir.to_str().unwrap(),
    ]);
    assert_ok(&out, "traverse decoder");
    assert!(stdout(&out).contains("9 codes, 3x3 grid, 196x196 px"));
    let pgm = std::fs::read(trav_dir.join("traversal.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5"));
    let codes = std::fs::read_to_string(trav_dir.join("codes.csv")).unwrap();
    assert!(codes.lines().next().unwrap().starts_with("row,col,code_0"));
    // Trained with position_threshold=16, so the traversal reports how many
    // rendered sprites sit beyond the held-out boundary.
    assert!(trav_dir.join("probe.txt").is_file());

    // One epoch of GAN training distilled from that checkpoint.
    let gan_dir = root.join("gan");
    let gan_cfg = root.join("gan.txt");
    std::fs::write(
        &gan_cfg,
        format!(
            "output_dir={}\nnoise_dim=4\nepochs=1\nbatch_size=8\nseed=7\n\
             position_threshold=16\n\
             shape=0\nscale=0\norientation=0\npos_x=0:32:8\npos_y=0:32:8\n",
            gan_dir.display()
        ),
    )
    .unwrap();
    let out = disent(&[
        "train-idgan",
        "--config",
        gan_cfg.to_str().unwrap(),
        "--vae-checkpoint",
        vae_ckpt.to_str().unwrap(),
    ]);
    assert_ok(&out, "train-idgan");
    let gan_ckpt = gan_dir.join("gan_final.dsnt");
    assert!(gan_ckpt.is_file());
    assert!(gan_dir.join("gan_log.csv").is_file());

    // Generator traversal reuses one noise vector across the whole grid.
    let gtrav_dir = root.join("gtrav");
    let out = disent(&[
        "traverse",
        "--checkpoint",
        gan_ckpt.to_str().unwrap(),
        "--mode",
        "generator",
        "--range",
        "-1..1",
        "--step",
        "1",
        "--out",
        gtrav_dir.to_str().unwrap(),
        "--seed",
        "3",
    ]);
    assert_ok(&out, "traverse generator");
    let codes = std::fs::read_to_string(gtrav_dir.join("codes.csv")).unwrap();
    assert!(codes.starts_with("# noise="), "{codes}");

    // Metrics on the miniature run. The lattice only varies pos_x and pos_y,
    // so FVM votes only over those two factors.
    let eval_dir = root.join("eval");
    let out = disent(&[
        "eval",
        "--checkpoint",
        vae_ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
        "--num-votes",
        "50",
        "--samples-per-vote",
        "10",
        "--num-bins",
        "4",
    ]);
    assert_ok(&out, "eval");
    for f in ["metrics.txt", "mi.csv", "representation.csv", "resolved_config.txt"] {
        assert!(eval_dir.join(f).is_file(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(eval_dir.join("metrics.txt")).unwrap();
    assert!(metrics.contains("fvm_accuracy="), "{metrics}");
    assert!(metrics.contains("mig="), "{metrics}");

    // Same seed, same inputs: the evaluation artifacts are bit-identical.
    let eval2_dir = root.join("eval2");
    let out = disent(&[
        "eval",
        "--checkpoint",
        vae_ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        eval2_dir.to_str().unwrap(),
        "--num-votes",
        "50",
        "--samples-per-vote",
        "10",
        "--num-bins",
        "4",
    ]);
    assert_ok(&out, "eval rerun");
    let metrics2 = std::fs::read_to_string(eval2_dir.join("metrics.txt")).unwrap();
    assert_eq!(metrics, metrics2);

    // A decoder traversal cannot run from a GAN checkpoint.
    let out = disent(&[
        "traverse",
        "--checkpoint",
        gan_ckpt.to_str().unwrap(),
        "--mode",
        "decoder",
        "--out",
        root.join("bad").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("error:"), "{}", stderr(&out));
}

#[test]
fn config_errors_reach_the_user() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    // Unknown keys are rejected by name.
    let cfg = root.join("typo.txt");
    std::fs::write(
        &cfg,
        format!("output_dir={}\nlatent_dim=2\nepocs=3\n", root.join("out").display()),
    )
    .unwrap();
    let out = disent(&["train-vae", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr).into_owned();
    assert!(err.contains("epocs"), "{err}");

    // A missing checkpoint fails cleanly instead of panicking.
    let out = disent(&[
        "eval",
        "--checkpoint",
        root.join("nope.dsnt").to_str().unwrap(),
        "--data",
        root.join("nope.dspr").to_str().unwrap(),
        "--out",
        root.join("out").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    // Malformed range strings are named in the error.
    let out = disent(&[
        "traverse",
        "--checkpoint",
        root.join("nope.dsnt").to_str().unwrap(),
        "--range",
        "sideways",
        "--out",
        root.join("out").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("sideways"),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
