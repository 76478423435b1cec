use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dgae_core::data::{encode_pnm, generate_procedural_dataset, preprocess_eval, read_image_file};
use dgae_core::metrics::{eval_indices, rgb_to_image, LatentPca};
use dgae_core::training::load_checkpoint;
use dgae_core::training::log::read_rows;
use dgae_core::training::trainer::load_trained;
use dgae_core::{RunConfig, Tensor};

fn tiny() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.cfg")
}

fn dgae(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dgae"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = dgae(out, args);
    assert!(
        o.status.success(),
        "dgae {args:?} failed: {}\n{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn last_line(s: &str) -> PathBuf {
    PathBuf::from(s.lines().last().expect("output path").trim())
}

fn train(out: &Path, extra: &[&str]) -> PathBuf {
    let cfg = tiny();
    let mut args = vec!["train", "-c", cfg.to_str().unwrap()];
    args.extend_from_slice(extra);
    last_line(&ok(out, &args))
}

fn data_rows(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(2)
        .map(str::to_string)
        .collect()
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = dgae(dir.path(), &["describe", "--set", "laten_channels=4"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("laten_channels"));
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let o = dgae(dir.path(), &["eval", "-c", cfg.to_str().unwrap(), "--checkpoint", "nope.ckpt"]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn corrupt_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"DGAECKPT truncated").unwrap();
    let cfg = tiny();
    let o = dgae(dir.path(), &["eval", "-c", cfg.to_str().unwrap(), "--checkpoint", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn describe_prints_hash_and_parameter_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let a = ok(dir.path(), &["describe", "-c", cfg.to_str().unwrap()]);
    let b = ok(dir.path(), &["describe", "-c", cfg.to_str().unwrap()]);
    assert_eq!(a, b);
    let hash = RunConfig::load(&cfg, &[]).unwrap().hash();
    assert!(a.starts_with(&format!("config hash {hash}")));
    assert!(a.contains("autoencoder parameters:"));
    assert!(a.contains("latent shape 4x2x2 (size 16)"));
}

#[test]
fn gen_data_writes_images_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let out = last_line(&ok(dir.path(), &["gen-data", "-c", cfg.to_str().unwrap()]));
    let ds = generate_procedural_dataset(&RunConfig::load(&cfg, &[]).unwrap().dataset).unwrap();
    let fp = std::fs::read_to_string(out.join("fingerprint.txt")).unwrap();
    assert_eq!(fp.trim(), ds.fingerprint());
    let ppms = std::fs::read_dir(out.join("images"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "ppm"))
        .count();
    assert_eq!(ppms, ds.len());
}

#[test]
fn train_eval_reconstruct_sample_latent_gen() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let c = cfg.to_str().unwrap();
    let run = train(dir.path(), &[]);
    for f in ["last.ckpt", "train_log.csv", "config.txt", "HASHES"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let log = data_rows(&run.join("train_log.csv"));
    assert_eq!(log.len(), 2, "one row per log_every=2 steps of 4");

    ok(dir.path(), &["eval", "-c", c]);
    let results = dir.path().join("results.csv");
    assert_eq!(data_rows(&results).len(), 1);
    ok(dir.path(), &["eval", "-c", c]);
    let rows = data_rows(&results);
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0], rows[1], "evaluation is deterministic");
    assert!(std::fs::read_to_string(&results).unwrap().starts_with("#schema=1\n"));

    let rec = last_line(&ok(dir.path(), &["reconstruct", "-c", c, "--count", "3"]));
    for i in 0..3 {
        let img = read_image_file(&rec.join(format!("pair_{i:04}.ppm"))).unwrap();
        assert_eq!(img.shape(), &[1, 3, 16, 32], "original and reconstruction side by side");
    }

    let smp = last_line(&ok(dir.path(), &["sample", "-c", c, "--count", "2", "--samples", "3"]));
    let img = read_image_file(&smp.join("item_0000.ppm")).unwrap();
    assert_eq!(img.shape(), &[1, 3, 16, 16 * 4], "original then three decodes");

    let lg = last_line(&ok(dir.path(), &["latent-gen", "-c", c]));
    let (cols, rows) = read_rows(&lg.join("convergence.csv")).unwrap();
    assert_eq!(cols, ["latent_size", "seed", "step", "frechet"]);
    let steps: Vec<&str> = rows.iter().map(|r| r[2].as_str()).collect();
    assert_eq!(steps, ["0", "2", "4"]);
    assert!(lg.join("generator.ckpt").exists());
}

#[test]
fn interrupted_training_resumes_to_identical_checkpoint() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let full = train(a.path(), &[]);
    let part = train(b.path(), &["--max-steps", "1"]);
    assert_eq!(load_checkpoint(&part.join("last.ckpt")).unwrap().meta.step, 1);
    let done = train(b.path(), &["--resume"]);
    assert_eq!(part, done);
    assert_eq!(
        std::fs::read(full.join("last.ckpt")).unwrap(),
        std::fs::read(done.join("last.ckpt")).unwrap()
    );
}

#[test]
fn latent_vis_shared_basis_projects_both_models_together() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let c = cfg.to_str().unwrap();
    let base_cfg = dir.path().join("baseline.cfg");
    std::fs::write(&base_cfg, std::fs::read_to_string(&cfg).unwrap() + "model = baseline\n").unwrap();
    let d_run = train(dir.path(), &[]);
    let b_run = last_line(&ok(dir.path(), &["train", "-c", base_cfg.to_str().unwrap()]));
    let (d_ck, b_ck) = (d_run.join("last.ckpt"), b_run.join("last.ckpt"));
    let args = [
        "latent-vis",
        "-c",
        c,
        "--compare-config",
        base_cfg.to_str().unwrap(),
        "--compare-checkpoint",
        b_ck.to_str().unwrap(),
        "--count",
        "8",
        "--shared-basis",
    ];
    let vis = last_line(&ok(dir.path(), &args));

    let dcfg = RunConfig::load(&cfg, &[]).unwrap();
    let bcfg = RunConfig::load(&base_cfg, &[]).unwrap();
    let eval = generate_procedural_dataset(&dcfg.eval_dataset_spec()).unwrap();
    let (x, _, _) = eval.batch(&eval_indices(eval.len(), 8, dcfg.seeds.eval));
    let x = preprocess_eval(&x, dcfg.crop_size).unwrap();
    let (dm, _) = load_trained(&dcfg, &load_checkpoint(&d_ck).unwrap()).unwrap();
    let (bm, _) = load_trained(&bcfg, &load_checkpoint(&b_ck).unwrap()).unwrap();
    let zd = dm.encode_mean(&x).unwrap();
    let zb = bm.encode_mean(&x).unwrap();
    let pca = LatentPca::fit(&Tensor::stack_outer(&[zd.clone(), zb.clone()]).unwrap()).unwrap();
    for (name, z) in [("dgae", &zd), ("baseline", &zb)] {
        let img = rgb_to_image(&pca.to_rgb(z).unwrap());
        for i in [0, 7] {
            let want = encode_pnm(&img.select_outer(&[i])).unwrap();
            let got = std::fs::read(vis.join(name).join(format!("latent_{i:04}.ppm"))).unwrap();
            assert_eq!(got, want, "{name} latent {i}");
        }
        assert!(vis.join(name).join("latent_0000_x8.ppm").exists());
    }

    let o = dgae(dir.path(), &["latent-vis", "-c", c, "--shared-basis"]);
    assert_eq!(o.status.code(), Some(2), "shared basis needs a second model");
}

#[test]
fn sweep_rerun_skips_finished_cells() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let c = cfg.to_str().unwrap();
    let args = ["sweep", "-c", c, "--axis", "latent-size", "--values", "1,2", "--seeds", "1"];
    let first = ok(dir.path(), &args);
    let root = last_line(&first);
    let csv = root.join("sweep.csv");
    let rows = data_rows(&csv);
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.contains(",ok,")));
    let stamp = |p: &Path| std::fs::metadata(p).unwrap().modified().unwrap();
    let cells: Vec<PathBuf> = std::fs::read_dir(root.join("cells"))
        .unwrap()
        .map(|e| e.unwrap().path().join("last.ckpt"))
        .collect();
    let before: Vec<_> = cells.iter().map(|p| stamp(p)).collect();
    let second = ok(dir.path(), &args);
    assert_eq!(first, second, "same results reported");
    assert_eq!(data_rows(&csv).len(), 2, "skipped cells are not appended again");
    assert_eq!(cells.iter().map(|p| stamp(p)).collect::<Vec<_>>(), before);

    let o = dgae(dir.path(), &["sweep", "-c", c, "--axis", "latent-size", "--values", "x", "--seeds", "1"]);
    assert_eq!(o.status.code(), Some(2), "bad values rejected before training");
    let o = dgae(dir.path(), &["sweep", "-c", c, "--axis", "depth"]);
    assert_eq!(o.status.code(), Some(2));
}
