mod common;

use common::{configs_dir, setup, tiny_config};
use dgae_core::losses::{TERM_DSM, TERM_GAN_D, TERM_GAN_G, TERM_KL, TERM_LPIPS, TERM_REC};
use dgae_core::training::{evaluate_reconstruction, Checkpoint, Trainer};
use dgae_core::{Error, RunConfig};

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn zero_beta_drops_kl_from_the_objective() {
    let cfg = tiny_config("dgae", &["loss.beta=0"]);
    let s = setup(&cfg);
    let mut t = Trainer::new(&cfg, s.fx).unwrap();
    for r in t.run(&s.train).unwrap() {
        assert!(r.terms[TERM_KL] > 0.0, "KL is still measured");
        let lp = r.terms.get(TERM_LPIPS).copied().unwrap_or(0.0);
        let want = cfg.loss.alpha * r.terms[TERM_DSM] + cfg.loss.eta * lp;
        assert!((r.total - want).abs() <= 1e-5 * want.abs().max(1.0), "{} vs {want}", r.total);
    }
}

#[test]
fn kl_weight_changes_the_update() {
    let a = tiny_config("dgae", &["loss.beta=0"]);
    let b = tiny_config("dgae", &["loss.beta=0.5"]);
    let s = setup(&a);
    let mut ta = Trainer::new(&a, s.fx.clone()).unwrap();
    let mut tb = Trainer::new(&b, s.fx).unwrap();
    ta.run_steps(&s.train, 2).unwrap();
    tb.run_steps(&s.train, 2).unwrap();
    assert_ne!(ta.model.params, tb.model.params);
}

#[test]
fn zero_lambda_baseline_has_no_discriminator() {
    let cfg = tiny_config("baseline", &["loss.lambda=0", "disc.start_step=0"]);
    let s = setup(&cfg);
    let mut t = Trainer::new(&cfg, s.fx).unwrap();
    assert!(t.discriminator_params().is_none());
    for r in t.run(&s.train).unwrap() {
        assert!(r.terms.contains_key(TERM_REC));
        assert!(!r.terms.contains_key(TERM_GAN_G));
        assert!(!r.terms.contains_key(TERM_GAN_D));
    }
}

#[test]
fn discriminator_updates_only_on_its_schedule() {
    let cfg = tiny_config(
        "baseline",
        &["optim.total_steps=7", "disc.start_step=2", "disc.update_interval=2", "loss.lambda=0.1"],
    );
    let s = setup(&cfg);
    let mut t = Trainer::new(&cfg, s.fx).unwrap();
    for step in 0..7u64 {
        let before = t.discriminator_params().unwrap().clone();
        let r = t.train_step(&s.train).unwrap();
        let changed = t.discriminator_params().unwrap() != &before;
        let on = step >= 2;
        let update = on && step % 2 == 0;
        assert_eq!(r.terms.contains_key(TERM_GAN_G), on, "generator term at step {step}");
        assert_eq!(r.terms.contains_key(TERM_GAN_D), update, "discriminator loss at step {step}");
        assert_eq!(changed, update, "discriminator weights at step {step}");
    }
}

#[test]
fn evaluation_is_deterministic() {
    for model in ["dgae", "baseline"] {
        let cfg = tiny_config(model, &[]);
        let s = setup(&cfg);
        let mut t = Trainer::new(&cfg, s.fx).unwrap();
        t.run(&s.train).unwrap();
        let a = evaluate_reconstruction(&t.model, &cfg, &s.eval, &t.fx, &cfg.sampler, "h", t.step).unwrap();
        let b = evaluate_reconstruction(&t.model, &cfg, &s.eval, &t.fx, &cfg.sampler, "h", t.step).unwrap();
        assert_eq!(a, b, "{model}");
        assert_eq!(a.num_images, cfg.eval_count);
        assert_eq!(a.sampler_steps, if model == "dgae" { cfg.sampler.num_steps } else { 0 });
    }
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let cfg = tiny_config("dgae", &[]);
    let s = setup(&cfg);
    let t = Trainer::new(&cfg, s.fx).unwrap();
    let bytes = t.checkpoint().to_bytes().unwrap();
    assert!(Checkpoint::from_bytes(&bytes).is_ok());
    for cut in [0, 7, 20, bytes.len() / 2, bytes.len() - 1] {
        assert!(
            matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Corrupt(_))),
            "truncated at {cut}"
        );
    }
    for pos in [0, 9, bytes.len() - 3] {
        let mut b = bytes.clone();
        b[pos] ^= 0x10;
        assert!(Checkpoint::from_bytes(&b).is_err(), "bit flip at {pos}");
    }
    let mut long = bytes.clone();
    long.push(0);
    assert!(Checkpoint::from_bytes(&long).is_err());
}

#[test]
fn resume_rejects_a_different_model_kind() {
    let cfg = tiny_config("dgae", &[]);
    let s = setup(&cfg);
    let t = Trainer::new(&cfg, s.fx).unwrap();
    let other = tiny_config("baseline", &[]);
    assert!(Trainer::resume(&other, &t.checkpoint()).is_err());
}

fn smoke(model: &str, seed: u64) -> (RunConfig, Vec<dgae_core::training::StepRecord>) {
    let o = [format!("model={model}"), format!("seed.global={seed}")];
    let cfg = RunConfig::load(&configs_dir().join("smoke.cfg"), &o).unwrap();
    let s = setup(&cfg);
    let mut t = Trainer::new(&cfg, s.fx).unwrap();
    let recs = t.run(&s.train).unwrap();
    (cfg, recs)
}

#[test]
#[ignore = "2000 training steps; about 40 minutes on one core"]
fn smoke_dgae_denoising_loss_halves() {
    let (_, recs) = smoke("dgae", 1);
    let dsm: Vec<f64> = recs.iter().map(|r| r.terms[TERM_DSM]).collect();
    let (first, last) = (mean(&dsm[..100]), mean(&dsm[dsm.len() - 100..]));
    assert!(last <= 0.5 * first, "dsm {first} -> {last}");
}

#[test]
#[ignore = "3 x 2000 training steps"]
fn smoke_baseline_trains_stably_across_seeds() {
    for seed in 1..=3 {
        let (_, recs) = smoke("baseline", seed);
        assert!(recs.iter().all(|r| r.total.is_finite()));
        let rec: Vec<f64> = recs.iter().map(|r| r.terms[TERM_REC]).collect();
        let (first, last) = (mean(&rec[..100]), mean(&rec[rec.len() - 100..]));
        assert!(last < first, "seed {seed}: rec {first} -> {last}");
    }
}
