use std::path::{Path, PathBuf};

use dgae_core::config::RunConfig;
use dgae_core::data::{generate_procedural_dataset, preprocess_eval, write_dataset, write_image_file, Dataset};
use dgae_core::metrics::{eval_indices, rgb_to_image, LatentPca, RESULTS_HEADER};
use dgae_core::nets::{condition_upsample, Architecture, Discriminator};
use dgae_core::sweep::{run_sweep, CellStatus, SweepAxis, SweepSpec};
use dgae_core::tensor::Tensor;
use dgae_core::training::checkpoint::{file_hash, load_checkpoint, write_atomic, Checkpoint};
use dgae_core::training::latent_gen::LatentGenerator;
use dgae_core::training::log::append_rows;
use dgae_core::training::trainer::{evaluate_reconstruction, load_trained, LAST_CHECKPOINT};
use dgae_core::training::{load_or_train_features, write_hashes, Autoencoder, Trainer};
use dgae_core::{Error, Result};

use crate::ConfigArgs;

pub const RESULTS_FILE: &str = "results.csv";

struct Ctx {
    cfg: RunConfig,
    root: PathBuf,
}

impl Ctx {
    fn load(args: &ConfigArgs) -> Result<Self> {
        let cfg = match &args.config {
            Some(p) => RunConfig::load(p, &args.overrides)?,
            None => RunConfig::parse("", &args.overrides)?,
        };
        let root = args.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
        Ok(Self { cfg, root })
    }

    /// `<root>/<model>-f<f>c<c>-<hash>`.
    fn run_dir(&self) -> PathBuf {
        let e = &self.cfg.encoder;
        self.root.join(format!(
            "{}-f{}c{}-{}",
            self.cfg.model.name(),
            e.downsample,
            e.latent_channels,
            &self.cfg.hash()[..12]
        ))
    }

    fn checkpoint_path(&self, given: Option<PathBuf>) -> PathBuf {
        given.unwrap_or_else(|| self.run_dir().join(LAST_CHECKPOINT))
    }

    fn eval_set(&self) -> Result<Dataset> {
        generate_procedural_dataset(&self.cfg.eval_dataset_spec())
    }

    /// Held-out images selected by the eval seed, centre-cropped, at most `count`.
    fn eval_images(&self, count: usize) -> Result<Tensor<f32>> {
        let set = self.eval_set()?;
        let idx = eval_indices(set.len(), count.min(self.cfg.eval_count), self.cfg.seeds.eval);
        let (x, _, _) = set.batch(&idx);
        preprocess_eval(&x, self.cfg.crop_size)
    }
}

fn load_model(ctx: &Ctx, path: &Path) -> Result<(Checkpoint, Autoencoder, dgae_core::nets::FeatureExtractor)> {
    let ckpt = load_checkpoint(path)?;
    let (model, fx) = load_trained(&ctx.cfg, &ckpt)?;
    Ok((ckpt, model, fx))
}

fn out_dir_of(path: &Path, sub: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(sub)
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Images of `parts` (each `N x 3 x H x W`) placed side by side per item.
fn hconcat(parts: &[&Tensor<f32>]) -> Result<Vec<Tensor<f32>>> {
    let first = parts[0];
    let (n, c, h, w) = (first.dim(0), first.dim(1), first.dim(2), first.dim(3));
    for p in parts {
        first.expect_same_shape(p, "side-by-side images")?;
    }
    let k = parts.len();
    Ok((0..n)
        .map(|i| {
            Tensor::from_fn(&[c, h, w * k], |j| {
                let (ch, rest) = (j / (h * w * k), j % (h * w * k));
                let (y, x) = (rest / (w * k), rest % (w * k));
                parts[x / w].outer(i)[(ch * h + y) * w + x % w]
            })
        })
        .collect())
}

pub fn train(args: &ConfigArgs, resume: bool, max_steps: Option<u64>) -> Result<()> {
    let ctx = Ctx::load(args)?;
    let cfg = &ctx.cfg;
    let dir = ctx.run_dir();
    mkdir(&dir)?;
    write_atomic(&dir.join("config.txt"), cfg.to_config_text().as_bytes())?;
    let dataset = generate_procedural_dataset(&cfg.dataset)?;
    let last = dir.join(LAST_CHECKPOINT);
    let trainer = if resume && last.exists() {
        let t = Trainer::resume(cfg, &load_checkpoint(&last)?)?;
        log::info!("resuming from step {}", t.step);
        t
    } else {
        let fx = load_or_train_features(cfg, &dataset, &ctx.root)?;
        Trainer::new(cfg, fx)?
    };
    let mut trainer = trainer.with_output(&dir)?;
    log::info!("{}", trainer.model.describe());
    match max_steps {
        Some(n) => {
            trainer.run_steps(&dataset, n)?;
            if !trainer.is_done() {
                dgae_core::training::save_checkpoint(&trainer.checkpoint(), &last)?;
            }
        }
        None => {
            trainer.run(&dataset)?;
        }
    }
    write_hashes(&dir)?;
    println!("{}", dir.display());
    Ok(())
}

pub fn eval(args: &ConfigArgs, checkpoint: Option<PathBuf>) -> Result<()> {
    let ctx = Ctx::load(args)?;
    let path = ctx.checkpoint_path(checkpoint);
    let (ckpt, model, fx) = load_model(&ctx, &path)?;
    let hash = file_hash(&path)?;
    let report = evaluate_reconstruction(&model, &ctx.cfg, &ctx.eval_set()?, &fx, &ctx.cfg.sampler, &hash, ckpt.meta.step)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    write_atomic(&dir.join("eval.txt"), report.to_kv().as_bytes())?;
    append_rows(&ctx.root.join(RESULTS_FILE), RESULTS_HEADER, &[report.csv_row()])?;
    write_hashes(dir)?;
    print!("{}", report.to_kv());
    Ok(())
}

pub fn reconstruct(args: &ConfigArgs, checkpoint: Option<PathBuf>, count: usize) -> Result<()> {
    let ctx = Ctx::load(args)?;
    let path = ctx.checkpoint_path(checkpoint);
    let (_, model, _) = load_model(&ctx, &path)?;
    let x = ctx.eval_images(count)?;
    let (_, xh) = model.reconstruct(&x, &ctx.cfg.sampler, 0)?;
    let dir = out_dir_of(&path, "reconstructions");
    mkdir(&dir)?;
    for (i, img) in hconcat(&[&x, &xh])?.iter().enumerate() {
        write_image_file(&dir.join(format!("pair_{i:04}.ppm")), img)?;
    }
    write_hashes(&dir)?;
    println!("{}", dir.display());
    Ok(())
}

pub fn sample(args: &ConfigArgs, checkpoint: Option<PathBuf>, count: usize, samples: usize) -> Result<()> {
    if samples == 0 {
        return Err(Error::config("samples", "must be positive"));
    }
    let ctx = Ctx::load(args)?;
    let path = ctx.checkpoint_path(checkpoint);
    let (_, model, _) = load_model(&ctx, &path)?;
    let x = ctx.eval_images(count)?;
    let z = model.encode_mean(&x)?;
    let mut decodes = Vec::with_capacity(samples);
    for k in 0..samples {
        let mut sc = ctx.cfg.sampler.clone();
        sc.noise_seed = dgae_core::rng::derive_seed(ctx.cfg.seeds.eval, "sample_cmd", k as u64);
        decodes.push(model.decode(&z, &sc, 0)?);
    }
    let mut parts: Vec<&Tensor<f32>> = vec![&x];
    parts.extend(decodes.iter());
    let dir = out_dir_of(&path, "samples");
    mkdir(&dir)?;
    for (i, img) in hconcat(&parts)?.iter().enumerate() {
        write_image_file(&dir.join(format!("item_{i:04}.ppm")), img)?;
    }
    write_hashes(&dir)?;
    println!("{}", dir.display());
    Ok(())
}

fn write_latent_images(dir: &Path, pca: &LatentPca, z: &Tensor<f32>, f: usize) -> Result<()> {
    mkdir(dir)?;
    let img = rgb_to_image(&pca.to_rgb(z)?);
    let up = condition_upsample(&img, f)?;
    for i in 0..z.dim(0) {
        write_image_file(&dir.join(format!("latent_{i:04}.ppm")), &img.select_outer(&[i]))?;
        write_image_file(&dir.join(format!("latent_{i:04}_x{f}.ppm")), &up.select_outer(&[i]))?;
    }
    write_hashes(dir)
}

pub fn latent_vis(
    args: &ConfigArgs,
    checkpoint: Option<PathBuf>,
    compare_config: Option<PathBuf>,
    compare_checkpoint: Option<PathBuf>,
    shared_basis: bool,
    count: usize,
) -> Result<()> {
    let ctx = Ctx::load(args)?;
    let path = ctx.checkpoint_path(checkpoint);
    let (_, model, _) = load_model(&ctx, &path)?;
    let x = ctx.eval_images(count)?;
    let z = model.encode_mean(&x)?;
    let mut sets = vec![(ctx.cfg.model.name().to_string(), z, model.downsample())];
    if let Some(cp) = compare_checkpoint {
        let other = Ctx::load(&ConfigArgs {
            config: compare_config,
            overrides: Vec::new(),
            out: Some(ctx.root.clone()),
        })?;
        let (_, m2, _) = load_model(&other, &cp)?;
        let name = if other.cfg.model == ctx.cfg.model {
            format!("{}_compare", other.cfg.model.name())
        } else {
            other.cfg.model.name().to_string()
        };
        sets.push((name, m2.encode_mean(&x)?, m2.downsample()));
    } else if shared_basis {
        return Err(Error::config("shared-basis", "needs --compare-checkpoint"));
    }
    let dir = out_dir_of(&path, "latent_vis");
    if shared_basis {
        let zs: Vec<Tensor<f32>> = sets.iter().map(|s| s.1.clone()).collect();
        if zs[0].shape()[1] != zs[1].shape()[1] {
            return Err(Error::config("shared-basis", "models have different latent channel counts"));
        }
        let pca = LatentPca::fit(&Tensor::stack_outer(&zs)?)?;
        for (name, z, f) in &sets {
            write_latent_images(&dir.join(name), &pca, z, *f)?;
        }
    } else {
        for (name, z, f) in &sets {
            write_latent_images(&dir.join(name), &LatentPca::fit(z)?, z, *f)?;
        }
    }
    println!("{}", dir.display());
    Ok(())
}

pub fn sweep(args: &ConfigArgs, axis: &str, values: Vec<String>, seeds: Vec<u64>) -> Result<()> {
    let ctx = Ctx::load(args)?;
    let axis = SweepAxis::parse(axis).ok_or_else(|| {
        let names: Vec<&str> = SweepAxis::ALL.iter().map(|a| a.name()).collect();
        Error::config("axis", format!("`{axis}` is not one of {}", names.join(", ")))
    })?;
    let values = if values.is_empty() { axis.default_values() } else { values };
    let root = ctx
        .root
        .join(format!("sweep-{}-{}-{}", axis.name(), ctx.cfg.model.name(), &ctx.cfg.hash()[..12]));
    let spec = SweepSpec { axis, values, seeds };
    let cells = run_sweep(&ctx.cfg, &spec, &root)?;
    let mut failed = 0;
    for c in &cells {
        match &c.status {
            CellStatus::Done(r) | CellStatus::Skipped(r) => println!(
                "{}={} seed={} psnr={:.3} ssim={:.4} frechet={:.4} tv={:.4}",
                axis.name(),
                c.axis_value,
                c.seed,
                r.report.psnr_mean,
                r.report.ssim_mean,
                r.report.frechet_distance,
                r.report.latent_tv
            ),
            CellStatus::Failed(m) => {
                failed += 1;
                println!("{}={} seed={} failed: {m}", axis.name(), c.axis_value, c.seed);
            }
        }
    }
    println!("{}", root.display());
    if failed > 0 {
        return Err(Error::numeric(format!("{failed} of {} sweep cells failed", cells.len())));
    }
    Ok(())
}

pub fn latent_gen(args: &ConfigArgs, checkpoint: Option<PathBuf>) -> Result<()> {
    let ctx = Ctx::load(args)?;
    let path = ctx.checkpoint_path(checkpoint);
    let (_, model, fx) = load_model(&ctx, &path)?;
    let dataset = generate_procedural_dataset(&ctx.cfg.dataset)?;
    let dir = out_dir_of(&path, "latent_gen");
    mkdir(&dir)?;
    let mut gen = LatentGenerator::new(&ctx.cfg, &model, &dataset)?;
    let report = gen.run(&model, &fx, &ctx.eval_set()?, Some(&dir.join("convergence.csv")))?;
    dgae_core::training::save_checkpoint(&gen.checkpoint(), &dir.join("generator.ckpt"))?;
    write_hashes(&dir)?;
    for (s, f) in &report.points {
        println!("step={s} frechet={f:.4}");
    }
    println!("{}", dir.display());
    Ok(())
}

pub fn describe(args: &ConfigArgs) -> Result<()> {
    let ctx = Ctx::load(args)?;
    let cfg = &ctx.cfg;
    let model = Autoencoder::new(cfg)?;
    println!("config hash {}", cfg.hash());
    print!("{}", cfg.canonical_text());
    println!();
    println!("{}", model.describe());
    println!("autoencoder parameters: {}", model.params.num_params());
    if cfg.model == dgae_core::ModelKind::Baseline {
        let d = Discriminator::new(cfg.disc.scale, "disc");
        println!("discriminator ({}) parameters: {}", cfg.disc.scale.name(), d.num_params());
    }
    let [c, h, w] = cfg.encoder.latent_shape(cfg.crop_size);
    println!("latent shape {c}x{h}x{w} (size {})", c * h * w);
    Ok(())
}

pub fn gen_data(args: &ConfigArgs, eval: bool) -> Result<()> {
    let ctx = Ctx::load(args)?;
    let spec = if eval {
        ctx.cfg.eval_dataset_spec()
    } else {
        ctx.cfg.dataset.clone()
    };
    let ds = generate_procedural_dataset(&spec)?;
    let dir = ctx.root.join(if eval { "data-eval" } else { "data" });
    write_dataset(&ds, &dir)?;
    write_atomic(&dir.join("fingerprint.txt"), format!("{}\n", ds.fingerprint()).as_bytes())?;
    write_hashes(&dir)?;
    println!("{}", dir.display());
    Ok(())
}
