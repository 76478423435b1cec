use criterion::{criterion_group, criterion_main, Criterion};
use dgae_bench::image_batch;
use dgae_core::autograd::Graph;
use dgae_core::config::RunConfig;
use dgae_core::diffusion::SamplerConfig;
use dgae_core::metrics::{frechet_from_embeddings, ssim};
use dgae_core::nets::{Architecture, Encoder, UNet};
use dgae_core::tensor::Tensor;
use dgae_core::training::Autoencoder;

fn encoder_forward_backward(c: &mut Criterion) {
    let cfg = RunConfig::parse("latent = f8c4\n", &[]).unwrap();
    let enc = Encoder::new(&cfg.encoder, "enc").unwrap();
    let params = enc.init(0).unwrap();
    let x = image_batch(8, 32);
    c.bench_function("encoder_fwd_bwd_8x32", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let p = params.bind(&mut g, true);
            let xv = g.constant(x.clone());
            let out = enc.forward(&mut g, &p, xv).unwrap();
            let l = g.mean(out.mu);
            g.backward(l).unwrap()
        })
    });
}

fn unet_forward(c: &mut Criterion) {
    let cfg = RunConfig::parse("latent = f8c4\n", &[]).unwrap();
    let net = UNet::new(&cfg.decoder, "unet").unwrap();
    let params = net.init(0).unwrap();
    let x = image_batch(8, 32);
    let cond = Tensor::from_fn(&[8, 4, 32, 32], |i| (i as f32 * 0.1).cos());
    let t = vec![0.5; 8];
    c.bench_function("unet_b_fwd_8x32", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let p = params.bind(&mut g, false);
            let xv = g.constant(x.clone());
            let cv = g.constant(cond.clone());
            net.forward(&mut g, &p, xv, &t, cv).unwrap()
        })
    });
}

fn sampler_decode(c: &mut Criterion) {
    let cfg = RunConfig::parse("latent = f8c4\n", &["sampler.steps=10".into()]).unwrap();
    let ae = Autoencoder::new(&cfg).unwrap();
    let z = Tensor::from_fn(&[4, 4, 4, 4], |i| (i as f32 * 0.3).sin());
    let sc = SamplerConfig {
        num_steps: 10,
        ..Default::default()
    };
    c.bench_function("decode_10_steps_4x32", |b| b.iter(|| ae.decode(&z, &sc, 0).unwrap()));
}

fn metrics(c: &mut Criterion) {
    let a = image_batch(16, 32);
    let b2 = a.map(|v| v * 0.9);
    c.bench_function("ssim_16x32", |b| b.iter(|| ssim(&a, &b2).unwrap()));
    let e1 = Tensor::from_fn(&[256, 64], |i| ((i * 7919) % 1000) as f64 / 1000.0);
    let e2 = Tensor::from_fn(&[256, 64], |i| ((i * 104729) % 997) as f64 / 997.0);
    c.bench_function("frechet_256x64", |b| b.iter(|| frechet_from_embeddings(&e1, &e2).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = encoder_forward_backward, unet_forward, sampler_decode, metrics
}
criterion_main!(benches);
