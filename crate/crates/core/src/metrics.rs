//! Reconstruction and latent-space metrics.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::nets::FeatureExtractor;
use crate::rng;
use crate::tensor::Tensor;

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const FRECHET_DIAG_REG: f64 = 1e-6;
pub const FRECHET_NEG_TOL: f64 = 1e-6;
pub const TV_EPS: f64 = 1e-8;
pub const PCA_MIN_LATENTS: usize = 8;

fn to_unit(v: f32) -> f64 {
    (v as f64 + 1.0) / 2.0
}

fn check_pair(x: &ImageBatch, y: &ImageBatch) -> Result<usize> {
    x.expect_same_shape(y, "metric inputs")?;
    if x.rank() != 4 || x.dim(0) == 0 {
        return Err(Error::Shape(format!("expected a non-empty N x C x H x W batch, got {:?}", x.shape())));
    }
    Ok(x.dim(0))
}

/// Per-image PSNR in dB on `[0, 1]`-rescaled values, and the mean.
pub fn psnr(x: &ImageBatch, x_hat: &ImageBatch) -> Result<(Vec<f64>, f64)> {
    let n = check_pair(x, x_hat)?;
    let per: Vec<f64> = (0..n)
        .map(|i| {
            let (a, b) = (x.outer(i), x_hat.outer(i));
            let mse = a
                .iter()
                .zip(b)
                .map(|(&p, &q)| {
                    let d = to_unit(p) - to_unit(q);
                    d * d
                })
                .sum::<f64>()
                / a.len() as f64;
            if mse == 0.0 {
                PSNR_CAP
            } else {
                (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
            }
        })
        .collect();
    let mean = per.iter().sum::<f64>() / n as f64;
    Ok((per, mean))
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// BT.601 luma of image `i` on `[0, 1]`, row-major `h x w`.
fn luma(x: &ImageBatch, i: usize) -> Vec<f64> {
    let (c, s) = (x.dim(1), x.dim(2) * x.dim(3));
    let img = x.outer(i);
    if c == 1 {
        return img.iter().map(|&v| to_unit(v)).collect();
    }
    (0..s)
        .map(|k| 0.299 * to_unit(img[k]) + 0.587 * to_unit(img[s + k]) + 0.114 * to_unit(img[2 * s + k]))
        .collect()
}

/// Valid-mode separable filtering of an `h x w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut tmp = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            tmp[r * ow + c] = (0..n).map(|j| k[j] * src[r * w + c + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..n).map(|j| k[j] * tmp[(r + j) * ow + c]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let k = gaussian_window();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = filter_valid(a, h, w, &k);
    let mu_b = filter_valid(b, h, w, &k);
    let e_aa = filter_valid(&prod(a, a), h, w, &k);
    let e_bb = filter_valid(&prod(b, b), h, w, &k);
    let e_ab = filter_valid(&prod(a, b), h, w, &k);
    let m = mu_a.len();
    let total: f64 = (0..m)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    total / m as f64
}

/// Single-scale SSIM on luma, per image and mean.
pub fn ssim(x: &ImageBatch, x_hat: &ImageBatch) -> Result<(Vec<f64>, f64)> {
    let n = check_pair(x, x_hat)?;
    let (h, w) = (x.dim(2), x.dim(3));
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::config(
            "image_size",
            format!("{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"),
        ));
    }
    if !matches!(x.dim(1), 1 | 3) {
        return Err(Error::Shape(format!("SSIM needs 1 or 3 channels, got {}", x.dim(1))));
    }
    let per: Vec<f64> = (0..n)
        .map(|i| ssim_plane(&luma(x, i), &luma(x_hat, i), h, w))
        .collect();
    let mean = per.iter().sum::<f64>() / n as f64;
    Ok((per, mean))
}

/// Order-independent accumulator of embedding statistics, mergeable across shards.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub count: usize,
    pub sum: DVector<f64>,
    pub outer_sum: DMatrix<f64>,
}

impl FeatureStats {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0,
            sum: DVector::zeros(dim),
            outer_sum: DMatrix::zeros(dim, dim),
        }
    }

    /// Statistics of the rows of an `N x D` embedding matrix.
    pub fn from_embeddings(emb: &Tensor<f64>) -> Self {
        let d = emb.dim(1);
        let mut s = Self::new(d);
        for i in 0..emb.dim(0) {
            let row = DVector::from_column_slice(emb.outer(i));
            s.outer_sum += &row * row.transpose();
            s.sum += row;
            s.count += 1;
        }
        s
    }

    pub fn merge(&mut self, other: &Self) {
        self.count += other.count;
        self.sum += &other.sum;
        self.outer_sum += &other.outer_sum;
    }

    /// Mean and unbiased covariance.
    pub fn finish(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        if self.count < 2 {
            return Err(Error::config("frechet", format!("need at least 2 samples, got {}", self.count)));
        }
        let n = self.count as f64;
        let mean = &self.sum / n;
        let cov = (&self.outer_sum - &mean * mean.transpose() * n) / (n - 1.0);
        Ok((mean, cov))
    }
}

fn sym_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -FRECHET_NEG_TOL {
            return Err(Error::numeric(format!("covariance has eigenvalue {v:.3e} below tolerance")));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))` for given Gaussian statistics.
pub fn frechet_from_stats(
    mu_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mu_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> Result<f64> {
    let d = mu_a.len();
    if mu_b.len() != d || cov_a.shape() != (d, d) || cov_b.shape() != (d, d) {
        return Err(Error::Shape("Frechet statistics have mismatched dimensions".into()));
    }
    let diff = mu_a - mu_b;
    let sa = sym_sqrt(cov_a)?;
    let inner = &sa * cov_b * &sa;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    let mut tr_sqrt = 0.0;
    for &v in eig.eigenvalues.iter() {
        if v < -FRECHET_NEG_TOL {
            return Err(Error::numeric(format!("matrix square root: eigenvalue {v:.3e} below tolerance")));
        }
        tr_sqrt += v.max(0.0).sqrt();
    }
    Ok(diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt)
}

/// Fréchet distance between Gaussian fits of two embedding sets (rows), with
/// `FRECHET_DIAG_REG` added to both covariance diagonals.
pub fn frechet_from_embeddings(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    if a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1) {
        return Err(Error::Shape(format!("embeddings {:?} vs {:?}", a.shape(), b.shape())));
    }
    let (ma, ca) = FeatureStats::from_embeddings(a).finish()?;
    let (mb, cb) = FeatureStats::from_embeddings(b).finish()?;
    let reg = DMatrix::identity(a.dim(1), a.dim(1)) * FRECHET_DIAG_REG;
    frechet_from_stats(&ma, &(ca + &reg), &mb, &(cb + reg))
}

pub fn frechet_feature_distance(set_a: &ImageBatch, set_b: &ImageBatch, fx: &FeatureExtractor) -> Result<f64> {
    fx.require_trained()?;
    if set_a.dim(0) < 2 || set_b.dim(0) < 2 {
        return Err(Error::config("frechet", "each set needs at least 2 images"));
    }
    frechet_from_embeddings(&fx.embed(set_a)?, &fx.embed(set_b)?)
}

/// Mean absolute vertical plus horizontal neighbour difference of each
/// standardized `(n, c)` latent map, averaged over maps.
pub fn latent_total_variation(z: &Tensor<f32>) -> Result<f64> {
    if z.rank() != 4 || z.dim(2) < 2 || z.dim(3) < 2 {
        return Err(Error::Shape(format!("total variation needs N x C x H x W with H, W >= 2, got {:?}", z.shape())));
    }
    let (h, w) = (z.dim(2), z.dim(3));
    let maps = z.dim(0) * z.dim(1);
    let mut total = 0.0;
    for m in z.data().chunks(h * w) {
        let vals: Vec<f64> = m.iter().map(|&v| v as f64).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        let sd = var.sqrt();
        if sd < TV_EPS {
            continue;
        }
        let s: Vec<f64> = vals.iter().map(|v| (v - mean) / sd).collect();
        let mut dv = 0.0;
        for r in 0..h - 1 {
            for c in 0..w {
                dv += (s[(r + 1) * w + c] - s[r * w + c]).abs();
            }
        }
        let mut dh = 0.0;
        for r in 0..h {
            for c in 0..w - 1 {
                dh += (s[r * w + c + 1] - s[r * w + c]).abs();
            }
        }
        total += dv / ((h - 1) * w) as f64 + dh / (h * (w - 1)) as f64;
    }
    Ok(total / maps as f64)
}

/// Three-component principal projection of latent channel vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPca {
    pub mean: Vec<f64>,
    /// Unit principal directions by decreasing variance; zero vectors pad `c < 3`.
    pub components: [Vec<f64>; 3],
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

fn channel_vectors(z: &Tensor<f32>) -> Vec<Vec<f64>> {
    let (n, c, s) = (z.dim(0), z.dim(1), z.dim(2) * z.dim(3));
    let mut out = Vec::with_capacity(n * s);
    for i in 0..n {
        let item = z.outer(i);
        for k in 0..s {
            out.push((0..c).map(|ch| item[ch * s + k] as f64).collect());
        }
    }
    out
}

impl LatentPca {
    /// Fit on every spatial cell of every latent in `z` (`N x c x h x w`, `N >= 8`).
    pub fn fit(z: &Tensor<f32>) -> Result<Self> {
        if z.rank() != 4 {
            return Err(Error::Shape(format!("latent set {:?} is not rank 4", z.shape())));
        }
        if z.dim(0) < PCA_MIN_LATENTS {
            return Err(Error::config(
                "latent_vis",
                format!("need at least {PCA_MIN_LATENTS} latents, got {}", z.dim(0)),
            ));
        }
        let c = z.dim(1);
        let vecs = channel_vectors(z);
        let m = vecs.len() as f64;
        let mut mean = vec![0.0; c];
        for v in &vecs {
            for (a, b) in mean.iter_mut().zip(v) {
                *a += b;
            }
        }
        mean.iter_mut().for_each(|a| *a /= m);
        let mut cov = DMatrix::<f64>::zeros(c, c);
        for v in &vecs {
            let d = DVector::from_iterator(c, v.iter().zip(&mean).map(|(a, b)| a - b));
            cov += &d * d.transpose();
        }
        cov /= m;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut components: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; c]);
        for (slot, &k) in order.iter().take(3).enumerate() {
            let mut col: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            let (imax, _) = col
                .iter()
                .enumerate()
                .fold((0, 0.0), |best, (i, v)| if v.abs() > best.1 { (i, v.abs()) } else { best });
            if col[imax] < 0.0 {
                col.iter_mut().for_each(|v| *v = -*v);
            }
            components[slot] = col;
        }
        let mut pca = Self {
            mean,
            components,
            lo: [0.0; 3],
            hi: [0.0; 3],
        };
        pca.set_range(&pca.project_raw(z)?);
        Ok(pca)
    }

    fn set_range(&mut self, raw: &Tensor<f64>) {
        let s = raw.dim(2) * raw.dim(3);
        for k in 0..3 {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for i in 0..raw.dim(0) {
                for &v in &raw.outer(i)[k * s..(k + 1) * s] {
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            self.lo[k] = lo;
            self.hi[k] = hi;
        }
    }

    /// Projections onto the three components, `N x 3 x h x w`.
    pub fn project_raw(&self, z: &Tensor<f32>) -> Result<Tensor<f64>> {
        let c = self.mean.len();
        if z.rank() != 4 || z.dim(1) != c {
            return Err(Error::Shape(format!("latent {:?} does not have {c} channels", z.shape())));
        }
        let (n, s) = (z.dim(0), z.dim(2) * z.dim(3));
        let mut out = Tensor::zeros(&[n, 3, z.dim(2), z.dim(3)]);
        for i in 0..n {
            let item = z.outer(i);
            let dst = out.outer_mut(i);
            for p in 0..s {
                for (k, comp) in self.components.iter().enumerate() {
                    dst[k * s + p] = (0..c).map(|ch| (item[ch * s + p] as f64 - self.mean[ch]) * comp[ch]).sum();
                }
            }
        }
        Ok(out)
    }

    /// RGB in `[0, 1]` using the fitted per-component range; flat components map to 0.5.
    pub fn to_rgb(&self, z: &Tensor<f32>) -> Result<Tensor<f64>> {
        let mut raw = self.project_raw(z)?;
        let s = raw.dim(2) * raw.dim(3);
        for i in 0..raw.dim(0) {
            let item = raw.outer_mut(i);
            for k in 0..3 {
                let span = self.hi[k] - self.lo[k];
                for v in &mut item[k * s..(k + 1) * s] {
                    *v = if span > 1e-12 {
                        ((*v - self.lo[k]) / span).clamp(0.0, 1.0)
                    } else {
                        0.5
                    };
                }
            }
        }
        Ok(raw)
    }
}

/// Fit a projection on `z_set` and map every latent to RGB in `[0, 1]`.
pub fn latent_rgb_projection(z_set: &Tensor<f32>) -> Result<(LatentPca, Tensor<f64>)> {
    let pca = LatentPca::fit(z_set)?;
    let rgb = pca.to_rgb(z_set)?;
    Ok((pca, rgb))
}

/// `[0, 1]` RGB to the `[-1, 1]` image convention.
pub fn rgb_to_image(rgb: &Tensor<f64>) -> Tensor<f32> {
    Tensor::from_fn(rgb.shape(), |i| (2.0 * rgb.data()[i] - 1.0) as f32)
}

/// Sorted subset of `count` indices from `0..total`, fixed by `seed`.
pub fn eval_indices(total: usize, count: usize, seed: u64) -> Vec<usize> {
    let count = count.min(total);
    let mut idx: Vec<usize> = (0..total).collect();
    let mut r = rng::stream(seed, "eval_subset", 0);
    for i in 0..count {
        let j = r.random_range(i..total);
        idx.swap(i, j);
    }
    let mut out = idx[..count].to_vec();
    out.sort_unstable();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    pub frechet_distance: f64,
    pub latent_tv: f64,
    pub num_images: usize,
    pub checkpoint_hash: String,
    pub config_hash: String,
    pub sampler_steps: usize,
    pub eval_seed: u64,
    pub step: u64,
}

pub const RESULTS_SCHEMA: u32 = 1;
pub const RESULTS_HEADER: &str =
    "model,step,psnr,ssim,frechet,latent_tv,num_images,sampler_steps,eval_seed,checkpoint_hash,config_hash";

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        if !(self.psnr_mean > 0.0 && self.psnr_mean <= PSNR_CAP) {
            return Err(Error::numeric(format!("PSNR {} outside (0, 100]", self.psnr_mean)));
        }
        if !(-1.0..=1.0).contains(&self.ssim_mean) {
            return Err(Error::numeric(format!("SSIM {} outside [-1, 1]", self.ssim_mean)));
        }
        if !(self.frechet_distance >= -1e-6) {
            return Err(Error::numeric(format!("Frechet distance {} is negative", self.frechet_distance)));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "model={}", self.model);
        let _ = writeln!(s, "step={}", self.step);
        let _ = writeln!(s, "psnr_mean={}", self.psnr_mean);
        let _ = writeln!(s, "ssim_mean={}", self.ssim_mean);
        let _ = writeln!(s, "frechet_distance={}", self.frechet_distance);
        let _ = writeln!(s, "latent_tv={}", self.latent_tv);
        let _ = writeln!(s, "num_images={}", self.num_images);
        let _ = writeln!(s, "sampler_steps={}", self.sampler_steps);
        let _ = writeln!(s, "eval_seed={}", self.eval_seed);
        let _ = writeln!(s, "checkpoint_hash={}", self.checkpoint_hash);
        let _ = writeln!(s, "config_hash={}", self.config_hash);
        s
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.model,
            self.step,
            self.psnr_mean,
            self.ssim_mean,
            self.frechet_distance,
            self.latent_tv,
            self.num_images,
            self.sampler_steps,
            self.eval_seed,
            self.checkpoint_hash,
            self.config_hash
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_cases() {
        let x = Tensor::full(&[1, 3, 4, 4], 0.0f32);
        assert_eq!(psnr(&x, &x).unwrap().1, PSNR_CAP);
        // 0.2 in [-1, 1] units is 0.1 after rescaling.
        let y = Tensor::full(&[1, 3, 4, 4], 0.2f32);
        assert!((psnr(&x, &y).unwrap().1 - 20.0).abs() < 1e-5);
    }

    #[test]
    fn ssim_identity_and_small_image() {
        let x = Tensor::from_fn(&[1, 3, 16, 16], |i| ((i as f32) * 0.31).sin());
        assert!((ssim(&x, &x).unwrap().1 - 1.0).abs() < 1e-12);
        let tiny = Tensor::zeros(&[1, 3, 8, 8]);
        assert!(matches!(ssim(&tiny, &tiny), Err(Error::Config { .. })));
    }

    #[test]
    fn frechet_closed_forms() {
        let m1 = DVector::from_vec(vec![0.0]);
        let m2 = DVector::from_vec(vec![1.0]);
        let c1 = DMatrix::from_vec(1, 1, vec![1.0]);
        let c2 = DMatrix::from_vec(1, 1, vec![4.0]);
        assert!((frechet_from_stats(&m1, &c1, &m2, &c2).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn tv_of_constant_is_zero() {
        let z = Tensor::full(&[2, 3, 4, 4], 1.5f32);
        assert_eq!(latent_total_variation(&z).unwrap(), 0.0);
    }

    #[test]
    fn degenerate_pca_is_gray() {
        let z = Tensor::full(&[8, 2, 2, 2], 0.3f32);
        let (_, rgb) = latent_rgb_projection(&z).unwrap();
        assert!(rgb.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn eval_subset_is_sorted_and_stable() {
        let a = eval_indices(100, 10, 0);
        assert_eq!(a, eval_indices(100, 10, 0));
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(a.len(), 10);
    }
}
