use dgae_core::data::{decode_pnm, dequantize, encode_pnm, quantize};
use dgae_core::diffusion::{forward_noise, predict_x0, velocity_target};
use dgae_core::losses::{kl_divergence, l2_reconstruction};
use dgae_core::metrics::{eval_indices, frechet_from_embeddings, psnr, ssim};
use dgae_core::training::lr_schedule;
use dgae_core::{LatentPosterior, Tensor};
use proptest::prelude::*;

fn tensor(shape: &'static [usize], lo: f64, hi: f64) -> impl Strategy<Value = Tensor<f64>> {
    let n: usize = shape.iter().product();
    prop::collection::vec(lo..hi, n).prop_map(move |v| Tensor::from_vec(shape, v).unwrap())
}

fn image(shape: &'static [usize]) -> impl Strategy<Value = Tensor<f32>> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-1.0f32..1.0, n).prop_map(move |v| Tensor::from_vec(shape, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kl_is_nonnegative(mu in tensor(&[2, 3, 2, 2], -3.0, 3.0), lv in tensor(&[2, 3, 2, 2], -4.0, 2.0)) {
        let kl = kl_divergence(&LatentPosterior { mu, logvar: lv }).unwrap();
        prop_assert!(kl >= 0.0);
    }

    #[test]
    fn l2_is_symmetric_and_zero_on_the_diagonal(a in tensor(&[2, 3, 4, 4], -1.0, 1.0), b in tensor(&[2, 3, 4, 4], -1.0, 1.0)) {
        prop_assert_eq!(l2_reconstruction(&a, &a).unwrap(), 0.0);
        prop_assert_eq!(l2_reconstruction(&a, &b).unwrap(), l2_reconstruction(&b, &a).unwrap());
    }

    #[test]
    fn x0_prediction_inverts_the_forward_process(
        x0 in tensor(&[3, 2, 4, 4], -1.0, 1.0),
        eps in tensor(&[3, 2, 4, 4], -3.0, 3.0),
        t in prop::collection::vec(0.01f64..1.0, 3),
    ) {
        let xt = forward_noise(&x0, &eps, &t).unwrap();
        let v = velocity_target(&x0, &eps).unwrap();
        let back = predict_x0(&xt, &t, &v).unwrap();
        for (a, b) in back.data().iter().zip(x0.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn psnr_is_symmetric(a in image(&[2, 3, 8, 8]), b in image(&[2, 3, 8, 8])) {
        let (_, ab) = psnr(&a, &b).unwrap();
        let (_, ba) = psnr(&b, &a).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!(ab > 0.0 && ab <= 100.0);
    }

    #[test]
    fn ssim_is_bounded_and_one_on_identical_images(a in image(&[1, 3, 12, 12]), b in image(&[1, 3, 12, 12])) {
        let (_, same) = ssim(&a, &a).unwrap();
        prop_assert!((same - 1.0).abs() < 1e-9);
        let (_, ab) = ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn frechet_is_symmetric_and_nonnegative(a in tensor(&[24, 3], -2.0, 2.0), b in tensor(&[24, 3], -1.0, 3.0)) {
        let ab = frechet_from_embeddings(&a, &b).unwrap();
        let ba = frechet_from_embeddings(&b, &a).unwrap();
        prop_assert!(ab >= -1e-9);
        prop_assert!((ab - ba).abs() <= 1e-8 * ab.abs().max(1.0));
        prop_assert!(frechet_from_embeddings(&a, &a).unwrap().abs() < 1e-8);
    }

    #[test]
    fn learning_rate_stays_within_schedule_bounds(total in 2u64..5000, frac in 0.0f64..1.0, step_frac in 0.0f64..=1.0) {
        let warmup = ((total - 1) as f64 * frac) as u64;
        let step = (total as f64 * step_frac) as u64;
        let lr = lr_schedule(step, total, warmup, 1e-3, 1e-4).unwrap();
        prop_assert!((0.0..=1e-3 + 1e-18).contains(&lr));
        if step >= warmup {
            prop_assert!(lr >= 1e-4 - 1e-18);
        }
    }

    #[test]
    fn eval_subset_is_sorted_distinct_and_in_range(total in 1usize..300, count in 0usize..300, seed in any::<u64>()) {
        let idx = eval_indices(total, count, seed);
        prop_assert_eq!(idx.len(), count.min(total));
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(idx.iter().all(|&i| i < total));
        prop_assert_eq!(idx, eval_indices(total, count, seed));
    }

    #[test]
    fn pnm_round_trip_is_stable_after_one_quantization(img in image(&[1, 3, 5, 7])) {
        let once = decode_pnm(&encode_pnm(&img).unwrap(), "a").unwrap();
        let bytes = encode_pnm(&once).unwrap();
        prop_assert_eq!(&encode_pnm(&decode_pnm(&bytes, "b").unwrap()).unwrap(), &bytes);
        for (a, b) in once.data().iter().zip(img.data()) {
            prop_assert!((a - b).abs() <= 1.0 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn quantization_round_trips_every_byte(p in any::<u8>()) {
        prop_assert_eq!(quantize(dequantize(p)), p);
    }
}
