use itmn::cli::ExperimentConfig;
use itmn::dataset::{normalize_hdr_target, resize_rgb, Reinhard, ToneMap, TARGET_CODES};
use itmn::hdrio::HdrImage;
use itmn::loss::{content_loss_value, LossWeights, Reduction};
use itmn::metrics::{log_psnr, mpsnr, ssim, PSNR_CAP_DB};
use itmn::nn::WidthMultiplier;
use itmn::tensor::Tensor;
use itmn::train::{rmsprop_step, step_decay, Direction, Preset};
use proptest::prelude::*;

fn image(max: f32) -> impl Strategy<Value = HdrImage> {
    (12usize..20, 12usize..20).prop_flat_map(move |(w, h)| {
        prop::collection::vec(0.0f32..max, w * h * 3).prop_map(move |pixels| HdrImage { width: w, height: h, pixels })
    })
}

fn image_pair(max: f32) -> impl Strategy<Value = (HdrImage, HdrImage)> {
    (12usize..20, 12usize..20).prop_flat_map(move |(w, h)| {
        let n = w * h * 3;
        (prop::collection::vec(0.0f32..max, n), prop::collection::vec(0.0f32..max, n)).prop_map(move |(a, b)| {
            (HdrImage { width: w, height: h, pixels: a }, HdrImage { width: w, height: h, pixels: b })
        })
    })
}

fn tensor(shape: (usize, usize, usize, usize), data: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec([shape.0, shape.1, shape.2, shape.3], data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ssim_identity_symmetry_and_bounds((a, b) in image_pair(1.0)) {
        prop_assert_eq!(ssim(&a, &a, false).unwrap(), 1.0);
        let ab = ssim(&a, &b, false).unwrap();
        prop_assert_eq!(ab, ssim(&b, &a, false).unwrap());
        prop_assert!((-1.0..=1.0).contains(&ab));
        let pc = ssim(&a, &b, true).unwrap();
        prop_assert!((-1.0..=1.0).contains(&pc));
    }

    #[test]
    fn psnr_metrics_capped_and_symmetric((a, b) in image_pair(4.0)) {
        let stops = [-2, -1, 0, 1, 2];
        prop_assert_eq!(mpsnr(&a, &a, &stops, 2.2).unwrap(), PSNR_CAP_DB);
        prop_assert_eq!(log_psnr(&a, &a, 1e-4).unwrap(), PSNR_CAP_DB);
        let m = mpsnr(&a, &b, &stops, 2.2).unwrap();
        prop_assert_eq!(m, mpsnr(&b, &a, &stops, 2.2).unwrap());
        prop_assert!(m <= PSNR_CAP_DB);
        prop_assert!(log_psnr(&a, &b, 1e-4).unwrap() <= PSNR_CAP_DB);
    }

    #[test]
    fn content_loss_nonnegative_and_offset_invariant(
        data in prop::collection::vec(-1.0f64..1.0, 2 * 3 * 6 * 5 * 2),
        offset in -10.0f64..10.0,
        alpha in 0.0f64..1e5,
    ) {
        let n = 2 * 3 * 6 * 5;
        let a = tensor((2, 3, 6, 5), data[..n].to_vec());
        let b = tensor((2, 3, 6, 5), data[n..].to_vec());
        let w = LossWeights { alpha: 0.0, ..Default::default() };
        prop_assert_eq!(content_loss_value(&a, &a, &LossWeights { alpha, ..w }).unwrap(), 0.0);
        let with_alpha = LossWeights { alpha, ..w };
        let base = content_loss_value(&a, &b, &with_alpha).unwrap();
        prop_assert!(base >= 0.0);
        // A shared offset leaves the difference, and so the loss, unchanged up to rounding.
        let shifted = content_loss_value(&a.map(|v| v + offset), &b.map(|v| v + offset), &with_alpha).unwrap();
        prop_assert!((shifted - base).abs() <= 1e-9 * base.max(1.0));
        let mean = content_loss_value(&a, &b, &LossWeights { reduction: Reduction::PerPixelMean, ..w }).unwrap();
        let sum = content_loss_value(&a, &b, &w).unwrap();
        prop_assert!((sum - mean * (3 * 6 * 5) as f64).abs() <= 1e-9 * sum.max(1.0));
    }

    #[test]
    fn tone_mapped_output_in_unit_range(img in image(500.0), key in 0.05f64..1.0) {
        let ldr = Reinhard::new(key, None).unwrap().apply(&img).unwrap();
        prop_assert!(ldr.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn targets_lie_on_the_ten_bit_grid(img in image(3000.0)) {
        let t = normalize_hdr_target(&img, 1000.0).unwrap();
        for &v in &t.pixels {
            prop_assert!((0.0..=1.0).contains(&v));
            let code = v as f64 * TARGET_CODES;
            prop_assert!((code - code.round()).abs() < 1e-3);
        }
    }

    #[test]
    fn resize_identity_and_range(img in image(2.0), tw in 1usize..30, th in 1usize..30) {
        let same = resize_rgb(img.width, img.height, &img.pixels, img.width, img.height).unwrap();
        prop_assert_eq!(&same, &img.pixels);
        let out = resize_rgb(img.width, img.height, &img.pixels, tw, th).unwrap();
        let max = img.pixels.iter().fold(0.0f32, |m, &v| m.max(v));
        prop_assert_eq!(out.len(), tw * th * 3);
        prop_assert!(out.iter().all(|&v| v >= 0.0 && v <= max * (1.0 + 1e-6)));
    }

    #[test]
    fn rmsprop_accumulator_stays_nonnegative(grads in prop::collection::vec(-1e3f64..1e3, 1..40)) {
        let mut p = Tensor::<f64>::scalar(0.0);
        let mut s = Tensor::<f64>::scalar(0.0);
        for g in grads {
            rmsprop_step(&mut p, &Tensor::scalar(g), &mut s, 1e-3, 0.9, 1e-8, Direction::Descent).unwrap();
            prop_assert!(s.item() >= 0.0 && p.item().is_finite());
        }
    }

    #[test]
    fn step_decay_is_piecewise_constant_and_nonincreasing(iter in 0usize..100_000, every in 1usize..5000) {
        let a = step_decay(iter, 1e-4, 0.5, every);
        let b = step_decay(iter + 1, 1e-4, 0.5, every);
        prop_assert!(b <= a);
        if (iter + 1) % every != 0 {
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn width_multiplier_text_roundtrip(num in 1u32..64, den in 1u32..64) {
        let w = WidthMultiplier::new(num, den).unwrap();
        let back: WidthMultiplier = w.to_string().parse().unwrap();
        prop_assert_eq!(back.as_f64(), w.as_f64());
    }

    #[test]
    fn config_echo_roundtrips(
        lambda in 1e-3f64..1e8,
        alpha in 0.0f64..1e8,
        batch in 1usize..16,
        seed in any::<u32>(),
        paper in any::<bool>(),
    ) {
        let preset = if paper { Preset::Paper } else { Preset::Desk };
        let mut c = ExperimentConfig::with_preset(preset);
        c.apply(&[
            ("lambda".into(), lambda.to_string()),
            ("alpha".into(), alpha.to_string()),
            ("batch_size".into(), batch.to_string()),
            ("seed".into(), seed.to_string()),
        ]).unwrap();
        let echo = c.echo().unwrap();
        let kv = itmn::cli::parse_kv(&echo, "echo").unwrap();
        let mut d = ExperimentConfig::with_preset(preset);
        d.apply(&kv).unwrap();
        prop_assert_eq!(c, d);
    }
}
