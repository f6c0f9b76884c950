use proptest::prelude::*;

use tubelet_core::datasim::{apply_cloud_mask, generate_cloud_mask, make_dataset};
use tubelet_core::model::{assemble_input, ModelConfig, Variant};
use tubelet_core::objectives::{psnr_from_mse, sam_loss, ssim, multiscale_loss_value, LossConfig};
use tubelet_core::tensor::ops::{bilinear_resize, conv3d, softmax};
use tubelet_core::trainer::{lr_at, TrainConfig};
use tubelet_core::Tensor;

fn tensor(shape: Vec<usize>, lo: f64, hi: f64) -> impl Strategy<Value = Tensor<f64>> {
    let n: usize = shape.iter().product();
    prop::collection::vec(lo..hi, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn shape3() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..6, 3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn construction_checks_length(shape in prop::collection::vec(1usize..5, 1..4), extra in 1usize..3) {
        let n: usize = shape.iter().product();
        prop_assert!(Tensor::<f32>::new(shape.clone(), vec![0.0; n]).is_ok());
        prop_assert!(Tensor::<f32>::new(shape, vec![0.0; n + extra]).is_err());
    }

    #[test]
    fn softmax_slices_are_distributions(x in shape3().prop_flat_map(|s| tensor(s, -30.0, 30.0)), axis in 0usize..3) {
        let y = softmax(&x, axis).unwrap();
        let s = x.shape().to_vec();
        let (outer, len, inner) = (s[..axis].iter().product::<usize>(), s[axis], s[axis + 1..].iter().product::<usize>());
        prop_assert!(y.data().iter().all(|&v| v > 0.0));
        for o in 0..outer {
            for i in 0..inner {
                let total: f64 = (0..len).map(|k| y.data()[(o * len + k) * inner + i]).sum();
                prop_assert!((total - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn conv3d_uses_every_input_once(c in 1usize..3, kt in 1usize..3, k in 1usize..4, gt in 1usize..3, g in 1usize..3) {
        // with unit kernels each output is the sum of its own tubelet, so the total is preserved
        let x = Tensor::<f64>::from_fn(vec![c, kt * gt, k * g, k * g], |i| (i % 7) as f64 + 1.0);
        let kernel = Tensor::ones(vec![1, c, kt, k, k]);
        let y = conv3d(&x, &kernel, &Tensor::zeros(vec![1]), (kt, k, k)).unwrap();
        prop_assert_eq!(y.numel(), gt * g * g);
        prop_assert!((y.sum() - x.sum()).abs() < 1e-9);
    }

    #[test]
    fn resize_identity_and_constants(x in shape3().prop_flat_map(|s| tensor(s, -1.0, 1.0)), c in -2.0f64..2.0) {
        prop_assert_eq!(bilinear_resize(&x, 1.0).unwrap(), x.clone());
        let flat = Tensor::full(x.shape().to_vec(), c);
        for s in [0.5, 0.25] {
            prop_assert!(bilinear_resize(&flat, s).unwrap().data().iter().all(|v| (v - c).abs() < 1e-12));
        }
    }

    #[test]
    fn masking_is_idempotent_and_zeroes(seed in any::<u64>(), clouds in 0usize..12) {
        let mask = generate_cloud_mask(seed, 6, 20, 20, clouds, 0.3).unwrap().mask;
        prop_assert!(mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let msi = Tensor::<f32>::from_fn(vec![6, 11, 20, 20], |i| 0.1 + (i % 9) as f32 * 0.1);
        let once = apply_cloud_mask(&msi, &mask).unwrap();
        prop_assert_eq!(apply_cloud_mask(&once, &mask).unwrap(), once.clone());
        for (i, &v) in once.data().iter().enumerate() {
            let (t, px) = (i / (11 * 400), i % 400);
            if mask.data()[t * 400 + px] == 1.0 {
                prop_assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn sar_is_never_masked(seed in 0u64..1000) {
        let data = make_dataset(seed, 5, 20, 20, 8, 0.3).unwrap();
        let remasked = data.remask(seed ^ 0xff, 12, 0.3).unwrap();
        let cfg = ModelConfig { frames: 6, height: 20, width: 20, ..ModelConfig::reference(Variant::SmtsVivit) };
        for (a, b) in data.samples.iter().zip(&remasked.samples) {
            prop_assert_eq!(&a.sar, &b.sar);
            let sar = a.sar.as_ref().unwrap();
            let x = assemble_input(&a.msi_clouded, Some(sar), &a.mask, &cfg).unwrap();
            // SAR occupies channels 11 and 12 of the assembled stack, stored channel-major
            let plane = 6 * 400;
            for ch in 0..2 {
                for t in 0..6 {
                    let got = &x.data()[(11 + ch) * plane + t * 400..(11 + ch) * plane + (t + 1) * 400];
                    let want = &sar.data()[(t * 2 + ch) * 400..(t * 2 + ch + 1) * 400];
                    prop_assert_eq!(got, want);
                }
            }
        }
    }

    #[test]
    fn sam_ignores_positive_rescaling(x in tensor(vec![2, 4, 3, 3], 0.05, 1.0), scales in prop::collection::vec(0.1f64..10.0, 18)) {
        let scaled = Tensor::from_fn(x.shape().to_vec(), |i| {
            let (t, px) = (i / 36, i % 9);
            x.data()[i] * scales[t * 9 + px]
        });
        prop_assert!(sam_loss(&scaled, &x).unwrap() < 1e-3);
    }

    #[test]
    fn self_loss_is_near_zero(x in tensor(vec![2, 3, 8, 8], -1.0, 1.0)) {
        prop_assert!(multiscale_loss_value(&x, &x, &LossConfig::default()).unwrap() <= 1e-3);
    }

    #[test]
    fn ssim_is_symmetric(a in tensor(vec![12, 13], 0.0, 1.0), b in tensor(vec![12, 13], 0.0, 1.0)) {
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn psnr_decreases_with_mse(a in 1e-9f64..1.0, f in 1.01f64..10.0) {
        prop_assert!(psnr_from_mse(a * f) < psnr_from_mse(a) || psnr_from_mse(a) == 100.0);
        if psnr_from_mse(a * f) < 100.0 {
            prop_assert!(psnr_from_mse(a * f) < psnr_from_mse(a));
        }
    }

    #[test]
    fn learning_rate_never_increases(epoch in 0usize..500, gamma in 0.1f64..1.0, every in 1usize..20) {
        let cfg = TrainConfig { gamma, decay_every: every, ..TrainConfig::default() };
        prop_assert!(lr_at(epoch + 1, &cfg) <= lr_at(epoch, &cfg));
        prop_assert_eq!(lr_at(epoch - epoch % every, &cfg), lr_at(epoch, &cfg));
    }
}
