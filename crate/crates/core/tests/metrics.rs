use ndarray::{s, Array4, Array5, ArrayView2, Ix4, Ix5};
use proptest::prelude::*;
use vsr_core::metrics::{evaluate, gaussian_taps, psnr, ssim, tcc, SSIM_K1, SSIM_K2, SSIM_WINDOW};
use vsr_core::{rng, Error, ImageBatch, VideoBatch};

fn image(n: usize, c: usize, h: usize, w: usize, seed: u64) -> ImageBatch<f64> {
    let a = rng::uniform_array::<f64>(&mut rng::rng(seed), &[n, c, h, w], 1.0);
    ImageBatch::new(a.into_dimensionality::<Ix4>().unwrap().mapv(|v| 0.5 + 0.5 * v)).unwrap()
}

fn video(b: usize, f: usize, h: usize, w: usize, seed: u64) -> VideoBatch<f64> {
    let a = rng::uniform_array::<f64>(&mut rng::rng(seed), &[b, f, 3, h, w], 1.0);
    VideoBatch::new(a.into_dimensionality::<Ix5>().unwrap().mapv(|v| 0.5 + 0.5 * v)).unwrap()
}

/// Direct 11x11 window sums, no separability.
fn ssim_plane_brute(a: ArrayView2<f64>, b: ArrayView2<f64>, max_val: f64) -> (f64, usize) {
    let taps = gaussian_taps();
    let (c1, c2) = ((SSIM_K1 * max_val).powi(2), (SSIM_K2 * max_val).powi(2));
    let (h, w) = a.dim();
    let mut total = 0.0;
    let mut count = 0;
    for y in 0..=h - SSIM_WINDOW {
        for x in 0..=w - SSIM_WINDOW {
            let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    let k = taps[i] * taps[j];
                    let (p, q) = (a[[y + i, x + j]], b[[y + i, x + j]]);
                    ma += k * p;
                    mb += k * q;
                    aa += k * p * p;
                    bb += k * q * q;
                    ab += k * p * q;
                }
            }
            let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
            total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    (total, count)
}

fn ssim_brute(a: &Array4<f64>, b: &Array4<f64>) -> f64 {
    let mut per_image = 0.0;
    for n in 0..a.shape()[0] {
        let (mut t, mut c) = (0.0, 0);
        for ch in 0..a.shape()[1] {
            let (tt, cc) = ssim_plane_brute(a.slice(s![n, ch, .., ..]), b.slice(s![n, ch, .., ..]), 1.0);
            t += tt;
            c += cc;
        }
        per_image += t / c as f64;
    }
    per_image / a.shape()[0] as f64
}

#[test]
fn taps_are_a_normalized_symmetric_gaussian() {
    let t = gaussian_taps();
    assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    for i in 0..SSIM_WINDOW {
        assert_eq!(t[i], t[SSIM_WINDOW - 1 - i]);
    }
    assert!((t[5] / t[6] - (1.0f64 / (2.0 * 1.5 * 1.5)).exp()).abs() < 1e-12);
}

#[test]
fn ssim_matches_brute_force() {
    let a = image(2, 3, 14, 17, 1);
    let noise = image(2, 3, 14, 17, 2);
    let b = ImageBatch::new(&a.data * 0.8 + &noise.data * 0.2).unwrap();
    let fast = ssim(&a, &b, 1.0).unwrap();
    let slow = ssim_brute(&a.data, &b.data);
    assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
    assert!(fast < 1.0);
}

#[test]
fn psnr_matches_hand_computation() {
    let a = ImageBatch::new(Array4::from_elem((1, 1, 2, 2), 0.5f64)).unwrap();
    let mut b = a.clone();
    b.data[[0, 0, 0, 0]] = 0.6; // mse = 0.01 / 4
    let want = 10.0 * (1.0 / 0.0025f64).log10();
    assert!((psnr(&a, &b, 1.0).unwrap() - want).abs() < 1e-9);
    assert!((psnr(&a, &b, 255.0).unwrap() - (want + 20.0 * 255f64.log10())).abs() < 1e-9);
    assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
}

#[test]
fn tcc_matches_brute_force_on_difference_maps() {
    let h = video(1, 3, 12, 12, 3);
    let g = video(1, 3, 12, 12, 4);
    let mut want = 0.0;
    for i in 0..2 {
        let dh = (&h.data.slice(s![0, i..i + 1, .., .., ..]) - &h.data.slice(s![0, i + 1..i + 2, .., .., ..])).mapv(f64::abs);
        let dg = (&g.data.slice(s![0, i..i + 1, .., .., ..]) - &g.data.slice(s![0, i + 1..i + 2, .., .., ..])).mapv(f64::abs);
        want += ssim_brute(&dh, &dg);
    }
    want /= 2.0;
    assert!((tcc(&h, &g, 1.0).unwrap() - want).abs() < 1e-12);
}

#[test]
fn static_clips_have_perfect_consistency() {
    let frame = image(1, 3, 12, 12, 5).data;
    let clip = Array5::from_shape_fn((1, 4, 3, 12, 12), |(_, _, c, y, x)| frame[[0, c, y, x]]);
    let v = VideoBatch::new(clip).unwrap();
    assert!((tcc(&v, &v, 1.0).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn degenerate_inputs_are_metric_errors() {
    let small = image(1, 3, 8, 8, 0);
    assert!(matches!(ssim(&small, &small, 1.0), Err(Error::Metric(_))));
    let one = video(1, 1, 12, 12, 0);
    assert!(matches!(tcc(&one, &one, 1.0), Err(Error::Metric(_))));
    let a = image(1, 3, 12, 12, 0);
    let b = image(1, 3, 12, 13, 0);
    assert!(matches!(psnr(&a, &b, 1.0), Err(Error::Shape(_))));
}

#[test]
fn evaluate_aggregates_and_flags_infinite_psnr() {
    let gt = video(3, 2, 12, 12, 6);
    let mut gen = gt.clone();
    gen.data.slice_mut(s![1.., .., .., .., ..]).mapv_inplace(|v| v * 0.9);
    let r = evaluate(&[gen.clone()], std::slice::from_ref(&gt), 1.0).unwrap();
    assert_eq!(r.per_clip.len(), 3);
    assert_eq!(r.infinite_psnr_clips, 1);
    assert!(r.per_clip[0].psnr_db.is_none());
    let finite: Vec<f64> = r.per_clip.iter().filter_map(|c| c.psnr_db).collect();
    assert!((r.psnr_db.unwrap() - finite.iter().sum::<f64>() / 2.0).abs() < 1e-12);
    assert!((r.per_clip[0].ssim - 1.0).abs() < 1e-12);
    // splitting the batch into single clips gives the same report
    let gens: Vec<_> = (0..3).map(|b| gen.clip(b)).collect();
    let gts: Vec<_> = (0..3).map(|b| gt.clip(b)).collect();
    assert_eq!(evaluate(&gens, &gts, 1.0).unwrap(), r);
    assert!(matches!(evaluate(&gens[..2], &gts, 1.0), Err(Error::Data(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn ssim_and_tcc_are_symmetric(seed in 0u64..1000) {
        let a = image(1, 3, 12, 12, seed);
        let b = image(1, 3, 12, 12, seed + 1);
        prop_assert!((ssim(&a, &b, 1.0).unwrap() - ssim(&b, &a, 1.0).unwrap()).abs() < 1e-12);
        prop_assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-12);
        let h = video(1, 3, 12, 12, seed);
        let g = video(1, 3, 12, 12, seed + 2);
        prop_assert!((tcc(&h, &g, 1.0).unwrap() - tcc(&g, &h, 1.0).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn tcc_ignores_constant_brightness_offsets(seed in 0u64..1000, offset in -0.3f64..0.3) {
        let h = video(1, 3, 12, 12, seed);
        let g = video(1, 3, 12, 12, seed + 5);
        let shifted = VideoBatch::new(g.data.mapv(|v| v + offset)).unwrap();
        prop_assert!((tcc(&h, &g, 1.0).unwrap() - tcc(&h, &shifted, 1.0).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn psnr_decreases_with_noise(seed in 0u64..1000, k in 0.01f64..0.5) {
        let a = image(1, 3, 6, 6, seed);
        let n = image(1, 3, 6, 6, seed + 9);
        let near = ImageBatch::new(&a.data + &(&n.data * k)).unwrap();
        let far = ImageBatch::new(&a.data + &(&n.data * (2.0 * k))).unwrap();
        prop_assert!(psnr(&a, &near, 1.0).unwrap() > psnr(&a, &far, 1.0).unwrap());
    }
}
