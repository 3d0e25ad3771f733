use fedhp_core::metrics::{psnr, ssim};
use fedhp_core::rng::substream;
use fedhp_core::tensor::Tensor;
use proptest::prelude::*;
use rand::Rng as _;

/// Direct windowed SSIM: explicit 2D Gaussian weights at every valid
/// position, no separable filtering.
fn reference_ssim(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let sigma = 1.5f64;
    let mut win = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for i in 0..11 {
        for j in 0..11 {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            win[i][j] = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            total += win[i][j];
        }
    }
    let c1 = 0.01f64.powi(2);
    let c2 = 0.03f64.powi(2);
    let mut sum = 0.0;
    let mut count = 0;
    for r in 0..=h - 11 {
        for c in 0..=w - 11 {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let wt = win[i][j] / total;
                    let x = a[(r + i) * w + c + j];
                    let y = b[(r + i) * w + c + j];
                    ma += wt * x;
                    mb += wt * y;
                    saa += wt * x * x;
                    sbb += wt * y * y;
                    sab += wt * x * y;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    sum / count as f64
}

fn img(h: usize, w: usize, v: Vec<f32>) -> Tensor<f32> {
    Tensor::new(vec![h, w], v).unwrap()
}

#[test]
fn checkerboard_against_inverse_is_negative_and_matches_reference() {
    let (h, w) = (16, 16);
    let board: Vec<f32> = (0..h * w).map(|i| ((i / w + i % w) % 2) as f32).collect();
    let inv: Vec<f32> = board.iter().map(|v| 1.0 - v).collect();
    let got = ssim(&img(h, w, board.clone()), &img(h, w, inv.clone())).unwrap();
    let f = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
    let want = reference_ssim(&f(&board), &f(&inv), h, w);
    assert!(got < 0.0, "{got}");
    assert!((got - want).abs() < 1e-7, "{got} vs {want}");
}

#[test]
fn random_pairs_match_reference() {
    let mut rng = substream(5, 5);
    for (h, w) in [(11, 11), (16, 20), (24, 13)] {
        let a: Vec<f32> = (0..h * w).map(|_| rng.random()).collect();
        let b: Vec<f32> = a
            .iter()
            .map(|v| v * 0.7 + rng.random::<f32>() * 0.3)
            .collect();
        let got = ssim(&img(h, w, a.clone()), &img(h, w, b.clone())).unwrap();
        let f = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
        let want = reference_ssim(&f(&a), &f(&b), h, w);
        assert!((got - want).abs() < 1e-7, "{got} vs {want}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ssim_is_symmetric_and_bounded(seed in any::<u64>()) {
        let mut rng = substream(seed, 1);
        let a: Vec<f32> = (0..256).map(|_| rng.random()).collect();
        let b: Vec<f32> = (0..256).map(|_| rng.random()).collect();
        let ab = ssim(&img(16, 16, a.clone()), &img(16, 16, b.clone())).unwrap();
        let ba = ssim(&img(16, 16, b), &img(16, 16, a)).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn psnr_symmetric_shift_consistent_and_monotone(seed in any::<u64>(), c in -0.5f32..0.5) {
        let mut rng = substream(seed, 2);
        let a: Vec<f32> = (0..64).map(|_| rng.random()).collect();
        let b: Vec<f32> = (0..64).map(|_| rng.random()).collect();
        let ta = img(8, 8, a.clone());
        let tb = img(8, 8, b.clone());
        let p = psnr(&ta, &tb, 1.0).unwrap();
        prop_assert_eq!(p, psnr(&tb, &ta, 1.0).unwrap());
        let sa = img(8, 8, a.iter().map(|v| v + c).collect());
        let sb = img(8, 8, b.iter().map(|v| v + c).collect());
        prop_assert!((psnr(&sa, &sb, 1.0).unwrap() - p).abs() < 1e-4);
        // doubling the error lowers PSNR
        let far = img(8, 8, a.iter().zip(&b).map(|(x, y)| x + 2.0 * (y - x)).collect());
        prop_assert!(psnr(&ta, &far, 1.0).unwrap() < p);
    }
}
