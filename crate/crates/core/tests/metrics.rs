mod common;

use common::{rng, uniform};
use flashdec::data::Sample;
use flashdec::decoder::{Decoder, DecoderConfig};
use flashdec::distill::{SSIM_C1, SSIM_C2};
use flashdec::metrics::{evaluate, evaluate_videos, psnr, ssim};
use flashdec::pipeline::evaluate_split;
use flashdec::Tensor;
use rand_distr::{Distribution, Normal};

/// Mean over channels, frames and valid 7×7 (or smaller) windows of the
/// textbook SSIM expression, written with scalar loops.
fn ssim_oracle(a: &Tensor, b: &Tensor) -> f64 {
    let s = a.shape();
    let (c, t, h, w) = (s[0], s[1], s[2], s[3]);
    let win = 7.min(h).min(w);
    let n = (win * win) as f64;
    let at = |x: &Tensor, ci: usize, f: usize, i: usize, j: usize| x.data()[((ci * t + f) * h + i) * w + j];
    let (mut total, mut count) = (0.0, 0usize);
    for ci in 0..c {
        for f in 0..t {
            for i in 0..=h - win {
                for j in 0..=w - win {
                    let (mut ma, mut mb) = (0.0, 0.0);
                    for di in 0..win {
                        for dj in 0..win {
                            ma += at(a, ci, f, i + di, j + dj);
                            mb += at(b, ci, f, i + di, j + dj);
                        }
                    }
                    ma /= n;
                    mb /= n;
                    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                    for di in 0..win {
                        for dj in 0..win {
                            let x = at(a, ci, f, i + di, j + dj) - ma;
                            let y = at(b, ci, f, i + di, j + dj) - mb;
                            va += x * x;
                            vb += y * y;
                            cov += x * y;
                        }
                    }
                    va /= n;
                    vb /= n;
                    cov /= n;
                    total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                        / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                    count += 1;
                }
            }
        }
    }
    total / count as f64
}

#[test]
fn ssim_matches_the_direct_formula() {
    let mut r = rng(1);
    for shape in [[1, 1, 8, 8], [3, 2, 9, 11], [2, 1, 5, 6]] {
        let a = uniform(&shape, 0.0, 1.0, &mut r);
        let b = a.zip_map(&uniform(&shape, -0.2, 0.2, &mut r), |x, y| x + y).unwrap();
        let s = ssim(&a, &b).unwrap();
        assert!((s - ssim_oracle(&a, &b)).abs() < 1e-8, "{shape:?}");
        assert!((ssim(&b, &a).unwrap() - s).abs() < 1e-12);
    }
}

#[test]
fn ssim_of_black_against_white() {
    let a = Tensor::zeros(&[1, 1, 8, 8]);
    let b = Tensor::full(&[1, 1, 8, 8], 1.0);
    let expect = SSIM_C1 / (1.0 + SSIM_C1);
    assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-15);
    assert!((expect - 1e-4).abs() < 1e-7);
    assert_eq!(ssim(&a, &a).unwrap(), 1.0);
}

#[test]
fn psnr_matches_the_direct_formula() {
    let mut r = rng(2);
    let a = uniform(&[3, 2, 6, 6], 0.0, 1.0, &mut r);
    let b = uniform(&[3, 2, 6, 6], 0.0, 1.0, &mut r);
    let mse: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.numel() as f64;
    for peak in [1.0, 2.0, 255.0] {
        let expect = 10.0 * (peak * peak / mse).log10();
        assert!((psnr(&a, &b, peak).unwrap() - expect).abs() < 1e-10);
    }
    assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
    let offset = a.map(|v| v + 0.1);
    assert!((psnr(&a, &offset, 1.0).unwrap() - 20.0).abs() < 1e-9);
    assert!(psnr(&a, &Tensor::zeros(&[3, 2, 6, 5]), 1.0).is_err());
}

#[test]
fn psnr_falls_as_error_grows() {
    let mut r = rng(3);
    let a = uniform(&[1, 1, 8, 8], 0.0, 1.0, &mut r);
    let noise = uniform(&[1, 1, 8, 8], -1.0, 1.0, &mut r);
    let mut last = f64::INFINITY;
    for k in 1..6 {
        let b = a.zip_map(&noise, |x, n| x + 0.02 * k as f64 * n).unwrap();
        let p = psnr(&a, &b, 1.0).unwrap();
        assert!(p < last);
        assert_eq!(p, psnr(&b, &a, 1.0).unwrap());
        last = p;
    }
}

#[test]
fn gaussian_noise_of_one_percent_is_forty_db() {
    let mut r = rng(4);
    let normal = Normal::new(0.0, 0.01).unwrap();
    // Mid-grey so that clamping to [0, 1] never bites.
    let targets: Vec<Tensor> = (0..4).map(|_| uniform(&[3, 4, 32, 32], 0.3, 0.7, &mut r)).collect();
    let outputs: Vec<Tensor> = targets
        .iter()
        .map(|t| {
            let noise: Vec<f64> = (0..t.numel()).map(|_| normal.sample(&mut r)).collect();
            let n = Tensor::new(t.shape().to_vec(), noise).unwrap();
            t.zip_map(&n, |a, b| a + b).unwrap()
        })
        .collect();
    let rep = evaluate_videos(&outputs, &targets).unwrap();
    assert!((rep.psnr - 40.0).abs() < 0.5, "{}", rep.psnr);
    let mean = rep.clips.iter().map(|c| c.psnr).sum::<f64>() / rep.clips.len() as f64;
    assert!((rep.psnr - mean).abs() < 1e-12);
    let mean_ssim = rep.clips.iter().map(|c| c.ssim).sum::<f64>() / rep.clips.len() as f64;
    assert!((rep.ssim - mean_ssim).abs() < 1e-12);
    assert!((rep.retention - rep.ssim).abs() < 1e-12);
    assert!(rep.to_csv().starts_with("clip,psnr_db,ssim\n0,"));
}

#[test]
fn teacher_against_itself_is_perfect() {
    let d = Decoder::build(DecoderConfig::with_widths([8, 8, 8, 8, 4], 4, 5)).unwrap();
    let mut r = rng(5);
    let latents: Vec<Tensor> = (0..2).map(|_| Tensor::randn(&[4, 1, 2, 2], &mut r)).collect();
    let rep = evaluate(&d, &d, &latents).unwrap();
    assert_eq!(rep.psnr, f64::INFINITY);
    assert_eq!(rep.ssim, 1.0);
    assert_eq!(rep.retention, 1.0);
    let samples: Vec<Sample> = latents
        .iter()
        .map(|z| Sample {
            latent: z.clone(),
            target: d.decode(z).unwrap(),
        })
        .collect();
    assert_eq!(evaluate_split(&d, &samples).unwrap(), rep);
    assert!(evaluate_videos(&[], &[]).is_err());
}
