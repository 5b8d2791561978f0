//! Fidelity metrics against teacher outputs.

use std::fmt::Write as _;

use crate::autodiff::Graph;
use crate::decoder::Decoder;
use crate::distill;
use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// `10·log10(peak² / MSE)`, `+∞` for identical inputs.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        bail!(
            Dimension,
            "PSNR inputs differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        );
    }
    if a.numel() == 0 {
        bail!(Contract, "PSNR of empty tensors");
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    })
}

/// Mean SSIM of two `[C, T, H, W]` videos.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let av = g.constant(a.clone());
    let bv = g.constant(b.clone());
    let s = distill::ssim(&mut g, av, bv)?;
    g.value(s).item()
}

fn clamp01(t: &Tensor) -> Tensor {
    t.map(|v| v.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipMetrics {
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub clips: Vec<ClipMetrics>,
    pub psnr: f64,
    pub ssim: f64,
    /// Student SSIM over teacher SSIM against the same targets.
    pub retention: f64,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("clip,psnr_db,ssim\n");
        for (i, c) in self.clips.iter().enumerate() {
            writeln!(s, "{i},{:.12},{:.12}", c.psnr, c.ssim).expect("writing to a String");
        }
        writeln!(s, "mean,{:.12},{:.12}", self.psnr, self.ssim).expect("writing to a String");
        writeln!(s, "retention,,{:.12}", self.retention).expect("writing to a String");
        s
    }

    pub fn to_table(&self) -> String {
        format!(
            "clips: {}\nPSNR:  {:.2} dB\nSSIM:  {:.4}\nretention (SSIM): {:.1}%\n",
            self.clips.len(),
            self.psnr,
            self.ssim,
            100.0 * self.retention
        )
    }
}

/// Metrics of `outputs` against `targets`, both clamped to `[0, 1]`.
pub fn evaluate_videos(outputs: &[Tensor], targets: &[Tensor]) -> Result<EvalReport> {
    if outputs.len() != targets.len() {
        bail!(Contract, "{} outputs for {} targets", outputs.len(), targets.len());
    }
    if outputs.is_empty() {
        bail!(Contract, "evaluation set is empty");
    }
    let mut clips = Vec::with_capacity(outputs.len());
    let mut target_ssim = 0.0;
    for (o, t) in outputs.iter().zip(targets) {
        let (o, t) = (clamp01(o), clamp01(t));
        clips.push(ClipMetrics {
            psnr: psnr(&o, &t, 1.0)?,
            ssim: ssim(&o, &t)?,
        });
        target_ssim += ssim(&t, &t)?;
    }
    let n = clips.len() as f64;
    let mean_psnr = clips.iter().map(|c| c.psnr).sum::<f64>() / n;
    let mean_ssim = clips.iter().map(|c| c.ssim).sum::<f64>() / n;
    Ok(EvalReport {
        clips,
        psnr: mean_psnr,
        ssim: mean_ssim,
        retention: mean_ssim / (target_ssim / n),
    })
}

/// Student fidelity with teacher outputs as ground truth.
pub fn evaluate(student: &Decoder, teacher: &Decoder, latents: &[Tensor]) -> Result<EvalReport> {
    let outputs = latents.iter().map(|z| student.decode(z)).collect::<Result<Vec<_>>>()?;
    let targets = latents.iter().map(|z| teacher.decode(z)).collect::<Result<Vec<_>>>()?;
    evaluate_videos(&outputs, &targets)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_clips_are_perfect() {
        let a = Tensor::full(&[1, 1, 8, 8], 0.3);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let r = evaluate_videos(&[a.clone()], &[a]).unwrap();
        assert_eq!(r.psnr, f64::INFINITY);
        assert!((r.ssim - 1.0).abs() < 1e-12 && (r.retention - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_offset_of_a_tenth_is_twenty_db() {
        let a = Tensor::full(&[2, 1, 4, 4], 0.25);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
    }
}
