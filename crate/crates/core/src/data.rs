//! Synthetic teachers and latent/video datasets.

use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decoder::store::{read_container, weights_to_bytes, write_container, Container};
use crate::decoder::{Decoder, DecoderConfig, OperatorKind, ShortcutKind, Space};
use crate::error::{bail, Error, Result};
use crate::rng::derive_rng;
use crate::tensor::Tensor;

/// Output level the teacher is calibrated to on probe latents.
pub const TEACHER_MEAN: f64 = 0.5;
pub const TEACHER_STD: f64 = 0.15;
pub const PROBE_LATENTS: usize = 8;
const MIN_CHANNEL_STD: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentKind {
    Gaussian,
    /// Gaussian noise smoothed in space and time, then rescaled to unit
    /// variance per channel.
    Structured,
}

impl std::str::FromStr for LatentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(LatentKind::Gaussian),
            "structured" => Ok(LatentKind::Structured),
            other => Err(Error::Config(format!("unknown latent kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub latent: Tensor,
    pub target: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub seed: u64,
    pub kind: LatentKind,
    /// `(T, H, W)` of every latent.
    pub latent_extents: [usize; 3],
    pub teacher_fingerprint: String,
}

/// SHA-256 over the serialized weights, hex encoded.
pub fn teacher_fingerprint(teacher: &Decoder) -> Result<String> {
    Ok(hex::encode(Sha256::digest(weights_to_bytes(teacher)?)))
}

fn probe_latents(config: &DecoderConfig, seed: u64) -> Vec<Tensor> {
    let mut rng = derive_rng(seed, "teacher/probe");
    (0..PROBE_LATENTS)
        .map(|_| Tensor::randn(&[config.latent_channels, 2, 4, 4], &mut rng))
        .collect()
}

fn channel_stats(videos: &[Tensor]) -> Result<Vec<(f64, f64)>> {
    let c = videos[0].dims4()?[0];
    let mut out = Vec::with_capacity(c);
    for ch in 0..c {
        let mut vals = Vec::new();
        for v in videos {
            let n = v.numel() / c;
            vals.extend_from_slice(&v.data()[ch * n..(ch + 1) * n]);
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / vals.len() as f64;
        out.push((mean, var.sqrt()));
    }
    Ok(out)
}

/// Shape of the synthetic teacher's weights.
///
/// A randomly initialized decoder differs from a trained one in ways that
/// matter here. The teacher is adjusted in three:
///
/// * every layer writing into a stage's residual stream has its output rows
///   mixed by `U Uᵀ + leak·(I − U Uᵀ)` for a random orthonormal `U` with
///   `ceil(rank_fraction·C)` columns, so stage features are dominated by a
///   few directions. Stages joined by identity shortcuts share `U`;
/// * the last convolution of every residual branch is scaled by
///   `branch_scale`;
/// * with `frame_local_tail`, stages after the last temporal upsampling keep
///   only the current-frame taps of their kernels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherStyle {
    pub rank_fraction: f64,
    pub leak: f64,
    pub branch_scale: f64,
    pub frame_local_tail: bool,
}

impl Default for TeacherStyle {
    fn default() -> Self {
        Self {
            rank_fraction: 0.25,
            leak: 0.05,
            branch_scale: 0.05,
            frame_local_tail: true,
        }
    }
}

impl TeacherStyle {
    /// Plain seeded initialization.
    pub const RANDOM: TeacherStyle = TeacherStyle {
        rank_fraction: 1.0,
        leak: 1.0,
        branch_scale: 1.0,
        frame_local_tail: false,
    };
}

/// Zeroes every temporal tap but the last of a `[co, ci, kt, kh, kw]` kernel.
fn keep_current_frame(w: &Tensor) -> Tensor {
    let sh = w.shape();
    let (kt, plane) = (sh[2], sh[3] * sh[4]);
    let mut out = w.clone();
    for (j, v) in out.data_mut().iter_mut().enumerate() {
        if (j / plane) % kt + 1 != kt {
            *v = 0.0;
        }
    }
    out
}

fn random_mixer(c: usize, style: &TeacherStyle, rng: &mut impl Rng) -> DMatrix<f64> {
    let r = ((style.rank_fraction * c as f64).ceil() as usize).clamp(1, c);
    let g = DMatrix::from_fn(c, r, |_, _| rng.sample::<f64, _>(StandardNormal));
    let u = g.qr().q();
    let p = &u * u.transpose();
    &p + (DMatrix::identity(c, c) - &p) * style.leak
}

fn mix_rows(t: &Tensor, m: &DMatrix<f64>) -> Tensor {
    let rows = t.shape()[0];
    let inner = t.numel() / rows;
    let x = DMatrix::from_row_slice(rows, inner, t.data());
    let y = m * x;
    let data = (0..rows)
        .flat_map(|i| y.row(i).iter().copied().collect::<Vec<_>>())
        .collect();
    Tensor::new(t.shape().to_vec(), data).expect("shape is unchanged")
}

fn shape_teacher(teacher: &mut Decoder, style: &TeacherStyle, seed: u64) -> Result<()> {
    let cfg = teacher.config().clone();
    let mut rng = derive_rng(seed, "teacher/style");
    let mut mixers: Vec<DMatrix<f64>> = Vec::with_capacity(cfg.stages.len());
    for (i, s) in cfg.stages.iter().enumerate() {
        let shared = s.shortcut == ShortcutKind::Identity;
        let m = if shared && i > 0 {
            mixers[i - 1].clone()
        } else {
            random_mixer(s.channels_out, style, &mut rng)
        };
        mixers.push(m);
    }
    let head_mixer = if cfg.stages[0].shortcut == ShortcutKind::Identity {
        mixers[0].clone()
    } else {
        random_mixer(cfg.head_channels(), style, &mut rng)
    };
    if style.frame_local_tail {
        let local: Vec<bool> = (0..cfg.stages.len())
            .map(|i| cfg.stages[i..].iter().all(|s| s.upsample[0] == 1))
            .collect();
        for p in teacher.specs() {
            let in_tail = p.stage.is_some_and(|i| local[i]);
            if in_tail && p.shape.len() == 5 && p.shape[2] > 1 {
                let t = keep_current_frame(teacher.param(&p.name)?);
                teacher.set_param(&p.name, t)?;
            }
        }
    }
    for p in teacher.specs() {
        let writes_stream =
            p.name.starts_with("conv_in.") || p.name.contains(".conv2.") || p.name.contains(".shortcut.");
        if !writes_stream || p.name.ends_with(".dw") {
            continue;
        }
        let mixer = match p.axis0 {
            Space::Head => &head_mixer,
            Space::Stage(i) => &mixers[i],
            _ => continue,
        };
        let mut t = mix_rows(teacher.param(&p.name)?, mixer);
        if p.name.contains(".conv2.") {
            t = t.map(|v| v * style.branch_scale);
        }
        teacher.set_param(&p.name, t)?;
    }
    Ok(())
}

/// Seeded full-operator decoder standing in for a pretrained one, shaped by
/// [`TeacherStyle::default`].
pub fn make_teacher(config: &DecoderConfig, seed: u64) -> Result<Decoder> {
    make_teacher_with(config, seed, &TeacherStyle::default())
}

/// As [`make_teacher`] with explicit feature statistics. The final
/// convolution is rescaled per output channel so that probe outputs have
/// mean [`TEACHER_MEAN`] and standard deviation [`TEACHER_STD`].
pub fn make_teacher_with(config: &DecoderConfig, seed: u64, style: &TeacherStyle) -> Result<Decoder> {
    if let Some(s) = config.stages.iter().find(|s| s.operator != OperatorKind::Causal3d) {
        bail!(
            Config,
            "teacher stage '{}' must use causal3d, not {}",
            s.name,
            s.operator
        );
    }
    if config.stages.iter().any(|s| s.retained.is_some()) {
        bail!(Config, "teacher configuration must be unpruned");
    }
    if !(style.rank_fraction > 0.0 && style.rank_fraction <= 1.0)
        || !(0.0..=1.0).contains(&style.leak)
        || !(style.branch_scale >= 0.0 && style.branch_scale.is_finite())
    {
        bail!(Config, "teacher style {:?} is out of range", style);
    }
    let mut cfg = config.clone();
    cfg.seed = seed;
    let mut teacher = Decoder::build(cfg)?;
    shape_teacher(&mut teacher, style, seed)?;
    let probes = probe_latents(teacher.config(), seed);
    let outs = probes.iter().map(|z| teacher.decode(z)).collect::<Result<Vec<_>>>()?;
    let stats = channel_stats(&outs)?;
    let mut w = teacher.param("conv_out.weight")?.clone();
    let mut b = teacher.param("conv_out.bias")?.clone();
    let per = w.numel() / stats.len();
    for (c, &(mean, std)) in stats.iter().enumerate() {
        if !(std > MIN_CHANNEL_STD) {
            bail!(
                DegenerateVariance,
                "teacher output channel {} has std {:e} on probe latents",
                c,
                std
            );
        }
        let a = TEACHER_STD / std;
        w.data_mut()[c * per..(c + 1) * per].iter_mut().for_each(|v| *v *= a);
        b.data_mut()[c] = a * b.data()[c] + (TEACHER_MEAN - a * mean);
    }
    teacher.set_param("conv_out.weight", w)?;
    teacher.set_param("conv_out.bias", b)?;
    Ok(teacher)
}

/// Per-channel output standard deviation of `teacher` on its probe latents.
pub fn probe_channel_std(teacher: &Decoder) -> Result<Vec<f64>> {
    let probes = probe_latents(teacher.config(), teacher.config().seed);
    let outs = probes.iter().map(|z| teacher.decode(z)).collect::<Result<Vec<_>>>()?;
    Ok(channel_stats(&outs)?.into_iter().map(|(_, s)| s).collect())
}

fn smooth_axis(data: &mut [f64], shape: [usize; 4], axis: usize) {
    let [c, t, h, w] = shape;
    let ext = [c, t, h, w][axis];
    if ext < 2 {
        return;
    }
    let stride: usize = shape[axis + 1..].iter().product();
    let src = data.to_vec();
    for (i, v) in data.iter_mut().enumerate() {
        let pos = (i / stride) % ext;
        let lo = if pos == 0 { i } else { i - stride };
        let hi = if pos + 1 == ext { i } else { i + stride };
        *v = 0.25 * src[lo] + 0.5 * src[i] + 0.25 * src[hi];
    }
}

pub fn make_latent<R: Rng + ?Sized>(channels: usize, extents: [usize; 3], kind: LatentKind, rng: &mut R) -> Tensor {
    let shape = [channels, extents[0], extents[1], extents[2]];
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    if kind == LatentKind::Structured {
        for _ in 0..2 {
            for axis in 1..4 {
                smooth_axis(&mut data, shape, axis);
            }
        }
        let per = n / channels.max(1);
        for chunk in data.chunks_mut(per.max(1)) {
            let mean = chunk.iter().sum::<f64>() / per as f64;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
            let s = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
            chunk.iter_mut().for_each(|v| *v = (*v - mean) * s);
        }
    }
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// `n` latents with their teacher outputs.
pub fn gen_dataset(
    teacher: &Decoder,
    n: usize,
    latent_extents: [usize; 3],
    seed: u64,
    kind: LatentKind,
) -> Result<Dataset> {
    if latent_extents.contains(&0) {
        bail!(Config, "latent extents must be positive, got {:?}", latent_extents);
    }
    let c = teacher.config().latent_channels;
    let samples = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = derive_rng(seed, &format!("latent/{i}"));
            let latent = make_latent(c, latent_extents, kind, &mut rng);
            let target = teacher.decode(&latent)?;
            Ok(Sample { latent, target })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        samples,
        seed,
        kind,
        latent_extents,
        teacher_fingerprint: teacher_fingerprint(teacher)?,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    section: String,
    seed: u64,
    kind: LatentKind,
    latent_extents: [usize; 3],
    teacher_fingerprint: String,
    count: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// First `train` samples and the rest.
    pub fn split(&self, train: usize) -> Result<(&[Sample], &[Sample])> {
        if train > self.samples.len() {
            bail!(
                Config,
                "cannot take {} training samples from {}",
                train,
                self.samples.len()
            );
        }
        Ok(self.samples.split_at(train))
    }

    pub fn latents(&self) -> Vec<Tensor> {
        self.samples.iter().map(|s| s.latent.clone()).collect()
    }

    /// Rejects reuse with a teacher other than the one that produced the
    /// targets.
    pub fn check_teacher(&self, teacher: &Decoder) -> Result<()> {
        let fp = teacher_fingerprint(teacher)?;
        if fp != self.teacher_fingerprint {
            bail!(
                Contract,
                "dataset was generated by teacher {}, not {}",
                &self.teacher_fingerprint[..12.min(self.teacher_fingerprint.len())],
                &fp[..12]
            );
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = DatasetHeader {
            section: "dataset".into(),
            seed: self.seed,
            kind: self.kind,
            latent_extents: self.latent_extents,
            teacher_fingerprint: self.teacher_fingerprint.clone(),
            count: self.samples.len(),
        };
        let header = serde_json::to_value(header).map_err(|e| Error::Format(e.to_string()))?;
        let names: Vec<(String, String)> = (0..self.samples.len())
            .map(|i| (format!("latent.{i:05}"), format!("target.{i:05}")))
            .collect();
        let mut tensors = Vec::with_capacity(2 * self.samples.len());
        for (s, (ln, tn)) in self.samples.iter().zip(&names) {
            tensors.push((ln.as_str(), &s.latent));
            tensors.push((tn.as_str(), &s.target));
        }
        write_container(path, &header, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(read_container(path)?)
    }

    fn from_container(c: Container) -> Result<Self> {
        if c.section() != Some("dataset") {
            bail!(Format, "not a dataset file (section {:?})", c.section());
        }
        let h: DatasetHeader =
            serde_json::from_value(c.header.clone()).map_err(|e| Error::Format(format!("dataset header: {e}")))?;
        if c.tensors.len() != 2 * h.count {
            bail!(
                Format,
                "dataset declares {} pairs but holds {} tensors",
                h.count,
                c.tensors.len()
            );
        }
        let samples = (0..h.count)
            .map(|i| {
                Ok(Sample {
                    latent: c.tensor(&format!("latent.{i:05}"))?.clone(),
                    target: c.tensor(&format!("target.{i:05}"))?.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            samples,
            seed: h.seed,
            kind: h.kind,
            latent_extents: h.latent_extents,
            teacher_fingerprint: h.teacher_fingerprint,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DecoderConfig {
        DecoderConfig::with_widths([8, 8, 4, 4, 4], 4, 0)
    }

    #[test]
    fn teacher_is_calibrated_and_seeded() {
        let t = make_teacher(&small(), 11).unwrap();
        assert_eq!(t, make_teacher(&small(), 11).unwrap());
        for s in probe_channel_std(&t).unwrap() {
            assert!((s - TEACHER_STD).abs() < 1e-9);
        }
    }

    #[test]
    fn substituted_teacher_config_is_rejected() {
        let mut c = small();
        c.stages[0].operator = OperatorKind::Dwsep3d;
        assert!(matches!(make_teacher(&c, 0), Err(Error::Config(_))));
    }

    #[test]
    fn empty_dataset_and_split() {
        let t = make_teacher(&small(), 1).unwrap();
        let d = gen_dataset(&t, 0, [1, 2, 2], 0, LatentKind::Gaussian).unwrap();
        assert!(d.is_empty());
        let d = gen_dataset(&t, 3, [1, 2, 2], 0, LatentKind::Structured).unwrap();
        let (a, b) = d.split(2).unwrap();
        assert_eq!((a.len(), b.len()), (2, 1));
        assert!(d.split(4).is_err());
    }

    #[test]
    fn structured_latents_have_unit_channel_variance() {
        let mut rng = derive_rng(0, "x");
        let z = make_latent(2, [2, 4, 4], LatentKind::Structured, &mut rng);
        for ch in z.data().chunks(32) {
            let m = ch.iter().sum::<f64>() / 32.0;
            let v = ch.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 32.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
        }
    }
}
