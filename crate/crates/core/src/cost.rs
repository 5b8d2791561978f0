//! Analytic multiply-accumulate and parameter counts, and wall-clock timing
//! of the decoder split into head, stages and tail.

use std::fmt::{self, Write as _};
use std::time::Instant;

use crate::autodiff::Graph;
use crate::decoder::{gcd, Decoder, OperatorKind, ShortcutKind};
use crate::error::{bail, Result};
use crate::rng::derive_rng;
use crate::tensor::Tensor;

/// `T·H·W·C_in·C_out·N³`.
pub fn flops_conv3d(t: u64, h: u64, w: u64, c_in: u64, c_out: u64, n: u64) -> u64 {
    t * h * w * c_in * c_out * n * n * n
}

/// `T·H·W·C_in·N³ + T·H·W·C_in·C_out`.
pub fn flops_dwsep(t: u64, h: u64, w: u64, c_in: u64, c_out: u64, n: u64) -> u64 {
    t * h * w * c_in * n * n * n + t * h * w * c_in * c_out
}

/// `T·H·W·C_in·C_out·N²`.
pub fn flops_conv2d(t: u64, h: u64, w: u64, c_in: u64, c_out: u64, n: u64) -> u64 {
    t * h * w * c_in * c_out * n * n
}

/// Exact non-negative fraction in lowest terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rational {
    pub num: u64,
    pub den: u64,
}

impl Rational {
    pub fn new(num: u64, den: u64) -> Self {
        assert!(den != 0, "zero denominator");
        let g = gcd(num as usize, den as usize).max(1) as u64;
        Self {
            num: num / g,
            den: den / g,
        }
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for Rational {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

/// Separable over standard cost, `1/C_out + 1/N³`.
pub fn cost_ratio(c_out: u64, n: u64) -> Rational {
    let n3 = n * n * n;
    Rational::new(n3 + c_out, c_out * n3)
}

pub fn count_params(decoder: &Decoder) -> u64 {
    decoder.num_params() as u64
}

fn conv_macs(kind: OperatorKind, ext: [usize; 3], c_in: usize, c_out: usize, n: usize) -> u64 {
    let [t, h, w] = ext.map(|e| e as u64);
    let (ci, co, n) = (c_in as u64, c_out as u64, n as u64);
    match kind {
        OperatorKind::Causal3d => flops_conv3d(t, h, w, ci, co, n),
        OperatorKind::Dwsep3d => flops_dwsep(t, h, w, ci, co, n),
        OperatorKind::Conv2d => flops_conv2d(t, h, w, ci, co, n),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostRow {
    /// `head`, a stage name, `tail` or `other`.
    pub label: String,
    pub operator: Option<OperatorKind>,
    /// Multiply-accumulates; element-wise operations for the `other` row.
    pub flops: u64,
    pub params: u64,
    pub wall_ms: Option<f64>,
    /// Share of the summed stage FLOPs; stage rows only.
    pub share: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    pub latent_extents: [usize; 3],
    pub threads: usize,
}

impl CostReport {
    pub fn stage_rows(&self) -> impl Iterator<Item = &CostRow> {
        self.rows.iter().filter(|r| r.share.is_some())
    }

    pub fn row(&self, label: &str) -> Option<&CostRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Multiply-accumulates of every convolution in the decoder.
    pub fn total_macs(&self) -> u64 {
        self.rows.iter().filter(|r| r.label != "other").map(|r| r.flops).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("block,operator,flops,params,wall_ms,share\n");
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{}",
                r.label,
                r.operator.map(|o| o.as_str()).unwrap_or(""),
                r.flops,
                r.params,
                r.wall_ms.map(|v| format!("{v:.3}")).unwrap_or_default(),
                r.share.map(|v| format!("{v:.6}")).unwrap_or_default()
            )
            .expect("writing to a String");
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<8} {:<9} {:>14} {:>10} {:>10} {:>7}\n",
            "block", "operator", "flops", "params", "wall_ms", "share"
        );
        for r in &self.rows {
            writeln!(
                s,
                "{:<8} {:<9} {:>14} {:>10} {:>10} {:>7}",
                r.label,
                r.operator.map(|o| o.as_str()).unwrap_or("-"),
                r.flops,
                r.params,
                r.wall_ms.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into()),
                r.share
                    .map(|v| format!("{:.1}%", 100.0 * v))
                    .unwrap_or_else(|| "-".into())
            )
            .expect("writing to a String");
        }
        writeln!(s, "total conv MACs: {}  threads: {}", self.total_macs(), self.threads).expect("writing to a String");
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WallOptions {
    pub repeats: usize,
    pub warmup: usize,
}

fn params_with_prefix(decoder: &Decoder, prefix: &str) -> u64 {
    decoder
        .params()
        .iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .map(|(_, t)| t.numel() as u64)
        .sum()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-block analytic cost at the given latent extents, optionally with the
/// median wall time of each block over `repeats` runs.
pub fn block_breakdown(decoder: &Decoder, latent_extents: [usize; 3], wall: Option<WallOptions>) -> Result<CostReport> {
    let cfg = decoder.config();
    if let Some(w) = wall {
        if w.repeats < 3 {
            bail!(Contract, "timing needs at least 3 repeats, got {}", w.repeats);
        }
    }
    if latent_extents.contains(&0) {
        bail!(Contract, "latent extents must be positive, got {:?}", latent_extents);
    }
    let n = cfg.kernel;
    let mut rows = Vec::new();
    let mut other: u64 = 0;
    let mut ext = latent_extents;
    let vol = |e: [usize; 3]| (e[0] * e[1] * e[2]) as u64;

    let head_c = cfg.head_channels();
    rows.push(CostRow {
        label: "head".into(),
        operator: Some(OperatorKind::Causal3d),
        flops: conv_macs(OperatorKind::Causal3d, ext, cfg.latent_channels, head_c, n),
        params: params_with_prefix(decoder, "conv_in."),
        wall_ms: None,
        share: None,
    });
    other += head_c as u64 * vol(ext);

    let mut prev_c = head_c;
    for s in &cfg.stages {
        for i in 0..3 {
            ext[i] *= s.upsample[i];
        }
        let mut flops = 0;
        for b in 0..s.num_blocks {
            let cin = if b == 0 { prev_c } else { s.channels_out };
            flops += conv_macs(s.operator, ext, cin, s.channels_out, n);
            flops += conv_macs(s.operator, ext, s.channels_out, s.channels_out, n);
            let mut elems = 3 * s.channels_out as u64;
            if b == 0 && s.shortcut == ShortcutKind::Conv1x1 {
                flops += vol(ext) * cin as u64 * s.channels_out as u64;
                elems += s.channels_out as u64;
            }
            other += elems * vol(ext);
            if !cfg.linear {
                other += 2 * (cin as u64 + s.channels_out as u64) * vol(ext);
            }
        }
        rows.push(CostRow {
            label: s.name.to_string(),
            operator: Some(s.operator),
            flops,
            params: params_with_prefix(decoder, &format!("{}.", s.name)),
            wall_ms: None,
            share: Some(0.0),
        });
        prev_c = s.channels_out;
    }
    rows.push(CostRow {
        label: "tail".into(),
        operator: Some(OperatorKind::Causal3d),
        flops: conv_macs(OperatorKind::Causal3d, ext, prev_c, cfg.output_channels, n),
        params: params_with_prefix(decoder, "conv_out.") + params_with_prefix(decoder, "norm_out."),
        wall_ms: None,
        share: None,
    });
    other += cfg.output_channels as u64 * vol(ext);
    if !cfg.linear {
        other += 2 * prev_c as u64 * vol(ext);
    }
    rows.push(CostRow {
        label: "other".into(),
        operator: None,
        flops: other,
        params: 0,
        wall_ms: None,
        share: None,
    });

    let stage_total: u64 = rows.iter().filter(|r| r.share.is_some()).map(|r| r.flops).sum();
    for r in rows.iter_mut().filter(|r| r.share.is_some()) {
        r.share = Some(if stage_total == 0 {
            0.0
        } else {
            r.flops as f64 / stage_total as f64
        });
    }

    if let Some(w) = wall {
        let times = time_blocks(decoder, latent_extents, w)?;
        for (r, t) in rows.iter_mut().zip(times) {
            r.wall_ms = Some(t);
        }
    }
    Ok(CostReport {
        rows,
        latent_extents,
        threads: 1,
    })
}

/// Median milliseconds for head, each stage and tail, in row order.
fn time_blocks(decoder: &Decoder, latent_extents: [usize; 3], w: WallOptions) -> Result<Vec<f64>> {
    let cfg = decoder.config();
    let [t, h, wd] = latent_extents;
    let latent = Tensor::randn(&[cfg.latent_channels, t, h, wd], &mut derive_rng(0, "bench/latent"));
    let n_blocks = cfg.stages.len() + 2;
    let mut samples: Vec<Vec<f64>> = vec![Vec::new(); n_blocks];
    for rep in 0..w.warmup + w.repeats {
        let mut g = Graph::new();
        let p = decoder.bind(&mut g, false);
        let mut x = g.constant(latent.clone());
        let mut times = Vec::with_capacity(n_blocks);
        let start = Instant::now();
        x = decoder.head(&mut g, &p, x)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
        for i in 0..cfg.stages.len() {
            let start = Instant::now();
            x = decoder.stage_forward(&mut g, &p, i, x)?;
            times.push(start.elapsed().as_secs_f64() * 1e3);
        }
        let start = Instant::now();
        decoder.tail(&mut g, &p, x)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
        if rep >= w.warmup {
            for (s, v) in samples.iter_mut().zip(times) {
                s.push(v);
            }
        }
    }
    Ok(samples.into_iter().map(median).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub latent_extents: [usize; 3],
    pub output_extents: [usize; 3],
    pub flops: u64,
    pub wall_ms: Option<f64>,
}

/// Total convolution cost (and optionally median end-to-end time) per latent
/// size.
pub fn resolution_sweep(decoder: &Decoder, shapes: &[[usize; 3]], wall: Option<WallOptions>) -> Result<Vec<SweepRow>> {
    shapes
        .iter()
        .map(|&e| {
            let r = block_breakdown(decoder, e, None)?;
            let wall_ms = match wall {
                Some(w) => Some(time_blocks(decoder, e, w)?.iter().sum()),
                None => None,
            };
            Ok(SweepRow {
                latent_extents: e,
                output_extents: decoder.config().output_extents(e),
                flops: r.total_macs(),
                wall_ms,
            })
        })
        .collect()
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("latent_t,latent_h,latent_w,out_t,out_h,out_w,flops,wall_ms\n");
    for r in rows {
        let [a, b, c] = r.latent_extents;
        let [d, e, f] = r.output_extents;
        writeln!(
            s,
            "{a},{b},{c},{d},{e},{f},{},{}",
            r.flops,
            r.wall_ms.map(|v| format!("{v:.3}")).unwrap_or_default()
        )
        .expect("writing to a String");
    }
    s
}
