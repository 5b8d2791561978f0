#![allow(dead_code)]

pub mod grads;
pub mod prune;

use flashdec::autodiff::{Graph, Var};
use flashdec::Tensor;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, rng)
}

/// Uniform values in `[lo, hi)`.
pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn at(t: &Tensor, c: usize, f: usize, y: usize, x: usize) -> f64 {
    let s = t.shape();
    t.data()[((c * s[1] + f) * s[2] + y) * s[3] + x]
}

/// Direct evaluation of a grouped causal convolution: left temporal padding
/// of `kt - 1`, symmetric spatial padding of `k / 2`.
pub fn naive_conv(input: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, stride: [usize; 3], groups: usize) -> Tensor {
    let [ci, t, h, w] = [input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]];
    let ks = kernel.shape();
    let (co, cig, kt, kh, kw) = (ks[0], ks[1], ks[2], ks[3], ks[4]);
    assert_eq!(cig * groups, ci);
    let cog = co / groups;
    let (pt, ph, pw) = (kt as isize - 1, (kh / 2) as isize, (kw / 2) as isize);
    let to = (t + kt - 1 - kt) / stride[0] + 1;
    let ho = (h + 2 * (kh / 2) - kh) / stride[1] + 1;
    let wo = (w + 2 * (kw / 2) - kw) / stride[2] + 1;
    let mut out = vec![0.0; co * to * ho * wo];
    let kd = kernel.data();
    for o in 0..co {
        let g = o / cog;
        for fo in 0..to {
            for yo in 0..ho {
                for xo in 0..wo {
                    let mut acc = bias.map_or(0.0, |b| b.data()[o]);
                    for i in 0..cig {
                        let c = g * cig + i;
                        for dt in 0..kt {
                            let fi = (fo * stride[0] + dt) as isize - pt;
                            if fi < 0 || fi >= t as isize {
                                continue;
                            }
                            for dy in 0..kh {
                                let yi = (yo * stride[1] + dy) as isize - ph;
                                if yi < 0 || yi >= h as isize {
                                    continue;
                                }
                                for dx in 0..kw {
                                    let xi = (xo * stride[2] + dx) as isize - pw;
                                    if xi < 0 || xi >= w as isize {
                                        continue;
                                    }
                                    let wv = kd[(((o * cig + i) * kt + dt) * kh + dy) * kw + dx];
                                    acc += wv * at(input, c, fi as usize, yi as usize, xi as usize);
                                }
                            }
                        }
                    }
                    out[((o * to + fo) * ho + yo) * wo + xo] = acc;
                }
            }
        }
    }
    Tensor::new(vec![co, to, ho, wo], out).unwrap()
}

/// Each frame convolved on its own with a `[C_out, C_in, kh, kw]` kernel.
pub fn naive_frame_conv(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Tensor {
    let [ci, t, h, w] = [input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]];
    let ks = kernel.shape();
    let (co, kh, kw) = (ks[0], ks[2], ks[3]);
    let mut out = vec![0.0; co * t * h * w];
    for o in 0..co {
        for f in 0..t {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = bias.data()[o];
                    for c in 0..ci {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let yi = y as isize + dy as isize - (kh / 2) as isize;
                                let xi = x as isize + dx as isize - (kw / 2) as isize;
                                if yi < 0 || xi < 0 || yi >= h as isize || xi >= w as isize {
                                    continue;
                                }
                                acc += kernel.data()[((o * ci + c) * kh + dy) * kw + dx]
                                    * at(input, c, f, yi as usize, xi as usize);
                            }
                        }
                    }
                    out[((o * t + f) * h + y) * w + x] = acc;
                }
            }
        }
    }
    Tensor::new(vec![co, t, h, w], out).unwrap()
}

/// Per-channel causal filtering followed by a channel mix.
pub fn naive_dwsep(input: &Tensor, dw: &Tensor, pw: &Tensor, bias: &Tensor) -> Tensor {
    let c = input.shape()[0];
    let d = naive_conv(input, dw, None, [1, 1, 1], c);
    let co = pw.shape()[0];
    let [_, t, h, w] = [d.shape()[0], d.shape()[1], d.shape()[2], d.shape()[3]];
    let mut out = vec![0.0; co * t * h * w];
    for o in 0..co {
        for f in 0..t {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = bias.data()[o];
                    for i in 0..c {
                        acc += pw.data()[o * c + i] * at(&d, i, f, y, x);
                    }
                    out[((o * t + f) * h + y) * w + x] = acc;
                }
            }
        }
    }
    Tensor::new(vec![co, t, h, w], out).unwrap()
}

/// Largest `|analytic − numeric| / max(|analytic|, |numeric|, 1e-6)` over
/// every element of every input, with central differences of step `h`.
pub fn fd_max_rel_error<F>(inputs: &[Tensor], h: f64, f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |ts: &[Tensor]| {
        let mut g = Graph::new();
        let vs: Vec<Var> = ts.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vs);
        g.value(out).item().unwrap()
    };
    let mut g = Graph::new();
    let vs: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vs);
    let grads = g.backward(out).unwrap();
    let mut worst = 0.0f64;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vs[k]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        for i in 0..t.numel() {
            let mut ts = inputs.to_vec();
            ts[k].data_mut()[i] += h;
            let up = eval(&ts);
            ts[k].data_mut()[i] -= 2.0 * h;
            let down = eval(&ts);
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

/// Pseudoinverse built from an SVD with an explicit cutoff.
pub fn pinv(a: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = a.clone().svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let smax = svd.singular_values.max();
    let tol = 1e-12 * smax.max(1e-300);
    let mut s_inv = DMatrix::zeros(vt.nrows(), u.ncols());
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > tol {
            s_inv[(i, i)] = 1.0 / s;
        }
    }
    vt.transpose() * s_inv * u.transpose()
}

pub fn ss_tot(y: &DMatrix<f64>) -> f64 {
    y.row_iter()
        .map(|r| {
            let m = r.mean();
            r.iter().map(|v| (v - m).powi(2)).sum::<f64>()
        })
        .sum()
}

/// R² of reconstructing every row of `y` from the rows in `rows`.
pub fn r2_of_rows(y: &DMatrix<f64>, rows: &[usize]) -> f64 {
    let x = y.select_rows(rows);
    let w = y * pinv(&x);
    1.0 - (y - w * x).norm_squared() / ss_tot(y)
}

/// Greedy selection that recomputes every candidate fit from scratch.
pub fn naive_greedy(y: &DMatrix<f64>, k: usize) -> (Vec<usize>, Vec<f64>) {
    let mut picked: Vec<usize> = Vec::new();
    let mut trace = Vec::new();
    for _ in 0..k {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..y.nrows() {
            if picked.contains(&j) {
                continue;
            }
            let mut rows = picked.clone();
            rows.push(j);
            let r2 = r2_of_rows(y, &rows);
            if best.is_none_or(|(_, b)| r2 > b + 1e-12) {
                best = Some((j, r2));
            }
        }
        let (j, r2) = best.unwrap();
        picked.push(j);
        trace.push(r2);
    }
    (picked, trace)
}

/// `C × M` matrix whose rows span exactly `rank` dimensions, with the first
/// `rank` rows independent.
pub fn low_rank_rows(c: usize, m: usize, rank: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let basis = DMatrix::from_fn(rank, m, |_, _| rng.random_range(-1.0..1.0));
    let mut mix = DMatrix::from_fn(c, rank, |_, _| rng.random_range(-1.0..1.0));
    for i in 0..rank {
        for j in 0..rank {
            mix[(i, j)] = if i == j { 1.0 } else { 0.0 };
        }
    }
    mix * basis
}

/// A run small enough for unit-speed pipeline tests.
pub fn tiny_config() -> flashdec::config::RunConfig {
    let mut c = flashdec::config::RunConfig::default();
    c.decoder.latent_channels = 4;
    c.decoder.widths = [8, 8, 8, 8, 4];
    c.data.train = 6;
    c.data.eval = 2;
    c.data.latent_extents = [1, 2, 2];
    c.prune.calibration = 4;
    for (p, steps) in [(&mut c.phase1, 6), (&mut c.phase2, 6), (&mut c.phase3, 8)] {
        p.steps = Some(steps);
        p.lr = Some(1e-3);
    }
    c
}

pub fn workspace_root() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}
