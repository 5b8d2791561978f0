//! Finite-difference checks for every differentiable operation.

use std::collections::BTreeMap;

use flashdec::autodiff::{Graph, SpatialAxis, Var};
use flashdec::decoder::StageName;
use flashdec::distill::{
    distill_loss, l1_loss, ssim_loss, total_loss, AdapterVar, GradientPerceptual, LossTerms, LossWeights, Perceptual,
};
use flashdec::ops::DEFAULT_NORM_EPS;
use flashdec::pruning::{as_matrix, expressivity_loss, expressivity_loss_with, least_squares_projection};
use flashdec::Tensor;

use super::{randn, rng, uniform};

pub const STEP: f64 = 1e-5;

/// `Σ v ⊙ r` for a fixed random `r`, so every output element contributes a
/// distinct weight to the scalar being differentiated.
fn project(g: &mut Graph, v: Var, seed: u64) -> Var {
    let shape = g.value(v).shape().to_vec();
    let r = g.constant(randn(&shape, &mut rng(seed ^ 0x5eed)));
    let p = g.mul(v, r).unwrap();
    g.sum(p)
}

pub struct Check {
    pub name: &'static str,
    pub shapes: usize,
    pub max_rel: f64,
}

fn run(name: &'static str, cases: Vec<(Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Var>)>) -> Check {
    let shapes = cases.len();
    let max_rel = cases
        .into_iter()
        .map(|(inputs, f)| super::fd_max_rel_error(&inputs, STEP, f))
        .fold(0.0, f64::max);
    Check { name, shapes, max_rel }
}

type Case = (Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Var>);

fn case(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Var + 'static) -> Case {
    (inputs, Box::new(f))
}

fn conv_cases() -> Vec<Case> {
    let mut r = rng(100);
    [
        ([2, 3, 4, 4], [3, 2, 3, 3, 3]),
        ([1, 2, 3, 5], [2, 1, 2, 3, 1]),
        ([3, 1, 3, 3], [1, 3, 1, 3, 3]),
    ]
    .into_iter()
    .map(|(x, w)| {
        let b = [w[0]];
        case(vec![randn(&x, &mut r), randn(&w, &mut r), randn(&b, &mut r)], |g, v| {
            let y = g.conv(v[0], v[1], Some(v[2]), [1, 1, 1], 1).unwrap();
            project(g, y, 1)
        })
    })
    .collect()
}

fn frame_conv_cases() -> Vec<Case> {
    let mut r = rng(101);
    [
        ([2, 2, 4, 4], [2, 2, 3, 3]),
        ([1, 3, 3, 5], [3, 1, 3, 1]),
        ([3, 1, 5, 3], [1, 3, 1, 3]),
    ]
    .into_iter()
    .map(|(x, w)| {
        let b = [w[0]];
        case(vec![randn(&x, &mut r), randn(&w, &mut r), randn(&b, &mut r)], |g, v| {
            let y = g.conv(v[0], v[1], Some(v[2]), [1, 1, 1], 1).unwrap();
            project(g, y, 2)
        })
    })
    .collect()
}

fn separable_cases() -> Vec<Case> {
    let mut r = rng(102);
    [(2, 3, [2, 4, 4]), (3, 2, [3, 3, 3]), (1, 2, [2, 2, 5])]
        .into_iter()
        .map(|(c, co, [t, h, w])| {
            case(
                vec![
                    randn(&[c, t, h, w], &mut r),
                    randn(&[c, 1, 3, 3, 3], &mut r),
                    randn(&[co, c, 1, 1, 1], &mut r),
                    randn(&[co], &mut r),
                ],
                move |g, v| {
                    let d = g.conv(v[0], v[1], None, [1, 1, 1], c).unwrap();
                    let y = g.conv(d, v[2], Some(v[3]), [1, 1, 1], 1).unwrap();
                    project(g, y, 3)
                },
            )
        })
        .collect()
}

fn strided_cases() -> Vec<Case> {
    let mut r = rng(103);
    [
        ([2, 4, 5, 5], [1, 2, 2]),
        ([1, 5, 4, 4], [2, 1, 1]),
        ([2, 3, 6, 5], [1, 3, 2]),
    ]
    .into_iter()
    .map(|(x, s)| {
        case(
            vec![randn(&x, &mut r), randn(&[2, x[0], 3, 3, 3], &mut r)],
            move |g, v| {
                let y = g.conv(v[0], v[1], None, s, 1).unwrap();
                project(g, y, 4)
            },
        )
    })
    .collect()
}

fn norm_cases() -> Vec<Case> {
    let mut r = rng(104);
    [([4, 2, 3, 3], 2), ([3, 3, 2, 2], 3), ([6, 1, 4, 3], 1)]
        .into_iter()
        .map(|(x, groups)| {
            let c = x[0];
            case(
                vec![randn(&x, &mut r), uniform(&[c], 0.5, 1.5, &mut r), randn(&[c], &mut r)],
                move |g, v| {
                    let y = g.group_norm(v[0], v[1], v[2], groups, DEFAULT_NORM_EPS).unwrap();
                    project(g, y, 5)
                },
            )
        })
        .collect()
}

fn unary_cases(seed: u64, lo: f64, hi: f64, f: fn(&mut Graph, Var) -> Var) -> Vec<Case> {
    let mut r = rng(seed);
    [[2, 2, 3, 3], [1, 3, 4, 2], [3, 1, 2, 5]]
        .into_iter()
        .map(|s| {
            case(vec![uniform(&s, lo, hi, &mut r)], move |g, v| {
                let y = f(g, v[0]);
                project(g, y, seed)
            })
        })
        .collect()
}

fn binary_cases(seed: u64, f: fn(&mut Graph, Var, Var) -> Var) -> Vec<Case> {
    let mut r = rng(seed);
    [[2, 2, 3, 3], [1, 3, 4, 2], [3, 1, 2, 5]]
        .into_iter()
        .map(|s| {
            case(
                vec![uniform(&s, 0.5, 2.0, &mut r), uniform(&s, -2.0, 2.0, &mut r)],
                move |g, v| {
                    let y = f(g, v[0], v[1]);
                    project(g, y, seed)
                },
            )
        })
        .collect()
}

fn video_pair_cases(seed: u64, f: fn(&mut Graph, Var, Var) -> Var) -> Vec<Case> {
    let mut r = rng(seed);
    [[1, 2, 8, 8], [2, 1, 7, 9], [3, 2, 5, 6]]
        .into_iter()
        .map(|s| {
            case(
                vec![uniform(&s, 0.0, 1.0, &mut r), uniform(&s, 0.0, 1.0, &mut r)],
                move |g, v| f(g, v[0], v[1]),
            )
        })
        .collect()
}

fn distill_cases() -> Vec<Case> {
    let mut r = rng(110);
    let shapes = [
        ([3, 2, 2, 2], [4, 2, 2, 2]),
        ([2, 1, 3, 3], [2, 1, 3, 3]),
        ([1, 2, 4, 2], [3, 2, 4, 2]),
    ];
    shapes
        .into_iter()
        .map(|(s, t)| {
            let adapted = s[0] != t[0];
            let mut inputs = vec![
                randn(&s, &mut r),
                randn(&t, &mut r),
                randn(&[2, 2, 2, 2], &mut r),
                randn(&[2, 2, 2, 2], &mut r),
            ];
            if adapted {
                inputs.push(randn(&[t[0], s[0], 1, 1, 1], &mut r));
            }
            case(inputs, move |g, v| {
                let student: BTreeMap<_, _> = [(StageName::Up2, v[0]), (StageName::Mid, v[2])].into();
                let teacher: BTreeMap<_, _> = [(StageName::Up2, v[1]), (StageName::Mid, v[3])].into();
                let mut adapters = BTreeMap::new();
                if adapted {
                    adapters.insert(StageName::Up2, AdapterVar::Conv1x1(v[4]));
                }
                distill_loss(g, &student, &teacher, &adapters).unwrap()
            })
        })
        .collect()
}

fn expressivity_cases(fixed_w: bool) -> Vec<Case> {
    let mut r = rng(111);
    [
        ([4, 2, 3, 3], vec![0, 2]),
        ([5, 1, 4, 4], vec![1, 3, 4]),
        ([3, 2, 2, 3], vec![2]),
    ]
    .into_iter()
    .map(|(s, keep)| {
        let y = randn(&s, &mut r);
        let ym = as_matrix(&y).unwrap();
        let w = least_squares_projection(&ym.select_rows(&keep), &ym).unwrap();
        case(vec![y], move |g, v| {
            if fixed_w {
                expressivity_loss_with(g, v[0], &keep, &w).unwrap()
            } else {
                expressivity_loss(g, v[0], &keep).unwrap()
            }
        })
    })
    .collect()
}

fn total_cases() -> Vec<Case> {
    let mut r = rng(112);
    (0..3)
        .map(|i| {
            let with_ce = i == 1;
            case(vec![uniform(&[4], 0.1, 1.0, &mut r)], move |g, v| {
                let parts: Vec<Var> = (0..4)
                    .map(|k| {
                        let s = g.select_channels(v[0], &[k]).unwrap();
                        let s = g.square(s);
                        g.sum(s)
                    })
                    .collect();
                let ce = if with_ce { Some(g.sqrt(parts[0])) } else { None };
                let terms = LossTerms {
                    l1: parts[0],
                    perceptual: parts[1],
                    distill: parts[2],
                    ssim: parts[3],
                    expressivity: ce,
                };
                total_loss(g, &LossWeights::default(), &terms).unwrap()
            })
        })
        .collect()
}

/// Runs every check; each covers three shapes.
pub fn gradient_suite() -> Vec<Check> {
    vec![
        run("conv3d_causal", conv_cases()),
        run("conv2d_framewise", frame_conv_cases()),
        run("dwsep_conv3d", separable_cases()),
        run("strided_conv", strided_cases()),
        run("group_norm", norm_cases()),
        run("silu", unary_cases(120, -3.0, 3.0, |g, a| g.silu(a))),
        run("upsample", {
            let mut r = rng(121);
            [
                ([2, 2, 2, 2], [2, 2, 2]),
                ([1, 3, 2, 3], [1, 2, 2]),
                ([2, 1, 3, 2], [3, 1, 2]),
            ]
            .into_iter()
            .map(|(s, f)| {
                case(vec![randn(&s, &mut r)], move |g, v| {
                    let y = g.upsample(v[0], f).unwrap();
                    project(g, y, 6)
                })
            })
            .collect()
        }),
        run("add", binary_cases(122, |g, a, b| g.add(a, b).unwrap())),
        run("sub", binary_cases(123, |g, a, b| g.sub(a, b).unwrap())),
        run("mul", binary_cases(124, |g, a, b| g.mul(a, b).unwrap())),
        run("div", binary_cases(125, |g, a, b| g.div(b, a).unwrap())),
        run("scale", unary_cases(126, -2.0, 2.0, |g, a| g.scale(a, -1.7))),
        run("add_scalar", unary_cases(127, -2.0, 2.0, |g, a| g.add_scalar(a, 0.3))),
        run(
            "abs",
            unary_cases(128, 0.2, 2.0, |g, a| {
                let n = g.scale(a, -1.0);
                g.abs(n)
            }),
        ),
        run("sqrt", unary_cases(129, 0.3, 2.0, |g, a| g.sqrt(a))),
        run("square", unary_cases(130, -2.0, 2.0, |g, a| g.square(a))),
        run(
            "mean",
            unary_cases(131, -2.0, 2.0, |g, a| {
                let s = g.square(a);
                g.mean(s)
            }),
        ),
        run(
            "box_filter",
            unary_cases(132, -1.0, 1.0, |g, a| g.box_filter(a, 2).unwrap()),
        ),
        run("avg_pool2", unary_cases(133, -1.0, 1.0, |g, a| g.avg_pool2(a).unwrap())),
        run(
            "spatial_diff_h",
            unary_cases(134, -1.0, 1.0, |g, a| g.spatial_diff(a, SpatialAxis::Height).unwrap()),
        ),
        run(
            "spatial_diff_w",
            unary_cases(135, -1.0, 1.0, |g, a| g.spatial_diff(a, SpatialAxis::Width).unwrap()),
        ),
        run(
            "center_channels",
            unary_cases(136, -1.0, 1.0, |g, a| g.center_channels(a).unwrap()),
        ),
        run(
            "select_channels",
            unary_cases(137, -1.0, 1.0, |g, a| {
                let c = g.value(a).shape()[0];
                let idx: Vec<usize> = (0..c).rev().chain([0]).collect();
                g.select_channels(a, &idx).unwrap()
            }),
        ),
        run(
            "concat_frames",
            binary_cases(138, |g, a, b| g.concat_frames(&[a, b, a]).unwrap()),
        ),
        run("l1_loss", video_pair_cases(140, |g, a, b| l1_loss(g, a, b).unwrap())),
        run(
            "ssim_loss",
            video_pair_cases(141, |g, a, b| ssim_loss(g, a, b).unwrap()),
        ),
        run(
            "perceptual",
            video_pair_cases(142, |g, a, b| GradientPerceptual::default().loss(g, a, b).unwrap()),
        ),
        run("distill_loss", distill_cases()),
        run("expressivity_fixed_w", expressivity_cases(true)),
        run("expressivity_resolved_w", expressivity_cases(false)),
        run("total_loss", total_cases()),
    ]
}
