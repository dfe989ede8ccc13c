//! Finite-difference cases for every tape primitive in f64.
//!
//! Each op is checked on [`INSTANCES`] random instances. The scalar under test is
//! `Σ r ⊙ op(x)` with a fixed random `r`, so every output element reaches
//! the gradient with its own weight. Inputs for non-smooth ops are kept away
//! from their kinks.

use matx_core::grad::{gradient_check, Padding, Tape, Upsample, Var};
use matx_core::rng::{self, Stream, StreamRng};
use matx_core::{Result, Tensor};
use rand::Rng;

pub const INSTANCES: u32 = 20;
pub const EPS: f64 = 1e-6;
pub const TOL: f64 = 1e-5;

/// Reduces `y` against a fixed random weighting.
fn probe(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
    let mut rng = rng::stream(4242, Stream::Init, 0);
    let r = Tensor::uniform(tape.shape(y), -1.0, 1.0, &mut rng);
    let r = tape.constant(r);
    let p = tape.mul(y, r)?;
    tape.sum(p)
}

/// Uniform values whose magnitude stays in `[lo, hi]` with a random sign.
fn away_from_zero(shape: &[usize], lo: f64, hi: f64, rng: &mut StreamRng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(lo..hi);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Values with pairwise gaps of at least `gap` in random order.
fn distinct(shape: &[usize], gap: f64, rng: &mut StreamRng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n)
        .map(|i| i as f64 * gap + rng.random_range(0.0..gap / 4.0))
        .collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
    Tensor::from_vec(shape, v).unwrap()
}

fn grid(rng: &mut StreamRng) -> [usize; 3] {
    [
        rng.random_range(1..4),
        rng.random_range(2..6),
        rng.random_range(2..6),
    ]
}

fn even_grid(rng: &mut StreamRng) -> [usize; 3] {
    [
        rng.random_range(1..4),
        2 * rng.random_range(1..4),
        2 * rng.random_range(1..4),
    ]
}

pub type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;
pub type Instance = Box<dyn Fn(&mut StreamRng) -> (Vec<Tensor<f64>>, Build)>;

pub struct Case {
    pub op: &'static str,
    pub instance: Instance,
}

fn push(
    v: &mut Vec<Case>,
    op: &'static str,
    instance: impl Fn(&mut StreamRng) -> (Vec<Tensor<f64>>, Build) + 'static,
) {
    v.push(Case {
        op,
        instance: Box::new(instance),
    });
}

/// Worst relative error of `case` over every instance, with the instance
/// index where it occurred.
pub fn worst_error(case: &Case) -> (f64, u32) {
    let mut worst = (0.0, 0);
    for i in 0..INSTANCES {
        let mut rng = rng::stream(i as u64, Stream::Init, 7);
        let (inputs, build) = (case.instance)(&mut rng);
        let check = gradient_check(&inputs, EPS, |t, v| build(t, v)).expect("case builds");
        if check.max_rel_error > worst.0 || check.max_rel_error.is_nan() {
            worst = (check.max_rel_error, i);
        }
    }
    worst
}

pub fn all_cases() -> Vec<Case> {
    let mut v = Vec::new();
    pointwise_binary(&mut v);
    pointwise_unary(&mut v);
    reductions(&mut v);
    matrix_ops(&mut v);
    convolution(&mut v);
    spatial_ops(&mut v);
    chained_graph_reuses_nodes(&mut v);
    v
}

fn unary_case(
    shape_lo: f64,
    shape_hi: f64,
    signed: bool,
    f: fn(&mut Tape<f64>, Var) -> Result<Var>,
) -> impl Fn(&mut StreamRng) -> (Vec<Tensor<f64>>, Build) {
    move |rng| {
        let s = grid(rng);
        let x = if signed {
            away_from_zero(&s, shape_lo, shape_hi, rng)
        } else {
            Tensor::uniform(&s, shape_lo, shape_hi, rng)
        };
        let build: Build = Box::new(move |t, v| {
            let y = f(t, v[0])?;
            probe(t, y)
        });
        (vec![x], build)
    }
}

fn binary_case(
    f: fn(&mut Tape<f64>, Var, Var) -> Result<Var>,
    positive_rhs: bool,
) -> impl Fn(&mut StreamRng) -> (Vec<Tensor<f64>>, Build) {
    move |rng| {
        let s = grid(rng);
        let a = Tensor::uniform(&s, -2.0, 2.0, rng);
        let b = if positive_rhs {
            Tensor::uniform(&s, 0.5, 2.0, rng)
        } else {
            Tensor::uniform(&s, -2.0, 2.0, rng)
        };
        let build: Build = Box::new(move |t, v| {
            let y = f(t, v[0], v[1])?;
            probe(t, y)
        });
        (vec![a, b], build)
    }
}

fn pointwise_binary(v: &mut Vec<Case>) {
    push(v, "add", binary_case(|t, a, b| t.add(a, b), false));
    push(v, "sub", binary_case(|t, a, b| t.sub(a, b), false));
    push(v, "mul", binary_case(|t, a, b| t.mul(a, b), false));
    push(v, "div", binary_case(|t, a, b| t.div(a, b), true));
}

fn pointwise_unary(v: &mut Vec<Case>) {
    push(
        v,
        "add_scalar",
        unary_case(-2.0, 2.0, false, |t, a| t.add_scalar(a, 0.7)),
    );
    push(
        v,
        "scale",
        unary_case(-2.0, 2.0, false, |t, a| t.scale(a, -1.3)),
    );
    push(v, "pow", unary_case(0.2, 2.0, false, |t, a| t.pow(a, 2.5)));
    push(v, "sqrt", unary_case(0.2, 2.0, false, |t, a| t.sqrt(a)));
    push(v, "exp", unary_case(-2.0, 2.0, false, |t, a| t.exp(a)));
    push(
        v,
        "sigmoid",
        unary_case(-4.0, 4.0, false, |t, a| t.sigmoid(a)),
    );
    push(v, "tanh", unary_case(-3.0, 3.0, false, |t, a| t.tanh(a)));
    push(v, "neg", unary_case(-2.0, 2.0, false, |t, a| t.neg(a)));
    push(v, "relu", unary_case(0.05, 2.0, true, |t, a| t.relu(a)));
    push(
        v,
        "leaky_relu",
        unary_case(0.05, 2.0, true, |t, a| t.leaky_relu(a, 0.2)),
    );
    push(v, "abs", unary_case(0.05, 2.0, true, |t, a| t.abs(a)));
    // kinks at ±0.5 and ±1; magnitudes avoid both
    push(
        v,
        "clamp_min",
        unary_case(0.55, 0.95, true, |t, a| t.clamp_min(a, 0.5)),
    );
    push(
        v,
        "clamp_max",
        unary_case(0.55, 0.95, true, |t, a| t.clamp_max(a, -0.5)),
    );
    push(
        v,
        "clamp",
        unary_case(0.55, 0.95, true, |t, a| t.clamp(a, -0.5, 0.5)),
    );
    push(
        v,
        "unary(sin)",
        unary_case(-2.0, 2.0, false, |t, a| {
            t.unary("sin", a, f64::sin, |x, _| x.cos())
        }),
    );
}

fn reductions(v: &mut Vec<Case>) {
    push(v, "sum", |rng| {
        let x = Tensor::uniform(&grid(rng), -1.0, 1.0, rng);
        let build: Build = Box::new(|t, v| {
            let y = t.sum(v[0])?;
            t.scale(y, 0.3)
        });
        (vec![x], build)
    });
    push(v, "mean", |rng| {
        let x = Tensor::uniform(&grid(rng), -1.0, 1.0, rng);
        let build: Build = Box::new(|t, v| {
            let y = t.mean(v[0])?;
            let y2 = t.mul(y, y)?;
            t.add(y2, y)
        });
        (vec![x], build)
    });
    push(v, "l1_distance", |rng| {
        let s = grid(rng);
        let a = Tensor::uniform(&s, -1.0, 1.0, rng);
        // keep |a - b| ≥ 0.05
        let d = away_from_zero(&s, 0.05, 1.0, rng);
        let b = Tensor::from_fn(&s, |i| a.data()[i] + d.data()[i]);
        let build: Build = Box::new(|t, v| t.l1_distance(v[0], v[1]));
        (vec![a, b], build)
    });
    push(v, "weighted_sum", |rng| {
        let k = rng.random_range(1..5);
        let inputs: Vec<Tensor<f64>> = (0..k)
            .map(|_| Tensor::uniform(&[], -1.0, 1.0, rng))
            .collect();
        let w: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let build: Build = Box::new(move |t, v| {
            let sq: Vec<(Var, f64)> = v
                .iter()
                .zip(&w)
                .map(|(&x, &wi)| Ok((t.mul(x, x)?, wi)))
                .collect::<Result<_>>()?;
            t.weighted_sum(&sq)
        });
        (inputs, build)
    });
}

fn matrix_ops(v: &mut Vec<Case>) {
    push(v, "matmul", |rng| {
        let (n, k, m) = (
            rng.random_range(1..6),
            rng.random_range(1..6),
            rng.random_range(1..6),
        );
        let a = Tensor::uniform(&[n, k], -1.0, 1.0, rng);
        let b = Tensor::uniform(&[k, m], -1.0, 1.0, rng);
        let build: Build = Box::new(|t, v| {
            let y = t.matmul(v[0], v[1])?;
            probe(t, y)
        });
        (vec![a, b], build)
    });
    push(v, "sort1d", |rng| {
        let n = rng.random_range(1..12);
        let x = distinct(&[n], 0.1, rng);
        let build: Build = Box::new(|t, v| {
            let (y, _) = t.sort1d(v[0])?;
            probe(t, y)
        });
        (vec![x], build)
    });
    push(v, "sort_columns", |rng| {
        let (n, d) = (rng.random_range(1..10), rng.random_range(1..4));
        let x = distinct(&[n, d], 0.1, rng);
        let build: Build = Box::new(|t, v| {
            let y = t.sort_columns(v[0])?;
            probe(t, y)
        });
        (vec![x], build)
    });
    push(v, "gather_rows_per_column", |rng| {
        let (n, d, m) = (
            rng.random_range(1..8),
            rng.random_range(1..4),
            rng.random_range(1..10),
        );
        let x = Tensor::uniform(&[n, d], -1.0, 1.0, rng);
        // repeated rows exercise gradient accumulation
        let rows: Vec<Vec<usize>> = (0..d)
            .map(|_| (0..m).map(|_| rng.random_range(0..n)).collect())
            .collect();
        let build: Build = Box::new(move |t, v| {
            let y = t.gather_rows_per_column(v[0], &rows)?;
            probe(t, y)
        });
        (vec![x], build)
    });
    push(v, "gather_pixels", |rng| {
        let s = grid(rng);
        let x = Tensor::uniform(&s, -1.0, 1.0, rng);
        let px: Vec<usize> = (0..rng.random_range(1..12))
            .map(|_| rng.random_range(0..s[1] * s[2]))
            .collect();
        let build: Build = Box::new(move |t, v| {
            let y = t.gather_pixels(v[0], &px)?;
            probe(t, y)
        });
        (vec![x], build)
    });
}

fn conv_case(
    padding: Padding,
    with_bias: bool,
) -> impl Fn(&mut StreamRng) -> (Vec<Tensor<f64>>, Build) {
    move |rng| {
        let [c, h, w] = grid(rng);
        let k = rng.random_range(1..4);
        let ks = if rng.random_bool(0.5) { 3 } else { 1 };
        let x = Tensor::uniform(&[c, h + 1, w + 1], -1.0, 1.0, rng);
        let wt = Tensor::uniform(&[k, c, ks, ks], -1.0, 1.0, rng);
        let mut inputs = vec![x, wt];
        if with_bias {
            inputs.push(Tensor::uniform(&[k], -1.0, 1.0, rng));
        }
        let build: Build = Box::new(move |t, v| {
            let y = t.conv2d(v[0], v[1], v.get(2).copied(), padding)?;
            probe(t, y)
        });
        (inputs, build)
    }
}

fn convolution(v: &mut Vec<Case>) {
    push(v, "conv2d circular", conv_case(Padding::Circular, true));
    push(v, "conv2d zero", conv_case(Padding::Zero, true));
    push(v, "conv2d no bias", conv_case(Padding::Zero, false));
}

fn spatial_ops(v: &mut Vec<Case>) {
    for (name, mode) in [
        ("upsample2x nearest", Upsample::Nearest),
        ("upsample2x bilinear", Upsample::BilinearCircular),
    ] {
        push(v, name, move |rng| {
            let x = Tensor::uniform(&grid(rng), -1.0, 1.0, rng);
            let build: Build = Box::new(move |t, v| {
                let y = t.upsample2x(v[0], mode)?;
                probe(t, y)
            });
            (vec![x], build)
        });
    }
    push(v, "avgpool2x", |rng| {
        let x = Tensor::uniform(&even_grid(rng), -1.0, 1.0, rng);
        let build: Build = Box::new(|t, v| {
            let y = t.avgpool2x(v[0])?;
            probe(t, y)
        });
        (vec![x], build)
    });
    push(v, "cyclic_shift", |rng| {
        let x = Tensor::uniform(&grid(rng), -1.0, 1.0, rng);
        let (dx, dy) = (
            rng.random_range(-7i64..8) as isize,
            rng.random_range(-7i64..8) as isize,
        );
        let build: Build = Box::new(move |t, v| {
            let y = t.cyclic_shift(v[0], dx, dy)?;
            probe(t, y)
        });
        (vec![x], build)
    });
    push(v, "tile", |rng| {
        let x = Tensor::uniform(&grid(rng), -1.0, 1.0, rng);
        let k = rng.random_range(1..4);
        let build: Build = Box::new(move |t, v| {
            let y = t.tile(v[0], k)?;
            probe(t, y)
        });
        (vec![x], build)
    });
    push(v, "crop_toroidal", |rng| {
        let s = grid(rng);
        let x = Tensor::uniform(&s, -1.0, 1.0, rng);
        let (oy, ox) = (
            rng.random_range(-6i64..7) as isize,
            rng.random_range(-6i64..7) as isize,
        );
        let (oh, ow) = (rng.random_range(1..9), rng.random_range(1..9));
        let build: Build = Box::new(move |t, v| {
            let y = t.crop_toroidal(v[0], oy, ox, oh, ow)?;
            probe(t, y)
        });
        (vec![x], build)
    });
    push(v, "slice_channels", |rng| {
        let [c, h, w] = grid(rng);
        let x = Tensor::uniform(&[c + 2, h, w], -1.0, 1.0, rng);
        let start = rng.random_range(0..c);
        let len = rng.random_range(1..=c + 2 - start);
        let build: Build = Box::new(move |t, v| {
            let y = t.slice_channels(v[0], start, len)?;
            probe(t, y)
        });
        (vec![x], build)
    });
    push(v, "repeat_channels", |rng| {
        let x = Tensor::uniform(&grid(rng), -1.0, 1.0, rng);
        let k = rng.random_range(1..4);
        let build: Build = Box::new(move |t, v| {
            let y = t.repeat_channels(v[0], k)?;
            probe(t, y)
        });
        (vec![x], build)
    });
    push(v, "concat_channels", |rng| {
        let [_, h, w] = grid(rng);
        let parts: Vec<Tensor<f64>> = (0..rng.random_range(1..4))
            .map(|_| Tensor::uniform(&[rng.random_range(1..3), h, w], -1.0, 1.0, rng))
            .collect();
        let build: Build = Box::new(|t, v| {
            let y = t.concat_channels(v)?;
            probe(t, y)
        });
        (parts, build)
    });
    push(v, "channel_affine", |rng| {
        let s = grid(rng);
        let x = Tensor::uniform(&s, -1.0, 1.0, rng);
        let sc = Tensor::uniform(&[s[0]], -1.0, 1.0, rng);
        let b = Tensor::uniform(&[s[0]], -1.0, 1.0, rng);
        let build: Build = Box::new(|t, v| {
            let y = t.channel_affine(v[0], v[1], v[2])?;
            probe(t, y)
        });
        (vec![x, sc, b], build)
    });
    push(v, "add_noise", |rng| {
        let s = grid(rng);
        let x = Tensor::uniform(&s, -1.0, 1.0, rng);
        let n = Tensor::uniform(&[1, s[1], s[2]], -1.0, 1.0, rng);
        let st = Tensor::uniform(&[s[0]], -1.0, 1.0, rng);
        let build: Build = Box::new(|t, v| {
            let y = t.add_noise(v[0], v[1], v[2])?;
            probe(t, y)
        });
        (vec![x, n, st], build)
    });
    push(v, "unit_disk_clamp", |rng| {
        let [_, h, w] = grid(rng);
        // radii in [0.2, 0.9] or [1.1, 2]: off the clamp boundary
        let n = h * w;
        let mut data = vec![0.0; 2 * n];
        for i in 0..n {
            let r = if rng.random_bool(0.5) {
                rng.random_range(0.2..0.9)
            } else {
                rng.random_range(1.1..2.0)
            };
            let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            data[i] = r * a.cos();
            data[n + i] = r * a.sin();
        }
        let x = Tensor::from_vec(&[2, h, w], data).unwrap();
        let build: Build = Box::new(|t, v| {
            let y = t.unit_disk_clamp(v[0])?;
            probe(t, y)
        });
        (vec![x], build)
    });
}

fn chained_graph_reuses_nodes(v: &mut Vec<Case>) {
    // one input feeding several branches accumulates gradients
    push(v, "fan-out", |rng| {
        let x = Tensor::uniform(&even_grid(rng), -1.0, 1.0, rng);
        let build: Build = Box::new(|t, v| {
            let a = t.sigmoid(v[0])?;
            let b = t.mul(a, v[0])?;
            let p = t.avgpool2x(b)?;
            let u = t.upsample2x(p, Upsample::BilinearCircular)?;
            let c = t.add(u, a)?;
            probe(t, c)
        });
        (vec![x], build)
    });
}
