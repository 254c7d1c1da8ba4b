//! Finite-difference sweep over every differentiable tape op.

use rand::Rng;
use serde::Serialize;

use super::{grad_check_with, Graph, Result, Tensor, Var};

/// Relative-error floor used by the sweep; gradients here are O(1).
pub const SUITE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpReport {
    pub op: &'static str,
    pub instances: usize,
    pub worst: f64,
}

fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values at least `gap` apart from each other and from `avoid`, so max,
/// minimum and clamp stay away from their kinks under a step of `h`.
fn separated<R: Rng + ?Sized>(shape: &[usize], gap: f64, avoid: &[f64], rng: &mut R) -> Tensor {
    loop {
        let t = uniform(shape, -2.0, 2.0, rng);
        let mut v = t.data().to_vec();
        v.extend_from_slice(avoid);
        v.sort_by(f64::total_cmp);
        if v.windows(2).all(|w| w[1] - w[0] > gap) {
            return t;
        }
    }
}

fn random_shape<R: Rng + ?Sized>(rng: &mut R) -> Vec<usize> {
    (0..3).map(|_| rng.random_range(1..=3)).collect()
}

/// Weighted sum with fixed weights, so every output element matters.
fn reduce<'g>(y: Var<'g>, w: &Tensor) -> Result<Var<'g>> {
    let g = y.graph();
    Ok(y.mul(g.leaf(w.clone()))?.sum())
}

type Case = (&'static str, Tensor, Box<dyn for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>>);

fn case<R: Rng + ?Sized>(op: usize, rng: &mut R) -> Case {
    let s = random_shape(rng);
    let n: usize = s.iter().product();
    let w = uniform(&s, -1.0, 1.0, rng);
    let other = uniform(&s, -1.5, 1.5, rng);
    let positive = uniform(&s, 0.5, 2.0, rng);
    macro_rules! unary {
        ($name:expr, $x:expr, |$v:ident| $body:expr) => {{
            let w = w.clone();
            ($name, $x, Box::new(move |_g: &Graph, $v: Var<'_>| reduce($body, &w)))
        }};
    }
    macro_rules! binary {
        ($name:expr, $x:expr, $o:expr, |$v:ident, $c:ident| $body:expr) => {{
            let (w, o) = (w.clone(), $o.clone());
            (
                $name,
                $x,
                Box::new(move |g: &Graph, $v: Var<'_>| {
                    let $c = g.leaf(o.clone());
                    reduce($body, &w)
                }),
            )
        }};
    }
    match op {
        0 => binary!("add", uniform(&s, -2.0, 2.0, rng), other, |x, c| x.add(c)?),
        1 => binary!("sub", uniform(&s, -2.0, 2.0, rng), other, |x, c| c.sub(x)?),
        2 => binary!("mul", uniform(&s, -2.0, 2.0, rng), other, |x, c| x.mul(c)?),
        3 => binary!("div/numerator", uniform(&s, -2.0, 2.0, rng), positive, |x, c| x.div(c)?),
        4 => binary!("div/denominator", positive, other, |x, c| c.div(x)?),
        5 => {
            let o = separated(&s, 1e-3, &[], rng);
            let x = loop {
                let x = uniform(&s, -2.0, 2.0, rng);
                if x.data().iter().zip(o.data()).all(|(a, b)| (a - b).abs() > 1e-3) {
                    break x;
                }
            };
            binary!("minimum", x, o, |x, c| x.minimum(c)?)
        }
        6 => unary!("scale", uniform(&s, -2.0, 2.0, rng), |x| x.scale(-1.7)),
        7 => unary!("neg", uniform(&s, -2.0, 2.0, rng), |x| x.neg()),
        8 => unary!("add_scalar", uniform(&s, -2.0, 2.0, rng), |x| x.add_scalar(0.3)),
        9 => unary!("exp", uniform(&s, -2.0, 2.0, rng), |x| x.exp()),
        10 => unary!("square", uniform(&s, -2.0, 2.0, rng), |x| x.square()),
        11 => unary!("tanh", uniform(&s, -2.0, 2.0, rng), |x| x.tanh()),
        12 => unary!("clamp_min", separated(&s, 1e-3, &[0.1], rng), |x| x.clamp_min(0.1)),
        13 => unary!("ln", positive, |x| x.ln()?),
        14 => unary!("sqrt", positive, |x| x.sqrt()?),
        15 => {
            let k = rng.random_range(1..=3);
            let m = Tensor::from_fn(&[s[1], k], |_| rng.random_range(-1.0..1.0));
            let wk = Tensor::from_fn(&[s[0], k], |_| rng.random_range(-1.0..1.0));
            let x = uniform(&s[..2], -2.0, 2.0, rng);
            ("matmul", x, Box::new(move |g: &Graph, x: Var<'_>| reduce(x.matmul(g.leaf(m.clone()))?, &wk)))
        }
        16 => {
            let wt = w.reshape(&[n]).expect("same size");
            ("reshape", uniform(&s, -2.0, 2.0, rng), Box::new(move |_g: &Graph, x: Var<'_>| reduce(x.reshape(&[n])?, &wt)))
        }
        17 => {
            let wb = uniform(&[2, s[0], s[1], s[2]], -1.0, 1.0, rng);
            let shape = wb.shape().to_vec();
            let x = uniform(&[s[0], 1, s[2]], -2.0, 2.0, rng);
            ("broadcast_to", x, Box::new(move |_g: &Graph, x: Var<'_>| {
                reduce(x.broadcast_to(&[shape[0], shape[1], shape[2], shape[3]])?, &wb)
            }))
        }
        18 => {
            let wp = uniform(&[s[2], s[0], s[1]], -1.0, 1.0, rng);
            ("permute", uniform(&s, -2.0, 2.0, rng), Box::new(move |_g: &Graph, x: Var<'_>| reduce(x.permute(&[2, 0, 1])?, &wp)))
        }
        19 => {
            let wt = uniform(&[s[1], s[0]], -1.0, 1.0, rng);
            ("t", uniform(&s[..2], -2.0, 2.0, rng), Box::new(move |_g: &Graph, x: Var<'_>| reduce(x.t()?, &wt)))
        }
        20 => {
            let ws = uniform(&[s[0], 1, s[2]], -1.0, 1.0, rng);
            ("sum_axes", uniform(&s, -2.0, 2.0, rng), Box::new(move |_g: &Graph, x: Var<'_>| reduce(x.sum_axes(&[1], true)?, &ws)))
        }
        21 => {
            let ws = uniform(&[s[1]], -1.0, 1.0, rng);
            ("mean_axes", uniform(&s, -2.0, 2.0, rng), Box::new(move |_g: &Graph, x: Var<'_>| reduce(x.mean_axes(&[0, 2], false)?, &ws)))
        }
        22 => ("sum", uniform(&s, -2.0, 2.0, rng), Box::new(|_g: &Graph, x: Var<'_>| Ok(x.square().sum()))),
        23 => ("mean", uniform(&s, -2.0, 2.0, rng), Box::new(|_g: &Graph, x: Var<'_>| Ok(x.exp().mean()))),
        24 => {
            let wm = uniform(&[s[0], s[1]], -1.0, 1.0, rng);
            ("max_axis", separated(&s, 1e-3, &[], rng), Box::new(move |_g: &Graph, x: Var<'_>| reduce(x.max_axis(2, false)?, &wm)))
        }
        25 => ("max", separated(&s, 1e-3, &[], rng), Box::new(|_g: &Graph, x: Var<'_>| Ok(x.max().scale(2.0)))),
        26 => {
            let axis = rng.random_range(0..3);
            let w = w.clone();
            ("softmax", uniform(&s, -2.0, 2.0, rng), Box::new(move |_g: &Graph, x: Var<'_>| reduce(x.softmax(axis)?, &w)))
        }
        27 => {
            let k = uniform(&[3, 3], -1.0, 1.0, rng);
            let w = w.clone();
            ("conv2d", uniform(&s, -2.0, 2.0, rng), Box::new(move |_g: &Graph, x: Var<'_>| reduce(x.conv2d(&k)?, &w)))
        }
        28 => {
            // a constant input has a kink in std at zero spread
            let x = loop {
                let x = uniform(&[n.max(2)], -2.0, 2.0, rng);
                if x.std() > 0.1 {
                    break x;
                }
            };
            ("std", x, Box::new(|_g: &Graph, x: Var<'_>| Ok(x.std())))
        }
        29 => {
            let i = rng.random_range(0..s[1]);
            let ws = uniform(&[s[0], s[2]], -1.0, 1.0, rng);
            ("select", uniform(&s, -2.0, 2.0, rng), Box::new(move |_g: &Graph, x: Var<'_>| reduce(x.select(1, i)?, &ws)))
        }
        _ => {
            let ws = uniform(&[3, s[0], s[1], s[2]], -1.0, 1.0, rng);
            ("stack", uniform(&s, -2.0, 2.0, rng), Box::new(move |g: &Graph, x: Var<'_>| {
                let y = g.stack(&[x, x.square(), x.scale(0.5)])?;
                reduce(y, &ws)
            }))
        }
    }
}

pub const NUM_OPS: usize = 31;

/// Run `instances` random cases per op at step `h`; worst relative error
/// per op, in a fixed op order.
pub fn op_suite<R: Rng + ?Sized>(instances: usize, h: f64, rng: &mut R) -> Result<Vec<OpReport>> {
    let mut out = Vec::with_capacity(NUM_OPS);
    for op in 0..NUM_OPS {
        let mut worst: f64 = 0.0;
        let mut name = "";
        for _ in 0..instances {
            let (n, x, f) = case(op, rng);
            name = n;
            worst = worst.max(grad_check_with(|g, v| f(g, v), &x, h, SUITE_FLOOR)?);
        }
        out.push(OpReport {
            op: name,
            instances,
            worst,
        });
    }
    Ok(out)
}
