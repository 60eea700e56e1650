#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rdfcil::autograd::{Graph, Var};
use rdfcil::nn::{HasParams, Param};
use rdfcil::tensor::Tensor;

pub const FD_STEP: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `|a - n| / max(|a|, |n|)` over whole vectors; 0 when both are (near) zero.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of a scalar function of one tensor.
pub fn numeric_grad(x: &Tensor<f64>, f: &dyn Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
    (0..x.numel())
        .map(|i| {
            let mut p = x.clone();
            p.data_mut()[i] += FD_STEP;
            let mut m = x.clone();
            m.data_mut()[i] -= FD_STEP;
            (f(&p) - f(&m)) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Relative error between the tape gradient and central differences with respect to `x`.
pub fn input_grad_error(x: &Tensor<f64>, build: &dyn Fn(&mut Graph<f64>, Var) -> Var) -> f64 {
    let mut g = Graph::new();
    let v = g.input(x.clone());
    let loss = build(&mut g, v);
    let grads = g.backward(loss).unwrap();
    let analytic = grads
        .wrt(v)
        .map(|t| t.data().to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);
    let f = |t: &Tensor<f64>| {
        let mut g = Graph::new();
        let v = g.input(t.clone());
        let l = build(&mut g, v);
        g.value(l).item()
    };
    rel_err(&analytic, &numeric_grad(x, &f))
}

/// Same check for every parameter of a module, perturbing parameters in place.
pub fn param_grad_error<M: HasParams<f64> + Clone>(module: &M, build: &dyn Fn(&mut Graph<f64>, &M) -> Var) -> f64 {
    let mut g = Graph::new();
    let loss = build(&mut g, module);
    let grads = g.backward(loss).unwrap();
    let mut analytic = Vec::new();
    let mut shapes = Vec::new();
    let mut probe = module.clone();
    probe.visit_params(&mut |p: &mut Param<f64>| {
        match grads.param(p.id()) {
            Some(t) => analytic.extend_from_slice(t.data()),
            None => analytic.extend(std::iter::repeat(0.0).take(p.value.numel())),
        }
        shapes.push(p.value.numel());
    });
    let eval = |m: &M| {
        let mut g = Graph::new();
        let l = build(&mut g, m);
        g.value(l).item()
    };
    let mut numeric = Vec::new();
    for (k, &n) in shapes.iter().enumerate() {
        for i in 0..n {
            let perturb = |delta: f64| {
                let mut m = module.clone();
                let mut idx = 0;
                m.visit_params(&mut |p: &mut Param<f64>| {
                    if idx == k {
                        p.value.data_mut()[i] += delta;
                    }
                    idx += 1;
                });
                eval(&m)
            };
            numeric.push((perturb(FD_STEP) - perturb(-FD_STEP)) / (2.0 * FD_STEP));
        }
    }
    rel_err(&analytic, &numeric)
}

/// Mean over distinct ordered triplets `(a, b, c)` of `|cos_t - cos_s|`, angle at `b`,
/// skipping triplets with a near-zero edge in either set.
pub fn brute_force_rkd(teacher: &[Vec<f64>], student: &[Vec<f64>]) -> f64 {
    let n = teacher.len();
    let norm = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let cos = |p: &[Vec<f64>], a: usize, b: usize, c: usize| {
        let e1: Vec<f64> = p[a].iter().zip(&p[b]).map(|(x, y)| x - y).collect();
        let e2: Vec<f64> = p[c].iter().zip(&p[b]).map(|(x, y)| x - y).collect();
        let n1 = e1.iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-8;
        let n2 = e2.iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-8;
        let d: f64 = e1.iter().zip(&e2).map(|(x, y)| x * y).sum();
        (d / (n1 * n2)).clamp(-1.0, 1.0)
    };
    let mut total = 0.0;
    let mut count = 0usize;
    for a in 0..n {
        for b in 0..n {
            for c in 0..n {
                if a == b || b == c || a == c {
                    continue;
                }
                count += 1;
                let ok = |p: &[Vec<f64>]| norm(&p[a], &p[b]) >= 1e-6 && norm(&p[c], &p[b]) >= 1e-6;
                if ok(teacher) && ok(student) {
                    total += (cos(teacher, a, b, c) - cos(student, a, b, c)).abs();
                }
            }
        }
    }
    total / count.max(1) as f64
}

pub fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.dim(0)).map(|r| t.row(r).to_vec()).collect()
}

/// `x W^T + b` for a `[n, d]` tensor.
pub fn affine(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Vec<Vec<f64>> {
    let (n, d, o) = (x.dim(0), x.dim(1), w.dim(0));
    (0..n)
        .map(|r| {
            (0..o)
                .map(|j| {
                    let s: f64 = (0..d).map(|k| x.data()[r * d + k] * w.data()[j * d + k]).sum();
                    s + b.map_or(0.0, |b| b.data()[j])
                })
                .collect()
        })
        .collect()
}

pub mod suite;
