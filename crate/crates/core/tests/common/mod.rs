#![allow(dead_code)]

use emha::ndtensor::{finite_diff_grad, max_relative_error, Tape, Tensor, Var};
use emha::rng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn gen(seed: u64) -> ChaCha8Rng {
    rng::stream(seed, 0x7e57)
}

pub fn randn(g: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| g.gen_range(-1.0..1.0))
}

/// Row-stochastic `[m, t, t]` maps with strictly positive entries.
pub fn random_maps(g: &mut ChaCha8Rng, m: usize, t: usize) -> Tensor {
    let mut a = Tensor::from_fn(&[m, t, t], |_| g.gen_range(0.01..1.0));
    for row in a.data_mut().chunks_mut(t) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    a
}

/// Checks `d/dx_i sum(f(x) * R)` for every input against central differences.
pub fn check_op<F>(inputs: &[Tensor], seed: u64, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> emha::Result<Var>,
{
    let weights = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars).unwrap();
        randn(&mut gen(seed ^ 0xabc), tape.shape(out))
    };
    let loss_of = |xs: &[Tensor]| -> emha::Result<(Tape, Var, Vec<Var>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let weighted = tape.mul_const(out, &weights)?;
        let loss = tape.sum(weighted)?;
        Ok((tape, loss, vars))
    };
    let (tape, loss, vars) = loss_of(inputs).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[i], x.shape());
        let numeric = finite_diff_grad(
            |probe| {
                let mut xs = inputs.to_vec();
                xs[i] = probe.clone();
                let (tape, loss, _) = loss_of(&xs)?;
                Ok(tape.value(loss).data()[0])
            },
            x,
            1e-5,
        )
        .unwrap();
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    worst
}

/// Direct 6-deep loop over (oc, y, x, icg, ky, kx) with zero padding.
pub fn naive_conv(input: &Tensor, kernel: &Tensor, bias: &Tensor, groups: usize) -> Tensor {
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (c_out, ipg, kh, kw) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2], kernel.shape()[3]);
    assert_eq!(ipg * groups, c_in);
    let opg = c_out / groups;
    let mut out = Tensor::zeros(&[c_out, h, w]);
    for oc in 0..c_out {
        let g = oc / opg;
        for y in 0..h {
            for x in 0..w {
                let mut s = bias.data()[oc];
                for icg in 0..ipg {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = y as isize + ky as isize - (kh / 2) as isize;
                            let ix = x as isize + kx as isize - (kw / 2) as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            s += kernel.at(&[oc, icg, ky, kx]) * input.at(&[g * ipg + icg, iy as usize, ix as usize]);
                        }
                    }
                }
                out.set(&[oc, y, x], s);
            }
        }
    }
    out
}

pub fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.at(&[i, p]) * b.at(&[p, j]);
            }
            out.set(&[i, j], s);
        }
    }
    out
}

pub fn naive_transpose(a: &Tensor) -> Tensor {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    Tensor::from_fn(&[n, m], |i| a.at(&[i % m, i / m]))
}

pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

// Metric oracles written as plain loops over the definitions.

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

pub fn row(a: &Tensor, h: usize, q: usize) -> Vec<f64> {
    let t = a.shape()[1];
    (0..t).map(|s| a.at(&[h, q, s])).collect()
}

pub fn hd_oracle(samples: &[Tensor]) -> f64 {
    let mut total = 0.0;
    for a in samples {
        let (m, t) = (a.shape()[0], a.shape()[1]);
        let mut s = 0.0;
        for j in 0..m {
            for k in 0..m {
                for q in 0..t {
                    s += cos(&row(a, j, q), &row(a, k, q));
                }
            }
        }
        total += (s / t as f64 - m as f64) / (m * (m - 1)) as f64;
    }
    total / samples.len() as f64
}

pub fn pearson_oracle(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
    let sa = (a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n).sqrt();
    let sb = (b.iter().map(|y| (y - mb).powi(2)).sum::<f64>() / n).sqrt();
    cov / (sa * sb)
}

pub fn tc_oracle(samples: &[Tensor]) -> f64 {
    let mut total = 0.0;
    for x in samples {
        let (t, d) = (x.shape()[0], x.shape()[1]);
        let tok = |i: usize| &x.data()[i * d..(i + 1) * d];
        let mut s = 0.0;
        for j in 0..t {
            for k in 0..t {
                s += pearson_oracle(tok(j), tok(k));
            }
        }
        total += (s - t as f64) / (t * (t - 1)) as f64;
    }
    total / samples.len() as f64
}

pub fn localness_oracle(a: &Tensor, w: usize) -> f64 {
    let (m, t) = (a.shape()[0], a.shape()[1]);
    let back = (w - 1).div_ceil(2) as isize;
    let fwd = ((w - 1) / 2) as isize;
    let mut s = 0.0;
    for h in 0..m {
        for q in 0..t {
            for k in 0..t {
                let off = k as isize - q as isize;
                if -back <= off && off <= fwd {
                    s += a.at(&[h, q, k]);
                }
            }
        }
    }
    s / (m * t) as f64
}
