//! Reference implementations shared by the integration tests. Nothing here
//! calls into the engine's kernels, so agreement is evidence rather than
//! tautology.
#![allow(dead_code)]

use copanet::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let normal = Normal::new(0.0, std).unwrap();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| normal.sample(rng)).collect()).unwrap()
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Relative error with a small absolute floor on the denominator.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Builds a scalar on a fresh tape from the given inputs; returns the scalar
/// and one var per input.
pub type Graph<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Var + 'a;

/// Max relative error of tape gradients against central differences over
/// every element of every input.
pub fn fd_check(inputs: &[Tensor<f64>], graph: &Graph<'_>, floor: f64) -> f64 {
    let scalar = |xs: &[Tensor<f64>]| {
        let mut t = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| t.variable(x.clone())).collect();
        let out = graph(&mut t, &vars);
        t.value(out).data()[0]
    };
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.variable(x.clone())).collect();
    let out = graph(&mut t, &vars);
    t.backward(out).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| t.grad(v).map_or(vec![0.0; x.numel()], |g| g.data().to_vec()))
        .collect();
    let mut xs = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            xs[i].data_mut()[j] = x0 + FD_STEP;
            let up = scalar(&xs);
            xs[i].data_mut()[j] = x0 - FD_STEP;
            let down = scalar(&xs);
            xs[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i][j], numeric, floor));
        }
    }
    worst
}

/// Direct-loop convolution, NCHW input and OIHW weight.
pub fn conv_ref(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * ho * wo];
    for b in 0..n {
        for oc in 0..o {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for di in 0..kh {
                            for dj in 0..kw {
                                let y = (i * stride + di) as isize - pad as isize;
                                let z = (j * stride + dj) as isize - pad as isize;
                                if y < 0 || z < 0 || y >= h as isize || z >= wd as isize {
                                    continue;
                                }
                                acc += x.at(&[b, ic, y as usize, z as usize]) * w.at(&[oc, ic, di, dj]);
                            }
                        }
                    }
                    out[((b * o + oc) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, o, ho, wo], out).unwrap()
}

/// Training-mode batch norm with batch statistics (biased variance).
pub fn bn_ref(x: &Tensor<f64>, gamma: &[f64], beta: &[f64], eps: f64) -> Tensor<f64> {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let plane: usize = x.shape()[2..].iter().product();
    let mut out = x.clone();
    for ch in 0..c {
        let vals: Vec<f64> = (0..n)
            .flat_map(|b| (0..plane).map(move |p| (b, p)))
            .map(|(b, p)| x.data()[(b * c + ch) * plane + p])
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        for b in 0..n {
            for p in 0..plane {
                let i = (b * c + ch) * plane + p;
                out.data_mut()[i] = gamma[ch] * (x.data()[i] - mean) / (var + eps).sqrt() + beta[ch];
            }
        }
    }
    out
}

/// Per-channel mean and (biased) standard deviation of an NCHW tensor.
pub fn channel_moments(x: &Tensor<f64>) -> Vec<(f64, f64)> {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let plane: usize = x.shape()[2..].iter().product();
    (0..c)
        .map(|ch| {
            let vals: Vec<f64> = (0..n)
                .flat_map(|b| (0..plane).map(move |p| (b, p)))
                .map(|(b, p)| x.data()[(b * c + ch) * plane + p])
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64;
            (m, v.sqrt())
        })
        .collect()
}

/// Mean softmax cross-entropy computed in the obvious way.
pub fn cross_entropy_ref(logits: &[f64], classes: usize, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.chunks(classes).zip(labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / labels.len() as f64
}

/// Like [`fd_check`] for computations that report their own gradients:
/// `run` returns the scalar and its gradient with respect to each input.
pub fn fd_check_with(
    inputs: &[Tensor<f64>],
    run: &dyn Fn(&[Tensor<f64>]) -> (f64, Vec<Tensor<f64>>),
    floor: f64,
) -> f64 {
    let (_, analytic) = run(inputs);
    let mut xs = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            xs[i].data_mut()[j] = x0 + FD_STEP;
            let up = run(&xs).0;
            xs[i].data_mut()[j] = x0 - FD_STEP;
            let down = run(&xs).0;
            xs[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i].data()[j], numeric, floor));
        }
    }
    worst
}
