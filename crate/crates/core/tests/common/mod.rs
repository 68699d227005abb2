//! Brute-force oracles and small fixtures shared by the integration tests.
#![allow(dead_code)]

use attn_transfer::backbone::{BackboneConfig, Variant};
use attn_transfer::Tensor;
use rand::Rng;

/// Small backbone used wherever a network has to be trained in a test.
pub fn desk_config(variant: Variant) -> BackboneConfig {
    BackboneConfig {
        stage_channels: [8, 16, 32, 64],
        blocks_per_stage: [1, 1, 1, 1],
        input_size: 32,
        ..BackboneConfig::preset(variant)
    }
}

/// Even smaller backbone for finite-difference checks.
pub fn tiny_config(variant: Variant) -> BackboneConfig {
    BackboneConfig {
        stage_channels: [4, 4, 8, 8],
        blocks_per_stage: [1, 1, 1, 1],
        input_size: 16,
        ..BackboneConfig::preset(variant)
    }
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest elementwise difference relative to the largest oracle magnitude.
pub fn tensor_rel_err(got: &Tensor, want: &Tensor) -> f64 {
    assert_eq!(got.shape(), want.shape());
    let scale = want.data().iter().fold(1e-300f64, |m, v| m.max(v.abs()));
    got.max_abs_diff(want) / scale
}

pub fn random_unit<R: Rng>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

pub fn random_simplex<R: Rng>(k: usize, rng: &mut R) -> Vec<f64> {
    let v: Vec<f64> = (0..k).map(|_| -rng.random_range(1e-9f64..1.0).ln()).collect();
    let s: f64 = v.iter().sum();
    v.iter().map(|x| x / s).collect()
}

/// Direct zero-padded convolution of an `n x h x w x c` tensor with a
/// `kh x kw x c x o` kernel.
pub fn conv2d_naive(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kh, kw, o) = (k.shape()[0], k.shape()[1], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[n, oh, ow, o]);
    for b in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                for f in 0..o {
                    let mut acc = 0.0;
                    for di in 0..kh {
                        for dj in 0..kw {
                            let (y, xx) = ((i * stride + di) as isize - pad as isize, (j * stride + dj) as isize - pad as isize);
                            if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                continue;
                            }
                            for ch in 0..c {
                                acc += x.at(&[b, y as usize, xx as usize, ch]) * k.at(&[di, dj, ch, f]);
                            }
                        }
                    }
                    out.set(&[b, i, j, f], acc);
                }
            }
        }
    }
    out
}

/// `-ln(e^{l_t} / sum e^{l})` without any stabilization.
pub fn cross_entropy_naive(logits: &[f64], target: usize) -> f64 {
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    -(logits[target].exp() / z).ln()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// InfoNCE written out term by term.
pub fn contrastive_naive(q: &[f64], k: &[f64], negatives: &[Vec<f64>], tau: f64) -> f64 {
    let pos = (dot(q, k) / tau).exp();
    let neg: f64 = negatives.iter().map(|n| (dot(q, n) / tau).exp()).sum();
    -(pos / (pos + neg)).ln()
}

/// `P(y | z)` and the LEEP score via explicit counting loops.
pub fn leep_naive(dist: &[Vec<f64>], labels: &[usize], ny: usize) -> (Vec<Vec<f64>>, f64) {
    let nz = dist[0].len();
    let n = dist.len() as f64;
    let mut cond = vec![vec![0.0; nz]; ny];
    for z in 0..nz {
        let mut pz = 0.0;
        for row in dist {
            pz += row[z] / n;
        }
        for (y, c) in cond.iter_mut().enumerate() {
            let mut pyz = 0.0;
            for (row, &l) in dist.iter().zip(labels) {
                if l == y {
                    pyz += row[z] / n;
                }
            }
            c[z] = pyz / pz;
        }
    }
    let mut total = 0.0;
    for (row, &y) in dist.iter().zip(labels) {
        let mut eep = 0.0;
        for z in 0..nz {
            eep += cond[y][z] * row[z];
        }
        total += eep.ln();
    }
    (cond, total / n)
}

/// Fraction of (positive, negative) pairs ranked correctly, ties counting half.
pub fn auc_naive(scores: &[f64], labels: &[usize]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                wins += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

/// `2 tp / (2 tp + fp + fn)`, zero when there is nothing to match.
pub fn f1_naive(preds: &[usize], labels: &[usize]) -> f64 {
    let tp = preds.iter().zip(labels).filter(|&(&p, &l)| p == 1 && l == 1).count() as f64;
    let fp = preds.iter().zip(labels).filter(|&(&p, &l)| p == 1 && l != 1).count() as f64;
    let fnn = preds.iter().zip(labels).filter(|&(&p, &l)| p != 1 && l == 1).count() as f64;
    if tp == 0.0 {
        0.0
    } else {
        2.0 * tp / (2.0 * tp + fp + fnn)
    }
}

/// Central-difference check for an object that owns its parameter store
/// (a model or a head): `f` builds a scalar loss from `owner`, whose store
/// `params` exposes is perturbed in place.
pub fn grad_check_owner<T, F>(
    owner: &mut T,
    params: fn(&mut T) -> &mut attn_transfer::ParamStore,
    f: F,
    step: f64,
    coords: &[(usize, usize)],
) -> attn_transfer::Result<f64>
where
    F: Fn(&T, &mut attn_transfer::Graph) -> attn_transfer::Result<attn_transfer::Var>,
{
    params(owner).zero_grad();
    let mut g = attn_transfer::Graph::new();
    let y = f(owner, &mut g)?;
    let grads = g.backward(y)?;
    g.accumulate_into(&grads, params(owner));
    let analytic: Vec<Tensor> = params(owner).iter().map(|p| p.grad.clone()).collect();
    let mut eval = |pi: usize, ei: usize, delta: f64| -> attn_transfer::Result<f64> {
        let v = &mut params(owner).iter_mut().nth(pi).expect("parameter index").value.data_mut()[ei];
        let original = *v;
        *v = original + delta;
        let mut g = attn_transfer::Graph::no_grad();
        let y = f(owner, &mut g).map(|y| g.value(y).item());
        params(owner).iter_mut().nth(pi).unwrap().value.data_mut()[ei] = original;
        y
    };
    let mut worst = 0.0f64;
    for &(pi, ei) in coords {
        let numeric = (eval(pi, ei, step)? - eval(pi, ei, -step)?) / (2.0 * step);
        worst = worst.max(attn_transfer::gradcheck::relative_error(analytic[pi].data()[ei], numeric));
    }
    Ok(worst)
}
