mod common;

use attn_transfer::attention::default_inner_dim;
use attn_transfer::autodiff::{conv2d, global_avg_pool};
use attn_transfer::backbone::{Mode, Model, Variant, BN_EPS, STAGE_NAMES};
use attn_transfer::{Graph, Tensor};
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn param(m: &Model, name: &str) -> Tensor {
    m.params.iter().find(|p| p.name == name).unwrap_or_else(|| panic!("no parameter {name}")).value.clone()
}

fn buffer(m: &Model, name: &str) -> Vec<f64> {
    m.buffers().into_iter().find(|(n, _)| n == name).unwrap().1
}

fn bn_eval(m: &Model, name: &str, x: &Tensor) -> Tensor {
    let (g, b) = (param(m, &format!("{name}.gamma")), param(m, &format!("{name}.beta")));
    let (mean, var) = (buffer(m, &format!("{name}.running_mean")), buffer(m, &format!("{name}.running_var")));
    let c = g.len();
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let k = i % c;
        *v = g.data()[k] * (*v - mean[k]) / (var[k] + BN_EPS).sqrt() + b.data()[k];
    }
    out
}

fn conv_bn(m: &Model, name: &str, x: &Tensor, stride: usize) -> Tensor {
    let k = param(m, &format!("{name}.conv"));
    let pad = k.shape()[0] / 2;
    bn_eval(m, &format!("{name}.bn"), &conv2d(x, &k, stride, pad).unwrap())
}

fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

fn add(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()).unwrap()
}

/// `x + W_out fold(V A)` written with explicit loops over positions.
fn attention_oracle(m: &Model, name: &str, x: &Tensor) -> Tensor {
    let (n, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let proj = |p: &str| param(m, &format!("{name}.{p}"));
    let (wq, wk, wv, wo) = (proj("w_q"), proj("w_k"), proj("w_v"), proj("w_out"));
    let (dk, dv) = (wq.shape()[3], wv.shape()[3]);
    let hw = h * w;
    let mut out = x.clone();
    for b in 0..n {
        let pix = |p: usize, ch: usize| x.at(&[b, p / w, p % w, ch]);
        let project = |wt: &Tensor, d: usize| -> Vec<Vec<f64>> {
            (0..hw).map(|p| (0..d).map(|j| (0..c).map(|ch| pix(p, ch) * wt.at(&[0, 0, ch, j])).sum()).collect()).collect()
        };
        let (q, k, v) = (project(&wq, dk), project(&wk, dk), project(&wv, dv));
        for i in 0..hw {
            // column i of A: softmax over j of k_j . q_i
            let scores: Vec<f64> = (0..hw).map(|j| dot(&k[j], &q[i])).collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            let mixed: Vec<f64> = (0..dv).map(|d| (0..hw).map(|j| v[j][d] * e[j] / z).sum()).collect();
            for ch in 0..c {
                let delta: f64 = (0..dv).map(|d| mixed[d] * wo.at(&[0, 0, d, ch])).sum();
                let idx = [b, i / w, i % w, ch];
                out.set(&idx, out.at(&idx) + delta);
            }
        }
    }
    out
}

fn forward_oracle(m: &Model, x: &Tensor) -> Tensor {
    let cfg = &m.config;
    let mut h = relu(&conv_bn(m, "stem", x, 2));
    let mut cin = cfg.stage_channels[0];
    for (si, stage) in STAGE_NAMES.iter().enumerate() {
        for bi in 0..cfg.blocks_per_stage[si] {
            let stride = if bi == 0 && si > 0 { 2 } else { 1 };
            let p = format!("{stage}.{bi}");
            let a = relu(&conv_bn(m, &format!("{p}.a"), &h, stride));
            let b = conv_bn(m, &format!("{p}.b"), &a, 1);
            let skip = if stride != 1 || cin != cfg.stage_channels[si] { conv_bn(m, &format!("{p}.down"), &h, stride) } else { h.clone() };
            h = relu(&add(&b, &skip));
            cin = cfg.stage_channels[si];
        }
        for ai in 0..cfg.attn_count(stage) {
            h = attention_oracle(m, &format!("{stage}.attn{ai}"), &h);
        }
    }
    let f = global_avg_pool(&h).unwrap();
    let (wt, bias) = (param(m, "head.weight"), param(m, "head.bias"));
    let (n, d, k) = (f.shape()[0], wt.shape()[0], wt.shape()[1]);
    let data = (0..n).flat_map(|i| (0..k).map(|j| (0..d).map(|t| f.at(&[i, t]) * wt.at(&[t, j])).sum::<f64>() + bias.data()[j]).collect::<Vec<_>>()).collect();
    Tensor::new(vec![n, k], data).unwrap()
}

#[test]
fn eval_forward_matches_layer_by_layer_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for variant in Variant::ALL {
        let mut m = Model::new(tiny_config(variant), &mut rng).unwrap();
        // non-trivial affine and running statistics everywhere
        for p in m.params.iter_mut().filter(|p| p.name.contains(".bn.")) {
            p.value = Tensor::uniform(p.value.shape(), 0.5, 1.5, &mut rng);
        }
        for (name, v) in m.buffers() {
            let vals: Vec<f64> = if name.ends_with("var") {
                (0..v.len()).map(|_| rng.random_range(0.5..2.0)).collect()
            } else {
                (0..v.len()).map(|_| rng.random_range(-0.5..0.5)).collect()
            };
            m.set_buffer(&name, &vals).unwrap();
        }
        let x = Tensor::uniform(&[2, 16, 16, 1], 0.0, 1.0, &mut rng);
        let got = m.classify(&x).unwrap();
        let want = forward_oracle(&m, &x);
        assert!(tensor_rel_err(&got, &want) < 1e-12, "{variant}: {}", tensor_rel_err(&got, &want));
    }
}

#[test]
fn attention_adds_exactly_its_projection_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut count = |v| Model::new(desk_config(v), &mut rng).unwrap().params.num_scalars();
    let (base, one, five) = (count(Variant::Baseline), count(Variant::OneAttn), count(Variant::FiveAttns));
    let block = |c: usize| 4 * c * default_inner_dim(c);
    let ch = desk_config(Variant::Baseline).stage_channels;
    assert_eq!(one - base, block(ch[1]));
    assert_eq!(five - base, 2 * block(ch[1]) + 2 * block(ch[2]) + block(ch[3]));
}

#[test]
fn train_mode_normalizes_each_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut m = Model::new(tiny_config(Variant::Baseline), &mut rng).unwrap();
    let x = Tensor::uniform(&[4, 16, 16, 1], 0.0, 1.0, &mut rng);
    let before = m.buffers();
    let mut g = Graph::new();
    let xv = g.constant(x);
    let z = m.forward_logits(&mut g, xv, Mode::Train).unwrap();
    assert_eq!(g.shape(z), &[4, 2]);
    assert_ne!(m.buffers(), before);
}

#[test]
fn recalibration_averages_batch_statistics_by_size() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut m = Model::new(tiny_config(Variant::OneAttn), &mut rng).unwrap();
    let a = Tensor::uniform(&[3, 16, 16, 1], 0.0, 1.0, &mut rng);
    let b = Tensor::uniform(&[1, 16, 16, 1], 0.2, 0.9, &mut rng);
    m.recalibrate_batch_norm(&[a.clone(), b.clone()]).unwrap();

    // the stem sees the raw input, so its mean is the pooled channel mean
    let k = param(&m, "stem.conv");
    let pre = |t: &Tensor| conv2d(t, &k, 2, 1).unwrap();
    let (pa, pb) = (pre(&a), pre(&b));
    let c = k.shape()[3];
    let chan_mean = |t: &Tensor, ch: usize| t.data().iter().skip(ch).step_by(c).sum::<f64>() / (t.len() / c) as f64;
    let got = buffer(&m, "stem.bn.running_mean");
    for ch in 0..c {
        let want = (3.0 * chan_mean(&pa, ch) + chan_mean(&pb, ch)) / 4.0;
        assert!((got[ch] - want).abs() < 1e-12);
    }

    let frozen = m.buffers();
    m.recalibrate_batch_norm(&[]).unwrap();
    assert_eq!(m.buffers(), frozen);
}

#[test]
fn deferred_statistics_commit_like_a_direct_pass() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m = Model::new(tiny_config(Variant::FiveAttns), &mut rng).unwrap();
    let x = Tensor::uniform(&[2, 16, 16, 1], 0.0, 1.0, &mut rng);
    let mut direct = m.clone();
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    direct.forward_features(&mut g, xv, Mode::Train).unwrap();

    let mut deferred = m.clone();
    let mut g = Graph::new();
    let xv = g.constant(x);
    let (_, sink) = deferred.forward_features_deferred(&mut g, xv, Mode::Train).unwrap();
    assert_eq!(deferred.buffers(), m.buffers());
    deferred.commit_stats(sink);
    assert_eq!(deferred.buffers(), direct.buffers());
}

#[test]
fn wrong_input_size_is_a_dimension_error() {
    let m = Model::new(tiny_config(Variant::Baseline), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(matches!(m.classify(&Tensor::zeros(&[1, 15, 16, 1])), Err(attn_transfer::Error::Dimension(_))));
}
