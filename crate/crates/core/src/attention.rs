//! Spatial self-attention layer for convolutional feature maps.
//!
//! Given `X` of shape `h x w x c`, three 1x1 projections give query `Q`, key
//! `K` (both `d_k` channels) and value `V` (`d_v` channels). With each tensor
//! unfolded along its channel mode into a `d x hw` matrix,
//!
//! ```text
//! A = softmax_columns(K^T Q)          (hw x hw, column j attends for position j)
//! O = X + W_out * fold(V A)
//! ```
//!
//! The affinities are not scaled by `1/sqrt(d_k)`.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{dim_err, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Column-stochastic `hw x hw` attention weights of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub weights: Tensor,
}

impl AttentionMap {
    pub fn positions(&self) -> usize {
        self.weights.shape()[0]
    }

    /// Sum of column `j`.
    pub fn column_sum(&self, j: usize) -> f64 {
        let n = self.positions();
        (0..n).map(|i| self.weights.data()[i * n + j]).sum()
    }
}

#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub name: String,
    pub channels: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_out: ParamId,
}

/// Graph handles produced by [`AttentionBlock::forward`].
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    /// `X + W_out * fold(V A)`.
    pub output: Var,
    /// `W_out * fold(V A)`, before the residual add.
    pub pre_residual: Var,
    /// Row-softmax of `Q K^T`, shape `n x hw x hw`; the transpose of each
    /// sample's column-stochastic map.
    pub attention: Var,
}

/// `floor(c / 2)`, at least one.
pub fn default_inner_dim(channels: usize) -> usize {
    (channels / 2).max(1)
}

impl AttentionBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        d_k: usize,
        d_v: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if channels == 0 || d_k == 0 || d_v == 0 {
            return dim_err(format!("attention dims must be positive: c={channels} d_k={d_k} d_v={d_v}"));
        }
        let in_std = (1.0 / channels as f64).sqrt();
        let w_q = store.add(format!("{name}.w_q"), Tensor::randn(&[1, 1, channels, d_k], in_std, rng))?;
        let w_k = store.add(format!("{name}.w_k"), Tensor::randn(&[1, 1, channels, d_k], in_std, rng))?;
        let w_v = store.add(format!("{name}.w_v"), Tensor::randn(&[1, 1, channels, d_v], in_std, rng))?;
        // small output projection: the block starts close to the identity map
        let out_std = 0.1 * (1.0 / d_v as f64).sqrt();
        let w_out =
            store.add(format!("{name}.w_out"), Tensor::randn(&[1, 1, d_v, channels], out_std, rng))?;
        Ok(Self { name: name.to_string(), channels, d_k, d_v, w_q, w_k, w_v, w_out })
    }

    pub fn with_default_dims<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let d = default_inner_dim(channels);
        Self::new(store, name, channels, d, d, rng)
    }

    pub fn num_scalars(&self) -> usize {
        2 * self.channels * self.d_k + 2 * self.channels * self.d_v
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.w_q, self.w_k, self.w_v, self.w_out]
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<AttentionVars> {
        let xs = g.shape(x).to_vec();
        let (n, h, w, c) = match xs[..] {
            [h, w, c] => (1, h, w, c),
            [n, h, w, c] => (n, h, w, c),
            _ => return dim_err(format!("attention input must be an image tensor, got {xs:?}")),
        };
        if c != self.channels {
            return dim_err(format!("attention block expects {} channels, got {c}", self.channels));
        }
        let hw = h * w;
        let wq = g.param(store, self.w_q);
        let wk = g.param(store, self.w_k);
        let wv = g.param(store, self.w_v);
        let wo = g.param(store, self.w_out);
        let q = g.conv2d(x, wq, 1, 0)?;
        let k = g.conv2d(x, wk, 1, 0)?;
        let v = g.conv2d(x, wv, 1, 0)?;
        // position-major rows: [n, hw, d] is the transpose of each unfolded d x hw matrix
        let q = g.reshape(q, &[n, hw, self.d_k])?;
        let k = g.reshape(k, &[n, hw, self.d_k])?;
        let v = g.reshape(v, &[n, hw, self.d_v])?;
        let scores = g.matmul_t(q, k, false, true)?;
        let attention = g.softmax_rows(scores);
        let mixed = g.matmul(attention, v)?;
        let mixed = g.reshape(mixed, &[n, h, w, self.d_v])?;
        let mut pre_residual = g.conv2d(mixed, wo, 1, 0)?;
        if xs.len() == 3 {
            pre_residual = g.reshape(pre_residual, &xs)?;
        }
        let output = g.add(x, pre_residual)?;
        Ok(AttentionVars { output, pre_residual, attention })
    }

    /// Evaluates the block on one `h x w x c` tensor, returning the output and
    /// the attention map.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, AttentionMap)> {
        if x.ndim() != 3 {
            return dim_err(format!("apply expects h x w x c, got {:?}", x.shape()));
        }
        let mut g = Graph::no_grad();
        let xv = g.constant(x.clone());
        let vars = self.forward(&mut g, store, xv)?;
        let map = attention_map(&g, vars.attention, 0)?;
        Ok((g.value(vars.output).clone(), map))
    }
}

/// Extracts sample `i`'s column-stochastic map from the row-softmax node.
pub fn attention_map(g: &Graph, attention: Var, sample: usize) -> Result<AttentionMap> {
    let rows = g.value(attention).index_axis0(sample);
    Ok(AttentionMap { weights: rows.transpose()? })
}

/// Mode-3 unfolding: `h x w x d` to `d x hw`, column `j` holding the channel
/// vector at row-major position `j`.
pub fn unfold_mode3(x: &Tensor) -> Result<Tensor> {
    let &[h, w, d] = x.shape() else {
        return dim_err(format!("unfold_mode3 needs h x w x d, got {:?}", x.shape()));
    };
    Tensor::matrix(h * w, d, x.data().to_vec())?.transpose()
}

/// Inverse of [`unfold_mode3`].
pub fn fold_mode3(m: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let &[d, hw] = m.shape() else {
        return dim_err(format!("fold_mode3 needs a matrix, got {:?}", m.shape()));
    };
    if hw != h * w {
        return dim_err(format!("cannot fold {hw} columns into {h}x{w}"));
    }
    m.transpose()?.reshape(&[h, w, d])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(c: usize, d: usize, seed: u64) -> (ParamStore, AttentionBlock) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let b = AttentionBlock::new(&mut store, "attn", c, d, d, &mut rng).unwrap();
        // make the output projection non-negligible for the checks below
        let wo = b.w_out;
        store.get_mut(wo).value = Tensor::randn(&[1, 1, d, c], 0.7, &mut rng);
        (store, b)
    }

    /// Row vector times matrix, spelled out.
    fn project(v: &[f64], w: &Tensor) -> Vec<f64> {
        let (ci, co) = (w.shape()[2], w.shape()[3]);
        (0..co).map(|o| (0..ci).map(|i| v[i] * w.data()[i * co + o]).sum()).collect()
    }

    #[test]
    fn unfold_layout() {
        let x = Tensor::new(vec![2, 2, 1], vec![1., 2., 3., 4.]).unwrap();
        let m = unfold_mode3(&x).unwrap();
        assert_eq!(m.shape(), &[1, 4]);
        assert_eq!(m.data(), &[1., 2., 3., 4.]);

        let single = Tensor::new(vec![1, 1, 3], vec![5., 6., 7.]).unwrap();
        let m = unfold_mode3(&single).unwrap();
        assert_eq!(m.shape(), &[3, 1]);
        assert_eq!(m.data(), &[5., 6., 7.]);
    }

    #[test]
    fn fold_unfold_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[3, 3, 4], 1.0, &mut rng);
        assert_eq!(fold_mode3(&unfold_mode3(&x).unwrap(), 3, 3).unwrap(), x);
    }

    #[test]
    fn single_position_passes_projected_value() {
        let (store, b) = block(3, 2, 2);
        let x = Tensor::new(vec![1, 1, 3], vec![0.3, -1.2, 0.8]).unwrap();
        let mut g = Graph::no_grad();
        let xv = g.constant(x.clone());
        let vars = b.forward(&mut g, &store, xv).unwrap();
        assert_eq!(g.value(vars.attention).data(), &[1.0]);
        let v = project(x.data(), store.value(b.w_v));
        let expected = project(&v, store.value(b.w_out));
        let got = g.value(vars.pre_residual).data();
        for (a, e) in got.iter().zip(&expected) {
            assert!((a - e).abs() < 1e-14);
        }
    }

    #[test]
    fn identical_keys_give_uniform_attention() {
        let (mut store, b) = block(2, 2, 3);
        store.get_mut(b.w_k).value = Tensor::zeros(&[1, 1, 2, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[2, 3, 2], 1.0, &mut rng);
        let mut g = Graph::no_grad();
        let xv = g.constant(x.clone());
        let vars = b.forward(&mut g, &store, xv).unwrap();
        let map = attention_map(&g, vars.attention, 0).unwrap();
        assert!(map.weights.data().iter().all(|&a| (a - 1.0 / 6.0).abs() < 1e-15));

        let projected: Vec<Vec<f64>> = x
            .data()
            .chunks(2)
            .map(|p| project(&project(p, store.value(b.w_v)), store.value(b.w_out)))
            .collect();
        let mean: Vec<f64> =
            (0..2).map(|ch| projected.iter().map(|p| p[ch]).sum::<f64>() / 6.0).collect();
        for pos in g.value(vars.pre_residual).data().chunks(2) {
            assert!((pos[0] - mean[0]).abs() < 1e-14 && (pos[1] - mean[1]).abs() < 1e-14);
        }
    }

    #[test]
    fn matches_explicit_matrix_oracle() {
        let (store, b) = block(2, 2, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::randn(&[2, 2, 2], 1.0, &mut rng);

        // oracle: unfold, K^T Q, column softmax, V A, project, residual
        let xm = unfold_mode3(&x).unwrap(); // c x hw
        let hw = 4;
        let proj = |w: &Tensor| -> Vec<Vec<f64>> {
            (0..hw)
                .map(|j| project(&(0..2).map(|i| xm.at(&[i, j])).collect::<Vec<_>>(), w))
                .collect()
        };
        let (q, k, v) = (proj(store.value(b.w_q)), proj(store.value(b.w_k)), proj(store.value(b.w_v)));
        let mut s = vec![vec![0.0; hw]; hw];
        for i in 0..hw {
            for j in 0..hw {
                s[i][j] = k[i].iter().zip(&q[j]).map(|(a, b)| a * b).sum();
            }
        }
        let mut a = vec![vec![0.0; hw]; hw];
        for j in 0..hw {
            let z: f64 = (0..hw).map(|i| s[i][j].exp()).sum();
            for i in 0..hw {
                a[i][j] = s[i][j].exp() / z;
            }
        }
        let mut expected = Vec::new();
        for j in 0..hw {
            let mixed: Vec<f64> = (0..2).map(|d| (0..hw).map(|i| v[i][d] * a[i][j]).sum()).collect();
            let out = project(&mixed, store.value(b.w_out));
            expected.extend(out.iter().enumerate().map(|(ch, o)| o + xm.at(&[ch, j])));
        }

        let (out, map) = b.apply(&store, &x).unwrap();
        for (got, want) in out.data().iter().zip(&expected) {
            assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
        for i in 0..hw {
            for j in 0..hw {
                assert!((map.weights.at(&[i, j]) - a[i][j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let (store, b) = block(3, 1, 9);
        let x = Tensor::zeros(&[2, 2, 4]);
        assert!(matches!(b.apply(&store, &x), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn gradient_check_whole_block() {
        let (store, b) = block(2, 1, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::randn(&[4, 4, 2], 1.0, &mut rng);
        let weights = Tensor::randn(&[4, 4, 2], 1.0, &mut rng);
        let loss = |g: &mut Graph, s: &ParamStore| {
            let xv = g.constant(x.clone());
            let out = b.forward(g, s, xv)?.output;
            let wv = g.constant(weights.clone());
            let p = g.mul(out, wv)?;
            Ok(g.sum(p))
        };
        let coords: Vec<(usize, usize)> =
            (0..store.len()).flat_map(|p| (0..store.iter().nth(p).unwrap().value.len()).map(move |e| (p, e))).collect();
        let err = grad_check_params(loss, &store, 1e-4, &coords).unwrap();
        assert!(err < 1e-4, "{err}");
        let err_x = crate::gradcheck::grad_check(
            |g, xv| {
                let out = b.forward(g, &store, xv)?.output;
                let wv = g.constant(weights.clone());
                let p = g.mul(out, wv)?;
                Ok(g.sum(p))
            },
            &x,
            1e-4,
            None,
        )
        .unwrap();
        assert!(err_x < 1e-4, "{err_x}");
    }
}
