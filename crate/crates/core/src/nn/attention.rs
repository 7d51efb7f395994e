//! Multi-head attention over feature-map tokens.
//!
//! A `D x H x W` map is read as `H*W` tokens of width `D`. The layer computes
//! `out = X + concat_h(softmax(Q_h K_h^T / sqrt(d_h)) V_h) Wo` with
//! `Q = X Wq`, `K = C Wk`, `V = C Wv`, where `C` is the context (the input
//! itself for self-attention).

use super::tensor::{gemm, MatMut, MatRef, Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// Softmax weights, `heads x T x S` per sample.
    p: Vec<T>,
    /// Concatenated head outputs, `T x D` per sample.
    a: Vec<T>,
}

fn tokens<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    let s = t.sample_shape();
    (s[0], s[1..].iter().product())
}

/// Token-major view (`T x D`) of a channel-major (`D x T`) sample.
fn token_view<T>(data: &[T], d: usize, t: usize) -> MatRef<'_, T> {
    MatRef::new(data, d, t).t()
}

pub fn forward<T: Scalar>(
    x: &Tensor<T>,
    ctx: Option<&Tensor<T>>,
    params: &[Tensor<T>],
    heads: usize,
) -> (Tensor<T>, AttentionCache<T>) {
    let c = ctx.unwrap_or(x);
    let n = x.batch();
    let (d, tq) = tokens(x);
    let (_, ts) = tokens(c);
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let [wq, wk, wv, wo] = [0, 1, 2, 3].map(|i| MatRef::new(params[i].data(), d, d));

    let mut cache = AttentionCache {
        q: vec![T::zero(); n * tq * d],
        k: vec![T::zero(); n * ts * d],
        v: vec![T::zero(); n * ts * d],
        p: vec![T::zero(); n * heads * tq * ts],
        a: vec![T::zero(); n * tq * d],
    };
    let mut out = x.clone();
    for s in 0..n {
        let xs = token_view(x.sample(s), d, tq);
        let cs = token_view(c.sample(s), d, ts);
        let q = &mut cache.q[s * tq * d..(s + 1) * tq * d];
        gemm(T::one(), xs, wq, T::zero(), MatMut::new(q, tq, d));
        let k = &mut cache.k[s * ts * d..(s + 1) * ts * d];
        gemm(T::one(), cs, wk, T::zero(), MatMut::new(k, ts, d));
        let v = &mut cache.v[s * ts * d..(s + 1) * ts * d];
        gemm(T::one(), cs, wv, T::zero(), MatMut::new(v, ts, d));
        let (q, k, v) = (
            &cache.q[s * tq * d..(s + 1) * tq * d],
            &cache.k[s * ts * d..(s + 1) * ts * d],
            &cache.v[s * ts * d..(s + 1) * ts * d],
        );
        let a = &mut cache.a[s * tq * d..(s + 1) * tq * d];
        for h in 0..heads {
            let p = &mut cache.p[(s * heads + h) * tq * ts..(s * heads + h + 1) * tq * ts];
            gemm(
                scale,
                MatRef::strided(&q[h * dh..], tq, dh, d, 1),
                MatRef::strided(&k[h * dh..], ts, dh, d, 1).t(),
                T::zero(),
                MatMut::new(p, tq, ts),
            );
            for row in p.chunks_exact_mut(ts) {
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for e in row.iter_mut() {
                    *e = (*e - m).exp();
                    z += *e;
                }
                for e in row.iter_mut() {
                    *e /= z;
                }
            }
            gemm(
                T::one(),
                MatRef::new(p, tq, ts),
                MatRef::strided(&v[h * dh..], ts, dh, d, 1),
                T::zero(),
                MatMut::strided(&mut a[h * dh..], tq, dh, d, 1),
            );
        }
        let os = &mut out.data_mut()[s * d * tq..(s + 1) * d * tq];
        gemm(T::one(), MatRef::new(a, tq, d), wo, T::one(), MatMut::strided(os, tq, d, 1, tq));
    }
    (out, cache)
}

/// Returns the input gradient and, for cross-attention, the context
/// gradient.
#[allow(clippy::too_many_arguments)]
pub fn backward<T: Scalar>(
    x: &Tensor<T>,
    ctx: Option<&Tensor<T>>,
    params: &[Tensor<T>],
    heads: usize,
    cache: &AttentionCache<T>,
    dy: &Tensor<T>,
    grads: &mut [Tensor<T>],
) -> (Tensor<T>, Option<Tensor<T>>) {
    let c = ctx.unwrap_or(x);
    let n = x.batch();
    let (d, tq) = tokens(x);
    let (_, ts) = tokens(c);
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let [wq, wk, wv, wo] = [0, 1, 2, 3].map(|i| MatRef::new(params[i].data(), d, d));

    let mut dx = dy.clone();
    let mut dctx = ctx.map(|c| Tensor::zeros(c.shape()));
    let mut da = vec![T::zero(); tq * d];
    let mut dq = vec![T::zero(); tq * d];
    let mut dk = vec![T::zero(); ts * d];
    let mut dv = vec![T::zero(); ts * d];
    let mut dp = vec![T::zero(); tq * ts];
    for s in 0..n {
        let q = &cache.q[s * tq * d..(s + 1) * tq * d];
        let k = &cache.k[s * ts * d..(s + 1) * ts * d];
        let v = &cache.v[s * ts * d..(s + 1) * ts * d];
        let a = &cache.a[s * tq * d..(s + 1) * tq * d];
        let dys = token_view(dy.sample(s), d, tq);

        gemm(T::one(), MatRef::new(a, tq, d).t(), dys, T::one(), MatMut::new(grads[3].data_mut(), d, d));
        gemm(T::one(), dys, wo.t(), T::zero(), MatMut::new(&mut da, tq, d));

        for h in 0..heads {
            let p = &cache.p[(s * heads + h) * tq * ts..(s * heads + h + 1) * tq * ts];
            let da_h = MatRef::strided(&da[h * dh..], tq, dh, d, 1);
            gemm(
                T::one(),
                da_h,
                MatRef::strided(&v[h * dh..], ts, dh, d, 1).t(),
                T::zero(),
                MatMut::new(&mut dp, tq, ts),
            );
            gemm(
                T::one(),
                MatRef::new(p, tq, ts).t(),
                da_h,
                T::zero(),
                MatMut::strided(&mut dv[h * dh..], ts, dh, d, 1),
            );
            for (dr, pr) in dp.chunks_exact_mut(ts).zip(p.chunks_exact(ts)) {
                let dot: T = dr.iter().zip(pr).map(|(&g, &w)| g * w).sum();
                for (g, &w) in dr.iter_mut().zip(pr) {
                    *g = w * (*g - dot) * scale;
                }
            }
            gemm(
                T::one(),
                MatRef::new(&dp, tq, ts),
                MatRef::strided(&k[h * dh..], ts, dh, d, 1),
                T::zero(),
                MatMut::strided(&mut dq[h * dh..], tq, dh, d, 1),
            );
            gemm(
                T::one(),
                MatRef::new(&dp, tq, ts).t(),
                MatRef::strided(&q[h * dh..], tq, dh, d, 1),
                T::zero(),
                MatMut::strided(&mut dk[h * dh..], ts, dh, d, 1),
            );
        }

        let xs = token_view(x.sample(s), d, tq);
        let cs = token_view(c.sample(s), d, ts);
        gemm(T::one(), xs.t(), MatRef::new(&dq, tq, d), T::one(), MatMut::new(grads[0].data_mut(), d, d));
        gemm(T::one(), cs.t(), MatRef::new(&dk, ts, d), T::one(), MatMut::new(grads[1].data_mut(), d, d));
        gemm(T::one(), cs.t(), MatRef::new(&dv, ts, d), T::one(), MatMut::new(grads[2].data_mut(), d, d));

        let dxs = &mut dx.data_mut()[s * d * tq..(s + 1) * d * tq];
        gemm(T::one(), MatRef::new(&dq, tq, d), wq.t(), T::one(), MatMut::strided(dxs, tq, d, 1, tq));
        let dcs = match dctx.as_mut() {
            Some(t) => &mut t.data_mut()[s * d * ts..(s + 1) * d * ts],
            None => &mut dx.data_mut()[s * d * tq..(s + 1) * d * tq],
        };
        gemm(T::one(), MatRef::new(&dk, ts, d), wk.t(), T::one(), MatMut::strided(&mut *dcs, ts, d, 1, ts));
        gemm(T::one(), MatRef::new(&dv, ts, d), wv.t(), T::one(), MatMut::strided(dcs, ts, d, 1, ts));
    }
    (dx, dctx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_output_projection_is_identity() {
        let d = 4;
        let mut params: Vec<Tensor<f64>> = (0..4)
            .map(|i| Tensor::from_vec(&[d, d], (0..d * d).map(|j| ((i * 7 + j) % 5) as f64 * 0.1).collect()).unwrap())
            .collect();
        params[3].fill(0.0);
        let x = Tensor::from_vec(&[2, d, 2, 3], (0..48).map(|v| v as f64 * 0.01).collect()).unwrap();
        let (out, _) = forward(&x, None, &params, 2);
        assert_eq!(out, x);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let d = 4;
        let params: Vec<Tensor<f64>> = (0..4).map(|_| Tensor::full(&[d, d], 0.3)).collect();
        let x = Tensor::from_vec(&[1, d, 3, 1], (0..12).map(|v| v as f64 * 0.2).collect()).unwrap();
        let c = Tensor::from_vec(&[1, d, 5, 1], (0..20).map(|v| (v as f64).sin()).collect()).unwrap();
        let (_, cache) = forward(&x, Some(&c), &params, 2);
        assert_eq!(cache.p.len(), 2 * 3 * 5);
        for row in cache.p.chunks_exact(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
