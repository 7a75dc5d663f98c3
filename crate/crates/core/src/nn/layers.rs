use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ops::{normalize_rows, normalize_rows_backward, softmax_in_place};
use super::{gemm, join, Params, Scalar, Tensor, View};

pub const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

/// `y = x W^T + b`, with `W` stored as `[out, in]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Linear { w: Tensor::trunc_normal(&[d_out, d_in], INIT_STD, rng), b: Tensor::zeros(&[d_out]) }
    }

    pub fn d_in(&self) -> usize {
        self.w.shape[1]
    }

    pub fn d_out(&self) -> usize {
        self.w.shape[0]
    }

    pub fn forward(&self, x: &[T], rows: usize) -> Vec<T> {
        let (di, dout) = (self.d_in(), self.d_out());
        debug_assert_eq!(x.len(), rows * di);
        let mut y = Vec::with_capacity(rows * dout);
        for _ in 0..rows {
            y.extend_from_slice(&self.b.data);
        }
        gemm(
            rows,
            di,
            dout,
            T::one(),
            x,
            View::rows(0, di),
            &self.w.data,
            View::transposed(0, di),
            T::one(),
            &mut y,
            View::rows(0, dout),
        );
        y
    }

    /// Accumulates parameter gradients into `grad`; returns `dx` when requested.
    pub fn backward(&self, x: &[T], rows: usize, dy: &[T], grad: &mut Linear<T>, need_dx: bool) -> Option<Vec<T>> {
        let (di, dout) = (self.d_in(), self.d_out());
        gemm(
            dout,
            rows,
            di,
            T::one(),
            dy,
            View::transposed(0, dout),
            x,
            View::rows(0, di),
            T::one(),
            &mut grad.w.data,
            View::rows(0, di),
        );
        for row in dy.chunks(dout) {
            for (g, &d) in grad.b.data.iter_mut().zip(row) {
                *g += d;
            }
        }
        need_dx.then(|| self.backward_input(dy, rows))
    }

    pub fn backward_input(&self, dy: &[T], rows: usize) -> Vec<T> {
        let (di, dout) = (self.d_in(), self.d_out());
        let mut dx = vec![T::zero(); rows * di];
        gemm(
            rows,
            dout,
            di,
            T::one(),
            dy,
            View::rows(0, dout),
            &self.w.data,
            View::rows(0, di),
            T::zero(),
            &mut dx,
            View::rows(0, di),
        );
        dx
    }
}

impl<T: Scalar> Params<T> for Linear<T> {
    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((join(prefix, "weight"), &self.w));
        out.push((join(prefix, "bias"), &self.b));
    }

    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        out.push(&mut self.w);
        out.push(&mut self.b);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(d: usize) -> Self {
        LayerNorm { gamma: Tensor::filled(&[d], T::one()), beta: Tensor::zeros(&[d]) }
    }

    pub fn forward(&self, x: &[T]) -> (Vec<T>, LayerNormCache<T>) {
        let d = self.gamma.len();
        let (xhat, rstd) = normalize_rows(x, d, T::lit(LN_EPS));
        let mut y = xhat.clone();
        for row in y.chunks_mut(d) {
            for ((v, &g), &b) in row.iter_mut().zip(&self.gamma.data).zip(&self.beta.data) {
                *v = *v * g + b;
            }
        }
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&self, cache: &LayerNormCache<T>, dy: &[T], grad: &mut LayerNorm<T>) -> Vec<T> {
        let d = self.gamma.len();
        let mut dxhat = dy.to_vec();
        for (row, xh) in dxhat.chunks_mut(d).zip(cache.xhat.chunks(d)) {
            for j in 0..d {
                grad.gamma.data[j] += row[j] * xh[j];
                grad.beta.data[j] += row[j];
                row[j] *= self.gamma.data[j];
            }
        }
        normalize_rows_backward(&cache.xhat, &cache.rstd, &dxhat, d)
    }
}

impl<T: Scalar> Params<T> for LayerNorm<T> {
    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((join(prefix, "gamma"), &self.gamma));
        out.push((join(prefix, "beta"), &self.beta));
    }

    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        out.push(&mut self.gamma);
        out.push(&mut self.beta);
    }
}

/// Tanh-approximated GELU.
pub struct Gelu;

impl Gelu {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const K: f64 = 0.044_715;

    pub fn forward<T: Scalar>(x: &[T]) -> Vec<T> {
        let (c, k, half) = (T::lit(Self::C), T::lit(Self::K), T::lit(0.5));
        x.iter().map(|&v| half * v * (T::one() + (c * (v + k * v * v * v)).tanh())).collect()
    }

    pub fn backward<T: Scalar>(x: &[T], dy: &[T]) -> Vec<T> {
        let (c, k, half, three) = (T::lit(Self::C), T::lit(Self::K), T::lit(0.5), T::lit(3.0));
        x.iter()
            .zip(dy)
            .map(|(&v, &g)| {
                let t = (c * (v + k * v * v * v)).tanh();
                let d = half * (T::one() + t) + half * v * (T::one() - t * t) * c * (T::one() + three * k * v * v);
                g * d
            })
            .collect()
    }
}

/// Multi-head self-attention over `batch` independent sequences of length `seq`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiHeadAttention<T> {
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub n_heads: usize,
}

#[derive(Clone, Debug)]
pub struct AttentionCache<T> {
    qkv: Vec<T>,
    /// Row-stochastic attention matrices, `[batch, heads, seq, seq]`.
    pub probs: Vec<T>,
    ctx: Vec<T>,
}

impl<T: Scalar> MultiHeadAttention<T> {
    pub fn new<R: Rng + ?Sized>(d: usize, n_heads: usize, rng: &mut R) -> Self {
        MultiHeadAttention { qkv: Linear::new(d, 3 * d, rng), proj: Linear::new(d, d, rng), n_heads }
    }

    fn dim(&self) -> usize {
        self.proj.d_out()
    }

    pub fn forward(&self, x: &[T], batch: usize, seq: usize) -> (Vec<T>, AttentionCache<T>) {
        let d = self.dim();
        let h = self.n_heads;
        let dh = d / h;
        let rows = batch * seq;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let qkv = self.qkv.forward(x, rows);
        let mut probs = vec![T::zero(); batch * h * seq * seq];
        let mut ctx = vec![T::zero(); rows * d];
        for b in 0..batch {
            let base = b * seq * 3 * d;
            for hd in 0..h {
                let p_off = (b * h + hd) * seq * seq;
                gemm(
                    seq,
                    dh,
                    seq,
                    scale,
                    &qkv,
                    View::strided(base + hd * dh, 3 * d, 1),
                    &qkv,
                    View::strided(base + d + hd * dh, 1, 3 * d),
                    T::zero(),
                    &mut probs,
                    View::rows(p_off, seq),
                );
                for row in probs[p_off..p_off + seq * seq].chunks_mut(seq) {
                    softmax_in_place(row);
                }
                gemm(
                    seq,
                    seq,
                    dh,
                    T::one(),
                    &probs,
                    View::rows(p_off, seq),
                    &qkv,
                    View::strided(base + 2 * d + hd * dh, 3 * d, 1),
                    T::zero(),
                    &mut ctx,
                    View::strided(b * seq * d + hd * dh, d, 1),
                );
            }
        }
        let out = self.proj.forward(&ctx, rows);
        (out, AttentionCache { qkv, probs, ctx })
    }

    pub fn backward(
        &self,
        x: &[T],
        batch: usize,
        seq: usize,
        cache: &AttentionCache<T>,
        dout: &[T],
        grad: &mut MultiHeadAttention<T>,
    ) -> Vec<T> {
        let d = self.dim();
        let h = self.n_heads;
        let dh = d / h;
        let rows = batch * seq;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let dctx = self.proj.backward(&cache.ctx, rows, dout, &mut grad.proj, true).expect("dx");
        let mut dqkv = vec![T::zero(); rows * 3 * d];
        let mut dp = vec![T::zero(); seq * seq];
        for b in 0..batch {
            let base = b * seq * 3 * d;
            for hd in 0..h {
                let p_off = (b * h + hd) * seq * seq;
                let dctx_view = View::strided(b * seq * d + hd * dh, d, 1);
                // dP = dctx v^T
                gemm(
                    seq,
                    dh,
                    seq,
                    T::one(),
                    &dctx,
                    dctx_view,
                    &cache.qkv,
                    View::strided(base + 2 * d + hd * dh, 1, 3 * d),
                    T::zero(),
                    &mut dp,
                    View::rows(0, seq),
                );
                // dv = P^T dctx
                gemm(
                    seq,
                    seq,
                    dh,
                    T::one(),
                    &cache.probs,
                    View::transposed(p_off, seq),
                    &dctx,
                    dctx_view,
                    T::zero(),
                    &mut dqkv,
                    View::strided(base + 2 * d + hd * dh, 3 * d, 1),
                );
                // softmax backward, in place on dp
                let p = &cache.probs[p_off..p_off + seq * seq];
                for (dr, pr) in dp.chunks_mut(seq).zip(p.chunks(seq)) {
                    let dot = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum::<T>();
                    for (a, &b) in dr.iter_mut().zip(pr) {
                        *a = b * (*a - dot);
                    }
                }
                // dq = scale * dS k ; dk = scale * dS^T q
                gemm(
                    seq,
                    seq,
                    dh,
                    scale,
                    &dp,
                    View::rows(0, seq),
                    &cache.qkv,
                    View::strided(base + d + hd * dh, 3 * d, 1),
                    T::zero(),
                    &mut dqkv,
                    View::strided(base + hd * dh, 3 * d, 1),
                );
                gemm(
                    seq,
                    seq,
                    dh,
                    scale,
                    &dp,
                    View::transposed(0, seq),
                    &cache.qkv,
                    View::strided(base + hd * dh, 3 * d, 1),
                    T::zero(),
                    &mut dqkv,
                    View::strided(base + d + hd * dh, 3 * d, 1),
                );
            }
        }
        self.qkv.backward(x, rows, &dqkv, &mut grad.qkv, true).expect("dx")
    }
}

impl<T: Scalar> Params<T> for MultiHeadAttention<T> {
    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.qkv.named(&join(prefix, "qkv"), out);
        self.proj.named(&join(prefix, "proj"), out);
    }

    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        self.qkv.tensors_mut(out);
        self.proj.tensors_mut(out);
    }
}

/// Pre-norm transformer block: `h = x + attn(ln1(x)); y = h + mlp(ln2(h))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block<T> {
    pub ln1: LayerNorm<T>,
    pub attn: MultiHeadAttention<T>,
    pub ln2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Clone, Debug)]
pub struct BlockCache<T> {
    ln1: LayerNormCache<T>,
    a_in: Vec<T>,
    pub attn: AttentionCache<T>,
    ln2: LayerNormCache<T>,
    m_in: Vec<T>,
    pre_act: Vec<T>,
    act: Vec<T>,
}

impl<T: Scalar> Block<T> {
    pub fn new<R: Rng + ?Sized>(d: usize, n_heads: usize, mlp_ratio: usize, rng: &mut R) -> Self {
        Block {
            ln1: LayerNorm::new(d),
            attn: MultiHeadAttention::new(d, n_heads, rng),
            ln2: LayerNorm::new(d),
            fc1: Linear::new(d, d * mlp_ratio, rng),
            fc2: Linear::new(d * mlp_ratio, d, rng),
        }
    }

    pub fn forward(&self, x: &[T], batch: usize, seq: usize) -> (Vec<T>, BlockCache<T>) {
        let rows = batch * seq;
        let (a_in, ln1) = self.ln1.forward(x);
        let (a_out, attn) = self.attn.forward(&a_in, batch, seq);
        let mut h: Vec<T> = x.iter().zip(&a_out).map(|(&a, &b)| a + b).collect();
        let (m_in, ln2) = self.ln2.forward(&h);
        let pre_act = self.fc1.forward(&m_in, rows);
        let act = Gelu::forward(&pre_act);
        let m_out = self.fc2.forward(&act, rows);
        h.iter_mut().zip(&m_out).for_each(|(a, &b)| *a += b);
        (h, BlockCache { ln1, a_in, attn, ln2, m_in, pre_act, act })
    }

    pub fn backward(&self, batch: usize, seq: usize, cache: &BlockCache<T>, dy: &[T], grad: &mut Block<T>) -> Vec<T> {
        let rows = batch * seq;
        let dact = self.fc2.backward(&cache.act, rows, dy, &mut grad.fc2, true).expect("dx");
        let dpre = Gelu::backward(&cache.pre_act, &dact);
        let dm_in = self.fc1.backward(&cache.m_in, rows, &dpre, &mut grad.fc1, true).expect("dx");
        let mut dh = self.ln2.backward(&cache.ln2, &dm_in, &mut grad.ln2);
        dh.iter_mut().zip(dy).for_each(|(a, &b)| *a += b);
        let da_in = self.attn.backward(&cache.a_in, batch, seq, &cache.attn, &dh, &mut grad.attn);
        let mut dx = self.ln1.backward(&cache.ln1, &da_in, &mut grad.ln1);
        dx.iter_mut().zip(&dh).for_each(|(a, &b)| *a += b);
        dx
    }
}

impl<T: Scalar> Params<T> for Block<T> {
    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.ln1.named(&join(prefix, "ln1"), out);
        self.attn.named(&join(prefix, "attn"), out);
        self.ln2.named(&join(prefix, "ln2"), out);
        self.fc1.named(&join(prefix, "fc1"), out);
        self.fc2.named(&join(prefix, "fc2"), out);
    }

    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        self.ln1.tensors_mut(out);
        self.attn.tensors_mut(out);
        self.ln2.tensors_mut(out);
        self.fc1.tensors_mut(out);
        self.fc2.tensors_mut(out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Central-difference check of `sum(w * block(x))` w.r.t. inputs and every parameter.
    #[test]
    fn block_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (batch, seq, d) = (2, 3, 8);
        let mut block: Block<f64> = Block::new(d, 2, 2, &mut rng);
        // Larger weights make the check sensitive to every term.
        for t in block.all_tensors_mut() {
            for v in t.data.iter_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        let x = rand_vec(batch * seq * d, &mut rng);
        let w = rand_vec(batch * seq * d, &mut rng);
        let f = |blk: &Block<f64>, x: &[f64]| -> f64 {
            let (y, _) = blk.forward(x, batch, seq);
            y.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = block.forward(&x, batch, seq);
        let mut grad = block.zeros_like();
        let dx = block.backward(batch, seq, &cache, &w, &mut grad);
        let h = 1e-5;
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            let fd = (f(&block, &xp) - f(&block, &xm)) / (2.0 * h);
            assert!((fd - dx[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "dx[{i}] {fd} vs {}", dx[i]);
        }
        let names: Vec<String> = block.named_tensors().into_iter().map(|(n, _)| n).collect();
        let analytic: Vec<Vec<f64>> = grad.named_tensors().into_iter().map(|(_, t)| t.data.clone()).collect();
        for (ti, name) in names.iter().enumerate() {
            let len = analytic[ti].len();
            for j in (0..len).step_by((len / 7).max(1)) {
                let mut bp = block.clone();
                bp.all_tensors_mut()[ti].data[j] += h;
                let mut bm = block.clone();
                bm.all_tensors_mut()[ti].data[j] -= h;
                let fd = (f(&bp, &x) - f(&bm, &x)) / (2.0 * h);
                let an = analytic[ti][j];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "{name}[{j}] {fd} vs {an}");
            }
        }
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let attn: MultiHeadAttention<f32> = MultiHeadAttention::new(16, 4, &mut rng);
        let x: Vec<f32> = (0..2 * 5 * 16).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let (_, cache) = attn.forward(&x, 2, 5);
        for row in cache.probs.chunks(5) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn linear_forward_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut lin: Linear<f64> = Linear::new(3, 2, &mut rng);
        lin.b.data = vec![0.5, -0.25];
        let x = rand_vec(4 * 3, &mut rng);
        let y = lin.forward(&x, 4);
        for r in 0..4 {
            for o in 0..2 {
                let want: f64 = lin.b.data[o] + (0..3).map(|i| x[r * 3 + i] * lin.w.data[o * 3 + i]).sum::<f64>();
                assert!((y[r * 2 + o] - want).abs() < 1e-14);
            }
        }
    }
}
