//! Stage 2: co-attention fusion of frozen CXR and ECG encoder features with
//! causal and main prediction branches.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::datamodel::{Cohort, Horizon, Modality, Split, N_HORIZONS};
use crate::deconfound::bce_rows;
use crate::encoder::{class_rows, scatter_class_rows, Encoder, FeatureBundle};
use crate::error::{Error, Result};
use crate::evalkit::auc;
use crate::nn::{
    gemm, join, sigmoid, softmax_in_place, AdamW, AdamWConfig, Block, BlockCache, Gelu, LayerNorm, LayerNormCache,
    Linear, Params, Scalar, Tensor, View, INIT_STD,
};
use crate::rng::{stream_id, stream_rng};

pub const FUSION_KIND: &str = "fusion";

/// Output heads, in loss accumulation order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    CausalCxr,
    MainCxr,
    CausalEcg,
    MainEcg,
    MainConcat,
}

impl Branch {
    pub const ALL: [Branch; 5] =
        [Branch::CausalCxr, Branch::MainCxr, Branch::CausalEcg, Branch::MainEcg, Branch::MainConcat];

    pub fn name(self) -> &'static str {
        match self {
            Branch::CausalCxr => "causal_cxr",
            Branch::MainCxr => "main_cxr",
            Branch::CausalEcg => "causal_ecg",
            Branch::MainEcg => "main_ecg",
            Branch::MainConcat => "main_concat",
        }
    }

    pub fn is_causal(self) -> bool {
        matches!(self, Branch::CausalCxr | Branch::CausalEcg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub d_k: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub mlp_ratio: usize,
    pub head_hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Drops the two causal terms from the total loss.
    pub mask_causal: bool,
    /// Samples per split used for the per-epoch AUC columns of the log (0 disables).
    pub log_eval_samples: usize,
    pub seed: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            d_k: 64,
            n_heads: 4,
            n_blocks: 2,
            mlp_ratio: 4,
            head_hidden: 64,
            epochs: 10,
            batch_size: 32,
            lr: 1e-4,
            weight_decay: 0.01,
            mask_causal: false,
            log_eval_samples: 500,
            seed: 42,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("stage2: {m}")));
        if self.d_k == 0 || self.n_heads == 0 || self.d_k % self.n_heads != 0 {
            return bad("d_k must be a positive multiple of n_heads");
        }
        if self.batch_size == 0 || self.mlp_ratio == 0 || self.head_hidden == 0 {
            return bad("batch_size, mlp_ratio and head_hidden must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        Ok(())
    }

    pub fn loss_mask(&self) -> [bool; 5] {
        Branch::ALL.map(|b| !(self.mask_causal && b.is_causal()))
    }
}

/// ECG-query, CXR-key/value cross attention without biases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoAttention<T> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoAttentionState<T> {
    /// `n_ecg x n_cxr`, row-stochastic.
    pub attn: Vec<T>,
    /// `n_ecg x d_k`.
    pub refined_cxr: Vec<T>,
    pub n_ecg: usize,
    pub n_cxr: usize,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
}

fn project<T: Scalar>(x: &[T], rows: usize, w: &Tensor<T>) -> Vec<T> {
    let (dk, d) = (w.shape[0], w.shape[1]);
    let mut y = vec![T::zero(); rows * dk];
    gemm(
        rows,
        d,
        dk,
        T::one(),
        x,
        View::rows(0, d),
        &w.data,
        View::transposed(0, d),
        T::zero(),
        &mut y,
        View::rows(0, dk),
    );
    y
}

/// `gw += dy^T x` for `y = x W^T`.
fn project_grad<T: Scalar>(x: &[T], rows: usize, dy: &[T], gw: &mut Tensor<T>) {
    let (dk, d) = (gw.shape[0], gw.shape[1]);
    gemm(
        dk,
        rows,
        d,
        T::one(),
        dy,
        View::transposed(0, dk),
        x,
        View::rows(0, d),
        T::one(),
        &mut gw.data,
        View::rows(0, d),
    );
}

impl<T: Scalar> CoAttention<T> {
    pub fn new<R: rand::Rng + ?Sized>(d: usize, d_k: usize, rng: &mut R) -> Self {
        CoAttention {
            w_q: Tensor::trunc_normal(&[d_k, d], INIT_STD, rng),
            w_k: Tensor::trunc_normal(&[d_k, d], INIT_STD, rng),
            w_v: Tensor::trunc_normal(&[d_k, d], INIT_STD, rng),
        }
    }

    pub fn d_k(&self) -> usize {
        self.w_q.shape[0]
    }

    pub fn d_in(&self) -> usize {
        self.w_q.shape[1]
    }

    /// `attn = softmax((W_q E)(W_k X)^T / sqrt(d_k))`, `refined = attn (W_v X)`.
    pub fn forward(&self, ecg: &[T], cxr: &[T]) -> Result<CoAttentionState<T>> {
        let d = self.d_in();
        if ecg.is_empty() || cxr.is_empty() || ecg.len() % d != 0 || cxr.len() % d != 0 {
            return Err(Error::ShapeMismatch {
                expected: format!("nonempty token sequences of width {d}"),
                got: format!("{} and {} values", ecg.len(), cxr.len()),
            });
        }
        let (ne, nc, dk) = (ecg.len() / d, cxr.len() / d, self.d_k());
        let q = project(ecg, ne, &self.w_q);
        let k = project(cxr, nc, &self.w_k);
        let v = project(cxr, nc, &self.w_v);
        let mut attn = vec![T::zero(); ne * nc];
        let scale = T::one() / T::lit(dk as f64).sqrt();
        gemm(
            ne,
            dk,
            nc,
            scale,
            &q,
            View::rows(0, dk),
            &k,
            View::transposed(0, dk),
            T::zero(),
            &mut attn,
            View::rows(0, nc),
        );
        for row in attn.chunks_mut(nc) {
            softmax_in_place(row);
        }
        let mut refined = vec![T::zero(); ne * dk];
        gemm(
            ne,
            nc,
            dk,
            T::one(),
            &attn,
            View::rows(0, nc),
            &v,
            View::rows(0, dk),
            T::zero(),
            &mut refined,
            View::rows(0, dk),
        );
        Ok(CoAttentionState { attn, refined_cxr: refined, n_ecg: ne, n_cxr: nc, q, k, v })
    }

    /// Accumulates weight gradients given `d refined`.
    pub fn backward(&self, ecg: &[T], cxr: &[T], st: &CoAttentionState<T>, d_refined: &[T], grad: &mut CoAttention<T>) {
        let (ne, nc, dk) = (st.n_ecg, st.n_cxr, self.d_k());
        let mut d_attn = vec![T::zero(); ne * nc];
        gemm(
            ne,
            dk,
            nc,
            T::one(),
            d_refined,
            View::rows(0, dk),
            &st.v,
            View::transposed(0, dk),
            T::zero(),
            &mut d_attn,
            View::rows(0, nc),
        );
        let mut d_v = vec![T::zero(); nc * dk];
        gemm(
            nc,
            ne,
            dk,
            T::one(),
            &st.attn,
            View::transposed(0, nc),
            d_refined,
            View::rows(0, dk),
            T::zero(),
            &mut d_v,
            View::rows(0, dk),
        );
        let scale = T::one() / T::lit(dk as f64).sqrt();
        let mut d_s = vec![T::zero(); ne * nc];
        for r in 0..ne {
            let a = &st.attn[r * nc..(r + 1) * nc];
            let g = &d_attn[r * nc..(r + 1) * nc];
            let dot: T = a.iter().zip(g).map(|(&x, &y)| x * y).sum();
            for j in 0..nc {
                d_s[r * nc + j] = a[j] * (g[j] - dot) * scale;
            }
        }
        let mut d_q = vec![T::zero(); ne * dk];
        gemm(
            ne,
            nc,
            dk,
            T::one(),
            &d_s,
            View::rows(0, nc),
            &st.k,
            View::rows(0, dk),
            T::zero(),
            &mut d_q,
            View::rows(0, dk),
        );
        let mut d_k = vec![T::zero(); nc * dk];
        gemm(
            nc,
            ne,
            dk,
            T::one(),
            &d_s,
            View::transposed(0, nc),
            &st.q,
            View::rows(0, dk),
            T::zero(),
            &mut d_k,
            View::rows(0, dk),
        );
        project_grad(ecg, ne, &d_q, &mut grad.w_q);
        project_grad(cxr, nc, &d_k, &mut grad.w_k);
        project_grad(cxr, nc, &d_v, &mut grad.w_v);
    }
}

impl<T: Scalar> Params<T> for CoAttention<T> {
    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((join(prefix, "w_q"), &self.w_q));
        out.push((join(prefix, "w_k"), &self.w_k));
        out.push((join(prefix, "w_v"), &self.w_v));
    }

    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        out.push(&mut self.w_q);
        out.push(&mut self.w_k);
        out.push(&mut self.w_v);
    }
}

/// `Linear -> GELU -> Linear`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpHead<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

struct MlpCache<T> {
    x: Vec<T>,
    pre: Vec<T>,
    act: Vec<T>,
}

impl<T: Scalar> MlpHead<T> {
    pub fn new<R: rand::Rng + ?Sized>(d_in: usize, hidden: usize, d_out: usize, rng: &mut R) -> Self {
        MlpHead { fc1: Linear::new(d_in, hidden, rng), fc2: Linear::new(hidden, d_out, rng) }
    }

    fn forward(&self, x: &[T], rows: usize) -> (Vec<T>, MlpCache<T>) {
        let pre = self.fc1.forward(x, rows);
        let act = Gelu::forward(&pre);
        let out = self.fc2.forward(&act, rows);
        (out, MlpCache { x: x.to_vec(), pre, act })
    }

    fn backward(
        &self,
        cache: &MlpCache<T>,
        rows: usize,
        dy: &[T],
        grad: &mut MlpHead<T>,
        need_dx: bool,
    ) -> Option<Vec<T>> {
        let dact = self.fc2.backward(&cache.act, rows, dy, &mut grad.fc2, true).expect("dx");
        let dpre = Gelu::backward(&cache.pre, &dact);
        self.fc1.backward(&cache.x, rows, &dpre, &mut grad.fc1, need_dx)
    }
}

impl<T: Scalar> Params<T> for MlpHead<T> {
    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.fc1.named(&join(prefix, "fc1"), out);
        self.fc2.named(&join(prefix, "fc2"), out);
    }

    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        self.fc1.tensors_mut(out);
        self.fc2.tensors_mut(out);
    }
}

/// Class token plus a stack of blocks and an output norm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostStack<T> {
    pub cls: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub norm: LayerNorm<T>,
}

struct StackCache<T> {
    seq: usize,
    blocks: Vec<BlockCache<T>>,
    norm: LayerNormCache<T>,
}

impl<T: Scalar> PostStack<T> {
    fn new<R: rand::Rng + ?Sized>(c: &FusionConfig, rng: &mut R) -> Self {
        PostStack {
            cls: Tensor::trunc_normal(&[c.d_k], INIT_STD, rng),
            blocks: (0..c.n_blocks).map(|_| Block::new(c.d_k, c.n_heads, c.mlp_ratio, rng)).collect(),
            norm: LayerNorm::new(c.d_k),
        }
    }

    /// `rows` is `[batch, n, d_k]`; returns pooled `[batch, d_k]`.
    fn forward(&self, rows: &[T], batch: usize, n: usize) -> (Vec<T>, StackCache<T>) {
        let d = self.cls.len();
        let seq = n + 1;
        let mut x = Vec::with_capacity(batch * seq * d);
        for b in 0..batch {
            x.extend_from_slice(&self.cls.data);
            x.extend_from_slice(&rows[b * n * d..(b + 1) * n * d]);
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, c) = block.forward(&x, batch, seq);
            x = y;
            caches.push(c);
        }
        let (y, norm) = self.norm.forward(&x);
        (class_rows(&y, batch, seq, d), StackCache { seq, blocks: caches, norm })
    }

    /// Returns the gradient w.r.t. the input rows.
    fn backward(&self, cache: &StackCache<T>, batch: usize, d_pooled: &[T], grad: &mut PostStack<T>) -> Vec<T> {
        let d = self.cls.len();
        let seq = cache.seq;
        let dy = scatter_class_rows(d_pooled, batch, seq, d);
        let mut g = self.norm.backward(&cache.norm, &dy, &mut grad.norm);
        for (l, block) in self.blocks.iter().enumerate().rev() {
            g = block.backward(batch, seq, &cache.blocks[l], &g, &mut grad.blocks[l]);
        }
        let n = seq - 1;
        let mut d_rows = Vec::with_capacity(batch * n * d);
        for b in 0..batch {
            let base = b * seq * d;
            grad.cls.data.iter_mut().zip(&g[base..base + d]).for_each(|(a, &v)| *a += v);
            d_rows.extend_from_slice(&g[base + d..base + seq * d]);
        }
        d_rows
    }
}

impl<T: Scalar> Params<T> for PostStack<T> {
    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((join(prefix, "cls"), &self.cls));
        self.blocks.named(&join(prefix, "blocks"), out);
        self.norm.named(&join(prefix, "norm"), out);
    }

    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        out.push(&mut self.cls);
        self.blocks.tensors_mut(out);
        self.norm.tensors_mut(out);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionModel<T> {
    pub coattn: CoAttention<T>,
    pub cxr_stack: PostStack<T>,
    pub ecg_in: Linear<T>,
    pub ecg_stack: PostStack<T>,
    pub causal_cxr: MlpHead<T>,
    pub main_cxr: MlpHead<T>,
    pub causal_ecg: MlpHead<T>,
    pub main_ecg: MlpHead<T>,
    pub main_concat: MlpHead<T>,
}

impl<T: Scalar> Params<T> for FusionModel<T> {
    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.coattn.named(&join(prefix, "coattn"), out);
        self.cxr_stack.named(&join(prefix, "cxr_stack"), out);
        self.ecg_in.named(&join(prefix, "ecg_in"), out);
        self.ecg_stack.named(&join(prefix, "ecg_stack"), out);
        self.causal_cxr.named(&join(prefix, "causal_cxr"), out);
        self.main_cxr.named(&join(prefix, "main_cxr"), out);
        self.causal_ecg.named(&join(prefix, "causal_ecg"), out);
        self.main_ecg.named(&join(prefix, "main_ecg"), out);
        self.main_concat.named(&join(prefix, "main_concat"), out);
    }

    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        self.coattn.tensors_mut(out);
        self.cxr_stack.tensors_mut(out);
        self.ecg_in.tensors_mut(out);
        self.ecg_stack.tensors_mut(out);
        self.causal_cxr.tensors_mut(out);
        self.main_cxr.tensors_mut(out);
        self.causal_ecg.tensors_mut(out);
        self.main_ecg.tensors_mut(out);
        self.main_concat.tensors_mut(out);
    }
}

/// Frozen-encoder features of a batch, in the model's scalar type.
#[derive(Clone, Debug)]
pub struct FusionBatch<T> {
    pub batch: usize,
    pub n_cxr: usize,
    pub n_ecg: usize,
    pub dim: usize,
    pub cxr_tokens: Vec<T>,
    pub ecg_tokens: Vec<T>,
    pub cxr_tap: Vec<T>,
    pub ecg_tap: Vec<T>,
}

impl<T: Scalar> FusionBatch<T> {
    /// Stacks `(cxr, ecg)` bundles.
    pub fn from_bundles(pairs: &[(&FeatureBundle, &FeatureBundle)]) -> Result<Self> {
        let first = pairs
            .first()
            .ok_or_else(|| Error::ShapeMismatch { expected: "nonempty batch".into(), got: "0 samples".into() })?;
        let (n_cxr, n_ecg, dim) = (first.0.n_tokens, first.1.n_tokens, first.0.dim);
        let mut b = FusionBatch {
            batch: pairs.len(),
            n_cxr,
            n_ecg,
            dim,
            cxr_tokens: Vec::new(),
            ecg_tokens: Vec::new(),
            cxr_tap: Vec::new(),
            ecg_tap: Vec::new(),
        };
        let cast = |v: &[f32]| v.iter().map(|&x| T::lit(x as f64)).collect::<Vec<T>>();
        for (c, e) in pairs {
            if c.n_tokens != n_cxr || e.n_tokens != n_ecg || c.dim != dim || e.dim != dim {
                return Err(Error::ShapeMismatch {
                    expected: format!("{n_cxr}/{n_ecg} tokens of width {dim}"),
                    got: format!("{}/{} tokens of width {}/{}", c.n_tokens, e.n_tokens, c.dim, e.dim),
                });
            }
            b.cxr_tokens.extend(cast(&c.tokens));
            b.ecg_tokens.extend(cast(&e.tokens));
            b.cxr_tap.extend(cast(&c.tap));
            b.ecg_tap.extend(cast(&e.tap));
        }
        Ok(b)
    }
}

/// Logits of the five branches, each `[batch, width]`, in [`Branch::ALL`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionOutputs<T> {
    pub batch: usize,
    pub logits: [Vec<T>; 5],
    pub widths: [usize; 5],
}

impl<T: Scalar> FusionOutputs<T> {
    pub fn branch(&self, b: Branch) -> &[T] {
        &self.logits[b as usize]
    }

    /// Sigmoid probabilities of one sample for a branch.
    pub fn probs(&self, b: Branch, sample: usize) -> Vec<f64> {
        let w = self.widths[b as usize];
        self.logits[b as usize][sample * w..(sample + 1) * w].iter().map(|v| sigmoid(v.as_f64())).collect()
    }
}

pub struct FusionCache<T> {
    states: Vec<CoAttentionState<T>>,
    cxr: StackCache<T>,
    ecg: StackCache<T>,
    heads: [MlpCache<T>; 5],
}

impl<T: Scalar> FusionCache<T> {
    pub fn coattention(&self) -> &[CoAttentionState<T>] {
        &self.states
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2LossBundle {
    pub l_causal_cxr: f64,
    pub l_main_cxr: f64,
    pub l_causal_ecg: f64,
    pub l_main_ecg: f64,
    pub l_main_concat: f64,
    pub l_total: f64,
}

impl Stage2LossBundle {
    pub fn terms(&self) -> [f64; 5] {
        [self.l_causal_cxr, self.l_main_cxr, self.l_causal_ecg, self.l_main_ecg, self.l_main_concat]
    }
}

/// Per-branch mean BCE (causal terms against `a`, main terms against `y`)
/// and their unit-weight sum. Masked branches contribute zero and no gradient.
pub fn total_loss<T: Scalar>(
    out: &FusionOutputs<T>,
    y: &[[u8; N_HORIZONS]],
    a: &[Vec<u8>],
    mask: [bool; 5],
) -> (Stage2LossBundle, [Vec<T>; 5]) {
    let mut terms = [0.0; 5];
    let grads = Branch::ALL.map(|br| {
        let i = br as usize;
        if !mask[i] {
            return vec![T::zero(); out.logits[i].len()];
        }
        let targets: Vec<T> = if br.is_causal() {
            a.iter().flat_map(|r| r.iter().map(|&v| T::lit(v as f64))).collect()
        } else {
            y.iter().flat_map(|r| r.iter().map(|&v| T::lit(v as f64))).collect()
        };
        let (l, g) = bce_rows(&out.logits[i], &targets);
        terms[i] = l;
        g
    });
    let mut l_total = 0.0;
    for t in terms {
        l_total += t;
    }
    let bundle = Stage2LossBundle {
        l_causal_cxr: terms[0],
        l_main_cxr: terms[1],
        l_causal_ecg: terms[2],
        l_main_ecg: terms[3],
        l_main_concat: terms[4],
        l_total,
    };
    (bundle, grads)
}

impl<T: Scalar> FusionModel<T> {
    pub fn init(config: &FusionConfig, dim: usize, n_causal: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(config.seed, stream_id("fusion-init"), 0);
        let (dk, h) = (config.d_k, config.head_hidden);
        Ok(FusionModel {
            coattn: CoAttention::new(dim, dk, &mut rng),
            cxr_stack: PostStack::new(config, &mut rng),
            ecg_in: Linear::new(dim, dk, &mut rng),
            ecg_stack: PostStack::new(config, &mut rng),
            causal_cxr: MlpHead::new(dim, h, n_causal, &mut rng),
            main_cxr: MlpHead::new(dk, h, N_HORIZONS, &mut rng),
            causal_ecg: MlpHead::new(dim, h, n_causal, &mut rng),
            main_ecg: MlpHead::new(dk, h, N_HORIZONS, &mut rng),
            main_concat: MlpHead::new(2 * dk, h, N_HORIZONS, &mut rng),
        })
    }

    pub fn d_k(&self) -> usize {
        self.coattn.d_k()
    }

    pub fn forward(&self, x: &FusionBatch<T>) -> Result<(FusionOutputs<T>, FusionCache<T>)> {
        let (b, d, dk) = (x.batch, x.dim, self.d_k());
        if d != self.coattn.d_in() {
            return Err(Error::ShapeMismatch {
                expected: format!("feature width {}", self.coattn.d_in()),
                got: format!("{d}"),
            });
        }
        let mut states = Vec::with_capacity(b);
        let mut refined = Vec::with_capacity(b * x.n_ecg * dk);
        for s in 0..b {
            let e = &x.ecg_tokens[s * x.n_ecg * d..(s + 1) * x.n_ecg * d];
            let c = &x.cxr_tokens[s * x.n_cxr * d..(s + 1) * x.n_cxr * d];
            let st = self.coattn.forward(e, c)?;
            refined.extend_from_slice(&st.refined_cxr);
            states.push(st);
        }
        let (p_cxr, cxr) = self.cxr_stack.forward(&refined, b, x.n_ecg);
        let ecg_in = self.ecg_in.forward(&x.ecg_tokens, b * x.n_ecg);
        let (p_ecg, ecg) = self.ecg_stack.forward(&ecg_in, b, x.n_ecg);
        let mut concat = Vec::with_capacity(b * 2 * dk);
        for s in 0..b {
            concat.extend_from_slice(&p_cxr[s * dk..(s + 1) * dk]);
            concat.extend_from_slice(&p_ecg[s * dk..(s + 1) * dk]);
        }
        let (l0, c0) = self.causal_cxr.forward(&x.cxr_tap, b);
        let (l1, c1) = self.main_cxr.forward(&p_cxr, b);
        let (l2, c2) = self.causal_ecg.forward(&x.ecg_tap, b);
        let (l3, c3) = self.main_ecg.forward(&p_ecg, b);
        let (l4, c4) = self.main_concat.forward(&concat, b);
        let widths = [self.causal_cxr.fc2.d_out(), N_HORIZONS, self.causal_ecg.fc2.d_out(), N_HORIZONS, N_HORIZONS];
        Ok((
            FusionOutputs { batch: b, logits: [l0, l1, l2, l3, l4], widths },
            FusionCache { states, cxr, ecg, heads: [c0, c1, c2, c3, c4] },
        ))
    }

    pub fn backward(
        &self,
        x: &FusionBatch<T>,
        cache: &FusionCache<T>,
        d_logits: &[Vec<T>; 5],
        grad: &mut FusionModel<T>,
    ) {
        let (b, d, dk) = (x.batch, x.dim, self.d_k());
        let h = &cache.heads;
        self.causal_cxr.backward(&h[0], b, &d_logits[0], &mut grad.causal_cxr, false);
        self.causal_ecg.backward(&h[2], b, &d_logits[2], &mut grad.causal_ecg, false);
        let mut d_pc = self.main_cxr.backward(&h[1], b, &d_logits[1], &mut grad.main_cxr, true).expect("dx");
        let mut d_pe = self.main_ecg.backward(&h[3], b, &d_logits[3], &mut grad.main_ecg, true).expect("dx");
        let d_cat = self.main_concat.backward(&h[4], b, &d_logits[4], &mut grad.main_concat, true).expect("dx");
        for s in 0..b {
            for j in 0..dk {
                d_pc[s * dk + j] += d_cat[s * 2 * dk + j];
                d_pe[s * dk + j] += d_cat[s * 2 * dk + dk + j];
            }
        }
        let d_ecg_in = self.ecg_stack.backward(&cache.ecg, b, &d_pe, &mut grad.ecg_stack);
        self.ecg_in.backward(&x.ecg_tokens, b * x.n_ecg, &d_ecg_in, &mut grad.ecg_in, false);
        let d_refined = self.cxr_stack.backward(&cache.cxr, b, &d_pc, &mut grad.cxr_stack);
        for (s, st) in cache.states.iter().enumerate() {
            let e = &x.ecg_tokens[s * x.n_ecg * d..(s + 1) * x.n_ecg * d];
            let c = &x.cxr_tokens[s * x.n_cxr * d..(s + 1) * x.n_cxr * d];
            let dr = &d_refined[s * x.n_ecg * dk..(s + 1) * x.n_ecg * dk];
            self.coattn.backward(e, c, st, dr, &mut grad.coattn);
        }
    }
}

/// Encodes every sample of a cohort with both frozen encoders.
pub fn precompute_features(
    cohort: &Cohort,
    cxr: &Encoder<f32>,
    ecg: &Encoder<f32>,
    idx: &[usize],
) -> Result<Vec<(FeatureBundle, FeatureBundle)>> {
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(64) {
        let ci: Vec<&[f32]> = chunk.iter().map(|&i| cohort.image(i, Modality::Cxr)).collect();
        let ei: Vec<&[f32]> = chunk.iter().map(|&i| cohort.image(i, Modality::Ecg)).collect();
        out.extend(cxr.encode_batch(&ci)?.into_iter().zip(ecg.encode_batch(&ei)?));
    }
    Ok(out)
}

/// Per-sample probabilities of the three main heads: `(concat, cxr, ecg)`.
pub fn predict_main(
    model: &FusionModel<f32>,
    feats: &[(FeatureBundle, FeatureBundle)],
) -> Result<Vec<[[f64; N_HORIZONS]; 3]>> {
    let mut out = Vec::with_capacity(feats.len());
    for chunk in feats.chunks(64) {
        let pairs: Vec<(&FeatureBundle, &FeatureBundle)> = chunk.iter().map(|(c, e)| (c, e)).collect();
        let (o, _) = model.forward(&FusionBatch::from_bundles(&pairs)?)?;
        for s in 0..o.batch {
            let get = |br: Branch| -> [f64; N_HORIZONS] {
                let p = o.probs(br, s);
                std::array::from_fn(|h| p[h])
            };
            out.push([get(Branch::MainConcat), get(Branch::MainCxr), get(Branch::MainEcg)]);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2EpochLog {
    pub epoch: usize,
    pub losses: Stage2LossBundle,
    /// `(head, holdout 1yr AUC, shift 1yr AUC)` for concat, cxr, ecg.
    pub aucs: Vec<(String, Option<f64>, Option<f64>)>,
}

pub const MAIN_HEADS: [&str; 3] = ["combined", "cxr", "ecg"];

pub fn stage2_log_csv(rows: &[Stage2EpochLog]) -> String {
    let mut out = String::from("epoch,l_causal_cxr,l_main_cxr,l_causal_ecg,l_main_ecg,l_main_concat,l_total");
    for h in MAIN_HEADS {
        out.push_str(&format!(",holdout_auc_1yr_{h},shift_auc_1yr_{h}"));
    }
    out.push('\n');
    let cell = |v: &Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in rows {
        out.push_str(&r.epoch.to_string());
        for t in r.losses.terms() {
            out.push_str(&format!(",{t:.6}"));
        }
        out.push_str(&format!(",{:.6}", r.losses.l_total));
        for (_, h, s) in &r.aucs {
            out.push_str(&format!(",{},{}", cell(h), cell(s)));
        }
        out.push('\n');
    }
    out
}

pub struct Stage2Outcome {
    pub model: FusionModel<f32>,
    pub log: Vec<Stage2EpochLog>,
    pub encoder_hash_before: [String; 2],
    pub encoder_hash_after: [String; 2],
}

fn head_aucs(model: &FusionModel<f32>, feats: &[(FeatureBundle, FeatureBundle)], y: &[u8]) -> Result<[Option<f64>; 3]> {
    if feats.is_empty() {
        return Ok([None; 3]);
    }
    let p = predict_main(model, feats)?;
    Ok(std::array::from_fn(|k| {
        let s: Vec<f64> = p.iter().map(|r| r[k][Horizon::Y1.index()]).collect();
        auc(&s, y).ok()
    }))
}

/// Trains the fusion model on frozen encoders. Fails if either encoder's
/// parameter hash changes during training.
pub fn train_stage2(
    cohort: &Cohort,
    cxr: &Encoder<f32>,
    ecg: &Encoder<f32>,
    config: &FusionConfig,
    mut progress: impl FnMut(&Stage2EpochLog),
) -> Result<Stage2Outcome> {
    config.validate()?;
    let before = [checkpoint::params_hash(cxr), checkpoint::params_hash(ecg)];
    let n_causal = cohort.manifest.samples.first().map(|s| s.a.len()).unwrap_or(0);
    let mut model = FusionModel::<f32>::init(config, cxr.dim(), n_causal)?;
    let train = cohort.indices(Split::Train);
    if train.is_empty() {
        return Err(Error::InvalidConfig("cohort has no train split".into()));
    }
    let train_feats = precompute_features(cohort, cxr, ecg, &train)?;
    let mut eval_sets = Vec::new();
    for split in [Split::Holdout, Split::Shift] {
        let idx: Vec<usize> = cohort.indices(split).into_iter().take(config.log_eval_samples).collect();
        let y: Vec<u8> = idx.iter().map(|&i| cohort.manifest.samples[i].y[Horizon::Y1.index()]).collect();
        eval_sets.push((precompute_features(cohort, cxr, ecg, &idx)?, y));
    }
    let samples = &cohort.manifest.samples;
    let mask = config.loss_mask();
    let mut opt = AdamW::new(AdamWConfig { weight_decay: config.weight_decay, ..AdamWConfig::with_lr(config.lr) });
    let mut log = Vec::with_capacity(config.epochs);
    let positions: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        let mut order = positions.clone();
        order.shuffle(&mut stream_rng(config.seed, stream_id("stage2-shuffle"), epoch as u64));
        let mut sums = [0.0f64; 6];
        for chunk in order.chunks(config.batch_size) {
            let pairs: Vec<(&FeatureBundle, &FeatureBundle)> =
                chunk.iter().map(|&p| (&train_feats[p].0, &train_feats[p].1)).collect();
            let batch = FusionBatch::from_bundles(&pairs)?;
            let y: Vec<[u8; N_HORIZONS]> = chunk.iter().map(|&p| samples[train[p]].y).collect();
            let a: Vec<Vec<u8>> = chunk.iter().map(|&p| samples[train[p]].a.clone()).collect();
            let (out, cache) = model.forward(&batch)?;
            let (bundle, grads) = total_loss(&out, &y, &a, mask);
            if !bundle.l_total.is_finite() {
                return Err(Error::NonFinite { what: "stage-2 total loss".into(), diagnostics: format!("{bundle:?}") });
            }
            let mut g = model.zeros_like();
            model.backward(&batch, &cache, &grads, &mut g);
            opt.step(&mut model, &g);
            let w = chunk.len() as f64;
            for (s, t) in sums.iter_mut().zip(bundle.terms().iter().chain([bundle.l_total].iter())) {
                *s += t * w;
            }
        }
        let n = train.len() as f64;
        let losses = Stage2LossBundle {
            l_causal_cxr: sums[0] / n,
            l_main_cxr: sums[1] / n,
            l_causal_ecg: sums[2] / n,
            l_main_ecg: sums[3] / n,
            l_main_concat: sums[4] / n,
            l_total: sums[5] / n,
        };
        let hold = head_aucs(&model, &eval_sets[0].0, &eval_sets[0].1)?;
        let shift = head_aucs(&model, &eval_sets[1].0, &eval_sets[1].1)?;
        let aucs = (0..3).map(|k| (MAIN_HEADS[k].to_string(), hold[k], shift[k])).collect();
        let row = Stage2EpochLog { epoch: epoch + 1, losses, aucs };
        log::info!("stage2 epoch {}: total {:.4} aucs {:?}", row.epoch, row.losses.l_total, row.aucs);
        progress(&row);
        log.push(row);
    }
    let after = [checkpoint::params_hash(cxr), checkpoint::params_hash(ecg)];
    if after != before {
        return Err(Error::CheckpointMismatch("encoder parameters changed during stage-2 training".into()));
    }
    Ok(Stage2Outcome { model, log, encoder_hash_before: before, encoder_hash_after: after })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionCheckpointConfig {
    pub fusion: FusionConfig,
    pub dim: usize,
    pub n_causal: usize,
    /// Parameter hashes of the frozen CXR and ECG encoders.
    pub encoder_hashes: [String; 2],
}

impl FusionModel<f32> {
    pub fn save(
        &self,
        path: &Path,
        meta: &FusionCheckpointConfig,
        encoders: [&Path; 2],
        config_hash: Option<String>,
    ) -> Result<String> {
        let cfg = serde_json::to_value(meta).map_err(|e| Error::json(path, e))?;
        let refs = encoders.iter().map(|p| p.display().to_string()).collect();
        checkpoint::save(path, FUSION_KIND, cfg, config_hash, refs, self)?;
        Ok(checkpoint::params_hash(self))
    }

    pub fn load(path: &Path) -> Result<(Self, FusionCheckpointConfig, Vec<PathBuf>)> {
        let manifest = checkpoint::read_manifest(path)?;
        let meta: FusionCheckpointConfig =
            serde_json::from_value(manifest.config.clone()).map_err(|e| Error::json(path, e))?;
        let mut model = FusionModel::init(&meta.fusion, meta.dim, meta.n_causal)?;
        let manifest = checkpoint::load_into(path, FUSION_KIND, &mut model)?;
        Ok((model, meta, manifest.references.iter().map(PathBuf::from).collect()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use rand::Rng;

    fn tiny_fusion() -> FusionConfig {
        FusionConfig { d_k: 8, n_heads: 2, n_blocks: 2, mlp_ratio: 2, head_hidden: 6, ..Default::default() }
    }

    fn random_batch(b: usize, n_cxr: usize, n_ecg: usize, d: usize, seed: u64) -> FusionBatch<f64> {
        let mut rng = stream_rng(seed, 0, 0);
        let mut v = |n: usize| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        FusionBatch {
            batch: b,
            n_cxr,
            n_ecg,
            dim: d,
            cxr_tokens: v(b * n_cxr * d),
            ecg_tokens: v(b * n_ecg * d),
            cxr_tap: v(b * d),
            ecg_tap: v(b * d),
        }
    }

    #[test]
    fn softmax_example_two_keys() {
        let att = CoAttention {
            w_q: Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]),
            w_k: Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]),
            w_v: Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]),
        };
        let st = att.forward(&[1.0f64, 0.0], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((st.attn[0] - 0.6698).abs() < 1e-4 && (st.attn[1] - 0.3302).abs() < 1e-4, "{:?}", st.attn);
        let e = (1.0f64 / 2f64.sqrt()).exp();
        assert!((st.attn[0] - e / (e + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn single_cxr_token_attends_fully() {
        let mut rng = stream_rng(1, 0, 0);
        let att: CoAttention<f64> = CoAttention::new(4, 3, &mut rng);
        let ecg: Vec<f64> = (0..20).map(|i| i as f64 * 0.1).collect();
        let cxr = [0.5, -0.2, 0.3, 1.0];
        let st = att.forward(&ecg, &cxr).unwrap();
        assert!(st.attn.iter().all(|&a| a == 1.0));
        let v = project(&cxr, 1, &att.w_v);
        for row in st.refined_cxr.chunks(3) {
            assert_eq!(row, v.as_slice());
        }
    }

    #[test]
    fn identical_cxr_tokens_give_uniform_rows() {
        let mut rng = stream_rng(2, 0, 0);
        let att: CoAttention<f64> = CoAttention::new(4, 4, &mut rng);
        let ecg: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let cxr: Vec<f64> = [0.3, 0.1, -0.4, 0.9].repeat(5);
        let st = att.forward(&ecg, &cxr).unwrap();
        assert!(st.attn.iter().all(|&a| (a - 0.2).abs() < 1e-12));
        assert!(att.forward(&ecg, &cxr[..3]).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let out = FusionOutputs {
            batch: 1,
            logits: [vec![0.0f64; 4], vec![0.0; 4], vec![0.0; 4], vec![0.0; 4], vec![0.0; 4]],
            widths: [4; 5],
        };
        let (b, _) = total_loss(&out, &[[1, 0, 1, 0]], &[vec![0, 1, 1, 0]], [true; 5]);
        assert!((b.l_total - 5.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((b.l_total - 3.4657).abs() < 1e-4);

        let y = [1u8, 1, 0, 0];
        let a = vec![1u8, 0, 1, 0];
        let sign = |v: &[u8]| v.iter().map(|&t| if t == 1 { 10.0 } else { -10.0 }).collect::<Vec<f64>>();
        let out =
            FusionOutputs { batch: 1, logits: [sign(&a), sign(&y), sign(&a), sign(&y), sign(&y)], widths: [4; 5] };
        let (b, _) = total_loss(&out, &[[1, 1, 0, 0]], &[a.clone()], [true; 5]);
        assert!(b.l_total <= 2.3e-4);

        let mut rng = stream_rng(3, 0, 0);
        let logits = std::array::from_fn(|_| (0..8).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<f64>>());
        let out = FusionOutputs { batch: 2, logits, widths: [4; 5] };
        let yy = [[1, 1, 1, 1], [0, 0, 1, 1]];
        let aa = [vec![1, 0, 0, 1], vec![0, 0, 1, 0]];
        let (full, _) = total_loss(&out, &yy, &aa, [true; 5]);
        let sum: f64 = full.terms().iter().sum();
        assert_eq!(sum, full.l_total);
        for k in 0..5 {
            let mut mask = [true; 5];
            mask[k] = false;
            let (m, g) = total_loss(&out, &yy, &aa, mask);
            assert!((full.l_total - m.l_total - full.terms()[k]).abs() < 1e-12);
            assert!(g[k].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn duplicated_sample_gives_identical_logits_and_is_deterministic() {
        let model: FusionModel<f64> = FusionModel::init(&tiny_fusion(), 6, 4).unwrap();
        let one = random_batch(1, 5, 4, 6, 7);
        let two = FusionBatch {
            batch: 2,
            cxr_tokens: one.cxr_tokens.repeat(2),
            ecg_tokens: one.ecg_tokens.repeat(2),
            cxr_tap: one.cxr_tap.repeat(2),
            ecg_tap: one.ecg_tap.repeat(2),
            ..one.clone()
        };
        let (a, _) = model.forward(&one).unwrap();
        let (b, _) = model.forward(&two).unwrap();
        for k in 0..5 {
            let w = a.widths[k];
            assert_eq!(&b.logits[k][..w], &a.logits[k][..]);
            assert_eq!(&b.logits[k][w..], &a.logits[k][..]);
        }
        assert_eq!(model.forward(&one).unwrap().0, a);
    }

    /// With one CXR token the refined sequence is `W_v x` repeated, so the CXR
    /// path equals a stack run directly on that constant sequence.
    #[test]
    fn single_cxr_token_matches_bypass_oracle() {
        let model: FusionModel<f64> = FusionModel::init(&tiny_fusion(), 6, 4).unwrap();
        let x = random_batch(2, 1, 3, 6, 11);
        let (out, _) = model.forward(&x).unwrap();
        let mut rows = Vec::new();
        for s in 0..2 {
            let v = project(&x.cxr_tokens[s * 6..(s + 1) * 6], 1, &model.coattn.w_v);
            for _ in 0..3 {
                rows.extend_from_slice(&v);
            }
        }
        let (pooled, _) = model.cxr_stack.forward(&rows, 2, 3);
        let (logits, _) = model.main_cxr.forward(&pooled, 2);
        for (a, b) in logits.iter().zip(out.branch(Branch::MainCxr)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_stochastic_and_shift_invariant() {
        let mut rng = stream_rng(5, 0, 0);
        for trial in 0..200 {
            let d = 1 + trial % 7;
            let dk = 1 + trial % 5;
            let att: CoAttention<f64> = CoAttention::new(d, dk, &mut rng);
            let (ne, nc) = (1 + trial % 4, 1 + trial % 6);
            let e: Vec<f64> = (0..ne * d).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let c: Vec<f64> = (0..nc * d).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let st = att.forward(&e, &c).unwrap();
            for row in st.attn.chunks(nc) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
            let scores: Vec<f64> = (0..nc).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let shift = rng.gen_range(-100.0..100.0);
            let mut a = scores.clone();
            let mut b: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            softmax_in_place(&mut a);
            softmax_in_place(&mut b);
            assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-6));
        }
    }

    fn perturb(model: &mut FusionModel<f64>, seed: u64) {
        let mut rng = stream_rng(seed, 1, 1);
        for t in model.all_tensors_mut() {
            t.data.iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = tiny_fusion();
        let mut model: FusionModel<f64> = FusionModel::init(&cfg, 6, 3).unwrap();
        perturb(&mut model, 9);
        let x = random_batch(2, 5, 4, 6, 13);
        let y = [[0, 1, 1, 1], [1, 1, 1, 1]];
        let a = [vec![1, 0, 1], vec![0, 0, 1]];
        let loss = |m: &FusionModel<f64>| total_loss(&m.forward(&x).unwrap().0, &y, &a, [true; 5]).0.l_total;
        let (out, cache) = model.forward(&x).unwrap();
        let (_, grads) = total_loss(&out, &y, &a, [true; 5]);
        let mut g = model.zeros_like();
        model.backward(&x, &cache, &grads, &mut g);
        let analytic: Vec<(String, Vec<f64>)> =
            g.named_tensors().into_iter().map(|(n, t)| (n, t.data.clone())).collect();
        let h = 1e-5;
        for (ti, (name, gt)) in analytic.iter().enumerate() {
            let step = if name.starts_with("coattn") { 1 } else { (gt.len() / 4).max(1) };
            for j in (0..gt.len()).step_by(step) {
                let mut mp = model.clone();
                mp.all_tensors_mut()[ti].data[j] += h;
                let mut mm = model.clone();
                mm.all_tensors_mut()[ti].data[j] -= h;
                let fd = (loss(&mp) - loss(&mm)) / (2.0 * h);
                let rel = (fd - gt[j]).abs() / fd.abs().max(gt[j].abs()).max(1e-7);
                assert!(rel < 1e-4, "{name}[{j}]: fd {fd} vs {}", gt[j]);
            }
        }
    }

    fn tiny_setup(dir: &Path) -> (Cohort, Encoder<f32>, Encoder<f32>) {
        let params = crate::synthgen::GeneratorParams {
            n_train: 20,
            n_holdout: 12,
            n_shift: 12,
            image_side: 16,
            ..Default::default()
        };
        crate::synthgen::gen_cohort(&params, dir, "tiny", None).unwrap();
        let cohort = crate::datamodel::load_cohort(dir).unwrap();
        let ec = EncoderConfig {
            image_side: 16,
            patch_side: 4,
            embed_dim: 8,
            n_heads: 2,
            n_layers: 2,
            tap_layer: 0,
            mlp_ratio: 2,
            seed: 1,
        };
        let cxr = Encoder::init(&ec).unwrap();
        let ecg = Encoder::init(&EncoderConfig { seed: 2, ..ec }).unwrap();
        (cohort, cxr, ecg)
    }

    #[test]
    fn training_freezes_encoders_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (cohort, cxr, ecg) = tiny_setup(dir.path());
        let zero = FusionConfig { epochs: 0, ..tiny_fusion() };
        let out = train_stage2(&cohort, &cxr, &ecg, &zero, |_| {}).unwrap();
        assert_eq!(out.model, FusionModel::init(&zero, 8, 4).unwrap());
        assert_eq!(out.encoder_hash_before, out.encoder_hash_after);

        let cfg = FusionConfig { epochs: 2, batch_size: 8, log_eval_samples: 12, ..tiny_fusion() };
        let a = train_stage2(&cohort, &cxr, &ecg, &cfg, |_| {}).unwrap();
        let b = train_stage2(&cohort, &cxr, &ecg, &cfg, |_| {}).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.encoder_hash_before, a.encoder_hash_after);
        assert_eq!(stage2_log_csv(&a.log), stage2_log_csv(&b.log));

        let nocausal =
            train_stage2(&cohort, &cxr, &ecg, &FusionConfig { mask_causal: true, ..cfg.clone() }, |_| {}).unwrap();
        assert_eq!(nocausal.model.main_concat, a.model.main_concat);
        assert_eq!(nocausal.log[1].losses.l_causal_cxr, 0.0);

        let path = dir.path().join("fusion.json");
        let meta =
            FusionCheckpointConfig { fusion: cfg, dim: 8, n_causal: 4, encoder_hashes: a.encoder_hash_after.clone() };
        let hash = a.model.save(&path, &meta, [Path::new("cxr.json"), Path::new("ecg.json")], None).unwrap();
        let (back, meta_back, refs) = FusionModel::load(&path).unwrap();
        assert_eq!(checkpoint::params_hash(&back), hash);
        assert_eq!(meta_back, meta);
        assert_eq!(refs.len(), 2);
    }
}
