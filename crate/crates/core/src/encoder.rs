//! Vision-transformer image encoder with class-token pooling and an
//! early-layer tap.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::{
    join, normalize_rows, normalize_rows_backward, Block, BlockCache, LayerNorm, LayerNormCache, Linear, Params,
    Scalar, Tensor, INIT_STD,
};
use crate::rng::{stream_id, stream_rng};

pub const ENCODER_KIND: &str = "encoder";
const TAP_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub image_side: usize,
    pub patch_side: usize,
    pub embed_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Index of the block whose output feeds the tap.
    pub tap_layer: usize,
    pub mlp_ratio: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_side: 64,
            patch_side: 8,
            embed_dim: 64,
            n_heads: 4,
            n_layers: 12,
            tap_layer: 3,
            mlp_ratio: 4,
            seed: 42,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("encoder: {m}")));
        if self.patch_side == 0 || self.image_side == 0 || self.image_side % self.patch_side != 0 {
            return bad("image_side must be a positive multiple of patch_side");
        }
        if self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return bad("embed_dim must be divisible by n_heads");
        }
        if self.n_layers == 0 || self.tap_layer >= self.n_layers {
            return bad("tap_layer must be < n_layers");
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be >= 1");
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_side / self.patch_side
    }

    /// Number of patch tokens.
    pub fn n_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Sequence length including the class token.
    pub fn seq_len(&self) -> usize {
        self.n_tokens() + 1
    }

    pub fn patch_len(&self) -> usize {
        self.patch_side * self.patch_side
    }
}

/// Encoder outputs for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    /// `n_tokens x dim` final patch features (after the output norm).
    pub tokens: Vec<f32>,
    /// Final class token after the output norm.
    pub pooled: Vec<f32>,
    /// Normalised class token at the tap layer.
    pub tap: Vec<f32>,
    pub n_tokens: usize,
    pub dim: usize,
}

impl FeatureBundle {
    pub fn all_finite(&self) -> bool {
        self.tokens.iter().chain(&self.pooled).chain(&self.tap).all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Depth {
    /// Every block plus the output norm.
    Full,
    /// Blocks up to and including the tap layer only.
    Tap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder<T> {
    pub config: EncoderConfig,
    pub patch_embed: Linear<T>,
    pub cls: Tensor<T>,
    pub pos: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub norm: LayerNorm<T>,
}

/// Activations of a batched forward pass, kept for the backward pass.
pub struct EncoderPass<T> {
    pub batch: usize,
    pub depth: Depth,
    patches: Vec<T>,
    pub caches: Vec<BlockCache<T>>,
    tap_xhat: Vec<T>,
    tap_rstd: Vec<T>,
    norm_cache: Option<LayerNormCache<T>>,
    out: Option<Vec<T>>,
}

impl<T: Scalar> EncoderPass<T> {
    /// Normalised tap-layer sequence, `[batch * seq, dim]`.
    pub fn tap_sequence(&self) -> &[T] {
        &self.tap_xhat
    }

    /// Output-norm sequence, `[batch * seq, dim]`; only for full passes.
    pub fn output(&self) -> Option<&[T]> {
        self.out.as_deref()
    }
}

/// Row `0` of each of `batch` sequences.
pub fn class_rows<T: Copy>(seq_data: &[T], batch: usize, seq: usize, dim: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(batch * dim);
    for b in 0..batch {
        out.extend_from_slice(&seq_data[b * seq * dim..b * seq * dim + dim]);
    }
    out
}

/// Scatters per-sample class-row gradients into a zero sequence gradient.
pub fn scatter_class_rows<T: Scalar>(d_cls: &[T], batch: usize, seq: usize, dim: usize) -> Vec<T> {
    let mut out = vec![T::zero(); batch * seq * dim];
    for b in 0..batch {
        out[b * seq * dim..b * seq * dim + dim].copy_from_slice(&d_cls[b * dim..(b + 1) * dim]);
    }
    out
}

impl<T: Scalar> Encoder<T> {
    /// Deterministic initialisation from `config.seed` (truncated normal, std 0.02).
    pub fn init(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(config.seed, stream_id("encoder-init"), 0);
        let d = config.embed_dim;
        Ok(Encoder {
            config: config.clone(),
            patch_embed: Linear::new(config.patch_len(), d, &mut rng),
            cls: Tensor::trunc_normal(&[d], INIT_STD, &mut rng),
            pos: Tensor::trunc_normal(&[config.seq_len(), d], INIT_STD, &mut rng),
            blocks: (0..config.n_layers).map(|_| Block::new(d, config.n_heads, config.mlp_ratio, &mut rng)).collect(),
            norm: LayerNorm::new(d),
        })
    }

    pub fn dim(&self) -> usize {
        self.config.embed_dim
    }

    fn extract_patches(&self, image: &[f32], out: &mut Vec<T>) -> Result<()> {
        let c = &self.config;
        let side = c.image_side;
        if image.len() != side * side {
            return Err(Error::ShapeMismatch {
                expected: format!("{side}x{side} image"),
                got: format!("{} pixels", image.len()),
            });
        }
        if image.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "input image".into(), diagnostics: "pixel is NaN or inf".into() });
        }
        let p = c.patch_side;
        for gy in 0..c.grid() {
            for gx in 0..c.grid() {
                for y in 0..p {
                    let row = (gy * p + y) * side + gx * p;
                    out.extend(image[row..row + p].iter().map(|&v| T::lit(v as f64)));
                }
            }
        }
        Ok(())
    }

    pub fn forward_batch(&self, images: &[&[f32]], depth: Depth) -> Result<EncoderPass<T>> {
        let c = &self.config;
        let (batch, seq, d, n) = (images.len(), c.seq_len(), c.embed_dim, c.n_tokens());
        let mut patches = Vec::with_capacity(batch * n * c.patch_len());
        for img in images {
            self.extract_patches(img, &mut patches)?;
        }
        let emb = self.patch_embed.forward(&patches, batch * n);
        let mut x = vec![T::zero(); batch * seq * d];
        for b in 0..batch {
            for s in 0..seq {
                let dst = &mut x[(b * seq + s) * d..(b * seq + s + 1) * d];
                let pos = &self.pos.data[s * d..(s + 1) * d];
                let src = if s == 0 { &self.cls.data[..] } else { &emb[(b * n + s - 1) * d..(b * n + s) * d] };
                for ((o, &a), &p) in dst.iter_mut().zip(src).zip(pos) {
                    *o = a + p;
                }
            }
        }
        let n_run = match depth {
            Depth::Full => c.n_layers,
            Depth::Tap => c.tap_layer + 1,
        };
        let mut caches = Vec::with_capacity(n_run);
        let mut tap = (Vec::new(), Vec::new());
        for (l, block) in self.blocks.iter().take(n_run).enumerate() {
            let (y, cache) = block.forward(&x, batch, seq);
            x = y;
            caches.push(cache);
            if l == c.tap_layer {
                tap = normalize_rows(&x, d, T::lit(TAP_EPS));
            }
        }
        let (norm_cache, out) = match depth {
            Depth::Full => {
                let (y, cache) = self.norm.forward(&x);
                (Some(cache), Some(y))
            }
            Depth::Tap => (None, None),
        };
        Ok(EncoderPass { batch, depth, patches, caches, tap_xhat: tap.0, tap_rstd: tap.1, norm_cache, out })
    }

    /// Backpropagates gradients w.r.t. the output sequence and/or the tap
    /// sequence, accumulating into `grad`.
    pub fn backward(&self, pass: &EncoderPass<T>, d_out: Option<&[T]>, d_tap: Option<&[T]>, grad: &mut Encoder<T>) {
        let c = &self.config;
        let (batch, seq, d, n) = (pass.batch, c.seq_len(), c.embed_dim, c.n_tokens());
        let mut g = match (d_out, &pass.norm_cache) {
            (Some(dy), Some(cache)) => self.norm.backward(cache, dy, &mut grad.norm),
            (Some(_), None) => panic!("output gradient given for a tap-depth pass"),
            (None, _) => vec![T::zero(); batch * seq * d],
        };
        let top = match (d_out, pass.depth) {
            (Some(_), _) => pass.caches.len(),
            (None, _) => c.tap_layer + 1,
        };
        for l in (0..top).rev() {
            if l == c.tap_layer {
                if let Some(dt) = d_tap {
                    let dx = normalize_rows_backward(&pass.tap_xhat, &pass.tap_rstd, dt, d);
                    g.iter_mut().zip(&dx).for_each(|(a, &b)| *a += b);
                }
            }
            g = self.blocks[l].backward(batch, seq, &pass.caches[l], &g, &mut grad.blocks[l]);
        }
        let mut d_emb = vec![T::zero(); batch * n * d];
        for b in 0..batch {
            for s in 0..seq {
                let src = &g[(b * seq + s) * d..(b * seq + s + 1) * d];
                for (p, &v) in grad.pos.data[s * d..(s + 1) * d].iter_mut().zip(src) {
                    *p += v;
                }
                if s == 0 {
                    grad.cls.data.iter_mut().zip(src).for_each(|(a, &v)| *a += v);
                } else {
                    d_emb[(b * n + s - 1) * d..(b * n + s) * d].copy_from_slice(src);
                }
            }
        }
        self.patch_embed.backward(&pass.patches, batch * n, &d_emb, &mut grad.patch_embed, false);
    }

    /// Class-token tap features `[batch, dim]` of a pass.
    pub fn tap_pooled(&self, pass: &EncoderPass<T>) -> Vec<T> {
        class_rows(&pass.tap_xhat, pass.batch, self.config.seq_len(), self.dim())
    }

    /// Final class-token features `[batch, dim]` of a full pass.
    pub fn pooled(&self, pass: &EncoderPass<T>) -> Vec<T> {
        class_rows(pass.output().expect("full pass"), pass.batch, self.config.seq_len(), self.dim())
    }

    pub fn encode_batch(&self, images: &[&[f32]]) -> Result<Vec<FeatureBundle>> {
        let pass = self.forward_batch(images, Depth::Full)?;
        let (seq, d, n) = (self.config.seq_len(), self.dim(), self.config.n_tokens());
        let out = pass.output().expect("full pass");
        Ok((0..pass.batch)
            .map(|b| {
                let base = b * seq * d;
                FeatureBundle {
                    tokens: out[base + d..base + seq * d].iter().map(|v| v.as_f64() as f32).collect(),
                    pooled: out[base..base + d].iter().map(|v| v.as_f64() as f32).collect(),
                    tap: pass.tap_xhat[base..base + d].iter().map(|v| v.as_f64() as f32).collect(),
                    n_tokens: n,
                    dim: d,
                }
            })
            .collect())
    }

    pub fn encode(&self, image: &[f32]) -> Result<FeatureBundle> {
        Ok(self.encode_batch(&[image])?.remove(0))
    }
}

impl<T: Scalar> Params<T> for Encoder<T> {
    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.patch_embed.named(&join(prefix, "patch_embed"), out);
        out.push((join(prefix, "cls"), &self.cls));
        out.push((join(prefix, "pos"), &self.pos));
        self.blocks.named(&join(prefix, "blocks"), out);
        self.norm.named(&join(prefix, "norm"), out);
    }

    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        self.patch_embed.tensors_mut(out);
        out.push(&mut self.cls);
        out.push(&mut self.pos);
        self.blocks.tensors_mut(out);
        self.norm.tensors_mut(out);
    }
}

/// Initialises an encoder, optionally overwriting its parameters from an
/// external checkpoint with the same layout.
pub fn init_encoder(config: &EncoderConfig, weights: Option<&Path>) -> Result<Encoder<f32>> {
    let mut enc = Encoder::init(config)?;
    if let Some(path) = weights {
        checkpoint::load_into(path, ENCODER_KIND, &mut enc)?;
    }
    Ok(enc)
}

impl Encoder<f32> {
    pub fn save(&self, path: &Path, config_hash: Option<String>) -> Result<checkpoint::CheckpointManifest> {
        let cfg = serde_json::to_value(&self.config).map_err(|e| Error::json(path, e))?;
        checkpoint::save(path, ENCODER_KIND, cfg, config_hash, Vec::new(), self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let manifest = checkpoint::read_manifest(path)?;
        let config: EncoderConfig =
            serde_json::from_value(manifest.config.clone()).map_err(|e| Error::json(path, e))?;
        init_encoder(&config, Some(path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny(n_layers: usize, tap_layer: usize) -> EncoderConfig {
        EncoderConfig {
            image_side: 16,
            patch_side: 4,
            embed_dim: 16,
            n_heads: 2,
            n_layers,
            tap_layer,
            mlp_ratio: 2,
            seed: 5,
        }
    }

    fn image(side: usize, seed: u64) -> Vec<f32> {
        let mut rng = stream_rng(seed, 0, 0);
        (0..side * side).map(|_| rng.gen::<f32>()).collect()
    }

    #[test]
    fn init_is_seed_deterministic() {
        let c = EncoderConfig::default();
        let a: Encoder<f32> = Encoder::init(&c).unwrap();
        let b: Encoder<f32> = Encoder::init(&c).unwrap();
        assert_eq!(a, b);
        let other: Encoder<f32> = Encoder::init(&EncoderConfig { seed: 43, ..c.clone() }).unwrap();
        assert_ne!(a, other);
        assert_eq!(c.n_tokens(), 64);
        assert!(a.all_finite());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for c in [
            EncoderConfig { patch_side: 7, ..Default::default() },
            EncoderConfig { n_heads: 5, ..Default::default() },
            EncoderConfig { tap_layer: 12, ..Default::default() },
        ] {
            assert!(matches!(Encoder::<f32>::init(&c), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let enc: Encoder<f32> = Encoder::init(&tiny(2, 0)).unwrap();
        let img = image(16, 1);
        let a = enc.encode(&img).unwrap();
        assert_eq!(a, enc.encode(&img).unwrap());
        assert_eq!((a.n_tokens, a.dim, a.tokens.len()), (16, 16, 256));
        assert!(a.all_finite());
        let norm: f32 = a.pooled.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!(norm > 0.0 && norm.is_finite());
        assert!(matches!(enc.encode(&img[..10]), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn batch_encoding_matches_single() {
        let enc: Encoder<f32> = Encoder::init(&tiny(2, 1)).unwrap();
        let (i1, i2) = (image(16, 1), image(16, 2));
        let both = enc.encode_batch(&[&i1, &i2]).unwrap();
        assert_eq!(both[1], enc.encode(&i2).unwrap());
    }

    /// Without positional embeddings the encoder is permutation-equivariant
    /// over patches and the class token is invariant.
    #[test]
    fn patch_permutation_equivariance() {
        let mut enc: Encoder<f64> = Encoder::init(&tiny(2, 0)).unwrap();
        enc.pos.fill(0.0);
        let side = 16;
        let img = image(side, 9);
        // swap patch (0,0) with patch (2,3) and patch (1,1) with (3,0)
        let swaps = [((0, 0), (2, 3)), ((1, 1), (3, 0))];
        let mut permuted = img.clone();
        let mut perm: Vec<usize> = (0..16).collect();
        for &((ax, ay), (bx, by)) in &swaps {
            for y in 0..4 {
                for x in 0..4 {
                    let pa = (ay * 4 + y) * side + ax * 4 + x;
                    let pb = (by * 4 + y) * side + bx * 4 + x;
                    permuted.swap(pa, pb);
                }
            }
            perm.swap(ay * 4 + ax, by * 4 + bx);
        }
        let a = enc.encode(&img).unwrap();
        let b = enc.encode(&permuted).unwrap();
        for (x, y) in a.pooled.iter().zip(&b.pooled) {
            assert!((x - y).abs() < 1e-5);
        }
        for (i, &src) in perm.iter().enumerate() {
            for k in 0..16 {
                assert!((b.tokens[i * 16 + k] - a.tokens[src * 16 + k]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn tap_is_independent_of_later_layers() {
        let full: Encoder<f32> = Encoder::init(&tiny(12, 1)).unwrap();
        let mut short = full.clone();
        short.blocks.truncate(2);
        short.config.n_layers = 2;
        let img = image(16, 4);
        assert_eq!(full.encode(&img).unwrap().tap, short.encode(&img).unwrap().tap);
        let pass = full.forward_batch(&[&img], Depth::Tap).unwrap();
        assert_eq!(pass.caches.len(), 2);
        assert_eq!(full.tap_pooled(&pass), full.encode(&img).unwrap().tap);
    }

    #[test]
    fn attention_rows_sum_to_one_in_every_block() {
        let enc: Encoder<f32> = Encoder::init(&tiny(3, 1)).unwrap();
        let img = image(16, 8);
        let pass = enc.forward_batch(&[&img, &img], Depth::Full).unwrap();
        for cache in &pass.caches {
            for row in cache.attn.probs.chunks(17) {
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            }
        }
    }

    /// Central differences (h = 1e-5, f64) on a 2-layer, d=16 encoder for a
    /// probe loss that touches both the pooled output and the tap.
    #[test]
    fn gradients_match_finite_differences() {
        let mut enc: Encoder<f64> = Encoder::init(&tiny(2, 0)).unwrap();
        let mut rng = stream_rng(3, 3, 3);
        for t in enc.all_tensors_mut() {
            t.data.iter_mut().for_each(|v| *v += rng.gen_range(-0.2..0.2));
        }
        let imgs = [image(16, 1), image(16, 2)];
        let refs: Vec<&[f32]> = imgs.iter().map(|v| v.as_slice()).collect();
        let seq = enc.config.seq_len();
        let w_out: Vec<f64> = (0..2 * seq * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w_tap: Vec<f64> = (0..2 * seq * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |e: &Encoder<f64>| -> f64 {
            let p = e.forward_batch(&refs, Depth::Full).unwrap();
            let a: f64 = p.output().unwrap().iter().zip(&w_out).map(|(x, w)| x * w).sum();
            let b: f64 = p.tap_sequence().iter().zip(&w_tap).map(|(x, w)| x * w).sum();
            a + b
        };
        let pass = enc.forward_batch(&refs, Depth::Full).unwrap();
        let mut grad = enc.zeros_like();
        enc.backward(&pass, Some(&w_out), Some(&w_tap), &mut grad);
        let analytic: Vec<(String, Vec<f64>)> =
            grad.named_tensors().into_iter().map(|(n, t)| (n, t.data.clone())).collect();
        let h = 1e-5;
        for (ti, (name, g)) in analytic.iter().enumerate() {
            for j in (0..g.len()).step_by((g.len() / 5).max(1)) {
                let mut ep = enc.clone();
                ep.all_tensors_mut()[ti].data[j] += h;
                let mut em = enc.clone();
                em.all_tensors_mut()[ti].data[j] -= h;
                let fd = (loss(&ep) - loss(&em)) / (2.0 * h);
                let rel = (fd - g[j]).abs() / fd.abs().max(g[j].abs()).max(1e-3);
                assert!(rel < 1e-4, "{name}[{j}]: fd {fd} vs analytic {}", g[j]);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let enc: Encoder<f32> = Encoder::init(&tiny(2, 1)).unwrap();
        let path = dir.path().join("enc.json");
        enc.save(&path, Some("abc".into())).unwrap();
        let back = Encoder::load(&path).unwrap();
        assert_eq!(enc, back);
        assert_eq!(checkpoint::params_hash(&enc), checkpoint::params_hash(&back));
        // init_encoder with an external weight file reproduces the same parameters
        let other = init_encoder(&EncoderConfig { seed: 99, ..tiny(2, 1) }, Some(&path)).unwrap();
        assert_eq!(checkpoint::params_hash(&other), checkpoint::params_hash(&enc));
        // wrong layout is refused
        assert!(init_encoder(&tiny(3, 1), Some(&path)).is_err());
    }
}
