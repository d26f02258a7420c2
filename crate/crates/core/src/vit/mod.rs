//! Desk-scale Vision Transformer encoder.
//!
//! Images are cut into non-overlapping square patches, each flattened patch is
//! embedded by `E`, a class token is prepended, and the sequence runs through
//! `L` blocks of the form
//!
//! ```text
//! Z'      = Z + [H_1 … H_h] W_o          H_j = softmax(Q_j K_jᵀ / √d_k) V_j
//! Ẑ       = LayerNorm(Z')
//! Z_next  = Z' + GELU(Ẑ W_1 + b_1) W_2 + b_2
//! ```
//!
//! There is a single LayerNorm between the attention residual and the FFN. All
//! forward passes are recorded on a [`Tape`]; the plain functions wrap a
//! throwaway tape.

mod checkpoint;
mod weights;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Manifest};
pub use weights::{BlockWeights, TransformerBlockParams, VitParams, VitWeights};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Tape, Var};

/// Patch geometry and embedding width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchEmbedConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
}

impl PatchEmbedConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || self.image_height % p != 0 || self.image_width % p != 0 {
            return Err(Error::config(format!(
                "image {}x{} is not divisible into {p}x{p} patches",
                self.image_height, self.image_width
            )));
        }
        if self.channels == 0 || self.embed_dim == 0 {
            return Err(Error::config("channels and embed_dim must be positive"));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    /// `patch_size² · channels`.
    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitConfig {
    pub image_height: usize,
    pub image_width: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub patch_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub embed_dim: usize,
    /// Defaults to `embed_dim / num_heads`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_dim: Option<usize>,
    pub ffn_dim: usize,
    #[serde(default = "default_true")]
    pub positional_embedding: bool,
}

fn default_channels() -> usize {
    1
}

impl VitConfig {
    /// 16x16 grayscale, patch 4, two layers, d = 32, four heads.
    pub fn desk_default() -> Self {
        VitConfig {
            image_height: 16,
            image_width: 16,
            channels: 1,
            patch_size: 4,
            num_layers: 2,
            num_heads: 4,
            embed_dim: 32,
            head_dim: None,
            ffn_dim: 64,
            positional_embedding: true,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim.unwrap_or(self.embed_dim / self.num_heads.max(1))
    }

    pub fn patch_config(&self) -> PatchEmbedConfig {
        PatchEmbedConfig {
            image_height: self.image_height,
            image_width: self.image_width,
            channels: self.channels,
            patch_size: self.patch_size,
            embed_dim: self.embed_dim,
        }
    }

    pub fn num_patches(&self) -> usize {
        self.patch_config().num_patches()
    }

    pub fn patch_len(&self) -> usize {
        self.patch_config().patch_len()
    }

    pub fn validate(&self) -> Result<()> {
        self.patch_config().validate()?;
        if self.num_layers == 0 {
            return Err(Error::config("num_layers must be ≥ 1"));
        }
        if self.num_heads == 0 {
            return Err(Error::config("num_heads must be ≥ 1"));
        }
        if self.head_dim() == 0 {
            return Err(Error::config("head_dim must be ≥ 1"));
        }
        if self.ffn_dim == 0 {
            return Err(Error::config("ffn_dim must be ≥ 1"));
        }
        Ok(())
    }
}

/// Token matrix of one image, `(n+1) x d`; row 0 is the class token.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence(Matrix);

impl TokenSequence {
    pub fn new(values: Matrix, num_patches: usize) -> Result<Self> {
        if values.rows() != num_patches + 1 {
            return Err(Error::config(format!(
                "sequence has {} rows, expected {} patches plus the class token",
                values.rows(),
                num_patches
            )));
        }
        Ok(TokenSequence(values))
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn class_token(&self) -> &[f64] {
        self.0.row(0)
    }
}

/// Flattens non-overlapping patches into the rows of an `n x p` matrix.
/// Patches are taken in row-major grid order; within a patch, pixels are
/// row-major with channels innermost.
pub fn extract_patches(image: &Image, cfg: &PatchEmbedConfig) -> Result<Matrix> {
    cfg.validate()?;
    if (image.height, image.width, image.channels) != (cfg.image_height, cfg.image_width, cfg.channels) {
        return Err(Error::config(format!(
            "image is {}x{}x{}, model expects {}x{}x{}",
            image.height, image.width, image.channels, cfg.image_height, cfg.image_width, cfg.channels
        )));
    }
    let ps = cfg.patch_size;
    let grid_w = cfg.image_width / ps;
    let mut out = Matrix::zeros(cfg.num_patches(), cfg.patch_len());
    for patch in 0..cfg.num_patches() {
        let (py, px) = (patch / grid_w, patch % grid_w);
        let row = out.row_mut(patch);
        let mut k = 0;
        for dy in 0..ps {
            for dx in 0..ps {
                for c in 0..cfg.channels {
                    row[k] = image.get(py * ps + dy, px * ps + dx, c);
                    k += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Builds the initial token sequence on the tape. `patch_embed_t` is `Eᵀ` (p x d).
pub fn embed_patches_recorded(
    tape: &mut Tape,
    image: &Image,
    cfg: &PatchEmbedConfig,
    patch_embed_t: Var,
    class_token: Var,
    pos_embed: Option<Var>,
) -> Result<Var> {
    let patches = tape.constant(extract_patches(image, cfg)?);
    let tokens = tape.matmul(patches, patch_embed_t)?;
    let seq = tape.concat_rows(&[class_token, tokens])?;
    match pos_embed {
        Some(p) => tape.add(seq, p),
        None => Ok(seq),
    }
}

/// `z_i = E x_i` for every patch, class token prepended, positional embeddings added if given.
pub fn embed_patches(
    image: &Image,
    cfg: &PatchEmbedConfig,
    patch_embed: &Matrix,
    class_token: &Matrix,
    pos_embed: Option<&Matrix>,
) -> Result<TokenSequence> {
    if patch_embed.shape() != (cfg.embed_dim, cfg.patch_len()) {
        return Err(Error::config(format!(
            "embedding matrix is {:?}, expected {:?}",
            patch_embed.shape(),
            (cfg.embed_dim, cfg.patch_len())
        )));
    }
    let mut tape = Tape::new();
    let e = tape.constant(patch_embed.clone());
    let et = tape.transpose(e);
    let c = tape.constant(class_token.clone());
    let p = pos_embed.map(|p| tape.constant(p.clone()));
    let seq = embed_patches_recorded(&mut tape, image, cfg, et, c, p)?;
    TokenSequence::new(tape.value(seq).clone(), cfg.num_patches())
}

/// Scaled dot-product attention for one head; returns `(A, H)`.
pub fn attention_head_recorded(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let d_k = tape.shape(q).1;
    let kt = tape.transpose(k);
    let logits = tape.matmul(q, kt)?;
    let scaled = tape.scale(logits, 1.0 / (d_k as f64).sqrt());
    let a = tape.softmax_rows(scaled);
    let h = tape.matmul(a, v)?;
    Ok((a, h))
}

/// Single head on a token matrix with `d x d_k` projections; returns `(A, H)`.
pub fn attention_head(z: &Matrix, w_q: &Matrix, w_k: &Matrix, w_v: &Matrix) -> Result<(Matrix, Matrix)> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let [q, k, v] = [w_q, w_k, w_v].map(|w| tape.constant(w.clone()));
    let q = tape.matmul(zv, q)?;
    let k = tape.matmul(zv, k)?;
    let v = tape.matmul(zv, v)?;
    let (a, h) = attention_head_recorded(&mut tape, q, k, v)?;
    Ok((tape.value(a).clone(), tape.value(h).clone()))
}

/// One block update on the tape.
pub fn transformer_block_recorded(
    tape: &mut Tape,
    z: Var,
    w: &BlockWeights<Var>,
    num_heads: usize,
) -> Result<Var> {
    let hd = tape.shape(w.w_q).1;
    if num_heads == 0 || hd % num_heads != 0 {
        return Err(Error::config(format!("{hd} projection columns do not split into {num_heads} heads")));
    }
    let d_k = hd / num_heads;
    let q = tape.matmul(z, w.w_q)?;
    let k = tape.matmul(z, w.w_k)?;
    let v = tape.matmul(z, w.w_v)?;
    let mut heads = Vec::with_capacity(num_heads);
    for j in 0..num_heads {
        let qj = tape.slice_cols(q, j * d_k, d_k);
        let kj = tape.slice_cols(k, j * d_k, d_k);
        let vj = tape.slice_cols(v, j * d_k, d_k);
        heads.push(attention_head_recorded(tape, qj, kj, vj)?.1);
    }
    let concat = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    let multi = tape.matmul(concat, w.w_o)?;
    let z1 = tape.add(z, multi)?;
    let normed = tape.layer_norm(z1, w.ln_scale, w.ln_shift)?;
    let hidden = tape.matmul(normed, w.w1)?;
    let hidden = tape.add_row_broadcast(hidden, w.b1)?;
    let hidden = tape.gelu(hidden);
    let ffn = tape.matmul(hidden, w.w2)?;
    let ffn = tape.add_row_broadcast(ffn, w.b2)?;
    tape.add(z1, ffn)
}

pub fn transformer_block(z: &TokenSequence, params: &TransformerBlockParams, num_heads: usize) -> Result<TokenSequence> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.as_matrix().clone());
    let w = params.map("", &mut |_, m| tape.constant(m.clone()));
    let out = transformer_block_recorded(&mut tape, zv, &w, num_heads)?;
    Ok(TokenSequence(tape.value(out).clone()))
}

/// Callback run after every block with the `d x m` class-token matrix. Returning
/// `Some(z_hat)` replaces the class token of every sample before the next block.
pub type BlockHook<'a> = dyn FnMut(&mut Tape, usize, Var) -> Result<Option<Var>> + 'a;

/// Recorded encoder output.
#[derive(Clone, Debug)]
pub struct RecordedEncoding {
    /// d x m class tokens after the last block (after any replacement there).
    pub class_tokens: Var,
    /// Class tokens after each requested layer, before any replacement.
    pub taps: BTreeMap<usize, Var>,
}

fn gather_class_tokens(tape: &mut Tape, seqs: &[Var]) -> Result<Var> {
    let cols: Vec<Var> = seqs
        .iter()
        .map(|&s| {
            let row = tape.slice_rows(s, 0, 1);
            tape.transpose(row)
        })
        .collect();
    if cols.len() == 1 {
        return Ok(cols[0]);
    }
    tape.concat_cols(&cols)
}

/// Runs the encoder over a batch on the tape.
pub fn encode_recorded(
    tape: &mut Tape,
    images: &[&Image],
    cfg: &VitConfig,
    w: &VitWeights<Var>,
    tap_points: &[usize],
    hook: &mut BlockHook<'_>,
) -> Result<RecordedEncoding> {
    cfg.validate()?;
    if w.blocks.len() != cfg.num_layers {
        return Err(Error::config(format!(
            "{} blocks of parameters for {} layers",
            w.blocks.len(),
            cfg.num_layers
        )));
    }
    if let Some(&bad) = tap_points.iter().find(|&&t| t > cfg.num_layers) {
        return Err(Error::config(format!("tap point {bad} beyond layer count {}", cfg.num_layers)));
    }
    if images.is_empty() {
        return Err(Error::usage("cannot encode an empty batch"));
    }
    let pcfg = cfg.patch_config();
    let et = tape.transpose(w.patch_embed);
    let mut seqs = Vec::with_capacity(images.len());
    for img in images {
        seqs.push(embed_patches_recorded(tape, img, &pcfg, et, w.class_token, w.pos_embed)?);
    }
    let mut taps = BTreeMap::new();
    if tap_points.contains(&0) {
        let z = gather_class_tokens(tape, &seqs)?;
        taps.insert(0, z);
    }
    let n = cfg.num_patches();
    let mut class_tokens = None;
    for (l, block) in w.blocks.iter().enumerate() {
        let layer = l + 1;
        for s in seqs.iter_mut() {
            *s = transformer_block_recorded(tape, *s, block, cfg.num_heads)?;
        }
        let z = gather_class_tokens(tape, &seqs)?;
        if tap_points.contains(&layer) {
            taps.insert(layer, z);
        }
        let replaced = hook(tape, layer, z)?;
        if let Some(z_hat) = replaced {
            if tape.shape(z_hat) != tape.shape(z) {
                return Err(Error::Dimension {
                    op: "class token replacement",
                    lhs: tape.shape(z),
                    rhs: tape.shape(z_hat),
                });
            }
            if layer < cfg.num_layers {
                for (j, s) in seqs.iter_mut().enumerate() {
                    let col = tape.column(z_hat, j);
                    let row = tape.transpose(col);
                    let patches = tape.slice_rows(*s, 1, n);
                    *s = tape.concat_rows(&[row, patches])?;
                }
            }
        }
        class_tokens = Some(replaced.unwrap_or(z));
    }
    Ok(RecordedEncoding {
        class_tokens: class_tokens.expect("at least one layer"),
        taps,
    })
}

/// Plain encoder output.
#[derive(Clone, Debug)]
pub struct Encoding {
    /// d x m final-layer class tokens, column j = sample j.
    pub features: Matrix,
    pub taps: BTreeMap<usize, Matrix>,
}

/// Encodes a batch and returns the final class tokens plus class tokens at `tap_points` (0 = after embedding).
pub fn encode(images: &[&Image], cfg: &VitConfig, params: &VitParams, tap_points: &[usize]) -> Result<Encoding> {
    let mut tape = Tape::new();
    let w = params.map(&mut |_, m| tape.constant(m.clone()));
    let enc = encode_recorded(&mut tape, images, cfg, &w, tap_points, &mut |_, _, _| Ok(None))?;
    Ok(Encoding {
        features: tape.value(enc.class_tokens).clone(),
        taps: enc.taps.iter().map(|(&l, &v)| (l, tape.value(v).clone())).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::SplitMix64;

    fn tiny_cfg(positional: bool) -> VitConfig {
        VitConfig {
            image_height: 4,
            image_width: 4,
            channels: 1,
            patch_size: 2,
            num_layers: 2,
            num_heads: 2,
            embed_dim: 8,
            head_dim: None,
            ffn_dim: 12,
            positional_embedding: positional,
        }
    }

    fn random_image(rng: &mut SplitMix64, h: usize, w: usize, c: usize) -> Image {
        Image::new(h, w, c, (0..h * w * c).map(|_| rng.uniform()).collect()).unwrap()
    }

    /// Random parameters at a scale where attention is far from uniform.
    fn random_params(cfg: &VitConfig, rng: &mut SplitMix64) -> VitParams {
        let mut p = VitParams::init(cfg, rng);
        p.for_each_mut(&mut |_, m| *m = rng.normal_matrix(m.rows(), m.cols(), 0.4));
        p
    }

    #[test]
    fn patch_order_is_row_major() {
        let pixels: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let img = Image::new(4, 4, 1, pixels).unwrap();
        let cfg = tiny_cfg(false).patch_config();
        let p = extract_patches(&img, &cfg).unwrap();
        assert_eq!(p.shape(), (4, 4));
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(2), &[8.0, 9.0, 12.0, 13.0]);
        assert_eq!(p.row(3), &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn zero_patch_embeds_to_zero() {
        let cfg = PatchEmbedConfig {
            image_height: 2,
            image_width: 2,
            channels: 1,
            patch_size: 2,
            embed_dim: 4,
        };
        let img = Image::new(2, 2, 1, vec![0.0; 4]).unwrap();
        let seq = embed_patches(&img, &cfg, &Matrix::identity(4), &Matrix::filled(1, 4, 0.5), None).unwrap();
        assert_eq!(seq.as_matrix().row(1), &[0.0; 4]);
        assert_eq!(seq.class_token(), &[0.5; 4]);
    }

    #[test]
    fn embedding_matches_independent_flattening() {
        let mut rng = SplitMix64::new(1);
        let cfg = PatchEmbedConfig {
            image_height: 6,
            image_width: 4,
            channels: 2,
            patch_size: 2,
            embed_dim: 5,
        };
        let img = random_image(&mut rng, 6, 4, 2);
        let e = rng.normal_matrix(5, 8, 1.0);
        let cls = rng.normal_matrix(1, 5, 1.0);
        let pos = rng.normal_matrix(7, 5, 1.0);
        let seq = embed_patches(&img, &cfg, &e, &cls, Some(&pos)).unwrap();
        let mut idx = 1;
        for py in 0..3 {
            for px in 0..2 {
                let mut x = Vec::new();
                for dy in 0..2 {
                    for dx in 0..2 {
                        for c in 0..2 {
                            x.push(img.pixels[((py * 2 + dy) * 4 + px * 2 + dx) * 2 + c]);
                        }
                    }
                }
                for r in 0..5 {
                    let z: f64 = (0..8).map(|k| e[(r, k)] * x[k]).sum::<f64>() + pos[(idx, r)];
                    assert!((seq.as_matrix()[(idx, r)] - z).abs() <= 1e-12);
                }
                idx += 1;
            }
        }
    }

    #[test]
    fn image_shape_mismatch_is_config_error() {
        let img = Image::new(3, 4, 1, vec![0.0; 12]).unwrap();
        assert!(matches!(
            extract_patches(&img, &tiny_cfg(false).patch_config()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn attention_single_token() {
        let mut rng = SplitMix64::new(2);
        let z = rng.normal_matrix(1, 4, 1.0);
        let (wq, wk, wv) = (rng.normal_matrix(4, 3, 1.0), rng.normal_matrix(4, 3, 1.0), rng.normal_matrix(4, 3, 1.0));
        let (a, h) = attention_head(&z, &wq, &wk, &wv).unwrap();
        assert_eq!(a, Matrix::scalar(1.0));
        assert_eq!(h, z.matmul(&wv).unwrap());
    }

    #[test]
    fn attention_zero_logits_average_values() {
        let mut rng = SplitMix64::new(3);
        let z = rng.normal_matrix(5, 4, 1.0);
        let wv = rng.normal_matrix(4, 3, 1.0);
        let (a, h) = attention_head(&z, &Matrix::zeros(4, 3), &rng.normal_matrix(4, 3, 1.0), &wv).unwrap();
        assert!(a.as_slice().iter().all(|&x| (x - 0.2).abs() < 1e-15));
        let v = z.matmul(&wv).unwrap();
        for r in 0..5 {
            for c in 0..3 {
                let mean = (0..5).map(|i| v[(i, c)]).sum::<f64>() / 5.0;
                assert!((h[(r, c)] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_matches_two_loop_formula() {
        let mut rng = SplitMix64::new(4);
        let z = rng.normal_matrix(3, 4, 1.0);
        let (wq, wk, wv) = (rng.normal_matrix(4, 2, 1.0), rng.normal_matrix(4, 2, 1.0), rng.normal_matrix(4, 2, 1.0));
        let (a, h) = attention_head(&z, &wq, &wk, &wv).unwrap();
        let (q, k, v) = (z.matmul(&wq).unwrap(), z.matmul(&wk).unwrap(), z.matmul(&wv).unwrap());
        for i in 0..3 {
            let logits: Vec<f64> = (0..3)
                .map(|j| (0..2).map(|c| q[(i, c)] * k[(j, c)]).sum::<f64>() / 2f64.sqrt())
                .collect();
            let denom: f64 = logits.iter().map(|l| l.exp()).sum();
            for j in 0..3 {
                assert!((a[(i, j)] - logits[j].exp() / denom).abs() <= 1e-12);
            }
            for c in 0..2 {
                let hv: f64 = (0..3).map(|j| logits[j].exp() / denom * v[(j, c)]).sum();
                assert!((h[(i, c)] - hv).abs() <= 1e-12);
            }
            let row_sum: f64 = a.row(i).iter().sum();
            assert!((row_sum - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn attention_is_invariant_to_logit_shift() {
        // Adding c·1ᵀ to every logit: append a constant feature to Q and K.
        let mut rng = SplitMix64::new(5);
        let q = rng.normal_matrix(4, 3, 1.0);
        let k = rng.normal_matrix(4, 3, 1.0);
        let v = rng.normal_matrix(4, 2, 1.0);
        let run = |q: &Matrix, k: &Matrix| {
            let mut t = Tape::new();
            let (q, k, v) = (t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()));
            let (a, _) = attention_head_recorded(&mut t, q, k, v).unwrap();
            t.value(a).clone()
        };
        let base = run(&q, &k);
        let shift = 0.75;
        let q2 = Matrix::concat_cols(&[&q, &Matrix::filled(4, 1, 1.0)]).unwrap();
        let k2 = Matrix::concat_cols(&[&k, &Matrix::filled(4, 1, shift)]).unwrap();
        // rescale so the √d_k factor matches the 3-column case
        let s = (4.0f64 / 3.0).sqrt();
        let shifted = run(&q2.scale(s), &k2);
        assert!(shifted.max_abs_diff(&base) <= 1e-12);
    }

    #[test]
    fn zero_block_is_identity() {
        let cfg = tiny_cfg(false);
        let mut rng = SplitMix64::new(6);
        let z = TokenSequence::new(rng.normal_matrix(5, 8, 1.0), 4).unwrap();
        let out = transformer_block(&z, &BlockWeights::zeros(&cfg), 2).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn single_head_reduction() {
        let mut cfg = tiny_cfg(false);
        cfg.num_heads = 1;
        cfg.head_dim = Some(8);
        let mut rng = SplitMix64::new(7);
        let mut p = BlockWeights::zeros(&cfg);
        p.w_q = rng.normal_matrix(8, 8, 0.5);
        p.w_k = rng.normal_matrix(8, 8, 0.5);
        p.w_v = rng.normal_matrix(8, 8, 0.5);
        p.w_o = Matrix::identity(8);
        let z = rng.normal_matrix(5, 8, 1.0);
        let out = transformer_block(&TokenSequence::new(z.clone(), 4).unwrap(), &p, 1).unwrap();
        let (_, h) = attention_head(&z, &p.w_q, &p.w_k, &p.w_v).unwrap();
        assert!(out.as_matrix().max_abs_diff(&z.add(&h).unwrap()) <= 1e-14);
    }

    /// One block evaluated step by step with plain loops.
    fn reference_block(z: &Matrix, p: &TransformerBlockParams, heads: usize) -> Matrix {
        let (t, d) = z.shape();
        let dk = p.w_q.cols() / heads;
        let mm = |a: &Matrix, b: &Matrix| {
            Matrix::from_fn(a.rows(), b.cols(), |i, j| (0..a.cols()).map(|k| a[(i, k)] * b[(k, j)]).sum())
        };
        let (q, k, v) = (mm(z, &p.w_q), mm(z, &p.w_k), mm(z, &p.w_v));
        let mut concat = Matrix::zeros(t, heads * dk);
        for hh in 0..heads {
            for i in 0..t {
                let logits: Vec<f64> = (0..t)
                    .map(|j| (0..dk).map(|c| q[(i, hh * dk + c)] * k[(j, hh * dk + c)]).sum::<f64>() / (dk as f64).sqrt())
                    .collect();
                let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
                let den: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
                for c in 0..dk {
                    concat[(i, hh * dk + c)] =
                        (0..t).map(|j| (logits[j] - mx).exp() / den * v[(j, hh * dk + c)]).sum();
                }
            }
        }
        let z1 = z.add(&mm(&concat, &p.w_o)).unwrap();
        let mut normed = Matrix::zeros(t, d);
        for i in 0..t {
            let mean = z1.row(i).iter().sum::<f64>() / d as f64;
            let var = z1.row(i).iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
            for c in 0..d {
                normed[(i, c)] = (z1[(i, c)] - mean) / (var + 1e-5).sqrt() * p.ln_scale[(0, c)] + p.ln_shift[(0, c)];
            }
        }
        let gelu = |x: f64| 0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()));
        let hidden = mm(&normed, &p.w1);
        let hidden = Matrix::from_fn(t, hidden.cols(), |i, j| gelu(hidden[(i, j)] + p.b1[(0, j)]));
        let ffn = mm(&hidden, &p.w2);
        Matrix::from_fn(t, d, |i, j| z1[(i, j)] + ffn[(i, j)] + p.b2[(0, j)])
    }

    #[test]
    fn block_matches_reference() {
        let cfg = tiny_cfg(false);
        let mut rng = SplitMix64::new(8);
        let p = random_params(&cfg, &mut rng).blocks.remove(0);
        let z = rng.normal_matrix(5, 8, 1.0);
        let out = transformer_block(&TokenSequence::new(z.clone(), 4).unwrap(), &p, 2).unwrap();
        assert!(out.as_matrix().max_abs_diff(&reference_block(&z, &p, 2)) <= 1e-10);
    }

    #[test]
    fn encode_matches_layerwise_composition() {
        let cfg = tiny_cfg(true);
        let mut rng = SplitMix64::new(9);
        let params = random_params(&cfg, &mut rng);
        let images: Vec<Image> = (0..3).map(|_| random_image(&mut rng, 4, 4, 1)).collect();
        let refs: Vec<&Image> = images.iter().collect();
        let enc = encode(&refs, &cfg, &params, &[0, 1]).unwrap();
        assert_eq!(enc.features.shape(), (8, 3));
        for (j, img) in images.iter().enumerate() {
            let seq = embed_patches(img, &cfg.patch_config(), &params.patch_embed, &params.class_token, params.pos_embed.as_ref())
                .unwrap();
            assert_eq!(enc.taps[&0].column(j).as_slice(), seq.class_token());
            let mut z = seq.into_matrix();
            for (l, b) in params.blocks.iter().enumerate() {
                z = reference_block(&z, b, 2);
                if l == 0 {
                    for r in 0..8 {
                        assert!((enc.taps[&1][(r, j)] - z[(0, r)]).abs() <= 1e-10);
                    }
                }
            }
            for r in 0..8 {
                assert!((enc.features[(r, j)] - z[(0, r)]).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn encode_degenerate_cases() {
        let mut cfg = tiny_cfg(false);
        cfg.num_layers = 1;
        let mut rng = SplitMix64::new(10);
        let mut params = VitParams::init(&cfg, &mut rng);
        params.blocks[0] = BlockWeights::zeros(&cfg);
        let img = random_image(&mut rng, 4, 4, 1);
        let enc = encode(&[&img], &cfg, &params, &[]).unwrap();
        assert_eq!(enc.features.shape(), (8, 1));
        assert_eq!(enc.features.transpose(), params.class_token);
        assert!(matches!(encode(&[&img], &cfg, &params, &[2]), Err(Error::Config(_))));
    }

    #[test]
    fn patch_permutation_equivariance() {
        let cfg = tiny_cfg(false);
        let mut rng = SplitMix64::new(11);
        let params = random_params(&cfg, &mut rng);
        let z = rng.normal_matrix(5, 8, 1.0);
        let perm = [0usize, 3, 1, 4, 2];
        let zp = Matrix::from_fn(5, 8, |i, j| z[(perm[i], j)]);
        let mut out = z.clone();
        let mut outp = zp.clone();
        for b in &params.blocks {
            out = transformer_block(&TokenSequence::new(out, 4).unwrap(), b, 2).unwrap().into_matrix();
            outp = transformer_block(&TokenSequence::new(outp, 4).unwrap(), b, 2).unwrap().into_matrix();
        }
        for i in 0..5 {
            for j in 0..8 {
                assert!((outp[(i, j)] - out[(perm[i], j)]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn encode_gradients_match_finite_differences() {
        let cfg = VitConfig {
            image_height: 4,
            image_width: 4,
            channels: 1,
            patch_size: 2,
            num_layers: 2,
            num_heads: 2,
            embed_dim: 6,
            head_dim: None,
            ffn_dim: 6,
            positional_embedding: true,
        };
        let mut rng = SplitMix64::new(12);
        let mut params = random_params(&cfg, &mut rng);
        params.pos_embed = Some(rng.normal_matrix(5, 6, 0.3));
        let images: Vec<Image> = (0..2).map(|_| random_image(&mut rng, 4, 4, 1)).collect();
        let refs: Vec<&Image> = images.iter().collect();
        let seed = rng.normal_matrix(6, 2, 1.0);

        let loss = |p: &VitParams| -> f64 {
            let f = encode(&refs, &cfg, p, &[]).unwrap().features;
            f.hadamard(&seed).unwrap().sum()
        };
        let mut tape = Tape::new();
        let w = params.map(&mut |_, m| tape.param(m.clone()));
        let enc = encode_recorded(&mut tape, &refs, &cfg, &w, &[], &mut |_, _, _| Ok(None)).unwrap();
        let grads = tape.backward(enc.class_tokens, &seed).unwrap();

        let mut names = Vec::new();
        w.for_each(&mut |n, v| names.push((n.to_string(), *v)));
        let h = 1e-5;
        for (name, var) in names {
            let g = grads.get(var);
            for e in 0..g.len() {
                let bump = |delta: f64| {
                    let mut p = params.clone();
                    p.for_each_mut(&mut |n, m| {
                        if n == name {
                            m.as_mut_slice()[e] += delta;
                        }
                    });
                    loss(&p)
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                let an = g.as_slice()[e];
                let err = (fd - an).abs();
                assert!(err <= 1e-7 || err <= 1e-4 * fd.abs().max(an.abs()), "{name}[{e}]: {fd} vs {an}");
            }
        }
    }
}
