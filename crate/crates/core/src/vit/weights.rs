use crate::linalg::{Matrix, SplitMix64};

use super::VitConfig;

const INIT_STD: f64 = 0.02;

/// Parameters of one Transformer block. Head projections are fused column-wise:
/// head `j` owns columns `j·d_k .. (j+1)·d_k` of `w_q`, `w_k` and `w_v`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights<T> {
    /// d x (h·d_k)
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    /// (h·d_k) x d
    pub w_o: T,
    /// d x d_ff
    pub w1: T,
    /// 1 x d_ff
    pub b1: T,
    /// d_ff x d
    pub w2: T,
    /// 1 x d
    pub b2: T,
    /// LayerNorm scale and shift, 1 x d each.
    pub ln_scale: T,
    pub ln_shift: T,
}

pub type TransformerBlockParams = BlockWeights<Matrix>;

impl<T> BlockWeights<T> {
    pub const NAMES: [&'static str; 10] = [
        "w_q", "w_k", "w_v", "w_o", "w1", "b1", "w2", "b2", "ln_scale", "ln_shift",
    ];

    fn fields(&self) -> [&T; 10] {
        [
            &self.w_q, &self.w_k, &self.w_v, &self.w_o, &self.w1, &self.b1, &self.w2, &self.b2,
            &self.ln_scale, &self.ln_shift,
        ]
    }

    fn fields_mut(&mut self) -> [&mut T; 10] {
        [
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.ln_scale,
            &mut self.ln_shift,
        ]
    }

    fn from_fields(mut it: impl Iterator<Item = T>) -> Self {
        let mut next = || it.next().expect("ten block fields");
        BlockWeights {
            w_q: next(),
            w_k: next(),
            w_v: next(),
            w_o: next(),
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
            ln_scale: next(),
            ln_shift: next(),
        }
    }

    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> BlockWeights<U> {
        let fields = self.fields();
        BlockWeights::from_fields(
            Self::NAMES
                .iter()
                .zip(fields)
                .map(|(n, t)| f(&format!("{prefix}{n}"), t))
                .collect::<Vec<_>>()
                .into_iter(),
        )
    }

    pub fn for_each(&self, prefix: &str, f: &mut impl FnMut(&str, &T)) {
        for (n, t) in Self::NAMES.iter().zip(self.fields()) {
            f(&format!("{prefix}{n}"), t);
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        for (n, t) in Self::NAMES.iter().zip(self.fields_mut()) {
            f(&format!("{prefix}{n}"), t);
        }
    }
}

impl BlockWeights<Matrix> {
    pub fn init(cfg: &VitConfig, rng: &mut SplitMix64) -> Self {
        let d = cfg.embed_dim;
        let hd = cfg.num_heads * cfg.head_dim();
        let ff = cfg.ffn_dim;
        BlockWeights {
            w_q: rng.truncated_normal_matrix(d, hd, INIT_STD),
            w_k: rng.truncated_normal_matrix(d, hd, INIT_STD),
            w_v: rng.truncated_normal_matrix(d, hd, INIT_STD),
            w_o: rng.truncated_normal_matrix(hd, d, INIT_STD),
            w1: rng.truncated_normal_matrix(d, ff, INIT_STD),
            b1: Matrix::zeros(1, ff),
            w2: rng.truncated_normal_matrix(ff, d, INIT_STD),
            b2: Matrix::zeros(1, d),
            ln_scale: Matrix::filled(1, d, 1.0),
            ln_shift: Matrix::zeros(1, d),
        }
    }

    /// All projections and biases zero, LayerNorm at its identity initialization.
    pub fn zeros(cfg: &VitConfig) -> Self {
        let d = cfg.embed_dim;
        let hd = cfg.num_heads * cfg.head_dim();
        let ff = cfg.ffn_dim;
        BlockWeights {
            w_q: Matrix::zeros(d, hd),
            w_k: Matrix::zeros(d, hd),
            w_v: Matrix::zeros(d, hd),
            w_o: Matrix::zeros(hd, d),
            w1: Matrix::zeros(d, ff),
            b1: Matrix::zeros(1, ff),
            w2: Matrix::zeros(ff, d),
            b2: Matrix::zeros(1, d),
            ln_scale: Matrix::filled(1, d, 1.0),
            ln_shift: Matrix::zeros(1, d),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.fields().iter().all(|m| m.is_finite())
    }
}

/// Encoder parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct VitWeights<T> {
    /// E, d x p.
    pub patch_embed: T,
    /// 1 x d.
    pub class_token: T,
    /// (n+1) x d, present when positional embeddings are enabled.
    pub pos_embed: Option<T>,
    pub blocks: Vec<BlockWeights<T>>,
}

pub type VitParams = VitWeights<Matrix>;

impl<T> VitWeights<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&str, &T) -> U) -> VitWeights<U> {
        VitWeights {
            patch_embed: f("patch_embed", &self.patch_embed),
            class_token: f("class_token", &self.class_token),
            pos_embed: self.pos_embed.as_ref().map(|p| f("pos_embed", p)),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(l, b)| b.map(&format!("block{}.", l + 1), f))
                .collect(),
        }
    }

    pub fn for_each(&self, f: &mut impl FnMut(&str, &T)) {
        f("patch_embed", &self.patch_embed);
        f("class_token", &self.class_token);
        if let Some(p) = &self.pos_embed {
            f("pos_embed", p);
        }
        for (l, b) in self.blocks.iter().enumerate() {
            b.for_each(&format!("block{}.", l + 1), f);
        }
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(&str, &mut T)) {
        f("patch_embed", &mut self.patch_embed);
        f("class_token", &mut self.class_token);
        if let Some(p) = &mut self.pos_embed {
            f("pos_embed", p);
        }
        for (l, b) in self.blocks.iter_mut().enumerate() {
            b.for_each_mut(&format!("block{}.", l + 1), f);
        }
    }
}

impl VitWeights<Matrix> {
    /// Truncated-normal (σ = 0.02) projections, zero biases and positional embeddings.
    pub fn init(cfg: &VitConfig, rng: &mut SplitMix64) -> Self {
        let d = cfg.embed_dim;
        let patch_embed = rng.truncated_normal_matrix(d, cfg.patch_len(), INIT_STD);
        let class_token = rng.truncated_normal_matrix(1, d, INIT_STD);
        let pos_embed = cfg
            .positional_embedding
            .then(|| Matrix::zeros(cfg.num_patches() + 1, d));
        let blocks = (0..cfg.num_layers).map(|_| BlockWeights::init(cfg, rng)).collect();
        VitWeights {
            patch_embed,
            class_token,
            pos_embed,
            blocks,
        }
    }

    pub fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, m| n += m.len());
        n
    }
}
