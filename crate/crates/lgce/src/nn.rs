//! Layers built from tape ops: linear, layer norm, multi-head
//! self-attention, the pre-LN transformer block, patch embedding and the
//! convolutional decoder head.

use rand::Rng;

use crate::params::{Bound, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{mismatch, Result, Tensor, TensorError};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: store.add_uniform(format!("{name}.weight"), &[d_in, d_out], d_in, rng),
            bias: store.add_uniform(format!("{name}.bias"), &[d_out], d_in, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p.get(self.weight), p.get(self.bias))
    }

    pub fn zero(&self, store: &mut ParamStore) {
        for id in [self.weight, self.bias] {
            store.get_mut(id).data_mut().fill(0.0);
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, eps: f64) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(&[d], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d])),
            eps,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.get(self.gamma), p.get(self.beta), self.eps)
    }
}

/// Multi-head self-attention. Query/key/value projections carry no bias
/// (a key bias is invisible to the softmax); the output projection does.
#[derive(Clone, Debug)]
pub struct Attention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

/// Attention output plus each head's `[n, n]` weight matrix.
pub struct AttentionOut {
    pub out: Var,
    pub weights: Vec<Var>,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(TensorError::HeadDivisibility { dim, heads });
        }
        Ok(Self {
            wq: store.add_uniform(format!("{name}.wq"), &[dim, dim], dim, rng),
            wk: store.add_uniform(format!("{name}.wk"), &[dim, dim], dim, rng),
            wv: store.add_uniform(format!("{name}.wv"), &[dim, dim], dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            heads,
            dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<AttentionOut> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(mismatch("attention", format!("tokens {shape:?} for width {}", self.dim)));
        }
        let dh = self.dim / self.heads;
        let sizes = vec![dh; self.heads];
        let q = tape.matmul(x, p.get(self.wq))?;
        let k = tape.matmul(x, p.get(self.wk))?;
        let v = tape.matmul(x, p.get(self.wv))?;
        let qs = tape.split(q, &sizes, 1)?;
        let ks = tape.split(k, &sizes, 1)?;
        let vs = tape.split(v, &sizes, 1)?;
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let kt = tape.transpose(ks[h])?;
            let scores = tape.matmul(qs[h], kt)?;
            let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let a = tape.softmax(scores, 1)?;
            heads.push(tape.matmul(a, vs[h])?);
            weights.push(a);
        }
        let merged = tape.concat(&heads, 1)?;
        Ok(AttentionOut { out: self.out.forward(tape, p, merged)?, weights })
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, p, x)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, p, h)
    }
}

/// Pre-LN transformer block:
/// `z' = z + MSA(LN(z))`, `out = z' + MLP(LN(z'))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        eps: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let hidden = dim * mlp_ratio.max(1);
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim, eps),
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim, eps),
            mlp: Mlp {
                fc1: Linear::new(store, &format!("{name}.mlp.fc1"), dim, hidden, rng),
                fc2: Linear::new(store, &format!("{name}.mlp.fc2"), hidden, dim, rng),
            },
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, z: Var) -> Result<AttentionOut> {
        let n = self.ln1.forward(tape, p, z)?;
        let a = self.attn.forward(tape, p, n)?;
        let z1 = tape.add(z, a.out)?;
        let n2 = self.ln2.forward(tape, p, z1)?;
        let m = self.mlp.forward(tape, p, n2)?;
        Ok(AttentionOut { out: tape.add(z1, m)?, weights: a.weights })
    }

    /// Zeroes both residual-branch output projections, making the block the
    /// identity map.
    pub fn zero_outputs(&self, store: &mut ParamStore) {
        self.attn.out.zero(store);
        self.mlp.fc2.zero(store);
    }
}

/// Patch projection plus learned position embedding.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub pos: ParamId,
    pub patch: usize,
}

impl PatchEmbed {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        (c, h, w): (usize, usize, usize),
        patch: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(TensorError::PatchDivisibility { h, w, patch });
        }
        let n = (h / patch) * (w / patch);
        let d_in = c * patch * patch;
        Ok(Self {
            proj: Linear::new(store, &format!("{name}.proj"), d_in, dim, rng),
            pos: store.add_uniform(format!("{name}.pos"), &[n, dim], dim, rng),
            patch,
        })
    }
}

/// `PE(image) + E_pos`: `[c,h,w]` to `[(h/p)(w/p), d]` tokens.
pub fn embed_patches(tape: &mut Tape, p: &Bound, image: Var, pe: &PatchEmbed) -> Result<Var> {
    let patches = tape.patchify(image, pe.patch)?;
    let tokens = pe.proj.forward(tape, p, patches)?;
    tape.add(tokens, p.get(pe.pos))
}

/// Patch embedding followed by a stack of transformer blocks and a final
/// layer norm.
#[derive(Clone, Debug)]
pub struct MiniVit {
    pub store: ParamStore,
    pub embed: PatchEmbed,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

impl MiniVit {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        image: (usize, usize, usize),
        patch: usize,
        dim: usize,
        depth: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let embed = PatchEmbed::new(&mut store, "embed", image, patch, dim, rng)?;
        let blocks = (0..depth)
            .map(|i| Block::new(&mut store, &format!("blocks.{i}"), dim, heads, mlp_ratio, 1e-5, rng))
            .collect::<Result<_>>()?;
        let norm = LayerNorm::new(&mut store, "norm", dim, 1e-5);
        Ok(Self { store, embed, blocks, norm })
    }

    pub fn forward_on(&self, tape: &mut Tape, p: &Bound, image: Var) -> Result<Var> {
        let mut z = embed_patches(tape, p, image, &self.embed)?;
        for b in &self.blocks {
            z = b.forward(tape, p, z)?.out;
        }
        self.norm.forward(tape, p, z)
    }

    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let x = tape.leaf(image.clone());
        let out = self.forward_on(&mut tape, &p, x)?;
        Ok(tape.value(out).clone())
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl Conv {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize, rng: &mut impl Rng) -> Self {
        let fan_in = c_in * k * k;
        Self {
            kernel: store.add_uniform(format!("{name}.kernel"), &[c_out, c_in, k, k], fan_in, rng),
            bias: store.add_uniform(format!("{name}.bias"), &[c_out], fan_in, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p.get(self.kernel), p.get(self.bias))
    }

    pub fn zero(&self, store: &mut ParamStore) {
        for id in [self.kernel, self.bias] {
            store.get_mut(id).data_mut().fill(0.0);
        }
    }
}

/// Inference-mode batch norm with stored running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub mean: ParamId,
    pub var: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl BatchNorm {
    /// Running statistics start near (0, 1) with a little seeded spread.
    pub fn new(store: &mut ParamStore, name: &str, c: usize, eps: f64, rng: &mut impl Rng) -> Self {
        let mean = Tensor::uniform(&[c], 0.1, rng);
        let var = Tensor::uniform(&[c], 0.2, rng).map(|v| 1.0 + v);
        Self {
            mean: store.add(format!("{name}.running_mean"), mean),
            var: store.add(format!("{name}.running_var"), var),
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(&[c], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[c])),
            eps,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.batch_norm_infer(x, p.get(self.mean), p.get(self.var), p.get(self.gamma), p.get(self.beta), self.eps)
    }
}

/// Two conv3×3 → BN → ReLU stages, then a 1×1 conv to one logit channel.
#[derive(Clone, Debug)]
pub struct DecoderHead {
    pub store: ParamStore,
    pub conv1: Conv,
    pub bn1: BatchNorm,
    pub conv2: Conv,
    pub bn2: BatchNorm,
    pub classifier: Conv,
}

impl DecoderHead {
    pub fn new(c_in: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        let conv1 = Conv::new(&mut store, "conv1", c_in, hidden, 3, rng);
        let bn1 = BatchNorm::new(&mut store, "bn1", hidden, 1e-5, rng);
        let conv2 = Conv::new(&mut store, "conv2", hidden, hidden, 3, rng);
        let bn2 = BatchNorm::new(&mut store, "bn2", hidden, 1e-5, rng);
        let classifier = Conv::new(&mut store, "classifier", hidden, 1, 1, rng);
        Self { store, conv1, bn1, conv2, bn2, classifier }
    }

    /// `[c,h,w]` features to `[1,h,w]` logits.
    pub fn forward_on(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (conv, bn) in [(&self.conv1, &self.bn1), (&self.conv2, &self.bn2)] {
            h = conv.forward(tape, p, h)?;
            h = bn.forward(tape, p, h)?;
            h = tape.relu(h)?;
        }
        self.classifier.forward(tape, p, h)
    }

    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let x = tape.leaf(features.clone());
        let out = self.forward_on(&mut tape, &p, x)?;
        Ok(tape.value(out).clone())
    }
}

/// Foreground where the logit is strictly positive; a logit of exactly zero
/// is background.
pub fn logits_to_mask(logits: &Tensor) -> Vec<bool> {
    logits.data().iter().map(|&v| v > 0.0).collect()
}
