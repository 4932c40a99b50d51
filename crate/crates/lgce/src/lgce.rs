//! Language-guided cross-scale enhancement.
//!
//! Given a shallow map `V3 [c3,h3,w3]`, a deep map `V4 [c4,h4,w4]` at half
//! the resolution and word features `L [c_t,T]`:
//!
//! 1. the mean word vector is projected to each width and prepended as a
//!    token to that scale's flattened visual tokens, and each sequence runs
//!    through its own transformer stack (scale-specific fusion);
//! 2. each output is split back into its language token and visual tokens;
//! 3. each scale's visual tokens are joined with the *other* scale's
//!    language token (projected to this width) and passed through one
//!    LN + self-attention layer with a residual (cross-scale fusion);
//! 4. the visual parts are split off again, the deep map is upsampled ×2
//!    (nearest) and the two are concatenated on channels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Attention, Block, LayerNorm, Linear};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{mismatch, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum LgceError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = LgceError> = std::result::Result<T, E>;

/// What the cross-scale attention output is added to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResidualMode {
    /// The whole `[lang ∥ visual]` input sequence (pre-LN convention).
    #[default]
    FullSequence,
    /// Only the aligned language token, broadcast over every position.
    LanguageOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LgceConfig {
    pub c3: usize,
    pub c4: usize,
    pub c_t: usize,
    pub h3: usize,
    pub w3: usize,
    pub h4: usize,
    pub w4: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub eps: f64,
    /// Transformer blocks per scale in the scale-specific stage.
    pub depth: usize,
    pub residual: ResidualMode,
}

impl LgceConfig {
    /// Small pyramid used throughout the checks: 8/16 channels, 4×4 over
    /// 2×2, six language channels, two heads.
    pub fn fixture() -> Self {
        Self::new(8, 16, 6, 2, 2, 2)
    }

    /// Derives `h3 = 2·h4`, `w3 = 2·w4`; MLP ratio 4, ε 1e-5, depth 1.
    pub fn new(c3: usize, c4: usize, c_t: usize, h4: usize, w4: usize, heads: usize) -> Self {
        Self {
            c3,
            c4,
            c_t,
            h3: 2 * h4,
            w3: 2 * w4,
            h4,
            w4,
            heads,
            mlp_ratio: 4,
            eps: 1e-5,
            depth: 1,
            residual: ResidualMode::FullSequence,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LgceError::InvalidConfig(m));
        if self.heads == 0 || !self.c3.is_multiple_of(self.heads) || !self.c4.is_multiple_of(self.heads) {
            return bad(format!("c3={} and c4={} must both be divisible by heads={}", self.c3, self.c4, self.heads));
        }
        if [self.c3, self.c4, self.c_t, self.h4, self.w4, self.mlp_ratio, self.depth].contains(&0) {
            return bad("channel counts, spatial dims, mlp_ratio and depth must be positive".into());
        }
        if self.h3 != 2 * self.h4 || self.w3 != 2 * self.w4 {
            return bad(format!("{}x{} is not twice {}x{}", self.h3, self.w3, self.h4, self.w4));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return bad(format!("eps {} must be positive", self.eps));
        }
        Ok(())
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [self.c3 + self.c4, self.h3, self.w3]
    }
}

/// Inputs: two adjacent-stride visual maps and `T ≥ 1` word vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub v3: Tensor,
    pub v4: Tensor,
    pub lang: Tensor,
}

impl FeaturePyramid {
    pub fn random(cfg: &LgceConfig, words: usize, rng: &mut impl Rng) -> Self {
        Self {
            v3: Tensor::uniform(&[cfg.c3, cfg.h3, cfg.w3], 1.0, rng),
            v4: Tensor::uniform(&[cfg.c4, cfg.h4, cfg.w4], 1.0, rng),
            lang: Tensor::uniform(&[cfg.c_t, words], 1.0, rng),
        }
    }

    pub fn validate(&self, cfg: &LgceConfig) -> Result<()> {
        check_inputs(cfg, self.v3.shape(), self.v4.shape(), self.lang.shape())
    }
}

fn check_inputs(cfg: &LgceConfig, v3: &[usize], v4: &[usize], lang: &[usize]) -> Result<()> {
    let ok = v3 == [cfg.c3, cfg.h3, cfg.w3] && v4 == [cfg.c4, cfg.h4, cfg.w4] && lang.len() == 2 && lang[0] == cfg.c_t && lang[1] >= 1;
    if !ok {
        return Err(mismatch("lgce", format!("inputs V3 {v3:?}, V4 {v4:?}, L {lang:?} do not fit the configuration")).into());
    }
    Ok(())
}

/// LN + self-attention layer of the cross-scale stage.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub ln: LayerNorm,
    pub attn: Attention,
}

#[derive(Clone, Debug)]
pub struct LgceParams {
    pub config: LgceConfig,
    pub store: ParamStore,
    pub f_h: Linear,
    pub f_l: Linear,
    pub tl_h: Vec<Block>,
    pub tl_l: Vec<Block>,
    pub f_h_prime: Linear,
    pub f_l_prime: Linear,
    pub msa_h: CrossAttention,
    pub msa_l: CrossAttention,
}

/// Parameter group names, in forward order.
pub const PARAM_GROUPS: [&str; 8] = ["f_h", "f_l", "tl_h", "tl_l", "f_h_prime", "f_l_prime", "msa_h", "msa_l"];

impl LgceParams {
    /// Weights uniform in `±1/√fan_in` from a ChaCha8 stream; layer-norm
    /// scales 1 and shifts 0.
    pub fn new(config: LgceConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let f_h = Linear::new(&mut s, "f_h", c.c_t, c.c3, &mut rng);
        let f_l = Linear::new(&mut s, "f_l", c.c_t, c.c4, &mut rng);
        let stack = |s: &mut ParamStore, name: &str, dim: usize, rng: &mut ChaCha8Rng| {
            (0..c.depth)
                .map(|i| Block::new(s, &format!("{name}.{i}"), dim, c.heads, c.mlp_ratio, c.eps, rng))
                .collect::<Result<Vec<_>, _>>()
        };
        let tl_h = stack(&mut s, "tl_h", c.c3, &mut rng)?;
        let tl_l = stack(&mut s, "tl_l", c.c4, &mut rng)?;
        let f_h_prime = Linear::new(&mut s, "f_h_prime", c.c3, c.c4, &mut rng);
        let f_l_prime = Linear::new(&mut s, "f_l_prime", c.c4, c.c3, &mut rng);
        let cross = |s: &mut ParamStore, name: &str, dim: usize, rng: &mut ChaCha8Rng| -> Result<CrossAttention> {
            Ok(CrossAttention {
                ln: LayerNorm::new(s, &format!("{name}.ln"), dim, c.eps),
                attn: Attention::new(s, &format!("{name}.attn"), dim, c.heads, rng)?,
            })
        };
        let msa_h = cross(&mut s, "msa_h", c.c3, &mut rng)?;
        let msa_l = cross(&mut s, "msa_l", c.c4, &mut rng)?;
        Ok(Self { config, store: s, f_h, f_l, tl_h, tl_l, f_h_prime, f_l_prime, msa_h, msa_l })
    }

    /// Zeroes every attention and MLP output projection, so each residual
    /// stage passes its input sequence through unchanged.
    pub fn zero_output_projections(&mut self) {
        for b in self.tl_h.iter().chain(&self.tl_l) {
            b.zero_outputs(&mut self.store);
        }
        self.msa_h.attn.out.zero(&mut self.store);
        self.msa_l.attn.out.zero(&mut self.store);
    }

    /// `(group, member ids)` for each of [`PARAM_GROUPS`].
    pub fn groups(&self) -> Vec<(&'static str, Vec<ParamId>)> {
        PARAM_GROUPS
            .iter()
            .map(|&g| (g, self.store.ids().filter(|&id| group_of(self.store.name(id)) == g).collect()))
            .collect()
    }

    pub fn forward(&self, p: &FeaturePyramid) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let (v3, v4, lang) = (tape.leaf(p.v3.clone()), tape.leaf(p.v4.clone()), tape.leaf(p.lang.clone()));
        let trace = lgce_forward(&mut tape, &bound, self, v3, v4, lang)?;
        Ok(tape.value(trace.output).clone())
    }
}

/// Group of a parameter name: its first dotted segment.
pub fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Intermediate handles of one forward pass.
pub struct LgceTrace {
    pub output: Var,
    pub z_h: Var,
    pub z_l: Var,
    pub z_h_prime: Var,
    pub z_l_prime: Var,
    /// Every attention weight matrix, scale-specific stage first.
    pub attention: Vec<Var>,
}

/// Mean over the word axis: `[c_t, T]` to `[c_t]`.
pub fn mean_language(tape: &mut Tape, lang: Var) -> Result<Var> {
    Ok(tape.mean(lang, 1)?)
}

/// `[c,h,w]` to `[h·w, c]` (row-major positions, channels last).
pub fn map_to_tokens(tape: &mut Tape, v: Var) -> Result<Var> {
    let &[c, h, w] = tape.shape(v) else {
        return Err(mismatch("map_to_tokens", format!("expected [c,h,w], got {:?}", tape.shape(v))).into());
    };
    let flat = tape.reshape(v, &[c, h * w])?;
    Ok(tape.transpose(flat)?)
}

/// Inverse of [`map_to_tokens`].
pub fn tokens_to_map(tape: &mut Tape, t: Var, h: usize, w: usize) -> Result<Var> {
    let &[n, c] = tape.shape(t) else {
        return Err(mismatch("tokens_to_map", format!("expected [n,c], got {:?}", tape.shape(t))).into());
    };
    if n != h * w {
        return Err(mismatch("tokens_to_map", format!("{n} tokens for a {h}x{w} map")).into());
    }
    let ct = tape.transpose(t)?;
    Ok(tape.reshape(ct, &[c, h, w])?)
}

/// Prepends a `[1, c]` language token to `[n, c]` visual tokens.
pub fn join_scale(tape: &mut Tape, lang_token: Var, visual: Var) -> Result<Var> {
    Ok(tape.concat(&[lang_token, visual], 0)?)
}

/// Position 0 versus the rest of a `[1+n, c]` sequence.
pub fn split_scale(tape: &mut Tape, z: Var) -> Result<(Var, Var)> {
    let len = tape.shape(z).first().copied().unwrap_or(0);
    if len < 2 {
        return Err(TensorError::TooShort { len }.into());
    }
    let parts = tape.split(z, &[1, len - 1], 0)?;
    Ok((parts[0], parts[1]))
}

fn run_stack(tape: &mut Tape, p: &Bound, blocks: &[Block], mut z: Var, attention: &mut Vec<Var>) -> Result<Var> {
    for b in blocks {
        let o = b.forward(tape, p, z)?;
        attention.extend(o.weights);
        z = o.out;
    }
    Ok(z)
}

/// Scale-specific fusion. Returns `z_h [1+h3·w3, c3]`, `z_l [1+h4·w4, c4]`.
pub fn scale_specific_fusion(
    tape: &mut Tape,
    p: &Bound,
    params: &LgceParams,
    v3: Var,
    v4: Var,
    lang: Var,
    attention: &mut Vec<Var>,
) -> Result<(Var, Var)> {
    let c = &params.config;
    let mean = mean_language(tape, lang)?;
    let mean = tape.reshape(mean, &[1, c.c_t])?;
    let lh = params.f_h.forward(tape, p, mean)?;
    let ll = params.f_l.forward(tape, p, mean)?;
    let t3 = map_to_tokens(tape, v3)?;
    let t4 = map_to_tokens(tape, v4)?;
    let seq_h = join_scale(tape, lh, t3)?;
    let seq_l = join_scale(tape, ll, t4)?;
    let z_h = run_stack(tape, p, &params.tl_h, seq_h, attention)?;
    let z_l = run_stack(tape, p, &params.tl_l, seq_l, attention)?;
    Ok((z_h, z_l))
}

fn cross_branch(
    tape: &mut Tape,
    p: &Bound,
    layer: &CrossAttention,
    mode: ResidualMode,
    aligned_lang: Var,
    visual: Var,
    attention: &mut Vec<Var>,
) -> Result<Var> {
    let seq = join_scale(tape, aligned_lang, visual)?;
    let normed = layer.ln.forward(tape, p, seq)?;
    let a = layer.attn.forward(tape, p, normed)?;
    attention.extend(a.weights);
    match mode {
        ResidualMode::FullSequence => Ok(tape.add(seq, a.out)?),
        ResidualMode::LanguageOnly => {
            let width = tape.shape(aligned_lang)[1];
            let row = tape.reshape(aligned_lang, &[width])?;
            Ok(tape.add_bias(a.out, row)?)
        }
    }
}

/// Cross-scale fusion. `l_h`, `l_l` are `[1, c3]`, `[1, c4]` language tokens;
/// returns `z_h' [1+n3, c3]` and `z_l' [1+n4, c4]`.
#[allow(clippy::too_many_arguments)]
pub fn cross_scale_fusion(
    tape: &mut Tape,
    p: &Bound,
    params: &LgceParams,
    l_h: Var,
    v_h: Var,
    l_l: Var,
    v_l: Var,
    attention: &mut Vec<Var>,
) -> Result<(Var, Var)> {
    let mode = params.config.residual;
    let l_l_aligned = params.f_l_prime.forward(tape, p, l_l)?;
    let l_h_aligned = params.f_h_prime.forward(tape, p, l_h)?;
    let z_h = cross_branch(tape, p, &params.msa_h, mode, l_l_aligned, v_h, attention)?;
    let z_l = cross_branch(tape, p, &params.msa_l, mode, l_h_aligned, v_l, attention)?;
    Ok((z_h, z_l))
}

/// Full forward pass to `[c3+c4, h3, w3]`.
pub fn lgce_forward(tape: &mut Tape, p: &Bound, params: &LgceParams, v3: Var, v4: Var, lang: Var) -> Result<LgceTrace> {
    let c = &params.config;
    check_inputs(c, tape.shape(v3), tape.shape(v4), tape.shape(lang))?;
    let mut attention = Vec::new();
    let (z_h, z_l) = scale_specific_fusion(tape, p, params, v3, v4, lang, &mut attention)?;
    let (l_h, v_h) = split_scale(tape, z_h)?;
    let (l_l, v_l) = split_scale(tape, z_l)?;
    let (z_h_prime, z_l_prime) = cross_scale_fusion(tape, p, params, l_h, v_h, l_l, v_l, &mut attention)?;
    let (_, v_h_out) = split_scale(tape, z_h_prime)?;
    let (_, v_l_out) = split_scale(tape, z_l_prime)?;
    let map_h = tokens_to_map(tape, v_h_out, c.h3, c.w3)?;
    let map_l = tokens_to_map(tape, v_l_out, c.h4, c.w4)?;
    let up = tape.upsample_nearest2x(map_l)?;
    let output = tape.concat(&[map_h, up], 0)?;
    Ok(LgceTrace { output, z_h, z_l, z_h_prime, z_l_prime, attention })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        LgceConfig::fixture().validate().unwrap();
        assert!(LgceConfig::new(6, 16, 6, 2, 2, 4).validate().is_err());
        let mut c = LgceConfig::fixture();
        c.h3 = 5;
        assert!(c.validate().is_err());
        c = LgceConfig::fixture();
        c.depth = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn fixture_output_shape_and_groups() {
        let params = LgceParams::new(LgceConfig::fixture(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = FeaturePyramid::random(&params.config, 5, &mut rng);
        assert_eq!(params.forward(&p).unwrap().shape(), &[24, 4, 4]);
        let groups = params.groups();
        assert_eq!(groups.iter().map(|(_, ids)| ids.len()).sum::<usize>(), params.store.len());
        assert!(groups.iter().all(|(_, ids)| !ids.is_empty()));
    }

    #[test]
    fn zero_inputs_with_zero_blocks_give_zero_output() {
        let mut params = LgceParams::new(LgceConfig::fixture(), 3).unwrap();
        params.zero_output_projections();
        let c = &params.config;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = FeaturePyramid {
            v3: Tensor::zeros(&[c.c3, c.h3, c.w3]),
            v4: Tensor::zeros(&[c.c4, c.h4, c.w4]),
            lang: Tensor::uniform(&[c.c_t, 5], 1.0, &mut rng),
        };
        assert!(params.forward(&p).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn split_scale_rejects_short_sequences() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::zeros(&[1, 4]));
        assert!(matches!(split_scale(&mut tape, z), Err(LgceError::Tensor(TensorError::TooShort { len: 1 }))));
    }

    #[test]
    fn language_only_residual_differs_but_keeps_shape() {
        let mut cfg = LgceConfig::fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = FeaturePyramid::random(&cfg, 3, &mut rng);
        let full = LgceParams::new(cfg.clone(), 7).unwrap().forward(&p).unwrap();
        cfg.residual = ResidualMode::LanguageOnly;
        let lit = LgceParams::new(cfg, 7).unwrap().forward(&p).unwrap();
        assert_eq!(full.shape(), lit.shape());
        assert_ne!(full, lit);
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let params = LgceParams::new(LgceConfig::fixture(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = FeaturePyramid::random(&params.config, 5, &mut rng);
        p.v4 = Tensor::zeros(&[16, 3, 2]);
        assert!(params.forward(&p).is_err());
    }
}
