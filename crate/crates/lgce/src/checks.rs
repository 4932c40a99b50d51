//! The LGCE invariant suite: shape contract, identity at zero, word
//! permutation invariance, split/concat inverse, attention normalization,
//! determinism, gradient completeness, finite-difference gradients and
//! checkpoint round trips.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::gradcheck::{check_gradients, GradCheckConfig, TensorCheck};
use crate::lgce::{group_of, join_scale, lgce_forward, split_scale, FeaturePyramid, LgceConfig, LgceParams, Result};
use crate::params::{Bound, ParamStore};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.to_string(), passed, detail: detail.into() }
    }
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Random configurations for the shape and structural checks.
    pub trials: usize,
    /// Consecutive seeds for the finite-difference check.
    pub grad_seeds: usize,
    pub grad: GradCheckConfig,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self { seed: 0, trials: 50, grad_seeds: 5, grad: GradCheckConfig::default() }
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub checks: Vec<CheckOutcome>,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_table(&self) -> String {
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(5).max(5);
        let mut out = format!("{:<width$}  result  detail\n", "check");
        for c in &self.checks {
            let verdict = if c.passed { "pass" } else { "FAIL" };
            let _ = writeln!(out, "{:<width$}  {verdict:<6}  {}", c.name, c.detail);
        }
        out
    }
}

pub fn run_suite(opts: &SuiteOptions) -> SuiteReport {
    let checks = vec![
        guard("shape contract", || check_shape_contract(opts.seed, opts.trials)),
        guard("identity at zero", || check_identity_at_zero(opts.seed, opts.trials)),
        guard("word permutation invariance", || check_permutation_invariance(opts.seed, opts.trials)),
        guard("split/concat inverse", || check_split_concat_inverse(opts.seed, opts.trials)),
        guard("attention rows sum to 1", || check_attention_rows(opts.seed, opts.trials)),
        guard("determinism", || check_determinism(opts.seed)),
        guard("gradient completeness", || check_dead_parameters(opts.seed)),
        guard("finite-difference gradients", || check_fixture_gradients(opts.seed, opts.grad_seeds, &opts.grad)),
        guard("checkpoint round trip", || check_checkpoint_round_trip(opts.seed)),
    ];
    SuiteReport { checks }
}

fn guard(name: &str, f: impl FnOnce() -> Result<CheckOutcome>) -> CheckOutcome {
    f().unwrap_or_else(|e| CheckOutcome::new(name, false, format!("error: {e}")))
}

/// A valid random configuration: heads ∈ {1,2,4}, c3, c4 ∈ 4..=32 divisible
/// by heads, h4, w4 ∈ 1..=4, c_t ∈ 1..=12; plus a word count in 1..=8.
pub fn random_config(rng: &mut impl Rng) -> (LgceConfig, usize) {
    let heads = [1, 2, 4][rng.random_range(0..3)];
    let width = |rng: &mut dyn rand::RngCore| {
        let choices: Vec<usize> = (4..=32).filter(|c| c % heads == 0).collect();
        choices[rng.random_range(0..choices.len())]
    };
    let c3 = width(rng);
    let c4 = width(rng);
    let mut cfg = LgceConfig::new(c3, c4, rng.random_range(1..=12), rng.random_range(1..=4), rng.random_range(1..=4), heads);
    cfg.mlp_ratio = rng.random_range(1..=4);
    (cfg, rng.random_range(1..=8))
}

pub fn check_shape_contract(seed: u64, trials: usize) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..trials {
        let (cfg, words) = random_config(&mut rng);
        let params = LgceParams::new(cfg.clone(), seed + i as u64)?;
        let out = params.forward(&FeaturePyramid::random(&cfg, words, &mut rng))?;
        if out.shape() != cfg.output_shape() {
            return Ok(CheckOutcome::new(
                "shape contract",
                false,
                format!("{cfg:?}: got {:?}, want {:?}", out.shape(), cfg.output_shape()),
            ));
        }
    }
    Ok(CheckOutcome::new("shape contract", true, format!("{trials} configurations")))
}

/// Channel concat of `v3` with nearest-×2 upsampled `v4`, computed directly.
pub fn upsample_concat_reference(v3: &Tensor, v4: &Tensor) -> Tensor {
    let (c3, h3, w3) = (v3.shape()[0], v3.shape()[1], v3.shape()[2]);
    let c4 = v4.shape()[0];
    let mut data = v3.data().to_vec();
    for c in 0..c4 {
        for y in 0..h3 {
            for x in 0..w3 {
                data.push(v4.at(&[c, y / 2, x / 2]));
            }
        }
    }
    Tensor::new(&[c3 + c4, h3, w3], data).expect("finite inputs")
}

pub fn check_identity_at_zero(seed: u64, trials: usize) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1d);
    for i in 0..trials {
        let (cfg, words) = random_config(&mut rng);
        let mut params = LgceParams::new(cfg.clone(), seed + i as u64)?;
        params.zero_output_projections();
        let p = FeaturePyramid::random(&cfg, words, &mut rng);
        if params.forward(&p)? != upsample_concat_reference(&p.v3, &p.v4) {
            return Ok(CheckOutcome::new("identity at zero", false, format!("{cfg:?}")));
        }
    }
    Ok(CheckOutcome::new("identity at zero", true, format!("{trials} configurations, bit-exact")))
}

/// Reorders the columns (words) of `[c_t, T]`.
pub fn permute_words(lang: &Tensor, order: &[usize]) -> Tensor {
    let (c, t) = (lang.shape()[0], lang.shape()[1]);
    let data = (0..c).flat_map(|r| order.iter().map(move |&k| lang.at(&[r, k]))).collect();
    Tensor::new(&[c, t], data).expect("same values")
}

pub fn check_permutation_invariance(seed: u64, trials: usize) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e);
    for i in 0..trials {
        let (cfg, words) = random_config(&mut rng);
        let params = LgceParams::new(cfg.clone(), seed + i as u64)?;
        let p = FeaturePyramid::random(&cfg, words.max(2), &mut rng);
        let base = params.forward(&p)?;
        let mut order: Vec<usize> = (0..p.lang.shape()[1]).collect();
        order.shuffle(&mut rng);
        let permuted = FeaturePyramid { lang: permute_words(&p.lang, &order), ..p.clone() };
        let out = params.forward(&permuted)?;
        let same_bits = base.data().iter().zip(out.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same_bits {
            return Ok(CheckOutcome::new("word permutation invariance", false, format!("order {order:?}, {cfg:?}")));
        }
    }
    Ok(CheckOutcome::new("word permutation invariance", true, format!("{trials} shuffles, bit-exact")))
}

pub fn check_split_concat_inverse(seed: u64, trials: usize) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5c);
    for _ in 0..trials {
        let c = rng.random_range(1..=32);
        let n = rng.random_range(1..=64);
        let mut tape = Tape::new();
        let lang = tape.leaf(Tensor::uniform(&[1, c], 10.0, &mut rng));
        let vis = tape.leaf(Tensor::uniform(&[n, c], 10.0, &mut rng));
        let z = join_scale(&mut tape, lang, vis)?;
        let (l2, v2) = split_scale(&mut tape, z)?;
        if tape.value(l2) != tape.value(lang) || tape.value(v2) != tape.value(vis) {
            return Ok(CheckOutcome::new("split/concat inverse", false, format!("c={c} n={n}")));
        }
        // And the other direction: concat of the split pieces restores z.
        let z2 = join_scale(&mut tape, l2, v2)?;
        if tape.value(z2) != tape.value(z) {
            return Ok(CheckOutcome::new("split/concat inverse", false, format!("re-concat c={c} n={n}")));
        }
    }
    Ok(CheckOutcome::new("split/concat inverse", true, format!("{trials} sequences, bit-exact")))
}

pub fn check_attention_rows(seed: u64, trials: usize) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa7);
    let mut worst: f64 = 0.0;
    let mut rows = 0usize;
    for i in 0..trials {
        let (cfg, words) = random_config(&mut rng);
        let params = LgceParams::new(cfg.clone(), seed + i as u64)?;
        let p = FeaturePyramid::random(&cfg, words, &mut rng);
        let mut tape = Tape::new();
        let b = params.store.bind(&mut tape);
        let (v3, v4, l) = (tape.leaf(p.v3), tape.leaf(p.v4), tape.leaf(p.lang));
        let trace = lgce_forward(&mut tape, &b, &params, v3, v4, l)?;
        for a in &trace.attention {
            let t = tape.value(*a);
            for row in t.data().chunks(t.shape()[1]) {
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                rows += 1;
            }
        }
    }
    Ok(CheckOutcome::new(
        "attention rows sum to 1",
        worst <= 1e-12,
        format!("{rows} rows, max |Σ-1| = {worst:.2e}"),
    ))
}

pub fn check_determinism(seed: u64) -> Result<CheckOutcome> {
    let run = || -> Result<(Tensor, Vec<Tensor>)> {
        let params = LgceParams::new(LgceConfig::fixture(), seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = FeaturePyramid::random(&params.config, 5, &mut rng);
        let mut tape = Tape::new();
        let b = params.store.bind(&mut tape);
        let (v3, v4, l) = (tape.leaf(p.v3), tape.leaf(p.v4), tape.leaf(p.lang));
        let trace = lgce_forward(&mut tape, &b, &params, v3, v4, l)?;
        let loss = tape.sum(trace.output)?;
        let g = tape.backward(loss)?;
        let grads = b.vars().iter().map(|&v| g.get(v)).collect();
        Ok((tape.value(trace.output).clone(), grads))
    };
    let (a, b) = (run()?, run()?);
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let same = bits(&a.0) == bits(&b.0) && a.1.iter().zip(&b.1).all(|(x, y)| bits(x) == bits(y));
    Ok(CheckOutcome::new("determinism", same, "forward and backward, two runs"))
}

/// Names of parameters whose gradient is identically zero under a
/// sum-of-outputs loss.
pub fn dead_parameters(params: &LgceParams, p: &FeaturePyramid) -> Result<Vec<String>> {
    let mut tape = Tape::new();
    let b = params.store.bind(&mut tape);
    let (v3, v4, l) = (tape.leaf(p.v3.clone()), tape.leaf(p.v4.clone()), tape.leaf(p.lang.clone()));
    let trace = lgce_forward(&mut tape, &b, params, v3, v4, l)?;
    let loss = tape.sum(trace.output)?;
    let g = tape.backward(loss)?;
    Ok(params
        .store
        .ids()
        .filter(|&id| g.get(b.get(id)).max_abs() == 0.0)
        .map(|id| params.store.name(id).to_string())
        .collect())
}

pub fn check_dead_parameters(seed: u64) -> Result<CheckOutcome> {
    let params = LgceParams::new(LgceConfig::fixture(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xde);
    let p = FeaturePyramid::random(&params.config, 5, &mut rng);
    let dead = dead_parameters(&params, &p)?;
    let detail = if dead.is_empty() {
        format!("{} tensors all receive gradient", params.store.len())
    } else {
        format!("zero gradient: {}", dead.join(", "))
    };
    Ok(CheckOutcome::new("gradient completeness", dead.is_empty(), detail))
}

/// Per-tensor finite-difference results for one seed of the fixture
/// configuration, under a random-weighted sum of the output. Inputs are
/// named `input.v3`, `input.v4`, `input.lang`.
pub fn fixture_gradient_checks(seed: u64, cfg: &GradCheckConfig) -> Result<Vec<TensorCheck>> {
    let params = LgceParams::new(LgceConfig::fixture(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c);
    let p = FeaturePyramid::random(&params.config, 5, &mut rng);
    let weights = Tensor::uniform(&params.config.output_shape(), 1.0, &mut rng);
    let n = params.store.len();
    let mut inputs: Vec<(String, Tensor)> = params.store.iter().map(|(name, t)| (name.to_string(), t.clone())).collect();
    inputs.push(("input.v3".into(), p.v3));
    inputs.push(("input.v4".into(), p.v4));
    inputs.push(("input.lang".into(), p.lang));
    let checks = check_gradients(
        &inputs,
        |tape, vars| {
            let bound = Bound::from_vars(vars[..n].to_vec());
            let trace = lgce_forward(tape, &bound, &params, vars[n], vars[n + 1], vars[n + 2])
                .map_err(|e| match e {
                    crate::lgce::LgceError::Tensor(t) => t,
                    other => crate::tensor::TensorError::Checkpoint(other.to_string()),
                })?;
            tape.weighted_sum(trace.output, &weights)
        },
        cfg,
        seed,
    )?;
    Ok(checks)
}

/// Per-group aggregate of tensor checks.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupCheck {
    pub group: String,
    pub passed: bool,
    pub entries: usize,
    pub max_abs_err: f64,
    /// Over entries whose absolute error exceeds the floor.
    pub max_rel_err: f64,
}

/// Collapses tensor checks by parameter group; each input stays its own group.
pub fn summarize_by_group(checks: &[TensorCheck]) -> Vec<GroupCheck> {
    let mut out: Vec<GroupCheck> = Vec::new();
    for c in checks {
        let g = if c.name.starts_with("input.") { c.name.clone() } else { group_of(&c.name).to_string() };
        let idx = match out.iter().position(|e| e.group == g) {
            Some(i) => i,
            None => {
                out.push(GroupCheck { group: g, passed: true, entries: 0, max_abs_err: 0.0, max_rel_err: 0.0 });
                out.len() - 1
            }
        };
        let e = &mut out[idx];
        e.passed &= c.passed();
        e.entries += c.checked;
        e.max_abs_err = e.max_abs_err.max(c.max_abs_err);
        e.max_rel_err = e.max_rel_err.max(c.max_rel_err);
    }
    out
}

pub fn check_fixture_gradients(seed: u64, seeds: usize, cfg: &GradCheckConfig) -> Result<CheckOutcome> {
    let mut failed = Vec::new();
    let mut entries = 0;
    let (mut worst_abs, mut worst_rel): (f64, f64) = (0.0, 0.0);
    for s in seed..seed + seeds as u64 {
        for g in summarize_by_group(&fixture_gradient_checks(s, cfg)?) {
            entries += g.entries;
            worst_abs = worst_abs.max(g.max_abs_err);
            worst_rel = worst_rel.max(g.max_rel_err);
            if !g.passed {
                failed.push(format!("{}@{s}", g.group));
            }
        }
    }
    let detail = if failed.is_empty() {
        format!("{seeds} seeds, {entries} entries, max abs err {worst_abs:.1e}, max rel err above floor {worst_rel:.1e}")
    } else {
        format!("failing groups: {}", failed.join(", "))
    };
    Ok(CheckOutcome::new("finite-difference gradients", failed.is_empty(), detail))
}

pub fn check_checkpoint_round_trip(seed: u64) -> Result<CheckOutcome> {
    let params = LgceParams::new(LgceConfig::fixture(), seed)?;
    let mut other = LgceParams::new(LgceConfig::fixture(), seed.wrapping_add(1))?;
    other.store.load_values_from(&ParamStore::from_bytes(&params.store.to_bytes())?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = FeaturePyramid::random(&params.config, 4, &mut rng);
    let same = params.forward(&p)? == other.forward(&p)?;
    Ok(CheckOutcome::new("checkpoint round trip", same, format!("{} values", params.store.total_values())))
}
