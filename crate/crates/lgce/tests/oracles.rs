#![allow(clippy::needless_range_loop)]

//! Straight-line reference implementations over nested `Vec`s, compared
//! against the tape implementation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use refseg_lgce::gradcheck::{check_gradients, GradCheckConfig};
use refseg_lgce::lgce::{cross_scale_fusion, lgce_forward, scale_specific_fusion, split_scale};
use refseg_lgce::lgce::{FeaturePyramid, LgceConfig, LgceParams, ResidualMode};
use refseg_lgce::nn::{embed_patches, Attention, Block, DecoderHead, PatchEmbed};
use refseg_lgce::{ParamStore, Tape, Tensor};

type Mat = Vec<Vec<f64>>;

const TOL: f64 = 1e-12;

fn mat(t: &Tensor) -> Mat {
    let cols = *t.shape().last().unwrap();
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

fn vec_of(store: &ParamStore, name: &str) -> Vec<f64> {
    store.get(store.id(name).unwrap_or_else(|| panic!("no {name}"))).data().to_vec()
}

fn mat_of(store: &ParamStore, name: &str) -> Mat {
    mat(store.get(store.id(name).unwrap_or_else(|| panic!("no {name}"))))
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|row| (0..b[0].len()).map(|j| row.iter().zip(b).map(|(x, brow)| x * brow[j]).sum()).collect())
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

fn linear(x: &Mat, store: &ParamStore, name: &str) -> Mat {
    let b = vec_of(store, &format!("{name}.bias"));
    matmul(x, &mat_of(store, &format!("{name}.weight")))
        .into_iter()
        .map(|r| r.iter().zip(&b).map(|(v, c)| v + c).collect())
        .collect()
}

fn layer_norm(x: &Mat, store: &ParamStore, name: &str, eps: f64) -> Mat {
    let g = vec_of(store, &format!("{name}.gamma"));
    let b = vec_of(store, &format!("{name}.beta"));
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mu = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            r.iter().enumerate().map(|(j, v)| (v - mu) / (var + eps).sqrt() * g[j] + b[j]).collect()
        })
        .collect()
}

fn attention(x: &Mat, store: &ParamStore, name: &str, heads: usize) -> Mat {
    let q = matmul(x, &mat_of(store, &format!("{name}.wq")));
    let k = matmul(x, &mat_of(store, &format!("{name}.wk")));
    let v = matmul(x, &mat_of(store, &format!("{name}.wv")));
    let (n, d) = (x.len(), x[0].len());
    let dh = d / heads;
    let mut merged = vec![vec![0.0; d]; n];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                merged[i][c] = (0..n).map(|j| e[j] / z * v[j][c]).sum();
            }
        }
    }
    linear(&merged, store, &format!("{name}.out"))
}

fn gelu(x: f64) -> f64 {
    // Φ via the complementary error function from libm, independent of the
    // crate's own erf-based path.
    x * 0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn block(z: &Mat, store: &ParamStore, name: &str, heads: usize, eps: f64) -> Mat {
    let a = attention(&layer_norm(z, store, &format!("{name}.ln1"), eps), store, &format!("{name}.attn"), heads);
    let z1 = add(z, &a);
    let h = linear(&layer_norm(&z1, store, &format!("{name}.ln2"), eps), store, &format!("{name}.mlp.fc1"));
    let h: Mat = h.into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
    add(&z1, &linear(&h, store, &format!("{name}.mlp.fc2")))
}

/// `[c,h,w]` tensor to `h·w` rows of `c` channels.
fn tokens(t: &Tensor) -> Mat {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    (0..h * w).map(|p| (0..c).map(|ch| t.at(&[ch, p / w, p % w])).collect()).collect()
}

fn close(a: &Mat, b: &Tensor, tol: f64) {
    let b = mat(b);
    assert_eq!(a.len(), b.len(), "row count");
    for (ra, rb) in a.iter().zip(&b) {
        for (x, y) in ra.iter().zip(rb) {
            assert!((x - y).abs() <= tol * (1.0 + x.abs()), "{x} vs {y}");
        }
    }
}

fn random_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(&[rows, cols], 1.0, rng)
}

#[test]
fn three_token_two_head_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut s = ParamStore::new();
    let a = Attention::new(&mut s, "a", 4, 2, &mut rng).unwrap();
    let x = random_mat(3, 4, &mut rng);
    let mut tape = Tape::new();
    let p = s.bind(&mut tape);
    let xv = tape.leaf(x.clone());
    let out = a.forward(&mut tape, &p, xv).unwrap();
    close(&attention(&mat(&x), &s, "a", 2), tape.value(out.out), TOL);
    for w in out.weights {
        for row in mat(tape.value(w)) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn two_token_transformer_block() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut s = ParamStore::new();
    let b = Block::new(&mut s, "b", 6, 3, 2, 1e-5, &mut rng).unwrap();
    let x = random_mat(2, 6, &mut rng);
    let mut tape = Tape::new();
    let p = s.bind(&mut tape);
    let xv = tape.leaf(x.clone());
    let out = b.forward(&mut tape, &p, xv).unwrap().out;
    close(&block(&mat(&x), &s, "b", 3, 1e-5), tape.value(out), TOL);
}

struct Fixture {
    params: LgceParams,
    pyramid: FeaturePyramid,
}

fn fixture(seed: u64, residual: ResidualMode) -> Fixture {
    let mut cfg = LgceConfig::fixture();
    cfg.residual = residual;
    let params = LgceParams::new(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let pyramid = FeaturePyramid::random(&params.config, 5, &mut rng);
    Fixture { params, pyramid }
}

fn oracle_scale_specific(f: &Fixture) -> (Mat, Mat) {
    let (s, c) = (&f.params.store, &f.params.config);
    let lang = mat(&f.pyramid.lang);
    let mean: Vec<f64> = lang.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect();
    let mut z_h = linear(&vec![mean.clone()], s, "f_h");
    z_h.extend(tokens(&f.pyramid.v3));
    let mut z_l = linear(&vec![mean], s, "f_l");
    z_l.extend(tokens(&f.pyramid.v4));
    (block(&z_h, s, "tl_h.0", c.heads, c.eps), block(&z_l, s, "tl_l.0", c.heads, c.eps))
}

fn oracle_cross(f: &Fixture, z_h: &Mat, z_l: &Mat) -> (Mat, Mat) {
    let (s, c) = (&f.params.store, &f.params.config);
    let branch = |lang_token: Mat, visual: &[Vec<f64>], name: &str| {
        let mut seq = lang_token.clone();
        seq.extend(visual.iter().cloned());
        let a = attention(&layer_norm(&seq, s, &format!("{name}.ln"), c.eps), s, &format!("{name}.attn"), c.heads);
        match c.residual {
            ResidualMode::FullSequence => add(&seq, &a),
            ResidualMode::LanguageOnly => {
                a.iter().map(|r| r.iter().zip(&lang_token[0]).map(|(x, y)| x + y).collect()).collect()
            }
        }
    };
    let lh_aligned = linear(&vec![z_h[0].clone()], s, "f_h_prime");
    let ll_aligned = linear(&vec![z_l[0].clone()], s, "f_l_prime");
    (branch(ll_aligned, &z_h[1..], "msa_h"), branch(lh_aligned, &z_l[1..], "msa_l"))
}

fn oracle_output(f: &Fixture) -> Vec<f64> {
    let c = &f.params.config;
    let (z_h, z_l) = oracle_scale_specific(f);
    let (zh2, zl2) = oracle_cross(f, &z_h, &z_l);
    let mut out = Vec::new();
    for ch in 0..c.c3 {
        for p in 0..c.h3 * c.w3 {
            out.push(zh2[1 + p][ch]);
        }
    }
    for ch in 0..c.c4 {
        for y in 0..c.h3 {
            for x in 0..c.w3 {
                out.push(zl2[1 + (y / 2) * c.w4 + x / 2][ch]);
            }
        }
    }
    out
}

#[test]
fn scale_specific_fusion_matches_oracle() {
    let f = fixture(1, ResidualMode::FullSequence);
    let mut tape = Tape::new();
    let b = f.params.store.bind(&mut tape);
    let (v3, v4, l) = (tape.leaf(f.pyramid.v3.clone()), tape.leaf(f.pyramid.v4.clone()), tape.leaf(f.pyramid.lang.clone()));
    let (z_h, z_l) = scale_specific_fusion(&mut tape, &b, &f.params, v3, v4, l, &mut Vec::new()).unwrap();
    assert_eq!(tape.shape(z_h), &[17, 8]);
    assert_eq!(tape.shape(z_l), &[5, 16]);
    let (oh, ol) = oracle_scale_specific(&f);
    close(&oh, tape.value(z_h), TOL);
    close(&ol, tape.value(z_l), TOL);
}

#[test]
fn cross_scale_fusion_matches_oracle_under_both_conventions() {
    for mode in [ResidualMode::FullSequence, ResidualMode::LanguageOnly] {
        let f = fixture(2, mode);
        let mut tape = Tape::new();
        let b = f.params.store.bind(&mut tape);
        let (v3, v4, l) =
            (tape.leaf(f.pyramid.v3.clone()), tape.leaf(f.pyramid.v4.clone()), tape.leaf(f.pyramid.lang.clone()));
        let mut att = Vec::new();
        let (z_h, z_l) = scale_specific_fusion(&mut tape, &b, &f.params, v3, v4, l, &mut att).unwrap();
        let (lh, vh) = split_scale(&mut tape, z_h).unwrap();
        let (ll, vl) = split_scale(&mut tape, z_l).unwrap();
        let (zh2, zl2) = cross_scale_fusion(&mut tape, &b, &f.params, lh, vh, ll, vl, &mut att).unwrap();
        assert_eq!(tape.shape(zh2), &[17, 8]);
        assert_eq!(tape.shape(zl2), &[5, 16]);
        let (oh, ol) = oracle_cross(&f, &mat(tape.value(z_h)), &mat(tape.value(z_l)));
        close(&oh, tape.value(zh2), TOL);
        close(&ol, tape.value(zl2), TOL);
    }
}

#[test]
fn end_to_end_forward_matches_oracle() {
    for seed in 0..3 {
        let f = fixture(seed, ResidualMode::FullSequence);
        let got = f.params.forward(&f.pyramid).unwrap();
        assert_eq!(got.shape(), &[24, 4, 4]);
        for (a, b) in oracle_output(&f).iter().zip(got.data()) {
            assert!((a - b).abs() <= TOL * (1.0 + a.abs()), "{a} vs {b}");
        }
    }
}

#[test]
fn zero_blocks_reduce_to_raw_concatenation() {
    let mut f = fixture(4, ResidualMode::FullSequence);
    f.params.zero_output_projections();
    let mut tape = Tape::new();
    let b = f.params.store.bind(&mut tape);
    let (v3, v4, l) = (tape.leaf(f.pyramid.v3.clone()), tape.leaf(f.pyramid.v4.clone()), tape.leaf(f.pyramid.lang.clone()));
    let trace = lgce_forward(&mut tape, &b, &f.params, v3, v4, l).unwrap();
    let z_h = mat(tape.value(trace.z_h));
    assert_eq!(&z_h[1..], tokens(&f.pyramid.v3).as_slice());
    let zh2 = mat(tape.value(trace.z_h_prime));
    assert_eq!(&zh2[1..], tokens(&f.pyramid.v3).as_slice());
}

fn conv_oracle(x: &Tensor, k: &Tensor, b: &[f64]) -> Vec<f64> {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let mut out = Vec::new();
    for o in 0..co {
        for y in 0..h as i64 {
            for xx in 0..w as i64 {
                let mut acc = b[o];
                for i in 0..ci {
                    for dy in 0..kh as i64 {
                        for dx in 0..kw as i64 {
                            let (sy, sx) = (y + dy - kh as i64 / 2, xx + dx - kw as i64 / 2);
                            if sy >= 0 && sx >= 0 && sy < h as i64 && sx < w as i64 {
                                acc += k.at(&[o, i, dy as usize, dx as usize]) * x.at(&[i, sy as usize, sx as usize]);
                            }
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

#[test]
fn conv3x3_on_4x4_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::uniform(&[2, 4, 4], 1.0, &mut rng);
    let k = Tensor::uniform(&[3, 2, 3, 3], 1.0, &mut rng);
    let b = Tensor::uniform(&[3], 1.0, &mut rng);
    let mut tape = Tape::new();
    let (xv, kv, bv) = (tape.leaf(x.clone()), tape.leaf(k.clone()), tape.leaf(b.clone()));
    let y = tape.conv2d(xv, kv, bv).unwrap();
    assert_eq!(tape.shape(y), &[3, 4, 4]);
    for (a, e) in tape.value(y).data().iter().zip(conv_oracle(&x, &k, b.data())) {
        assert!((a - e).abs() < 1e-13);
    }
}

#[test]
fn decoder_head_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let dec = DecoderHead::new(5, 4, &mut rng);
    let x = Tensor::uniform(&[5, 4, 3], 1.0, &mut rng);
    let s = &dec.store;
    let t = |n: &str| s.get(s.id(n).unwrap()).clone();
    let stage = |x: Tensor, conv: &str, bn: &str| {
        let y = conv_oracle(&x, &t(&format!("{conv}.kernel")), t(&format!("{conv}.bias")).data());
        let (m, v, g, be) = (
            t(&format!("{bn}.running_mean")),
            t(&format!("{bn}.running_var")),
            t(&format!("{bn}.gamma")),
            t(&format!("{bn}.beta")),
        );
        let hw = x.shape()[1] * x.shape()[2];
        let data = y
            .iter()
            .enumerate()
            .map(|(j, &val)| {
                let c = j / hw;
                (g.data()[c] * (val - m.data()[c]) / (v.data()[c] + 1e-5).sqrt() + be.data()[c]).max(0.0)
            })
            .collect();
        Tensor::new(&[g.numel(), x.shape()[1], x.shape()[2]], data).unwrap()
    };
    let h = stage(stage(x.clone(), "conv1", "bn1"), "conv2", "bn2");
    let expect = conv_oracle(&h, &t("classifier.kernel"), t("classifier.bias").data());
    let got = dec.forward(&x).unwrap();
    assert_eq!(got.shape(), &[1, 4, 3]);
    for (a, e) in got.data().iter().zip(expect) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn patch_embedding_gradient_passes_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut s = ParamStore::new();
    let pe = PatchEmbed::new(&mut s, "pe", (2, 4, 4), 2, 3, &mut rng).unwrap();
    let img = Tensor::uniform(&[2, 4, 4], 1.0, &mut rng);
    let w = Tensor::uniform(&[4, 3], 1.0, &mut rng);
    let n = s.len();
    let mut inputs: Vec<(String, Tensor)> = s.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
    inputs.push(("image".into(), img));
    let checks = check_gradients(
        &inputs,
        |tape, vars| {
            let bound = refseg_lgce::Bound::from_vars(vars[..n].to_vec());
            let z = embed_patches(tape, &bound, vars[n], &pe)?;
            let z = tape.gelu(z)?;
            tape.weighted_sum(z, &w)
        },
        &GradCheckConfig::default(),
        0,
    )
    .unwrap();
    assert!(checks.iter().all(|c| c.passed()), "{checks:?}");
}

#[test]
fn layer_norm_normalizes_each_vector() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for d in [1usize, 2, 5, 17, 64] {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::uniform(&[7, d], 50.0, &mut rng));
        let g = tape.leaf(Tensor::filled(&[d], 1.0));
        let b = tape.leaf(Tensor::zeros(&[d]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        for row in mat(tape.value(y)) {
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d as f64;
            assert!(mu.abs() < 1e-9);
            if d > 1 {
                assert!((var - 1.0).abs() < 1e-6, "d={d} var={var}");
            }
        }
    }
}

#[test]
fn tape_replay_is_bit_identical() {
    let run = || {
        let f = fixture(9, ResidualMode::FullSequence);
        let mut tape = Tape::new();
        let b = f.params.store.bind(&mut tape);
        let v3 = tape.leaf(f.pyramid.v3.clone());
        let v4 = tape.leaf(f.pyramid.v4.clone());
        let l = tape.leaf(f.pyramid.lang.clone());
        let out = lgce_forward(&mut tape, &b, &f.params, v3, v4, l).unwrap().output;
        let loss = tape.sum(out).unwrap();
        let g = tape.backward(loss).unwrap();
        (tape.value(out).clone(), g.get(v3), g.get(v4))
    };
    assert_eq!(run(), run());
}
