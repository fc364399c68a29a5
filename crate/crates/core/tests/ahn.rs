use ahnlab::ahn::*;
use ahnlab::attention::EvictedPair;
use ahnlab::numerics::{grad_check, Tape, Tensor, Var};
use ahnlab::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const D: usize = 6;
const N: usize = 2;
const NKV: usize = 1;
const H: usize = 3;

fn dims() -> AhnDims {
    AhnDims {
        d_model: D,
        n_heads: N,
        n_kv_heads: NKV,
        head_dim: H,
    }
}

fn randomise(p: &mut AhnParams<f64>, rng: &mut ChaCha8Rng) {
    for (name, t) in p.arrays_mut() {
        let noise = Tensor::<f64>::randn(t.shape(), 0.5, rng);
        if name == "w_out" {
            t.add_assign(&noise.scale(0.5)).unwrap();
        } else {
            *t = noise;
        }
    }
}

fn params(variant: AhnVariant, seed: u64) -> AhnParams<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = AhnParams::init(variant, dims(), &mut rng).unwrap();
    randomise(&mut p, &mut rng);
    p
}

fn pair(rng: &mut ChaCha8Rng, pos: usize) -> EvictedPair<f64> {
    let v = |n: usize, rng: &mut ChaCha8Rng| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    EvictedPair {
        k: v(NKV * H, rng),
        v: v(NKV * H, rng),
        x: v(D, rng),
        pos,
    }
}

fn random_state(rng: &mut ChaCha8Rng) -> CompressedState<f64> {
    let mut h = CompressedState::zeros(N, H);
    h.data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
    h
}

/// Forces a gate to a constant activation logit.
fn pin(g: &mut Gate<f64>, logit: f64) {
    g.w = Tensor::zeros(g.w.shape());
    g.b = Tensor::full(g.b.shape(), logit);
}

fn sig(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn gate_oracle(g: &Gate<f64>, x: &[f64], head: usize) -> f64 {
    g.b.data()[head] + (0..x.len()).map(|i| x[i] * g.w.at(i, head)).sum::<f64>()
}

fn unit(k: &[f64]) -> Vec<f64> {
    let n = k.iter().map(|v| v * v).sum::<f64>().sqrt();
    k.iter().map(|v| v / n).collect()
}

fn mat(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
    Tensor::new(&[rows, cols], data.to_vec()).unwrap()
}

/// `decay · (I − erase · k kᵀ) · h + write · k vᵀ` with dense matrices.
fn oracle_step(h: &[f64], k: &[f64], v: &[f64], decay: f64, erase: f64, write: f64) -> Tensor<f64> {
    let kc = mat(H, 1, k);
    let kk = kc.matmul(&kc.transpose()).unwrap();
    let a = Tensor::<f64>::eye(H).sub(&kk.scale(erase)).unwrap().scale(decay);
    let kv = kc.matmul(&mat(1, H, v)).unwrap().scale(write);
    a.matmul(&mat(H, H, h)).unwrap().add(&kv).unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn gdn_identity_when_alpha_one_beta_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut p = params(AhnVariant::Gdn, 1);
    pin(p.alpha.as_mut().unwrap(), f64::INFINITY);
    pin(p.beta.as_mut().unwrap(), f64::NEG_INFINITY);
    let h = random_state(&mut rng);
    let out = gdn_update(&h, &pair(&mut rng, 0), &p).unwrap();
    assert_eq!(out.data(), h.data());
    assert_eq!(out.step(), 1);
}

#[test]
fn gdn_pure_write_from_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut p = params(AhnVariant::Gdn, 2);
    pin(p.beta.as_mut().unwrap(), f64::INFINITY);
    let e = pair(&mut rng, 0);
    let out = gdn_update(&CompressedState::zeros(N, H), &e, &p).unwrap();
    let k = unit(&e.k);
    for head in 0..N {
        for i in 0..H {
            for j in 0..H {
                assert!((out.head(head)[i * H + j] - k[i] * e.v[j]).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn updates_match_dense_matrix_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..50 {
        let h = random_state(&mut rng);
        let e = pair(&mut rng, trial);
        let k = unit(&e.k);
        for variant in AhnVariant::ALL {
            let p = params(variant, 100 + trial as u64);
            let out = match variant {
                AhnVariant::Gdn => gdn_update(&h, &e, &p),
                AhnVariant::Dn => dn_update(&h, &e, &p),
                AhnVariant::Mamba2 => mamba2_update(&h, &e, &p),
            }
            .unwrap();
            for head in 0..N {
                let expect = match variant {
                    AhnVariant::Gdn => {
                        let a = sig(gate_oracle(p.alpha.as_ref().unwrap(), &e.x, head));
                        let b = sig(gate_oracle(p.beta.as_ref().unwrap(), &e.x, head));
                        oracle_step(h.head(head), &k, &e.v, a, b, b)
                    }
                    AhnVariant::Dn => {
                        let b = sig(gate_oracle(p.beta.as_ref().unwrap(), &e.x, head));
                        oracle_step(h.head(head), &k, &e.v, 1.0, b, b)
                    }
                    AhnVariant::Mamba2 => {
                        let z = gate_oracle(p.delta.as_ref().unwrap(), &e.x, head);
                        let delta = (1.0 + z.exp()).ln();
                        let a = p.a_log.as_ref().unwrap().data()[head].exp();
                        oracle_step(h.head(head), &e.k, &e.v, (-delta * a).exp(), 0.0, delta)
                    }
                };
                let err = max_diff(out.head(head), expect.data());
                assert!(err < 1e-12, "{variant} trial {trial}: {err}");
            }
        }
    }
}

#[test]
fn dn_is_gdn_with_unit_decay() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for seed in 0..20 {
        let mut g = params(AhnVariant::Gdn, seed);
        pin(g.alpha.as_mut().unwrap(), f64::INFINITY);
        let mut d = params(AhnVariant::Dn, seed + 1000);
        d.beta = g.beta.clone();
        let h = random_state(&mut rng);
        let e = pair(&mut rng, 0);
        assert_eq!(gdn_update(&h, &e, &g).unwrap(), dn_update(&h, &e, &d).unwrap());
        // Step-level form of the same identity.
        let mut a = h.head(0).to_vec();
        let mut b = a.clone();
        let k = unit(&e.k);
        step_head(&mut a, &k, &e.v, StepGates::gdn(1.0, 0.3));
        step_head(&mut b, &k, &e.v, StepGates::dn(0.3));
        assert_eq!(a, b);
    }
}

#[test]
fn dn_zero_beta_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut p = params(AhnVariant::Dn, 5);
    pin(p.beta.as_mut().unwrap(), f64::NEG_INFINITY);
    let h = random_state(&mut rng);
    assert_eq!(dn_update(&h, &pair(&mut rng, 0), &p).unwrap().data(), h.data());
}

#[test]
fn dn_rank_one_readout() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut p = params(AhnVariant::Dn, 6);
    pin(p.beta.as_mut().unwrap(), f64::INFINITY);
    pin(&mut p.gamma, f64::INFINITY);
    p.w_out = Tensor::from_rows(
        &(0..N * H)
            .map(|r| (0..H).map(|c| f64::from(u8::from(r % H == c))).collect())
            .collect::<Vec<_>>(),
    )
    .unwrap();
    let e = pair(&mut rng, 0);
    let h = dn_update(&CompressedState::zeros(N, H), &e, &p).unwrap();
    let k = unit(&e.k);
    let q: Vec<f64> = (0..N * H).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let y = ahn_readout(&q, &h, &e.x, &p).unwrap();
    for head in 0..N {
        let qk: f64 = (0..H).map(|i| q[head * H + i] * k[i]).sum();
        for j in 0..H {
            assert!((y[head * H + j] - qk * e.v[j]).abs() < 1e-14);
        }
    }
    // With q = k the read-out recovers v.
    let q: Vec<f64> = k.iter().chain(&k).copied().collect();
    let y = ahn_readout(&q, &h, &e.x, &p).unwrap();
    assert!(max_diff(&y[..H], &e.v) < 1e-14);
}

#[test]
fn mamba2_limits() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut p = params(AhnVariant::Mamba2, 7);
    let h = random_state(&mut rng);
    let e = pair(&mut rng, 0);
    pin(p.delta.as_mut().unwrap(), f64::NEG_INFINITY);
    assert_eq!(mamba2_update(&h, &e, &p).unwrap().data(), h.data());

    // Δ = 1 and a huge rate: prior memory is wiped.
    pin(p.delta.as_mut().unwrap(), (1f64.exp() - 1.0).ln());
    p.a_log = Some(Tensor::full(&[1, N], 1e6f64.ln()));
    let out = mamba2_update(&h, &e, &p).unwrap();
    for head in 0..N {
        for i in 0..H {
            for j in 0..H {
                assert!((out.head(head)[i * H + j] - e.k[i] * e.v[j]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn mamba2_decay_is_key_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p = params(AhnVariant::Mamba2, 8);
    let h = random_state(&mut rng);
    let mut e = pair(&mut rng, 0);
    e.v = vec![0.0; NKV * H];
    let out = mamba2_update(&h, &e, &p).unwrap();
    let a = p.decay_rates().unwrap();
    let delta = p.gate_values("delta", &e.x).unwrap();
    for head in 0..N {
        let f = (-delta[head] * a[head]).exp();
        for (o, x) in out.head(head).iter().zip(h.head(head)) {
            assert!((o - f * x).abs() < 1e-15);
        }
    }
}

#[test]
fn non_finite_gate_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p = params(AhnVariant::Gdn, 9);
    let mut e = pair(&mut rng, 0);
    e.x[0] = f64::NAN;
    assert!(matches!(
        gdn_update(&CompressedState::zeros(N, H), &e, &p),
        Err(Error::NonFinite(_))
    ));
    let p = params(AhnVariant::Mamba2, 9);
    assert!(matches!(
        mamba2_update(&CompressedState::zeros(N, H), &e, &p),
        Err(Error::NonFinite(_))
    ));
}

#[test]
fn readout_zero_cases_and_linearity() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut p = params(AhnVariant::Gdn, 10);
    let q: Vec<f64> = (0..N * H).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let x: Vec<f64> = (0..D).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let y = ahn_readout(&q, &CompressedState::zeros(N, H), &x, &p).unwrap();
    assert!(y.iter().all(|&v| v == 0.0));

    let (h1, h2) = (random_state(&mut rng), random_state(&mut rng));
    let (a, b) = (0.7, -1.3);
    let lhs = ahn_readout(&q, &h1.combine(a, &h2, b), &x, &p).unwrap();
    let y1 = ahn_readout(&q, &h1, &x, &p).unwrap();
    let y2 = ahn_readout(&q, &h2, &x, &p).unwrap();
    let rhs: Vec<f64> = y1.iter().zip(&y2).map(|(u, v)| a * u + b * v).collect();
    assert!(max_diff(&lhs, &rhs) < 1e-12);

    pin(&mut p.gamma, f64::NEG_INFINITY);
    assert!(ahn_readout(&q, &h1, &x, &p).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn mix_sums_and_commutes_with_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let y1 = Tensor::<f64>::randn(&[1, 6], 1.0, &mut rng);
    let y2 = Tensor::<f64>::randn(&[1, 6], 1.0, &mut rng);
    let zero = vec![0.0; 6];
    assert_eq!(mix(&zero, y2.data()).unwrap(), y2.data());
    assert_eq!(mix(y1.data(), &zero).unwrap(), y1.data());
    let w = Tensor::<f64>::randn(&[6, 4], 1.0, &mut rng);
    let sum = mat(1, 6, &mix(y1.data(), y2.data()).unwrap());
    let lhs = sum.matmul(&w).unwrap();
    let rhs = y1.matmul(&w).unwrap().add(&y2.matmul(&w).unwrap()).unwrap();
    assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    assert!(mix(&zero, &[0.0]).is_err());
}

#[test]
fn gdn_update_is_contractive() {
    // Power iteration on A = α(I − β k kᵀ) for random unit k.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let n = 8;
        let k = unit(&(0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>());
        let alpha = rng.gen_range(0.0..1.0);
        let beta = rng.gen_range(0.0..1.0);
        let mut x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut norm = 0.0;
        for _ in 0..200 {
            step_head(&mut x, &k, &[0.0], StepGates::gdn(alpha, beta));
            norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            x.iter_mut().for_each(|v| *v /= norm);
        }
        assert!(norm <= alpha * (1.0 + 1e-12), "{norm} > {alpha}");
    }
}

#[test]
fn state_size_is_constant() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let p = params(AhnVariant::Gdn, 13);
    let mut h = CompressedState::zeros(N, H);
    update_in_place(&mut h, &pair(&mut rng, 0), &p).unwrap();
    let one = h.byte_size();
    for pos in 1..10_000 {
        update_in_place(&mut h, &pair(&mut rng, pos), &p).unwrap();
    }
    assert_eq!(h.step(), 10_000);
    assert_eq!(h.byte_size(), one);
    assert!(h.data().iter().all(|v| v.is_finite()));
}

fn pairs(rng: &mut ChaCha8Rng, n: usize) -> Vec<EvictedPair<f64>> {
    (0..n).map(|i| pair(rng, 10 + 2 * i)).collect()
}

#[test]
fn chunk_scan_trivial_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for variant in AhnVariant::ALL {
        let p = params(variant, 14);
        let h0 = random_state(&mut rng);
        assert_eq!(chunk_scan(&[], &h0, &p, 8).unwrap(), h0);
        let one = pairs(&mut rng, 1);
        let mut single = h0.clone();
        update_in_place(&mut single, &one[0], &p).unwrap();
        let scanned = chunk_scan(&one, &h0, &p, 8).unwrap();
        assert!(max_diff(scanned.data(), single.data()) < 1e-14);
        assert_eq!(scanned.step(), 1);
    }
}

#[test]
fn chunk_scan_matches_sequential_fold() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for variant in AhnVariant::ALL {
        for trial in 0..20 {
            let p = params(variant, 200 + trial);
            let h0 = random_state(&mut rng);
            let ps = pairs(&mut rng, 64);
            let seq = sequential_scan(&ps, &h0, &p).unwrap();
            for chunk in [1, 8, 64, 100] {
                let ch = chunk_scan(&ps, &h0, &p, chunk).unwrap();
                assert_eq!(ch.step(), 64);
                let err = max_diff(ch.data(), seq.data());
                assert!(err < 1e-12, "{variant} chunk {chunk}: {err}");
            }
        }
    }
}

#[test]
fn chunk_scan_single_precision() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for variant in AhnVariant::ALL {
        let p64 = params(variant, 16);
        let mut p = AhnParams::<f32>::init(variant, dims(), &mut rng).unwrap();
        for ((_, dst), (_, src)) in p.arrays_mut().into_iter().zip(p64.arrays()) {
            *dst = src.cast();
        }
        let ps: Vec<EvictedPair<f32>> = pairs(&mut rng, 64)
            .into_iter()
            .map(|e| EvictedPair {
                k: e.k.iter().map(|&v| v as f32).collect(),
                v: e.v.iter().map(|&v| v as f32).collect(),
                x: e.x.iter().map(|&v| v as f32).collect(),
                pos: e.pos,
            })
            .collect();
        let h0 = CompressedState::<f32>::zeros(N, H);
        let seq = sequential_scan(&ps, &h0, &p).unwrap();
        let ch = chunk_scan(&ps, &h0, &p, 8).unwrap();
        let err = seq
            .data()
            .iter()
            .zip(ch.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(err < 1e-5, "{variant}: {err}");
    }
}

#[test]
fn chunk_scan_rejects_disorder() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let p = params(AhnVariant::Dn, 17);
    let mut ps = pairs(&mut rng, 4);
    ps.swap(1, 2);
    let h0 = CompressedState::zeros(N, H);
    assert!(matches!(chunk_scan(&ps, &h0, &p, 2), Err(Error::Ordering { .. })));
    assert!(matches!(sequential_scan(&ps, &h0, &p), Err(Error::Ordering { .. })));
    assert!(chunk_scan(&ps[..1], &h0, &p, 0).is_err());
}

/// Tensors feeding the memory branch of one layer.
struct BranchInputs {
    x: Tensor<f64>,
    q: Tensor<f64>,
    k: Tensor<f64>,
    v: Tensor<f64>,
    weight: Tensor<f64>,
}

const LEN: usize = 5;
const WINDOW: usize = 1;

fn branch_inputs(seed: u64) -> BranchInputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    BranchInputs {
        x: Tensor::randn(&[LEN, D], 1.0, &mut rng),
        q: Tensor::randn(&[LEN, N * H], 1.0, &mut rng),
        k: Tensor::randn(&[LEN, NKV * H], 1.0, &mut rng),
        v: Tensor::randn(&[LEN, NKV * H], 1.0, &mut rng),
        weight: Tensor::randn(&[LEN, N * H], 1.0, &mut rng),
    }
}

/// `Σ R ⊙ branch(...)` with the input named `slot` replaced by `var`.
fn branch_loss(tape: &mut Tape<f64>, p: &AhnParams<f64>, inp: &BranchInputs, slot: &str, var: Var) -> Result<Var> {
    let mut vars = AhnVars::register(tape, p, false);
    let named = vars.vars();
    let mut pick = |name: &str, t: &Tensor<f64>| if name == slot { var } else { tape.constant(t.clone()) };
    let x = pick("x", &inp.x);
    let q = pick("q", &inp.q);
    let k = pick("k", &inp.k);
    let v = pick("v", &inp.v);
    if named.iter().any(|(n, _)| *n == slot) {
        let set = |pair: &mut (Var, Var), base: &str| {
            if slot == format!("{base}.w") {
                pair.0 = var;
            } else if slot == format!("{base}.b") {
                pair.1 = var;
            }
        };
        if let Some(g) = vars.alpha.as_mut() {
            set(g, "alpha")
        }
        if let Some(g) = vars.beta.as_mut() {
            set(g, "beta")
        }
        if let Some(g) = vars.delta.as_mut() {
            set(g, "delta")
        }
        set(&mut vars.gamma, "gamma");
        if slot == "a_log" {
            vars.a_log = Some(var);
        }
        if slot == "w_out" {
            vars.w_out = var;
        }
    }
    let y = ahn_branch(tape, &vars, x, q, k, v, 0, WINDOW)?;
    let r = tape.constant(inp.weight.clone());
    let prod = tape.mul(y, r)?;
    Ok(tape.sum(prod))
}

#[test]
fn gradients_through_chained_updates_and_readout() {
    for variant in AhnVariant::ALL {
        let mut p = params(variant, 18);
        // Open the output gate so every path carries signal.
        p.gamma.b = Tensor::full(p.gamma.b.shape(), 0.5);
        let inp = branch_inputs(19);
        let mut slots: Vec<(String, Tensor<f64>)> = [("x", &inp.x), ("q", &inp.q), ("k", &inp.k), ("v", &inp.v)]
            .iter()
            .map(|(n, t)| (n.to_string(), (*t).clone()))
            .collect();
        slots.extend(p.arrays().into_iter().map(|(n, t)| (n.to_string(), t.clone())));
        for (slot, value) in &slots {
            let err = grad_check(
                |tape: &mut Tape<f64>, x: Var| branch_loss(tape, &p, &inp, slot, x),
                value,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-5, "{variant} {slot}: {err}");
        }
    }
}

#[test]
fn scan_reads_only_evicted_tokens() {
    // With a window of 1 and no sinks, position t reads a memory holding 0..t−1.
    let p = params(AhnVariant::Gdn, 20);
    let inp = branch_inputs(21);
    let mut tape = Tape::new();
    let vars = AhnVars::register(&mut tape, &p, false);
    let [x, q, k, v] = [&inp.x, &inp.q, &inp.k, &inp.v].map(|t| tape.constant(t.clone()));
    let y = ahn_branch(&mut tape, &vars, x, q, k, v, 0, WINDOW).unwrap();
    let y = tape.value(y).clone();
    assert!(y.row(0).iter().all(|&v| v == 0.0));
    let mut h = CompressedState::zeros(N, H);
    for t in 1..LEN {
        let e = EvictedPair {
            k: inp.k.row(t - 1).to_vec(),
            v: inp.v.row(t - 1).to_vec(),
            x: inp.x.row(t - 1).to_vec(),
            pos: t - 1,
        };
        update_in_place(&mut h, &e, &p).unwrap();
        let expect = ahn_readout(inp.q.row(t), &h, inp.x.row(t), &p).unwrap();
        assert!(max_diff(y.row(t), &expect) < 1e-12);
    }
}

#[test]
fn gdn_parameter_count_matches_formula() {
    let p = params(AhnVariant::Gdn, 22);
    assert_eq!(p.weight_count(), 3 * D * N + H * H * N);
    let m = params(AhnVariant::Mamba2, 22);
    assert_eq!(m.a_log.as_ref().unwrap().len(), N);
}

#[test]
fn variant_names() {
    for v in AhnVariant::ALL {
        assert_eq!(v.to_string().parse::<AhnVariant>().unwrap(), v);
    }
    assert!("lstm".parse::<AhnVariant>().is_err());
}
