use mixtte_core::diffmath::{grad_check_many, Array, Tape};
use mixtte_core::params::{Bound, Init, ParamStore};
use mixtte_core::stea::*;
use mixtte_core::Error;

fn setup(cfg: SteaConfig, seed: u64) -> (ParamStore, SteaParams) {
    let mut store = ParamStore::new();
    let p = SteaParams::init(&mut store, &mut Init::new(seed), &cfg).unwrap();
    (store, p)
}

fn tiny() -> SteaConfig {
    SteaConfig {
        d: 4,
        heads: 2,
        u_ex: 3,
        u_in: 2,
        lookback: 2,
        channels: 2,
        ..SteaConfig::default()
    }
}

fn eval(store: &ParamStore, f: impl FnOnce(&mut Tape, &Bound) -> mixtte_core::Result<mixtte_core::diffmath::Var>) -> Array {
    let mut t = Tape::new();
    let b = store.bind(&mut t);
    let v = f(&mut t, &b).unwrap();
    t.value(v).clone()
}

fn layer_norm_rows(x: &Array) -> Array {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = x.row(r);
        let m = row.iter().sum::<f64>() / row.len() as f64;
        let v = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / row.len() as f64;
        for (o, a) in out.row_mut(r).iter_mut().zip(row) {
            *o = (a - m) / (v + LN_EPS).sqrt();
        }
    }
    out
}

fn assert_close(a: &Array, b: &Array, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    let d = a.max_abs_diff(b);
    assert!(d <= tol, "max diff {d} > {tol}");
}

#[test]
fn encode_hand_example() {
    let cfg = SteaConfig {
        d: 1,
        heads: 1,
        u_ex: 1,
        u_in: 1,
        lookback: 2,
        channels: 1,
        ..SteaConfig::default()
    };
    let (mut store, p) = setup(cfg, 0);
    store.set(p.enc_w1, Array::from_vec(2, 1, vec![0.5, -0.25]).unwrap()).unwrap();
    store.set(p.enc_b1, Array::scalar(0.3)).unwrap();
    store.set(p.enc_w2, Array::scalar(2.0)).unwrap();
    store.set(p.enc_b2, Array::scalar(0.1)).unwrap();
    let h = eval(&store, |t, b| {
        let x = t.constant(Array::row_vector(vec![1.0, 2.0]).unwrap());
        encode_slices(t, x, &p, b)
    });
    assert!((h.item() - 0.7).abs() < 1e-15);
}

#[test]
fn encode_zero_weights_and_permutation() {
    let (mut store, p) = setup(tiny(), 1);
    let x = Init::new(5).uniform(5, 4, 1.0);
    let perm = [3, 0, 4, 1, 2];
    let h = eval(&store, |t, b| {
        let v = t.constant(x.clone());
        encode_slices(t, v, &p, b)
    });
    let hp = eval(&store, |t, b| {
        let v = t.constant(x.select_rows(&perm));
        encode_slices(t, v, &p, b)
    });
    assert_close(&hp, &h.select_rows(&perm), 0.0);

    for id in [p.enc_w1, p.enc_b1, p.enc_w2, p.enc_b2] {
        let [r, c] = store.value(id).shape();
        store.set(id, Array::zeros(r, c)).unwrap();
    }
    let h = eval(&store, |t, b| {
        let v = t.constant(x.clone());
        encode_slices(t, v, &p, b)
    });
    assert_eq!(h.max_abs_diff(&Array::zeros(5, 4)), 0.0);
}

#[test]
fn ekr_hand_two_by_two() {
    let cfg = SteaConfig {
        d: 2,
        heads: 1,
        u_ex: 2,
        u_in: 1,
        temp: Some(1.0),
        ..SteaConfig::default()
    };
    let (mut store, p) = setup(cfg, 2);
    for id in [p.w_q, p.w_k, p.w_v] {
        store.set(id, Array::identity(2)).unwrap();
    }
    store.set(p.mem.m, Array::identity(2)).unwrap();
    let out = eval(&store, |t, b| {
        let h = t.constant(Array::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap());
        ekr(t, h, &p, b)
    });
    let e = std::f64::consts::E;
    let want = Array::from_rows(&[
        vec![e / (e + 1.0), 1.0 / (e + 1.0)],
        vec![1.0 / (1.0 + e * e), e * e / (1.0 + e * e)],
    ])
    .unwrap();
    assert_close(&out, &want, 1e-15);
}

#[test]
fn ekr_identical_keys_average_values() {
    let cfg = SteaConfig {
        separate_kv: true,
        u_ex: 4,
        ..tiny()
    };
    let (mut store, p) = setup(cfg, 3);
    store.set(p.mem.m_k.unwrap(), Array::full(4, 4, 0.3)).unwrap();
    let values = Init::new(8).uniform(4, 4, 1.0);
    store.set(p.mem.m_v.unwrap(), values.clone()).unwrap();
    let out = eval(&store, |t, b| {
        let h = t.constant(Init::new(9).uniform(6, 4, 2.0));
        ekr(t, h, &p, b)
    });
    for r in 0..6 {
        for c in 0..4 {
            let mean = (0..4).map(|u| values.get(u, c)).sum::<f64>() / 4.0;
            assert!((out.get(r, c) - mean).abs() < 1e-14);
        }
    }
}

#[test]
fn ekr_rows_in_value_hull() {
    let cfg = SteaConfig {
        separate_kv: true,
        ..tiny()
    };
    let (store, p) = setup(cfg, 4);
    let vals = store.value(p.mem.m_v.unwrap()).clone();
    let out = eval(&store, |t, b| {
        let h = t.constant(Init::new(10).uniform(7, 4, 3.0));
        ekr(t, h, &p, b)
    });
    for c in 0..4 {
        let lo = (0..3).map(|u| vals.get(u, c)).fold(f64::INFINITY, f64::min);
        let hi = (0..3).map(|u| vals.get(u, c)).fold(f64::NEG_INFINITY, f64::max);
        for r in 0..7 {
            assert!(out.get(r, c) >= lo - 1e-12 && out.get(r, c) <= hi + 1e-12);
        }
    }
}

#[test]
fn indivisible_heads_is_config_error() {
    let cfg = SteaConfig { heads: 3, ..tiny() };
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}

#[test]
fn soft_cluster_examples() {
    let cfg = SteaConfig {
        d: 2,
        heads: 1,
        u_in: 2,
        ..SteaConfig::default()
    };
    let (mut store, p) = setup(cfg, 5);
    store.set(p.w_sc, Array::identity(2)).unwrap();
    store.set(p.w_proj, Array::identity(2)).unwrap();
    let h = Array::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
    let mut t = Tape::new();
    let b = store.bind(&mut t);
    let hv = t.constant(h.clone());
    let (alpha, h_se) = soft_cluster(&mut t, hv, &p, &b).unwrap();
    let s = std::f64::consts::E / (1.0 + std::f64::consts::E);
    let want_alpha = Array::from_rows(&[vec![s, 1.0 - s], vec![1.0 - s, s], vec![0.5, 0.5]]).unwrap();
    assert_close(t.value(alpha), &want_alpha, 1e-15);
    let want_se = Array::from_rows(&[vec![s + 0.5, 1.5 - s], vec![1.5 - s, s + 0.5]]).unwrap();
    assert_close(t.value(h_se), &want_se, 1e-15);

    store.set(p.w_sc, Array::zeros(2, 2)).unwrap();
    let mut t = Tape::new();
    let b = store.bind(&mut t);
    let hv = t.constant(h);
    let (alpha, h_se) = soft_cluster(&mut t, hv, &p, &b).unwrap();
    assert_close(t.value(alpha), &Array::full(3, 2, 0.5), 0.0);
    let se = t.value(h_se);
    assert_eq!(se.row(0), se.row(1));
    assert_eq!(se.row(0), &[1.0, 1.0]);
}

#[test]
fn single_cluster_sums_projection() {
    let cfg = SteaConfig { u_in: 1, ..tiny() };
    let (store, p) = setup(cfg, 6);
    let h = Init::new(11).uniform(5, 4, 1.0);
    let mut t = Tape::new();
    let b = store.bind(&mut t);
    let hv = t.constant(h.clone());
    let (alpha, h_se) = soft_cluster(&mut t, hv, &p, &b).unwrap();
    assert_close(t.value(alpha), &Array::full(5, 1, 1.0), 0.0);
    let proj = mixtte_core::diffmath::gemm(&h, false, store.value(p.w_proj), false).unwrap();
    for c in 0..4 {
        let s: f64 = (0..5).map(|r| proj.get(r, c)).sum();
        assert!((t.value(h_se).get(0, c) - s).abs() < 1e-14);
    }
}

#[test]
fn broadcast_examples() {
    let mut t = Tape::new();
    let tokens = Array::from_rows(&[vec![1.0, -2.0, 4.0], vec![3.0, 6.0, 0.0]]).unwrap();
    let alpha = Array::from_rows(&[vec![0.25, 0.75], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let (a, k) = (t.constant(alpha), t.constant(tokens.clone()));
    let out = broadcast(&mut t, a, k).unwrap();
    let o = t.value(out);
    assert_eq!(o.row(0), &[0.25 + 2.25, -0.5 + 4.5, 1.0]);
    assert_eq!(o.row(1), tokens.row(0));
    assert_eq!(o.row(2), tokens.row(1));

    let same = Array::from_rows(&[vec![2.0, 5.0], vec![2.0, 5.0]]).unwrap();
    let (a, k) = (t.constant(Array::from_rows(&[vec![0.3, 0.7]]).unwrap()), t.constant(same));
    let out = broadcast(&mut t, a, k).unwrap();
    assert_close(t.value(out), &Array::from_rows(&[vec![2.0, 5.0]]).unwrap(), 1e-15);
}

#[test]
fn zero_retrieval_leaves_layer_norm() {
    for mode in [SteaMode::Flat, SteaMode::Hierarchical] {
        let (mut store, p) = setup(tiny(), 7);
        store.set(p.w_v, Array::zeros(4, 4)).unwrap();
        store.set(p.sa_v, Array::zeros(4, 4)).unwrap();
        let h = Init::new(12).uniform(5, 4, 1.0);
        let out = eval(&store, |t, b| {
            let v = t.constant(h.clone());
            stea_forward(t, v, &p, b, mode)
        });
        assert_close(&out, &layer_norm_rows(&h), 1e-12);
    }
}

#[test]
fn flat_single_row() {
    let (store, p) = setup(tiny(), 8);
    let h = Init::new(13).uniform(1, 4, 1.0);
    let out = eval(&store, |t, b| {
        let v = t.constant(h.clone());
        stea_forward(t, v, &p, b, SteaMode::Flat)
    });
    let e = eval(&store, |t, b| {
        let v = t.constant(h.clone());
        ekr(t, v, &p, b)
    });
    let mut sum = e.clone();
    for (s, x) in sum.data_mut().iter_mut().zip(h.data()) {
        *s += x;
    }
    assert_close(&out, &layer_norm_rows(&sum), 1e-12);
}

#[test]
fn hierarchical_matches_manual_composition() {
    let cfg = SteaConfig { u_in: 2, ..tiny() };
    for seed in 0..10 {
        let (mut store, p) = setup(cfg.clone(), seed);
        store.set(p.ln_gamma, Init::new(seed + 50).uniform(1, 4, 1.0)).unwrap();
        store.set(p.ln_beta, Init::new(seed + 60).uniform(1, 4, 1.0)).unwrap();
        let h = Init::new(seed + 100).uniform(3, 4, 1.0);
        let full = eval(&store, |t, b| {
            let v = t.constant(h.clone());
            stea_forward(t, v, &p, b, SteaMode::Hierarchical)
        });
        let manual = eval(&store, |t, b| {
            let v = t.constant(h.clone());
            let (alpha, h_se) = soft_cluster(t, v, &p, b)?;
            let sa = semantic_self_attention(t, h_se, &p, b)?;
            let ex = ekr(t, h_se, &p, b)?;
            let tok = t.add(sa, ex)?;
            let bc = broadcast(t, alpha, tok)?;
            let r = t.add(bc, v)?;
            layer_norm_affine(t, r, b[p.ln_gamma], b[p.ln_beta])
        });
        assert_close(&full, &manual, 1e-10);
    }
}

#[test]
fn flat_mode_permutation_equivariant() {
    let (store, p) = setup(tiny(), 9);
    let h = Init::new(14).uniform(6, 4, 1.0);
    let perm = [5, 2, 0, 1, 4, 3];
    let a = eval(&store, |t, b| {
        let v = t.constant(h.clone());
        stea_forward(t, v, &p, b, SteaMode::Flat)
    });
    let bp = eval(&store, |t, b| {
        let v = t.constant(h.select_rows(&perm));
        stea_forward(t, v, &p, b, SteaMode::Flat)
    });
    assert_close(&bp, &a.select_rows(&perm), 1e-14);
}

#[test]
fn cluster_weights_row_stochastic() {
    let (store, p) = setup(SteaConfig { u_in: 5, ..tiny() }, 10);
    let mut t = Tape::new();
    let b = store.bind(&mut t);
    let hv = t.constant(Init::new(15).uniform(9, 4, 4.0));
    let (alpha, _) = soft_cluster(&mut t, hv, &p, &b).unwrap();
    for r in 0..9 {
        assert!((t.value(alpha).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn stea_forward_gradients() {
    for (mode, kv) in [(SteaMode::Flat, false), (SteaMode::Hierarchical, false), (SteaMode::Flat, true)] {
        let cfg = SteaConfig {
            separate_kv: kv,
            u_ex: 2,
            ..tiny()
        };
        let (store, p) = setup(cfg, 11);
        let x = Init::new(16).uniform(3, 4, 1.0);
        let weights = Init::new(17).uniform(3, 4, 1.0);
        let err = grad_check_many(
            |t, vars| {
                let b = Bound::from_vars(vars.to_vec());
                let xv = t.constant(x.clone());
                let h = encode_slices(t, xv, &p, &b)?;
                let y = stea_forward(t, h, &p, &b, mode)?;
                let w = t.constant(weights.clone());
                let m = t.mul(y, w)?;
                Ok(t.sum(m))
            },
            &store.arrays(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{mode:?} separate_kv={kv}: rel err {err}");
    }
}
