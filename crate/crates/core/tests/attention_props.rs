use hct_core::attention::{
    attention_weights, build_local_mask, chebyshev, gsa_exchange, hca_block, lca_exchange, predict_head,
    self_attention, AttentionParams, HcaParams,
};
use hct_core::encoder::TokenGrid;
use hct_core::numerics::{grad_check, Coverage, Graph, Init, ParamStore, Tensor, Var};
use hct_core::{oracle, ModelConfig, Result};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

fn grid(g: &mut Graph<f64>, h: usize, w: usize, t: Tensor<f64>) -> TokenGrid {
    let v = g.constant(t).unwrap();
    TokenGrid::new(g, h, w, v).unwrap()
}

fn two_streams(seed: u64, c: usize, heads: usize) -> (ParamStore<f64>, AttentionParams, AttentionParams) {
    let mut store = ParamStore::new();
    let mut init = Init::new(seed);
    let pr = AttentionParams::init(&mut store, &mut init, "r".into(), c, heads);
    let pd = AttentionParams::init(&mut store, &mut init, "d".into(), c, heads);
    (store, pr, pd)
}

fn weights(store: &ParamStore<f64>, name: &str) -> Vec<f64> {
    store.get(name).unwrap().data().to_vec()
}

#[test]
fn mask_is_chebyshev_window_exhaustively() {
    for h in 1..=6 {
        for w in 1..=6 {
            for radius in 0..=6 {
                let m = build_local_mask::<f64>(h, w, radius);
                let n = h * w;
                assert_eq!(m.entries.shape(), &[n, n]);
                for p in 0..n {
                    for q in 0..n {
                        let d = (p / w).abs_diff(q / w).max((p % w).abs_diff(q % w));
                        let v = m.entries.data()[p * n + q];
                        assert_eq!(v, if d <= radius { 0.0 } else { -100.0 }, "{h}x{w} r{radius} ({p},{q})");
                        assert_eq!(v, m.entries.data()[q * n + p]);
                        assert_eq!(chebyshev(p, q, w), d);
                    }
                    assert!(m.is_adjacent(p, p));
                }
                assert_eq!(m.entries.data(), oracle::local_mask(h, w, radius).as_slice());
            }
        }
    }
}

#[test]
fn corner_row_of_three_by_three_mask() {
    let m = build_local_mask::<f64>(3, 3, 1);
    let row: Vec<f64> = m.entries.data()[..9].to_vec();
    assert_eq!(row, [0.0, 0.0, -100.0, 0.0, 0.0, -100.0, -100.0, -100.0, -100.0]);
}

#[test]
fn lca_matches_restricted_key_oracle_on_small_grids() {
    for h in 1..=4 {
        for w in 1..=4 {
            for radius in 0..=2 {
                let err = oracle::lca_oracle_error(h, w, 4, 2, radius, (h * 10 + w) as u64).unwrap();
                assert!(err < 1e-12, "{h}x{w} r{radius}: {err}");
            }
        }
    }
}

#[test]
fn gsa_with_identical_streams_is_self_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (store, p, _) = two_streams(3, 8, 2);
    let mut g = Graph::new();
    let x = grid(&mut g, 3, 2, random(&mut rng, &[6, 8], 1.0));
    let (yr, yd) = gsa_exchange(&mut g, &store, &x, &x, &p, &p).unwrap();
    let sa = self_attention(&mut g, &store, &x, &p, None).unwrap();
    let want = g.add(x.tokens, sa.tokens).unwrap();
    assert_eq!(g.value(yr.tokens), g.value(want));
    assert_eq!(g.value(yd.tokens), g.value(want));
}

#[allow(clippy::too_many_arguments)]
/// `x_out + W_O·concat_h softmax(Q_h K_hᵀ/√d)·V_h` with the map taken from
/// `x_map` and values from `x_val`.
fn swapped_map_oracle(x_map: &[f64], pm: &str, x_val: &[f64], pv: &str, store: &ParamStore<f64>, n: usize, c: usize, heads: usize) -> Vec<f64> {
    let d = c / heads;
    let q = oracle::matmul(x_map, &weights(store, &format!("{pm}.wq")), n, c, c);
    let k = oracle::matmul(x_map, &weights(store, &format!("{pm}.wk")), n, c, c);
    let v = oracle::matmul(x_val, &weights(store, &format!("{pv}.wv")), n, c, c);
    let mut joined = vec![0.0; n * c];
    for h in 0..heads {
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| (0..d).map(|t| q[i * c + h * d + t] * k[j * c + h * d + t]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let a = oracle::softmax(&scores);
            for t in 0..d {
                joined[i * c + h * d + t] = (0..n).map(|j| a[j] * v[j * c + h * d + t]).sum();
            }
        }
    }
    let o = oracle::matmul(&joined, &weights(store, &format!("{pv}.wo")), n, c, c);
    x_val.iter().zip(&o).map(|(a, b)| a + b).collect()
}

#[test]
fn gsa_swaps_self_attention_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (store, pr, pd) = two_streams(4, 4, 2);
    let (tr, td) = (random(&mut rng, &[4, 4], 1.0), random(&mut rng, &[4, 4], 1.0));
    let mut g = Graph::new();
    let xr = grid(&mut g, 2, 2, tr.clone());
    let xd = grid(&mut g, 2, 2, td.clone());
    let (yr, yd) = gsa_exchange(&mut g, &store, &xr, &xd, &pr, &pd).unwrap();
    // depth's map re-aggregates RGB values, and vice versa
    let want_r = swapped_map_oracle(td.data(), "d", tr.data(), "r", &store, 4, 4, 2);
    let want_d = swapped_map_oracle(tr.data(), "r", td.data(), "d", &store, 4, 4, 2);
    for (a, b) in g.value(yr.tokens).data().iter().zip(&want_r) {
        assert!((a - b).abs() < 1e-13);
    }
    for (a, b) in g.value(yd.tokens).data().iter().zip(&want_d) {
        assert!((a - b).abs() < 1e-13);
    }
}

#[test]
fn single_patch_lca_adds_projected_other_stream() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (store, pr, pd) = two_streams(5, 4, 2);
    let (tr, td) = (random(&mut rng, &[1, 4], 1.0), random(&mut rng, &[1, 4], 1.0));
    let mut g = Graph::new();
    let xr = grid(&mut g, 1, 1, tr.clone());
    let xd = grid(&mut g, 1, 1, td.clone());
    let mask = build_local_mask(1, 1, 1);
    let (yr, yd) = lca_exchange(&mut g, &store, &xr, &xd, &mask, &pr, &pd).unwrap();
    let project = |x: &Tensor<f64>, v: &str, o: &str| {
        let xv = oracle::matmul(x.data(), &weights(&store, &format!("{v}.wv")), 1, 4, 4);
        oracle::matmul(&xv, &weights(&store, &format!("{o}.wo")), 1, 4, 4)
    };
    let want_r: Vec<f64> = tr.data().iter().zip(project(&td, "d", "r")).map(|(a, b)| a + b).collect();
    let want_d: Vec<f64> = td.data().iter().zip(project(&tr, "r", "d")).map(|(a, b)| a + b).collect();
    for (a, b) in g.value(yr.tokens).data().iter().zip(&want_r) {
        assert!((a - b).abs() < 1e-15);
    }
    for (a, b) in g.value(yd.tokens).data().iter().zip(&want_d) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn radius_covering_the_lattice_is_global_cross_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (store, pr, pd) = two_streams(6, 4, 2);
    let mut g = Graph::new();
    let xr = grid(&mut g, 3, 4, random(&mut rng, &[12, 4], 1.0));
    let xd = grid(&mut g, 3, 4, random(&mut rng, &[12, 4], 1.0));
    let mask = build_local_mask(3, 4, 3);
    assert!(mask.entries.data().iter().all(|&v| v == 0.0));
    let local = attention_weights(&mut g, &store, &xr, &pr, &xd, &pd, Some(&mask)).unwrap();
    let global = attention_weights(&mut g, &store, &xr, &pr, &xd, &pd, None).unwrap();
    for (a, b) in local.iter().zip(&global) {
        assert_eq!(g.value(*a), g.value(*b));
    }
}

#[test]
fn remote_weights_vanish_for_bounded_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (c, heads) = (8, 2);
    let (mut store, pr, pd) = two_streams(7, c, heads);
    for (_, t) in store.iter_mut() {
        *t = random(&mut rng, t.shape(), 1.0);
    }
    let (h, w) = (4, 4);
    let (tr, td) = (random(&mut rng, &[16, c], 1.0), random(&mut rng, &[16, c], 1.0));
    // every scaled score within ±10
    let d = c / heads;
    let q = oracle::matmul(tr.data(), &weights(&store, "r.wq"), 16, c, c);
    let k = oracle::matmul(td.data(), &weights(&store, "d.wk"), 16, c, c);
    for hd in 0..heads {
        for i in 0..16 {
            for j in 0..16 {
                let s: f64 = (0..d).map(|t| q[i * c + hd * d + t] * k[j * c + hd * d + t]).sum::<f64>() / (d as f64).sqrt();
                assert!(s.abs() <= 10.0, "score {s}");
            }
        }
    }
    let mut g = Graph::new();
    let xr = grid(&mut g, h, w, tr);
    let xd = grid(&mut g, h, w, td);
    let mask = build_local_mask(h, w, 1);
    let maps = attention_weights(&mut g, &store, &xr, &pr, &xd, &pd, Some(&mask)).unwrap();
    let mut remote = 0;
    for m in &maps {
        for (idx, &a) in g.value(*m).data().iter().enumerate() {
            if !mask.is_adjacent(idx / 16, idx % 16) {
                assert!(a < 1e-30, "remote weight {a}");
                remote += 1;
            }
        }
    }
    assert!(remote > 0);
}

/// Patch `(i, j)` of a square `s×s` lattice under dihedral symmetry `t`.
fn dihedral(t: usize, i: usize, j: usize, s: usize) -> (usize, usize) {
    let (i, j) = if t & 4 != 0 { (j, i) } else { (i, j) };
    let i = if t & 1 != 0 { s - 1 - i } else { i };
    let j = if t & 2 != 0 { s - 1 - j } else { j };
    (i, j)
}

fn permute_rows(t: &Tensor<f64>, perm: &[usize], c: usize) -> Tensor<f64> {
    let mut out = vec![0.0; t.len()];
    for (p, &to) in perm.iter().enumerate() {
        out[to * c..(to + 1) * c].copy_from_slice(&t.data()[p * c..(p + 1) * c]);
    }
    Tensor::new(t.shape(), out).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn attention_rows_are_stochastic(seed in 0u64..1000, h in 1usize..5, w in 1usize..5, radius in 0usize..3, masked: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (store, pr, pd) = two_streams(seed, 4, 2);
        let mut g = Graph::new();
        let xr = grid(&mut g, h, w, random(&mut rng, &[h * w, 4], 2.0));
        let xd = grid(&mut g, h, w, random(&mut rng, &[h * w, 4], 2.0));
        let mask = build_local_mask(h, w, radius);
        let maps = attention_weights(&mut g, &store, &xr, &pr, &xd, &pd, masked.then_some(&mask)).unwrap();
        let n = h * w;
        for m in maps {
            for row in g.value(m).data().chunks(n) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|&a| a >= 0.0));
            }
        }
    }

    #[test]
    fn lca_is_equivariant_under_lattice_symmetries(seed in 0u64..1000, t in 0usize..8, radius in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (store, pr, pd) = two_streams(seed, 4, 2);
        let (s, c) = (3, 4);
        let (tr, td) = (random(&mut rng, &[9, c], 1.0), random(&mut rng, &[9, c], 1.0));
        let perm: Vec<usize> = (0..9).map(|p| {
            let (i, j) = dihedral(t, p / s, p % s, s);
            i * s + j
        }).collect();
        let mask = build_local_mask(s, s, radius);
        let mut g = Graph::new();
        let (xr, xd) = (grid(&mut g, s, s, tr.clone()), grid(&mut g, s, s, td.clone()));
        let (yr, yd) = lca_exchange(&mut g, &store, &xr, &xd, &mask, &pr, &pd).unwrap();
        let (xr2, xd2) = (grid(&mut g, s, s, permute_rows(&tr, &perm, c)), grid(&mut g, s, s, permute_rows(&td, &perm, c)));
        let (yr2, yd2) = lca_exchange(&mut g, &store, &xr2, &xd2, &mask, &pr, &pd).unwrap();
        let want_r = permute_rows(g.value(yr.tokens), &perm, c);
        let want_d = permute_rows(g.value(yd.tokens), &perm, c);
        prop_assert!(g.value(yr2.tokens).max_abs_diff(&want_r) < 1e-12);
        prop_assert!(g.value(yd2.tokens).max_abs_diff(&want_d) < 1e-12);
    }
}

#[test]
fn predict_head_matches_resize_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    store.insert("h.w", random(&mut rng, &[4, 1], 1.0));
    store.insert("h.b", random(&mut rng, &[1], 1.0));
    let x = random(&mut rng, &[4, 4], 1.0);
    let mut g = Graph::new();
    let xg = grid(&mut g, 2, 2, x.clone());
    let m = predict_head(&mut g, &store, &xg, "h", 4, 4).unwrap();
    let b = store.get("h.b").unwrap().data()[0];
    let logits: Vec<f64> = oracle::matmul(x.data(), &weights(&store, "h.w"), 4, 4, 1).iter().map(|v| v + b).collect();
    let want = oracle::resize(&logits, 2, 2, 1, 4, 4);
    for (a, b) in g.value(m.values).data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-14);
    }
}

fn tiny_hca(seed: u64) -> (ParamStore<f64>, HcaParams, ModelConfig) {
    let mut store = ParamStore::new();
    let mut init = Init::new(seed);
    let p = HcaParams::init(&mut store, &mut init, "hca".into(), 4, 2);
    (store, p, ModelConfig::toy())
}

#[test]
fn hca_block_with_identical_streams_is_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut store, p, cfg) = tiny_hca(9);
    for (from, to) in [
        ("hca.gsa.norm_r", "hca.gsa.norm_d"),
        ("hca.gsa.r.", "hca.gsa.d."),
        ("hca.lca.norm_r", "hca.lca.norm_d"),
        ("hca.lca.r.", "hca.lca.d."),
        ("hca.head_r", "hca.head_d"),
    ] {
        store.copy_prefix(from, to).unwrap();
    }
    let mut g = Graph::new();
    let x = grid(&mut g, 3, 3, random(&mut rng, &[9, 4], 1.0));
    let mask = build_local_mask(3, 3, 1);
    let out = hca_block(&mut g, &store, &x, &x, &mask, &p, &cfg, (6, 6)).unwrap();
    assert_eq!(g.value(out.x_r.tokens), g.value(out.x_d.tokens));
    assert_eq!(g.value(out.pred_r.values), g.value(out.pred_d.values));
}

#[test]
fn hca_block_passes_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (mut store, p, cfg) = tiny_hca(10);
    store.insert("x_r", random(&mut rng, &[9, 4], 1.0));
    store.insert("x_d", random(&mut rng, &[9, 4], 1.0));
    let gt = Tensor::from_fn(&[6, 6], |i| f64::from(u8::from((i / 6 + i % 6) % 3 == 0)));
    let wr = random(&mut rng, &[9, 4], 1.0);
    let wd = random(&mut rng, &[9, 4], 1.0);
    let mask = build_local_mask(3, 3, 1);
    let loss = |g: &mut Graph<f64>, s: &ParamStore<f64>| -> Result<Var> {
        let xr = g.param(s, "x_r")?;
        let xd = g.param(s, "x_d")?;
        let (xr, xd) = (TokenGrid::new(g, 3, 3, xr)?, TokenGrid::new(g, 3, 3, xd)?);
        let out = hca_block(g, s, &xr, &xd, &mask, &p, &cfg, (6, 6))?;
        let lr = g.stable_bce(out.pred_r.values, &gt)?;
        let ld = g.stable_bce(out.pred_d.values, &gt)?;
        let cr = g.constant(wr.clone())?;
        let cd = g.constant(wd.clone())?;
        let tr = g.mul(out.x_r.tokens, cr)?;
        let td = g.mul(out.x_d.tokens, cd)?;
        let tr = g.sum(tr)?;
        let td = g.sum(td)?;
        let a = g.add(lr, ld)?;
        let b = g.add(tr, td)?;
        g.add(a, b)
    };
    let report = grad_check(loss, &store, 1e-6, Coverage::All).unwrap();
    assert!(report.max_rel_err() < 1e-5, "{}", report.max_rel_err());
    assert_eq!(report.scalars_checked(), store.num_scalars());
}
