//! Straight-from-definition reference implementations.
//!
//! Nothing here touches [`Graph`]: each function is a plain loop nest over
//! `f64` slices, written for obviousness rather than speed, so that the
//! differentiable operations can be compared against an independent source.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{build_local_mask, chebyshev, lca_exchange, AttentionParams};
use crate::encoder::TokenGrid;
use crate::error::Result;
use crate::numerics::{Graph, Init, ParamStore, Tensor};

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// Same-padded stride-1 convolution of `x[h,w,cin]` with `wt[k,k,cin,cout]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(x: &[f64], wt: &[f64], bias: &[f64], h: usize, w: usize, cin: usize, cout: usize, k: usize) -> Vec<f64> {
    let r = (k / 2) as isize;
    let mut out = vec![0.0; h * w * cout];
    for y in 0..h {
        for xx in 0..w {
            for o in 0..cout {
                let mut s = bias[o];
                for dy in 0..k {
                    for dx in 0..k {
                        let sy = y as isize + dy as isize - r;
                        let sx = xx as isize + dx as isize - r;
                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                            continue;
                        }
                        for i in 0..cin {
                            s += x[(sy as usize * w + sx as usize) * cin + i] * wt[((dy * k + dx) * cin + i) * cout + o];
                        }
                    }
                }
                out[(y * w + xx) * cout + o] = s;
            }
        }
    }
    out
}

/// Bilinear resize, align-corners false, one output pixel at a time.
pub fn resize(src_grid: &[f64], h: usize, w: usize, c: usize, nh: usize, nw: usize) -> Vec<f64> {
    let src = |i: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let s = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let lo = (s.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, s - lo as f64)
    };
    let mut out = vec![0.0; nh * nw * c];
    for i in 0..nh {
        let (y0, y1, fy) = src(i, h, nh);
        for j in 0..nw {
            let (x0, x1, fx) = src(j, w, nw);
            for ch in 0..c {
                let at = |y: usize, x: usize| src_grid[(y * w + x) * c + ch];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[(i * nw + j) * c + ch] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = row.iter().map(|v| v.exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// `−[y·ln σ(x) + (1 − y)·ln(1 − σ(x))]`.
pub fn bce(x: f64, y: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    -(y * s.ln() + (1.0 - y) * (1.0 - s).ln())
}

pub fn local_mask(h: usize, w: usize, radius: usize) -> Vec<f64> {
    let n = h * w;
    let mut m = vec![0.0; n * n];
    for p in 0..n {
        for q in 0..n {
            let (py, px) = ((p / w) as isize, (p % w) as isize);
            let (qy, qx) = ((q / w) as isize, (q % w) as isize);
            let d = (py - qy).abs().max((px - qx).abs()) as usize;
            m[p * n + q] = if d <= radius { 0.0 } else { -100.0 };
        }
    }
    m
}

/// Projection matrices of one attention stream, each `[c, c]` row-major.
pub struct Projections<'a> {
    pub wq: &'a [f64],
    pub wk: &'a [f64],
    pub wv: &'a [f64],
    pub wo: &'a [f64],
}

/// Local cross-attention with the key set restricted to the window:
/// `y[p] = x_q[p] + W_O·concat_h Σ_{q∈N(p)} softmax_q(⟨Q_h[p], K_h[q]⟩/√d)·V_h[q]`,
/// queries and `W_O` from the `x_q` stream, keys and values from `x_v`. No
/// mask values appear.
#[allow(clippy::too_many_arguments)]
pub fn local_cross_attention(
    x_q: &[f64],
    pq: &Projections,
    x_v: &[f64],
    pv: &Projections,
    h: usize,
    w: usize,
    c: usize,
    heads: usize,
    radius: usize,
) -> Vec<f64> {
    let n = h * w;
    let d = c / heads;
    let q = matmul(x_q, pq.wq, n, c, c);
    let k = matmul(x_v, pv.wk, n, c, c);
    let v = matmul(x_v, pv.wv, n, c, c);
    let mut joined = vec![0.0; n * c];
    for p in 0..n {
        let (py, px) = (p / w, p % w);
        let window: Vec<usize> = (0..n)
            .filter(|&j| py.abs_diff(j / w).max(px.abs_diff(j % w)) <= radius)
            .collect();
        for head in 0..heads {
            let scores: Vec<f64> = window
                .iter()
                .map(|&j| (0..d).map(|t| q[p * c + head * d + t] * k[j * c + head * d + t]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let a = softmax(&scores);
            for t in 0..d {
                joined[p * c + head * d + t] = window.iter().zip(&a).map(|(&j, &aj)| aj * v[j * c + head * d + t]).sum();
            }
        }
    }
    let o = matmul(&joined, pq.wo, n, c, c);
    x_q.iter().zip(&o).map(|(a, b)| a + b).collect()
}

/// Scalar Adam over a gradient sequence; returns the parameter trajectory.
pub fn adam_scalar(theta0: f64, grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64) -> Vec<f64> {
    let (mut theta, mut m, mut v) = (theta0, 0.0, 0.0);
    let mut path = Vec::with_capacity(grads.len());
    for (t, &g) in grads.iter().enumerate() {
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t as i32 + 1));
        let vh = v / (1.0 - b2.powi(t as i32 + 1));
        theta -= lr * mh / (vh.sqrt() + eps);
        path.push(theta);
    }
    path
}

/// Outcome of one oracle comparison.
#[derive(Clone, Debug)]
pub struct OracleCheck {
    pub name: String,
    pub max_err: f64,
    pub tol: f64,
}

impl OracleCheck {
    pub fn passed(&self) -> bool {
        self.max_err <= self.tol
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Largest deviation of the graph's local cross-attention from the
/// restricted-key-set oracle, over both output streams.
pub fn lca_oracle_error(h: usize, w: usize, c: usize, heads: usize, radius: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut init = Init::new(seed);
    let pr = AttentionParams::init(&mut store, &mut init, "r".into(), c, heads);
    let pd = AttentionParams::init(&mut store, &mut init, "d".into(), c, heads);
    // unit-scale weights
    for (_, t) in store.iter_mut() {
        let fresh = random(&mut rng, t.len());
        t.data_mut().copy_from_slice(&fresh);
    }
    let xr = random(&mut rng, h * w * c);
    let xd = random(&mut rng, h * w * c);

    let mut g = Graph::new();
    let vr = g.constant(Tensor::new(&[h * w, c], xr.clone())?)?;
    let vd = g.constant(Tensor::new(&[h * w, c], xd.clone())?)?;
    let gr = TokenGrid::new(&g, h, w, vr)?;
    let gd = TokenGrid::new(&g, h, w, vd)?;
    let mask = build_local_mask(h, w, radius);
    let (yr, yd) = lca_exchange(&mut g, &store, &gr, &gd, &mask, &pr, &pd)?;

    let proj = |s: &str| -> Result<Projections> {
        Ok(Projections {
            wq: store.get(&format!("{s}.wq"))?.data(),
            wk: store.get(&format!("{s}.wk"))?.data(),
            wv: store.get(&format!("{s}.wv"))?.data(),
            wo: store.get(&format!("{s}.wo"))?.data(),
        })
    };
    let (qr, qd) = (proj("r")?, proj("d")?);
    let want_r = local_cross_attention(&xr, &qr, &xd, &qd, h, w, c, heads, radius);
    let want_d = local_cross_attention(&xd, &qd, &xr, &qr, h, w, c, heads, radius);
    Ok(max_diff(g.value(yr.tokens).data(), &want_r).max(max_diff(g.value(yd.tokens).data(), &want_d)))
}

/// Runs every graph-versus-oracle comparison on seeded random inputs.
pub fn run_all(seed: u64) -> Result<Vec<OracleCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();
    let mut push = |name: &str, max_err: f64, tol: f64| {
        checks.push(OracleCheck {
            name: name.into(),
            max_err,
            tol,
        })
    };

    let (a, b) = (random(&mut rng, 20), random(&mut rng, 12));
    let mut g = Graph::new();
    let va = g.constant(Tensor::new(&[5, 4], a.clone())?)?;
    let vb = g.constant(Tensor::new(&[4, 3], b.clone())?)?;
    let c = g.matmul(va, vb)?;
    push("matmul", max_diff(g.value(c).data(), &matmul(&a, &b, 5, 4, 3)), 1e-12);

    for k in [1, 3] {
        let (h, w, cin, cout) = (4, 5, 3, 2);
        let x = random(&mut rng, h * w * cin);
        let wt = random(&mut rng, k * k * cin * cout);
        let bias = random(&mut rng, cout);
        let vx = g.constant(Tensor::new(&[h, w, cin], x.clone())?)?;
        let vw = g.constant(Tensor::new(&[k, k, cin, cout], wt.clone())?)?;
        let vbias = g.constant(Tensor::new(&[cout], bias.clone())?)?;
        let y = g.conv2d(vx, vw, vbias)?;
        let want = conv2d(&x, &wt, &bias, h, w, cin, cout, k);
        push(&format!("conv2d_k{k}"), max_diff(g.value(y).data(), &want), 1e-12);
    }

    let grid = [0.0, 1.0, 2.0, 3.0];
    let vg = g.constant(Tensor::new(&[2, 2, 1], grid.to_vec())?)?;
    let up = g.bilinear_resize(vg, 4, 4)?;
    push("resize_2x2_to_4x4", max_diff(g.value(up).data(), &resize(&grid, 2, 2, 1, 4, 4)), 1e-12);
    let x = random(&mut rng, 3 * 5 * 2);
    let vx = g.constant(Tensor::new(&[3, 5, 2], x.clone())?)?;
    let y = g.bilinear_resize(vx, 7, 4)?;
    push("resize_3x5_to_7x4", max_diff(g.value(y).data(), &resize(&x, 3, 5, 2, 7, 4)), 1e-12);

    let row = [1.0, 2.0, 3.0];
    let vr = g.constant(Tensor::new(&[1, 3], row.to_vec())?)?;
    let s = g.softmax_rows(vr)?;
    push("softmax", max_diff(g.value(s).data(), &softmax(&row)), 1e-15);

    let (logits, targets) = ([-2.0, 3.0], [0.0, 1.0]);
    let vl = g.constant(Tensor::new(&[2], logits.to_vec())?)?;
    let l = g.stable_bce(vl, &Tensor::new(&[2], targets.to_vec())?)?;
    let want = (bce(logits[0], targets[0]) + bce(logits[1], targets[1])) / 2.0;
    push("stable_bce", (g.value(l).data()[0] - want).abs(), 1e-12);

    let mut mask_err: f64 = 0.0;
    for h in 1..=6 {
        for w in 1..=6 {
            for r in 0..=3 {
                let m = build_local_mask::<f64>(h, w, r);
                mask_err = mask_err.max(max_diff(m.entries.data(), &local_mask(h, w, r)));
                for p in 0..h * w {
                    for q in 0..h * w {
                        let adj = chebyshev(p, q, w) <= r;
                        if adj != (m.entries.data()[p * h * w + q] == 0.0) {
                            mask_err = f64::INFINITY;
                        }
                    }
                }
            }
        }
    }
    push("local_mask", mask_err, 0.0);

    let mut lca_err: f64 = 0.0;
    for h in 1..=4 {
        for w in 1..=4 {
            for r in 0..=2 {
                lca_err = lca_err.max(lca_oracle_error(h, w, 4, 2, r, seed ^ ((h * 16 + w) * 4 + r) as u64)?);
            }
        }
    }
    push("lca_restricted_keys", lca_err, 1e-12);

    Ok(checks)
}
