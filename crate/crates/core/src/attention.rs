//! Hierarchical cross-modal attention.
//!
//! Two stages act on aligned RGB and depth token grids:
//!
//! * **GSA** (global self-attention exchange). Each modality computes its own
//!   self-attention map `softmax(Q·Kᵀ/√d)`; the maps are then swapped, so
//!   RGB values are re-aggregated with the depth map and vice versa. The
//!   result is added back to the stream whose values were aggregated.
//! * **LCA** (local-aligned cross-attention). Queries of one modality attend
//!   to keys and values of the other, `softmax(Q·Kᵀ/√d + M)`, and the result
//!   is added to the querying stream. The additive mask `M`
//!   holds 0 for key patches within a Chebyshev radius of the query patch and
//!   −100 elsewhere. A remote key thus receives weight below `e^{−100+Δ}`.
//!
//! Scores are scaled by `1/√d` before the mask is added, so the −100 offset
//! keeps its magnitude regardless of head width.

use crate::config::ModelConfig;
use crate::dcm::{MapKind, SaliencyMap};
use crate::encoder::{linear, norm, TokenGrid};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Init, ParamStore, Tensor, Var};
use crate::scalar::Scalar;

/// Mask value for patch pairs outside the local window.
pub const REMOTE: f64 = -100.0;

/// Additive `n×n` mask over a row-major `h×w` patch lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask<T> {
    pub h: usize,
    pub w: usize,
    pub radius: usize,
    pub entries: Tensor<T>,
}

impl<T: Scalar> AttentionMask<T> {
    pub fn n(&self) -> usize {
        self.h * self.w
    }

    pub fn is_adjacent(&self, p: usize, q: usize) -> bool {
        self.entries.data()[p * self.n() + q] == T::zero()
    }
}

/// Chebyshev distance between two patches of a row-major lattice of width `w`.
pub fn chebyshev(p: usize, q: usize, w: usize) -> usize {
    let (pi, pj) = (p / w, p % w);
    let (qi, qj) = (q / w, q % w);
    pi.abs_diff(qi).max(pj.abs_diff(qj))
}

pub fn build_local_mask<T: Scalar>(h: usize, w: usize, radius: usize) -> AttentionMask<T> {
    let n = h * w;
    let remote = T::lit(REMOTE);
    let entries = Tensor::from_fn(&[n, n], |idx| {
        if chebyshev(idx / n, idx % n, w) <= radius {
            T::zero()
        } else {
            remote
        }
    });
    AttentionMask { h, w, radius, entries }
}

/// Names of one multi-head attention's projections `{prefix}.wq|wk|wv|wo`,
/// each `[c, c]` and bias-free.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub prefix: String,
    pub c: usize,
    pub heads: usize,
}

impl AttentionParams {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, prefix: String, c: usize, heads: usize) -> Self {
        for m in ["wq", "wk", "wv", "wo"] {
            init.uniform(store, format!("{prefix}.{m}"), &[c, c], c);
        }
        Self { prefix, c, heads }
    }

    pub fn head_dim(&self) -> usize {
        self.c / self.heads
    }

    fn name(&self, m: &str) -> String {
        format!("{}.{m}", self.prefix)
    }

    fn project<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, m: &str) -> Result<Var> {
        let w = g.param(store, &self.name(m))?;
        g.matmul(x, w)
    }

    fn check(&self, x: &TokenGrid) -> Result<()> {
        if x.c != self.c || !self.c.is_multiple_of(self.heads) {
            return Err(Error::Shape {
                op: "attention",
                left: vec![x.n(), x.c],
                right: vec![self.c, self.heads],
            });
        }
        Ok(())
    }
}

/// Per-head attention maps `softmax(Q·Kᵀ/√d [+ M])` with queries from
/// `queries` projected by `pq` and keys from `keys` projected by `pk`.
pub fn attention_weights<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    queries: &TokenGrid,
    pq: &AttentionParams,
    keys: &TokenGrid,
    pk: &AttentionParams,
    mask: Option<&AttentionMask<T>>,
) -> Result<Vec<Var>> {
    pq.check(queries)?;
    pk.check(keys)?;
    if pq.heads != pk.heads {
        return Err(Error::Shape {
            op: "attention",
            left: vec![pq.heads],
            right: vec![pk.heads],
        });
    }
    let mask = match mask {
        Some(m) => {
            if m.n() != queries.n() || m.n() != keys.n() {
                return Err(Error::Shape {
                    op: "attention_mask",
                    left: vec![m.n(), m.n()],
                    right: vec![queries.n(), keys.n()],
                });
            }
            Some(g.constant(m.entries.clone())?)
        }
        None => None,
    };
    let q = pq.project(g, store, queries.tokens, "wq")?;
    let k = pk.project(g, store, keys.tokens, "wk")?;
    let d = pq.head_dim();
    let scale = T::one() / T::from_usize_exact(d).sqrt();
    let mut maps = Vec::with_capacity(pq.heads);
    for h in 0..pq.heads {
        let qh = g.slice_cols(q, h * d, d)?;
        let kh = g.slice_cols(k, h * d, d)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let mut scores = g.scale(scores, scale)?;
        if let Some(m) = mask {
            scores = g.add(scores, m)?;
        }
        maps.push(g.softmax_rows(scores)?);
    }
    Ok(maps)
}

/// `concat_h(A_h · V_h) · W_O` with `V = values · W_V` from `pv` and `W_O`
/// from `po`.
pub fn apply_attention<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    maps: &[Var],
    values: &TokenGrid,
    pv: &AttentionParams,
    po: &AttentionParams,
) -> Result<Var> {
    pv.check(values)?;
    let v = pv.project(g, store, values.tokens, "wv")?;
    let d = pv.head_dim();
    let mut heads = Vec::with_capacity(maps.len());
    for (h, &a) in maps.iter().enumerate() {
        let vh = g.slice_cols(v, h * d, d)?;
        heads.push(g.matmul(a, vh)?);
    }
    let joined = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    po.project(g, store, joined, "wo")
}

/// Standard multi-head scaled dot-product self-attention, without residual.
pub fn self_attention<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: &TokenGrid,
    p: &AttentionParams,
    mask: Option<&AttentionMask<T>>,
) -> Result<TokenGrid> {
    let maps = attention_weights(g, store, x, p, x, p, mask)?;
    let out = apply_attention(g, store, &maps, x, p, p)?;
    Ok(x.with_tokens(out))
}

/// Residual updates of one exchange stage plus the attention maps used.
#[derive(Clone, Debug)]
pub struct ExchangeDelta {
    pub delta_r: Var,
    pub delta_d: Var,
    /// Maps whose queries come from RGB tokens (per head).
    pub maps_rgb_query: Vec<Var>,
    /// Maps whose queries come from depth tokens (per head).
    pub maps_depth_query: Vec<Var>,
}

fn check_aligned(x_r: &TokenGrid, x_d: &TokenGrid) -> Result<()> {
    if !x_r.same_extent(x_d) {
        return Err(Error::Shape {
            op: "cross_modal_attention",
            left: vec![x_r.h, x_r.w, x_r.c],
            right: vec![x_d.h, x_d.w, x_d.c],
        });
    }
    Ok(())
}

/// GSA updates: RGB values aggregated by the depth self-attention map, and
/// depth values by the RGB map.
pub fn gsa_delta<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x_r: &TokenGrid,
    x_d: &TokenGrid,
    p_r: &AttentionParams,
    p_d: &AttentionParams,
) -> Result<ExchangeDelta> {
    check_aligned(x_r, x_d)?;
    let maps_r = attention_weights(g, store, x_r, p_r, x_r, p_r, None)?;
    let maps_d = attention_weights(g, store, x_d, p_d, x_d, p_d, None)?;
    let delta_r = apply_attention(g, store, &maps_d, x_r, p_r, p_r)?;
    let delta_d = apply_attention(g, store, &maps_r, x_d, p_d, p_d)?;
    Ok(ExchangeDelta {
        delta_r,
        delta_d,
        maps_rgb_query: maps_r,
        maps_depth_query: maps_d,
    })
}

/// `y_r = x_r + W_O^r·(softmax(Q_d K_dᵀ/√d)·V_r)`,
/// `y_d = x_d + W_O^d·(softmax(Q_r K_rᵀ/√d)·V_d)`.
pub fn gsa_exchange<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x_r: &TokenGrid,
    x_d: &TokenGrid,
    p_r: &AttentionParams,
    p_d: &AttentionParams,
) -> Result<(TokenGrid, TokenGrid)> {
    let delta = gsa_delta(g, store, x_r, x_d, p_r, p_d)?;
    let y_r = g.add(x_r.tokens, delta.delta_r)?;
    let y_d = g.add(x_d.tokens, delta.delta_d)?;
    Ok((x_r.with_tokens(y_r), x_d.with_tokens(y_d)))
}

/// LCA updates: RGB queries against depth keys aggregate depth values (added
/// to RGB), and depth queries against RGB keys aggregate RGB values (added to
/// depth), both restricted by `mask`. Output projections belong to the
/// receiving stream.
pub fn lca_delta<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x_r: &TokenGrid,
    x_d: &TokenGrid,
    mask: &AttentionMask<T>,
    p_r: &AttentionParams,
    p_d: &AttentionParams,
) -> Result<ExchangeDelta> {
    check_aligned(x_r, x_d)?;
    let maps_rq = attention_weights(g, store, x_r, p_r, x_d, p_d, Some(mask))?;
    let maps_dq = attention_weights(g, store, x_d, p_d, x_r, p_r, Some(mask))?;
    let delta_r = apply_attention(g, store, &maps_rq, x_d, p_d, p_r)?;
    let delta_d = apply_attention(g, store, &maps_dq, x_r, p_r, p_d)?;
    Ok(ExchangeDelta {
        delta_r,
        delta_d,
        maps_rgb_query: maps_rq,
        maps_depth_query: maps_dq,
    })
}

/// `y_r = x_r + W_O^r·(softmax(Q_r K_dᵀ/√d + M)·V_d)`,
/// `y_d = x_d + W_O^d·(softmax(Q_d K_rᵀ/√d + M)·V_r)`.
pub fn lca_exchange<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x_r: &TokenGrid,
    x_d: &TokenGrid,
    mask: &AttentionMask<T>,
    p_r: &AttentionParams,
    p_d: &AttentionParams,
) -> Result<(TokenGrid, TokenGrid)> {
    let delta = lca_delta(g, store, x_r, x_d, mask, p_r, p_d)?;
    let y_r = g.add(x_r.tokens, delta.delta_r)?;
    let y_d = g.add(x_d.tokens, delta.delta_d)?;
    Ok((x_r.with_tokens(y_r), x_d.with_tokens(y_d)))
}

/// Per-token linear map to one logit, reshaped to the lattice and resized
/// bilinearly to `out_h×out_w`. Parameters `{prefix}.w [c,1]`, `{prefix}.b [1]`.
pub fn predict_head<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: &TokenGrid,
    prefix: &str,
    out_h: usize,
    out_w: usize,
) -> Result<SaliencyMap> {
    if out_h < x.h || out_w < x.w {
        return Err(Error::InvalidArgument {
            op: "predict_head",
            msg: format!("output {out_h}×{out_w} smaller than lattice {}×{}", x.h, x.w),
        });
    }
    let logits = linear(g, store, x.tokens, prefix)?;
    let lattice = g.reshape(logits, &[x.h, x.w, 1])?;
    let resized = g.bilinear_resize(lattice, out_h, out_w)?;
    let values = g.reshape(resized, &[out_h, out_w])?;
    Ok(SaliencyMap {
        h: out_h,
        w: out_w,
        values,
        kind: MapKind::Logit,
    })
}

/// Names of one HCA block.
#[derive(Clone, Debug)]
pub struct HcaParams {
    pub prefix: String,
    pub gsa_r: AttentionParams,
    pub gsa_d: AttentionParams,
    pub lca_r: AttentionParams,
    pub lca_d: AttentionParams,
}

impl HcaParams {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, prefix: String, c: usize, heads: usize) -> Self {
        init.norm(store, &format!("{prefix}.gsa.norm_r"), c);
        init.norm(store, &format!("{prefix}.gsa.norm_d"), c);
        let gsa_r = AttentionParams::init(store, init, format!("{prefix}.gsa.r"), c, heads);
        let gsa_d = AttentionParams::init(store, init, format!("{prefix}.gsa.d"), c, heads);
        init.norm(store, &format!("{prefix}.lca.norm_r"), c);
        init.norm(store, &format!("{prefix}.lca.norm_d"), c);
        let lca_r = AttentionParams::init(store, init, format!("{prefix}.lca.r"), c, heads);
        let lca_d = AttentionParams::init(store, init, format!("{prefix}.lca.d"), c, heads);
        init.linear(store, &format!("{prefix}.head_r"), c, 1);
        init.linear(store, &format!("{prefix}.head_d"), c, 1);
        Self {
            prefix,
            gsa_r,
            gsa_d,
            lca_r,
            lca_d,
        }
    }
}

#[derive(Clone, Debug)]
pub struct HcaOutput {
    pub x_r: TokenGrid,
    pub x_d: TokenGrid,
    pub pred_r: SaliencyMap,
    pub pred_d: SaliencyMap,
    pub gsa: ExchangeDelta,
    pub lca: ExchangeDelta,
}

/// GSA then LCA, each as `x + stage(norm(x))`, followed by one prediction
/// head per stream.
#[allow(clippy::too_many_arguments)]
pub fn hca_block<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x_r: &TokenGrid,
    x_d: &TokenGrid,
    mask: &AttentionMask<T>,
    p: &HcaParams,
    cfg: &ModelConfig,
    out: (usize, usize),
) -> Result<HcaOutput> {
    check_aligned(x_r, x_d)?;
    let eps = T::lit(cfg.ln_eps);
    let pre = &p.prefix;

    let n_r = norm(g, store, x_r.tokens, &format!("{pre}.gsa.norm_r"), eps)?;
    let n_d = norm(g, store, x_d.tokens, &format!("{pre}.gsa.norm_d"), eps)?;
    let gsa = gsa_delta(g, store, &x_r.with_tokens(n_r), &x_d.with_tokens(n_d), &p.gsa_r, &p.gsa_d)?;
    let y_r = g.add(x_r.tokens, gsa.delta_r)?;
    let y_d = g.add(x_d.tokens, gsa.delta_d)?;

    let n_r = norm(g, store, y_r, &format!("{pre}.lca.norm_r"), eps)?;
    let n_d = norm(g, store, y_d, &format!("{pre}.lca.norm_d"), eps)?;
    let lca = lca_delta(
        g,
        store,
        &x_r.with_tokens(n_r),
        &x_d.with_tokens(n_d),
        mask,
        &p.lca_r,
        &p.lca_d,
    )?;
    let z_r = x_r.with_tokens(g.add(y_r, lca.delta_r)?);
    let z_d = x_d.with_tokens(g.add(y_d, lca.delta_d)?);

    let pred_r = predict_head(g, store, &z_r, &format!("{pre}.head_r"), out.0, out.1)?;
    let pred_d = predict_head(g, store, &z_d, &format!("{pre}.head_d"), out.0, out.1)?;
    Ok(HcaOutput {
        x_r: z_r,
        x_d: z_d,
        pred_r,
        pred_d,
        gsa,
        lca,
    })
}
