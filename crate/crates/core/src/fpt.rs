//! Feature pyramid for transformer features.
//!
//! Deep semantics are pushed down to the shallow levels in three stages:
//!
//! | stage | inputs                                   | concat ratio | output            |
//! |-------|------------------------------------------|--------------|-------------------|
//! | A     | up(level3) ‖ level2                      | c_d : c_s    | 2·c_s at level 2  |
//! | B     | up(A) ‖ level1                           | 2 : 1        | c_s at level 1    |
//! | C     | B ‖ lateral(level1)                      | 1 : 1        | c_s at level 1    |
//!
//! Each projection is a per-token linear map (1×1 convolution) followed by
//! layer norm and GELU. With `c_d = 6·c_s` the ratios are 6:1, 2:1, 1:1.

use crate::encoder::{linear, norm, PyramidBundle, TokenGrid};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Init, ParamStore};
use crate::scalar::Scalar;

/// `(upsampled deep part, native part)` channel counts of each concatenation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelBook {
    pub stage_a: (usize, usize),
    pub stage_b: (usize, usize),
    pub stage_c: (usize, usize),
}

impl ChannelBook {
    pub fn for_channels(shallow: usize, deep: usize) -> Self {
        Self {
            stage_a: (deep, shallow),
            stage_b: (2 * shallow, shallow),
            stage_c: (shallow, shallow),
        }
    }

    /// Reduced ratios, e.g. `[(6, 1), (2, 1), (1, 1)]`.
    pub fn ratios(&self) -> [(usize, usize); 3] {
        fn gcd(a: usize, b: usize) -> usize {
            if b == 0 {
                a
            } else {
                gcd(b, a % b)
            }
        }
        [self.stage_a, self.stage_b, self.stage_c].map(|(a, b)| {
            let d = gcd(a, b);
            (a / d, b / d)
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FusedPyramid {
    /// Deepest level, passed through.
    pub f3: TokenGrid,
    /// Stage A output at level-2 resolution.
    pub f2: TokenGrid,
    /// Stage C output at level-1 resolution.
    pub f1: TokenGrid,
    pub book: ChannelBook,
}

#[derive(Clone, Debug)]
pub struct FptParams {
    pub prefix: String,
    pub book: ChannelBook,
}

impl FptParams {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, prefix: String, shallow: usize, deep: usize) -> Self {
        let book = ChannelBook::for_channels(shallow, deep);
        let (a_in, b_in, c_in) = (deep + shallow, 3 * shallow, 2 * shallow);
        init.linear(store, &format!("{prefix}.stage_a"), a_in, 2 * shallow);
        init.norm(store, &format!("{prefix}.norm_a"), 2 * shallow);
        init.linear(store, &format!("{prefix}.stage_b"), b_in, shallow);
        init.norm(store, &format!("{prefix}.norm_b"), shallow);
        init.linear(store, &format!("{prefix}.lateral"), shallow, shallow);
        init.norm(store, &format!("{prefix}.norm_l"), shallow);
        init.linear(store, &format!("{prefix}.stage_c"), c_in, shallow);
        init.norm(store, &format!("{prefix}.norm_c"), shallow);
        Self { prefix, book }
    }
}

fn project<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: &TokenGrid,
    prefix: &str,
    stage: &str,
    normname: &str,
    eps: T,
) -> Result<TokenGrid> {
    let y = linear(g, store, x.tokens, &format!("{prefix}.{stage}"))?;
    let y = norm(g, store, y, &format!("{prefix}.{normname}"), eps)?;
    let y = g.gelu(y)?;
    TokenGrid::new(g, x.h, x.w, y)
}

fn concat<T: Scalar>(g: &mut Graph<T>, a: &TokenGrid, b: &TokenGrid) -> Result<TokenGrid> {
    let t = g.concat_cols(&[a.tokens, b.tokens])?;
    TokenGrid::new(g, a.h, a.w, t)
}

pub fn fpt_fuse<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    bundle: &PyramidBundle,
    p: &FptParams,
    eps: T,
) -> Result<FusedPyramid> {
    bundle.check_contract()?;
    let [l1, l2, l3] = bundle.levels();
    let book = p.book;
    if (l3.c, l2.c) != book.stage_a || l1.c != book.stage_c.1 {
        return Err(Error::Shape {
            op: "fpt_fuse",
            left: vec![l3.c, l2.c, l1.c],
            right: vec![book.stage_a.0, book.stage_a.1, book.stage_c.1],
        });
    }
    let pre = &p.prefix;

    let up3 = l3.resize(g, l2.h, l2.w)?;
    let cat_a = concat(g, &up3, &l2)?;
    let f2 = project(g, store, &cat_a, pre, "stage_a", "norm_a", eps)?;

    let up2 = f2.resize(g, l1.h, l1.w)?;
    let cat_b = concat(g, &up2, &l1)?;
    let b = project(g, store, &cat_b, pre, "stage_b", "norm_b", eps)?;

    let lateral = project(g, store, &l1, pre, "lateral", "norm_l", eps)?;
    let cat_c = concat(g, &b, &lateral)?;
    let f1 = project(g, store, &cat_c, pre, "stage_c", "norm_c", eps)?;

    Ok(FusedPyramid { f3: l3, f2, f1, book })
}
