//! Two-stream patch encoder producing a three-level token pyramid per modality.
//!
//! Each level has its own patch embedding at stride 4, 8 or 16 followed by
//! `encoder_depth` pre-norm transformer blocks. The RGB and depth streams have
//! separate parameters under `enc.rgb.*` and `enc.depth.*`.

use crate::attention::{self_attention, AttentionParams};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Init, ParamStore, Tensor, Var};
use crate::scalar::Scalar;

/// Tokens on an `h×w` patch lattice, stored as `[h·w, c]` with patch `(i, j)`
/// at row `i·w + j`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub tokens: Var,
}

impl TokenGrid {
    pub fn new<T: Scalar>(g: &Graph<T>, h: usize, w: usize, tokens: Var) -> Result<Self> {
        let s = g.shape(tokens);
        if s.len() != 2 || s[0] != h * w {
            return Err(Error::Shape {
                op: "token_grid",
                left: vec![h, w],
                right: s.to_vec(),
            });
        }
        Ok(Self { h, w, c: s[1], tokens })
    }

    pub fn n(&self) -> usize {
        self.h * self.w
    }

    /// Same tokens viewed as an `h×w×c` grid.
    pub fn lattice<T: Scalar>(&self, g: &mut Graph<T>) -> Result<Var> {
        g.reshape(self.tokens, &[self.h, self.w, self.c])
    }

    pub fn from_lattice<T: Scalar>(g: &mut Graph<T>, grid: Var) -> Result<Self> {
        let s = g.shape(grid).to_vec();
        if s.len() != 3 {
            return Err(Error::Shape {
                op: "token_grid",
                left: vec![3],
                right: s,
            });
        }
        let tokens = g.reshape(grid, &[s[0] * s[1], s[2]])?;
        Ok(Self {
            h: s[0],
            w: s[1],
            c: s[2],
            tokens,
        })
    }

    /// Bilinear resize on the lattice.
    pub fn resize<T: Scalar>(&self, g: &mut Graph<T>, h: usize, w: usize) -> Result<Self> {
        if (h, w) == (self.h, self.w) {
            return Ok(*self);
        }
        let lat = self.lattice(g)?;
        let up = g.bilinear_resize(lat, h, w)?;
        Self::from_lattice(g, up)
    }

    pub fn with_tokens(&self, tokens: Var) -> Self {
        Self { tokens, ..*self }
    }

    pub fn same_extent(&self, other: &Self) -> bool {
        (self.h, self.w, self.c) == (other.h, other.w, other.c)
    }
}

/// Three pyramid levels of one modality, at strides 4, 8 and 16.
#[derive(Clone, Copy, Debug)]
pub struct PyramidBundle {
    pub level1: TokenGrid,
    pub level2: TokenGrid,
    pub level3: TokenGrid,
}

impl PyramidBundle {
    pub fn levels(&self) -> [TokenGrid; 3] {
        [self.level1, self.level2, self.level3]
    }

    /// Checks that extents halve exactly from one level to the next.
    pub fn check_contract(&self) -> Result<()> {
        let [a, b, c] = self.levels();
        if a.h != 2 * b.h || a.w != 2 * b.w || b.h != 2 * c.h || b.w != 2 * c.w || a.c != b.c {
            return Err(Error::Shape {
                op: "pyramid_bundle",
                left: vec![a.h, a.w, a.c, b.h, b.w, b.c],
                right: vec![c.h, c.w, c.c],
            });
        }
        Ok(())
    }
}

/// Names of one patch-embedding layer.
#[derive(Clone, Debug)]
pub struct PatchEmbedParams {
    pub prefix: String,
    pub patch: usize,
    pub in_ch: usize,
    pub c: usize,
    pub lattice: (usize, usize),
}

impl PatchEmbedParams {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        prefix: String,
        patch: usize,
        in_ch: usize,
        c: usize,
        lattice: (usize, usize),
    ) -> Self {
        let fan_in = patch * patch * in_ch;
        init.linear(store, &format!("{prefix}.proj"), fan_in, c);
        init.normal(store, format!("{prefix}.pos"), &[lattice.0 * lattice.1, c], 0.02);
        Self {
            prefix,
            patch,
            in_ch,
            c,
            lattice,
        }
    }

    pub fn names(prefix: &str) -> [String; 3] {
        [
            format!("{prefix}.proj.w"),
            format!("{prefix}.proj.b"),
            format!("{prefix}.pos"),
        ]
    }
}

/// Rearranges `image[H×W×ch]` into `[n_patches, patch·patch·ch]`, each row a
/// patch flattened in `(py, px, ch)` order.
pub fn patchify<T: Scalar>(image: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 || patch == 0 || !s[0].is_multiple_of(patch) || !s[1].is_multiple_of(patch) {
        return Err(Error::InvalidArgument {
            op: "patch_embed",
            msg: format!("image shape {s:?} not divisible into {patch}×{patch} patches"),
        });
    }
    let (h, w, ch) = (s[0], s[1], s[2]);
    let (ph, pw) = (h / patch, w / patch);
    let row = patch * patch * ch;
    let src = image.data();
    let mut out = Vec::with_capacity(ph * pw * row);
    for i in 0..ph {
        for j in 0..pw {
            for py in 0..patch {
                let y = i * patch + py;
                let start = (y * w + j * patch) * ch;
                out.extend_from_slice(&src[start..start + patch * ch]);
            }
        }
    }
    Tensor::new(&[ph * pw, row], out)
}

/// Flattens each patch, projects it to `c` channels and adds the learned
/// positional term of its lattice position.
pub fn patch_embed<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    image: &Tensor<T>,
    p: &PatchEmbedParams,
) -> Result<TokenGrid> {
    let s = image.shape();
    if s.len() != 3 || s[2] != p.in_ch {
        return Err(Error::Shape {
            op: "patch_embed",
            left: s.to_vec(),
            right: vec![p.patch, p.patch, p.in_ch],
        });
    }
    let patches = patchify(image, p.patch)?;
    let lattice = (s[0] / p.patch, s[1] / p.patch);
    if lattice != p.lattice {
        return Err(Error::Shape {
            op: "patch_embed",
            left: vec![lattice.0, lattice.1],
            right: vec![p.lattice.0, p.lattice.1],
        });
    }
    let [w, b, pos] = PatchEmbedParams::names(&p.prefix);
    let x = g.constant(patches)?;
    let w = g.param(store, &w)?;
    let b = g.param(store, &b)?;
    let pos = g.param(store, &pos)?;
    let proj = g.linear(x, w, b)?;
    let tokens = g.add(proj, pos)?;
    TokenGrid::new(g, lattice.0, lattice.1, tokens)
}

/// Names of one pre-norm transformer block.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub prefix: String,
    pub c: usize,
    pub hidden: usize,
    pub attn: AttentionParams,
}

impl BlockParams {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        prefix: String,
        c: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Self {
        let hidden = c * mlp_ratio;
        init.norm(store, &format!("{prefix}.norm1"), c);
        let attn = AttentionParams::init(store, init, format!("{prefix}.attn"), c, heads);
        init.norm(store, &format!("{prefix}.norm2"), c);
        init.linear(store, &format!("{prefix}.mlp1"), c, hidden);
        init.linear(store, &format!("{prefix}.mlp2"), hidden, c);
        Self {
            prefix,
            c,
            hidden,
            attn,
        }
    }
}

pub(crate) fn norm<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: Var,
    prefix: &str,
    eps: T,
) -> Result<Var> {
    let gamma = g.param(store, &format!("{prefix}.g"))?;
    let beta = g.param(store, &format!("{prefix}.b"))?;
    g.layer_norm(x, gamma, beta, eps)
}

pub(crate) fn linear<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, x: Var, prefix: &str) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.w"))?;
    let b = g.param(store, &format!("{prefix}.b"))?;
    g.linear(x, w, b)
}

/// `x + attn(ln(x))`, then `+ mlp(ln(·))` with a GELU hidden layer.
pub fn transformer_block<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: &TokenGrid,
    p: &BlockParams,
    eps: T,
) -> Result<TokenGrid> {
    if x.c != p.c {
        return Err(Error::Shape {
            op: "transformer_block",
            left: vec![x.n(), x.c],
            right: vec![p.c],
        });
    }
    let n1 = norm(g, store, x.tokens, &format!("{}.norm1", p.prefix), eps)?;
    let attended = self_attention(g, store, &x.with_tokens(n1), &p.attn, None)?;
    let x1 = g.add(x.tokens, attended.tokens)?;
    let n2 = norm(g, store, x1, &format!("{}.norm2", p.prefix), eps)?;
    let h = linear(g, store, n2, &format!("{}.mlp1", p.prefix))?;
    let h = g.gelu(h)?;
    let m = linear(g, store, h, &format!("{}.mlp2", p.prefix))?;
    let out = g.add(x1, m)?;
    Ok(x.with_tokens(out))
}

#[derive(Clone, Debug)]
pub struct LevelParams {
    pub embed: PatchEmbedParams,
    pub blocks: Vec<BlockParams>,
}

/// One modality's three levels.
#[derive(Clone, Debug)]
pub struct StreamParams {
    pub levels: [LevelParams; 3],
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub rgb: StreamParams,
    pub depth: StreamParams,
}

pub const STRIDES: [usize; 3] = [4, 8, 16];

impl EncoderParams {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, cfg: &ModelConfig) -> Self {
        let mut stream = |name: &str, in_ch: usize| {
            let levels = std::array::from_fn(|i| {
                let (side, c) = cfg.levels()[i];
                let prefix = format!("enc.{name}.l{}", i + 1);
                let embed =
                    PatchEmbedParams::init(store, init, format!("{prefix}.embed"), STRIDES[i], in_ch, c, (side, side));
                let blocks = (0..cfg.encoder_depth)
                    .map(|b| BlockParams::init(store, init, format!("{prefix}.block{b}"), c, cfg.heads, cfg.mlp_ratio))
                    .collect();
                LevelParams { embed, blocks }
            });
            StreamParams { levels }
        };
        let rgb = stream("rgb", 3);
        let depth = stream("depth", cfg.depth_channels);
        Self { rgb, depth }
    }
}

fn stream_forward<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    image: &Tensor<T>,
    p: &StreamParams,
    eps: T,
) -> Result<PyramidBundle> {
    let mut out = Vec::with_capacity(3);
    for level in &p.levels {
        let mut x = patch_embed(g, store, image, &level.embed)?;
        for block in &level.blocks {
            x = transformer_block(g, store, &x, block, eps)?;
        }
        out.push(x);
    }
    let bundle = PyramidBundle {
        level1: out[0],
        level2: out[1],
        level3: out[2],
    };
    bundle.check_contract()?;
    Ok(bundle)
}

/// Encodes an RGB image `[H×W×3]` and a depth map `[H×W×depth_channels]`
/// into one pyramid per modality.
pub fn encoder_forward<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    rgb: &Tensor<T>,
    depth: &Tensor<T>,
    p: &EncoderParams,
    cfg: &ModelConfig,
) -> Result<(PyramidBundle, PyramidBundle)> {
    let (sr, sd) = (rgb.shape(), depth.shape());
    if sr.len() != 3 || sd.len() != 3 || sr[..2] != sd[..2] {
        return Err(Error::Shape {
            op: "encoder_forward",
            left: sr.to_vec(),
            right: sd.to_vec(),
        });
    }
    let eps = T::lit(cfg.ln_eps);
    let r = stream_forward(g, store, rgb, &p.rgb, eps)?;
    let d = stream_forward(g, store, depth, &p.depth, eps)?;
    Ok((r, d))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_and_embed(patch: usize, in_ch: usize, c: usize, side: usize) -> (ParamStore<f64>, PatchEmbedParams) {
        let mut store = ParamStore::new();
        let mut init = Init::new(1);
        let lat = side / patch;
        let p = PatchEmbedParams::init(&mut store, &mut init, "pe".into(), patch, in_ch, c, (lat, lat));
        (store, p)
    }

    #[test]
    fn patch_embed_extents() {
        let (store, p) = store_and_embed(4, 3, 5, 8);
        let mut g = Graph::new();
        let img = Tensor::from_fn(&[8, 8, 3], |i| (i % 7) as f64 / 7.0);
        let grid = patch_embed(&mut g, &store, &img, &p).unwrap();
        assert_eq!((grid.h, grid.w, grid.c, grid.n()), (2, 2, 5, 4));
        assert!(patch_embed(&mut g, &store, &Tensor::zeros(&[9, 8, 3]), &p).is_err());
    }

    #[test]
    fn zero_image_gives_positional_terms() {
        let (store, p) = store_and_embed(4, 3, 5, 8);
        let mut g = Graph::new();
        let grid = patch_embed(&mut g, &store, &Tensor::zeros(&[8, 8, 3]), &p).unwrap();
        assert_eq!(g.value(grid.tokens), store.get("pe.pos").unwrap());
    }

    #[test]
    fn constant_image_gives_identical_tokens_before_positions() {
        let (mut store, p) = store_and_embed(4, 3, 5, 8);
        store.insert("pe.pos", Tensor::zeros(&[4, 5]));
        let mut g = Graph::new();
        let grid = patch_embed(&mut g, &store, &Tensor::full(&[8, 8, 3], 0.3), &p).unwrap();
        let v = g.value(grid.tokens).data();
        for t in 1..4 {
            assert_eq!(&v[t * 5..(t + 1) * 5], &v[..5]);
        }
    }

    #[test]
    fn patchify_order() {
        let img = Tensor::<f64>::from_fn(&[4, 4, 1], |i| i as f64);
        let p = patchify(&img, 2).unwrap();
        assert_eq!(&p.data()[..4], &[0., 1., 4., 5.]);
        assert_eq!(&p.data()[4..8], &[2., 3., 6., 7.]);
    }

    #[test]
    fn block_with_zero_output_projections_is_identity() {
        let mut store = ParamStore::new();
        let mut init = Init::new(3);
        let p = BlockParams::init(&mut store, &mut init, "blk".into(), 16, 2, 2);
        store.insert("blk.attn.wo", Tensor::zeros(&[16, 16]));
        store.insert("blk.mlp2.w", Tensor::zeros(&[32, 16]));
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[16, 16], |i| ((i * 37) % 11) as f64 * 0.1 - 0.5)).unwrap();
        let grid = TokenGrid::new(&g, 4, 4, x).unwrap();
        let y = transformer_block(&mut g, &store, &grid, &p, 1e-5).unwrap();
        assert_eq!((y.h, y.w, y.c), (4, 4, 16));
        assert_eq!(g.value(y.tokens), g.value(x));
    }
}
