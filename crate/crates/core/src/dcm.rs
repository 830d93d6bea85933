//! Disentangled complementing modules and the decoder chain.
//!
//! A module maps both modalities into a shared space, splits the pair into a
//! consistent part `conv(mA⊙mB + mA)` and a complementary part `conv(|mA − mB|)`,
//! gates both by the previous saliency probability, and fuses them:
//!
//! ```text
//! cons'  = conv(cons ⊙ P_prev)
//! comp'  = conv(comp ⊙ P_prev)
//! fused  = conv(cons' + comp')
//! P_i    = head(fused)            (logits)
//! ```
//!
//! Four modules run at lattices {level3, level2, level1, level1}; the first
//! one is ungated (`P_0 ≡ 1`).

use crate::config::ModelConfig;
use crate::encoder::{linear, TokenGrid};
use crate::error::{Error, Result};
use crate::fpt::FusedPyramid;
use crate::numerics::{Graph, Init, ParamStore, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapKind {
    Logit,
    Probability,
}

/// Single-channel map `values: [h, w]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SaliencyMap {
    pub h: usize,
    pub w: usize,
    pub values: Var,
    pub kind: MapKind,
}

impl SaliencyMap {
    /// Logits to probabilities; the only sanctioned kind conversion.
    pub fn sigmoid<T: Scalar>(&self, g: &mut Graph<T>) -> Result<Self> {
        if self.kind != MapKind::Logit {
            return Err(Error::InvalidArgument {
                op: "saliency_sigmoid",
                msg: "map is already a probability".into(),
            });
        }
        Ok(Self {
            values: g.sigmoid(self.values)?,
            kind: MapKind::Probability,
            ..*self
        })
    }

    pub fn resize<T: Scalar>(&self, g: &mut Graph<T>, h: usize, w: usize) -> Result<Self> {
        if (h, w) == (self.h, self.w) {
            return Ok(*self);
        }
        let lat = g.reshape(self.values, &[self.h, self.w, 1])?;
        let up = g.bilinear_resize(lat, h, w)?;
        Ok(Self {
            h,
            w,
            values: g.reshape(up, &[h, w])?,
            kind: self.kind,
        })
    }

    /// Constant probability map, e.g. the all-ones gate of the first module.
    pub fn constant_probability<T: Scalar>(g: &mut Graph<T>, h: usize, w: usize, value: T) -> Result<Self> {
        Ok(Self {
            h,
            w,
            values: g.constant(Tensor::full(&[h, w], value))?,
            kind: MapKind::Probability,
        })
    }
}

/// Names of one complementing module.
#[derive(Clone, Debug)]
pub struct DcmLevelParams {
    pub prefix: String,
    pub c_in: usize,
    pub c_map: usize,
}

pub const DCM_CONVS: [&str; 5] = ["cons", "comp", "cons_gate", "comp_gate", "fuse"];

impl DcmLevelParams {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, prefix: String, c_in: usize, c_map: usize) -> Self {
        init.linear(store, &format!("{prefix}.map_a"), c_in, c_map);
        init.linear(store, &format!("{prefix}.map_b"), c_in, c_map);
        for conv in DCM_CONVS {
            init.conv(store, &format!("{prefix}.{conv}"), 3, c_map, c_map);
        }
        init.linear(store, &format!("{prefix}.head"), c_map, 1);
        Self { prefix, c_in, c_map }
    }
}

/// Intermediate tensors of one module, kept for inspection.
#[derive(Clone, Copy, Debug)]
pub struct DcmTrace {
    pub mapped_a: Var,
    pub mapped_b: Var,
    /// `|mA − mB|` before its convolution.
    pub complement_pre: Var,
    /// `cons ⊙ P_prev` and `comp ⊙ P_prev`, the gated convolution inputs.
    pub gated_consistent: Var,
    pub gated_complement: Var,
    pub consistent: Var,
    pub complement: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct DcmOutput {
    pub fused: TokenGrid,
    /// Logits on the module's lattice.
    pub logits: SaliencyMap,
    pub trace: DcmTrace,
}

fn conv<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, x: &TokenGrid, prefix: &str) -> Result<TokenGrid> {
    let w = g.param(store, &format!("{prefix}.w"))?;
    let b = g.param(store, &format!("{prefix}.b"))?;
    let lat = x.lattice(g)?;
    let y = g.conv2d(lat, w, b)?;
    TokenGrid::from_lattice(g, y)
}

pub fn dcm_step<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    f_a: &TokenGrid,
    f_b: &TokenGrid,
    p_prev: &SaliencyMap,
    p: &DcmLevelParams,
) -> Result<DcmOutput> {
    if !f_a.same_extent(f_b) || f_a.c != p.c_in {
        return Err(Error::Shape {
            op: "dcm_step",
            left: vec![f_a.h, f_a.w, f_a.c],
            right: vec![f_b.h, f_b.w, f_b.c],
        });
    }
    if p_prev.kind != MapKind::Probability {
        return Err(Error::InvalidArgument {
            op: "dcm_step",
            msg: "gate must be a probability map".into(),
        });
    }
    let gate = p_prev.resize(g, f_a.h, f_a.w)?;
    let pre = &p.prefix;

    let ma = linear(g, store, f_a.tokens, &format!("{pre}.map_a"))?;
    let mb = linear(g, store, f_b.tokens, &format!("{pre}.map_b"))?;
    let grid = |tokens| f_a.with_tokens(tokens).with_channels(p.c_map);

    let prod = g.mul(ma, mb)?;
    let cons_in = g.add(prod, ma)?;
    let cons = conv(g, store, &grid(cons_in), &format!("{pre}.cons"))?;

    let diff = g.sub(ma, mb)?;
    let comp_in = g.abs(diff)?;
    let comp = conv(g, store, &grid(comp_in), &format!("{pre}.comp"))?;

    let cons_gated = g.row_scale(cons.tokens, gate.values)?;
    let comp_gated = g.row_scale(comp.tokens, gate.values)?;
    let cons2 = conv(g, store, &grid(cons_gated), &format!("{pre}.cons_gate"))?;
    let comp2 = conv(g, store, &grid(comp_gated), &format!("{pre}.comp_gate"))?;

    let sum = g.add(cons2.tokens, comp2.tokens)?;
    let fused = conv(g, store, &grid(sum), &format!("{pre}.fuse"))?;

    let logits = linear(g, store, fused.tokens, &format!("{pre}.head"))?;
    let logits = g.reshape(logits, &[f_a.h, f_a.w])?;
    Ok(DcmOutput {
        fused,
        logits: SaliencyMap {
            h: f_a.h,
            w: f_a.w,
            values: logits,
            kind: MapKind::Logit,
        },
        trace: DcmTrace {
            mapped_a: ma,
            mapped_b: mb,
            complement_pre: comp_in,
            gated_consistent: cons_gated,
            gated_complement: comp_gated,
            consistent: cons.tokens,
            complement: comp.tokens,
        },
    })
}

impl TokenGrid {
    fn with_channels(self, c: usize) -> Self {
        Self { c, ..self }
    }
}

/// Decoder parameters: four modules plus hand-off projections that lift the
/// previous fused features to each pyramid level's width.
#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub levels: [DcmLevelParams; 4],
}

impl DecoderParams {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, cfg: &ModelConfig) -> Self {
        let cm = cfg.dcm_channels;
        let widths = [cfg.deep_channels, 2 * cfg.shallow_channels, cfg.shallow_channels, cfg.shallow_channels];
        let levels = std::array::from_fn(|i| {
            let prefix = format!("dec.dcm{}", i + 1);
            if i > 0 {
                init.linear(store, &format!("{prefix}.hand_a"), cm, widths[i]);
                init.linear(store, &format!("{prefix}.hand_b"), cm, widths[i]);
            }
            DcmLevelParams::init(store, init, prefix, widths[i], cm)
        });
        Self { levels }
    }
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    /// `P_1..P_4` logits resized to the output extents.
    pub preds: [SaliencyMap; 4],
    /// `sigmoid(P_4)` on its lattice, bilinearly resized to output extents.
    pub final_map: SaliencyMap,
    pub steps: Vec<DcmOutput>,
}

pub fn decoder_forward<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    pyr_r: &FusedPyramid,
    pyr_d: &FusedPyramid,
    p: &DecoderParams,
    out: (usize, usize),
) -> Result<DecoderOutput> {
    let pairs = [
        (pyr_r.f3, pyr_d.f3),
        (pyr_r.f2, pyr_d.f2),
        (pyr_r.f1, pyr_d.f1),
        (pyr_r.f1, pyr_d.f1),
    ];
    for (a, b) in &pairs {
        if !a.same_extent(b) {
            return Err(Error::Shape {
                op: "decoder_forward",
                left: vec![a.h, a.w, a.c],
                right: vec![b.h, b.w, b.c],
            });
        }
    }
    let (h3, w3) = (pyr_r.f3.h, pyr_r.f3.w);
    let mut gate = SaliencyMap::constant_probability(g, h3, w3, T::one())?;
    let mut prev: Option<TokenGrid> = None;
    let mut steps = Vec::with_capacity(4);
    for (i, ((fa, fb), params)) in pairs.iter().zip(&p.levels).enumerate() {
        let (fa, fb) = match prev {
            None => (*fa, *fb),
            Some(fused) => {
                let up = fused.resize(g, fa.h, fa.w)?;
                let pre = &params.prefix;
                let ha = linear(g, store, up.tokens, &format!("{pre}.hand_a"))?;
                let hb = linear(g, store, up.tokens, &format!("{pre}.hand_b"))?;
                let a = g.add(fa.tokens, ha)?;
                let b = g.add(fb.tokens, hb)?;
                (fa.with_tokens(a), fb.with_tokens(b))
            }
        };
        let step = dcm_step(g, store, &fa, &fb, &gate, params)?;
        if i + 1 < p.levels.len() {
            gate = step.logits.sigmoid(g)?;
        }
        prev = Some(step.fused);
        steps.push(step);
    }
    let mut preds = Vec::with_capacity(4);
    for s in &steps {
        preds.push(s.logits.resize(g, out.0, out.1)?);
    }
    let preds: [SaliencyMap; 4] = preds.try_into().expect("four modules");
    let final_map = steps[3].logits.sigmoid(g)?.resize(g, out.0, out.1)?;
    Ok(DecoderOutput {
        preds,
        final_map,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(c: usize) -> (ParamStore<f64>, DcmLevelParams) {
        let mut store = ParamStore::new();
        let mut init = Init::new(11);
        let p = DcmLevelParams::init(&mut store, &mut init, "dcm".into(), c, 4);
        (store, p)
    }

    fn grid(g: &mut Graph<f64>, h: usize, w: usize, c: usize, seed: usize) -> TokenGrid {
        let t = Tensor::from_fn(&[h * w, c], |i| (((i + seed) * 2654435761) % 97) as f64 / 48.0 - 1.0);
        let v = g.constant(t).unwrap();
        TokenGrid::new(g, h, w, v).unwrap()
    }

    #[test]
    fn equal_mapped_inputs_give_zero_complement() {
        let (mut store, p) = setup(3);
        store.copy_prefix("dcm.map_a", "dcm.map_b").unwrap();
        let mut g = Graph::new();
        let f = grid(&mut g, 3, 3, 3, 0);
        let gate = SaliencyMap::constant_probability(&mut g, 3, 3, 1.0).unwrap();
        let out = dcm_step(&mut g, &store, &f, &f, &gate, &p).unwrap();
        assert!(g.value(out.trace.complement_pre).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_gate_is_identity() {
        let (store, p) = setup(3);
        let mut g = Graph::new();
        let a = grid(&mut g, 3, 2, 3, 1);
        let b = grid(&mut g, 3, 2, 3, 2);
        let gate = SaliencyMap::constant_probability(&mut g, 3, 2, 1.0).unwrap();
        let out = dcm_step(&mut g, &store, &a, &b, &gate, &p).unwrap();
        assert_eq!(g.value(out.trace.gated_consistent), g.value(out.trace.consistent));
        assert_eq!(g.value(out.trace.gated_complement), g.value(out.trace.complement));
    }

    #[test]
    fn logit_gate_rejected() {
        let (store, p) = setup(3);
        let mut g = Graph::new();
        let a = grid(&mut g, 2, 2, 3, 1);
        let mut gate = SaliencyMap::constant_probability(&mut g, 2, 2, 1.0).unwrap();
        gate.kind = MapKind::Logit;
        assert!(dcm_step(&mut g, &store, &a, &a, &gate, &p).is_err());
        let b = grid(&mut g, 2, 2, 2, 1);
        gate.kind = MapKind::Probability;
        assert!(dcm_step(&mut g, &store, &a, &b, &gate, &p).is_err());
    }

    #[test]
    fn zero_gate_silences_gated_convolutions() {
        let (store, p) = setup(3);
        let mut fused = Vec::new();
        for seed in [1, 5] {
            let mut g = Graph::new();
            let a = grid(&mut g, 3, 3, 3, seed);
            let b = grid(&mut g, 3, 3, 3, seed + 1);
            let gate = SaliencyMap::constant_probability(&mut g, 3, 3, 0.0).unwrap();
            let out = dcm_step(&mut g, &store, &a, &b, &gate, &p).unwrap();
            assert!(g.value(out.trace.gated_consistent).data().iter().all(|&v| v == 0.0));
            assert!(g.value(out.trace.gated_complement).data().iter().all(|&v| v == 0.0));
            assert!(g.value(out.trace.consistent).data().iter().any(|&v| v != 0.0));
            fused.push(g.value(out.fused.tokens).clone());
        }
        // with nothing passing the gate the output is bias propagation only
        assert_eq!(fused[0], fused[1]);
    }

    proptest::proptest! {
        #[test]
        fn constant_gate_scales_branches(c in 0.0f64..=1.0, seed in 0usize..50) {
            let (store, p) = setup(3);
            let mut g = Graph::new();
            let a = grid(&mut g, 2, 3, 3, seed);
            let b = grid(&mut g, 2, 3, 3, seed + 7);
            let gate = SaliencyMap::constant_probability(&mut g, 2, 3, c).unwrap();
            let out = dcm_step(&mut g, &store, &a, &b, &gate, &p).unwrap();
            let t = &out.trace;
            proptest::prop_assert_eq!(g.value(t.gated_consistent), &g.value(t.consistent).map(|v| v * c));
            proptest::prop_assert_eq!(g.value(t.gated_complement), &g.value(t.complement).map(|v| v * c));
        }
    }
}
