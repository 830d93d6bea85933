//! Full network: two encoders, cross-modal attention at the deepest level,
//! one feature pyramid per modality, and the complementing decoder.

use crate::attention::{build_local_mask, hca_block, HcaOutput, HcaParams};
use crate::config::ModelConfig;
use crate::dcm::{decoder_forward, DecoderOutput, DecoderParams, SaliencyMap};
use crate::encoder::{encoder_forward, EncoderParams, PyramidBundle};
use crate::error::{Error, Result};
use crate::fpt::{fpt_fuse, FptParams, FusedPyramid};
use crate::numerics::{Graph, Init, ParamStore, Tensor};
use crate::scalar::Scalar;

/// Parameter layout; carries only names, so it is cheap to rebuild from a config.
#[derive(Clone, Debug)]
pub struct Layout {
    pub encoder: EncoderParams,
    pub hca: Vec<HcaParams>,
    pub fpt_r: FptParams,
    pub fpt_d: FptParams,
    pub decoder: DecoderParams,
}

impl Layout {
    fn init<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig) -> Self {
        let mut init = Init::new(cfg.seed);
        let encoder = EncoderParams::init(store, &mut init, cfg);
        let hca = (0..cfg.hca_blocks)
            .map(|i| HcaParams::init(store, &mut init, format!("hca{i}"), cfg.deep_channels, cfg.heads))
            .collect();
        let (cs, cd) = (cfg.shallow_channels, cfg.deep_channels);
        let fpt_r = FptParams::init(store, &mut init, "fpt.rgb".into(), cs, cd);
        let fpt_d = FptParams::init(store, &mut init, "fpt.depth".into(), cs, cd);
        let decoder = DecoderParams::init(store, &mut init, cfg);
        Self {
            encoder,
            hca,
            fpt_r,
            fpt_d,
            decoder,
        }
    }
}

pub struct HctModel<T> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
    pub layout: Layout,
}

/// Everything a forward pass produces that tests, losses and dumps look at.
#[derive(Clone, Debug)]
pub struct Forward {
    /// HCA head logits at input extents (from the last block).
    pub pred_r: SaliencyMap,
    pub pred_d: SaliencyMap,
    pub hca: Vec<HcaOutput>,
    pub bundles: (PyramidBundle, PyramidBundle),
    pub pyramids: (FusedPyramid, FusedPyramid),
    pub decoder: DecoderOutput,
}

impl Forward {
    /// `P_1..P_4` logits at input extents.
    pub fn dcm_preds(&self) -> [SaliencyMap; 4] {
        self.decoder.preds
    }

    pub fn final_map(&self) -> SaliencyMap {
        self.decoder.final_map
    }
}

impl<T: Scalar> HctModel<T> {
    /// Fresh parameters drawn from `cfg.seed`.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let layout = Layout::init(&mut params, &cfg);
        Ok(Self { cfg, params, layout })
    }

    /// Wraps an existing store after checking it has exactly the layout's
    /// names and shapes.
    pub fn with_params(cfg: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let reference = Self::new(cfg)?;
        for (name, t) in reference.params.iter() {
            let found = params.get(name).map_err(|_| Error::MissingParam(name.to_string()))?;
            if found.shape() != t.shape() {
                return Err(Error::ParamShapeMismatch {
                    name: name.to_string(),
                    found: found.shape().to_vec(),
                    expected: t.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = params.names().find(|n| !reference.params.contains(n)) {
            return Err(Error::UnknownParam(extra.to_string()));
        }
        Ok(Self {
            params,
            ..reference
        })
    }

    pub fn forward(&self, g: &mut Graph<T>, rgb: &Tensor<T>, depth: &Tensor<T>) -> Result<Forward> {
        forward_with(g, &self.params, &self.layout, &self.cfg, rgb, depth)
    }

    /// Final saliency map `[H, W]` in `[0, 1]`.
    pub fn predict(&self, rgb: &Tensor<T>, depth: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, rgb, depth)?;
        let m = f.final_map();
        g.value(m.values).clone().reshape(&[m.h, m.w])
    }
}

/// Forward pass against an explicit store, so gradient checks can perturb
/// parameters without rebuilding the model.
pub fn forward_with<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    layout: &Layout,
    cfg: &ModelConfig,
    rgb: &Tensor<T>,
    depth: &Tensor<T>,
) -> Result<Forward> {
    let side = cfg.image_size;
    for (img, ch) in [(rgb, 3), (depth, cfg.depth_channels)] {
        if img.shape() != [side, side, ch] {
            return Err(Error::Shape {
                op: "model_forward",
                left: img.shape().to_vec(),
                right: vec![side, side, ch],
            });
        }
    }
    let (mut br, mut bd) = encoder_forward(g, store, rgb, depth, &layout.encoder, cfg)?;
    let l3 = br.level3;
    let mask = build_local_mask::<T>(l3.h, l3.w, cfg.radius);
    let (mut x_r, mut x_d) = (br.level3, bd.level3);
    let mut hca = Vec::with_capacity(layout.hca.len());
    for p in &layout.hca {
        let out = hca_block(g, store, &x_r, &x_d, &mask, p, cfg, (side, side))?;
        x_r = out.x_r;
        x_d = out.x_d;
        hca.push(out);
    }
    let last = hca.last().ok_or_else(|| Error::Config("at least one HCA block required".into()))?;
    let (pred_r, pred_d) = (last.pred_r, last.pred_d);
    br.level3 = x_r;
    bd.level3 = x_d;

    let eps = T::lit(cfg.ln_eps);
    let pr = fpt_fuse(g, store, &br, &layout.fpt_r, eps)?;
    let pd = fpt_fuse(g, store, &bd, &layout.fpt_d, eps)?;
    let decoder = decoder_forward(g, store, &pr, &pd, &layout.decoder, (side, side))?;
    Ok(Forward {
        pred_r,
        pred_d,
        hca,
        bundles: (br, bd),
        pyramids: (pr, pd),
        decoder,
    })
}
