use std::fs;
use std::path::{Path, PathBuf};

use super::io::write_gray;
use super::synth::Sample;
use crate::error::Result;
use crate::model::HctModel;
use crate::numerics::{Graph, Tensor, Var};
use crate::scalar::Scalar;

/// Query patches whose attention rows are dumped: the top-left corner and
/// the lattice center.
pub fn query_patches(h: usize, w: usize) -> Vec<usize> {
    let center = (h / 2) * w + w / 2;
    if center == 0 {
        vec![0]
    } else {
        vec![0, center]
    }
}

/// Head-averaged attention row `q`, divided by its maximum so the strongest
/// key maps to white.
fn attention_row<T: Scalar>(g: &Graph<T>, maps: &[Var], q: usize, h: usize, w: usize) -> Result<Tensor<f64>> {
    let n = h * w;
    let mut row = vec![0.0; n];
    for &m in maps {
        let data = g.value(m).data();
        for (acc, v) in row.iter_mut().zip(&data[q * n..(q + 1) * n]) {
            *acc += v.to_f64_lossy();
        }
    }
    let peak = row.iter().copied().fold(0.0, f64::max);
    if peak > 0.0 {
        row.iter_mut().for_each(|v| *v /= peak);
    }
    Tensor::new(&[h, w], row)
}

/// Runs one forward pass and writes grayscale PGMs into `out_dir`:
///
/// * `{gsa,lca}_{r,d}_q{p}.pgm`: attention rows of the first cross-modal
///   block for query patch `p`, on the deepest lattice. `_r` maps take their
///   queries from RGB tokens, `_d` maps from depth tokens.
/// * `p1.pgm` … `p4.pgm`: decoder predictions after a sigmoid.
/// * `final.pgm`: the output saliency map.
pub fn dump_attention<T: Scalar>(model: &HctModel<T>, sample: &Sample, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let mut g = Graph::new();
    let f = model.forward(&mut g, &sample.rgb.cast(), &sample.depth.cast())?;
    let mut written = Vec::new();
    let mut emit = |name: String, t: &Tensor<f64>| -> Result<()> {
        let path = out_dir.join(name);
        write_gray(&path, t)?;
        written.push(path);
        Ok(())
    };

    let block = &f.hca[0];
    let (h, w) = (block.x_r.h, block.x_r.w);
    let stages = [
        ("gsa_r", &block.gsa.maps_rgb_query),
        ("gsa_d", &block.gsa.maps_depth_query),
        ("lca_r", &block.lca.maps_rgb_query),
        ("lca_d", &block.lca.maps_depth_query),
    ];
    for (stage, maps) in stages {
        for q in query_patches(h, w) {
            emit(format!("{stage}_q{q}.pgm"), &attention_row(&g, maps, q, h, w)?)?;
        }
    }
    for (i, p) in f.dcm_preds().iter().enumerate() {
        let prob = g.value(p.values).map(|v| T::one() / (T::one() + (-v).exp()));
        emit(format!("p{}.pgm", i + 1), &prob.cast())?;
    }
    emit("final.pgm".into(), &g.value(f.final_map().values).cast())?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::harness::{read_gray, synth_sample};

    #[test]
    fn every_stage_is_written() {
        let dir = tempfile::tempdir().unwrap();
        let model = HctModel::<f64>::new(ModelConfig::toy()).unwrap();
        let written = dump_attention(&model, &synth_sample(0, 0, 64), dir.path()).unwrap();
        // 4 stages × 2 query patches, 4 decoder maps, the final map
        assert_eq!(written.len(), 13);
        for stage in ["gsa_r", "gsa_d", "lca_r", "lca_d"] {
            assert!(dir.path().join(format!("{stage}_q0.pgm")).exists());
        }
        let fin = read_gray(&dir.path().join("final.pgm")).unwrap();
        assert_eq!(fin.shape(), &[64, 64]);
    }

    #[test]
    fn corner_lca_row_stays_inside_its_window() {
        let dir = tempfile::tempdir().unwrap();
        let model = HctModel::<f64>::new(ModelConfig::toy()).unwrap();
        dump_attention(&model, &synth_sample(1, 0, 64), dir.path()).unwrap();
        for stage in ["lca_r", "lca_d"] {
            let row = read_gray(&dir.path().join(format!("{stage}_q0.pgm"))).unwrap();
            assert_eq!(row.shape(), &[4, 4]);
            for (q, &v) in row.data().iter().enumerate() {
                let inside = q / 4 <= 1 && q % 4 <= 1;
                assert_eq!(v > 0.0, inside, "{stage} key {q}: {v}");
            }
        }
    }
}
