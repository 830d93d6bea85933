//! End-to-end drivers shared by the command line and the acceptance tests.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use super::checkpoint::save_checkpoint;
use super::io::{read_dataset, read_gray, read_index, read_mask, sample_paths};
use super::settings::RunConfig;
use super::synth::{synth_dataset, synth_sample, Sample};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, MetricReport};
use crate::model::HctModel;
use crate::numerics::{grad_check_refined, Coverage, GradCheckReport, Refine, Tensor};
use crate::train::{train_loop, SampleLoss, TrainHistory};

pub const CHECKPOINT_FILE: &str = "model.hct";
pub const LOSS_LOG_FILE: &str = "loss.log";
pub const CONFIG_FILE: &str = "config.txt";

/// `(id, prediction, groundtruth)`.
pub type Scored = (String, Tensor<f64>, Tensor<f64>);

/// Files written by [`train_run`].
#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub history: TrainHistory,
}

/// Training data: a dataset directory when given, else the synthetic set
/// described by `cfg.data` at the model's input size.
pub fn training_data(cfg: &RunConfig, data_dir: Option<&Path>) -> Result<Vec<Sample>> {
    let data = match data_dir {
        Some(dir) => read_dataset(dir)?,
        None => synth_dataset(cfg.data.seed, cfg.data.n, cfg.model.image_size)?,
    };
    let side = cfg.model.image_size;
    if let Some(bad) = data.iter().find(|s| s.side() != (side, side)) {
        return Err(Error::Dataset(format!(
            "sample {} is {:?}, model expects {side}×{side}",
            bad.id,
            bad.side()
        )));
    }
    Ok(data)
}

/// Trains a fresh model and writes the checkpoint, the loss log and the
/// effective config into `out_dir`.
pub fn train_run(cfg: &RunConfig, data_dir: Option<&Path>, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = training_data(cfg, data_dir)?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(CONFIG_FILE), cfg.to_text())?;
    let mut model = HctModel::<f64>::new(cfg.model.clone())?;
    let loss_log = out_dir.join(LOSS_LOG_FILE);
    let mut log = BufWriter::new(fs::File::create(&loss_log)?);
    let history = train_loop(&mut model, &data, &cfg.train, Some(&mut log))?;
    std::io::Write::flush(&mut log)?;
    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    save_checkpoint(&model, &checkpoint)?;
    Ok(TrainOutcome {
        checkpoint,
        loss_log,
        history,
    })
}

/// Evaluates `(id, pred, gt)` triples, spreading them over the available
/// cores. Output order follows input order.
pub fn evaluate_all(items: &[Scored]) -> Result<Vec<(String, MetricReport)>> {
    let workers = std::thread::available_parallelism().map_or(1, usize::from).min(items.len()).max(1);
    let chunk = items.len().div_ceil(workers).max(1);
    let parts: Vec<Result<Vec<(String, MetricReport)>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|(id, pred, gt)| {
                            let r = evaluate(pred, gt).map_err(|e| Error::Dataset(format!("{id}: {e}")))?;
                            Ok((id.clone(), r))
                        })
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut rows = Vec::with_capacity(items.len());
    for p in parts {
        rows.extend(p?);
    }
    Ok(rows)
}

/// Model predictions against the dataset's groundtruth.
pub fn predict_dataset(model: &HctModel<f64>, data: &[Sample]) -> Result<Vec<Scored>> {
    data.iter()
        .map(|s| Ok((s.id.clone(), model.predict(&s.rgb, &s.depth)?, s.gt.clone())))
        .collect()
}

pub fn pred_path(pred_dir: &Path, id: &str) -> PathBuf {
    pred_dir.join(format!("{id}.pgm"))
}

/// Saliency maps stored as `<pred_dir>/<id>.pgm` against the groundtruth of
/// the dataset at `data_dir`.
pub fn load_predictions(pred_dir: &Path, data_dir: &Path) -> Result<Vec<Scored>> {
    read_index(data_dir)?
        .into_iter()
        .map(|id| {
            let [_, _, gt] = sample_paths(data_dir, &id);
            let pred = read_gray(&pred_path(pred_dir, &id))?;
            let gt = read_mask(&gt)?;
            Ok((id, pred, gt))
        })
        .collect()
}

/// The toy model at `size`, with parameters and the checked sample both
/// drawn from `seed`.
pub fn gradcheck_config(seed: u64, size: usize) -> ModelConfig {
    ModelConfig {
        image_size: size,
        seed,
        ..ModelConfig::toy()
    }
}

/// Gradient check of the total training loss of the toy model on one
/// synthetic sample, over `per_tensor` sampled scalars of every parameter
/// (`None` checks every scalar).
pub fn toy_gradcheck(seed: u64, size: usize, per_tensor: Option<usize>) -> Result<GradCheckReport> {
    let cfg = gradcheck_config(seed, size);
    let model = HctModel::<f64>::new(cfg)?;
    let sample = synth_sample(seed, 0, size);
    let loss = SampleLoss {
        layout: &model.layout,
        cfg: &model.cfg,
        sample: &sample,
    };
    let coverage = per_tensor.map_or(Coverage::All, |k| Coverage::Sampled { per_tensor: k, seed });
    grad_check_refined(&loss, &model.params, 1e-6, coverage, Refine::default())
}
