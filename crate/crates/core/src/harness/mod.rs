//! Synthetic data, on-disk formats and experiment drivers.

mod checkpoint;
mod dump;
mod io;
mod report;
mod run;
mod settings;
mod synth;

pub use checkpoint::{decode, encode, load_checkpoint, load_checkpoint_as, save_checkpoint, MAGIC, VERSION};
pub use dump::{dump_attention, query_patches};
pub use io::{
    read_dataset, read_gray, read_index, read_mask, read_rgb, sample_paths, to_u8, write_dataset, write_gray,
    write_rgb, INDEX_FILE,
};
pub use report::{jsonl, table, write_reports};
pub use run::{
    evaluate_all, gradcheck_config, load_predictions, pred_path, predict_dataset, toy_gradcheck, train_run,
    training_data, Scored, TrainOutcome, CHECKPOINT_FILE, CONFIG_FILE, LOSS_LOG_FILE,
};
pub use settings::{DataSpec, RunConfig, KEYS};
pub use synth::{synth_dataset, synth_sample, Sample};
