//! `trun infer`: segment images from disk, optionally with a decoder-stage
//! heatmap per image. Per-file failures are reported and skipped; the
//! command exits 4 when any file failed.

use std::path::{Path, PathBuf};

use trun_core::blocks::{Forward, ModelPlan};
use trun_core::data::checkpoint::load_checkpoint;
use trun_core::data::{netpbm, resize};
use trun_core::error::{Error, Result};
use trun_core::metrics::{activation_heatmap, binarize};
use trun_core::tape::{Mode, Tape};
use trun_core::tensor::{Scalar, Tensor};
use trun_core::train::BINARIZE_THRESHOLD;

use crate::runconfig::RunConfig;

use super::{checkpoint_model, write_config_copy};

pub fn run(
    cfg: &RunConfig,
    checkpoint: &Path,
    images: &[PathBuf],
    heatmap: bool,
) -> Result<usize> {
    if images.is_empty() {
        return Err(Error::Config("infer needs at least one image path".into()));
    }
    match cfg.precision {
        64 => run_typed::<f64>(cfg, checkpoint, images, heatmap),
        _ => run_typed::<f32>(cfg, checkpoint, images, heatmap),
    }
}

fn run_typed<T: Scalar>(
    cfg: &RunConfig,
    checkpoint: &Path,
    images: &[PathBuf],
    heatmap: bool,
) -> Result<usize> {
    let model_cfg = checkpoint_model(cfg, checkpoint)?;
    let plan = ModelPlan::new(&model_cfg)?;
    let (store, _) = load_checkpoint::<T>(checkpoint)?;
    write_config_copy(cfg, &cfg.out_dir)?;

    let mut failures = 0usize;
    for path in images {
        match infer_one::<T>(cfg, &plan, &store, path, heatmap) {
            Ok(written) => {
                for w in written {
                    println!("{} -> {}", path.display(), w.display());
                }
            }
            Err(e) => {
                eprintln!("error: infer: {}: {e}", path.display());
                failures += 1;
            }
        }
    }
    Ok(failures)
}

fn infer_one<T: Scalar>(
    cfg: &RunConfig,
    plan: &ModelPlan,
    store: &trun_core::ParameterStore<T>,
    path: &Path,
    heatmap: bool,
) -> Result<Vec<PathBuf>> {
    let size = plan.config().input_size;
    let image = netpbm::read_ppm(path)?;
    let image = resize::resize_bilinear(&image, size, size)?;
    let input: Tensor<T> = image
        .reshaped(vec![1, 3, size, size])?
        .cast();

    let mut local = store.clone();
    let mut tape = Tape::new();
    let img = tape.leaf(input);
    let mut fwd = Forward::new(&mut tape, &mut local, Mode::Eval);
    let (out, taps) = plan.forward_with_taps(&mut fwd, img)?;
    drop(fwd);

    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    let mut written = Vec::new();

    let pred: Tensor<f32> = tape.value(out).cast();
    let mask = binarize(&pred.reshaped(vec![1, size, size])?, BINARIZE_THRESHOLD)?;
    let mask_path = cfg.out_dir.join(format!("{stem}_mask.pgm"));
    netpbm::write_pgm(&mask, &mask_path)?;
    written.push(mask_path);

    if heatmap {
        // last decoder stage = the features right before the head
        let features: Tensor<f32> = tape.value(taps.decoder[3]).cast();
        let shape = features.shape().to_vec();
        let fmap = features.reshaped(vec![shape[1], shape[2], shape[3]])?;
        let hm = activation_heatmap(&fmap, size)?;
        let hm_path = cfg.out_dir.join(format!("{stem}_heatmap.ppm"));
        netpbm::write_ppm(&hm, &hm_path)?;
        written.push(hm_path);
    }
    Ok(written)
}
