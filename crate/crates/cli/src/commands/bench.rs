//! `trun bench`: single-image forward-pass throughput.

use std::path::Path;

use trun_core::blocks::{run_model, ModelPlan};
use trun_core::data::checkpoint::load_checkpoint;
use trun_core::error::Result;
use trun_core::metrics::fps_benchmark;
use trun_core::rng::SeededRng;
use trun_core::tape::Mode;
use trun_core::tensor::{Scalar, Tensor};

use crate::runconfig::RunConfig;

use super::{checkpoint_model, method_label};

pub fn run(cfg: &RunConfig, checkpoint: Option<&Path>, warmup: usize, frames: usize) -> Result<()> {
    match cfg.precision {
        64 => run_typed::<f64>(cfg, checkpoint, warmup, frames),
        _ => run_typed::<f32>(cfg, checkpoint, warmup, frames),
    }
}

fn run_typed<T: Scalar>(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    warmup: usize,
    frames: usize,
) -> Result<()> {
    // checkpoints carry their geometry; without one, bench random weights
    let (plan, mut store) = match checkpoint {
        Some(path) => {
            let model_cfg = checkpoint_model(cfg, path)?;
            let plan = ModelPlan::new(&model_cfg)?;
            let (store, _) = load_checkpoint::<T>(path)?;
            (plan, store)
        }
        None => {
            let plan = ModelPlan::new(&cfg.model)?;
            let store = plan.init_params::<T>(cfg.train.seed)?;
            (plan, store)
        }
    };
    let size = plan.config().input_size;
    let mut rng = SeededRng::new(cfg.train.seed);
    let image = Tensor::<T>::from_fn(vec![1, 3, size, size], |_| T::from_f64(rng.uniform()));

    let report = fps_benchmark(
        || run_model(&plan, &mut store, &image, Mode::Eval).map(|_| ()),
        warmup,
        frames,
    )?;

    println!(
        "method: {} ({} parameters, input {size}x{size}, batch 1)",
        method_label(plan.config()),
        plan.param_count()
    );
    println!("fps: {:.4}", report.fps);
    let lat: Vec<String> = report
        .latencies
        .iter()
        .map(|l| format!("{:.6}", l))
        .collect();
    println!("latency_s: {}", lat.join(","));
    println!("warmup: {} frames: {}", report.warmup, report.frames);
    if report.timer_warning {
        println!("warning: per-frame latency near timer resolution");
    }
    Ok(())
}
