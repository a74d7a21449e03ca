//! `trun train`: run the recipe, write checkpoint + history + evaluation.

use trun_core::blocks::ModelPlan;
use trun_core::data::checkpoint::save_checkpoint;
use trun_core::error::{Error, Result};
use trun_core::metrics::{render_report, MethodRow, ReportFormat};
use trun_core::tensor::Scalar;
use trun_core::train::{evaluate, history_csv, train};

use crate::runconfig::RunConfig;

use super::{load_split, method_label, output_path, write_config_copy};

pub fn run(cfg: &RunConfig) -> Result<()> {
    match cfg.precision {
        64 => run_typed::<f64>(cfg),
        _ => run_typed::<f32>(cfg),
    }
}

fn run_typed<T: Scalar>(cfg: &RunConfig) -> Result<()> {
    let plan = ModelPlan::new(&cfg.model)?;
    write_config_copy(cfg, &cfg.out_dir)?;

    let (train_set, val_set, test_set) = load_split(cfg)?;
    println!(
        "data: {} train / {} val / {} test, input {}x{}",
        train_set.len(),
        val_set.len(),
        test_set.len(),
        cfg.model.input_size,
        cfg.model.input_size
    );

    let store = plan.init_params::<T>(cfg.train.seed)?;
    println!(
        "model: {} ({} trainable parameters)",
        method_label(&cfg.model),
        plan.param_count()
    );

    let outcome = train(&plan, store, &train_set, &val_set, &cfg.train)?;
    println!(
        "trained {} epochs, best epoch {} (val loss {:.6})",
        outcome.history.len(),
        outcome.best_epoch,
        outcome.best_val_loss
    );

    let ckpt_path = output_path(cfg, "checkpoint.trun");
    save_checkpoint(&outcome.params, &cfg.model, &ckpt_path)?;

    let history_path = output_path(cfg, "history.csv");
    std::fs::write(&history_path, history_csv(&outcome.history))
        .map_err(|e| Error::io(&history_path, e))?;

    // final evaluation on the held-out test partition (val when no test exists)
    let eval_set = if test_set.is_empty() { &val_set } else { &test_set };
    let eval = evaluate(&plan, &outcome.params, eval_set, cfg.train.batch_size)?;
    let row = MethodRow {
        method: method_label(&cfg.model),
        report: eval.report,
    };
    let table = render_report(&[row], ReportFormat::Csv);
    let eval_path = output_path(cfg, "eval.csv");
    std::fs::write(&eval_path, &table).map_err(|e| Error::io(&eval_path, e))?;

    println!(
        "wrote {}, {}, {}",
        ckpt_path.display(),
        history_path.display(),
        eval_path.display()
    );
    print!("{table}");
    Ok(())
}
