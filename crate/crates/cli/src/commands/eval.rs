//! `trun eval`: metrics table for a checkpoint over a dataset.

use std::path::Path;

use trun_core::blocks::ModelPlan;
use trun_core::data::checkpoint::{load_checkpoint, validate_store_names};
use trun_core::error::{Error, Result};
use trun_core::metrics::{confusion, render_report, MethodRow, MetricsReport, ReportFormat};
use trun_core::tensor::Scalar;
use trun_core::train::evaluate;

use crate::runconfig::RunConfig;

use super::{checkpoint_model, load_all, method_label, output_path, write_config_copy};

pub fn parse_format(s: &str) -> Result<ReportFormat> {
    match s {
        "csv" => Ok(ReportFormat::Csv),
        "markdown" | "md" => Ok(ReportFormat::Markdown),
        _ => Err(Error::Config(format!("unknown format '{s}' (csv|markdown)"))),
    }
}

pub fn run(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    format: ReportFormat,
    oracle: bool,
) -> Result<()> {
    if oracle {
        return run_oracle(cfg, format);
    }
    let checkpoint =
        checkpoint.ok_or_else(|| Error::Config("eval needs --checkpoint (or --oracle)".into()))?;
    match cfg.precision {
        64 => run_typed::<f64>(cfg, checkpoint, format),
        _ => run_typed::<f32>(cfg, checkpoint, format),
    }
}

fn run_typed<T: Scalar>(cfg: &RunConfig, checkpoint: &Path, format: ReportFormat) -> Result<()> {
    let model_cfg = checkpoint_model(cfg, checkpoint)?;
    let plan = ModelPlan::new(&model_cfg)?;
    let (store, _) = load_checkpoint::<T>(checkpoint)?;
    validate_store_names(&store, &plan.declared())?;

    let mut data_cfg = cfg.clone();
    data_cfg.model = model_cfg.clone();
    let data = load_all(&data_cfg)?;
    let eval = evaluate(&plan, &store, &data, cfg.train.batch_size)?;

    let rows = [MethodRow {
        method: method_label(&model_cfg),
        report: eval.report,
    }];
    print!("{}", render_report(&rows, format));
    if cfg.was_set("out.dir") {
        write_config_copy(cfg, &cfg.out_dir)?;
        let path = output_path(cfg, "eval.csv");
        std::fs::write(&path, render_report(&rows, ReportFormat::Csv))
            .map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Identity-oracle sanity row: the masks scored against themselves.
fn run_oracle(cfg: &RunConfig, format: ReportFormat) -> Result<()> {
    let data = load_all(cfg)?;
    let counts: Result<Vec<_>> = data.iter().map(|s| confusion(&s.mask, &s.mask)).collect();
    let report = MetricsReport::from_counts(&counts?)?;
    let table = render_report(
        &[MethodRow {
            method: "identity-oracle".into(),
            report,
        }],
        format,
    );
    print!("{table}");
    Ok(())
}
