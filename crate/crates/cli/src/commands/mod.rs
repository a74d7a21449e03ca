//! Subcommand implementations and the helpers they share.

pub mod bench;
pub mod eval;
pub mod gradcheck;
pub mod infer;
pub mod synth;
pub mod train;

use std::path::{Path, PathBuf};

use trun_core::config::ModelConfig;
use trun_core::data::{netpbm, resize, synth::synth_dataset, Sample};
use trun_core::error::{Error, Result};
use trun_core::train::split_dataset;

use crate::runconfig::RunConfig;

/// Writes the fully resolved configuration into an output directory.
pub fn write_config_copy(cfg: &RunConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("config.txt");
    std::fs::write(&path, cfg.to_text()).map_err(|e| Error::io(&path, e))
}

fn read_pair(image_path: &Path, mask_path: &Path, id: String, size: usize) -> Result<Sample> {
    let image = netpbm::read_ppm(image_path)?;
    let mask = netpbm::read_mask(mask_path)?;
    let sample = Sample { id, image, mask };
    sample.validate()?;
    resize::resize_sample(&sample, size)
}

/// Loads `<dir>/manifest.csv` when present (id,image,mask columns), else
/// pairs `<dir>/images/*.ppm` with `<dir>/masks/<stem>.pgm` in sorted order.
pub fn load_dir(dir: &Path, size: usize) -> Result<Vec<Sample>> {
    let manifest = dir.join("manifest.csv");
    if manifest.is_file() {
        let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let mut samples = Vec::new();
        for (lineno, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 3 {
                return Err(Error::Data(format!(
                    "{}: line {}: expected id,image,mask",
                    manifest.display(),
                    lineno + 1
                )));
            }
            samples.push(read_pair(
                &dir.join(cols[1].trim()),
                &dir.join(cols[2].trim()),
                cols[0].trim().to_string(),
                size,
            )?);
        }
        if samples.is_empty() {
            return Err(Error::Data(format!("{}: no samples listed", manifest.display())));
        }
        return Ok(samples);
    }

    let images_dir = dir.join("images");
    let masks_dir = dir.join("masks");
    for d in [&images_dir, &masks_dir] {
        if !d.is_dir() {
            return Err(Error::Data(format!("missing directory {}", d.display())));
        }
    }
    let mut stems: Vec<String> = std::fs::read_dir(&images_dir)
        .map_err(|e| Error::io(&images_dir, e))?
        .filter_map(|entry| {
            let path = entry.ok()?.path();
            if path.extension().is_some_and(|e| e == "ppm") {
                path.file_stem().map(|s| s.to_string_lossy().into_owned())
            } else {
                None
            }
        })
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(Error::Data(format!(
            "no .ppm images under {}",
            images_dir.display()
        )));
    }
    stems
        .into_iter()
        .map(|stem| {
            let mask_path = masks_dir.join(format!("{stem}.pgm"));
            if !mask_path.is_file() {
                return Err(Error::Data(format!("missing mask {}", mask_path.display())));
            }
            read_pair(&images_dir.join(format!("{stem}.ppm")), &mask_path, stem, size)
        })
        .collect()
}

/// Reads an explicit-split list file: one `image_path,mask_path` per line,
/// paths relative to the list's directory.
fn load_list(list: &Path, size: usize) -> Result<Vec<Sample>> {
    let text = std::fs::read_to_string(list).map_err(|e| Error::io(list, e))?;
    let base = list.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((img, mask)) = line.split_once(',') else {
            return Err(Error::Data(format!(
                "{}: line {}: expected image_path,mask_path",
                list.display(),
                lineno + 1
            )));
        };
        let image_path = base.join(img.trim());
        let id = image_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("line{lineno}"));
        samples.push(read_pair(&image_path, &base.join(mask.trim()), id, size)?);
    }
    if samples.is_empty() {
        return Err(Error::Data(format!("{}: no samples listed", list.display())));
    }
    Ok(samples)
}

/// Everything the evaluate/infer pathways need: one flat dataset.
pub fn load_all(cfg: &RunConfig) -> Result<Vec<Sample>> {
    let size = cfg.model.input_size;
    if let Some(list) = &cfg.test_list {
        return load_list(list, size);
    }
    if cfg.synth_n > 0 {
        return synth_dataset(cfg.synth_n, size, cfg.synth_seed);
    }
    if let Some(dir) = &cfg.data_dir {
        return load_dir(dir, size);
    }
    Err(Error::Data(
        "no data source: set data.synth_n, data.dir or data.test_list".into(),
    ))
}

/// Train/val/test resolution: explicit lists when given, otherwise the
/// seeded built-in split.
pub fn load_split(cfg: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>, Vec<Sample>)> {
    let size = cfg.model.input_size;
    if let (Some(train), Some(val)) = (&cfg.train_list, &cfg.val_list) {
        let train = load_list(train, size)?;
        let val = load_list(val, size)?;
        let test = match &cfg.test_list {
            Some(list) => load_list(list, size)?,
            None => Vec::new(),
        };
        return Ok((train, val, test));
    }
    let all = if cfg.synth_n > 0 {
        synth_dataset(cfg.synth_n, size, cfg.synth_seed)?
    } else if let Some(dir) = &cfg.data_dir {
        load_dir(dir, size)?
    } else {
        return Err(Error::Data(
            "no data source: set data.synth_n, data.dir or data.train_list/val_list".into(),
        ));
    };
    split_dataset(all, cfg.split, cfg.train.seed)
}

/// Loads a checkpoint and reconciles its embedded model config against any
/// model keys explicitly set in the run configuration.
pub fn checkpoint_model(cfg: &RunConfig, path: &Path) -> Result<ModelConfig> {
    let (_, ckpt_cfg) = trun_core::data::checkpoint::load_checkpoint::<f32>(path)?;
    let explicit = cfg.to_text();
    for (key, _) in trun_core::config::parse_kv(&explicit)? {
        if key.starts_with("model.") && cfg.was_set(&key) {
            let mut probe = ckpt_cfg.clone();
            // apply the run value onto the checkpoint config; a change means conflict
            let run_value = kv_value(&explicit, &key).unwrap_or_default();
            probe.apply_kv(&key, &run_value)?;
            if probe != ckpt_cfg {
                return Err(Error::Config(format!(
                    "{key} = {run_value} conflicts with the checkpoint's model configuration"
                )));
            }
        }
    }
    Ok(ckpt_cfg)
}

fn kv_value(text: &str, key: &str) -> Option<String> {
    trun_core::config::parse_kv(text)
        .ok()?
        .into_iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v)
}

/// Method label used in report rows, derived from the ablation flags.
pub fn method_label(cfg: &ModelConfig) -> String {
    match (cfg.use_transformer, cfg.use_dilated) {
        (true, true) => "TransResU-Net".to_string(),
        (false, true) => "TransResU-Net (w/o Transformer Encoder block)".to_string(),
        (true, false) => "TransResU-Net (w/o Dilated Conv block)".to_string(),
        (false, false) => {
            "TransResU-Net (w/o Transformer Encoder block & Dilated Conv block)".to_string()
        }
    }
}

pub fn output_path(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out_dir.join(name)
}
