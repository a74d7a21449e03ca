//! `trun synth`: write a synthetic PPM/PGM dataset plus its manifest.

use std::path::Path;

use trun_core::data::netpbm;
use trun_core::data::synth::synth_dataset;
use trun_core::error::{Error, Result};

pub fn run(n: usize, size: usize, seed: u64, outdir: &Path, force: bool) -> Result<()> {
    if outdir.exists() {
        let non_empty = std::fs::read_dir(outdir)
            .map_err(|e| Error::io(outdir, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::Config(format!(
                "{} is not empty; pass --force to overwrite",
                outdir.display()
            )));
        }
    }
    let images_dir = outdir.join("images");
    let masks_dir = outdir.join("masks");
    for d in [&images_dir, &masks_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }

    let samples = synth_dataset(n, size, seed)?;
    let mut manifest = String::from("id,image,mask\n");
    for s in &samples {
        let image_rel = format!("images/{}.ppm", s.id);
        let mask_rel = format!("masks/{}.pgm", s.id);
        netpbm::write_ppm(&s.image, outdir.join(&image_rel))?;
        netpbm::write_pgm(&s.mask, outdir.join(&mask_rel))?;
        manifest.push_str(&format!("{},{image_rel},{mask_rel}\n", s.id));
    }
    let manifest_path = outdir.join("manifest.csv");
    std::fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
    println!(
        "wrote {n} image/mask pairs ({size}x{size}, seed {seed}) under {}",
        outdir.display()
    );
    Ok(())
}
