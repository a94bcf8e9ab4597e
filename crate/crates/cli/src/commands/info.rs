use std::path::PathBuf;

use attnseg_core::compute_weights;
use attnseg_core::tensor_io::load_tensor_set;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Tensor set manifest (JSON).
    #[arg(long)]
    manifest: PathBuf,
}

pub fn run(args: Args) -> anyhow::Result<()> {
    let set = load_tensor_set(&args.manifest)?;
    let m = &set.manifest;
    let weights = compute_weights(&set.resolutions())?;

    println!("image_id: {}", m.image_id);
    println!("latent_resolution: {}", m.latent_resolution);
    println!("timestep: {}", m.timestep);
    if !m.extractor_info.is_empty() {
        println!("extractor: {}", m.extractor_info);
    }
    println!("layers: {}", set.tensors.len());
    println!();
    println!(
        "{:>10} {:>7} {:>12} {:>12}",
        "resolution", "layers", "R per layer", "R total"
    );
    for (res, count) in m.census().into_iter().rev() {
        let r = set
            .tensors
            .iter()
            .zip(weights.as_slice())
            .find(|(t, _)| t.resolution() == res)
            .map_or(0.0, |(_, &w)| w);
        println!("{res:>10} {count:>7} {r:>12.6} {:>12.6}", r * count as f64);
    }
    println!();
    println!(
        "{:>8} {:>10} {:>14} {:>14}",
        "layer", "resolution", "max |sum-1|", "renormalized"
    );
    for d in &set.drift {
        println!(
            "{:>8} {:>10} {:>14.3e} {:>14}",
            d.layer_id, d.resolution, d.max_drift, d.renormalized_slices
        );
    }
    let worst = set.drift.iter().map(|d| d.max_drift).fold(0.0, f64::max);
    println!(
        "drift: max {worst:.3e}, {} slices renormalized",
        set.renormalized_slices()
    );
    Ok(())
}
