use std::path::PathBuf;

use attnseg_core::raster::encode_label_mask;
use attnseg_core::synth::{
    generate_tensor_set, standard_census, Layout, PlantedScene, DEFAULT_RESOLUTION,
};
use attnseg_core::tensor_io::write_tensor;

use crate::output::{parse_size, write_atomic, write_json};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Number of planted regions K.
    #[arg(long)]
    regions: usize,
    /// Noise level in [0, 1].
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scene (and largest tensor) resolution; a multiple of 8.
    #[arg(long, default_value_t = DEFAULT_RESOLUTION)]
    resolution: usize,
    /// `stripes` or `blobs`.
    #[arg(long, default_value = "stripes")]
    layout: Layout,
    /// Layers per resolution, e.g. `64:5,32:5,16:5,8:1` (the default, scaled
    /// to the scene resolution).
    #[arg(long, value_parser = parse_census)]
    census: Option<Census>,
    /// Ground-truth mask size; a multiple of the scene resolution.
    #[arg(long, value_parser = parse_size)]
    truth_size: Option<(usize, usize)>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

type Census = Vec<(usize, usize)>;

fn parse_census(s: &str) -> Result<Census, String> {
    s.split(',')
        .map(|part| {
            let (r, n) = part
                .split_once(':')
                .ok_or_else(|| format!("expected RES:COUNT, got {part:?}"))?;
            let r = r
                .trim()
                .parse()
                .map_err(|_| format!("bad resolution {r:?}"))?;
            let n = n.trim().parse().map_err(|_| format!("bad count {n:?}"))?;
            Ok((r, n))
        })
        .collect()
}

pub fn run(args: Args) -> anyhow::Result<()> {
    let scene = PlantedScene::random(
        args.layout,
        args.resolution,
        args.regions,
        args.noise,
        args.seed,
    )?;
    let census = args
        .census
        .unwrap_or_else(|| standard_census(args.resolution));
    let set = generate_tensor_set(&scene, &census)?;
    for (entry, tensor) in set.manifest.entries.iter().zip(&set.tensors) {
        let mut bytes = Vec::new();
        write_tensor(tensor, &mut bytes)?;
        write_atomic(&args.out.join(&entry.file), &bytes)?;
    }
    write_json(&args.out.join("manifest.json"), &set.manifest)?;

    let (w, h) = args
        .truth_size
        .unwrap_or((args.resolution, args.resolution));
    let truth = scene.truth_mask(w, h)?;
    let (format, bytes) = encode_label_mask(&truth)?;
    let truth_path =
        args.out
            .join("truth")
            .join(format!("{}.{}", set.manifest.image_id, format.extension()));
    write_atomic(&truth_path, &bytes)?;

    for d in &set.dropped {
        eprintln!(
            "warning: region {} vanishes at resolution {} and is absent from those layers",
            d.region, d.resolution
        );
    }
    println!(
        "{}: {} layers, {} regions -> {}",
        set.manifest.image_id,
        set.tensors.len(),
        scene.num_regions(),
        args.out.display()
    );
    Ok(())
}
