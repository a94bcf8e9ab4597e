use std::path::PathBuf;

use anyhow::ensure;
use attnseg_core::mask::{render_overlay, BinaryMask, OverlayStyle};
use attnseg_core::raster::{encode_png, read_image, read_label_mask};

use crate::output::write_atomic;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Backdrop image (PNG, PPM or PGM) with the mask's dimensions.
    #[arg(long)]
    image: PathBuf,
    /// Label mask (.pgm or .u16).
    #[arg(long)]
    mask: PathBuf,
    /// Ground-truth mask; nonzero pixels form the outlined region.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Opacity of per-region color fills.
    #[arg(long, default_value_t = 0.0)]
    opacity: f32,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
}

pub fn run(args: Args) -> anyhow::Result<()> {
    let image = read_image(&args.image)?;
    let mask = read_label_mask(&args.mask)?;
    let truth = match &args.truth {
        Some(p) => {
            let t = read_label_mask(p)?;
            ensure!(
                t.width() == mask.width() && t.height() == mask.height(),
                "truth {} is {}x{} but the mask is {}x{}",
                p.display(),
                t.width(),
                t.height(),
                mask.width(),
                mask.height()
            );
            Some(BinaryMask::new(
                t.width(),
                t.height(),
                t.labels().iter().map(|&l| l != 0).collect(),
            )?)
        }
        None => None,
    };
    let style = OverlayStyle {
        fill_opacity: args.opacity,
    };
    let overlay = render_overlay(&image, &mask, truth.as_ref(), &style)?;
    write_atomic(&args.out, &encode_png(&overlay)?)?;
    println!("{}", args.out.display());
    Ok(())
}
