use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::codecs::gif::{GifEncoder, Repeat};
use image::imageops::{self, FilterType};
use image::{Delay, Frame, ImageFormat, RgbImage, RgbaImage};
use poseforge::posecore::{heatmap_encode, render_stick_figure, Image, PoseSequence, SkeletonSpec, StickStyle};
use poseforge::skel2img::{network_input, TransformerF};

use crate::error::CliError;

/// Colour of the appearance reference handed to the transformer.
pub const REFERENCE_COLOR: [f64; 3] = [0.9, 0.6, 0.3];

pub struct RenderOptions<'a> {
    pub skeleton: &'a SkeletonSpec,
    pub size: usize,
    /// Nearest-neighbour upscaling of written images.
    pub scale: u32,
    pub pixels: Option<(&'a TransformerF, f64)>,
}

fn to_rgb(img: &Image, scale: u32) -> RgbImage {
    let raw = RgbImage::from_raw(img.width as u32, img.height as u32, img.to_rgb8()).expect("sized buffer");
    if scale == 1 {
        raw
    } else {
        imageops::resize(&raw, raw.width() * scale, raw.height() * scale, FilterType::Nearest)
    }
}

fn write_png(img: &RgbImage, path: &Path) -> Result<(), CliError> {
    img.save_with_format(path, ImageFormat::Png).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
}

/// Per-frame stick-figure PNGs, optional transformer PNGs and one GIF
/// (figures, with the transformer output alongside when present).
pub fn render_animation(seq: &PoseSequence, opts: &RenderOptions, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::Other(format!("{}: {e}", out.display())))?;
    let size = opts.size;
    let style = StickStyle::for_width(size);
    let reference = render_stick_figure(&seq.frames[0], opts.skeleton, size, size, &style.with_color(REFERENCE_COLOR));
    let mut written = Vec::new();
    let mut gif_frames = Vec::with_capacity(seq.len());
    for (t, pose) in seq.frames.iter().enumerate() {
        let stick = to_rgb(&render_stick_figure(pose, opts.skeleton, size, size, &style), opts.scale);
        let path = out.join(format!("frame_{t:03}.png"));
        write_png(&stick, &path)?;
        written.push(path);
        let mut panel = stick;
        if let Some((f, sigma)) = opts.pixels {
            let heat = heatmap_encode(pose, sigma, size, size)?;
            let pred = f.predict(&network_input(&heat, &reference)?)?;
            let px = to_rgb(&pred, opts.scale);
            let path = out.join(format!("pixels_{t:03}.png"));
            write_png(&px, &path)?;
            written.push(path);
            let mut both = RgbImage::new(panel.width() * 2, panel.height());
            imageops::replace(&mut both, &panel, 0, 0);
            imageops::replace(&mut both, &px, panel.width() as i64, 0);
            panel = both;
        }
        let rgba: RgbaImage = image::DynamicImage::ImageRgb8(panel).into_rgba8();
        let ms = (1000.0 / seq.fps).round().max(1.0) as u32;
        gif_frames.push(Frame::from_parts(rgba, 0, 0, Delay::from_numer_denom_ms(ms, 1)));
    }
    let gif_path = out.join("animation.gif");
    let file = File::create(&gif_path).map_err(|e| CliError::Other(format!("{}: {e}", gif_path.display())))?;
    let mut enc = GifEncoder::new(BufWriter::new(file));
    let gif_err = |e: image::ImageError| CliError::Other(format!("{}: {e}", gif_path.display()));
    enc.set_repeat(Repeat::Infinite).map_err(gif_err)?;
    enc.encode_frames(gif_frames).map_err(gif_err)?;
    drop(enc);
    written.push(gif_path);
    Ok(written)
}
