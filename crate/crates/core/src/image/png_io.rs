use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::{ColorImage, DepthMap, Grid, Mask, ScalarMap};
use crate::error::{OsopError, Result};

/// JSON sidecar for 16-bit depth PNGs: depth_mm = value · depth_scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthSidecar {
    pub depth_scale: f64,
}

pub fn write_color_png(img: &ColorImage, path: &Path) -> Result<()> {
    let out = RgbImage::from_fn(img.width() as u32, img.height() as u32, |u, v| {
        let c = img.get(u as usize, v as usize);
        Rgb(c.map(|x| (x.clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    out.save(path)?;
    Ok(())
}

pub fn read_color_png(path: &Path) -> Result<ColorImage> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Grid::from_fn(w as usize, h as usize, |u, v| {
        img.get_pixel(u as u32, v as u32).0.map(|x| x as f64 / 255.0)
    }))
}

pub fn write_mask_png(mask: &Mask, path: &Path) -> Result<()> {
    let out = GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |u, v| {
        Luma([if *mask.get(u as usize, v as usize) { 255 } else { 0 }])
    });
    out.save(path)?;
    Ok(())
}

pub fn read_mask_png(path: &Path) -> Result<Mask> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Grid::from_fn(w as usize, h as usize, |u, v| {
        img.get_pixel(u as u32, v as u32).0[0] > 127
    }))
}

/// Writes depth as 16-bit units of `depth_scale` mm, plus `<path>.json` sidecar
/// when `sidecar` is set.
pub fn write_depth_png(depth: &DepthMap, depth_scale: f64, path: &Path, sidecar: bool) -> Result<()> {
    if !(depth_scale > 0.0) {
        return Err(OsopError::InvalidConfig("depth scale must be > 0".into()));
    }
    let max = depth.max_value();
    if max / depth_scale > u16::MAX as f64 {
        return Err(OsopError::InvalidConfig(format!(
            "depth {max} mm exceeds 16-bit range at scale {depth_scale}"
        )));
    }
    let out: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(depth.width() as u32, depth.height() as u32, |u, v| {
            Luma([(depth.get(u as usize, v as usize) / depth_scale).round() as u16])
        });
    out.save(path)?;
    if sidecar {
        let side = DepthSidecar { depth_scale };
        std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&side)?)?;
    }
    Ok(())
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Reads a 16-bit depth PNG. `depth_scale` overrides the sidecar; without
/// either, 1 mm per unit is assumed.
pub fn read_depth_png(path: &Path, depth_scale: Option<f64>) -> Result<DepthMap> {
    let scale = match depth_scale {
        Some(s) => s,
        None => {
            let side = sidecar_path(path);
            if side.exists() {
                let s: DepthSidecar = serde_json::from_str(&std::fs::read_to_string(side)?)?;
                s.depth_scale
            } else {
                1.0
            }
        }
    };
    let img = image::open(path)?.to_luma16();
    let (w, h) = img.dimensions();
    Ok(Grid::from_fn(w as usize, h as usize, |u, v| {
        img.get_pixel(u as u32, v as u32).0[0] as f64 * scale
    }))
}

/// Probability map in [0, 1] as a 16-bit gray PNG (debug output).
pub fn write_prob_png(map: &ScalarMap, path: &Path) -> Result<()> {
    let out: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(map.width() as u32, map.height() as u32, |u, v| {
            Luma([(map.get(u as usize, v as usize).clamp(0.0, 1.0) * 65535.0).round() as u16])
        });
    out.save(path)?;
    Ok(())
}
