//! 8-bit colormapped depth previews.

use std::io::Cursor;

use occ_core::image::DepthMap;

use crate::error::{CliError, CliResult};

const STOPS: [[f64; 3]; 5] = [
    [253.0, 231.0, 37.0],
    [94.0, 201.0, 98.0],
    [33.0, 145.0, 140.0],
    [59.0, 82.0, 139.0],
    [68.0, 1.0, 84.0],
];

/// Near is yellow, far is purple, invalid pixels are black.
fn color(t: f64) -> [u8; 3] {
    let x = t.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (x.floor() as usize).min(STOPS.len() - 2);
    let f = x - i as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (STOPS[i][c] * (1.0 - f) + STOPS[i + 1][c] * f).round() as u8;
    }
    out
}

pub fn depth_png(map: &DepthMap) -> CliResult<Vec<u8>> {
    let valid = || map.depth.iter().zip(&map.valid).filter(|(_, v)| **v).map(|(d, _)| *d);
    let lo = valid().fold(f64::INFINITY, f64::min);
    let hi = valid().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut rgb = Vec::with_capacity(map.depth.len() * 3);
    for (d, v) in map.depth.iter().zip(&map.valid) {
        rgb.extend_from_slice(&if *v { color((d - lo) / span) } else { [0, 0, 0] });
    }
    let img = image::RgbImage::from_raw(map.width as u32, map.height as u32, rgb)
        .ok_or_else(|| CliError::data("depth map has inconsistent size"))?;
    let mut bytes = Cursor::new(Vec::new());
    img.write_to(&mut bytes, image::ImageFormat::Png)
        .map_err(|e| CliError::data(format!("PNG encoding failed: {e}")))?;
    Ok(bytes.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_endpoints_and_png_signature() {
        assert_eq!(color(0.0), [253, 231, 37]);
        assert_eq!(color(1.0), [68, 1, 84]);
        let mut map = DepthMap::invalid(3, 2);
        map.set(0, 0, 1.0);
        map.set(2, 1, 4.0);
        let png = depth_png(&map).unwrap();
        assert_eq!(&png[..8], b"\x89PNG\r\n\x1a\n");
        assert_eq!(depth_png(&map).unwrap(), png);
    }
}
