//! PNG rendering of an `[N, N]` matrix with a blue-white-red scale
//! symmetric around zero.

use std::io::BufWriter;
use std::path::Path;

use fstmamba_core::Tensor;

use crate::error::{Error, Result};

/// RGB for `v` in `[-1, 1]`.
fn color(v: f64) -> [u8; 3] {
    let v = v.clamp(-1.0, 1.0);
    let fade = |x: f64| (255.0 * (1.0 - x)).round() as u8;
    if v >= 0.0 {
        [255, fade(v), fade(v)]
    } else {
        [fade(-v), fade(-v), 255]
    }
}

/// RGB pixels of `m`, each cell drawn as a `cell x cell` square.
pub fn render(m: &Tensor, cell: usize) -> Result<(u32, u32, Vec<u8>)> {
    let s = m.shape();
    if s.len() != 2 || cell == 0 {
        return Err(Error::Config(format!("heatmap needs a matrix and a positive cell size, got {s:?}")));
    }
    let (rows, cols) = (s[0], s[1]);
    let scale = m.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let (w, h) = (cols * cell, rows * cell);
    let mut px = vec![0u8; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            let c = color(m.data()[(y / cell) * cols + x / cell] / scale);
            px[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&c);
        }
    }
    Ok((w as u32, h as u32, px))
}

pub fn write_png(path: &Path, m: &Tensor, cell: usize) -> Result<()> {
    let (w, h, px) = render(m, cell)?;
    let mut bytes = Vec::new();
    {
        let mut enc = png::Encoder::new(BufWriter::new(&mut bytes), w, h);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(&px)?;
    }
    crate::container::write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colors_and_layout() {
        let m = Tensor::from_vec(&[1, 3], vec![-2.0, 0.0, 2.0]).unwrap();
        let (w, h, px) = render(&m, 2).unwrap();
        assert_eq!((w, h), (6, 2));
        assert_eq!(&px[0..3], &[0, 0, 255]);
        assert_eq!(&px[6..9], &[255, 255, 255]);
        assert_eq!(&px[15..18], &[255, 0, 0]);
        assert!(render(&Tensor::zeros(&[3]), 1).is_err());
    }
}
