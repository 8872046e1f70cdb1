//! 8-bit PGM frames on a logarithmic display scale.

use std::fs;
use std::path::{Path, PathBuf};

use proxnf_core::ImageStack;

pub const DISPLAY_MIN: f64 = 1e-4;
pub const DISPLAY_MAX: f64 = 0.06;

/// Maps `value` to a gray level, clamping to the display range.
pub fn log_gray(value: f64, lo: f64, hi: f64) -> u8 {
    let v = if value.is_finite() { value.clamp(lo, hi) } else { lo };
    let s = (v.ln() - lo.ln()) / (hi.ln() - lo.ln());
    (s * 255.0).round() as u8
}

/// Binary PGM of frame `k`, with `x` across and `y` up.
pub fn frame_pgm(stack: &ImageStack, k: usize) -> Vec<u8> {
    let side = stack.grid().side();
    let frame = stack.frame_slice(k);
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    for iy in (0..side).rev() {
        for ix in 0..side {
            out.push(log_gray(frame[ix * side + iy], DISPLAY_MIN, DISPLAY_MAX));
        }
    }
    out
}

/// Writes the chosen frames as `frame_XXXX.pgm` into `dir`.
pub fn write_frames(stack: &ImageStack, frames: &[usize], dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    frames
        .iter()
        .map(|&k| {
            let path = dir.join(format!("frame_{k:04}.pgm"));
            fs::write(&path, frame_pgm(stack, k))?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proxnf_core::nalgebra::DMatrix;
    use proxnf_core::SpacetimeGrid;

    #[test]
    fn log_scale_endpoints() {
        assert_eq!(log_gray(1e-4, DISPLAY_MIN, DISPLAY_MAX), 0);
        assert_eq!(log_gray(0.06, DISPLAY_MIN, DISPLAY_MAX), 255);
        assert_eq!(log_gray(1.0, DISPLAY_MIN, DISPLAY_MAX), 255);
        assert_eq!(log_gray(-3.0, DISPLAY_MIN, DISPLAY_MAX), 0);
        // a quarter of the way up in log scale: 63.75 rounds to 64
        let quarter = 1e-4f64 * (0.06f64 / 1e-4).powf(0.25);
        assert_eq!(log_gray(quarter, DISPLAY_MIN, DISPLAY_MAX), 64);
    }

    #[test]
    fn pgm_puts_high_y_on_top() {
        let grid = SpacetimeGrid::new(2, 1.0, 1, 1.0).unwrap();
        // pixel (ix=0, iy=1) is bright
        let stack = ImageStack::new(grid, DMatrix::from_vec(4, 1, vec![1e-4, 0.06, 1e-4, 1e-4])).unwrap();
        let pgm = frame_pgm(&stack, 0);
        assert!(pgm.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&pgm[pgm.len() - 4..], &[255, 0, 0, 0]);
    }
}
