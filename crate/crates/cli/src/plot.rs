//! Grayscale panel rendering.

use anyhow::{bail, Result};
use image::{GrayImage, Luma};
use ndarray::Array2;

use crate::commands::load_grid;
use crate::PlotArgs;

const GAP: u32 = 8;
const BACKGROUND: u8 = 255;

pub fn run(a: PlotArgs) -> Result<()> {
    let grids = a.inputs.iter().map(|p| load_grid(p)).collect::<Result<Vec<_>>>()?;
    let mut panels: Vec<Array2<f32>> = Vec::new();
    if a.residual {
        if grids.len() % 2 != 0 {
            bail!("--residual needs (noisy, denoised) pairs; got {} inputs", grids.len());
        }
        for (pair, paths) in grids.chunks(2).zip(a.inputs.chunks(2)) {
            let (noisy, den) = (&pair[0], &pair[1]);
            if noisy.shape() != den.shape() {
                bail!(
                    "{} is {:?} but {} is {:?}",
                    paths[0].display(),
                    noisy.shape(),
                    paths[1].display(),
                    den.shape()
                );
            }
            panels.push(noisy.data().to_owned());
            panels.push(den.data().to_owned());
            panels.push(&noisy.data() - &den.data());
        }
    } else {
        panels.extend(grids.iter().map(|g| g.data().to_owned()));
    }
    render(&panels).save(&a.out)?;
    Ok(())
}

/// Panels side by side on one symmetric amplitude scale: `+max` is black,
/// `−max` white, zero mid-gray.
pub fn render(panels: &[Array2<f32>]) -> GrayImage {
    let clip = panels
        .iter()
        .flat_map(|p| p.iter())
        .fold(0.0f32, |m, v| m.max(v.abs()));
    let clip = if clip > 0.0 { clip } else { 1.0 };
    let height = panels.iter().map(|p| p.nrows() as u32).max().unwrap_or(1);
    let width = panels.iter().map(|p| p.ncols() as u32).sum::<u32>() + GAP * (panels.len().saturating_sub(1) as u32);
    let mut img = GrayImage::from_pixel(width.max(1), height.max(1), Luma([BACKGROUND]));
    let mut x0 = 0u32;
    for p in panels {
        for ((i, j), &v) in p.indexed_iter() {
            let t = ((1.0 - v / clip) * 0.5).clamp(0.0, 1.0);
            img.put_pixel(x0 + j as u32, i as u32, Luma([(t * 255.0).round() as u8]));
        }
        x0 += p.ncols() as u32 + GAP;
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn panels_share_one_scale() {
        let a = Array2::from_elem((2, 3), 1.0f32);
        let b = Array2::from_elem((4, 2), -0.5f32);
        let img = render(&[a, b]);
        assert_eq!(img.dimensions(), (3 + GAP + 2, 4));
        assert_eq!(img.get_pixel(0, 0)[0], 0);
        assert_eq!(img.get_pixel(3 + GAP, 0)[0], 191);
        assert_eq!(img.get_pixel(0, 3)[0], BACKGROUND);
    }
}
