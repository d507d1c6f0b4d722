//! PCA visualization of feature maps: project the channel dimension onto
//! its top three principal components and write the result as an RGB PNG.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array3;

use crate::error::{Error, Result};

/// Top-3 PCA projection of a (C, H, W) feature map, C >= 3. Components are
/// ordered by descending eigenvalue; each component's sign is fixed so its
/// largest-magnitude channel loading is positive.
pub fn pca_project(features: &Array3<f64>) -> Result<Array3<f64>> {
    let (c, h, w) = features.dim();
    if c < 3 {
        return Err(Error::Argument(format!(
            "pca visualization needs at least 3 channels, got {c}"
        )));
    }
    if h == 0 || w == 0 {
        return Err(Error::Argument("empty feature map".into()));
    }
    let n = h * w;
    // channel means, then the channel covariance over all pixels
    let mut mean = vec![0.0f64; c];
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                mean[ci] += features[[ci, y, x]];
            }
        }
        mean[ci] /= n as f64;
    }
    let mut cov = DMatrix::<f64>::zeros(c, c);
    for y in 0..h {
        for x in 0..w {
            for i in 0..c {
                let di = features[[i, y, x]] - mean[i];
                for j in i..c {
                    let dj = features[[j, y, x]] - mean[j];
                    cov[(i, j)] += di * dj;
                }
            }
        }
    }
    for i in 0..c {
        for j in i..c {
            cov[(i, j)] /= n as f64;
            cov[(j, i)] = cov[(i, j)];
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut out = Array3::<f64>::zeros((3, h, w));
    for k in 0..3 {
        let col = eig.eigenvectors.column(order[k]);
        // deterministic sign: largest-|loading| channel points positive
        let mut best = 0;
        for i in 1..c {
            if col[i].abs() > col[best].abs() {
                best = i;
            }
        }
        let sign = if col[best] < 0.0 { -1.0 } else { 1.0 };
        for y in 0..h {
            for x in 0..w {
                let mut v = 0.0;
                for i in 0..c {
                    v += sign * col[i] * (features[[i, y, x]] - mean[i]);
                }
                out[[k, y, x]] = v;
            }
        }
    }
    Ok(out)
}

/// Min-max normalize each projected component to [0, 255] and write an
/// RGB PNG. A constant component maps to 0.
pub fn visualize_pca(features: &Array3<f64>, path: &Path) -> Result<()> {
    let proj = pca_project(features)?;
    let (_, h, w) = proj.dim();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for k in 0..3 {
        for v in proj.index_axis(ndarray::Axis(0), k) {
            lo[k] = lo[k].min(*v);
            hi[k] = hi[k].max(*v);
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut px = [0u8; 3];
            for k in 0..3 {
                let range = hi[k] - lo[k];
                let t = if range > 0.0 {
                    (proj[[k, y, x]] - lo[k]) / range
                } else {
                    0.0
                };
                px[k] = (t * 255.0).round().clamp(0.0, 255.0) as u8;
            }
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path)
        .map_err(|e| Error::Runtime(format!("cannot write {}: {e}", path.display())))
}
