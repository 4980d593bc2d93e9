//! Principal-component projection of token features for RGB display.

use candle_core::{DType, Tensor};
use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::image::Image;

/// Top-`k` principal axes of a token set.
#[derive(Clone, Debug)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `k × C`, rows are unit principal axes (zero rows beyond the rank).
    pub components: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
}

impl Pca {
    /// Fit on an `N × C` token matrix (population covariance). Each axis is
    /// signed so its largest-magnitude loading is positive.
    pub fn fit(tokens: &DMatrix<f64>, k: usize) -> Result<Self> {
        let (n, c) = tokens.shape();
        if k == 0 || c < k || n < k {
            return Err(Error::arg(format!(
                "PCA needs at least k={k} channels and positions, got {n} tokens of dim {c}"
            )));
        }
        let mean: Vec<f64> = (0..c).map(|j| tokens.column(j).mean()).collect();
        let mut centered = tokens.clone();
        for j in 0..c {
            centered.column_mut(j).add_scalar_mut(-mean[j]);
        }
        let cov = centered.transpose() * &centered / n as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

        let top = eig.eigenvalues[order[0]].max(0.0);
        let tol = top * 1e-10 + f64::MIN_POSITIVE;
        let mut components = DMatrix::zeros(k, c);
        let mut eigenvalues = Vec::with_capacity(k);
        let mut rank_deficient = false;
        for (row, &idx) in order.iter().take(k).enumerate() {
            let lambda = eig.eigenvalues[idx];
            if lambda <= tol {
                rank_deficient = true;
                eigenvalues.push(0.0);
                continue;
            }
            let mut v = eig.eigenvectors.column(idx).clone_owned();
            let lead = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            if lead < 0.0 {
                v.neg_mut();
            }
            components.row_mut(row).copy_from(&v.transpose());
            eigenvalues.push(lambda);
        }
        if rank_deficient {
            log::warn!("PCA input has rank below {k}; trailing components set to zero");
        }
        Ok(Self {
            mean,
            components,
            eigenvalues,
        })
    }

    /// `N × k` coordinates of the centered tokens.
    pub fn transform(&self, tokens: &DMatrix<f64>) -> DMatrix<f64> {
        let mut centered = tokens.clone();
        for j in 0..tokens.ncols() {
            centered.column_mut(j).add_scalar_mut(-self.mean[j]);
        }
        centered * self.components.transpose()
    }
}

/// `(C, h, w)` or `(1, C, h, w)` feature map → `N × C` token matrix.
pub fn tokens_of(fmap: &Tensor) -> Result<(DMatrix<f64>, usize, usize)> {
    let f = match fmap.rank() {
        3 => fmap.clone(),
        4 if fmap.dims()[0] == 1 => fmap.squeeze(0)?,
        _ => return Err(Error::Shape(format!("expected (C,h,w) or (1,C,h,w), got {:?}", fmap.dims()))),
    };
    let (c, h, w) = f.dims3()?;
    let vals = f.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    // vals is channel-major: vals[ch * h*w + pos]
    Ok((DMatrix::from_fn(h * w, c, |pos, ch| vals[ch * h * w + pos]), h, w))
}

/// Project every position onto the top-`k` principal components and
/// min-max normalise each component to `[0, 1]`. Returns an `h × w × k` image.
pub fn pca_project(fmap: &Tensor, k: usize) -> Result<Image> {
    let (tokens, h, w) = tokens_of(fmap)?;
    let pca = Pca::fit(&tokens, k)?;
    let proj = pca.transform(&tokens);
    let mut out = Image::filled(h, w, k, 0.0);
    for comp in 0..k {
        let col = proj.column(comp);
        let (lo, hi) = (col.min(), col.max());
        let range = hi - lo;
        for pos in 0..h * w {
            let v = if range > 1e-12 * (1.0 + hi.abs().max(lo.abs())) {
                (col[pos] - lo) / range
            } else {
                0.0
            };
            out.set(pos / w, pos % w, comp, v as f32);
        }
    }
    Ok(out)
}
