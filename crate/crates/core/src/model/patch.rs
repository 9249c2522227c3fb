use crate::tensor::{Scalar, Tensor, TensorError};

/// `[h, w, c]` image to `[n, p*p*c]` patch rows. Row `i * cols + j` is patch
/// `(i, j)`, flattened row-major with channels fastest.
pub fn patchify<T: Scalar>(image: &Tensor<T>, p: usize) -> Result<Tensor<T>, TensorError> {
    let (h, w, c) = hwc(image)?;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(TensorError::ShapeMismatch { op: "patchify", lhs: image.shape().to_vec(), rhs: vec![p, p] });
    }
    let (rows, cols) = (h / p, w / p);
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for i in 0..rows {
        for j in 0..cols {
            for y in 0..p {
                let start = ((i * p + y) * w + j * p) * c;
                out.extend_from_slice(&src[start..start + p * c]);
            }
        }
    }
    Tensor::new(vec![rows * cols, p * p * c], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(patches: &Tensor<T>, h: usize, w: usize, c: usize, p: usize) -> Result<Tensor<T>, TensorError> {
    let mismatch = || TensorError::ShapeMismatch { op: "unpatchify", lhs: patches.shape().to_vec(), rhs: vec![h, w, c] };
    if p == 0 || h % p != 0 || w % p != 0 || patches.shape() != [(h / p) * (w / p), p * p * c] {
        return Err(mismatch());
    }
    let cols = w / p;
    let mut out = vec![T::zero(); h * w * c];
    for (idx, row) in patches.data().chunks_exact(p * p * c).enumerate() {
        let (i, j) = (idx / cols, idx % cols);
        for y in 0..p {
            let dst = ((i * p + y) * w + j * p) * c;
            out[dst..dst + p * c].copy_from_slice(&row[y * p * c..(y + 1) * p * c]);
        }
    }
    Tensor::new(vec![h, w, c], out)
}

/// Standardizes each patch row to zero mean, unit variance.
pub fn normalize_patches<T: Scalar>(patches: &Tensor<T>) -> Tensor<T> {
    let w = patches.row_len();
    let inv = T::one() / T::from_f64(w as f64);
    let eps = T::from_f64(1e-6);
    let mut out = patches.clone();
    for row in out.data_mut().chunks_exact_mut(w) {
        let mean = row.iter().copied().sum::<T>() * inv;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv;
        let rs = T::one() / (var + eps).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * rs);
    }
    out
}

pub(crate) fn hwc<T: Scalar>(image: &Tensor<T>) -> Result<(usize, usize, usize), TensorError> {
    match image.shape() {
        &[h, w, c] => Ok((h, w, c)),
        other => Err(TensorError::ShapeMismatch { op: "image", lhs: other.to_vec(), rhs: vec![] }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn patch_counts() {
        let img = Tensor::<f32>::zeros(vec![224, 224, 1]).unwrap();
        assert_eq!(patchify(&img, 16).unwrap().shape(), &[196, 256]);
        let img = Tensor::<f32>::zeros(vec![32, 32, 9]).unwrap();
        assert_eq!(patchify(&img, 4).unwrap().shape(), &[64, 144]);
        assert!(patchify(&img, 5).is_err());
    }

    #[test]
    fn patch_layout_is_row_major_channel_fastest() {
        // 4x4 image, 2 channels; pixel (y, x) channel k = 100*y + 10*x + k
        let img = Tensor::<f32>::from_fn(vec![4, 4, 2], |i| {
            let (y, x, k) = (i / 8, (i / 2) % 4, i % 2);
            (100 * y + 10 * x + k) as f32
        })
        .unwrap();
        let p = patchify(&img, 2).unwrap();
        // patch (0, 1) is row 1: pixels (0,2),(0,3),(1,2),(1,3)
        assert_eq!(p.row(1), &[20.0, 21.0, 30.0, 31.0, 120.0, 121.0, 130.0, 131.0]);
        assert_eq!(p.row(2)[0], 200.0);
    }

    proptest! {
        #[test]
        fn unpatchify_inverts_patchify(
            gh in 1usize..4, gw in 1usize..4, c in 1usize..4, p in 1usize..5, seed in any::<u64>()
        ) {
            let (h, w) = (gh * p, gw * p);
            let mut s = seed;
            let img = Tensor::<f32>::from_fn(vec![h, w, c], |_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 40) as f32 / 1024.0 - 8000.0
            }).unwrap();
            let back = unpatchify(&patchify(&img, p).unwrap(), h, w, c, p).unwrap();
            prop_assert_eq!(back, img);
        }
    }
}
