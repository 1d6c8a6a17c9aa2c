//! Patch lowering for convolutions.
//!
//! `unfold` turns one image `C x H x W` into an `I x K` matrix whose column
//! `k` is the receptive field of output position `k` (row-major over the
//! output grid). Rows are ordered channel-major, then kernel row, then kernel
//! column: row `c * kh * kw + i * kw + j`. Weight matrices are flattened in
//! the same order. Padding is zero. `fold` is the exact adjoint of `unfold`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub input: (usize, usize),
}

fn out_extent(size: usize, pad: usize, kernel: usize, stride: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl ConvGeometry {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        input: (usize, usize),
    ) -> Result<Self> {
        let g = Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            input,
        };
        g.validate()?;
        Ok(g)
    }

    /// Square kernel/stride/padding shorthand.
    pub fn square(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        input: (usize, usize),
    ) -> Result<Self> {
        Self::new(
            in_channels,
            out_channels,
            (kernel, kernel),
            (stride, stride),
            (padding, padding),
            input,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Geometry(format!(
                "channel counts must be positive (in {}, out {})",
                self.in_channels, self.out_channels
            )));
        }
        if self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::Geometry("stride must be positive".into()));
        }
        if self.output_opt().is_none() {
            return Err(Error::Geometry(format!(
                "output would be empty: input {:?}, kernel {:?}, stride {:?}, padding {:?}",
                self.input, self.kernel, self.stride, self.padding
            )));
        }
        Ok(())
    }

    fn output_opt(&self) -> Option<(usize, usize)> {
        let h = out_extent(self.input.0, self.padding.0, self.kernel.0, self.stride.0)?;
        let w = out_extent(self.input.1, self.padding.1, self.kernel.1, self.stride.1)?;
        (h >= 1 && w >= 1).then_some((h, w))
    }

    /// `(H_out, W_out)`. Panics on an invalid geometry; construct through
    /// [`ConvGeometry::new`] to get the error instead.
    pub fn output(&self) -> (usize, usize) {
        self.output_opt().expect("invalid geometry")
    }

    /// Patch length `I = C * kh * kw`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.0 * self.kernel.1
    }

    /// Number of output positions `K = H_out * W_out`.
    pub fn positions(&self) -> usize {
        let (h, w) = self.output();
        h * w
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.input.0 * self.input.1
    }

    pub fn check_input<T: Scalar>(&self, x: &Tensor<T>) -> Result<usize> {
        self.validate()?;
        let s = x.shape();
        if s.len() != 4 || s[1] != self.in_channels || (s[2], s[3]) != self.input {
            return Err(Error::Dimension {
                op: "convolution input",
                lhs: s.to_vec(),
                rhs: vec![0, self.in_channels, self.input.0, self.input.1],
            });
        }
        Ok(s[0])
    }
}

/// Unfolded patches of one sample: `I x K`.
#[derive(Debug, Clone, PartialEq)]
pub struct Im2ColMatrix<T> {
    pub data: Tensor<T>,
    pub geometry: ConvGeometry,
}

impl<T: Scalar> Im2ColMatrix<T> {
    pub fn patch_len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn positions(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn column(&self, k: usize) -> Vec<T> {
        let kk = self.positions();
        (0..self.patch_len()).map(|i| self.data.data()[i * kk + k]).collect()
    }
}

/// Unfold one `C x H x W` image into `out` (`I x K`, fully overwritten).
pub(crate) fn unfold_into<T: Scalar>(image: &[T], g: &ConvGeometry, out: &mut [T]) {
    let (h, w) = g.input;
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let (ph, pw) = g.padding;
    let (oh, ow) = g.output();
    let k = oh * ow;
    debug_assert_eq!(image.len(), g.input_len());
    debug_assert_eq!(out.len(), g.patch_len() * k);

    for c in 0..g.in_channels {
        let plane = &image[c * h * w..(c + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let row = (c * kh + i) * kw + j;
                let dst = &mut out[row * k..(row + 1) * k];
                for y in 0..oh {
                    let line = &mut dst[y * ow..(y + 1) * ow];
                    let iy = (y * sh + i) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (x, v) in line.iter_mut().enumerate() {
                        let ix = (x * sw + j) as isize - pw as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add `cols` (`I x K`) into `image` (`C x H x W`), summing overlaps.
pub(crate) fn fold_add_into<T: Scalar>(cols: &[T], g: &ConvGeometry, image: &mut [T]) {
    let (h, w) = g.input;
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let (ph, pw) = g.padding;
    let (oh, ow) = g.output();
    let k = oh * ow;
    debug_assert_eq!(image.len(), g.input_len());
    debug_assert_eq!(cols.len(), g.patch_len() * k);

    for c in 0..g.in_channels {
        let plane = &mut image[c * h * w..(c + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let row = (c * kh + i) * kw + j;
                let src = &cols[row * k..(row + 1) * k];
                for y in 0..oh {
                    let iy = (y * sh + i) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (x, &v) in src[y * ow..(y + 1) * ow].iter().enumerate() {
                        let ix = (x * sw + j) as isize - pw as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Unfold a batch `N x C x H x W` into one patch matrix per sample.
pub fn unfold<T: Scalar>(x: &Tensor<T>, g: &ConvGeometry) -> Result<Vec<Im2ColMatrix<T>>> {
    let n = g.check_input(x)?;
    let per = g.input_len();
    let (ii, k) = (g.patch_len(), g.positions());
    (0..n)
        .map(|s| {
            let mut buf = vec![T::zero(); ii * k];
            unfold_into(&x.data()[s * per..(s + 1) * per], g, &mut buf);
            Ok(Im2ColMatrix {
                data: Tensor::new(&[ii, k], buf)?,
                geometry: *g,
            })
        })
        .collect()
}

/// Adjoint of [`unfold`] for one sample: returns `C x H x W`.
pub fn fold<T: Scalar>(patches: &Im2ColMatrix<T>, g: &ConvGeometry) -> Result<Tensor<T>> {
    g.validate()?;
    let want = [g.patch_len(), g.positions()];
    if patches.data.shape() != want {
        return Err(Error::Dimension {
            op: "fold",
            lhs: patches.data.shape().to_vec(),
            rhs: want.to_vec(),
        });
    }
    let mut image = vec![T::zero(); g.input_len()];
    fold_add_into(patches.data.data(), g, &mut image);
    Tensor::new(&[g.in_channels, g.input.0, g.input.1], image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::randn;
    use proptest::prelude::*;

    fn geo(c: usize, k: (usize, usize), s: usize, p: usize, hw: (usize, usize)) -> ConvGeometry {
        ConvGeometry::new(c, 1, k, (s, s), (p, p), hw).unwrap()
    }

    #[test]
    fn two_by_two_patch_single_column() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[1., 2., 3., 4.]).unwrap();
        let m = unfold(&x, &geo(1, (2, 2), 1, 0, (2, 2))).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].data.shape(), &[4, 1]);
        assert_eq!(m[0].data.data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn one_by_one_kernel_is_reshape() {
        let x: Tensor<f64> = randn(&[1, 3, 4, 5], &mut Rng::new(1), 0.0, 1.0);
        let g = geo(3, (1, 1), 1, 0, (4, 5));
        let m = unfold(&x, &g).unwrap();
        assert_eq!(m[0].data.shape(), &[3, 20]);
        assert_eq!(m[0].data.data(), x.data());
        let back = fold(&m[0], &g).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn zeros_unfold_to_zeros() {
        let x = Tensor::<f32>::zeros(&[2, 2, 5, 5]);
        for m in unfold(&x, &geo(2, (3, 3), 1, 1, (5, 5))).unwrap() {
            assert!(m.data.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn non_overlapping_round_trip() {
        let x: Tensor<f64> = randn(&[1, 2, 4, 6], &mut Rng::new(2), 0.0, 1.0);
        let g = geo(2, (2, 2), 2, 0, (4, 6));
        let m = unfold(&x, &g).unwrap();
        assert_eq!(fold(&m[0], &g).unwrap().data(), x.data());
    }

    #[test]
    fn overlapping_row_counts_middle_twice() {
        let (a, b, c) = (1.5, -2.0, 4.0);
        let x = Tensor::<f64>::from_f64(&[1, 1, 1, 3], &[a, b, c]).unwrap();
        let g = geo(1, (1, 2), 1, 0, (1, 3));
        let m = unfold(&x, &g).unwrap();
        assert_eq!(m[0].data.data(), &[a, b, b, c]);
        assert_eq!(fold(&m[0], &g).unwrap().data(), &[a, 2.0 * b, c]);
    }

    #[test]
    fn padding_and_order() {
        // 1 channel, 2x2 input, 3x3 kernel, pad 1 -> 2x2 output, I = 9
        let x = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[1., 2., 3., 4.]).unwrap();
        let m = unfold(&x, &geo(1, (3, 3), 1, 1, (2, 2))).unwrap();
        // column 0 is centered on (0,0)
        assert_eq!(m[0].column(0), vec![0., 0., 0., 0., 1., 2., 0., 3., 4.]);
        assert_eq!(m[0].column(3), vec![1., 2., 0., 3., 4., 0., 0., 0., 0.]);
    }

    #[test]
    fn empty_output_is_geometry_error() {
        assert!(matches!(
            ConvGeometry::square(1, 1, 5, 1, 0, (3, 3)),
            Err(Error::Geometry(_))
        ));
        assert!(ConvGeometry::square(1, 1, 3, 0, 0, (3, 3)).is_err());
    }

    #[test]
    fn fold_rejects_wrong_shape() {
        let g = geo(1, (2, 2), 1, 0, (3, 3));
        let bad = Im2ColMatrix {
            data: Tensor::<f64>::zeros(&[4, 3]),
            geometry: g,
        };
        assert!(fold(&bad, &g).is_err());
    }

    #[test]
    fn unfold_fold_is_patch_count_multiplier() {
        let g = geo(1, (3, 3), 1, 1, (4, 4));
        let x: Tensor<f64> = randn(&[1, 1, 4, 4], &mut Rng::new(9), 0.0, 1.0);
        let ones = Tensor::<f64>::full(&[1, 1, 4, 4], 1.0);
        let counts = fold(&unfold(&ones, &g).unwrap()[0], &g).unwrap();
        let folded = fold(&unfold(&x, &g).unwrap()[0], &g).unwrap();
        for ((f, c), v) in folded.data().iter().zip(counts.data()).zip(x.data()) {
            assert!((f - c * v).abs() < 1e-12);
        }
        // corners see 4 patches, centre sees 9
        assert_eq!(counts.data()[0], 4.0);
        assert_eq!(counts.data()[5], 9.0);
    }

    proptest! {
        #[test]
        fn fold_is_adjoint_of_unfold(
            c in 1usize..4, kh in 1usize..4, kw in 1usize..4,
            s in 1usize..3, p in 0usize..2, h in 3usize..8, w in 3usize..8,
            seed in 0u64..10_000,
        ) {
            let g = ConvGeometry::new(c, 1, (kh, kw), (s, s), (p, p), (h, w));
            prop_assume!(g.is_ok());
            let g = g.unwrap();
            let mut rng = Rng::new(seed);
            let x: Tensor<f64> = randn(&[1, c, h, w], &mut rng, 0.0, 1.0);
            let u: Tensor<f64> = randn(&[g.patch_len(), g.positions()], &mut rng, 0.0, 1.0);
            let lhs = unfold(&x, &g).unwrap()[0].data.dot(&u).unwrap();
            let fu = fold(&Im2ColMatrix { data: u, geometry: g }, &g).unwrap();
            let rhs: f64 = x.data().iter().zip(fu.data()).map(|(a, b)| a * b).sum();
            let scale = lhs.abs().max(rhs.abs()).max(1e-300);
            prop_assert!((lhs - rhs).abs() / scale < 1e-10, "{} vs {}", lhs, rhs);
        }
    }
}
