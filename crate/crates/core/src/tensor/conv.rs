//! im2col-based 2-D convolution kernels.

use super::{gemm_nn, gemm_nt, gemm_tn, Scalar};
use crate::error::{Error, Result};

/// Geometry of a convolution over a `[B, C, H, W]` input with a
/// `[F, C, kh, kw]` kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("expected 4-d input and kernel, got {input:?} and {kernel:?}"),
            ));
        }
        if input[1] != kernel[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels, kernel expects {}", input[1], kernel[1]),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        let (h, w) = (input[2] + 2 * padding, input[3] + 2 * padding);
        if kernel[2] > h || kernel[3] > w {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {}x{} larger than padded input {h}x{w}", kernel[2], kernel[3]),
            ));
        }
        Ok(ConvGeom {
            batch: input[0],
            in_channels: input[1],
            height: input[2],
            width: input[3],
            filters: kernel[0],
            kernel_h: kernel[2],
            kernel_w: kernel[3],
            stride,
            padding,
            out_h: (h - kernel[2]) / stride + 1,
            out_w: (w - kernel[3]) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.filters, self.out_h, self.out_w]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn image_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    /// Size of the column buffer for the whole batch.
    pub(crate) fn cols_len(&self) -> usize {
        self.batch * self.patch_len() * self.positions()
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, image: &[T], cols: &mut [T]) {
    let positions = g.positions();
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let out = &mut cols[row * positions..(row + 1) * positions];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + ki) as isize - pad;
                    let dst = &mut out[oy * g.out_w..(oy + 1) * g.out_w];
                    if y < 0 || y >= g.height as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[y as usize * g.width..(y as usize + 1) * g.width];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let x = (ox * g.stride + kj) as isize - pad;
                        *d = if x < 0 || x >= g.width as isize {
                            T::zero()
                        } else {
                            src[x as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], image: &mut [T]) {
    let positions = g.positions();
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols[row * positions..(row + 1) * positions];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + ki) as isize - pad;
                    if y < 0 || y >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * g.width..(y as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let x = (ox * g.stride + kj) as isize - pad;
                        if x >= 0 && x < g.width as isize {
                            dst[x as usize] = dst[x as usize] + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward pass. Returns the output buffer and, when `keep_cols` is set, the
/// unfolded input needed by the kernel gradient.
pub(crate) fn forward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
    keep_cols: bool,
) -> (Vec<T>, Vec<T>) {
    let (patch, positions) = (g.patch_len(), g.positions());
    let per_out = g.filters * positions;
    let mut out = vec![T::zero(); g.batch * per_out];
    let mut saved = if keep_cols {
        vec![T::zero(); g.cols_len()]
    } else {
        Vec::new()
    };
    let mut scratch = vec![T::zero(); patch * positions];
    for b in 0..g.batch {
        let cols: &mut [T] = if keep_cols {
            &mut saved[b * patch * positions..(b + 1) * patch * positions]
        } else {
            &mut scratch
        };
        im2col(g, &input[b * g.image_len()..(b + 1) * g.image_len()], cols);
        let dst = &mut out[b * per_out..(b + 1) * per_out];
        if let Some(bias) = bias {
            for (f, chunk) in dst.chunks_mut(positions).enumerate() {
                chunk.fill(bias[f]);
            }
        }
        gemm_nn(kernel, cols, dst, g.filters, patch, positions);
    }
    (out, saved)
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn backward<T: Scalar>(
    g: &ConvGeom,
    grad_out: &[T],
    kernel: &[T],
    cols: &[T],
    want_input: bool,
    want_kernel: bool,
    want_bias: bool,
) -> ConvGrads<T> {
    let (patch, positions) = (g.patch_len(), g.positions());
    let per_out = g.filters * positions;
    let mut grads = ConvGrads {
        input: want_input.then(|| vec![T::zero(); g.batch * g.image_len()]),
        kernel: want_kernel.then(|| vec![T::zero(); kernel.len()]),
        bias: want_bias.then(|| vec![T::zero(); g.filters]),
    };
    let mut dcols = vec![T::zero(); patch * positions];
    for b in 0..g.batch {
        let gout = &grad_out[b * per_out..(b + 1) * per_out];
        if let Some(dk) = grads.kernel.as_mut() {
            let c = &cols[b * patch * positions..(b + 1) * patch * positions];
            gemm_nt(gout, c, dk, g.filters, positions, patch);
        }
        if let Some(db) = grads.bias.as_mut() {
            for (f, chunk) in gout.chunks(positions).enumerate() {
                db[f] = db[f] + chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(dx) = grads.input.as_mut() {
            dcols.fill(T::zero());
            gemm_tn(kernel, gout, &mut dcols, patch, g.filters, positions);
            col2im(g, &dcols, &mut dx[b * g.image_len()..(b + 1) * g.image_len()]);
        }
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as an oracle for the im2col path.
    fn naive(g: &ConvGeom, x: &[f64], k: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.batch * g.filters * g.out_h * g.out_w];
        for b in 0..g.batch {
            for f in 0..g.filters {
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let mut acc = 0.0;
                        for c in 0..g.in_channels {
                            for i in 0..g.kernel_h {
                                for j in 0..g.kernel_w {
                                    let y = (oy * g.stride + i) as isize - g.padding as isize;
                                    let xx = (ox * g.stride + j) as isize - g.padding as isize;
                                    if y < 0 || xx < 0 || y >= g.height as isize || xx >= g.width as isize {
                                        continue;
                                    }
                                    acc += x[((b * g.in_channels + c) * g.height + y as usize) * g.width + xx as usize]
                                        * k[((f * g.in_channels + c) * g.kernel_h + i) * g.kernel_w + j];
                                }
                            }
                        }
                        out[((b * g.filters + f) * g.out_h + oy) * g.out_w + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_matches_direct_loops() {
        let g = ConvGeom::new(&[2, 3, 7, 6], &[4, 3, 3, 2], 2, 1).unwrap();
        let x: Vec<f64> = (0..2 * 3 * 7 * 6).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let k: Vec<f64> = (0..4 * 3 * 3 * 2).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        let (out, _) = forward(&g, &x, &k, None, false);
        assert_eq!(out, naive(&g, &x, &k));
    }

    #[test]
    fn output_size_formula() {
        let g = ConvGeom::new(&[1, 1, 48, 48], &[16, 1, 3, 3], 2, 1).unwrap();
        assert_eq!((g.out_h, g.out_w), (24, 24));
        let g = ConvGeom::new(&[1, 1, 5, 5], &[1, 1, 3, 3], 1, 0).unwrap();
        assert_eq!((g.out_h, g.out_w), (3, 3));
        assert!(ConvGeom::new(&[1, 1, 2, 2], &[1, 1, 3, 3], 1, 0).is_err());
    }
}
