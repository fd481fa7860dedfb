//! 2-D cross-correlation and average pooling on `N × C × H × W` tensors.
//!
//! Convolution lowers each sample to a `(OH·OW) × (C·KH·KW)` patch matrix and
//! multiplies it by the kernel. Patch matrices are built per sample, so
//! parallel im2col/col2im writes disjoint memory and the GEMM that follows
//! sees the same operands regardless of thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{Backward, Graph, Var};
use crate::tensor::{Real, Tensor};

/// Upper bound on patch-matrix elements materialized at once.
const PATCH_BUDGET: usize = 1 << 23;

/// Spatial size after a window of `kernel` slides with `stride` over
/// `input + 2·padding`.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::dim("stride must be at least 1"));
    }
    let padded = input + 2 * padding;
    if kernel == 0 || kernel > padded {
        return Err(Error::dim(format!(
            "kernel {kernel} does not fit padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (&[batch, in_channels, height, width], &[out_channels, kc, kernel_h, kernel_w]) =
            (input, kernel)
        else {
            return Err(Error::dim(format!(
                "conv2d needs NCHW input and OCKK kernel, got {input:?} and {kernel:?}"
            )));
        };
        if kc != in_channels {
            return Err(Error::dim(format!(
                "kernel expects {kc} input channels, input has {in_channels}"
            )));
        }
        let out_h = conv_output_size(height, kernel_h, stride, padding)?;
        let out_w = conv_output_size(width, kernel_w, stride, padding)?;
        Ok(Self {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn chunk(&self) -> usize {
        (PATCH_BUDGET / (self.patch_len() * self.positions()).max(1)).clamp(1, self.batch.max(1))
    }

    /// Input offset for patch entry `(c, ki, kj)` at output `(oy, ox)`.
    #[inline]
    fn source(&self, c: usize, ki: usize, kj: usize, oy: usize, ox: usize) -> Option<usize> {
        let y = (oy * self.stride + ki).checked_sub(self.padding)?;
        let x = (ox * self.stride + kj).checked_sub(self.padding)?;
        (y < self.height && x < self.width).then(|| (c * self.height + y) * self.width + x)
    }

    fn im2col<T: Real>(&self, image: &[T], cols: &mut [T]) {
        let plen = self.patch_len();
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let row = &mut cols[(oy * self.out_w + ox) * plen..][..plen];
                let mut idx = 0;
                for c in 0..self.in_channels {
                    for ki in 0..self.kernel_h {
                        for kj in 0..self.kernel_w {
                            row[idx] = self
                                .source(c, ki, kj, oy, ox)
                                .map_or(T::zero(), |s| image[s]);
                            idx += 1;
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], image: &mut [T]) {
        let plen = self.patch_len();
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let row = &cols[(oy * self.out_w + ox) * plen..][..plen];
                let mut idx = 0;
                for c in 0..self.in_channels {
                    for ki in 0..self.kernel_h {
                        for kj in 0..self.kernel_w {
                            if let Some(s) = self.source(c, ki, kj, oy, ox) {
                                image[s] = image[s] + row[idx];
                            }
                            idx += 1;
                        }
                    }
                }
            }
        }
    }

    fn build_patches<T: Real>(&self, input: &[T], first: usize, count: usize) -> Vec<T> {
        let img_len = self.in_channels * self.height * self.width;
        let block = self.positions() * self.patch_len();
        let mut cols = vec![T::zero(); count * block];
        cols.par_chunks_mut(block)
            .enumerate()
            .for_each(|(i, dst)| {
                let n = first + i;
                self.im2col(&input[n * img_len..(n + 1) * img_len], dst);
            });
        cols
    }
}

/// Forward convolution without recording.
pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let geo = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    let (plen, pos, oc) = (geo.patch_len(), geo.positions(), geo.out_channels);
    let mut out = vec![T::zero(); geo.batch * oc * pos];
    let chunk = geo.chunk();
    let mut scratch = Vec::new();
    for first in (0..geo.batch).step_by(chunk) {
        let count = chunk.min(geo.batch - first);
        let cols = geo.build_patches(input.data(), first, count);
        // [count·pos, plen] × [plen, oc] via the kernel stored as [oc, plen].
        scratch.clear();
        scratch.resize(count * pos * oc, T::zero());
        T::gemm(false, true, count * pos, oc, plen, T::one(), &cols, kernel.data(), T::zero(), &mut scratch);
        for i in 0..count {
            let dst = &mut out[(first + i) * oc * pos..][..oc * pos];
            for p in 0..pos {
                for o in 0..oc {
                    dst[o * pos + p] = scratch[(i * pos + p) * oc + o];
                }
            }
        }
    }
    Tensor::new(&[geo.batch, oc, geo.out_h, geo.out_w], out)
}

struct Conv2dBackward {
    geo: ConvGeometry,
}

impl<T: Real> Backward<T> for Conv2dBackward {
    fn backward(&self, up: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let geo = &self.geo;
        let (input, kernel) = (inputs[0], inputs[1]);
        let (plen, pos, oc) = (geo.patch_len(), geo.positions(), geo.out_channels);
        let img_len = geo.in_channels * geo.height * geo.width;
        let mut grad_input = vec![T::zero(); input.len()];
        let mut grad_kernel = vec![T::zero(); kernel.len()];
        let chunk = geo.chunk();
        for first in (0..geo.batch).step_by(chunk) {
            let count = chunk.min(geo.batch - first);
            // Upstream rearranged to [count·pos, oc].
            let mut dy = vec![T::zero(); count * pos * oc];
            for i in 0..count {
                let src = &up.data()[(first + i) * oc * pos..][..oc * pos];
                for o in 0..oc {
                    for p in 0..pos {
                        dy[(i * pos + p) * oc + o] = src[o * pos + p];
                    }
                }
            }
            let cols = geo.build_patches(input.data(), first, count);
            // dK[oc, plen] += dyᵀ · cols
            T::gemm(true, false, oc, plen, count * pos, T::one(), &dy, &cols, T::one(), &mut grad_kernel);
            // dcols[count·pos, plen] = dy · K
            let mut dcols = vec![T::zero(); count * pos * plen];
            T::gemm(false, false, count * pos, plen, oc, T::one(), &dy, kernel.data(), T::zero(), &mut dcols);
            grad_input[first * img_len..(first + count) * img_len]
                .par_chunks_mut(img_len)
                .zip(dcols.par_chunks(pos * plen))
                .for_each(|(img, cols)| geo.col2im(cols, img));
        }
        Ok(vec![
            Some(Tensor::new(input.shape(), grad_input)?),
            Some(Tensor::new(kernel.shape(), grad_kernel)?),
        ])
    }

    fn name(&self) -> &'static str {
        "conv2d"
    }
}

/// Mean over non-overlapping `window × window` tiles.
pub fn avgpool2d_forward<T: Real>(input: &Tensor<T>, window: usize) -> Result<Tensor<T>> {
    let &[n, c, h, w] = input.shape() else {
        return Err(Error::dim(format!("avgpool2d needs NCHW, got {:?}", input.shape())));
    };
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::dim(format!(
            "spatial dims {h}x{w} are not divisible by window {window}"
        )));
    }
    let (oh, ow) = (h / window, w / window);
    let inv = T::one() / T::from_usize(window * window).unwrap();
    let src = input.data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for dy in 0..window {
                    for dx in 0..window {
                        acc = acc + src[base + (oy * window + dy) * w + ox * window + dx];
                    }
                }
                out[(plane * oh + oy) * ow + ox] = acc * inv;
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

struct AvgPoolBackward {
    window: usize,
}

impl<T: Real> Backward<T> for AvgPoolBackward {
    fn backward(&self, up: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let shape = inputs[0].shape();
        let (h, w) = (shape[2], shape[3]);
        let win = self.window;
        let (oh, ow) = (h / win, w / win);
        let inv = T::one() / T::from_usize(win * win).unwrap();
        let mut g = vec![T::zero(); inputs[0].len()];
        for plane in 0..shape[0] * shape[1] {
            for y in 0..h {
                for x in 0..w {
                    g[(plane * h + y) * w + x] = up.data()[(plane * oh + y / win) * ow + x / win] * inv;
                }
            }
        }
        Ok(vec![Some(Tensor::new(shape, g)?)])
    }

    fn name(&self) -> &'static str {
        "avgpool2d"
    }
}

impl<T: Real> Graph<T> {
    /// Zero-padded cross-correlation of `input [N,C,H,W]` with `kernel [O,C,KH,KW]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let geo = ConvGeometry::new(self.shape(input), self.shape(kernel), stride, padding)?;
        let value = conv2d_forward(self.value(input), self.value(kernel), stride, padding)?;
        Ok(self.record(&[input, kernel], value, Box::new(Conv2dBackward { geo })))
    }

    pub fn avgpool2d(&mut self, input: Var, window: usize) -> Result<Var> {
        let value = avgpool2d_forward(self.value(input), window)?;
        Ok(self.record(&[input], value, Box::new(AvgPoolBackward { window })))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct 7-loop convolution used as an independent reference.
    fn naive_conv(input: &Tensor<f64>, kernel: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let s = input.shape();
        let k = kernel.shape();
        let oh = (s[2] + 2 * pad - k[2]) / stride + 1;
        let ow = (s[3] + 2 * pad - k[3]) / stride + 1;
        let mut out = vec![0.0; s[0] * k[0] * oh * ow];
        for n in 0..s[0] {
            for o in 0..k[0] {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..s[1] {
                            for i in 0..k[2] {
                                for j in 0..k[3] {
                                    let iy = (y * stride + i) as isize - pad as isize;
                                    let ix = (x * stride + j) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < s[2] && (ix as usize) < s[3] {
                                        acc += input.data()[((n * s[1] + c) * s[2] + iy as usize) * s[3] + ix as usize]
                                            * kernel.data()[((o * k[1] + c) * k[2] + i) * k[3] + j];
                                    }
                                }
                            }
                        }
                        out[((n * k[0] + o) * oh + y) * ow + x] = acc;
                    }
                }
            }
        }
        Tensor::new(&[s[0], k[0], oh, ow], out).unwrap()
    }

    #[test]
    fn ones_on_ones_sums_to_nine() {
        let out = conv2d_forward(&Tensor::<f32>::ones(&[1, 1, 3, 3]), &Tensor::ones(&[1, 1, 3, 3]), 1, 0).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.item(), 9.0);
    }

    #[test]
    fn stride_two_corner_kernel_subsamples() {
        let input = Tensor::<f64>::from_f64(&[1, 1, 4, 4], &(0..16).map(f64::from).collect::<Vec<_>>()).unwrap();
        let kernel = Tensor::from_f64(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 0.0]).unwrap();
        let out = conv2d_forward(&input, &kernel, 2, 0).unwrap();
        assert_eq!(out.data(), &[0.0, 2.0, 8.0, 10.0]);
    }

    #[test]
    fn matches_naive_with_padding_and_stride() {
        let input = Tensor::<f64>::from_f64(
            &[2, 3, 5, 6],
            &(0..180).map(|i| ((i * 37 % 17) as f64 - 8.0) / 7.0).collect::<Vec<_>>(),
        )
        .unwrap();
        let kernel = Tensor::from_f64(
            &[4, 3, 3, 2],
            &(0..72).map(|i| ((i * 13 % 11) as f64 - 5.0) / 5.0).collect::<Vec<_>>(),
        )
        .unwrap();
        for (stride, pad) in [(1, 0), (2, 1), (3, 2)] {
            let fast = conv2d_forward(&input, &kernel, stride, pad).unwrap();
            let slow = naive_conv(&input, &kernel, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn invalid_geometry_is_rejected() {
        let x = Tensor::<f32>::ones(&[1, 1, 3, 3]);
        assert!(conv2d_forward(&x, &Tensor::ones(&[1, 1, 4, 4]), 1, 0).is_err());
        assert!(conv2d_forward(&x, &Tensor::ones(&[1, 1, 2, 2]), 0, 0).is_err());
        assert!(conv2d_forward(&x, &Tensor::ones(&[1, 2, 2, 2]), 1, 0).is_err());
        assert!(conv2d_forward(&x, &Tensor::ones(&[1, 1, 4, 4]), 1, 1).is_ok());
    }

    #[test]
    fn avgpool_values_and_gradient_spread() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(avgpool2d_forward(&x, 2).unwrap().item(), 2.5);
        let c = Tensor::<f64>::full(&[2, 3, 4, 4], 0.7);
        assert!(avgpool2d_forward(&c, 2).unwrap().data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        assert!(avgpool2d_forward(&Tensor::<f64>::ones(&[1, 1, 3, 4]), 2).is_err());

        let mut g = Graph::<f64>::new();
        let v = g.leaf(x);
        let p = g.avgpool2d(v, 2).unwrap();
        let w = g.constant(Tensor::scalar(3.0).reshape(&[1, 1, 1, 1]).unwrap());
        let p = g.mul(p, w).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(v).unwrap().data(), &[0.75; 4]);
    }
}
