//! 3x3 same-padded convolution and 2x2 max pooling kernels.
//!
//! The convolution is expressed as a matrix product between the flattened
//! kernel bank (O, C*9) and an im2col patch matrix (C*9, H*W) built per
//! image, so the heavy lifting runs through one GEMM per image.

use super::Tensor;
use crate::error::{Error, Result};
use ndarray::ArrayView2;

const K: usize = 3;
const PAD: isize = 1;

/// Split an input shape into (batch, C, H, W, had_batch_dim).
fn unpack_input(shape: &[usize]) -> Result<(usize, usize, usize, usize, bool)> {
    match shape.len() {
        3 => Ok((1, shape[0], shape[1], shape[2], false)),
        4 => Ok((shape[0], shape[1], shape[2], shape[3], true)),
        _ => Err(Error::shape("conv2d", format!("input {:?}", shape))),
    }
}

pub(crate) fn conv_output_shape(input: &[usize], kernels: &[usize]) -> Result<Vec<usize>> {
    let (b, c, h, w, batched) = unpack_input(input)?;
    if kernels.len() != 4 || kernels[2] != K || kernels[3] != K {
        return Err(Error::shape("conv2d", format!("kernels {:?}", kernels)));
    }
    if kernels[1] != c {
        return Err(Error::shape(
            "conv2d",
            format!("input has {} channels, kernels expect {}", c, kernels[1]),
        ));
    }
    if h == 0 || w == 0 {
        return Err(Error::shape("conv2d", "zero spatial extent".to_string()));
    }
    let o = kernels[0];
    Ok(if batched {
        vec![b, o, h, w]
    } else {
        vec![o, h, w]
    })
}

/// Patch matrix for one image: out[(ci*9 + ky*3 + kx) * (h*w) + y*w + x].
fn im2col(img: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut cols = vec![0.0; c * K * K * hw];
    for ci in 0..c {
        for ky in 0..K {
            for kx in 0..K {
                let row = (ci * K + ky) * K + kx;
                let base = row * hw;
                for y in 0..h {
                    let sy = y as isize + ky as isize - PAD;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + kx as isize - PAD;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        cols[base + y * w + x] = img[(ci * h + sy as usize) * w + sx as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add the patch-matrix gradient back onto an image gradient.
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, dimg: &mut [f64]) {
    let hw = h * w;
    for ci in 0..c {
        for ky in 0..K {
            for kx in 0..K {
                let row = (ci * K + ky) * K + kx;
                let base = row * hw;
                for y in 0..h {
                    let sy = y as isize + ky as isize - PAD;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + kx as isize - PAD;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        dimg[(ci * h + sy as usize) * w + sx as usize] += cols[base + y * w + x];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(input: &Tensor, kernels: &Tensor) -> Result<Tensor> {
    let out_shape = conv_output_shape(input.shape(), kernels.shape())?;
    let (b, c, h, w, _) = unpack_input(input.shape())?;
    let o = kernels.shape()[0];
    let hw = h * w;
    let ck = c * K * K;
    let kmat = ArrayView2::from_shape((o, ck), kernels.data()).expect("kernel view");
    let mut out = vec![0.0; b * o * hw];
    for bi in 0..b {
        let img = &input.data()[bi * c * hw..(bi + 1) * c * hw];
        let cols = im2col(img, c, h, w);
        let cv = ArrayView2::from_shape((ck, hw), &cols).expect("cols view");
        let res = kmat.dot(&cv);
        out[bi * o * hw..(bi + 1) * o * hw]
            .copy_from_slice(res.as_standard_layout().as_slice().expect("gemm layout"));
    }
    Tensor::from_vec(out_shape, out)
}

/// Gradients of the convolution w.r.t. input and kernels; each side is only
/// computed when requested.
pub(crate) fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    g: &[f64],
    need_input: bool,
    need_kernels: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (b, c, h, w, _) = unpack_input(input.shape()).expect("checked in forward");
    let o = kernels.shape()[0];
    let hw = h * w;
    let ck = c * K * K;
    let kmat = ArrayView2::from_shape((o, ck), kernels.data()).expect("kernel view");
    let mut dk = if need_kernels { Some(vec![0.0; o * ck]) } else { None };
    let mut di = if need_input {
        Some(vec![0.0; input.numel()])
    } else {
        None
    };
    for bi in 0..b {
        let gmat = ArrayView2::from_shape((o, hw), &g[bi * o * hw..(bi + 1) * o * hw])
            .expect("grad view");
        if let Some(dk) = dk.as_mut() {
            let img = &input.data()[bi * c * hw..(bi + 1) * c * hw];
            let cols = im2col(img, c, h, w);
            let cv = ArrayView2::from_shape((ck, hw), &cols).expect("cols view");
            let contrib = gmat.dot(&cv.t());
            let contrib = contrib.as_standard_layout();
            for (a, &v) in dk.iter_mut().zip(contrib.as_slice().expect("gemm layout")) {
                *a += v;
            }
        }
        if let Some(di) = di.as_mut() {
            let dcols = kmat.t().dot(&gmat);
            let dcols = dcols.as_standard_layout();
            col2im(
                dcols.as_slice().expect("gemm layout"),
                c,
                h,
                w,
                &mut di[bi * c * hw..(bi + 1) * c * hw],
            );
        }
    }
    (di, dk)
}

fn pool_dim(d: usize) -> usize {
    (d / 2).max(1)
}

/// 2x2/stride-2 max pooling. Returns the pooled tensor and, per output
/// element, the flat index of the winning input element (first index wins
/// ties) for gradient routing.
pub(crate) fn maxpool2d_forward(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (b, c, h, w, batched) = unpack_input(input.shape())?;
    if h == 0 || w == 0 {
        return Err(Error::shape("maxpool2d", "zero spatial extent".to_string()));
    }
    let (oh, ow) = (pool_dim(h), pool_dim(w));
    let mut out = vec![0.0; b * c * oh * ow];
    let mut argmax = vec![0usize; out.len()];
    let data = input.data();
    for bi in 0..b {
        for ci in 0..c {
            let plane = (bi * c + ci) * h * w;
            let oplane = (bi * c + ci) * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let (y0, x0) = (2 * oy, 2 * ox);
                    let y1 = (y0 + 2).min(h);
                    let x1 = (x0 + 2).min(w);
                    let mut best_idx = plane + y0 * w + x0;
                    let mut best = data[best_idx];
                    for y in y0..y1 {
                        for x in x0..x1 {
                            let idx = plane + y * w + x;
                            if data[idx] > best {
                                best = data[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[oplane + oy * ow + ox] = best;
                    argmax[oplane + oy * ow + ox] = best_idx;
                }
            }
        }
    }
    let shape = if batched {
        vec![b, c, oh, ow]
    } else {
        vec![c, oh, ow]
    };
    Ok((Tensor::from_vec(shape, out)?, argmax))
}
