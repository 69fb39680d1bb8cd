//! 2-d convolution kernels (im2col + small dense products).

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

use super::axpy;
use super::dot;

/// Boundary handling for convolution padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PadMode {
    Zeros,
    /// Wrap-around padding; used by the translation-covariance tests.
    Periodic,
}

#[inline]
fn wrap(i: usize, pad: usize, n: usize) -> usize {
    (i as i64 - pad as i64).rem_euclid(n as i64) as usize
}

fn pad_input(input: &Tensor, pad: usize, mode: PadMode) -> Tensor {
    if pad == 0 {
        return input.clone();
    }
    let shape = input.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = Tensor::zeros(&[c, hp, wp]);
    let src = input.data();
    let dst = out.data_mut();
    for ci in 0..c {
        for y in 0..hp {
            for x in 0..wp {
                let (sy, sx) = match mode {
                    PadMode::Zeros => {
                        if y < pad || y >= h + pad || x < pad || x >= w + pad {
                            continue;
                        }
                        (y - pad, x - pad)
                    }
                    PadMode::Periodic => (wrap(y, pad, h), wrap(x, pad, w)),
                };
                dst[(ci * hp + y) * wp + x] = src[(ci * h + sy) * w + sx];
            }
        }
    }
    out
}

/// Fold gradients on the padded grid back onto the original grid.
fn unpad_grad(dpadded: &Tensor, pad: usize, mode: PadMode, orig: &[usize]) -> Tensor {
    if pad == 0 {
        return dpadded.clone();
    }
    let (c, h, w) = (orig[0], orig[1], orig[2]);
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = Tensor::zeros(orig);
    let src = dpadded.data();
    let dst = out.data_mut();
    for ci in 0..c {
        for y in 0..hp {
            for x in 0..wp {
                let v = src[(ci * hp + y) * wp + x];
                if v == 0.0 {
                    continue;
                }
                match mode {
                    PadMode::Zeros => {
                        if y >= pad && y < h + pad && x >= pad && x < w + pad {
                            dst[(ci * h + (y - pad)) * w + (x - pad)] += v;
                        }
                    }
                    PadMode::Periodic => {
                        let (sy, sx) = (wrap(y, pad, h), wrap(x, pad, w));
                        dst[(ci * h + sy) * w + sx] += v;
                    }
                }
            }
        }
    }
    out
}

fn check_shapes(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    let ishape = input.shape();
    let wshape = weight.shape();
    if ishape.len() != 3 || wshape.len() != 4 {
        return Err(Error::Shape(format!(
            "conv2d expects input [c,h,w] and weight [o,c,k,k], got {ishape:?} / {wshape:?}"
        )));
    }
    let (cin, h, w) = (ishape[0], ishape[1], ishape[2]);
    let (cout, wc, k, k2) = (wshape[0], wshape[1], wshape[2], wshape[3]);
    if wc != cin || k != k2 {
        return Err(Error::Shape(format!(
            "conv2d weight {wshape:?} incompatible with input {ishape:?}"
        )));
    }
    if bias.shape() != [cout] {
        return Err(Error::Shape(format!(
            "conv2d bias {:?} must be [{cout}]",
            bias.shape()
        )));
    }
    let _ = (h, w);
    Ok((cin, cout, k, h, w))
}

fn out_hw(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<(usize, usize)> {
    let hp = h + 2 * pad;
    let wp = w + 2 * pad;
    if hp < k || wp < k || stride == 0 {
        return Err(Error::Shape(format!(
            "conv2d: kernel {k} / stride {stride} too large for padded {hp}x{wp}"
        )));
    }
    Ok(((hp - k) / stride + 1, (wp - k) / stride + 1))
}

/// Lay out each output position's receptive field as a contiguous row:
/// `cols[pos * q ..][ci * k * k + ky * k + kx]`.
fn im2col(padded: &Tensor, cin: usize, k: usize, stride: usize, ho: usize, wo: usize) -> Vec<f64> {
    let shape = padded.shape();
    let (hp, wp) = (shape[1], shape[2]);
    let q = cin * k * k;
    let data = padded.data();
    let mut cols = vec![0.0; ho * wo * q];
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &mut cols[(oy * wo + ox) * q..(oy * wo + ox + 1) * q];
            for ci in 0..cin {
                for ky in 0..k {
                    let src = &data[(ci * hp + oy * stride + ky) * wp + ox * stride..];
                    let dst = &mut row[ci * k * k + ky * k..ci * k * k + ky * k + k];
                    dst.copy_from_slice(&src[..k]);
                }
            }
        }
    }
    cols
}

pub(super) fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
    mode: PadMode,
) -> Result<Tensor> {
    let (cin, cout, k, h, w) = check_shapes(input, weight, bias)?;
    let (ho, wo) = out_hw(h, w, k, stride, pad)?;
    let padded = pad_input(input, pad, mode);
    let cols = im2col(&padded, cin, k, stride, ho, wo);
    let q = cin * k * k;
    let wdata = weight.data();
    let bdata = bias.data();
    let mut out = vec![0.0; cout * ho * wo];
    for pos in 0..ho * wo {
        let col = &cols[pos * q..(pos + 1) * q];
        for o in 0..cout {
            out[o * ho * wo + pos] = bdata[o] + dot(&wdata[o * q..(o + 1) * q], col);
        }
    }
    Tensor::from_vec(&[cout, ho, wo], out)
}

#[allow(clippy::too_many_arguments)]
pub(super) fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    dout: &Tensor,
    stride: usize,
    pad: usize,
    mode: PadMode,
    need_din: bool,
    need_dw: bool,
    need_db: bool,
) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
    let ishape = input.shape();
    let wshape = weight.shape();
    let (cin, k) = (ishape[0], wshape[2]);
    let cout = wshape[0];
    let oshape = dout.shape();
    let (ho, wo) = (oshape[1], oshape[2]);
    let q = cin * k * k;
    let wdata = weight.data();
    let gdata = dout.data();

    let db = if need_db {
        let mut db = vec![0.0; cout];
        for (o, db) in db.iter_mut().enumerate() {
            *db = gdata[o * ho * wo..(o + 1) * ho * wo].iter().sum();
        }
        Some(Tensor::from_vec(&[cout], db)?)
    } else {
        None
    };

    if !need_din && !need_dw {
        return Ok((None, None, db));
    }

    let padded = pad_input(input, pad, mode);
    let cols = im2col(&padded, cin, k, stride, ho, wo);

    let dw = if need_dw {
        let mut dw = vec![0.0; cout * q];
        for pos in 0..ho * wo {
            let col = &cols[pos * q..(pos + 1) * q];
            for o in 0..cout {
                axpy(&mut dw[o * q..(o + 1) * q], gdata[o * ho * wo + pos], col);
            }
        }
        Some(Tensor::from_vec(wshape, dw)?)
    } else {
        None
    };

    let din = if need_din {
        let mut dcols = vec![0.0; ho * wo * q];
        for pos in 0..ho * wo {
            let drow = &mut dcols[pos * q..(pos + 1) * q];
            for o in 0..cout {
                axpy(drow, gdata[o * ho * wo + pos], &wdata[o * q..(o + 1) * q]);
            }
        }
        // col2im scatter-add onto the padded grid, then fold back
        let pshape = padded.shape();
        let (hp, wp) = (pshape[1], pshape[2]);
        let mut dpad = Tensor::zeros(&[cin, hp, wp]);
        {
            let dp = dpad.data_mut();
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = &dcols[(oy * wo + ox) * q..(oy * wo + ox + 1) * q];
                    for ci in 0..cin {
                        for ky in 0..k {
                            let dst =
                                &mut dp[(ci * hp + oy * stride + ky) * wp + ox * stride..];
                            axpy(&mut dst[..k], 1.0, &row[ci * k * k + ky * k..ci * k * k + ky * k + k]);
                        }
                    }
                }
            }
        }
        Some(unpad_grad(&dpad, pad, mode, ishape))
    } else {
        None
    };

    Ok((din, dw, db))
}
