//! Direct convolution kernels: cross-correlation forward passes and their
//! gradients. Inner loops run over contiguous rows so the compiler can
//! vectorize them.

use super::{Op, Padding, Tape, TensorId};
use crate::error::{Error, Result};

/// Copy an `h x w` plane into the interior of a zeroed `(h+2py) x (w+2px)`
/// buffer.
fn pad_plane(src: &[f64], h: usize, w: usize, py: usize, px: usize, dst: &mut [f64]) {
    let pw = w + 2 * px;
    dst.fill(0.0);
    for y in 0..h {
        let d = (y + py) * pw + px;
        dst[d..d + w].copy_from_slice(&src[y * w..(y + 1) * w]);
    }
}

impl Tape {
    /// 2D cross-correlation with stride 1: `input` `[N,Cin,H,W]` against
    /// `kernel` `[Cout,Cin,Kh,Kw]` plus per-channel `bias`. Same padding
    /// zero-fills the border and preserves `H x W`; valid padding shrinks to
    /// `(H-Kh+1) x (W-Kw+1)`.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        bias: TensorId,
        padding: Padding,
    ) -> Result<TensorId> {
        let [n, cin, h, w] = self.dims4(input, "conv2d")?;
        let [cout, kcin, kh, kw] = self.dims4(kernel, "conv2d")?;
        if kcin != cin {
            return Err(Error::shape("conv2d", "Cin", cin, kcin));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape("conv2d", "KhxKw", "odd extents", format!("{kh}x{kw}")));
        }
        if self.shape(bias) != [cout] {
            return Err(Error::shape(
                "conv2d",
                "bias",
                format!("[{cout}]"),
                format!("{:?}", self.shape(bias)),
            ));
        }
        if padding == Padding::Valid && (h < kh || w < kw) {
            return Err(Error::shape(
                "conv2d",
                "HxW",
                format!(">= {kh}x{kw} for valid padding"),
                format!("{h}x{w}"),
            ));
        }
        let (ph, pw) = match padding {
            Padding::Same => ((kh - 1) / 2, (kw - 1) / 2),
            Padding::Valid => (0, 0),
        };
        let (oh, ow) = (h + 2 * ph - kh + 1, w + 2 * pw - kw + 1);
        let (bh, bw) = (h + 2 * ph, w + 2 * pw);

        let src = self.data(input);
        let ker = self.data(kernel);
        let b = self.data(bias);
        let mut out = vec![0.0; n * cout * oh * ow];
        let mut padded = vec![0.0; cin * bh * bw];
        for nn in 0..n {
            for ci in 0..cin {
                pad_plane(
                    &src[(nn * cin + ci) * h * w..][..h * w],
                    h,
                    w,
                    ph,
                    pw,
                    &mut padded[ci * bh * bw..][..bh * bw],
                );
            }
            for co in 0..cout {
                let oplane = &mut out[(nn * cout + co) * oh * ow..][..oh * ow];
                oplane.fill(b[co]);
                for ci in 0..cin {
                    let pplane = &padded[ci * bh * bw..][..bh * bw];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let k = ker[((co * cin + ci) * kh + ky) * kw + kx];
                            for y in 0..oh {
                                let srow = &pplane[(y + ky) * bw + kx..][..ow];
                                let drow = &mut oplane[y * ow..][..ow];
                                for x in 0..ow {
                                    drow[x] += k * srow[x];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(self.output(
            vec![n, cout, oh, ow],
            out,
            &[input, kernel, bias],
            Op::Conv2d {
                input,
                kernel,
                bias,
                padding,
            },
        ))
    }

    /// 2x2 transposed convolution with stride 2, halving the channel count:
    /// `input` `[N,C,H,W]`, `kernel` `[C,C/2,2,2]`, output `[N,C/2,2H,2W]`.
    /// Stride equals the kernel size, so output footprints are disjoint
    /// tiles.
    pub fn up_conv2(&mut self, input: TensorId, kernel: TensorId, bias: TensorId) -> Result<TensorId> {
        let [n, c, h, w] = self.dims4(input, "up_conv2")?;
        if c % 2 != 0 {
            return Err(Error::shape("up_conv2", "C", "even", c));
        }
        let cout = c / 2;
        if self.shape(kernel) != [c, cout, 2, 2] {
            return Err(Error::shape(
                "up_conv2",
                "kernel",
                format!("[{c}, {cout}, 2, 2]"),
                format!("{:?}", self.shape(kernel)),
            ));
        }
        if self.shape(bias) != [cout] {
            return Err(Error::shape(
                "up_conv2",
                "bias",
                format!("[{cout}]"),
                format!("{:?}", self.shape(bias)),
            ));
        }
        let (oh, ow) = (2 * h, 2 * w);
        let src = self.data(input);
        let ker = self.data(kernel);
        let b = self.data(bias);
        let mut out = vec![0.0; n * cout * oh * ow];
        for nn in 0..n {
            for co in 0..cout {
                let oplane = &mut out[(nn * cout + co) * oh * ow..][..oh * ow];
                oplane.fill(b[co]);
                for ci in 0..c {
                    let kbase = (ci * cout + co) * 4;
                    let (k00, k01, k10, k11) = (ker[kbase], ker[kbase + 1], ker[kbase + 2], ker[kbase + 3]);
                    let iplane = &src[(nn * c + ci) * h * w..][..h * w];
                    for y in 0..h {
                        for x in 0..w {
                            let v = iplane[y * w + x];
                            let t = (2 * y) * ow + 2 * x;
                            oplane[t] += v * k00;
                            oplane[t + 1] += v * k01;
                            oplane[t + ow] += v * k10;
                            oplane[t + ow + 1] += v * k11;
                        }
                    }
                }
            }
        }
        Ok(self.output(
            vec![n, cout, oh, ow],
            out,
            &[input, kernel, bias],
            Op::UpConv2 {
                input,
                kernel,
                bias,
            },
        ))
    }
}

pub(super) fn conv2d_backward(
    tape: &Tape,
    input: TensorId,
    kernel: TensorId,
    bias: TensorId,
    padding: Padding,
    g: &[f64],
    scratch: &mut [Option<Vec<f64>>],
) {
    let [n, cin, h, w] = tape.dims4(input, "conv2d").expect("recorded shape");
    let [cout, _, kh, kw] = tape.dims4(kernel, "conv2d").expect("recorded shape");
    let (ph, pw) = match padding {
        Padding::Same => ((kh - 1) / 2, (kw - 1) / 2),
        Padding::Valid => (0, 0),
    };
    let (oh, ow) = (h + 2 * ph - kh + 1, w + 2 * pw - kw + 1);
    let (bh, bw) = (h + 2 * ph, w + 2 * pw);
    let src = tape.data(input);
    let ker = tape.data(kernel);

    if tape.wants_grad(bias) {
        let db = tape.acc(scratch, bias);
        for nn in 0..n {
            for co in 0..cout {
                db[co] += g[(nn * cout + co) * oh * ow..][..oh * ow].iter().sum::<f64>();
            }
        }
    }

    if tape.wants_grad(kernel) {
        let mut dk = vec![0.0; ker.len()];
        let mut padded = vec![0.0; cin * bh * bw];
        for nn in 0..n {
            for ci in 0..cin {
                pad_plane(
                    &src[(nn * cin + ci) * h * w..][..h * w],
                    h,
                    w,
                    ph,
                    pw,
                    &mut padded[ci * bh * bw..][..bh * bw],
                );
            }
            for co in 0..cout {
                let gplane = &g[(nn * cout + co) * oh * ow..][..oh * ow];
                for ci in 0..cin {
                    let pplane = &padded[ci * bh * bw..][..bh * bw];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let mut s = 0.0;
                            for y in 0..oh {
                                let grow = &gplane[y * ow..][..ow];
                                let prow = &pplane[(y + ky) * bw + kx..][..ow];
                                for x in 0..ow {
                                    s += grow[x] * prow[x];
                                }
                            }
                            dk[((co * cin + ci) * kh + ky) * kw + kx] += s;
                        }
                    }
                }
            }
        }
        let dst = tape.acc(scratch, kernel);
        for (d, v) in dst.iter_mut().zip(&dk) {
            *d += v;
        }
    }

    if tape.wants_grad(input) {
        // dIn[i,j] = sum_k K[k] * dOut[i+p-k]; realized as a correlation of
        // the fully padded upstream gradient with the flipped kernel.
        let (gh, gw) = (oh + 2 * (kh - 1), ow + 2 * (kw - 1));
        let mut gpad = vec![0.0; cout * gh * gw];
        let mut din = vec![0.0; n * cin * h * w];
        for nn in 0..n {
            for co in 0..cout {
                pad_plane(
                    &g[(nn * cout + co) * oh * ow..][..oh * ow],
                    oh,
                    ow,
                    kh - 1,
                    kw - 1,
                    &mut gpad[co * gh * gw..][..gh * gw],
                );
            }
            for ci in 0..cin {
                let dplane = &mut din[(nn * cin + ci) * h * w..][..h * w];
                for co in 0..cout {
                    let gplane = &gpad[co * gh * gw..][..gh * gw];
                    for jy in 0..kh {
                        for jx in 0..kw {
                            let k = ker[((co * cin + ci) * kh + (kh - 1 - jy)) * kw + (kw - 1 - jx)];
                            for y in 0..h {
                                let srow = &gplane[(y + ph + jy) * gw + pw + jx..][..w];
                                let drow = &mut dplane[y * w..][..w];
                                for x in 0..w {
                                    drow[x] += k * srow[x];
                                }
                            }
                        }
                    }
                }
            }
        }
        let dst = tape.acc(scratch, input);
        for (d, v) in dst.iter_mut().zip(&din) {
            *d += v;
        }
    }
}

pub(super) fn up_conv2_backward(
    tape: &Tape,
    input: TensorId,
    kernel: TensorId,
    bias: TensorId,
    g: &[f64],
    scratch: &mut [Option<Vec<f64>>],
) {
    let [n, c, h, w] = tape.dims4(input, "up_conv2").expect("recorded shape");
    let cout = c / 2;
    let (oh, ow) = (2 * h, 2 * w);
    let src = tape.data(input);
    let ker = tape.data(kernel);

    if tape.wants_grad(bias) {
        let db = tape.acc(scratch, bias);
        for nn in 0..n {
            for co in 0..cout {
                db[co] += g[(nn * cout + co) * oh * ow..][..oh * ow].iter().sum::<f64>();
            }
        }
    }

    if tape.wants_grad(kernel) {
        let dk = tape.acc(scratch, kernel);
        for nn in 0..n {
            for ci in 0..c {
                let iplane = &src[(nn * c + ci) * h * w..][..h * w];
                for co in 0..cout {
                    let gplane = &g[(nn * cout + co) * oh * ow..][..oh * ow];
                    let kbase = (ci * cout + co) * 4;
                    let mut acc = [0.0; 4];
                    for y in 0..h {
                        for x in 0..w {
                            let v = iplane[y * w + x];
                            let t = (2 * y) * ow + 2 * x;
                            acc[0] += v * gplane[t];
                            acc[1] += v * gplane[t + 1];
                            acc[2] += v * gplane[t + ow];
                            acc[3] += v * gplane[t + ow + 1];
                        }
                    }
                    for (i, a) in acc.iter().enumerate() {
                        dk[kbase + i] += a;
                    }
                }
            }
        }
    }

    if tape.wants_grad(input) {
        let din = tape.acc(scratch, input);
        for nn in 0..n {
            for ci in 0..c {
                let dplane = &mut din[(nn * c + ci) * h * w..][..h * w];
                for co in 0..cout {
                    let gplane = &g[(nn * cout + co) * oh * ow..][..oh * ow];
                    let kbase = (ci * cout + co) * 4;
                    let (k00, k01, k10, k11) = (ker[kbase], ker[kbase + 1], ker[kbase + 2], ker[kbase + 3]);
                    for y in 0..h {
                        for x in 0..w {
                            let t = (2 * y) * ow + 2 * x;
                            dplane[y * w + x] += k00 * gplane[t]
                                + k01 * gplane[t + 1]
                                + k10 * gplane[t + ow]
                                + k11 * gplane[t + ow + 1];
                        }
                    }
                }
            }
        }
    }
}
