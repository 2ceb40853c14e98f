//! Batch normalization over `N x C x H x W` with per-channel statistics.

use super::{BnSaved, Mode, Op, Tape, TensorId};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Per-channel running statistics for inference-mode batch norm.
///
/// The first training batch seeds the statistics; later batches blend with
/// momentum 0.9. The running variance stores the unbiased batch estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState {
    mean: Vec<f64>,
    var: Vec<f64>,
    initialized: bool,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        BnState {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            initialized: false,
        }
    }

    pub fn from_parts(mean: Vec<f64>, var: Vec<f64>, initialized: bool) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::shape("bn_state", "var", mean.len(), var.len()));
        }
        Ok(BnState {
            mean,
            var,
            initialized,
        })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn initialized(&self) -> bool {
        self.initialized
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn var(&self) -> &[f64] {
        &self.var
    }

    fn update(&mut self, batch_mean: &[f64], batch_var_unbiased: &[f64]) {
        if self.initialized {
            for c in 0..self.mean.len() {
                self.mean[c] = BN_MOMENTUM * self.mean[c] + (1.0 - BN_MOMENTUM) * batch_mean[c];
                self.var[c] = BN_MOMENTUM * self.var[c] + (1.0 - BN_MOMENTUM) * batch_var_unbiased[c];
            }
        } else {
            self.mean.copy_from_slice(batch_mean);
            self.var.copy_from_slice(batch_var_unbiased);
            self.initialized = true;
        }
    }
}

impl Tape {
    /// Batch normalization with learned per-channel scale `gamma` and shift
    /// `beta`.
    ///
    /// Train mode normalizes by the biased batch statistics over `N,H,W`
    /// (eps 1e-5), updates `state`, and is differentiable through the batch
    /// statistics. Eval mode normalizes by the running statistics and errors
    /// if they were never initialized.
    pub fn batch_norm(
        &mut self,
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mode: Mode,
        state: &mut BnState,
    ) -> Result<TensorId> {
        let [n, c, h, w] = self.dims4(input, "batch_norm")?;
        if self.shape(gamma) != [c] {
            return Err(Error::shape("batch_norm", "gamma", format!("[{c}]"), format!("{:?}", self.shape(gamma))));
        }
        if self.shape(beta) != [c] {
            return Err(Error::shape("batch_norm", "beta", format!("[{c}]"), format!("{:?}", self.shape(beta))));
        }
        if state.channels() != c {
            return Err(Error::shape("batch_norm", "state channels", c, state.channels()));
        }
        match mode {
            Mode::Train => self.batch_norm_train(input, gamma, beta, state, [n, c, h, w]),
            Mode::Eval => self.batch_norm_eval(input, gamma, beta, state, [n, c, h, w]),
        }
    }

    fn batch_norm_train(
        &mut self,
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        state: &mut BnState,
        [n, c, h, w]: [usize; 4],
    ) -> Result<TensorId> {
        let hw = h * w;
        let m = (n * hw) as f64;
        let src = self.data(input);
        let ga = self.data(gamma);
        let be = self.data(beta);

        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for cc in 0..c {
            let mut s = 0.0;
            for nn in 0..n {
                let plane = &src[(nn * c + cc) * hw..][..hw];
                s += plane.iter().sum::<f64>();
            }
            let mu = s / m;
            let mut v = 0.0;
            for nn in 0..n {
                let plane = &src[(nn * c + cc) * hw..][..hw];
                v += plane.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>();
            }
            mean[cc] = mu;
            var[cc] = v / m;
        }

        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut x_hat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        for nn in 0..n {
            for cc in 0..c {
                let base = (nn * c + cc) * hw;
                let (mu, is, g, b) = (mean[cc], inv_std[cc], ga[cc], be[cc]);
                for p in 0..hw {
                    let xh = (src[base + p] - mu) * is;
                    x_hat[base + p] = xh;
                    out[base + p] = g * xh + b;
                }
            }
        }

        let var_unbiased: Vec<f64> = if n * hw > 1 {
            let f = m / (m - 1.0);
            var.iter().map(|&v| v * f).collect()
        } else {
            var.clone()
        };
        state.update(&mean, &var_unbiased);

        Ok(self.output(
            vec![n, c, h, w],
            out,
            &[input, gamma, beta],
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                saved: BnSaved { x_hat, inv_std },
            },
        ))
    }

    fn batch_norm_eval(
        &mut self,
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        state: &BnState,
        [n, c, h, w]: [usize; 4],
    ) -> Result<TensorId> {
        if !state.initialized() {
            return Err(Error::Usage(
                "batch_norm eval called with uninitialized running statistics".into(),
            ));
        }
        let hw = h * w;
        let src = self.data(input);
        let ga = self.data(gamma);
        let be = self.data(beta);
        let mean = state.mean().to_vec();
        let inv_std: Vec<f64> = state.var().iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut out = vec![0.0; src.len()];
        for nn in 0..n {
            for cc in 0..c {
                let base = (nn * c + cc) * hw;
                let (mu, is, g, b) = (mean[cc], inv_std[cc], ga[cc], be[cc]);
                for p in 0..hw {
                    out[base + p] = g * (src[base + p] - mu) * is + b;
                }
            }
        }
        Ok(self.output(
            vec![n, c, h, w],
            out,
            &[input, gamma, beta],
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                mean,
                inv_std,
            },
        ))
    }
}

pub(super) fn batch_norm_train_backward(
    tape: &Tape,
    input: TensorId,
    gamma: TensorId,
    beta: TensorId,
    saved: &BnSaved,
    g: &[f64],
    scratch: &mut [Option<Vec<f64>>],
) {
    let [n, c, h, w] = tape.dims4(input, "batch_norm").expect("recorded shape");
    let hw = h * w;
    let m = (n * hw) as f64;
    let ga = tape.data(gamma);

    // Per-channel reductions of dy and dy*x_hat.
    let mut sum_dy = vec![0.0; c];
    let mut sum_dy_xh = vec![0.0; c];
    for nn in 0..n {
        for cc in 0..c {
            let base = (nn * c + cc) * hw;
            let mut s = 0.0;
            let mut sx = 0.0;
            for p in 0..hw {
                s += g[base + p];
                sx += g[base + p] * saved.x_hat[base + p];
            }
            sum_dy[cc] += s;
            sum_dy_xh[cc] += sx;
        }
    }

    if tape.wants_grad(beta) {
        let db = tape.acc(scratch, beta);
        for cc in 0..c {
            db[cc] += sum_dy[cc];
        }
    }
    if tape.wants_grad(gamma) {
        let dg = tape.acc(scratch, gamma);
        for cc in 0..c {
            dg[cc] += sum_dy_xh[cc];
        }
    }
    if tape.wants_grad(input) {
        let dst = tape.acc(scratch, input);
        for nn in 0..n {
            for cc in 0..c {
                let base = (nn * c + cc) * hw;
                let scale = ga[cc] * saved.inv_std[cc];
                let mean_dy = sum_dy[cc] / m;
                let mean_dy_xh = sum_dy_xh[cc] / m;
                for p in 0..hw {
                    dst[base + p] +=
                        scale * (g[base + p] - mean_dy - saved.x_hat[base + p] * mean_dy_xh);
                }
            }
        }
    }
}

pub(super) fn batch_norm_eval_backward(
    tape: &Tape,
    input: TensorId,
    gamma: TensorId,
    beta: TensorId,
    mean: &[f64],
    inv_std: &[f64],
    g: &[f64],
    scratch: &mut [Option<Vec<f64>>],
) {
    let [n, c, h, w] = tape.dims4(input, "batch_norm").expect("recorded shape");
    let hw = h * w;
    let src = tape.data(input);
    let ga = tape.data(gamma);

    if tape.wants_grad(beta) {
        let db = tape.acc(scratch, beta);
        for nn in 0..n {
            for cc in 0..c {
                let base = (nn * c + cc) * hw;
                db[cc] += g[base..base + hw].iter().sum::<f64>();
            }
        }
    }
    if tape.wants_grad(gamma) {
        let dg = tape.acc(scratch, gamma);
        for nn in 0..n {
            for cc in 0..c {
                let base = (nn * c + cc) * hw;
                let (mu, is) = (mean[cc], inv_std[cc]);
                let mut s = 0.0;
                for p in 0..hw {
                    s += g[base + p] * (src[base + p] - mu) * is;
                }
                dg[cc] += s;
            }
        }
    }
    if tape.wants_grad(input) {
        let dst = tape.acc(scratch, input);
        for nn in 0..n {
            for cc in 0..c {
                let base = (nn * c + cc) * hw;
                let scale = ga[cc] * inv_std[cc];
                for p in 0..hw {
                    dst[base + p] += g[base + p] * scale;
                }
            }
        }
    }
}
