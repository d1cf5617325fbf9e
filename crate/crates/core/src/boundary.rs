//! Boundary-aware attention head.
//!
//! Coefficients are `sigmoid(restore(gelu(conv7×7(squeeze(y)))))`, one per
//! feature entry, and the head output is `y ⊙ coefficients`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::{self, GeluKind};
use crate::relation::eval;
use crate::tape::{Tape, Var};
use crate::tensor::{ParamId, ParamStore, Tensor};

pub const LOCAL_KERNEL: usize = 7;

#[derive(Clone, Debug)]
pub struct BoundaryAttention {
    pub squeeze: ParamId,
    pub local: ParamId,
    pub unsqueeze: ParamId,
    channels: usize,
    gelu: GeluKind,
}

impl BoundaryAttention {
    /// Squeeze and local weights are random; the restoring conv starts at
    /// zero so the initial coefficients are all exactly 0.5.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        ratio: usize,
        gelu: GeluKind,
        rng: &mut R,
    ) -> Result<Self> {
        if ratio == 0 || !channels.is_multiple_of(ratio) {
            return Err(Error::invalid(
                "boundary_attention",
                format!("compression ratio {ratio} does not divide {channels} channels"),
            ));
        }
        let hidden = channels / ratio;
        let k = LOCAL_KERNEL;
        let squeeze = store.add(
            format!("{prefix}.squeeze"),
            Tensor::randn(
                [hidden, channels, 1, 1],
                1.0 / (channels as f64).sqrt(),
                rng,
            ),
        )?;
        let local = store.add(
            format!("{prefix}.local"),
            Tensor::randn(
                [hidden, hidden, k, k],
                1.0 / ((k * k * hidden) as f64).sqrt(),
                rng,
            ),
        )?;
        let unsqueeze = store.add(
            format!("{prefix}.unsqueeze"),
            Tensor::zeros([channels, hidden, 1, 1]),
        )?;
        Ok(Self {
            squeeze,
            local,
            unsqueeze,
            channels,
            gelu,
        })
    }

    /// Closed-form parameter count: `2·C·(C/r) + 49·(C/r)²`.
    pub fn param_count(channels: usize, ratio: usize) -> usize {
        let hidden = channels / ratio;
        2 * channels * hidden + LOCAL_KERNEL * LOCAL_KERNEL * hidden * hidden
    }

    pub fn gelu(&self) -> GeluKind {
        self.gelu
    }

    pub fn coefficients_var(&self, tape: &mut Tape, store: &ParamStore, y: Var) -> Result<Var> {
        if tape.shape(y).first() != Some(&self.channels) {
            return Err(Error::invalid(
                "boundary_attention",
                format!(
                    "expected {} channels, got {:?}",
                    self.channels,
                    tape.shape(y)
                ),
            ));
        }
        let sq = tape.param(store, self.squeeze);
        let local = tape.param(store, self.local);
        let un = tape.param(store, self.unsqueeze);
        let s = tape.conv2d(y, sq)?;
        let l = tape.conv2d(s, local)?;
        let h = tape.gelu(l, self.gelu);
        let r = tape.conv2d(h, un)?;
        Ok(tape.sigmoid(r))
    }

    pub fn apply_var(&self, tape: &mut Tape, store: &ParamStore, y: Var) -> Result<Var> {
        let coeffs = self.coefficients_var(tape, store, y)?;
        tape.mul(y, coeffs)
    }

    pub fn coefficients(&self, store: &ParamStore, y: &Tensor) -> Result<Tensor> {
        eval(y, |tape, v| self.coefficients_var(tape, store, v))
    }

    pub fn apply(&self, store: &ParamStore, y: &Tensor) -> Result<Tensor> {
        eval(y, |tape, v| self.apply_var(tape, store, v))
    }
}

/// Reweights features by explicit coefficients.
pub fn weigh(y: &Tensor, coefficients: &Tensor) -> Result<Tensor> {
    ops::hadamard(y, coefficients)
}
