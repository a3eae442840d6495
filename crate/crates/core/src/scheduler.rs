//! Adaptive scheduler for the probability phi of training on
//! student-generated outputs. phi starts at zero and rises by one stage
//! whenever validation loss exceeds the reference by more than the
//! tolerance; on the non-increase branch both phi and the reference are
//! kept.

use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 0.1;
pub const DEFAULT_N_PHI: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchedulerState {
    /// Probability of using student-generated outputs; a multiple of 1/n_phi.
    pub phi: f64,
    /// Reference validation loss the next measurement is compared against.
    pub loss_ref: f64,
    /// Loss tolerance.
    pub eps: f64,
    /// Number of stages phi climbs through.
    pub n_phi: usize,
}

pub fn init_state(initial_val_loss: f64) -> Result<SchedulerState> {
    init_state_with(initial_val_loss, DEFAULT_EPS, DEFAULT_N_PHI)
}

pub fn init_state_with(initial_val_loss: f64, eps: f64, n_phi: usize) -> Result<SchedulerState> {
    if !initial_val_loss.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "initial validation loss must be finite, got {initial_val_loss}"
        )));
    }
    if eps < 0.0 || n_phi < 1 {
        return Err(Error::InvalidArgument(format!(
            "need eps >= 0 and n_phi >= 1, got eps={eps} n_phi={n_phi}"
        )));
    }
    Ok(SchedulerState {
        phi: 0.0,
        loss_ref: initial_val_loss,
        eps,
        n_phi,
    })
}

pub fn update(state: SchedulerState, new_val_loss: f64) -> Result<SchedulerState> {
    if !new_val_loss.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "validation loss must be finite, got {new_val_loss}"
        )));
    }
    if new_val_loss > state.loss_ref + state.eps {
        Ok(SchedulerState {
            phi: (state.phi + 1.0 / state.n_phi as f64).min(1.0),
            loss_ref: new_val_loss,
            ..state
        })
    } else {
        Ok(state)
    }
}
