//! Whole continual runs: train through a stream step by step and backtest
//! after each step.

use crate::error::Result;
use crate::eval::{backtest, EvalReport, StepDataset};
use crate::trainer::{run_step, TrainConfig, TrainState};

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub state: TrainState,
    pub report: EvalReport,
}

/// Trains on every trainable step of `stream` after `state.step`, calling
/// `after_step` with the new state and that step's backtest.
pub fn continue_run<F>(mut state: TrainState, stream: &[StepDataset], config: &TrainConfig, mut after_step: F) -> Result<RunOutcome>
where
    F: FnMut(&TrainState, &EvalReport) -> Result<()>,
{
    let mut report = EvalReport::default();
    let trainable: Vec<&StepDataset> = stream.iter().filter(|s| s.is_trainable()).collect();
    for step in trainable.into_iter().skip(state.step) {
        log::info!("training step {} on `{}` ({} sequences)", state.step + 1, step.name, step.train.len());
        state = run_step(state, step, config)?;
        let row = backtest(&state.model, stream, state.step)?;
        after_step(&state, &row)?;
        report.extend(row);
    }
    Ok(RunOutcome { state, report })
}

/// A fresh run over the whole stream.
pub fn run_continual(stream: &[StepDataset], config: &TrainConfig) -> Result<RunOutcome> {
    continue_run(TrainState::new(config)?, stream, config, |_, _| Ok(()))
}
