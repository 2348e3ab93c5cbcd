//! Training loop shared by the `train` and `ablate` subcommands.

use crate::error::Result;
use crate::error_bank::{warmup_gather, ErrorBank};
use crate::error_recycling::erft_train_step_sharded;
use crate::flow_matching::{fm_train_step, sample_batch};
use crate::numerics::RngState;
use crate::velocity_net::{init_params, OptimizerKind, OptimizerState, VelocityNetParams};

use super::config::{RunConfig, TrainMode};

const INIT_STREAM: u64 = 1;
const DATA_STREAM: u64 = 2;
const INJECT_STREAM_BASE: u64 = 1000;

pub struct TrainOutcome {
    pub params: VelocityNetParams,
    /// Pre-step loss of every optimizer step, pretraining included.
    pub losses: Vec<f64>,
    /// One bank per simulated worker (empty for baseline runs).
    pub banks: Vec<ErrorBank>,
}

/// Initial parameters for `config`.
pub fn initial_params(config: &RunConfig) -> Result<VelocityNetParams> {
    init_params(
        config.dims(),
        &mut RngState::stream(config.seed, INIT_STREAM),
    )
}

/// Runs `pretrain_steps` error-free steps and then `steps` steps of the
/// configured mode. Data batches come from one stream regardless of mode, so
/// two runs differing only in mode see identical batches.
pub fn train(config: &RunConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let mut params = initial_params(config)?;
    let mut opt = OptimizerState::new(OptimizerKind::adam(), params.len());
    let mut data_rng = RngState::stream(config.seed, DATA_STREAM);
    let injection = config.effective_injection();
    let erft = config.mode == TrainMode::Erft;

    let mut banks = if erft {
        vec![ErrorBank::new(config.schedule, config.max_errors_per_grid)?; config.workers]
    } else {
        Vec::new()
    };
    let mut inject_rngs: Vec<RngState> = (0..banks.len())
        .map(|w| RngState::stream(config.seed, INJECT_STREAM_BASE + w as u64))
        .collect();

    let total = config.pretrain_steps + config.steps;
    let mut losses = Vec::with_capacity(total);
    for step in 0..total {
        let batch = sample_batch(
            &config.clip,
            &config.schedule,
            config.batch_size,
            &mut data_rng,
        )?;
        let loss = if erft && step >= config.pretrain_steps {
            let (loss, curated) = erft_train_step_sharded(
                &mut params,
                &mut opt,
                &batch,
                &banks,
                &injection,
                config.learning_rate,
                &mut inject_rngs,
            )?;
            let iteration = step - config.pretrain_steps + 1;
            warmup_gather(iteration, config.warmup_iterations, &curated, &mut banks)?;
            loss
        } else {
            fm_train_step(&mut params, &mut opt, &batch, config.learning_rate)?
        };
        losses.push(loss);
    }
    Ok(TrainOutcome {
        params,
        losses,
        banks,
    })
}
