//! Paired decoder ablation: the same seed, data and schedule trained with
//! the component decoder (keypoint-guided) and with it disabled, each
//! scored on a held-out synthetic split.

use cat_core::metrics::MetricsReport;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::Result;
use crate::eval::evaluate;
use crate::synth::Split;
use crate::train::Trainer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSeed {
    pub seed: u64,
    pub full: MetricsReport,
    pub disabled: MetricsReport,
}

impl AblationSeed {
    /// Whether the full decoder's mean hand-parameter L1 is at most the
    /// disabled arm's.
    pub fn decoder_helps_hands(&self) -> bool {
        self.full.param_l1.hands <= self.disabled.param_l1.hands
    }
}

/// Config of one arm: `base` with the given seed and decoder switch. The
/// data seed follows the run seed so each seed sees its own samples.
pub fn arm(base: &RunConfig, seed: u64, decoder: bool) -> RunConfig {
    let mut c = base.clone();
    c.seed = seed;
    c.data.seed = seed;
    c.model.decoder.enabled = decoder;
    c.model.decoder.keypoint_guided = decoder;
    c
}

fn train_and_score(cfg: RunConfig) -> Result<MetricsReport> {
    let mut t = Trainer::new(cfg)?;
    t.run(None, |_| {})?;
    let eval = t.world.dataset(t.config.data.seed, Split::Eval, t.config.data.n_eval)?;
    evaluate(&t.model, &t.world, &eval, t.config.eval.match_radius)
}

pub fn run_seed(base: &RunConfig, seed: u64) -> Result<AblationSeed> {
    Ok(AblationSeed {
        seed,
        full: train_and_score(arm(base, seed, true))?,
        disabled: train_and_score(arm(base, seed, false))?,
    })
}
