#![allow(dead_code)]

use cat_harness::RunConfig;

/// A model small enough to train for a few hundred steps in a test.
pub const TINY: &str = "
run.preset = toy
run.seed = 3
encoder.height = 32
encoder.width = 24
encoder.patch = 8
encoder.channels = 16
encoder.depth = 1
encoder.heads = 2
decoder.scales = 1,2
decoder.crop_h = 2
decoder.crop_w = 2
decoder.channels = 8
decoder.points = 1
decoder.heads = 2
train.batch = 2
train.steps = 12
train.log_every = 1
data.n_train = 4
data.n_eval = 4
";

pub fn tiny() -> RunConfig {
    RunConfig::parse(TINY).unwrap()
}

pub fn tiny_with(extra: &str) -> RunConfig {
    RunConfig::parse(&format!("{TINY}\n{extra}")).unwrap()
}
