#![allow(dead_code)]

use hsonet::config::Config;
use hsonet_core::raster::LabeledPair;
use hsonet_core::synthdata::{generate_pair, SynthParams};

pub const TINY_TOML: &str = r#"
seed = 3

[train]
steps = 4
batch_size = 2
eval_interval = 2
eval_batch_size = 2

[backbone]
widths = [4, 4, 8, 8]
blocks = [1, 1, 1, 1]
pyramid_dim = 8

[model]
decoder_dim = 8
head_dim = 8

[synth]
width = 64
height = 64
persistent_objects = [2, 4]
object_half_size = [4.0, 10.0]
"#;

pub fn tiny_config() -> Config {
    Config::from_toml_str(TINY_TOML).unwrap()
}

pub fn tiny_data(n: usize, offset: u64) -> Vec<LabeledPair> {
    let params: SynthParams = tiny_config().synth_params();
    (0..n).map(|i| generate_pair(offset + i as u64, &params).unwrap()).collect()
}
