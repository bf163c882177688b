//! Shared fixtures for the criterion benchmarks: a small but fully valid
//! training configuration and a matching synthetic dataset, so every bench
//! exercises the same shapes the test suite uses.

use diffrect_core::data::{synth_generate, Dataset};
use diffrect_core::nets::{DenoiserConfig, EmbedBlockConfig, NetsConfig, SegNetConfig};
use diffrect_core::trainer::TrainConfig;

/// A 32x32, 3-class configuration small enough to benchmark end to end.
///
/// `iterations` is set high so a benchmark can call `train_iteration` as many
/// times as the harness asks for without tripping the horizon contract.
pub fn bench_config() -> TrainConfig {
    TrainConfig {
        iterations: 1_000_000,
        t_steps: 5,
        labeled_ratio: 0.34,
        seed: 7,
        nets: NetsConfig {
            seg: SegNetConfig { in_channels: 1, num_classes: 3, base_width: 4, depth: 2 },
            embed: EmbedBlockConfig {
                stage_channels: vec![(4, 4), (4, 4), (8, 8), (8, 16)],
                guidance_embed_dim: 8,
                guidance_scale: 100.0,
            },
            denoiser: DenoiserConfig { widths: [8, 8, 16], time_embed_dim: 8 },
        },
        ..TrainConfig::default()
    }
}

/// Five synthetic 32x32 samples with one held out for validation.
pub fn bench_dataset() -> Dataset {
    let samples = synth_generate(5, 3, 32, 21).expect("fixture generation");
    Dataset::assemble(samples, 3, 32, 21, 0.2).expect("fixture split")
}
