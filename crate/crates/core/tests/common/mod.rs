#![allow(dead_code)]

use cdhm::model::{Conv1dSpec, ModelConfig};
use cdhm::signal::{synth_dataset, Domain, PipelineConfig, PreparedSequence, SyntheticDomainConfig};

pub fn micro_pipeline() -> PipelineConfig {
    PipelineConfig {
        window_len: 64,
        hop: 32,
        stages: 3,
        resolution: 16,
        ..PipelineConfig::default()
    }
}

pub fn micro_model(num_classes: usize) -> ModelConfig {
    ModelConfig {
        window_len: 64,
        resolution: 16,
        num_classes,
        feature_dim: 12,
        signal_layers: vec![Conv1dSpec {
            out_channels: 4,
            kernel: 8,
            stride: 4,
            padding: 2,
        }],
        image_channels: vec![4, 8],
        decoder_channels: vec![8, 4],
        latent_dim: 8,
        hidden_dim: 10,
        posterior_hidden: 9,
        head_hidden: 7,
        ..ModelConfig::default()
    }
}

pub fn micro_domain(domain: Domain, num_classes: usize, seed: u64) -> SyntheticDomainConfig {
    let base = SyntheticDomainConfig::default();
    let shifted = domain == Domain::Target;
    SyntheticDomainConfig {
        name: if shifted { "B".into() } else { "A".into() },
        domain,
        num_classes,
        impulse_freqs_hz: base.impulse_freqs_hz[..num_classes].to_vec(),
        carrier_hz: if shifted { 3800.0 } else { base.carrier_hz },
        amplitude: if shifted { 2.0 } else { 1.0 },
        offset: if shifted { 0.5 } else { 0.0 },
        sample_len: 128,
        seed,
        ..base
    }
}

/// `(labeled source, target)` prepared sequences for a micro problem.
pub fn micro_data(num_classes: usize, per_class: usize, seed: u64) -> (Vec<PreparedSequence>, Vec<PreparedSequence>) {
    let p = micro_pipeline();
    let src = synth_dataset(&micro_domain(Domain::Source, num_classes, seed), per_class).unwrap();
    let tgt = synth_dataset(&micro_domain(Domain::Target, num_classes, seed + 1), per_class).unwrap();
    (p.prepare(&src).unwrap(), p.prepare(&tgt).unwrap())
}
