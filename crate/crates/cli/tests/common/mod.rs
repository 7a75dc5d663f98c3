use moscard_cli::RunConfig;
use moscard_core::deconfound::Stage1Config;
use moscard_core::encoder::EncoderConfig;
use moscard_core::fusion::FusionConfig;
use moscard_core::synthgen::GeneratorParams;

/// A config small enough to run the whole pipeline in seconds.
pub fn tiny_config() -> RunConfig {
    let enc = EncoderConfig {
        image_side: 16,
        patch_side: 8,
        embed_dim: 8,
        n_heads: 2,
        n_layers: 2,
        tap_layer: 1,
        mlp_ratio: 2,
        seed: 0,
    };
    let mut cfg = RunConfig {
        seed: 7,
        generator: GeneratorParams { n_train: 48, n_holdout: 32, n_shift: 32, image_side: 16, ..Default::default() },
        stage1: Stage1Config { epochs: 1, batch_size: 16, log_eval_samples: 16, ..Default::default() },
        stage2: FusionConfig {
            d_k: 8,
            n_heads: 2,
            mlp_ratio: 2,
            head_hidden: 8,
            epochs: 1,
            batch_size: 16,
            log_eval_samples: 16,
            ..Default::default()
        },
        ..Default::default()
    };
    cfg.encoder.cxr = enc.clone();
    cfg.encoder.ecg = enc;
    cfg.eval.bootstrap_b = 20;
    cfg.eval.saliency.samples = 2;
    cfg.resolved()
}
