use std::collections::BTreeMap;

use ccdm::contrastive::ContrastiveConfig;
use ccdm::data::{make_windows, ring_coefficients, synth_generate, Normalizer, SynthSpec, TimeWindow, WindowSpec};
use ccdm::denoiser::{Denoiser, DenoiserConfig, Mixer};
use ccdm::diffusion::NoiseSchedule;
use ccdm::evaluation::{assemble_ensemble, mse};
use ccdm::training::{stream, train, Stream, TrainConfig};

/// A model trained on a single window should reproduce that window's
/// target when sampling from its lookback.
///
/// One channel: with several channels and no channel identity, a latent
/// token at high noise cannot tell which condition token it belongs to, so
/// chains started from pure noise can settle on another channel's target.
#[test]
fn memorized_window_is_recovered_by_the_sampled_median() {
    let (d, l, h, k) = (1, 24, 24, 50);
    let spec = SynthSpec::Var {
        coefficients: ring_coefficients(d, 0.9, 0.08),
        noise_std: 1.0,
        burn_in: 200,
    };
    let frame = synth_generate(&spec, d, l + h, 3).unwrap();
    let frame = Normalizer::fit(&frame).unwrap().transform_frame(&frame).unwrap();
    let windows: Vec<TimeWindow<f64>> = make_windows(&frame, &WindowSpec { lookback: l, horizon: h, stride: 1 }).unwrap();
    assert_eq!(windows.len(), 1);
    let config = DenoiserConfig {
        lookback: l,
        horizon: h,
        channels: d,
        hidden: 64,
        enc_depth: 2,
        dec_depth: 2,
        att_depth: 2,
        heads: 8,
        step_embed_dim: 64,
        mlp_ratio: 4,
        mixer: Mixer::Attention,
    };
    let schedule = NoiseSchedule::quadratic(1e-4, 0.5, k).unwrap();
    let model = Denoiser::<f64>::new(config, &mut stream(3, 0, Stream::Init)).unwrap();
    // one batch holds 32 copies, so each step sees 32 noise levels
    let copies: Vec<TimeWindow<f64>> = std::iter::repeat_n(windows[0].clone(), 32).collect();
    let cfg = TrainConfig {
        epochs: 800,
        batch_size: 32,
        learning_rate: 1e-2,
        cosine_decay: true,
        checkpoint_every: 0,
        validate_every: 1_000_000,
        proxy_windows: 0,
        ..Default::default()
    };
    let contrast = ContrastiveConfig {
        lambda: 0.0,
        ..Default::default()
    };
    let out = train(model, &copies, &[], &schedule, &contrast, &cfg, 3, None, &BTreeMap::new()).unwrap();
    let ens = assemble_ensemble(&windows[0].x, &out.model, &schedule, 32, 17).unwrap();
    let err = mse(&ens.point_forecast(), &windows[0].y).unwrap();
    let last = out.records.last().unwrap();
    assert!(err < 0.1, "median MSE {err} against the memorized target, final loss {}", last.denoise_loss);
}
