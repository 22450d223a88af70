mod common;

use candle_core::{DType, Device};

use secure_jscc::config::ChannelSpec;
use secure_jscc::evaluator::spearman;
use secure_jscc::nn::Track;
use secure_jscc::objectives::distortion;
use secure_jscc::optim::Adam;
use secure_jscc::rng::{self, Stream};
use secure_jscc::trainer::{
    adversary_step, legit_step, open_run, read_history, train, train_step, RunDir, TrainChannels, TrainState,
};
use secure_jscc::{channel, validate, TrainingConfig};

use common::{small_config, small_images, SMALL};

#[test]
fn zero_weight_legit_step_is_a_plain_autoencoder_step() {
    let cfg = small_config(2, false, 0.0);
    let data = small_images(16, 1);
    let mut state = TrainState::new(&cfg, DType::F64).unwrap();
    legit_step(&mut state, &data).unwrap();

    // the same update written out without any eavesdropper
    let reference = TrainState::new(&cfg, DType::F64).unwrap();
    let bundle = &reference.bundle;
    let u = data.to_tensor(DType::F64, &Device::Cpu).unwrap();
    let x = bundle.encoder.encode_tensor(&u, Track::Grad).unwrap();
    let mut r = rng::stream(cfg.config().seed, Stream::BobChannel, 0);
    let y = channel::transmit(&x, &cfg.bob_train_channel(), &mut r).unwrap();
    let u_hat = bundle.decoder.forward(&y, Track::Grad).unwrap();
    let grads = distortion(&u, &u_hat, cfg.config().secrecy.alpha).unwrap().backward().unwrap();
    Adam::new(cfg.config().optim.learning_rate).step(&bundle.legit_vars(), &grads).unwrap();

    assert_eq!(state.bundle.legit_digest().unwrap(), bundle.legit_digest().unwrap());
}

#[test]
fn zero_weight_legit_step_ignores_eavesdroppers() {
    let cfg = small_config(1, false, 0.0);
    let data = small_images(16, 2);
    let mut a = TrainState::new(&cfg, DType::F64).unwrap();
    let mut b = TrainState::new(&cfg, DType::F64).unwrap();
    for (_, var) in b.bundle.adversary_vars() {
        var.set(&(var.as_tensor() * -3.0).unwrap()).unwrap();
    }
    legit_step(&mut a, &data).unwrap();
    legit_step(&mut b, &data).unwrap();
    assert_eq!(a.bundle.legit_digest().unwrap(), b.bundle.legit_digest().unwrap());
}

#[test]
fn single_colluding_eavesdropper_trains_like_a_solo_one() {
    let data = small_images(32, 3);
    let mut solo = TrainState::new(&small_config(1, false, 5.0), DType::F64).unwrap();
    let mut colluding = TrainState::new(&small_config(1, true, 5.0), DType::F64).unwrap();
    for batch in [data.select(&(0..16).collect::<Vec<_>>()), data.select(&(16..32).collect::<Vec<_>>())] {
        let a = train_step(&mut solo, &batch).unwrap();
        let b = train_step(&mut colluding, &batch).unwrap();
        assert_eq!(a.legit.total, b.legit.total);
        assert_eq!(a.adversary_ce, b.adversary_ce);
        assert_eq!(b.colluded_ce, None);
    }
    assert_eq!(solo.bundle.legit_digest().unwrap(), colluding.bundle.legit_digest().unwrap());
    assert_eq!(
        solo.bundle.adversaries[0].params().digest().unwrap(),
        colluding.bundle.adversaries[0].params().digest().unwrap()
    );
}

#[test]
fn freeze_contract_holds_for_colluding_eavesdroppers() {
    let mut state = TrainState::new(&small_config(3, true, 5.0), DType::F32).unwrap();
    let batch = small_images(16, 4);
    let digests = |s: &TrainState| (s.bundle.legit_digest().unwrap(), s.bundle.adversary_digest().unwrap());
    let collusion = |s: &TrainState| common::flat(s.bundle.collusion_var().unwrap().as_tensor());

    let (l0, a0) = digests(&state);
    let c0 = collusion(&state);
    legit_step(&mut state, &batch).unwrap();
    let (l1, a1) = digests(&state);
    assert_ne!(l0, l1);
    assert_eq!(a0, a1);
    assert_eq!(c0, collusion(&state));

    adversary_step(&mut state, &batch).unwrap();
    let (l2, a2) = digests(&state);
    assert_eq!(l1, l2);
    assert_ne!(a1, a2);
    assert_ne!(c0, collusion(&state));
}

#[test]
fn identical_seeds_give_identical_runs() {
    let mut cfg = small_config(2, true, 5.0).config().clone();
    cfg.optim.episodes = 2;
    let cfg = validate(cfg, SMALL, 10).unwrap();
    let data = small_images(40, 5);
    let run = || {
        let mut s = TrainState::new(&cfg, DType::F32).unwrap();
        train(&mut s, &data, None).unwrap();
        s
    };
    let (a, b) = (run(), run());
    assert_eq!(a.history, b.history);
    assert_eq!(a.history.len(), 4);
    assert_eq!(a.bundle.legit_digest().unwrap(), b.bundle.legit_digest().unwrap());
    assert_eq!(a.bundle.adversary_digest().unwrap(), b.bundle.adversary_digest().unwrap());
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let mut cfg = small_config(2, true, 5.0).config().clone();
    cfg.optim.episodes = 3;
    cfg.checkpoint_every = 1;
    let cfg = validate(cfg, SMALL, 10).unwrap();
    let data = small_images(32, 6);
    let tmp = tempfile::tempdir().unwrap();

    let straight = RunDir::new(tmp.path().join("straight"));
    let mut a = open_run(&cfg, &straight, DType::F32).unwrap();
    train(&mut a, &data, Some(&straight)).unwrap();

    // interrupted after episode 1: the latest checkpoint is older than the history
    let resumed = RunDir::new(tmp.path().join("resumed"));
    let mut b = open_run(&cfg, &resumed, DType::F32).unwrap();
    train(&mut b, &data, Some(&resumed)).unwrap();
    std::fs::copy(resumed.episode_checkpoint(1), resumed.latest()).unwrap();
    let mut b = open_run(&cfg, &resumed, DType::F32).unwrap();
    assert_eq!((b.episode, b.step, b.history.len()), (1, 2, 2));
    train(&mut b, &data, Some(&resumed)).unwrap();

    assert_eq!(a.bundle.legit_digest().unwrap(), b.bundle.legit_digest().unwrap());
    assert_eq!(a.bundle.adversary_digest().unwrap(), b.bundle.adversary_digest().unwrap());
    let (ha, hb) = (read_history(&straight.history()).unwrap(), read_history(&resumed.history()).unwrap());
    assert_eq!(ha.len(), 6);
    assert_eq!(ha, hb);
    assert!(resumed.config_snapshot().exists());
}

fn moving_average(v: &[f64], window: usize) -> Vec<f64> {
    v.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
}

/// Identity link: one antenna, unit gain, negligible noise.
fn identity_channels() -> TrainChannels {
    let clean = ChannelSpec::awgn(300.0);
    TrainChannels { bob: clean, eve: clean }
}

#[test]
fn codec_memorizes_a_small_set_over_an_identity_channel() {
    let mut cfg = TrainingConfig::default();
    cfg.secrecy.w = secure_jscc::config::Weights::Shared(0.0);
    cfg.link.n_t = 1;
    cfg.optim.batch_size = 64;
    cfg.optim.learning_rate = 1e-3;
    let cfg = validate(cfg, SMALL, 10).unwrap();
    let data = small_images(64, 7);
    let mut state = TrainState::new(&cfg, DType::F32).unwrap();
    state.channels = identity_channels();

    let mut losses = Vec::new();
    for _ in 0..200 {
        losses.push(train_step(&mut state, &data).unwrap().legit.mse);
    }
    let early = moving_average(&losses[..50], 10);
    let steps: Vec<f64> = (0..early.len()).map(|i| i as f64).collect();
    assert!(spearman(&steps, &early) < -0.9, "no downward trend: {early:?}");
    assert!(early.last().unwrap() < early.first().unwrap());

    let u = data.to_tensor(DType::F32, &Device::Cpu).unwrap();
    let x = state.bundle.encoder.encode_tensor(&u, Track::Frozen).unwrap();
    let y = channel::transmit(&x, &state.channels.bob, &mut rng::stream(0, Stream::EvalBob, 0)).unwrap();
    let u_hat = state.bundle.decoder.forward(&y, Track::Frozen).unwrap();
    let mse = common::scalar(&secure_jscc::objectives::mse(&u, &u_hat).unwrap());
    assert!(mse < 0.01, "memorization mse {mse}");
}

#[test]
fn lone_adversary_learns_a_frozen_insecure_encoder() {
    let mut cfg = TrainingConfig::default();
    cfg.secrecy.w = secure_jscc::config::Weights::Shared(0.0);
    cfg.optim.batch_size = 64;
    let cfg = validate(cfg, SMALL, 10).unwrap();
    let data = small_images(64, 8);
    let mut state = TrainState::new(&cfg, DType::F32).unwrap();
    state.channels = TrainChannels {
        bob: ChannelSpec::awgn(30.0),
        eve: ChannelSpec::awgn(30.0),
    };
    let encoder = state.bundle.legit_digest().unwrap();

    let mut reached = None;
    for step in 0..500 {
        let out = adversary_step(&mut state, &data).unwrap();
        state.step += 1;
        if out.adversary_accuracy[0] > 0.9 {
            reached = Some(step);
            break;
        }
    }
    assert!(reached.is_some(), "train accuracy stayed at or below 90% for 500 steps");
    assert_eq!(encoder, state.bundle.legit_digest().unwrap());
}
