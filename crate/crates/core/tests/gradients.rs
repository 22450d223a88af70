//! Reverse-mode gradients against central finite differences, in f64.

mod common;

use candle_core::{DType, Tensor, Var};

use secure_jscc::adversary::AdversaryLogits;
use secure_jscc::channel::{apply_channel_with_noise, power_normalize, ChannelGains, ComplexTensor};
use secure_jscc::nn::Track;
use secure_jscc::objectives::{adversary_loss, distortion, legit_loss};
use secure_jscc::ModelBundle;

use common::{normal_tensor, one_hot, uniform_tensor, GradCheck};

const REL_TOL: f64 = 1e-4;
// looser bound for a whole network, where kinks of PReLU can sit near a probe
const LINK_TOL: f64 = 1e-3;

fn check(name: &str, x0: &Tensor, coords: usize, eps: f64, f: impl Fn(&Tensor) -> Tensor) {
    let worst = GradCheck { coords, eps }.input(x0, f);
    assert!(worst <= REL_TOL, "{name}: relative error {worst:e}");
}

fn check_param(name: &str, var: &Var, coords: usize, eps: f64, f: impl Fn() -> Tensor) {
    let worst = GradCheck { coords, eps }.param(var, f);
    assert!(worst <= LINK_TOL, "{name}: relative error {worst:e}");
}

fn images(seed: u64) -> Tensor {
    uniform_tensor(&[2, 3, 12, 12], 0.05, 0.95, seed, DType::F64)
}

#[test]
fn distortion_gradient() {
    let u = images(1);
    check("distortion", &images(2), 40, 1e-5, |u_hat| distortion(&u, u_hat, 0.1).unwrap());
}

#[test]
fn adversary_loss_gradient() {
    let target = one_hot(&[3, 0, 9, 4], 10);
    let logits = (normal_tensor(&[4, 10], 3, DType::F64) * 3.0).unwrap();
    check("adversary loss", &logits, 40, 1e-5, |l| {
        adversary_loss(&AdversaryLogits::new(l.clone()).unwrap(), &target).unwrap()
    });
}

fn legit_case(use_alc: bool) {
    let u = images(4);
    let u_hat = images(5);
    let target = one_hot(&[1, 7], 10);
    let other = AdversaryLogits::new(normal_tensor(&[2, 10], 6, DType::F64)).unwrap();
    let logits = normal_tensor(&[2, 10], 7, DType::F64);
    let weights = [5.0, 2.0];

    let loss = |u_hat: &Tensor, l: &Tensor| {
        let all = [AdversaryLogits::new(l.clone()).unwrap(), other.clone()];
        legit_loss(&u, u_hat, &all, &target, &weights, 0.1, use_alc).unwrap().loss
    };
    check("legit loss wrt reconstruction", &u_hat, 30, 1e-5, |x| loss(x, &logits));
    check("legit loss wrt logits", &logits, 20, 1e-5, |l| loss(&u_hat, l));
}

#[test]
fn legit_loss_gradient_with_alc() {
    legit_case(true);
}

#[test]
fn legit_loss_gradient_without_alc() {
    legit_case(false);
}

#[test]
fn channel_and_normalization_gradient() {
    let (b, n_t, k) = (2, 3, 6);
    let gains = ChannelGains::from_values(
        &[(0.3, -0.8), (1.1, 0.2), (-0.4, 0.5), (0.9, 0.9), (-1.2, 0.1), (0.05, -0.6)],
        b,
        n_t,
        DType::F64,
    )
    .unwrap();
    let noise = ComplexTensor::new(
        (normal_tensor(&[b, k], 8, DType::F64) * 0.1).unwrap(),
        (normal_tensor(&[b, k], 9, DType::F64) * 0.1).unwrap(),
    )
    .unwrap();
    let probe = normal_tensor(&[b, 2 * k], 10, DType::F64);
    let raw = normal_tensor(&[b, n_t, k, 2], 11, DType::F64);
    check("channel", &raw, 72, 1e-6, |raw| {
        let re = raw.narrow(3, 0, 1).unwrap().squeeze(3).unwrap();
        let im = raw.narrow(3, 1, 1).unwrap().squeeze(3).unwrap();
        let x = power_normalize(&ComplexTensor::new(re, im).unwrap(), 2.0).unwrap();
        let y = apply_channel_with_noise(&x, &gains, &noise).unwrap();
        (y.interleaved().unwrap() * &probe).unwrap().sum_all().unwrap()
    });
}

#[test]
fn encoder_parameters_through_the_whole_link() {
    let cfg = common::small_config(1, false, 5.0);
    let bundle = ModelBundle::build(&cfg, DType::F64).unwrap();
    let data = common::small_images(2, 12);
    let u = data.to_tensor(DType::F64, &candle_core::Device::Cpu).unwrap();
    let target = one_hot(data.labels(), 10);
    let values: Vec<(f64, f64)> = (0..2 * cfg.n_t()).map(|i| ((i as f64 * 0.7).cos(), (i as f64 * 1.3).sin())).collect();
    let gains = ChannelGains::from_values(&values, 2, cfg.n_t(), DType::F64).unwrap();
    let noise = ComplexTensor::new(
        (normal_tensor(&[2, cfg.k()], 13, DType::F64) * 0.05).unwrap(),
        (normal_tensor(&[2, cfg.k()], 14, DType::F64) * 0.05).unwrap(),
    )
    .unwrap();

    for name in ["conv1.weight", "conv3.bias", "prelu2.alpha", "conv4.weight"] {
        let var = bundle.encoder.params().var(name).unwrap();
        check_param(name, var, 12, 1e-6, || {
            let x = bundle.encoder.encode_tensor(&u, Track::Grad).unwrap();
            let y = apply_channel_with_noise(&x, &gains, &noise).unwrap();
            let u_hat = bundle.decoder.forward(&y, Track::Frozen).unwrap();
            let logits = bundle.adversaries[0].forward(&y, Track::Frozen).unwrap();
            legit_loss(&u, &u_hat, &[logits], &target, &[5.0], 0.1, true).unwrap().loss
        });
    }
}
