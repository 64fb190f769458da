#![allow(dead_code)]

use jacguard::nn::{LayerSpec, Network};
use jacguard::{RngStream, Tensor};

pub fn random_tensor(shape: &[usize], rng: &mut RngStream, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform_range(lo, hi))
}

/// Relative error with a small absolute floor so that exact zeros compare cleanly.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central difference of `f` along coordinate `i` of `x`, or `None` when the
/// probe points leave the activation region of `x` (a relu or pool kink lies in between).
pub fn central_diff(
    net: &Network<f64>,
    x: &Tensor<f64>,
    i: usize,
    h: f64,
    f: impl Fn(&Tensor<f64>) -> f64,
) -> Option<f64> {
    let base = pattern(net, x);
    let mut xp = x.clone();
    xp.data_mut()[i] += h;
    let mut xm = x.clone();
    xm.data_mut()[i] -= h;
    if pattern(net, &xp) != base || pattern(net, &xm) != base {
        return None;
    }
    Some((f(&xp) - f(&xm)) / (2.0 * h))
}

pub fn pattern(net: &Network<f64>, x: &Tensor<f64>) -> Vec<u32> {
    let (_, trace) = net.forward(x).unwrap();
    net.activation_pattern(&trace)
}

/// Small conv net exercising every layer kind on a 1x8x8 input.
pub fn tiny_conv_specs() -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv2d {
            out_channels: 3,
            kernel: 3,
            stride: 1,
            padding: 1,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool { window: 2 },
        LayerSpec::Conv2d {
            out_channels: 4,
            kernel: 3,
            stride: 2,
            padding: 0,
        },
        LayerSpec::Relu,
        LayerSpec::Dense { out_features: 5 },
        LayerSpec::Relu,
        LayerSpec::Dense { out_features: 3 },
    ]
}

/// Network whose biases are randomized too (construction leaves them at zero).
pub fn randomized(mut net: Network<f64>, rng: &mut RngStream) -> Network<f64> {
    for p in net.params_mut() {
        if p.shape().len() == 1 {
            p.data_mut().iter_mut().for_each(|b| *b = rng.uniform_range(-0.1, 0.1));
        }
    }
    net
}

/// Dataset root from `UAP_DATA_DIR` (default `/root/data`), if it holds the named set.
pub fn data_root(name: &str) -> Option<std::path::PathBuf> {
    let root = std::env::var_os("UAP_DATA_DIR")
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| "/root/data".into());
    if root.join(name).is_dir() {
        Some(root)
    } else {
        eprintln!("skipping: no {name} under {}", root.display());
        None
    }
}
