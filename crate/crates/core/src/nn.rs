//! Shared neural building blocks on top of the autodiff tape: parameter
//! binding, initializers, and common layer compositions.

use crate::autodiff::{Grads, Tape, Var};
use crate::params::ParamSet;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Tape leaves for every parameter in a set, addressable by name.
pub struct BoundParams<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

/// Insert every parameter as a tape leaf.
pub fn bind<'t>(tape: &'t Tape, params: &ParamSet) -> BoundParams<'t> {
    let mut vars = BTreeMap::new();
    for (name, p) in params.iter() {
        vars.insert(name.clone(), tape.leaf(p.tensor.clone()));
    }
    BoundParams { vars }
}

impl<'t> BoundParams<'t> {
    pub fn var(&self, name: &str) -> Var<'t> {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter `{name}`"))
    }

    /// Collect gradients for every trainable parameter after a backward pass.
    pub fn trainable_grads(&self, params: &ParamSet, grads: &Grads) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, p) in params.iter() {
            if p.trainable {
                out.insert(name.clone(), grads.wrt(self.var(name)));
            }
        }
        out
    }

    /// Accumulate this pass's trainable gradients into a running sum.
    pub fn accumulate_trainable_grads(
        &self,
        params: &ParamSet,
        grads: &Grads,
        into: &mut BTreeMap<String, Tensor>,
    ) {
        for (name, p) in params.iter() {
            if !p.trainable {
                continue;
            }
            let g = grads.wrt(self.var(name));
            match into.get_mut(name) {
                Some(t) => {
                    for (a, b) in t.data.iter_mut().zip(g.data.iter()) {
                        *a += b;
                    }
                }
                None => {
                    into.insert(name.clone(), g);
                }
            }
        }
    }
}

/// Scale a gradient accumulator by `1/n` (batch averaging).
pub fn scale_grads(grads: &mut BTreeMap<String, Tensor>, n: f64) {
    for t in grads.values_mut() {
        for v in &mut t.data {
            *v /= n;
        }
    }
}

/// He-scaled normal init for a conv kernel `[cout, cin, kh, kw]`.
pub fn init_conv(rng: &mut ChaCha8Rng, cout: usize, cin: usize, kh: usize, kw: usize) -> Tensor {
    let fan_in = (cin * kh * kw) as f64;
    let scale = (2.0 / fan_in).sqrt();
    let n = cout * cin * kh * kw;
    Tensor::new(
        vec![cout, cin, kh, kw],
        (0..n).map(|_| normal(rng) * scale).collect(),
    )
}

/// Xavier-uniform init for a dense weight `[fan_in, fan_out]`.
pub fn init_linear(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let lim = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::new(
        vec![fan_in, fan_out],
        (0..fan_in * fan_out)
            .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * lim)
            .collect(),
    )
}

/// Standard normal via Box–Muller (keeps the dependency surface small and
/// the draw sequence obvious).
pub(crate) fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-12);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Register a conv layer's weight and bias under `{name}.w` / `{name}.b`.
pub fn add_conv(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    trainable: bool,
) {
    params.insert(&format!("{name}.w"), init_conv(rng, cout, cin, k, k), trainable);
    params.insert(&format!("{name}.b"), Tensor::zeros(vec![cout]), trainable);
}

/// Register a dense layer's weight and bias under `{name}.w` / `{name}.b`.
pub fn add_linear(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    trainable: bool,
) {
    params.insert(&format!("{name}.w"), init_linear(rng, fan_in, fan_out), trainable);
    params.insert(&format!("{name}.b"), Tensor::zeros(vec![fan_out]), trainable);
}

/// Register layer-norm affine parameters under `{name}.gamma` / `{name}.beta`.
pub fn add_layer_norm(params: &mut ParamSet, name: &str, dim: usize, trainable: bool) {
    params.insert(&format!("{name}.gamma"), Tensor::full(vec![dim], 1.0), trainable);
    params.insert(&format!("{name}.beta"), Tensor::zeros(vec![dim]), trainable);
}

/// Apply a registered conv layer to a `[Cin,H,W]` input.
pub fn conv<'t>(x: Var<'t>, p: &BoundParams<'t>, name: &str, stride: usize, pad: usize) -> Var<'t> {
    x.conv2d(p.var(&format!("{name}.w")), p.var(&format!("{name}.b")), stride, pad)
}

/// Apply a registered dense layer to a `[R,C]` input.
pub fn linear<'t>(x: Var<'t>, p: &BoundParams<'t>, name: &str) -> Var<'t> {
    x.matmul(p.var(&format!("{name}.w")))
        .add_broadcast_row(p.var(&format!("{name}.b")))
}

/// Apply registered layer-norm parameters row-wise.
pub fn layer_norm<'t>(x: Var<'t>, p: &BoundParams<'t>, name: &str) -> Var<'t> {
    x.layer_norm_rows(
        p.var(&format!("{name}.gamma")),
        p.var(&format!("{name}.beta")),
        1e-5,
    )
}

/// Fixed 2-D sinusoidal position encoding as an `[h·w, d]` table; rows are
/// positions in row-major order. Channels interleave (sin x, cos x, sin y,
/// cos y) across a geometric frequency ladder. `d` must be divisible by 4.
pub fn sinusoidal_positions(h: usize, w: usize, d: usize) -> Tensor {
    assert!(d % 4 == 0, "position encoding dim must be divisible by 4");
    let quarters = d / 4;
    let mut out = vec![0.0; h * w * d];
    for y in 0..h {
        for x in 0..w {
            let row = (y * w + x) * d;
            for i in 0..quarters {
                let freq = 1.0 / 10000f64.powf(4.0 * i as f64 / d as f64);
                out[row + 4 * i] = (x as f64 * freq).sin();
                out[row + 4 * i + 1] = (x as f64 * freq).cos();
                out[row + 4 * i + 2] = (y as f64 * freq).sin();
                out[row + 4 * i + 3] = (y as f64 * freq).cos();
            }
        }
    }
    Tensor::new(vec![h * w, d], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn bound_params_round_trip_values() {
        let mut rng = stream(1, Stream::Lcim);
        let mut ps = ParamSet::new();
        add_conv(&mut ps, &mut rng, "c1", 4, 3, 3, true);
        let tape = Tape::new();
        let bound = bind(&tape, &ps);
        assert_eq!(
            bound.var("c1.w").value().data,
            ps.tensor("c1.w").unwrap().data
        );
    }

    #[test]
    fn trainable_grads_skip_frozen_entries() {
        let mut rng = stream(2, Stream::Lcim);
        let mut ps = ParamSet::new();
        add_linear(&mut ps, &mut rng, "dense", 3, 2, true);
        ps.set_trainable_where(|n| n == "dense.b", false);
        let tape = Tape::new();
        let bound = bind(&tape, &ps);
        let x = tape.leaf(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]));
        let loss = linear(x, &bound, "dense").sum();
        let grads = tape.backward(loss);
        let tg = bound.trainable_grads(&ps, &grads);
        assert!(tg.contains_key("dense.w"));
        assert!(!tg.contains_key("dense.b"));
    }

    #[test]
    fn position_encoding_has_expected_shape_and_range() {
        let pe = sinusoidal_positions(3, 5, 16);
        assert_eq!(pe.shape, vec![15, 16]);
        assert!(pe.data.iter().all(|v| (-1.0..=1.0).contains(v)));
        // distinct positions get distinct encodings
        assert_ne!(pe.data[0..16], pe.data[16..32]);
    }

    #[test]
    fn init_is_deterministic_per_stream() {
        let mut a = stream(9, Stream::Pose);
        let mut b = stream(9, Stream::Pose);
        assert_eq!(init_conv(&mut a, 2, 2, 3, 3), init_conv(&mut b, 2, 2, 3, 3));
    }
}
