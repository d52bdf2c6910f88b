//! Dense tanh networks with hand-written reverse-mode gradients.
//!
//! Parameters live in one flat buffer. For every layer the weight matrix is
//! stored row-major as `[out][in]`, followed by its bias vector; layers follow
//! each other in order. Gradients use the same layout, so optimizers only ever
//! see flat slices.

mod checkpoint;
mod optim;
mod policy;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{Checkpoint, CheckpointKind, CHECKPOINT_FORMAT_VERSION};
pub use optim::Adam;
pub use policy::{gaussian_log_prob, softplus, softplus_inverse, transfer_warm_start, GaussianPolicy, WarmStartConfig};

/// Hidden widths shared by every network of the controller.
pub const DEFAULT_HIDDEN: [usize; 7] = [256, 128, 128, 64, 64, 32, 16];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>) -> Self {
        MlpSpec {
            layer_sizes,
            hidden_activation: Activation::Tanh,
            output_activation: Activation::Identity,
        }
    }

    /// `input -> DEFAULT_HIDDEN -> output`.
    pub fn controller(input: usize, output: usize) -> Self {
        let mut sizes = vec![input];
        sizes.extend(DEFAULT_HIDDEN);
        sizes.push(output);
        Self::new(sizes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::InvalidConfig("a network needs at least two layer sizes".into()));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::InvalidConfig("layer sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated spec")
    }

    pub fn layer_count(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// The same network with a different output width.
    pub fn with_output(&self, output: usize) -> Self {
        let mut s = self.clone();
        *s.layer_sizes.last_mut().expect("validated spec") = output;
        s
    }

    pub fn layout(&self) -> ParamLayout {
        let mut layers = Vec::with_capacity(self.layer_count());
        let mut offset = 0;
        for w in self.layer_sizes.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            layers.push(LayerSlot {
                n_in,
                n_out,
                weights: offset,
                bias: offset + n_in * n_out,
            });
            offset += n_in * n_out + n_out;
        }
        ParamLayout { layers, len: offset }
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.layer_count() {
            self.output_activation
        } else {
            self.hidden_activation
        }
    }
}

/// Offsets of one layer inside the flat buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSlot {
    pub n_in: usize,
    pub n_out: usize,
    pub weights: usize,
    pub bias: usize,
}

impl LayerSlot {
    /// Flat index of weight `[row][col]`.
    pub fn weight_index(&self, row: usize, col: usize) -> usize {
        self.weights + row * self.n_in + col
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    pub layers: Vec<LayerSlot>,
    pub len: usize,
}

/// Flat parameters (or gradients) tagged with the spec they belong to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub spec: MlpSpec,
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(spec: &MlpSpec) -> Self {
        ParamVector {
            spec: spec.clone(),
            values: vec![0.0; spec.layout().len],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Per-layer outputs of one forward pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// `activations[0]` is the input; `activations[l + 1]` the output of layer `l`.
    pub activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("cache holds the input at least")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    spec: MlpSpec,
    params: Vec<f64>,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

impl Mlp {
    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let len = spec.layout().len;
        Ok(Mlp {
            spec,
            params: vec![0.0; len],
        })
    }

    /// Uniform `(-s, s)` weights and biases with `s = 1 / sqrt(fan_in)`.
    pub fn init(spec: MlpSpec, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for slot in net.spec.layout().layers {
            net.init_layer(&slot, &mut rng);
        }
        Ok(net)
    }

    pub(crate) fn init_layer<R: Rng>(&mut self, slot: &LayerSlot, rng: &mut R) {
        let s = 1.0 / (slot.n_in as f64).sqrt();
        for p in &mut self.params[slot.weights..slot.bias + slot.n_out] {
            *p = rng.gen_range(-s..s);
        }
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layout(&self) -> ParamLayout {
        self.spec.layout()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn flatten(&self) -> ParamVector {
        ParamVector {
            spec: self.spec.clone(),
            values: self.params.clone(),
        }
    }

    pub fn unflatten(vec: ParamVector) -> Result<Self> {
        Self::from_params(vec.spec, vec.values)
    }

    pub fn from_params(spec: MlpSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        let len = spec.layout().len;
        if params.len() != len {
            return Err(Error::DimensionMismatch {
                context: "flat parameters",
                expected: len,
                got: params.len(),
            });
        }
        Ok(Mlp { spec, params })
    }

    /// Copy of this network with `params` swapped in.
    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        Self::from_params(self.spec.clone(), params)
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.spec.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "network input",
                expected: self.spec.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    fn layer_into(&self, slot: &LayerSlot, act: Activation, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        let w = &self.params[slot.weights..slot.bias];
        let b = &self.params[slot.bias..slot.bias + slot.n_out];
        out.extend(w.chunks_exact(slot.n_in).zip(b).map(|(row, bias)| {
            let z = dot(row, x) + bias;
            match act {
                Activation::Tanh => z.tanh(),
                Activation::Identity => z,
            }
        }));
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let layout = self.layout();
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        for (l, slot) in layout.layers.iter().enumerate() {
            self.layer_into(slot, self.spec.activation(l), &cur, &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<ForwardCache> {
        self.check_input(x)?;
        let layout = self.layout();
        let mut activations = Vec::with_capacity(layout.layers.len() + 1);
        activations.push(x.to_vec());
        for (l, slot) in layout.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(slot.n_out);
            self.layer_into(slot, self.spec.activation(l), &activations[l], &mut out);
            activations.push(out);
        }
        Ok(ForwardCache { activations })
    }

    /// Adds `d(upstream . output)/d(params)` into `grad` and returns the
    /// gradient with respect to the input.
    pub fn backward_accumulate(
        &self,
        cache: &ForwardCache,
        upstream: &[f64],
        grad: &mut [f64],
    ) -> Result<Vec<f64>> {
        let layout = self.layout();
        if upstream.len() != self.spec.output_dim() {
            return Err(Error::DimensionMismatch {
                context: "upstream gradient",
                expected: self.spec.output_dim(),
                got: upstream.len(),
            });
        }
        if grad.len() != layout.len {
            return Err(Error::DimensionMismatch {
                context: "gradient buffer",
                expected: layout.len,
                got: grad.len(),
            });
        }
        if cache.activations.len() != layout.layers.len() + 1 {
            return Err(Error::DimensionMismatch {
                context: "forward cache",
                expected: layout.layers.len() + 1,
                got: cache.activations.len(),
            });
        }

        let mut delta = upstream.to_vec();
        let last = layout.layers.len() - 1;
        if self.spec.activation(last) == Activation::Tanh {
            for (d, y) in delta.iter_mut().zip(cache.output()) {
                *d *= 1.0 - y * y;
            }
        }
        for l in (0..layout.layers.len()).rev() {
            let slot = &layout.layers[l];
            let input = &cache.activations[l];
            let w = &self.params[slot.weights..slot.bias];
            let (gw, gb) = grad[slot.weights..slot.bias + slot.n_out].split_at_mut(slot.n_in * slot.n_out);
            let mut prev = vec![0.0; slot.n_in];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                let row = &w[o * slot.n_in..(o + 1) * slot.n_in];
                let grow = &mut gw[o * slot.n_in..(o + 1) * slot.n_in];
                for ((g, p), (x, wv)) in grow.iter_mut().zip(prev.iter_mut()).zip(input.iter().zip(row)) {
                    *g += d * x;
                    *p += d * wv;
                }
            }
            if l > 0 && self.spec.activation(l - 1) == Activation::Tanh {
                for (p, y) in prev.iter_mut().zip(input) {
                    *p *= 1.0 - y * y;
                }
            }
            delta = prev;
        }
        Ok(delta)
    }

    /// Parameter and input gradients of `upstream . forward(x)`.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<(ParamVector, Vec<f64>)> {
        let cache = self.forward_cached(x)?;
        let mut g = ParamVector::zeros(&self.spec);
        let dx = self.backward_accumulate(&cache, upstream, &mut g.values)?;
        Ok((g, dx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent forward pass on nested matrices.
    fn reference_forward(net: &Mlp, x: &[f64]) -> Vec<f64> {
        let layout = net.layout();
        let p = net.params();
        let mut a = x.to_vec();
        for (l, s) in layout.layers.iter().enumerate() {
            let w: Vec<Vec<f64>> = (0..s.n_out)
                .map(|o| (0..s.n_in).map(|i| p[s.weights + o * s.n_in + i]).collect())
                .collect();
            let mut z = vec![0.0; s.n_out];
            for o in 0..s.n_out {
                z[o] = p[s.bias + o];
                for i in 0..s.n_in {
                    z[o] += w[o][i] * a[i];
                }
            }
            if l + 1 < layout.layers.len() {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            a = z;
        }
        a
    }

    fn central_difference(net: &Mlp, x: &[f64], up: &[f64], k: usize, h: f64) -> f64 {
        let f = |n: &Mlp| -> f64 { n.forward(x).unwrap().iter().zip(up).map(|(y, u)| y * u).sum() };
        let mut plus = net.clone();
        plus.params_mut()[k] += h;
        let mut minus = net.clone();
        minus.params_mut()[k] -= h;
        (f(&plus) - f(&minus)) / (2.0 * h)
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(MlpSpec::new(vec![4, 3, 2])).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.0, 0.5]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer_passes_input() {
        let mut net = Mlp::zeros(MlpSpec::new(vec![3, 3])).unwrap();
        let slot = net.layout().layers[0];
        for i in 0..3 {
            let k = slot.weight_index(i, i);
            net.params_mut()[k] = 1.0;
        }
        assert_eq!(net.forward(&[0.3, -1.5, 2.0]).unwrap(), vec![0.3, -1.5, 2.0]);
    }

    #[test]
    fn forward_matches_reference() {
        let net = Mlp::init(MlpSpec::new(vec![7, 9, 5, 3]), 4).unwrap();
        let x = [0.1, -0.4, 0.9, 0.0, 2.0, -1.1, 0.35];
        let a = net.forward(&x).unwrap();
        let b = reference_forward(&net, &x);
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_errors() {
        let net = Mlp::init(MlpSpec::new(vec![3, 2]), 1).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(Error::DimensionMismatch { .. })));
        assert!(net.backward(&[1.0, 2.0, 3.0], &[1.0]).is_err());
        assert!(Mlp::from_params(MlpSpec::new(vec![3, 2]), vec![0.0; 7]).is_err());
    }

    #[test]
    fn parameter_count() {
        let spec = MlpSpec::controller(108, 6);
        let expected: usize = spec.layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        assert_eq!(spec.layout().len, expected);
        assert_eq!(spec.layer_sizes, vec![108, 256, 128, 128, 64, 64, 32, 16, 6]);
    }

    #[test]
    fn layout_probe_touches_one_parameter() {
        let net = Mlp::init(MlpSpec::new(vec![3, 4, 2]), 9).unwrap();
        let layout = net.layout();
        let mut seen = vec![0usize; net.param_count()];
        for s in &layout.layers {
            for o in 0..s.n_out {
                for i in 0..s.n_in {
                    seen[s.weight_index(o, i)] += 1;
                }
                seen[s.bias + o] += 1;
            }
        }
        assert!(seen.iter().all(|c| *c == 1));
        for k in [0, 5, 13, net.param_count() - 1] {
            let mut v = net.flatten();
            v.values[k] += 1.0;
            let other = Mlp::unflatten(v).unwrap();
            let diff: Vec<_> = (0..net.param_count())
                .filter(|&j| net.params()[j] != other.params()[j])
                .collect();
            assert_eq!(diff, vec![k]);
        }
    }

    #[test]
    fn init_is_seeded_and_scaled() {
        let spec = MlpSpec::new(vec![400, 300, 2]);
        let a = Mlp::init(spec.clone(), 1).unwrap();
        assert_eq!(a, Mlp::init(spec.clone(), 1).unwrap());
        assert_ne!(a, Mlp::init(spec, 2).unwrap());
        let slot = a.layout().layers[0];
        let w = &a.params()[slot.weights..slot.bias];
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        let target = (1.0 / 400.0f64).sqrt() / 3.0f64.sqrt();
        assert!((std - target).abs() < 0.2 * target, "std {std} vs {target}");
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let net = Mlp::init(MlpSpec::new(vec![3, 4, 2]), 2).unwrap();
        let (g, dx) = net.backward(&[0.5, 0.1, -0.3], &[0.0, 0.0]).unwrap();
        assert!(g.values.iter().all(|v| *v == 0.0));
        assert!(dx.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_layer_gradient_is_outer_product() {
        let net = Mlp::init(MlpSpec::new(vec![3, 2]), 5).unwrap();
        let x = [0.5, -2.0, 1.5];
        let up = [3.0, -1.0];
        let (g, _) = net.backward(&x, &up).unwrap();
        let s = net.layout().layers[0];
        for (o, u) in up.iter().enumerate() {
            for (i, xi) in x.iter().enumerate() {
                assert_eq!(g.values[s.weight_index(o, i)], u * xi);
            }
            assert_eq!(g.values[s.bias + o], *u);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let net = Mlp::init(MlpSpec::new(vec![5, 6, 4, 3]), 11).unwrap();
        let x = [0.3, -0.7, 1.2, 0.05, -0.4];
        let up = [0.9, -1.3, 0.4];
        let (g, dx) = net.backward(&x, &up).unwrap();
        for k in 0..net.param_count() {
            let fd = central_difference(&net, &x, &up, k, 1e-5);
            let err = (g.values[k] - fd).abs() / fd.abs().max(g.values[k].abs()).max(1e-6);
            assert!(err < 1e-4, "param {k}: {} vs {fd}", g.values[k]);
        }
        for i in 0..x.len() {
            let mut xp = x;
            xp[i] += 1e-5;
            let mut xm = x;
            xm[i] -= 1e-5;
            let f = |v: &[f64]| -> f64 { net.forward(v).unwrap().iter().zip(&up).map(|(y, u)| y * u).sum() };
            let fd = (f(&xp) - f(&xm)) / 2e-5;
            assert!((dx[i] - fd).abs() < 1e-7);
        }
    }

    proptest! {
        #[test]
        fn flatten_round_trip_is_bitwise(sizes in proptest::collection::vec(1usize..6, 2..5), seed in any::<u64>()) {
            let net = Mlp::init(MlpSpec::new(sizes), seed).unwrap();
            let back = Mlp::unflatten(net.flatten()).unwrap();
            prop_assert_eq!(back.params().iter().map(|p| p.to_bits()).collect::<Vec<_>>(),
                            net.params().iter().map(|p| p.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(back.spec(), net.spec());
        }

        #[test]
        fn outputs_bounded_for_bounded_weights(seed in any::<u64>(), x in proptest::collection::vec(-10.0f64..10.0, 4)) {
            let net = Mlp::init(MlpSpec::new(vec![4, 8, 8, 2]), seed).unwrap();
            // every hidden unit is in (-1, 1) and the last layer has |w|, |b| < 1/sqrt(8)
            let bound = 9.0 / 8.0f64.sqrt();
            for y in net.forward(&x).unwrap() {
                prop_assert!(y.abs() <= bound);
            }
        }
    }
}
