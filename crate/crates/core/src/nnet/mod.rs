//! Small U-shaped convolutional networks with reverse-mode gradients and
//! an Adam optimizer.
//!
//! Complex images enter as two real planes (real, imaginary). The topology
//! for `widths = [w0, w1, .., wD-1]` is:
//!
//! * encoder level `l`: conv(k) -> SiLU -> conv(k) -> SiLU, then 2x2 average
//!   pooling before the next level;
//! * decoder level `l` (from `D-2` down to 0): nearest 2x upsampling, channel
//!   concatenation with the encoder output of level `l`, then
//!   conv(k) -> SiLU -> conv(k) -> SiLU;
//! * a 1x1 output projection to `out_channels`;
//! * optionally, a learnable scalar gain times the first `out_channels`
//!   input planes added to the output (global residual path).
//!
//! Initialization (seeded ChaCha8): hidden conv weights ~ N(0, 2/fan_in),
//! output projection ~ N(0, 0.01/fan_in), all biases 0, residual gain 1.

mod adam;
mod checkpoint;
mod conv;
pub mod tape;

pub use adam::AdamState;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use tape::{Gradients, SelfAdjoint, Shape, Tape, Var, SCALAR};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Feature width per resolution level; its length is the depth.
    pub widths: Vec<usize>,
    pub kernel: usize,
    pub residual: bool,
    pub seed: u64,
}

impl NetConfig {
    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::Config("network depth must be at least 1".into()));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel size must be odd, got {}", self.kernel)));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.widths.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.residual && self.out_channels > self.in_channels {
            return Err(Error::Config(format!(
                "residual path needs in_channels ({}) >= out_channels ({})",
                self.in_channels, self.out_channels
            )));
        }
        Ok(())
    }

    /// Conv layers in evaluation order as `(cin, cout, kernel)`.
    fn layers(&self) -> Vec<(usize, usize, usize)> {
        let k = self.kernel;
        let mut layers = Vec::new();
        let mut c = self.in_channels;
        for &w in &self.widths {
            layers.push((c, w, k));
            layers.push((w, w, k));
            c = w;
        }
        for l in (0..self.depth().saturating_sub(1)).rev() {
            let w = self.widths[l];
            layers.push((self.widths[l + 1] + w, w, k));
            layers.push((w, w, k));
        }
        layers.push((self.widths[0], self.out_channels, 1));
        layers
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|(ci, co, k)| co * ci * k * k + co).sum::<usize>()
            + usize::from(self.residual)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub offset: usize,
    pub shape: Shape,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Convolutional network with all parameters in one flat vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T: Real> {
    cfg: NetConfig,
    blocks: Vec<ParamBlock>,
    params: Vec<T>,
}

/// A network input or output: `channels x height x width` real planes.
#[derive(Clone, Debug, PartialEq)]
pub struct Planes<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Real> Planes<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "planes {channels}x{height}x{width} need {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![T::zero(); channels * height * width] }
    }

    pub fn shape(&self) -> Shape {
        [self.channels, self.height, self.width]
    }
}

/// Tape handles for every parameter block of one network.
#[derive(Clone, Debug)]
pub struct ParamVars(Vec<Var>);

impl<T: Real> Network<T> {
    /// Builds a network with the documented seeded initialization.
    pub fn build(cfg: &NetConfig) -> Result<Self> {
        let mut net = Self::zeros(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let layers = cfg.layers();
        let last = layers.len() - 1;
        for (i, &(ci, _co, k)) in layers.iter().enumerate() {
            let fan_in = (ci * k * k) as f64;
            let std = if i == last { (0.01 / fan_in).sqrt() } else { (2.0 / fan_in).sqrt() };
            let block = &net.blocks[2 * i];
            for p in &mut net.params[block.offset..block.offset + block.len()] {
                let z: f64 = StandardNormal.sample(&mut rng);
                *p = T::from_f64_lossy(z * std);
            }
        }
        if cfg.residual {
            let gain = net.blocks.last().unwrap().offset;
            net.params[gain] = T::one();
        }
        Ok(net)
    }

    /// Same topology with every parameter zero.
    pub fn zeros(cfg: &NetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut blocks = Vec::new();
        let mut offset = 0;
        for (i, (ci, co, k)) in cfg.layers().into_iter().enumerate() {
            for (name, shape) in [
                (format!("conv{i}.weight"), [co, ci * k * k, 1]),
                (format!("conv{i}.bias"), [co, 1, 1]),
            ] {
                let len: usize = shape.iter().product();
                blocks.push(ParamBlock { name, offset, shape });
                offset += len;
            }
        }
        if cfg.residual {
            blocks.push(ParamBlock { name: "residual.gain".into(), offset, shape: SCALAR });
            offset += 1;
        }
        Ok(Self { cfg: cfg.clone(), blocks, params: vec![T::zero(); offset] })
    }

    pub fn from_params(cfg: &NetConfig, params: Vec<T>) -> Result<Self> {
        let mut net = Self::zeros(cfg)?;
        if params.len() != net.params.len() {
            return Err(Error::Shape(format!(
                "network expects {} parameters, got {}",
                net.params.len(),
                params.len()
            )));
        }
        net.params = params;
        Ok(net)
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Converts the parameters to another precision.
    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            cfg: self.cfg.clone(),
            blocks: self.blocks.clone(),
            params: self.params.iter().map(|p| U::from_f64_lossy(p.as_f64())).collect(),
        }
    }

    pub fn check_input(&self, shape: Shape) -> Result<()> {
        let [c, h, w] = shape;
        if c != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {c}",
                self.cfg.in_channels
            )));
        }
        let m = 1usize << (self.cfg.depth() - 1);
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!(
                "image {h}x{w} is not divisible by {m} for depth {}",
                self.cfg.depth()
            )));
        }
        Ok(())
    }

    /// Places every parameter block on the tape as a leaf.
    pub fn param_leaves(&self, tape: &mut Tape<T>) -> ParamVars {
        ParamVars(
            self.blocks
                .iter()
                .map(|b| tape.leaf(self.params[b.offset..b.offset + b.len()].to_vec(), b.shape).unwrap())
                .collect(),
        )
    }

    /// Records the forward pass of `x` on `tape`.
    pub fn record(&self, tape: &mut Tape<T>, pv: &ParamVars, x: Var) -> Result<Var> {
        self.check_input(tape.shape(x))?;
        let p = &pv.0;
        let k = self.cfg.kernel;
        let depth = self.cfg.depth();
        let mut li = 0usize;
        let mut conv = |tape: &mut Tape<T>, x: Var, k: usize| -> Result<Var> {
            let out = tape.conv2d(x, p[2 * li], p[2 * li + 1], k)?;
            li += 1;
            Ok(out)
        };
        let mut skips = Vec::with_capacity(depth);
        let mut h = x;
        for level in 0..depth {
            if level > 0 {
                h = tape.avg_pool2(h)?;
            }
            let a = conv(tape, h, k)?;
            let a = tape.silu(a);
            let b = conv(tape, a, k)?;
            h = tape.silu(b);
            skips.push(h);
        }
        for level in (0..depth.saturating_sub(1)).rev() {
            let up = tape.upsample2(h);
            let cat = tape.concat(up, skips[level])?;
            let a = conv(tape, cat, k)?;
            let a = tape.silu(a);
            let b = conv(tape, a, k)?;
            h = tape.silu(b);
        }
        let mut out = conv(tape, h, 1)?;
        if self.cfg.residual {
            let gain = *p.last().unwrap();
            let head = tape.slice_channels(x, 0, self.cfg.out_channels)?;
            out = tape.axpy(out, gain, head)?;
        }
        Ok(out)
    }

    pub fn forward(&self, x: &Planes<T>) -> Result<Planes<T>> {
        let mut tape = Tape::new();
        let (out, _, _) = self.forward_on(&mut tape, x)?;
        let [c, h, w] = tape.shape(out);
        Ok(Planes { channels: c, height: h, width: w, data: tape.value(out).to_vec() })
    }

    /// Forward pass recorded on a fresh tape; returns (output, input, params).
    pub fn forward_on(&self, tape: &mut Tape<T>, x: &Planes<T>) -> Result<(Var, Var, ParamVars)> {
        let pv = self.param_leaves(tape);
        let xv = tape.leaf(x.data.clone(), x.shape())?;
        let out = self.record(tape, &pv, xv)?;
        Ok((out, xv, pv))
    }

    /// Flattens the gradients of every parameter block into one vector.
    pub fn collect_grads(&self, grads: &Gradients<T>, pv: &ParamVars) -> Vec<T> {
        let mut flat = vec![T::zero(); self.params.len()];
        for (b, v) in self.blocks.iter().zip(&pv.0) {
            if let Some(g) = grads.get(*v) {
                flat[b.offset..b.offset + b.len()].copy_from_slice(g);
            }
        }
        flat
    }

    fn check_upstream(&self, out_shape: Shape, upstream: &Planes<T>) -> Result<()> {
        if upstream.shape() != out_shape {
            return Err(Error::Shape(format!(
                "upstream gradient {:?} does not match output {:?}",
                upstream.shape(),
                out_shape
            )));
        }
        Ok(())
    }

    /// Gradient of `<upstream, forward(x)>` with respect to the parameters.
    pub fn backward_params(&self, x: &Planes<T>, upstream: &Planes<T>) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let (out, _, pv) = self.forward_on(&mut tape, x)?;
        self.check_upstream(tape.shape(out), upstream)?;
        let grads = tape.backward(out, &upstream.data)?;
        Ok(self.collect_grads(&grads, &pv))
    }

    /// Gradient of `<upstream, forward(x)>` with respect to the input.
    pub fn backward_input(&self, x: &Planes<T>, upstream: &Planes<T>) -> Result<Planes<T>> {
        let mut tape = Tape::new();
        let (out, xv, _) = self.forward_on(&mut tape, x)?;
        self.check_upstream(tape.shape(out), upstream)?;
        let grads = tape.backward(out, &upstream.data)?;
        let data = grads.get(xv).map(|g| g.to_vec()).unwrap_or_else(|| vec![T::zero(); x.data.len()]);
        Planes::new(x.channels, x.height, x.width, data)
    }

    /// Forward output together with the input gradient of `<upstream, out>`
    /// where `upstream` is computed from the output by `seed_fn`.
    pub fn forward_and_input_grad<F>(&self, x: &Planes<T>, seed_fn: F) -> Result<(Planes<T>, Planes<T>)>
    where
        F: FnOnce(&Planes<T>) -> Result<Vec<T>>,
    {
        let mut tape = Tape::new();
        let (out, xv, _) = self.forward_on(&mut tape, x)?;
        let [c, h, w] = tape.shape(out);
        let y = Planes { channels: c, height: h, width: w, data: tape.value(out).to_vec() };
        let seed = seed_fn(&y)?;
        let grads = tape.backward(out, &seed)?;
        let data = grads.get(xv).map(|g| g.to_vec()).unwrap_or_else(|| vec![T::zero(); x.data.len()]);
        Ok((y, Planes::new(x.channels, x.height, x.width, data)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn cfg(widths: Vec<usize>, residual: bool) -> NetConfig {
        NetConfig { in_channels: 2, out_channels: 2, widths, kernel: 3, residual, seed: 7 }
    }

    fn random_planes(c: usize, h: usize, w: usize, seed: u64) -> Planes<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Planes::new(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn param_count_matches_per_layer_formula() {
        let c = cfg(vec![2, 4], false);
        // enc0: 3x3 2->2, 2->2; enc1: 2->4, 4->4; dec0: (4+2)->2, 2->2; out 1x1 2->2
        let conv = |ci: usize, co: usize, k: usize| co * ci * k * k + co;
        let expect = conv(2, 2, 3)
            + conv(2, 2, 3)
            + conv(2, 4, 3)
            + conv(4, 4, 3)
            + conv(6, 2, 3)
            + conv(2, 2, 3)
            + conv(2, 2, 1);
        assert_eq!(expect, 454);
        assert_eq!(c.param_count(), expect);
        let net = Network::<f32>::build(&c).unwrap();
        assert_eq!(net.param_count(), expect);
        let r = cfg(vec![2, 4], true);
        assert_eq!(Network::<f32>::build(&r).unwrap().param_count(), expect + 1);
    }

    #[test]
    fn default_scale_parameter_count() {
        let c = NetConfig { in_channels: 3, out_channels: 2, widths: vec![16, 32, 32], kernel: 3, residual: false, seed: 0 };
        let n = c.param_count();
        assert!((50_000..=200_000).contains(&n), "{n}");
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = Network::<f32>::build(&cfg(vec![4, 8], true)).unwrap();
        let b = Network::<f32>::build(&cfg(vec![4, 8], true)).unwrap();
        assert_eq!(a.params(), b.params());
        let mut other = cfg(vec![4, 8], true);
        other.seed = 8;
        assert_ne!(a.params(), Network::<f32>::build(&other).unwrap().params());
    }

    #[test]
    fn config_errors() {
        assert!(matches!(Network::<f32>::build(&cfg(vec![], false)), Err(Error::Config(_))));
        let mut even = cfg(vec![4], false);
        even.kernel = 2;
        assert!(matches!(Network::<f32>::build(&even), Err(Error::Config(_))));
        let mut wide = cfg(vec![4], true);
        wide.out_channels = 3;
        assert!(matches!(Network::<f32>::build(&wide), Err(Error::Config(_))));
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Network::<f64>::zeros(&cfg(vec![4, 4], true)).unwrap();
        let y = net.forward(&random_planes(2, 8, 8, 1)).unwrap();
        assert!(y.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_pointwise_conv_is_linear_scale() {
        let mut tape = Tape::<f64>::new();
        let x = random_planes(1, 4, 4, 3);
        let xv = tape.leaf(x.data.clone(), x.shape()).unwrap();
        let w = tape.leaf(vec![1.7], [1, 1, 1]).unwrap();
        let b = tape.leaf(vec![0.0], [1, 1, 1]).unwrap();
        let y = tape.conv2d(xv, w, b, 1).unwrap();
        for (o, i) in tape.value(y).iter().zip(&x.data) {
            assert_eq!(*o, 1.7 * i);
        }
        let up = random_planes(1, 4, 4, 4);
        let g = tape.backward(y, &up.data).unwrap();
        for (gx, u) in g.get(xv).unwrap().iter().zip(&up.data) {
            assert!((gx - 1.7 * u).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_errors() {
        let net = Network::<f64>::build(&cfg(vec![2, 2], false)).unwrap();
        assert!(matches!(net.forward(&random_planes(3, 8, 8, 1)), Err(Error::Shape(_))));
        assert!(matches!(net.forward(&random_planes(2, 7, 8, 1)), Err(Error::Shape(_))));
        let x = random_planes(2, 8, 8, 1);
        assert!(net.backward_params(&x, &random_planes(2, 4, 4, 1)).is_err());
        assert!(net.backward_input(&x, &random_planes(1, 8, 8, 1)).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let net = Network::<f64>::build(&cfg(vec![2, 4], true)).unwrap();
        let x = random_planes(2, 8, 8, 5);
        let z = Planes::zeros(2, 8, 8);
        assert!(net.backward_params(&x, &z).unwrap().iter().all(|g| *g == 0.0));
        assert!(net.backward_input(&x, &z).unwrap().data.iter().all(|g| *g == 0.0));
    }
}
