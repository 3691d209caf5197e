//! Parameters and the two layer types every module here is built from.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

static NEXT_PARAM: AtomicU64 = AtomicU64::new(1);

/// Process-unique identity of a parameter; used to look gradients up in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

#[derive(Clone, Debug)]
pub struct Param {
    id: ParamId,
    name: String,
    value: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Param {
            id: ParamId(NEXT_PARAM.fetch_add(1, Ordering::Relaxed)),
            name: name.into(),
            value,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        &mut self.value
    }

    pub fn set(&mut self, value: Tensor) -> Result<()> {
        if value.shape() != self.value.shape() {
            return Err(crate::TensorError::ShapeMismatch {
                op: "param set",
                lhs: self.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.value = value;
        Ok(())
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Anything that owns parameters. Visitors receive fully qualified names.
pub trait Module {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.numel());
        n
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Seeded parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        use rand::SeedableRng;
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform in `±bound`.
    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        if bound == 0.0 {
            return Tensor::zeros(shape);
        }
        Tensor::rand_uniform(shape, -bound, bound, &mut self.rng)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn next_seed(&mut self) -> u64 {
        self.rng.gen()
    }
}

/// Square-kernel 2-D convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// He-uniform weights, zero bias; `pad = k/2`.
    pub fn new(c_in: usize, c_out: usize, k: usize, stride: usize, init: &mut Init) -> Self {
        let fan_in = (c_in * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        Conv2d {
            weight: Param::new("weight", init.uniform(&[c_out, c_in, k, k], bound)),
            bias: Param::new("bias", Tensor::zeros(&[c_out])),
            stride,
            pad: k / 2,
        }
    }

    pub fn zeroed(c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        Conv2d {
            weight: Param::new("weight", Tensor::zeros(&[c_out, c_in, k, k])),
            bias: Param::new("bias", Tensor::zeros(&[c_out])),
            stride,
            pad: k / 2,
        }
    }

    /// Rescale initial weights, e.g. to start a residual branch small.
    pub fn scaled(mut self, factor: f64) -> Self {
        let w = self.weight.value().map(|v| v * factor);
        self.weight.set(w).expect("same shape");
        self
    }

    pub fn c_in(&self) -> usize {
        self.weight.value().shape()[1]
    }

    pub fn c_out(&self) -> usize {
        self.weight.value().shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.value().shape()[2]
    }

    pub fn forward<'g>(&self, g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
        x.conv2d(
            g.param(&self.weight),
            Some(g.param(&self.bias)),
            self.stride,
            self.pad,
        )
    }

    /// Multiply-accumulates for an input of spatial size `h × w`.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let k = self.kernel();
        let ho = crate::kernels::conv_out_extent(h, k, self.stride, self.pad).unwrap_or(0);
        let wo = crate::kernels::conv_out_extent(w, k, self.stride, self.pad).unwrap_or(0);
        (self.c_out() * self.c_in() * k * k * ho * wo) as u64
    }
}

impl Module for Conv2d {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

pub const GN_EPS: f64 = 1e-5;

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// `min(32, C)` groups, falling back to `gcd(32, C)` when that does not divide `C`.
pub fn default_groups(channels: usize) -> usize {
    let g = channels.min(32);
    if channels % g == 0 {
        g
    } else {
        gcd(32, channels)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: Param,
    pub beta: Param,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new(channels: usize) -> Self {
        Self::with_groups(channels, default_groups(channels)).expect("default groups divide C")
    }

    pub fn with_groups(channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(invalid(
                "group_norm",
                format!("{channels} channels not divisible into {groups} groups"),
            ));
        }
        Ok(GroupNorm {
            gamma: Param::new("gamma", Tensor::ones(&[channels])),
            beta: Param::new("beta", Tensor::zeros(&[channels])),
            groups,
            eps: GN_EPS,
        })
    }

    pub fn forward<'g>(&self, g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
        x.group_norm(
            self.groups,
            g.param(&self.gamma),
            g.param(&self.beta),
            self.eps,
        )
    }
}

impl Module for GroupNorm {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_fallback() {
        assert_eq!(default_groups(64), 32);
        assert_eq!(default_groups(8), 8);
        assert_eq!(default_groups(48), 16);
        assert_eq!(default_groups(36), 4);
        assert_eq!(default_groups(1), 1);
    }

    #[test]
    fn conv_param_count() {
        let mut init = Init::new(0);
        let c = Conv2d::new(16, 8, 1, 1, &mut init);
        assert_eq!(c.num_params(), 16 * 8 + 8);
        let c = Conv2d::new(16, 8, 3, 1, &mut init);
        assert_eq!(c.num_params(), 16 * 8 * 9 + 8);
    }

    #[test]
    fn init_is_deterministic() {
        let a = Init::new(42).uniform(&[3, 3], 1.0);
        let b = Init::new(42).uniform(&[3, 3], 1.0);
        assert_eq!(a, b);
    }
}
