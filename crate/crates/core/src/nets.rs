//! Convolutional building blocks shared by the generator, discriminator,
//! tracker backbone and perceptual feature network.

use hrtrack_nn::{Conv2dSpec, Graph, Init, PadMode, ParamStore, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub(crate) const LEAK: f64 = 0.2;

/// Register `{name}.w: [cout, cin, k, k]` (He-uniform) and `{name}.b`.
pub(crate) fn add_conv(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, rng: &mut ChaCha8Rng) {
    store.add(format!("{name}.w"), &[cout, cin, k, k], Init::HeUniform { fan_in: cin * k * k }, rng);
    store.add(format!("{name}.b"), &[cout], Init::Zeros, rng);
}

/// Register a transposed convolution `{name}.w: [cin, cout, k, k]`.
pub(crate) fn add_conv_t(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, rng: &mut ChaCha8Rng) {
    store.add(format!("{name}.w"), &[cin, cout, k, k], Init::HeUniform { fan_in: cin * k * k / 4 }, rng);
    store.add(format!("{name}.b"), &[cout], Init::Zeros, rng);
}

/// Parameter access for one forward pass: which store, and whether its
/// tensors receive gradients.
#[derive(Clone, Copy)]
pub(crate) struct Params<'a> {
    pub store: &'a ParamStore,
    pub trainable: bool,
}

impl<'a> Params<'a> {
    pub fn new(store: &'a ParamStore, trainable: bool) -> Self {
        Self { store, trainable }
    }

    pub fn var(&self, g: &mut Graph, name: &str) -> Result<Var> {
        Ok(g.param(self.store, name, self.trainable)?)
    }

    pub fn conv(&self, g: &mut Graph, name: &str, x: Var, spec: Conv2dSpec) -> Result<Var> {
        let w = self.var(g, &format!("{name}.w"))?;
        let b = self.var(g, &format!("{name}.b"))?;
        Ok(g.conv2d(x, w, Some(b), spec)?)
    }

    pub fn conv_t(&self, g: &mut Graph, name: &str, x: Var, spec: Conv2dSpec) -> Result<Var> {
        let w = self.var(g, &format!("{name}.w"))?;
        let b = self.var(g, &format!("{name}.b"))?;
        Ok(g.conv_transpose2d(x, w, Some(b), spec)?)
    }
}

/// Padding convention of a network's spatial convolutions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    #[default]
    Zero,
    Circular,
}

impl Padding {
    pub(crate) fn mode(self) -> PadMode {
        match self {
            Padding::Zero => PadMode::Zero,
            Padding::Circular => PadMode::Circular,
        }
    }
}

/// A U-shaped encoder–decoder: a 3×3 stem at `widths[0]`, one stride-2
/// 4×4 convolution per further width, optional self-attention at the
/// coarsest level, then stride-2 transposed convolutions back up with skip
/// concatenation and a 3×3 fuse, and a final 1×1 projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetSpec {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub out_channels: usize,
    pub attention: bool,
    #[serde(default)]
    pub padding: Padding,
}

impl UNetSpec {
    pub fn validate(&self, what: &str) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config(format!("{what}: widths and channel counts must be ≥ 1")));
        }
        Ok(())
    }

    /// Total downsampling factor between input and bottleneck.
    pub fn reduction(&self) -> usize {
        1 << (self.widths.len() - 1)
    }

    pub fn init(&self, prefix: &str, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let w = &self.widths;
        add_conv(store, &format!("{prefix}.stem"), self.in_channels, w[0], 3, rng);
        for i in 1..w.len() {
            add_conv(store, &format!("{prefix}.down{i}"), w[i - 1], w[i], 4, rng);
        }
        if self.attention {
            let c = w[w.len() - 1];
            let dk = attention_key_dim(c);
            add_conv(store, &format!("{prefix}.attn.q"), c, dk, 1, rng);
            add_conv(store, &format!("{prefix}.attn.k"), c, dk, 1, rng);
            add_conv(store, &format!("{prefix}.attn.v"), c, c, 1, rng);
            add_conv(store, &format!("{prefix}.attn.o"), c, c, 1, rng);
        }
        for i in (1..w.len()).rev() {
            add_conv_t(store, &format!("{prefix}.up{i}"), w[i], w[i - 1], 2, rng);
            add_conv(store, &format!("{prefix}.fuse{i}"), 2 * w[i - 1], w[i - 1], 3, rng);
        }
        add_conv(store, &format!("{prefix}.head"), w[0], self.out_channels, 1, rng);
    }

    pub(crate) fn forward(&self, g: &mut Graph, p: Params<'_>, prefix: &str, x: Var) -> Result<Var> {
        let mode = self.padding.mode();
        let same3 = Conv2dSpec::new(1, 1).with_mode(mode);
        let (_, c, h, w) = g.value(x).dims4()?;
        let red = self.reduction();
        if c != self.in_channels || h % red != 0 || w % red != 0 {
            return Err(crate::error::dim_err(
                "unet",
                format!("expected {} channels and sides divisible by {red}, got {c}×{h}×{w}", self.in_channels),
            ));
        }
        let stem = p.conv(g, &format!("{prefix}.stem"), x, same3)?;
        let mut h = g.leaky_relu(stem, LEAK);
        let mut skips = vec![h];
        for i in 1..self.widths.len() {
            let d = p.conv(g, &format!("{prefix}.down{i}"), h, Conv2dSpec::new(2, 1).with_mode(mode))?;
            h = g.leaky_relu(d, LEAK);
            skips.push(h);
        }
        if self.attention {
            h = self_attention(g, p, &format!("{prefix}.attn"), h)?;
        }
        for i in (1..self.widths.len()).rev() {
            let u = p.conv_t(g, &format!("{prefix}.up{i}"), h, Conv2dSpec::new(2, 0))?;
            let u = g.leaky_relu(u, LEAK);
            let cat = g.concat_channels(&[u, skips[i - 1]])?;
            let f = p.conv(g, &format!("{prefix}.fuse{i}"), cat, same3)?;
            h = g.leaky_relu(f, LEAK);
        }
        p.conv(g, &format!("{prefix}.head"), h, Conv2dSpec::new(1, 0))
    }
}

fn attention_key_dim(c: usize) -> usize {
    (c / 4).max(1)
}

/// Residual dot-product self-attention over all spatial positions.
pub(crate) fn self_attention(g: &mut Graph, p: Params<'_>, prefix: &str, x: Var) -> Result<Var> {
    let (n, c, h, w) = g.value(x).dims4()?;
    let dk = attention_key_dim(c);
    let one = Conv2dSpec::new(1, 0);
    let q = p.conv(g, &format!("{prefix}.q"), x, one)?;
    let k = p.conv(g, &format!("{prefix}.k"), x, one)?;
    let v = p.conv(g, &format!("{prefix}.v"), x, one)?;
    let q = g.reshape(q, &[n, dk, h * w])?;
    let k = g.reshape(k, &[n, dk, h * w])?;
    let v = g.reshape(v, &[n, c, h * w])?;
    // scores[i, j] = q_i · k_j / sqrt(dk)
    let scores = g.matmul(q, k, true, false)?;
    let scores = g.scale(scores, 1.0 / (dk as f64).sqrt());
    let attn = g.softmax(scores);
    // out[c, i] = Σ_j v[c, j] · attn[i, j]
    let out = g.matmul(v, attn, false, true)?;
    let out = g.reshape(out, &[n, c, h, w])?;
    let out = p.conv(g, &format!("{prefix}.o"), out, one)?;
    Ok(g.add(x, out)?)
}

/// A plain strided convolutional stack: `widths.len()` stride-2 4×4 stages
/// followed by a 3×3 projection to `out_channels`. Used for patch
/// discriminators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchNetSpec {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub out_channels: usize,
}

impl PatchNetSpec {
    pub fn reduction(&self) -> usize {
        1 << self.widths.len()
    }

    pub fn init(&self, prefix: &str, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let mut cin = self.in_channels;
        for (i, &w) in self.widths.iter().enumerate() {
            add_conv(store, &format!("{prefix}.s{i}"), cin, w, 4, rng);
            cin = w;
        }
        add_conv(store, &format!("{prefix}.head"), cin, self.out_channels, 3, rng);
    }

    pub(crate) fn forward(&self, g: &mut Graph, p: Params<'_>, prefix: &str, x: Var) -> Result<Var> {
        let mut h = x;
        for i in 0..self.widths.len() {
            let c = p.conv(g, &format!("{prefix}.s{i}"), h, Conv2dSpec::new(2, 1))?;
            h = g.leaky_relu(c, LEAK);
        }
        p.conv(g, &format!("{prefix}.head"), h, Conv2dSpec::new(1, 1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use hrtrack_nn::Tensor;
    use rand::SeedableRng;

    #[test]
    fn unet_preserves_spatial_size() {
        let spec = UNetSpec { in_channels: 2, widths: vec![4, 6, 8], out_channels: 3, attention: true, padding: Padding::Zero };
        let mut store = ParamStore::new();
        spec.init("u", &mut store, &mut ChaCha8Rng::seed_from_u64(0));
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 2, 16, 16], 0.3));
        let y = spec.forward(&mut g, Params::new(&store, true), "u", x).unwrap();
        assert_eq!(g.shape(y), [2, 3, 16, 16]);
        let bad = g.constant(Tensor::full(&[1, 2, 10, 10], 0.3));
        assert!(spec.forward(&mut g, Params::new(&store, true), "u", bad).is_err());
    }

    #[test]
    fn patchnet_reduces_by_power_of_two() {
        let spec = PatchNetSpec { in_channels: 3, widths: vec![4, 4], out_channels: 1 };
        let mut store = ParamStore::new();
        spec.init("d", &mut store, &mut ChaCha8Rng::seed_from_u64(0));
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 3, 16, 16], 0.1));
        let y = spec.forward(&mut g, Params::new(&store, false), "d", x).unwrap();
        assert_eq!(g.shape(y), [1, 1, 4, 4]);
    }
}
