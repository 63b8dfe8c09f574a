use rand::Rng;
use serde::{Deserialize, Serialize};

use super::activation::{leaky_relu_backward, leaky_relu_in_place};
use super::conv::{Conv3d, Deconv3d};
use super::loss::NUM_CLASSES;
use super::tensor::{Scalar, Tensor4};
use crate::error::{Error, Result};

/// Shape hyperparameters of the encoder-decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegNetArch {
    pub in_channels: usize,
    pub filters: usize,
    pub outer_kernel: usize,
    pub inner_kernel: usize,
    pub head_kernel: usize,
    pub leaky_slope: f64,
}

impl Default for SegNetArch {
    fn default() -> Self {
        Self {
            in_channels: 1,
            filters: 32,
            outer_kernel: 5,
            inner_kernel: 3,
            head_kernel: 5,
            leaky_slope: 0.1,
        }
    }
}

impl SegNetArch {
    pub fn validate(&self) -> Result<()> {
        let odd = |k: usize| k % 2 == 1;
        if self.in_channels == 0 || self.filters == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if !odd(self.outer_kernel) || !odd(self.inner_kernel) || !odd(self.head_kernel) {
            return Err(Error::Config("kernel sizes must be odd".into()));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config("leaky slope must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Intermediate activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    pub input: Tensor4<T>,
    enc1: Tensor4<T>,
    enc2: Tensor4<T>,
    dec2: Tensor4<T>,
    dec1: Tensor4<T>,
    pub logits: Tensor4<T>,
}

impl<T> ForwardCache<T> {
    /// Hidden activations, encoder first.
    pub fn hidden(&self) -> [&Tensor4<T>; 4] {
        [&self.enc1, &self.enc2, &self.dec2, &self.dec1]
    }
}

/// Encoder (stride-2 conv, conv), mirrored decoder (deconv, stride-2 deconv)
/// with concatenated skips, and a conv head producing one logit per class.
#[derive(Debug, Clone, PartialEq)]
pub struct SegNet<T> {
    pub arch: SegNetArch,
    pub enc1: Conv3d<T>,
    pub enc2: Conv3d<T>,
    pub dec2: Deconv3d<T>,
    pub dec1: Deconv3d<T>,
    pub head: Conv3d<T>,
}

impl<T: Scalar> SegNet<T> {
    pub fn new(arch: SegNetArch, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let f = arch.filters;
        Ok(Self {
            enc1: Conv3d::new("enc1", arch.in_channels, f, arch.outer_kernel, 2, rng),
            enc2: Conv3d::new("enc2", f, f, arch.inner_kernel, 1, rng),
            dec2: Deconv3d::new("dec2", 2 * f, f, arch.inner_kernel, 1, rng),
            dec1: Deconv3d::new("dec1", 2 * f, f, arch.outer_kernel, 2, rng),
            head: Conv3d::new("head", f, NUM_CLASSES, arch.head_kernel, 1, rng),
            arch,
        })
    }

    fn slope(&self) -> T {
        T::from_f64(self.arch.leaky_slope)
    }

    pub fn forward(&self, input: &Tensor4<T>) -> Result<ForwardCache<T>> {
        let [_, x, y, z] = input.dims();
        if x % 2 != 0 || y % 2 != 0 || z % 2 != 0 || x == 0 || y == 0 || z == 0 {
            return Err(Error::shape("network", format!("spatial dims {:?} must be positive and even", input.spatial())));
        }
        let s = self.slope();
        let mut enc1 = self.enc1.forward(input)?;
        leaky_relu_in_place(&mut enc1, s);
        let mut enc2 = self.enc2.forward(&enc1)?;
        leaky_relu_in_place(&mut enc2, s);
        let mut dec2 = self.dec2.forward(&Tensor4::concat_channels(&enc2, &enc1)?)?;
        leaky_relu_in_place(&mut dec2, s);
        let mut dec1 = self.dec1.forward(&Tensor4::concat_channels(&dec2, &enc2)?)?;
        leaky_relu_in_place(&mut dec1, s);
        let logits = self.head.forward(&dec1)?;
        Ok(ForwardCache { input: input.clone(), enc1, enc2, dec2, dec1, logits })
    }

    /// Backpropagate `grad_logits`; returns parameter gradients in
    /// [`SegNet::params`] order and, if asked, the input gradient.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_logits: &Tensor4<T>, need_input: bool) -> Result<(Vec<Vec<T>>, Option<Tensor4<T>>)> {
        let s = self.slope();
        let f = self.arch.filters;
        let head = self.head.backward(&cache.dec1, grad_logits, true)?;
        let mut g = head.input.expect("requested");
        leaky_relu_backward(&cache.dec1, &mut g, s);

        let dec1 = self.dec1.backward(&Tensor4::concat_channels(&cache.dec2, &cache.enc2)?, &g, true)?;
        let (mut g_dec2, g_enc2_skip) = dec1.input.expect("requested").split_channels(f);
        leaky_relu_backward(&cache.dec2, &mut g_dec2, s);

        let dec2 = self.dec2.backward(&Tensor4::concat_channels(&cache.enc2, &cache.enc1)?, &g_dec2, true)?;
        let (mut g_enc2, g_enc1_skip) = dec2.input.expect("requested").split_channels(f);
        g_enc2.add_assign(&g_enc2_skip);
        leaky_relu_backward(&cache.enc2, &mut g_enc2, s);

        let enc2 = self.enc2.backward(&cache.enc1, &g_enc2, true)?;
        let mut g_enc1 = enc2.input.expect("requested");
        g_enc1.add_assign(&g_enc1_skip);
        leaky_relu_backward(&cache.enc1, &mut g_enc1, s);

        let enc1 = self.enc1.backward(&cache.input, &g_enc1, need_input)?;
        let grads = vec![
            enc1.weights,
            enc1.bias,
            enc2.weights,
            enc2.bias,
            dec2.weights,
            dec2.bias,
            dec1.weights,
            dec1.bias,
            head.weights,
            head.bias,
        ];
        Ok((grads, enc1.input))
    }

    pub fn params(&self) -> [&Vec<T>; 10] {
        [
            &self.enc1.weights,
            &self.enc1.bias,
            &self.enc2.weights,
            &self.enc2.bias,
            &self.dec2.weights,
            &self.dec2.bias,
            &self.dec1.weights,
            &self.dec1.bias,
            &self.head.weights,
            &self.head.bias,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut Vec<T>; 10] {
        [
            &mut self.enc1.weights,
            &mut self.enc1.bias,
            &mut self.enc2.weights,
            &mut self.enc2.bias,
            &mut self.dec2.weights,
            &mut self.dec2.bias,
            &mut self.dec1.weights,
            &mut self.dec1.bias,
            &mut self.head.weights,
            &mut self.head.bias,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn convert<U: Scalar>(&self) -> SegNet<U> {
        let conv = |c: &Conv3d<T>| Conv3d {
            name: c.name.clone(),
            cin: c.cin,
            cout: c.cout,
            kernel: c.kernel,
            stride: c.stride,
            weights: c.weights.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            bias: c.bias.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        };
        let deconv = |c: &Deconv3d<T>| Deconv3d {
            name: c.name.clone(),
            cin: c.cin,
            cout: c.cout,
            kernel: c.kernel,
            stride: c.stride,
            weights: c.weights.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            bias: c.bias.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        };
        SegNet {
            arch: self.arch.clone(),
            enc1: conv(&self.enc1),
            enc2: conv(&self.enc2),
            dec2: deconv(&self.dec2),
            dec1: deconv(&self.dec1),
            head: conv(&self.head),
        }
    }
}
