use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 2-D convolution with weight `[out_ch, in_ch, kh, kw]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(weight: Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> Result<Self> {
        let conv = Conv2d { weight, bias, stride, padding };
        conv.validate()?;
        Ok(conv)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weight.rank() != 4 {
            return Err(Error::Structure(format!(
                "conv weight must be rank 4, got {:?}",
                self.weight.shape()
            )));
        }
        if self.stride == 0 {
            return Err(Error::Structure("conv stride must be positive".into()));
        }
        if let Some(b) = &self.bias {
            if b.shape() != [self.out_channels()] {
                return Err(Error::Structure(format!(
                    "conv bias shape {:?} does not match {} output channels",
                    b.shape(),
                    self.out_channels()
                )));
            }
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.dim(2), self.weight.dim(3))
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (kh, kw) = self.kernel();
        let hp = h + 2 * self.padding;
        let wp = w + 2 * self.padding;
        if hp < kh || wp < kw {
            return None;
        }
        Some(((hp - kh) / self.stride + 1, (wp - kw) / self.stride + 1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f32,
}

impl BatchNorm2d {
    /// Identity-initialised normalisation over `channels`.
    pub fn identity(channels: usize, eps: f32) -> Self {
        BatchNorm2d {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        for (name, t) in [
            ("gamma", &self.gamma),
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ] {
            if t.shape() != [c] {
                return Err(Error::Structure(format!(
                    "batchnorm {name} shape {:?} != [{c}]",
                    t.shape()
                )));
            }
        }
        if self.running_var.data().iter().any(|&v| v < 0.0 || v.is_nan()) {
            return Err(Error::Structure("batchnorm running_var must be >= 0".into()));
        }
        // eps = 0 is accepted for fusion identities; forward guards against division by zero.
        if self.eps < 0.0 || self.eps.is_nan() {
            return Err(Error::Structure("batchnorm eps must be non-negative".into()));
        }
        Ok(())
    }

    /// Per-channel `(scale, shift)` so that `bn(x) = scale * x + shift` in inference mode.
    pub fn affine(&self) -> Vec<(f32, f32)> {
        (0..self.channels())
            .map(|c| {
                let inv = 1.0 / ((self.running_var.data()[c] as f64 + self.eps as f64).sqrt());
                let scale = self.gamma.data()[c] as f64 * inv;
                let shift = self.beta.data()[c] as f64 - self.running_mean.data()[c] as f64 * scale;
                (scale as f32, shift as f32)
            })
            .collect()
    }
}

/// Fully connected layer with weight `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        let l = Linear { weight, bias };
        l.validate()?;
        Ok(l)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weight.rank() != 2 {
            return Err(Error::Structure(format!(
                "linear weight must be rank 2, got {:?}",
                self.weight.shape()
            )));
        }
        if let Some(b) = &self.bias {
            if b.shape() != [self.out_features()] {
                return Err(Error::Structure(format!(
                    "linear bias shape {:?} != [{}]",
                    b.shape(),
                    self.out_features()
                )));
            }
        }
        Ok(())
    }

    pub fn out_features(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn in_features(&self) -> usize {
        self.weight.dim(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pool2d {
    pub kernel: usize,
    pub stride: usize,
}

impl Pool2d {
    pub fn new(kernel: usize, stride: usize) -> Self {
        Pool2d { kernel, stride }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        if self.kernel == 0 || self.stride == 0 || h < self.kernel || w < self.kernel {
            return None;
        }
        Some(((h - self.kernel) / self.stride + 1, (w - self.kernel) / self.stride + 1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    BatchNorm2d(BatchNorm2d),
    Linear(Linear),
    ReLU,
    MaxPool2d(Pool2d),
    AvgPool2d(Pool2d),
    Flatten,
    /// Element-wise sum of this node's input and the output of node `other`.
    Add { other: usize },
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::BatchNorm2d(_) => "batchnorm2d",
            Layer::Linear(_) => "linear",
            Layer::ReLU => "relu",
            Layer::MaxPool2d(_) => "maxpool2d",
            Layer::AvgPool2d(_) => "avgpool2d",
            Layer::Flatten => "flatten",
            Layer::Add { .. } => "add",
        }
    }

    pub fn as_conv(&self) -> Option<&Conv2d> {
        match self {
            Layer::Conv2d(c) => Some(c),
            _ => None,
        }
    }

    pub fn as_conv_mut(&mut self) -> Option<&mut Conv2d> {
        match self {
            Layer::Conv2d(c) => Some(c),
            _ => None,
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, Layer::Conv2d(_))
    }

    /// Layers that keep the channel axis intact and act on each channel independently.
    pub fn is_channelwise(&self) -> bool {
        matches!(
            self,
            Layer::BatchNorm2d(_) | Layer::ReLU | Layer::MaxPool2d(_) | Layer::AvgPool2d(_)
        )
    }

    /// Trainable tensors in canonical order: weight, bias (conv/linear) or gamma, beta (batchnorm).
    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Conv2d(c) => std::iter::once(&c.weight).chain(c.bias.as_ref()).collect(),
            Layer::Linear(l) => std::iter::once(&l.weight).chain(l.bias.as_ref()).collect(),
            Layer::BatchNorm2d(bn) => vec![&bn.gamma, &bn.beta],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Conv2d(c) => std::iter::once(&mut c.weight).chain(c.bias.as_mut()).collect(),
            Layer::Linear(l) => std::iter::once(&mut l.weight).chain(l.bias.as_mut()).collect(),
            Layer::BatchNorm2d(bn) => vec![&mut bn.gamma, &mut bn.beta],
            _ => Vec::new(),
        }
    }

    /// The weight tensor subject to magnitude pruning, if any.
    pub fn prunable_weight(&self) -> Option<&Tensor> {
        match self {
            Layer::Conv2d(c) => Some(&c.weight),
            Layer::Linear(l) => Some(&l.weight),
            _ => None,
        }
    }

    pub fn prunable_weight_mut(&mut self) -> Option<&mut Tensor> {
        match self {
            Layer::Conv2d(c) => Some(&mut c.weight),
            Layer::Linear(l) => Some(&mut l.weight),
            _ => None,
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        match self {
            Layer::Conv2d(c) => c.validate(),
            Layer::BatchNorm2d(bn) => bn.validate(),
            Layer::Linear(l) => l.validate(),
            Layer::MaxPool2d(p) | Layer::AvgPool2d(p) => {
                if p.kernel == 0 || p.stride == 0 {
                    Err(Error::Structure("pool kernel and stride must be positive".into()))
                } else {
                    Ok(())
                }
            }
            Layer::ReLU | Layer::Flatten | Layer::Add { .. } => Ok(()),
        }
    }
}
