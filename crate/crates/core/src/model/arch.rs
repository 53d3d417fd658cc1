use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BatchNorm2d, Conv2d, GraphBuilder, Layer, Linear, ModelGraph, Pool2d};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Kaiming-normal (fan-in) conv initialisation.
pub fn kaiming_conv<R: Rng + ?Sized>(
    out_ch: usize,
    in_ch: usize,
    k: usize,
    rng: &mut R,
) -> Tensor {
    let fan_in = (in_ch * k * k) as f32;
    Tensor::randn(&[out_ch, in_ch, k, k], (2.0 / fan_in).sqrt(), rng)
}

pub fn kaiming_linear<R: Rng + ?Sized>(out: usize, inp: usize, rng: &mut R) -> Tensor {
    Tensor::randn(&[out, inp], (2.0 / inp as f32).sqrt(), rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VggItem {
    /// 3x3 convolution, padding 1, to this many channels.
    Conv(usize),
    /// 3x3 convolution with stride 2.
    StridedConv(usize),
    /// 2x2 max pooling, stride 2.
    Pool,
}

/// A plain conv stack followed by global average pooling and one linear classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct VggConfig {
    pub name: String,
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub items: Vec<VggItem>,
    pub batch_norm: bool,
    pub conv_bias: bool,
}

impl VggConfig {
    pub fn new(name: &str, input_shape: [usize; 3], num_classes: usize, items: Vec<VggItem>) -> Self {
        VggConfig {
            name: name.to_string(),
            input_shape,
            num_classes,
            items,
            batch_norm: true,
            conv_bias: false,
        }
    }

    /// Small network trained by default on the bundled dataset.
    pub fn toy_cnn() -> Self {
        use VggItem::*;
        VggConfig::new(
            "toy-cnn",
            [3, 32, 32],
            8,
            vec![StridedConv(32), Pool, Conv(64), Pool, Conv(128), Pool, Conv(128), Conv(128), Conv(128)],
        )
    }

    /// Eight 3x3 conv layers with roughly `2.3 * width_mult^2` million parameters at 32x32 input.
    pub fn vgg_wide(width_mult: f32) -> Self {
        use VggItem::*;
        let w = |c: usize| ((c as f32 * width_mult).round() as usize).max(1);
        VggConfig::new(
            "vgg-wide",
            [3, 32, 32],
            10,
            vec![
                Conv(w(64)),
                Conv(w(64)),
                Pool,
                Conv(w(128)),
                Conv(w(128)),
                Pool,
                Conv(w(256)),
                Conv(w(256)),
                Pool,
                Conv(w(256)),
                Conv(w(256)),
            ],
        )
    }
}

pub fn vgg<R: Rng + ?Sized>(cfg: &VggConfig, rng: &mut R) -> Result<ModelGraph> {
    let [c0, h, w] = cfg.input_shape;
    let mut b = GraphBuilder::new(cfg.name.clone(), vec![c0, h, w], cfg.num_classes);
    let mut ch = c0;
    let (mut hh, mut ww) = (h, w);
    for item in &cfg.items {
        match *item {
            VggItem::Conv(out) | VggItem::StridedConv(out) => {
                let stride = if matches!(item, VggItem::StridedConv(_)) { 2 } else { 1 };
                let weight = kaiming_conv(out, ch, 3, rng);
                let bias = cfg.conv_bias.then(|| Tensor::zeros(&[out]));
                let conv = Conv2d::new(weight, bias, stride, 1)?;
                let (oh, ow) = conv.output_hw(hh, ww).ok_or_else(|| {
                    Error::Config(format!("input {hh}x{ww} too small for {}", cfg.name))
                })?;
                b.push(Layer::Conv2d(conv));
                if cfg.batch_norm {
                    b.push(Layer::BatchNorm2d(BatchNorm2d::identity(out, 1e-5)));
                }
                b.push(Layer::ReLU);
                ch = out;
                (hh, ww) = (oh, ow);
            }
            VggItem::Pool => {
                let p = Pool2d::new(2, 2);
                (hh, ww) = p.output_hw(hh, ww).ok_or_else(|| {
                    Error::Config(format!("input too small to pool in {}", cfg.name))
                })?;
                b.push(Layer::MaxPool2d(p));
            }
        }
    }
    b.push(Layer::AvgPool2d(Pool2d::new(hh.min(ww), hh.min(ww))));
    b.push(Layer::Flatten);
    let head = Linear::new(
        kaiming_linear(cfg.num_classes, ch, rng),
        Some(Tensor::zeros(&[cfg.num_classes])),
    )?;
    b.push(Layer::Linear(head));
    b.build()
}

/// Two residual stages: an identity block and a downsampling block with a strided 1x1 shortcut.
pub fn toy_resnet<R: Rng + ?Sized>(
    input_shape: [usize; 3],
    num_classes: usize,
    width: usize,
    rng: &mut R,
) -> Result<ModelGraph> {
    let [c0, h, w] = input_shape;
    let mut b = GraphBuilder::new("toy-resnet", vec![c0, h, w], num_classes);
    let conv = |out: usize, inp: usize, k: usize, stride: usize, rng: &mut R| -> Result<Layer> {
        Ok(Layer::Conv2d(Conv2d::new(kaiming_conv(out, inp, k, rng), None, stride, k / 2)?))
    };
    let bn = |c: usize| Layer::BatchNorm2d(BatchNorm2d::identity(c, 1e-5));

    b.push(conv(width, c0, 3, 1, rng)?);
    b.push(bn(width));
    let stem = b.push(Layer::ReLU);

    // identity block: the inner conv is prunable, the conv feeding the join is protected
    b.push(conv(width, width, 3, 1, rng)?);
    b.push(bn(width));
    b.push(Layer::ReLU);
    b.push(conv(width, width, 3, 1, rng)?);
    let inner = b.push(bn(width));
    b.push_from(Layer::Add { other: inner }, stem);
    let block1 = b.push(Layer::ReLU);

    // downsampling block
    let wide = width * 2;
    b.push(conv(wide, width, 3, 2, rng)?);
    b.push(bn(wide));
    b.push(Layer::ReLU);
    b.push(conv(wide, wide, 3, 1, rng)?);
    let main = b.push(bn(wide));
    b.push_from(conv(wide, width, 1, 2, rng)?, block1);
    b.push(bn(wide));
    b.push(Layer::Add { other: main });
    b.push(Layer::ReLU);

    let (hh, ww) = (h.div_ceil(2), w.div_ceil(2));
    b.push(Layer::AvgPool2d(Pool2d::new(hh.min(ww), hh.min(ww))));
    b.push(Layer::Flatten);
    b.push(Layer::Linear(Linear::new(
        kaiming_linear(num_classes, wide, rng),
        Some(Tensor::zeros(&[num_classes])),
    )?));
    b.build()
}

/// Named architectures available to the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    ToyCnn,
    ToyResnet,
    VggWide,
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy-cnn" => Ok(Architecture::ToyCnn),
            "toy-resnet" => Ok(Architecture::ToyResnet),
            "vgg-wide" => Ok(Architecture::VggWide),
            other => Err(Error::Config(format!(
                "unknown architecture {other:?} (expected toy-cnn, toy-resnet or vgg-wide)"
            ))),
        }
    }
}

/// Freshly initialised model for `arch`, shaped for the given input and class count.
pub fn architecture(
    arch: Architecture,
    input_shape: [usize; 3],
    num_classes: usize,
    seed: u64,
) -> Result<ModelGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match arch {
        Architecture::ToyCnn => {
            let mut cfg = VggConfig::toy_cnn();
            cfg.input_shape = input_shape;
            cfg.num_classes = num_classes;
            vgg(&cfg, &mut rng)
        }
        Architecture::VggWide => {
            let mut cfg = VggConfig::vgg_wide(1.0);
            cfg.input_shape = input_shape;
            cfg.num_classes = num_classes;
            vgg(&cfg, &mut rng)
        }
        Architecture::ToyResnet => toy_resnet(input_shape, num_classes, 16, &mut rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ChannelConsumer;

    #[test]
    fn toy_cnn_structure() {
        let m = architecture(Architecture::ToyCnn, [3, 32, 32], 8, 0).unwrap();
        let convs = m.conv_nodes();
        assert_eq!(convs.len(), 6);
        assert_eq!(m.conv_predecessor(convs[0]), None);
        for w in convs.windows(2) {
            assert_eq!(m.conv_predecessor(w[1]), Some(w[0]));
        }
        assert!(m.protected().is_empty());
        let last = m.channel_flow_of(*convs.last().unwrap());
        assert!(matches!(last.consumer, ChannelConsumer::Linear { spatial: 1, .. }));
    }

    #[test]
    fn vgg_wide_has_eight_convs_and_over_a_million_params() {
        let m = architecture(Architecture::VggWide, [3, 32, 32], 10, 1).unwrap();
        assert_eq!(m.conv_depth(), 8);
        assert!(m.param_count() > 1_000_000);
    }

    #[test]
    fn resnet_protects_join_and_shortcut_convs() {
        let m = architecture(Architecture::ToyResnet, [3, 16, 16], 4, 0).unwrap();
        let convs = m.conv_nodes();
        assert_eq!(convs.len(), 6);
        // stem fans out, second conv of each block feeds a join, the shortcut reads an explicit source
        let expected: Vec<usize> = vec![convs[0], convs[2], convs[4], convs[5]];
        assert_eq!(m.protected().iter().copied().collect::<Vec<_>>(), expected);
        assert_eq!(m.conv_predecessor(convs[2]), Some(convs[1]));
        assert_eq!(m.conv_predecessor(convs[4]), Some(convs[3]));
    }
}
