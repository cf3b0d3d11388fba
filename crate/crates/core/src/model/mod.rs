//! Desk-scale residual architectures with declared maskable structure.

mod checkpoint;
mod forward;
mod init;
mod topology;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forward::{Batch, ExecMode, ForwardPass};
pub(crate) use forward::argmax_rows;
pub use init::{active_fan_out, masked_kaiming_init};
pub use topology::{BlockInfo, LayerInfo, LayerKind, ModelTopology, ParamInfo, ParamKind};

use serde::{Deserialize, Serialize};
use topology::TopologyBuilder;

use crate::autograd::conv::conv_output_len;
use crate::error::{Error, Result};
use crate::masking::{MaskAssignment, Strategy};

/// Architecture description. Everything needed to rebuild the topology.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    /// Stem conv, `blocks` identity-skip residual blocks
    /// (conv-GN-ReLU-conv-GN + x), global average pool, linear head.
    #[serde(rename = "mini_resnet")]
    MiniResNet {
        in_channels: usize,
        image_size: usize,
        channels: usize,
        blocks: usize,
        classes: usize,
        norm_groups: usize,
        stem_stride: usize,
    },
    /// Linear stem, `blocks` residual blocks (fc-GN-ReLU-fc-GN + x), linear head.
    ResidualMlp {
        input_dim: usize,
        width: usize,
        blocks: usize,
        classes: usize,
        norm_groups: usize,
    },
}

impl ModelSpec {
    /// Mini-resnet on 3x7x7 inputs with a stride-2 stem (4x4 feature maps).
    pub fn mini_resnet(channels: usize, blocks: usize, classes: usize, norm_groups: usize) -> Self {
        ModelSpec::MiniResNet {
            in_channels: 3,
            image_size: 7,
            channels,
            blocks,
            classes,
            norm_groups,
            stem_stride: 2,
        }
    }

    pub fn residual_mlp(input_dim: usize, width: usize, blocks: usize, classes: usize) -> Self {
        ModelSpec::ResidualMlp {
            input_dim,
            width,
            blocks,
            classes,
            norm_groups: 2,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            ModelSpec::MiniResNet { classes, .. } | ModelSpec::ResidualMlp { classes, .. } => *classes,
        }
    }

    /// Shape of one input sample.
    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            ModelSpec::MiniResNet {
                in_channels,
                image_size,
                ..
            } => vec![*in_channels, *image_size, *image_size],
            ModelSpec::ResidualMlp { input_dim, .. } => vec![*input_dim],
        }
    }

    /// Spatial side of the residual feature maps.
    pub(crate) fn feature_size(&self) -> Result<usize> {
        match self {
            ModelSpec::MiniResNet {
                image_size,
                stem_stride,
                ..
            } => conv_output_len(*image_size, 3, *stem_stride, 1).ok_or_else(|| {
                Error::config(format!("stem stride {stem_stride} does not tile a {image_size}px image"))
            }),
            ModelSpec::ResidualMlp { .. } => Ok(1),
        }
    }

    fn check(&self) -> Result<()> {
        let (width, blocks, classes, groups) = match self {
            ModelSpec::MiniResNet {
                channels,
                blocks,
                classes,
                norm_groups,
                in_channels,
                ..
            } => {
                if *in_channels == 0 {
                    return Err(Error::config("in_channels must be positive"));
                }
                (*channels, *blocks, *classes, *norm_groups)
            }
            ModelSpec::ResidualMlp {
                width,
                blocks,
                classes,
                norm_groups,
                input_dim,
            } => {
                if *input_dim == 0 {
                    return Err(Error::config("input_dim must be positive"));
                }
                (*width, *blocks, *classes, *norm_groups)
            }
        };
        if blocks < 1 {
            return Err(Error::config("a residual model needs at least one block"));
        }
        if classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        if groups == 0 || width == 0 || width % groups != 0 {
            return Err(Error::config(format!("norm_groups={groups} must divide width {width}")));
        }
        self.feature_size()?;
        Ok(())
    }

    pub fn topology(&self) -> Result<ModelTopology> {
        self.check()?;
        let mut b = TopologyBuilder::default();
        let top = match *self {
            ModelSpec::MiniResNet {
                in_channels,
                channels: c,
                blocks,
                classes,
                norm_groups,
                stem_stride,
                ..
            } => {
                let hw = self.feature_size()?.pow(2);
                let conv = |stride| LayerKind::Conv {
                    kernel: 3,
                    stride,
                    pad: 1,
                };
                let stem = b.layer("stem.conv", conv(stem_stride), c, None, c * 9);
                b.param(stem, "stem.conv.weight", vec![c, in_channels, 3, 3], ParamKind::Weight);
                b.param(stem, "stem.conv.bias", vec![c], ParamKind::Bias);
                norm_layer(&mut b, "stem.norm", c, norm_groups, None, None);
                for k in 0..blocks {
                    let conv1 = format!("block{k}.conv1");
                    let l1 = b.layer(&conv1, conv(1), c, Some(k), c * 9);
                    b.layer_mut(l1).channel_maskable = true;
                    b.param(l1, &format!("{conv1}.weight"), vec![c, c, 3, 3], ParamKind::Weight);
                    b.param(l1, &format!("{conv1}.bias"), vec![c], ParamKind::Bias);
                    norm_layer(&mut b, &format!("block{k}.norm1"), c, norm_groups, Some(k), Some(&conv1));
                    let l2 = b.layer(&format!("block{k}.conv2"), conv(1), c, Some(k), c * 9);
                    b.layer_mut(l2).input_mask_from = Some(conv1.clone());
                    b.param(l2, &format!("block{k}.conv2.weight"), vec![c, c, 3, 3], ParamKind::Weight);
                    b.param(l2, &format!("block{k}.conv2.bias"), vec![c], ParamKind::Bias);
                    norm_layer(&mut b, &format!("block{k}.norm2"), c, norm_groups, Some(k), None);
                    // conv1, norm1, relu, conv2, norm2, residual add
                    b.block(&format!("block{k}"), true, true, 6 * c * hw);
                }
                let head = b.layer("head", LayerKind::Linear, classes, None, classes);
                b.param(head, "head.weight", vec![classes, c], ParamKind::Weight);
                b.param(head, "head.bias", vec![classes], ParamKind::Bias);
                // stem conv, norm, relu; pooled features; logits
                b.finish(3 * c * hw + c + classes)
            }
            ModelSpec::ResidualMlp {
                input_dim,
                width: w,
                blocks,
                classes,
                norm_groups,
            } => {
                let stem = b.layer("stem.fc", LayerKind::Linear, w, None, w);
                b.param(stem, "stem.fc.weight", vec![w, input_dim], ParamKind::Weight);
                b.param(stem, "stem.fc.bias", vec![w], ParamKind::Bias);
                norm_layer(&mut b, "stem.norm", w, norm_groups, None, None);
                for k in 0..blocks {
                    let fc1 = format!("block{k}.fc1");
                    let l1 = b.layer(&fc1, LayerKind::Linear, w, Some(k), w);
                    b.layer_mut(l1).channel_maskable = true;
                    b.param(l1, &format!("{fc1}.weight"), vec![w, w], ParamKind::Weight);
                    b.param(l1, &format!("{fc1}.bias"), vec![w], ParamKind::Bias);
                    norm_layer(&mut b, &format!("block{k}.norm1"), w, norm_groups, Some(k), Some(&fc1));
                    let l2 = b.layer(&format!("block{k}.fc2"), LayerKind::Linear, w, Some(k), w);
                    b.layer_mut(l2).input_mask_from = Some(fc1.clone());
                    b.param(l2, &format!("block{k}.fc2.weight"), vec![w, w], ParamKind::Weight);
                    b.param(l2, &format!("block{k}.fc2.bias"), vec![w], ParamKind::Bias);
                    norm_layer(&mut b, &format!("block{k}.norm2"), w, norm_groups, Some(k), None);
                    b.block(&format!("block{k}"), true, true, 6 * w);
                }
                let head = b.layer("head", LayerKind::Linear, classes, None, classes);
                b.param(head, "head.weight", vec![classes, w], ParamKind::Weight);
                b.param(head, "head.bias", vec![classes], ParamKind::Bias);
                // stem fc, norm, relu; logits
                b.finish(3 * w + classes)
            }
        };
        top.validate()?;
        Ok(top)
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        match *self {
            ModelSpec::MiniResNet {
                in_channels: i,
                channels: c,
                blocks,
                classes: k,
                ..
            } => (9 * c * i + 3 * c) + blocks * (2 * (9 * c * c + c) + 4 * c) + (k * c + k),
            ModelSpec::ResidualMlp {
                input_dim: i,
                width: w,
                blocks,
                classes: k,
                ..
            } => (i * w + 3 * w) + blocks * (2 * (w * w + w) + 4 * w) + (k * w + k),
        }
    }
}

fn norm_layer(b: &mut TopologyBuilder, name: &str, c: usize, groups: usize, block: Option<usize>, follows: Option<&str>) {
    let l = b.layer(name, LayerKind::GroupNorm { groups }, c, block, 0);
    b.layer_mut(l).output_mask_from = follows.map(str::to_string);
    b.param(l, &format!("{name}.weight"), vec![c], ParamKind::NormScale);
    b.param(l, &format!("{name}.bias"), vec![c], ParamKind::NormShift);
}

/// Shared model: architecture, topology and the flat parameter vector θ.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalModel {
    pub spec: ModelSpec,
    pub topology: ModelTopology,
    pub theta: Vec<f64>,
}

impl GlobalModel {
    /// Builds the model with classical (unmasked) fan-out Kaiming init.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let topology = spec.topology()?;
        let full = MaskAssignment::full(&topology, Strategy::Block, 1)?;
        let theta = masked_kaiming_init(&topology, &full, seed)?;
        Ok(Self {
            spec: spec.clone(),
            topology,
            theta,
        })
    }

    /// Builds the model with initialization rescaled for `assignment`.
    pub fn build_for(spec: &ModelSpec, assignment: &MaskAssignment, seed: u64) -> Result<Self> {
        let topology = spec.topology()?;
        let theta = masked_kaiming_init(&topology, assignment, seed)?;
        Ok(Self {
            spec: spec.clone(),
            topology,
            theta,
        })
    }

    pub fn num_params(&self) -> usize {
        self.theta.len()
    }

    pub fn param(&self, name: &str) -> Option<&[f64]> {
        let p = &self.topology.params[self.topology.param_index(name)?];
        Some(&self.theta[p.range()])
    }
}
