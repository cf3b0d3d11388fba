use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
}

/// One named parameter tensor and its slice of the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub kind: ParamKind,
    /// Index into [`ModelTopology::layers`].
    pub layer: usize,
}

impl ParamInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum LayerKind {
    Conv { kernel: usize, stride: usize, pad: usize },
    Linear,
    GroupNorm { groups: usize },
    /// Parameters without a forward rule; used by accounting-only topologies.
    Opaque,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub name: String,
    pub kind: LayerKind,
    pub out_channels: usize,
    pub params: Vec<usize>,
    pub block: Option<usize>,
    /// Output channels of this layer are maskable units under neuron masking.
    pub channel_maskable: bool,
    /// Output channels follow another layer's channel mask (normalization
    /// layers attached to a maskable layer).
    pub output_mask_from: Option<String>,
    /// Input channels are gated by another layer's output-channel mask.
    pub input_mask_from: Option<String>,
    /// Kaiming fan-out of the layer's weight, 0 when it has none.
    pub fan_out: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub params: Vec<usize>,
    pub has_skip: bool,
    pub maskable: bool,
    /// Activation elements one sample records inside this block.
    pub activations_per_sample: usize,
}

/// Structural description of a model: parameter layout, layers, residual
/// blocks and channel dependencies.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelTopology {
    pub params: Vec<ParamInfo>,
    pub layers: Vec<LayerInfo>,
    pub blocks: Vec<BlockInfo>,
    /// Activation elements per sample outside the residual blocks.
    pub fixed_activations_per_sample: usize,
}

impl ModelTopology {
    pub fn num_params(&self) -> usize {
        self.params.iter().map(ParamInfo::len).sum()
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn block_index(&self, name: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.name == name)
    }

    pub fn block_params(&self, block: usize) -> usize {
        self.blocks[block].params.iter().map(|&p| self.params[p].len()).sum()
    }

    /// Activation elements of a full forward pass for one sample.
    pub fn activations_per_sample(&self) -> usize {
        self.fixed_activations_per_sample + self.blocks.iter().map(|b| b.activations_per_sample).sum::<usize>()
    }

    pub fn param_index_map(&self) -> BTreeMap<String, (usize, Vec<usize>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), (p.offset, p.shape.clone())))
            .collect()
    }

    /// Checks structural invariants: contiguous partition of the parameter
    /// vector, resolvable channel references, and skip connections on every
    /// maskable block.
    pub fn validate(&self) -> Result<()> {
        let mut offset = 0;
        for p in &self.params {
            if p.offset != offset {
                return Err(Error::Topology(format!(
                    "parameter {} starts at {} but the previous one ends at {offset}",
                    p.name, p.offset
                )));
            }
            if p.layer >= self.layers.len() {
                return Err(Error::Topology(format!("parameter {} names a missing layer", p.name)));
            }
            offset += p.len();
        }
        for (li, layer) in self.layers.iter().enumerate() {
            for reference in [&layer.output_mask_from, &layer.input_mask_from].into_iter().flatten() {
                match self.layer_index(reference) {
                    None => {
                        return Err(Error::Topology(format!(
                            "layer {} refers to unknown layer {reference}",
                            layer.name
                        )))
                    }
                    Some(src) if src >= li => {
                        return Err(Error::Topology(format!(
                            "layer {} depends on {reference}, which does not precede it",
                            layer.name
                        )))
                    }
                    Some(src) if !self.layers[src].channel_maskable => {
                        return Err(Error::Topology(format!(
                            "layer {} follows {reference}, which has no maskable channels",
                            layer.name
                        )))
                    }
                    _ => {}
                }
            }
        }
        for b in &self.blocks {
            if b.maskable && !b.has_skip {
                return Err(Error::Topology(format!("block {} is maskable without a skip connection", b.name)));
            }
        }
        Ok(())
    }

    /// Accounting-only topology: `fixed` always-active parameters followed by
    /// `blocks` skip-connected blocks of `per_block` parameters each. With
    /// `fixed == 0` every parameter is maskable.
    pub fn block_stack(blocks: usize, per_block: usize, fixed: usize) -> Self {
        let mut b = TopologyBuilder::default();
        if fixed > 0 {
            let l = b.layer("fixed", LayerKind::Opaque, fixed, None, 0);
            b.param(l, "fixed.weight", vec![fixed], ParamKind::Weight);
        }
        for k in 0..blocks {
            let name = format!("block{k}");
            let l = b.layer(&format!("{name}.body"), LayerKind::Opaque, per_block, Some(k), 0);
            b.param(l, &format!("{name}.body.weight"), vec![per_block], ParamKind::Weight);
            b.block(&name, true, true, per_block);
        }
        b.finish(0)
    }
}

/// Incremental construction helper used by the model builders.
#[derive(Default)]
pub(crate) struct TopologyBuilder {
    params: Vec<ParamInfo>,
    layers: Vec<LayerInfo>,
    blocks: Vec<BlockInfo>,
    offset: usize,
}

impl TopologyBuilder {
    pub fn layer(&mut self, name: &str, kind: LayerKind, out_channels: usize, block: Option<usize>, fan_out: usize) -> usize {
        self.layers.push(LayerInfo {
            name: name.to_string(),
            kind,
            out_channels,
            params: vec![],
            block,
            channel_maskable: false,
            output_mask_from: None,
            input_mask_from: None,
            fan_out,
        });
        self.layers.len() - 1
    }

    pub fn layer_mut(&mut self, idx: usize) -> &mut LayerInfo {
        &mut self.layers[idx]
    }

    pub fn param(&mut self, layer: usize, name: &str, shape: Vec<usize>, kind: ParamKind) -> usize {
        let len: usize = shape.iter().product();
        self.params.push(ParamInfo {
            name: name.to_string(),
            shape,
            offset: self.offset,
            kind,
            layer,
        });
        self.offset += len;
        let idx = self.params.len() - 1;
        self.layers[layer].params.push(idx);
        idx
    }

    /// Registers block `index` (== number of blocks so far) with every
    /// parameter of its layers.
    pub fn block(&mut self, name: &str, has_skip: bool, maskable: bool, activations_per_sample: usize) {
        let index = self.blocks.len();
        let params = self
            .layers
            .iter()
            .filter(|l| l.block == Some(index))
            .flat_map(|l| l.params.iter().copied())
            .collect();
        self.blocks.push(BlockInfo {
            name: name.to_string(),
            params,
            has_skip,
            maskable,
            activations_per_sample,
        });
    }

    pub fn finish(self, fixed_activations_per_sample: usize) -> ModelTopology {
        ModelTopology {
            params: self.params,
            layers: self.layers,
            blocks: self.blocks,
            fixed_activations_per_sample,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_stack_partitions_parameters() {
        let t = ModelTopology::block_stack(8, 10, 5);
        t.validate().unwrap();
        assert_eq!(t.num_params(), 85);
        assert_eq!(t.blocks.len(), 8);
        assert_eq!(t.block_params(3), 10);
    }

    #[test]
    fn dangling_reference_is_a_topology_error() {
        let mut t = ModelTopology::block_stack(2, 4, 0);
        t.layers[1].input_mask_from = Some("nope".into());
        assert!(matches!(t.validate(), Err(Error::Topology(_))));
    }

    #[test]
    fn maskable_block_needs_skip() {
        let mut t = ModelTopology::block_stack(2, 4, 0);
        t.blocks[0].has_skip = false;
        assert!(matches!(t.validate(), Err(Error::Topology(_))));
    }
}
