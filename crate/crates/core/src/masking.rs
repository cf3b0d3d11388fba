//! Fixed per-worker subnetwork masks.
//!
//! Every maskable structural unit (a hidden channel, or a whole residual
//! block) is assigned to exactly `P` of the `N` workers. Unit assignments
//! induce a binary mask over the flat parameter vector for each worker.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{LayerKind, ModelTopology, ParamKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Hidden neurons / channels are the units.
    Neuron,
    /// Whole residual blocks are the units.
    Block,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Neuron => "neuron",
            Strategy::Block => "block",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "neuron" => Ok(Strategy::Neuron),
            "block" => Ok(Strategy::Block),
            other => Err(Error::config(format!("unknown masking strategy {other:?} (expected neuron or block)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StructuralUnit {
    Channel { layer: String, index: usize },
    Block { block: String },
}

impl fmt::Display for StructuralUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StructuralUnit::Channel { layer, index } => write!(f, "{layer}[{index}]"),
            StructuralUnit::Block { block } => f.write_str(block),
        }
    }
}

fn check_counts(workers: usize, replication: usize) -> Result<()> {
    if workers == 0 {
        return Err(Error::config("worker count must be at least 1"));
    }
    if replication < 1 || replication > workers {
        return Err(Error::config(format!(
            "replication P={replication} must satisfy 1 <= P <= N={workers}"
        )));
    }
    Ok(())
}

/// Lays units out cyclically in the given order: the unit at position `j`
/// takes the `P` consecutive worker slots starting at `j * P (mod N)`.
/// Every unit gets `P` distinct workers and worker loads differ by at most one.
pub fn cyclic_layout(order: &[usize], workers: usize, replication: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); order.len()];
    for (pos, &unit) in order.iter().enumerate() {
        let start = pos * replication;
        let mut ws: Vec<usize> = (0..replication).map(|t| (start + t) % workers).collect();
        ws.sort_unstable();
        out[unit] = ws;
    }
    out
}

/// Assigns `units` units to `P` of `N` workers each, using a seeded
/// permutation followed by [`cyclic_layout`]. Returns the worker set of each
/// unit, indexed like the input.
pub fn assign_units(units: usize, workers: usize, replication: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    assign_segments(&[units], workers, replication, seed)
}

/// Like [`assign_units`] but units come in consecutive segments (channels of
/// one normalization group). Units are permuted within their segment only,
/// so each segment is spread as evenly over workers as the whole list.
pub fn assign_segments(segments: &[usize], workers: usize, replication: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    check_counts(workers, replication)?;
    let total: usize = segments.iter().sum();
    if total == 0 {
        return Err(Error::config("no maskable units to assign"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = Vec::with_capacity(total);
    let mut start = 0;
    for &len in segments {
        let mut seg: Vec<usize> = (start..start + len).collect();
        seg.shuffle(&mut rng);
        order.extend(seg);
        start += len;
    }
    Ok(cyclic_layout(&order, workers, replication))
}

/// One worker's view of the model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WorkerMask {
    /// `m_i` over the flat parameter vector.
    pub param_mask: Vec<bool>,
    /// `z_i` per residual block.
    pub block_active: Vec<bool>,
    /// Active output channels per layer; `None` means all active.
    pub channel_active: Vec<Option<Vec<bool>>>,
}

impl WorkerMask {
    pub fn full(topology: &ModelTopology) -> Self {
        Self {
            param_mask: vec![true; topology.num_params()],
            block_active: vec![true; topology.blocks.len()],
            channel_active: vec![None; topology.layers.len()],
        }
    }

    pub fn active_params(&self) -> usize {
        self.param_mask.iter().filter(|&&m| m).count()
    }

    pub fn channels(&self, layer: usize) -> Option<&[bool]> {
        self.channel_active.get(layer).and_then(|c| c.as_deref())
    }

    pub fn is_full(&self) -> bool {
        self.param_mask.iter().all(|&m| m)
    }

    /// Mask as `0.0 / 1.0` multipliers.
    pub fn as_f64(&self) -> Vec<f64> {
        self.param_mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
    }
}

/// Builds per-worker parameter masks from per-worker output-channel masks of
/// the channel-maskable layers. A masked output channel zeroes its weight
/// row, bias and normalization affine entries; layers whose input is gated
/// by that layer lose the matching input slice.
pub fn induce_channel_param_mask(
    topology: &ModelTopology,
    channel_masks: &[BTreeMap<String, Vec<bool>>],
) -> Result<Vec<WorkerMask>> {
    topology.validate()?;
    channel_masks
        .iter()
        .map(|per_layer| {
            let mut layer_masks: Vec<Option<Vec<bool>>> = vec![None; topology.layers.len()];
            for (name, mask) in per_layer {
                let li = topology
                    .layer_index(name)
                    .ok_or_else(|| Error::Topology(format!("channel mask for unknown layer {name}")))?;
                let layer = &topology.layers[li];
                if !layer.channel_maskable {
                    return Err(Error::config(format!("layer {name} has no maskable channels")));
                }
                if mask.len() != layer.out_channels {
                    return Err(Error::config(format!(
                        "channel mask for {name} has {} entries, layer has {} channels",
                        mask.len(),
                        layer.out_channels
                    )));
                }
                layer_masks[li] = Some(mask.clone());
            }
            let lookup = |name: &Option<String>| -> Result<Option<Vec<bool>>> {
                match name {
                    None => Ok(None),
                    Some(n) => {
                        let li = topology
                            .layer_index(n)
                            .ok_or_else(|| Error::Topology(format!("dangling layer reference {n}")))?;
                        Ok(layer_masks[li].clone())
                    }
                }
            };
            let mut channel_active = layer_masks.clone();
            let mut param_mask = vec![true; topology.num_params()];
            for (li, layer) in topology.layers.iter().enumerate() {
                let out_mask = if layer.channel_maskable {
                    layer_masks[li].clone()
                } else {
                    lookup(&layer.output_mask_from)?
                };
                let in_mask = lookup(&layer.input_mask_from)?;
                if out_mask.is_some() {
                    channel_active[li] = out_mask.clone();
                }
                for &pi in &layer.params {
                    let p = &topology.params[pi];
                    let dst = &mut param_mask[p.range()];
                    match p.kind {
                        ParamKind::Weight => {
                            let inner: usize = p.shape.iter().skip(1).product();
                            let spatial: usize = p.shape.iter().skip(2).product();
                            for (e, m) in dst.iter_mut().enumerate() {
                                let o = e / inner;
                                let out_ok = out_mask.as_ref().is_none_or(|om| om[o]);
                                let in_ok = match &in_mask {
                                    Some(im) if p.shape.len() >= 2 => im[(e / spatial) % p.shape[1]],
                                    _ => true,
                                };
                                *m = out_ok && in_ok;
                            }
                        }
                        ParamKind::Bias | ParamKind::NormScale | ParamKind::NormShift => {
                            if let Some(om) = &out_mask {
                                dst.copy_from_slice(om);
                            }
                        }
                    }
                }
            }
            Ok(WorkerMask {
                param_mask,
                block_active: vec![true; topology.blocks.len()],
                channel_active,
            })
        })
        .collect()
}

/// Builds per-worker parameter masks from per-worker block indicators `z_i`.
pub fn induce_block_param_mask(topology: &ModelTopology, block_masks: &[Vec<bool>]) -> Result<Vec<WorkerMask>> {
    topology.validate()?;
    block_masks
        .iter()
        .map(|z| {
            if z.len() != topology.blocks.len() {
                return Err(Error::config(format!(
                    "block mask has {} entries, model has {} blocks",
                    z.len(),
                    topology.blocks.len()
                )));
            }
            let mut param_mask = vec![true; topology.num_params()];
            for (block, &active) in topology.blocks.iter().zip(z) {
                if active {
                    continue;
                }
                if !block.maskable || !block.has_skip {
                    return Err(Error::config(format!(
                        "block {} cannot be masked: it is not an identity-skip residual block",
                        block.name
                    )));
                }
                for &pi in &block.params {
                    param_mask[topology.params[pi].range()].fill(false);
                }
            }
            Ok(WorkerMask {
                param_mask,
                block_active: z.clone(),
                channel_active: vec![None; topology.layers.len()],
            })
        })
        .collect()
}

/// Maskable units of a topology under a strategy, grouped into segments
/// (one per normalization group for channels, a single one for blocks).
pub fn maskable_units(topology: &ModelTopology, strategy: Strategy) -> Vec<Vec<StructuralUnit>> {
    match strategy {
        Strategy::Block => {
            let units: Vec<StructuralUnit> = topology
                .blocks
                .iter()
                .filter(|b| b.maskable)
                .map(|b| StructuralUnit::Block { block: b.name.clone() })
                .collect();
            if units.is_empty() {
                vec![]
            } else {
                vec![units]
            }
        }
        Strategy::Neuron => {
            let mut segments = Vec::new();
            for layer in topology.layers.iter().filter(|l| l.channel_maskable) {
                let groups = norm_groups_for(topology, &layer.name);
                let size = layer.out_channels / groups;
                for g in 0..groups {
                    segments.push(
                        (g * size..(g + 1) * size)
                            .map(|index| StructuralUnit::Channel {
                                layer: layer.name.clone(),
                                index,
                            })
                            .collect(),
                    );
                }
            }
            segments
        }
    }
}

/// Number of normalization groups applied to a maskable layer's output (1
/// when it is not normalized).
fn norm_groups_for(topology: &ModelTopology, layer: &str) -> usize {
    topology
        .layers
        .iter()
        .find_map(|l| match (l.kind, &l.output_mask_from) {
            (LayerKind::GroupNorm { groups }, Some(src)) if src == layer => Some(groups),
            _ => None,
        })
        .unwrap_or(1)
}

/// Summary returned by a successful [`MaskAssignment::validate`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub units_per_worker: Vec<usize>,
    pub active_params_per_worker: Vec<usize>,
    /// All masks are all-ones: the run is plain data parallelism.
    pub dp_equivalent: bool,
}

/// Unit-to-worker assignment together with the induced worker masks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskAssignment {
    pub strategy: Strategy,
    pub workers: usize,
    pub replication: usize,
    units: Vec<(StructuralUnit, Vec<usize>)>,
    masks: Vec<WorkerMask>,
}

impl MaskAssignment {
    /// Balanced cyclic assignment of every maskable unit to `replication` of
    /// `workers` workers.
    pub fn assign(topology: &ModelTopology, strategy: Strategy, workers: usize, replication: usize, seed: u64) -> Result<Self> {
        check_counts(workers, replication)?;
        let segments = maskable_units(topology, strategy);
        let lens: Vec<usize> = segments.iter().map(Vec::len).collect();
        if lens.iter().sum::<usize>() == 0 {
            return Err(Error::config(format!("model has no {strategy}-maskable units")));
        }
        let sets = assign_segments(&lens, workers, replication, seed)?;
        let units = segments.into_iter().flatten().zip(sets).collect();
        Self::from_units(topology, strategy, workers, replication, units)
    }

    /// Builds an assignment from an explicit unit map. No invariants are
    /// checked beyond referential integrity; see [`MaskAssignment::validate`].
    pub fn from_units(
        topology: &ModelTopology,
        strategy: Strategy,
        workers: usize,
        replication: usize,
        units: Vec<(StructuralUnit, Vec<usize>)>,
    ) -> Result<Self> {
        check_counts(workers, replication)?;
        for (unit, ws) in &units {
            if let Some(&w) = ws.iter().find(|&&w| w >= workers) {
                return Err(Error::config(format!("unit {unit} assigned to worker {w} of {workers}")));
            }
        }
        let masks = match strategy {
            Strategy::Block => {
                let mut z = vec![vec![true; topology.blocks.len()]; workers];
                for (unit, ws) in &units {
                    let StructuralUnit::Block { block } = unit else {
                        return Err(Error::config(format!("channel unit {unit} in a block assignment")));
                    };
                    let bi = topology
                        .block_index(block)
                        .ok_or_else(|| Error::Topology(format!("unknown block {block}")))?;
                    for (w, zw) in z.iter_mut().enumerate() {
                        zw[bi] = ws.contains(&w);
                    }
                }
                induce_block_param_mask(topology, &z)?
            }
            Strategy::Neuron => {
                let mut maps: Vec<BTreeMap<String, Vec<bool>>> = vec![BTreeMap::new(); workers];
                for (unit, ws) in &units {
                    let StructuralUnit::Channel { layer, index } = unit else {
                        return Err(Error::config(format!("block unit {unit} in a neuron assignment")));
                    };
                    let li = topology
                        .layer_index(layer)
                        .ok_or_else(|| Error::Topology(format!("unknown layer {layer}")))?;
                    let channels = topology.layers[li].out_channels;
                    if *index >= channels {
                        return Err(Error::Topology(format!("channel {unit} out of range")));
                    }
                    for (w, map) in maps.iter_mut().enumerate() {
                        map.entry(layer.clone()).or_insert_with(|| vec![true; channels])[*index] = ws.contains(&w);
                    }
                }
                induce_channel_param_mask(topology, &maps)?
            }
        };
        Ok(Self {
            strategy,
            workers,
            replication,
            units,
            masks,
        })
    }

    /// All-ones masks on every worker (plain data parallelism).
    pub fn full(topology: &ModelTopology, strategy: Strategy, workers: usize) -> Result<Self> {
        Self::assign(topology, strategy, workers, workers, 0)
    }

    pub fn units(&self) -> &[(StructuralUnit, Vec<usize>)] {
        &self.units
    }

    pub fn worker(&self, i: usize) -> &WorkerMask {
        &self.masks[i]
    }

    pub fn masks(&self) -> &[WorkerMask] {
        &self.masks
    }

    pub fn units_per_worker(&self) -> Vec<usize> {
        let mut counts = vec![0; self.workers];
        for (_, ws) in &self.units {
            for &w in ws {
                counts[w] += 1;
            }
        }
        counts
    }

    /// Parameters that belong to at least one maskable unit under this
    /// strategy. Everything else must be active on all workers.
    pub fn maskable_params(&self, topology: &ModelTopology) -> Vec<bool> {
        let mut out = vec![false; topology.num_params()];
        match self.strategy {
            Strategy::Block => {
                for b in topology.blocks.iter().filter(|b| b.maskable) {
                    for &pi in &b.params {
                        out[topology.params[pi].range()].fill(true);
                    }
                }
            }
            Strategy::Neuron => {
                for layer in &topology.layers {
                    let owns = layer.channel_maskable || layer.output_mask_from.is_some();
                    for &pi in &layer.params {
                        let p = &topology.params[pi];
                        if owns || (layer.input_mask_from.is_some() && p.kind == ParamKind::Weight) {
                            out[p.range()].fill(true);
                        }
                    }
                }
            }
        }
        out
    }

    /// Checks every assignment invariant and returns per-worker counts.
    pub fn validate(&self, topology: &ModelTopology) -> Result<ValidationReport> {
        let fail = |message: String, units: Vec<String>| Err(Error::Validation { message, units });

        let bad: Vec<String> = self
            .units
            .iter()
            .filter(|(_, ws)| {
                let mut s = ws.clone();
                s.sort_unstable();
                s.dedup();
                s.len() != self.replication || s.len() != ws.len()
            })
            .map(|(u, ws)| format!("{u} (on {} workers)", ws.len()))
            .collect();
        if !bad.is_empty() {
            return fail(format!("units not on exactly P={} distinct workers", self.replication), bad);
        }
        let expected_units: Vec<StructuralUnit> = maskable_units(topology, self.strategy).into_iter().flatten().collect();
        let missing: Vec<String> = expected_units
            .iter()
            .filter(|u| !self.units.iter().any(|(v, _)| v == *u))
            .map(ToString::to_string)
            .collect();
        if !missing.is_empty() {
            return fail("maskable units without an assignment".into(), missing);
        }

        let maskable = self.maskable_params(topology);
        let d = topology.num_params();
        for j in 0..d {
            let count = self.masks.iter().filter(|m| m.param_mask[j]).count();
            let want = if maskable[j] { self.replication } else { self.workers };
            if count != want {
                let name = topology
                    .params
                    .iter()
                    .find(|p| p.range().contains(&j))
                    .map(|p| format!("{}[{}]", p.name, j - p.offset))
                    .unwrap_or_default();
                return fail(format!("parameter covered by {count} workers, expected {want}"), vec![name]);
            }
        }

        let per_worker = self.units_per_worker();
        let (lo, hi) = (
            per_worker.iter().min().copied().unwrap_or(0),
            per_worker.iter().max().copied().unwrap_or(0),
        );
        if hi - lo > 1 {
            let names = per_worker
                .iter()
                .enumerate()
                .filter(|&(_, &c)| c == lo || c == hi)
                .map(|(w, c)| format!("worker {w}: {c} units"))
                .collect();
            return fail("unbalanced worker loads".into(), names);
        }

        for (w, mask) in self.masks.iter().enumerate() {
            match self.strategy {
                Strategy::Block => {
                    if topology.blocks.iter().any(|b| b.maskable) && !mask.block_active.iter().any(|&z| z) {
                        return fail(format!("worker {w} keeps no residual block"), vec![format!("worker {w}")]);
                    }
                }
                Strategy::Neuron => {
                    for (li, layer) in topology.layers.iter().enumerate().filter(|(_, l)| l.channel_maskable) {
                        let Some(active) = mask.channels(li) else { continue };
                        let groups = norm_groups_for(topology, &layer.name);
                        let size = layer.out_channels / groups;
                        for g in 0..groups {
                            if !active[g * size..(g + 1) * size].iter().any(|&a| a) {
                                let what = if groups == 1 { "all output channels" } else { "a whole norm group" };
                                return fail(
                                    format!("worker {w} masks {what} of {}", layer.name),
                                    vec![format!("{}[group {g}]", layer.name)],
                                );
                            }
                        }
                    }
                }
            }
        }

        Ok(ValidationReport {
            units_per_worker: per_worker,
            active_params_per_worker: self.masks.iter().map(WorkerMask::active_params).collect(),
            dp_equivalent: self.masks.iter().all(WorkerMask::is_full),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = MaskDocument {
            strategy: self.strategy,
            workers: self.workers,
            replication: self.replication,
            units: self
                .units
                .iter()
                .map(|(unit, workers)| UnitEntry {
                    unit: unit.clone(),
                    workers: workers.clone(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(topology: &ModelTopology, text: &str) -> Result<Self> {
        let doc: MaskDocument = serde_json::from_str(text)?;
        Self::from_units(
            topology,
            doc.strategy,
            doc.workers,
            doc.replication,
            doc.units.into_iter().map(|e| (e.unit, e.workers)).collect(),
        )
    }
}

#[derive(Serialize, Deserialize)]
struct MaskDocument {
    strategy: Strategy,
    workers: usize,
    replication: usize,
    units: Vec<UnitEntry>,
}

#[derive(Serialize, Deserialize)]
struct UnitEntry {
    #[serde(flatten)]
    unit: StructuralUnit,
    workers: Vec<usize>,
}
