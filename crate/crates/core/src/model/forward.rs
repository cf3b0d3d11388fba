use super::{GlobalModel, LayerKind, ModelSpec};
use crate::autograd::{Tape, Tensor, Var, GROUP_NORM_EPS};
use crate::error::{Error, Result};
use crate::masking::WorkerMask;

/// Inputs `[B, ...]` with one label per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if inputs.shape()[0] != labels.len() {
            return Err(Error::Input(format!(
                "batch has {} inputs but {} labels",
                inputs.shape()[0],
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// How dropped residual blocks are executed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExecMode {
    /// Dropped blocks are not recorded at all; the block output is its input.
    Structural,
    /// Dropped blocks run on zeroed parameters and are scaled by `z = 0`.
    Multiplicative,
}

/// A recorded forward pass over `m ⊙ θ`.
pub struct ForwardPass {
    pub tape: Tape,
    pub loss: Option<Var>,
    pub logits: Var,
    /// Leaf of each topology parameter, `None` when the pass skipped it.
    params: Vec<Option<Var>>,
    offsets: Vec<(usize, usize)>,
    num_params: usize,
}

impl ForwardPass {
    pub fn loss_value(&self) -> f64 {
        self.loss.map(|l| self.tape.value(l).item()).unwrap_or(f64::NAN)
    }

    pub fn logits(&self) -> &Tensor {
        self.tape.value(self.logits)
    }

    /// `∇_θ L(m ⊙ θ) = m ⊙ ∇L` evaluated at the masked parameters. Entries with
    /// `m = 0` are exactly zero.
    pub fn gradient(&self, mask: &WorkerMask) -> Result<Vec<f64>> {
        let loss = self
            .loss
            .ok_or_else(|| Error::Usage("forward pass was recorded without labels".into()))?;
        let grads = self.tape.backward(loss)?;
        let mut out = vec![0.0; self.num_params];
        for (leaf, &(offset, len)) in self.params.iter().zip(&self.offsets) {
            let Some(var) = leaf else { continue };
            let g = grads.get(*var).expect("parameter leaves require grad").data();
            let dst = &mut out[offset..offset + len];
            for ((d, &gv), &m) in dst.iter_mut().zip(g).zip(&mask.param_mask[offset..offset + len]) {
                if m {
                    *d = gv;
                }
            }
        }
        Ok(out)
    }
}

struct Builder<'a> {
    model: &'a GlobalModel,
    mask: &'a WorkerMask,
    tape: Tape,
    params: Vec<Option<Var>>,
    grad: bool,
}

impl Builder<'_> {
    fn leaf(&mut self, name: &str) -> Var {
        let top = &self.model.topology;
        let pi = top.param_index(name).expect("builder names match the topology");
        if let Some(v) = self.params[pi] {
            return v;
        }
        let p = &top.params[pi];
        let vals: Vec<f64> = self.model.theta[p.range()]
            .iter()
            .zip(&self.mask.param_mask[p.range()])
            .map(|(&t, &m)| if m { t } else { 0.0 })
            .collect();
        let t = Tensor::new(p.shape.clone(), vals).expect("parameter shape");
        let v = if self.grad { self.tape.param(t) } else { self.tape.constant(t) };
        self.params[pi] = Some(v);
        v
    }

    fn conv(&mut self, layer: &str, x: Var) -> Result<Var> {
        let top = &self.model.topology;
        let li = top.layer_index(layer).expect("known layer");
        let LayerKind::Conv { stride, pad, .. } = top.layers[li].kind else {
            unreachable!("{layer} is a conv layer")
        };
        let w = self.leaf(&format!("{layer}.weight"));
        let b = self.leaf(&format!("{layer}.bias"));
        self.tape.conv2d(x, w, b, stride, pad)
    }

    fn linear(&mut self, layer: &str, x: Var) -> Result<Var> {
        let w = self.leaf(&format!("{layer}.weight"));
        let b = self.leaf(&format!("{layer}.bias"));
        self.tape.linear(x, w, b)
    }

    fn norm(&mut self, layer: &str, x: Var) -> Result<Var> {
        let top = &self.model.topology;
        let li = top.layer_index(layer).expect("known layer");
        let LayerKind::GroupNorm { groups } = top.layers[li].kind else {
            unreachable!("{layer} is a norm layer")
        };
        let active = match self.mask.channels(li) {
            Some(a) => a.to_vec(),
            None => vec![true; top.layers[li].out_channels],
        };
        let g = self.leaf(&format!("{layer}.weight"));
        let b = self.leaf(&format!("{layer}.bias"));
        self.tape.group_norm(x, groups, g, b, &active, GROUP_NORM_EPS)
    }

    /// `z · B(x) + x` for block `k`.
    fn block(&mut self, k: usize, x: Var, mode: ExecMode, conv: bool) -> Result<Var> {
        let active = self.mask.block_active[k];
        if !active && mode == ExecMode::Structural {
            return Ok(x);
        }
        let (l1, l2) = if conv { ("conv1", "conv2") } else { ("fc1", "fc2") };
        let mut h = if conv {
            self.conv(&format!("block{k}.{l1}"), x)?
        } else {
            self.linear(&format!("block{k}.{l1}"), x)?
        };
        h = self.norm(&format!("block{k}.norm1"), h)?;
        h = self.tape.relu(h);
        h = if conv {
            self.conv(&format!("block{k}.{l2}"), h)?
        } else {
            self.linear(&format!("block{k}.{l2}"), h)?
        };
        h = self.norm(&format!("block{k}.norm2"), h)?;
        if !active {
            h = self.tape.scale(h, 0.0);
        }
        self.tape.add(h, x)
    }
}

impl GlobalModel {
    /// Forward pass of the subnetwork `m ⊙ θ` on `batch`, recorded for backward.
    pub fn masked_forward(&self, mask: &WorkerMask, batch: &Batch, mode: ExecMode) -> Result<ForwardPass> {
        self.record(mask, &batch.inputs, Some(&batch.labels), mode, true)
    }

    /// Logits of the full (unmasked) model. Nothing is kept for backward.
    pub fn predict(&self, inputs: &Tensor) -> Result<Tensor> {
        let full = WorkerMask::full(&self.topology);
        let pass = self.record(&full, inputs, None, ExecMode::Structural, false)?;
        Ok(pass.logits().clone())
    }

    fn check_input(&self, inputs: &Tensor) -> Result<()> {
        let want = self.spec.input_shape();
        let got = inputs.shape();
        if got.len() != want.len() + 1 || got[1..] != want[..] {
            return Err(Error::Input(format!(
                "input batch has shape {got:?}, model expects [B, {}]",
                want.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
            )));
        }
        Ok(())
    }

    fn record(
        &self,
        mask: &WorkerMask,
        inputs: &Tensor,
        labels: Option<&[usize]>,
        mode: ExecMode,
        grad: bool,
    ) -> Result<ForwardPass> {
        self.check_input(inputs)?;
        if mask.param_mask.len() != self.theta.len() || mask.block_active.len() != self.topology.blocks.len() {
            return Err(Error::Input("worker mask does not match the model topology".into()));
        }
        let mut b = Builder {
            model: self,
            mask,
            tape: Tape::new(),
            params: vec![None; self.topology.params.len()],
            grad,
        };
        let x = b.tape.constant(inputs.clone());
        let logits = match self.spec {
            ModelSpec::MiniResNet { blocks, .. } => {
                let mut h = b.conv("stem.conv", x)?;
                h = b.norm("stem.norm", h)?;
                h = b.tape.relu(h);
                for k in 0..blocks {
                    h = b.block(k, h, mode, true)?;
                }
                let pooled = b.tape.global_avg_pool(h)?;
                b.linear("head", pooled)?
            }
            ModelSpec::ResidualMlp { blocks, .. } => {
                let mut h = b.linear("stem.fc", x)?;
                h = b.norm("stem.norm", h)?;
                h = b.tape.relu(h);
                for k in 0..blocks {
                    h = b.block(k, h, mode, false)?;
                }
                b.linear("head", h)?
            }
        };
        let loss = match labels {
            Some(l) => Some(b.tape.softmax_cross_entropy(logits, l)?),
            None => None,
        };
        Ok(ForwardPass {
            tape: b.tape,
            loss,
            logits,
            params: b.params,
            offsets: self.topology.params.iter().map(|p| (p.offset, p.len())).collect(),
            num_params: self.theta.len(),
        })
    }

    /// Loss and gradient of one worker on one batch.
    pub fn loss_and_gradient(&self, mask: &WorkerMask, batch: &Batch) -> Result<(f64, Vec<f64>)> {
        let pass = self.masked_forward(mask, batch, ExecMode::Structural)?;
        Ok((pass.loss_value(), pass.gradient(mask)?))
    }
}

/// Index of the largest logit of each row.
pub(crate) fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}
