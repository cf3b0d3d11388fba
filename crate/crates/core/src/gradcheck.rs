//! Central finite-difference checks of the analytic gradients.
//!
//! The numeric side only ever re-runs forward passes, so it is independent of
//! every backward rule it checks.

use crate::autograd::{Tape, Tensor, Var, GROUP_NORM_EPS};
use crate::error::Result;
use crate::masking::WorkerMask;
use crate::model::{Batch, ExecMode, GlobalModel, ModelSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Step used by every check.
pub const FD_STEP: f64 = 1e-5;
/// Pass threshold on [`max_relative_error`].
pub const FD_TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error. Entries whose magnitude is below
/// this are compared on an absolute scale of `FD_TOLERANCE * REL_ERR_FLOOR`.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let plus = f(&probe);
            probe[i] = x[i] - h;
            let minus = f(&probe);
            probe[i] = x[i];
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < FD_TOLERANCE
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Checks one operator: `loss = Σ op(inputs) ⊙ r` for a fixed random `r`.
fn check_operator(
    name: &str,
    shapes: &[&[usize]],
    seed: u64,
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor> = shapes.iter().map(|s| random(s, &mut rng)).collect();
    let eval = |vals: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut t = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| t.param(v.clone())).collect();
        let y = build(&mut t, &vars)?;
        let mut prng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let r = t.constant(random(t.shape(y), &mut prng));
        let m = t.mul(y, r)?;
        let l = t.sum(m);
        Ok((t, vars, l))
    };
    let (tape, vars, loss) = eval(&inputs)?;
    let grads = tape.backward(loss)?;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (k, inp) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).expect("param leaf").data().to_vec();
        let numeric = central_difference(
            |flat| {
                let mut vals = inputs.clone();
                vals[k] = Tensor::new(inp.shape().to_vec(), flat.to_vec()).expect("same shape");
                let (t, _, l) = eval(&vals).expect("forward succeeded once");
                t.value(l).item()
            },
            inp.data(),
            FD_STEP,
        );
        worst = worst.max(max_relative_error(&analytic, &numeric));
        checked += analytic.len();
    }
    Ok(CheckResult {
        name: name.to_string(),
        checked,
        max_rel_err: worst,
    })
}

/// Finite-difference check of every operator on small random tensors.
pub fn operator_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let partial = [true, false, true, true, false, true];
    Ok(vec![
        check_operator("matmul", &[&[3, 4], &[4, 2]], seed, |t, v| t.matmul(v[0], v[1]))?,
        check_operator("linear", &[&[3, 4], &[5, 4], &[5]], seed + 1, |t, v| t.linear(v[0], v[1], v[2]))?,
        check_operator("conv2d", &[&[2, 2, 4, 4], &[3, 2, 3, 3], &[3]], seed + 2, |t, v| {
            t.conv2d(v[0], v[1], v[2], 1, 1)
        })?,
        check_operator("conv2d_strided", &[&[1, 2, 5, 5], &[2, 2, 3, 3], &[2]], seed + 3, |t, v| {
            t.conv2d(v[0], v[1], v[2], 2, 1)
        })?,
        check_operator("group_norm", &[&[2, 4, 3, 3], &[4], &[4]], seed + 4, |t, v| {
            t.group_norm(v[0], 2, v[1], v[2], &[true; 4], GROUP_NORM_EPS)
        })?,
        check_operator("group_norm_partial", &[&[2, 6, 2, 2], &[6], &[6]], seed + 5, |t, v| {
            t.group_norm(v[0], 2, v[1], v[2], &partial, GROUP_NORM_EPS)
        })?,
        check_operator("relu", &[&[3, 6]], seed + 6, |t, v| Ok(t.relu(v[0])))?,
        check_operator("add", &[&[3, 6], &[3, 6]], seed + 7, |t, v| t.add(v[0], v[1]))?,
        check_operator("mul", &[&[3, 6], &[3, 6]], seed + 8, |t, v| t.mul(v[0], v[1]))?,
        check_operator("global_avg_pool", &[&[2, 3, 2, 2]], seed + 9, |t, v| t.global_avg_pool(v[0]))?,
        check_operator("flatten", &[&[2, 3, 2, 2]], seed + 10, |t, v| Ok(t.flatten(v[0])))?,
        check_operator("softmax_cross_entropy", &[&[4, 5]], seed + 11, |t, v| {
            t.softmax_cross_entropy(v[0], &[0, 3, 4, 1])
        })?,
    ])
}

/// Checks `d loss / d θ` of a whole model on one batch.
///
/// `coords` limits the check to a subset of parameter indices; `None` checks
/// every parameter.
pub fn check_model(
    name: &str,
    model: &GlobalModel,
    mask: &WorkerMask,
    batch: &Batch,
    coords: Option<&[usize]>,
) -> Result<CheckResult> {
    let pass = model.masked_forward(mask, batch, ExecMode::Structural)?;
    let analytic = pass.gradient(mask)?;
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..model.theta.len()).collect();
            &all
        }
    };
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for &j in coords {
        let orig = model.theta[j];
        probe.theta[j] = orig + FD_STEP;
        let plus = probe.masked_forward(mask, batch, ExecMode::Structural)?.loss_value();
        probe.theta[j] = orig - FD_STEP;
        let minus = probe.masked_forward(mask, batch, ExecMode::Structural)?.loss_value();
        probe.theta[j] = orig;
        let numeric = if mask.param_mask[j] { (plus - minus) / (2.0 * FD_STEP) } else { 0.0 };
        worst = worst.max(relative_error(analytic[j], numeric));
    }
    Ok(CheckResult {
        name: name.to_string(),
        checked: coords.len(),
        max_rel_err: worst,
    })
}

/// Random batch matching a model's input shape.
pub fn random_batch(spec: &ModelSpec, batch: usize, seed: u64) -> Result<Batch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shape = vec![batch];
    shape.extend(spec.input_shape());
    let inputs = random(&shape, &mut rng);
    let labels = (0..batch).map(|_| rng.random_range(0..spec.classes())).collect();
    Batch::new(inputs, labels)
}

/// Full-model checks: a small mini-resnet and a residual MLP with every
/// parameter checked, under full, channel-masked and block-masked subnetworks.
///
/// Norm groups keep at least two active channels: a lone active channel on a
/// 1x1 feature map normalizes to exactly zero and sits on the ReLU kink.
pub fn model_suite(seed: u64) -> Result<Vec<CheckResult>> {
    use crate::masking::{MaskAssignment, Strategy};
    let specs = [
        (
            "mini_resnet",
            ModelSpec::MiniResNet {
                in_channels: 2,
                image_size: 4,
                channels: 4,
                blocks: 2,
                classes: 3,
                norm_groups: 2,
                stem_stride: 1,
            },
        ),
        (
            "residual_mlp",
            ModelSpec::ResidualMlp {
                input_dim: 5,
                width: 8,
                blocks: 2,
                classes: 3,
                norm_groups: 2,
            },
        ),
    ];
    let mut results = Vec::new();
    for (name, spec) in specs {
        let model = GlobalModel::build(&spec, seed)?;
        let batch = random_batch(&spec, 3, seed + 1)?;
        let full = WorkerMask::full(&model.topology);
        results.push(check_model(&format!("{name}/full"), &model, &full, &batch, None)?);
        for strategy in [Strategy::Neuron, Strategy::Block] {
            let assignment = MaskAssignment::assign(&model.topology, strategy, 2, 1, seed)?;
            let mask = assignment.worker(0);
            results.push(check_model(
                &format!("{name}/{}", strategy.as_str()),
                &model,
                mask,
                &batch,
                None,
            )?);
        }
    }
    Ok(results)
}

/// Checks the desk-scale mini-resnet (26 channels, 8 blocks) on sampled
/// coordinates: `per_tensor` entries of every parameter tensor, under the full
/// model and N=8, P=4 neuron and block subnetworks.
pub fn desk_model_suite(seed: u64, per_tensor: usize) -> Result<Vec<CheckResult>> {
    use crate::masking::{MaskAssignment, Strategy};
    let spec = ModelSpec::mini_resnet(26, 8, 10, 2);
    let model = GlobalModel::build(&spec, seed)?;
    let batch = random_batch(&spec, 2, seed + 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let mut coords = Vec::new();
    for p in &model.topology.params {
        for _ in 0..per_tensor.min(p.len()) {
            coords.push(p.offset + rng.random_range(0..p.len()));
        }
    }
    let mut results = vec![check_model(
        "mini_resnet_26x8/full",
        &model,
        &WorkerMask::full(&model.topology),
        &batch,
        Some(&coords),
    )?];
    for strategy in [Strategy::Neuron, Strategy::Block] {
        let assignment = MaskAssignment::assign(&model.topology, strategy, 8, 4, seed)?;
        results.push(check_model(
            &format!("mini_resnet_26x8/{strategy}"),
            &model,
            assignment.worker(0),
            &batch,
            Some(&coords),
        )?);
    }
    Ok(results)
}
