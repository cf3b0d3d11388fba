use subnetdp::autograd::{Tape, Tensor, GROUP_NORM_EPS};
use subnetdp::masking::{MaskAssignment, Strategy, WorkerMask};
use subnetdp::model::{load_checkpoint, save_checkpoint, Batch, ExecMode, GlobalModel, ModelSpec};
use subnetdp::ErrorCategory;

fn inputs(shape: &[usize], seed: u64) -> Tensor {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    Tensor::from_fn(shape, |_| {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    })
}

#[test]
fn parameter_counts_by_hand() {
    // stem 3*4*9 + 4 bias + 8 norm; block 2*(4*4*9 + 4) + 16 norm; head 4*3 + 3
    let spec = ModelSpec::mini_resnet(4, 1, 3, 2);
    assert_eq!(spec.param_count(), 120 + 312 + 15);
    assert_eq!(spec.topology().unwrap().num_params(), 447);

    // stem 27*16 + 16 + 32 = 480; block 2*(16*16*9 + 16) + 64 = 4704; head 160 + 10
    let spec = ModelSpec::mini_resnet(16, 8, 10, 2);
    assert_eq!(spec.topology().unwrap().num_params(), 480 + 8 * 4704 + 170);

    // stem 2*8 + 8 + 16; block 2*(64 + 8) + 32; head 24 + 3
    let spec = ModelSpec::residual_mlp(2, 8, 1, 3);
    assert_eq!(spec.param_count(), 40 + 176 + 27);
    assert_eq!(spec.topology().unwrap().num_params(), 243);
}

#[test]
fn desk_model_is_about_100k_parameters() {
    let spec = ModelSpec::mini_resnet(26, 8, 10, 2);
    let n = spec.topology().unwrap().num_params();
    assert_eq!(n, spec.param_count());
    assert!((90_000..110_000).contains(&n), "{n}");
}

fn sample_variance(v: &[f64]) -> f64 {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

fn conv_weights(model: &GlobalModel, layer: &str, blocks: usize) -> Vec<f64> {
    (0..blocks)
        .flat_map(|k| model.param(&format!("block{k}.{layer}.weight")).unwrap().to_vec())
        .collect()
}

#[test]
fn kaiming_fan_out_variance() {
    // 16 blocks of 26x26x3x3 conv1 weights: 97,344 draws
    let spec = ModelSpec::mini_resnet(26, 16, 10, 2);
    let model = GlobalModel::build(&spec, 3).unwrap();
    let w = conv_weights(&model, "conv1", 16);
    assert!(w.len() > 90_000);
    let target = 2.0 / (26.0 * 9.0);
    let var = sample_variance(&w);
    // standard error of a Gaussian sample variance is var*sqrt(2/n), about 0.5%
    assert!((var / target - 1.0).abs() < 0.03, "var {var} vs {target}");
    assert_eq!(model.param("block0.norm1.weight").unwrap(), &[1.0; 26][..]);
    assert!(model.param("block0.conv1.bias").unwrap().iter().all(|&b| b == 0.0));
}

#[test]
fn masked_init_uses_active_fan_out() {
    let spec = ModelSpec::mini_resnet(26, 16, 10, 2);
    let top = spec.topology().unwrap();
    let a = MaskAssignment::assign(&top, Strategy::Neuron, 8, 4, 0).unwrap();
    let model = GlobalModel::build_for(&spec, &a, 3).unwrap();
    let w = conv_weights(&model, "conv1", 16);
    // half of the 26 output channels active on every worker: fan = 13 * 9
    let target = 2.0 / (13.0 * 9.0);
    let var = sample_variance(&w);
    assert!((var / target - 1.0).abs() < 0.03, "var {var} vs {target}");

    // block masking keeps each layer whole
    let b = MaskAssignment::assign(&top, Strategy::Block, 8, 4, 0).unwrap();
    let model = GlobalModel::build_for(&spec, &b, 3).unwrap();
    let var = sample_variance(&conv_weights(&model, "conv1", 16));
    assert!((var / (2.0 / 234.0) - 1.0).abs() < 0.03);
}

struct Dense<'a> {
    model: &'a GlobalModel,
}

impl Dense<'_> {
    fn p(&self, name: &str) -> &[f64] {
        self.model.param(name).unwrap()
    }

    /// `y[o] = b[o] + Σ_i W[o, i] x[i]` over the kept rows and columns.
    fn linear(&self, layer: &str, x: &[f64], rows: &[usize], cols: &[usize], in_dim: usize) -> Vec<f64> {
        let w = self.p(&format!("{layer}.weight"));
        let b = self.p(&format!("{layer}.bias"));
        rows.iter()
            .map(|&o| b[o] + cols.iter().zip(x).map(|(&i, &xi)| w[o * in_dim + i] * xi).sum::<f64>())
            .collect()
    }

    /// Group norm of a sliced vector whose entries are original channels `chans`.
    fn norm(&self, layer: &str, x: &[f64], chans: &[usize], group_size: usize) -> Vec<f64> {
        let g = self.p(&format!("{layer}.weight"));
        let b = self.p(&format!("{layer}.bias"));
        let mut out = vec![0.0; x.len()];
        let groups = chans.iter().map(|c| c / group_size).max().unwrap() + 1;
        for grp in 0..groups {
            let idx: Vec<usize> = (0..chans.len()).filter(|&i| chans[i] / group_size == grp).collect();
            if idx.is_empty() {
                continue;
            }
            let n = idx.len() as f64;
            let mean = idx.iter().map(|&i| x[i]).sum::<f64>() / n;
            let var = idx.iter().map(|&i| (x[i] - mean).powi(2)).sum::<f64>() / n;
            for &i in &idx {
                out[i] = (x[i] - mean) / (var + GROUP_NORM_EPS).sqrt() * g[chans[i]] + b[chans[i]];
            }
        }
        out
    }
}

#[test]
fn neuron_masked_mlp_equals_sliced_network() {
    let (d, w, blocks, k) = (3, 8, 3, 4);
    let spec = ModelSpec::residual_mlp(d, w, blocks, k);
    let model = GlobalModel::build(&spec, 11).unwrap();
    let a = MaskAssignment::assign(&model.topology, Strategy::Neuron, 4, 2, 5).unwrap();
    let x = inputs(&[5, d], 1);
    let all: Vec<usize> = (0..w).collect();
    let dense = Dense { model: &model };
    for worker in 0..4 {
        let mask = a.worker(worker);
        let batch = Batch::new(x.clone(), vec![0; 5]).unwrap();
        let pass = model.masked_forward(mask, &batch, ExecMode::Structural).unwrap();
        for s in 0..5 {
            let xs = &x.data()[s * d..(s + 1) * d];
            let mut h = dense.linear("stem.fc", xs, &all, &(0..d).collect::<Vec<_>>(), d);
            h = dense.norm("stem.norm", &h, &all, w / 2);
            h.iter_mut().for_each(|v| *v = v.max(0.0));
            for blk in 0..blocks {
                let li = model.topology.layer_index(&format!("block{blk}.fc1")).unwrap();
                let active = mask.channels(li).unwrap();
                let kept: Vec<usize> = (0..w).filter(|&c| active[c]).collect();
                let mut u = dense.linear(&format!("block{blk}.fc1"), &h, &kept, &all, w);
                u = dense.norm(&format!("block{blk}.norm1"), &u, &kept, w / 2);
                u.iter_mut().for_each(|v| *v = v.max(0.0));
                let mut r = dense.linear(&format!("block{blk}.fc2"), &u, &all, &kept, w);
                r = dense.norm(&format!("block{blk}.norm2"), &r, &all, w / 2);
                h = h.iter().zip(&r).map(|(a, b)| a + b).collect();
            }
            let logits = dense.linear("head", &h, &(0..k).collect::<Vec<_>>(), &all, w);
            for (c, want) in logits.iter().enumerate() {
                let got = pass.logits().data()[s * k + c];
                assert!((got - want).abs() < 1e-12, "worker {worker} sample {s} class {c}: {got} vs {want}");
            }
        }
    }
}

#[test]
fn dropping_every_block_leaves_stem_and_head() {
    let spec = ModelSpec::mini_resnet(6, 3, 4, 2);
    let model = GlobalModel::build(&spec, 2).unwrap();
    let mut mask = WorkerMask::full(&model.topology);
    mask.block_active = vec![false; 3];
    let x = inputs(&[2, 3, 7, 7], 9);
    let batch = Batch::new(x.clone(), vec![1, 2]).unwrap();
    for mode in [ExecMode::Structural, ExecMode::Multiplicative] {
        let pass = model.masked_forward(&mask, &batch, mode).unwrap();

        let mut t = Tape::new();
        let p = |t: &mut Tape, name: &str| {
            let info = &model.topology.params[model.topology.param_index(name).unwrap()];
            t.constant(Tensor::new(info.shape.clone(), model.param(name).unwrap().to_vec()).unwrap())
        };
        let xv = t.constant(x.clone());
        let (w, b) = (p(&mut t, "stem.conv.weight"), p(&mut t, "stem.conv.bias"));
        let mut h = t.conv2d(xv, w, b, 2, 1).unwrap();
        let (g, be) = (p(&mut t, "stem.norm.weight"), p(&mut t, "stem.norm.bias"));
        h = t.group_norm(h, 2, g, be, &[true; 6], GROUP_NORM_EPS).unwrap();
        h = t.relu(h);
        h = t.global_avg_pool(h).unwrap();
        let (w, b) = (p(&mut t, "head.weight"), p(&mut t, "head.bias"));
        let logits = t.linear(h, w, b).unwrap();
        for (a, b) in pass.logits().data().iter().zip(t.value(logits).data()) {
            assert!((a - b).abs() < 1e-12, "{mode:?}: {a} vs {b}");
        }
    }
}

#[test]
fn masked_forward_with_full_mask_matches_predict() {
    let spec = ModelSpec::mini_resnet(6, 2, 4, 2);
    let model = GlobalModel::build(&spec, 4).unwrap();
    let x = inputs(&[3, 3, 7, 7], 2);
    let batch = Batch::new(x.clone(), vec![0, 1, 2]).unwrap();
    let pass = model
        .masked_forward(&WorkerMask::full(&model.topology), &batch, ExecMode::Structural)
        .unwrap();
    assert_eq!(pass.logits().data(), model.predict(&x).unwrap().data());
}

#[test]
fn wrong_input_shape_is_a_data_error() {
    let model = GlobalModel::build(&ModelSpec::mini_resnet(6, 2, 4, 2), 4).unwrap();
    let err = model.predict(&inputs(&[2, 3, 8, 8], 0)).unwrap_err();
    assert_eq!(err.category(), ErrorCategory::Data);
    assert!(err.to_string().contains("[2, 3, 8, 8]"), "{err}");
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("theta.bin");
    let model = GlobalModel::build(&ModelSpec::mini_resnet(6, 2, 4, 2), 8).unwrap();
    save_checkpoint(&model, &path).unwrap();
    assert_eq!(std::fs::metadata(&path).unwrap().len(), 8 * model.num_params() as u64);
    let sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(path.with_extension("json")).unwrap()).unwrap();
    assert_eq!(sidecar["num_params"], model.num_params());
    assert!(sidecar["param_index"]["block1.conv2.weight"].is_object());
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.spec, model.spec);
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back.theta), bits(&model.theta));

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap_err().category(), ErrorCategory::Data);
}
