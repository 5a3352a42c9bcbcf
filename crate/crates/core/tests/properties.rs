use std::collections::BTreeMap;

use covsegnet_core::autograd::Graph;
use covsegnet_core::backend::{Binding, ShapeBackend, TapeBackend};
use covsegnet_core::data::{self, SynthConfig};
use covsegnet_core::fusion::{self, PfConfig};
use covsegnet_core::losses::{self, LossConfig};
use covsegnet_core::network::{self, Model, NetworkConfig, Variant};
use covsegnet_core::params::ParamKind;
use covsegnet_core::pipeline::*;
use covsegnet_core::{Dims, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dims_strategy() -> impl Strategy<Value = Dims> {
    prop_oneof![Just(Dims::D2), Just(Dims::D3)]
}

/// Per-parameter gradients of the focal Tversky loss of one training-mode
/// forward pass.
fn gradients(model: &mut Model<f32>, x: &Tensor<f32>, gt: &Tensor<f32>) -> BTreeMap<String, Tensor<f32>> {
    let config = model.config.clone();
    let mut tb = TapeBackend::new(vec![Binding { store: &mut model.params, train: true, trainable: true }]);
    let xin = tb.graph.input(x.clone());
    let out = network::forward(&mut tb, &config, &xin).unwrap();
    let (l, g) = losses::focal_tversky_with_grad(tb.graph.value(out), gt, &LossConfig::default()).unwrap();
    let root = tb.graph.scalar(l as f32, &[out], vec![g]).unwrap();
    tb.graph.backward(root).unwrap().into_iter().map(|p| (p.name, p.grad)).collect()
}

fn probe_batch(shape: &[usize], seed: u64) -> (Tensor<f32>, Tensor<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::<f32>::randn(shape, 1.0, &mut rng);
    let gt = x.map(|v| if v > 0.3 { 1.0 } else { 0.0 });
    (x, gt)
}

fn max_abs(t: &Tensor<f32>) -> f32 {
    t.data().iter().fold(0.0, |m, v| m.max(v.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn level_schedule_holds_for_any_configuration(
        dims in dims_strategy(),
        levels in 2usize..5,
        stages in 1usize..4,
        base in prop::sample::select(vec![4usize, 8, 16]),
        extra in 0usize..2,
    ) {
        let side = 4usize << (levels - 1 + extra);
        let cfg = NetworkConfig::new(dims, levels, stages, base, vec![side; dims.spatial_rank()]);
        let sb = network::trace(&cfg).unwrap();
        for l in 1..=levels {
            let mut want = vec![1, base << (l - 1)];
            want.extend(vec![side >> (l - 1); dims.spatial_rank()]);
            for j in 1..=stages {
                prop_assert_eq!(sb.recorded(&format!("enc{j}.E-{l}")).unwrap(), &want[..]);
                prop_assert_eq!(sb.recorded(&format!("dec{j}.D-{l}")).unwrap(), &want[..]);
            }
            // Channel closure of every multi-scale fusion slot.
            for m in 1..2 * stages {
                prop_assert_eq!(sb.recorded(&format!("msf{m}.MSF-{l}")).unwrap(), &want[..]);
            }
        }
        let mut out = vec![1, 1];
        out.extend(vec![side; dims.spatial_rank()]);
        prop_assert_eq!(sb.recorded("head.out").unwrap(), &out[..]);
    }

    #[test]
    fn pyramid_concat_is_twice_the_width(
        dims in dims_strategy(),
        quarter in 1usize..17,
        c_in in 4usize..64,
        side in prop::sample::select(vec![4usize, 8, 16]),
    ) {
        let c = 4 * quarter;
        let mut shape = vec![1, c_in];
        shape.extend(vec![side; dims.spatial_rank()]);
        let mut sb = ShapeBackend::new();
        let y = fusion::pyramid_fuse(&mut sb, "pf", &shape, c, &PfConfig::default()).unwrap();
        prop_assert_eq!(sb.recorded("pf.concat").unwrap()[1], 2 * c);
        let mut want = shape.clone();
        want[1] = c;
        prop_assert_eq!(y, want);
    }

    #[test]
    fn pooling_then_upsampling_restores_extents(
        dims in dims_strategy(),
        k in 1usize..5,
        c in 1usize..4,
    ) {
        for factor in PfConfig::default().scales.iter().map(|s| match s {
            fusion::Scale::Down(r) | fusion::Scale::Up(r) => *r,
        }) {
            let mut shape = vec![1, c];
            shape.extend(vec![factor * k; dims.spatial_rank()]);
            let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
            let mut g = Graph::<f32>::new();
            let x = g.input(Tensor::randn(&shape, 1.0, &mut rng));
            let down = g.max_pool(x, factor).unwrap();
            let back = g.upsample(down, factor).unwrap();
            prop_assert_eq!(g.value(back).shape(), &shape[..]);
            let up = g.upsample(x, factor).unwrap();
            let back = g.max_pool(up, factor).unwrap();
            prop_assert_eq!(g.value(back).shape(), &shape[..]);
        }
    }

    #[test]
    fn outputs_are_probabilities_and_deterministic(seed in any::<u64>(), dims in dims_strategy(), classes in 1usize..4) {
        let side = if dims == Dims::D2 { 16 } else { 8 };
        let mut cfg = NetworkConfig::new(dims, 2, 2, 4, vec![side; dims.spatial_rank()]);
        cfg.num_classes = classes;
        let model = network::build::<f32>(&cfg, seed).unwrap();
        let (x, _) = probe_batch(&cfg.input_shape(2), seed);
        let y = model.forward(&x).unwrap();
        prop_assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
        if classes > 1 {
            let p: usize = y.spatial().iter().product();
            for n in 0..2 {
                for i in 0..p {
                    let s: f32 = (0..classes).map(|k| y.data()[(n * classes + k) * p + i]).sum();
                    prop_assert!((s - 1.0).abs() < 1e-5);
                }
            }
        }
        let again = network::build::<f32>(&cfg, seed).unwrap().forward(&x).unwrap();
        prop_assert!(y.data().iter().zip(again.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn every_trainable_parameter_of_the_full_network_receives_gradient() {
    for dims in [Dims::D2, Dims::D3] {
        let side = if dims == Dims::D2 { 16 } else { 8 };
        let cfg = NetworkConfig::new(dims, 2, 2, 4, vec![side; dims.spatial_rank()]).with_variant(Variant::V7);
        let mut model = network::build::<f32>(&cfg, 3).unwrap();
        let (x, gt) = probe_batch(&cfg.input_shape(2), 5);
        let grads = gradients(&mut model, &x, &gt);
        for (name, kind, _) in model.params.iter() {
            if kind.is_buffer() {
                assert!(!grads.contains_key(name), "buffer {name} got a gradient");
                continue;
            }
            let g = grads.get(name).unwrap_or_else(|| panic!("{dims:?}: {name} has no gradient"));
            assert!(max_abs(g) > 0.0, "{dims:?}: gradient of {name} is zero");
        }
        // Dense connectivity reaches the first layer of every cell.
        assert!(grads.keys().any(|k| k.starts_with("enc1.l1.cell.layer0")));
    }
}

#[test]
fn stage_one_encoder_keeps_a_gradient_path_with_stage_two_zeroed() {
    let cfg = NetworkConfig::new(Dims::D2, 2, 2, 4, vec![16, 16]);
    let mut model = network::build::<f32>(&cfg, 8).unwrap();
    let enc2: Vec<String> = model.params.names().iter().filter(|n| n.starts_with("enc2.")).cloned().collect();
    assert!(!enc2.is_empty());
    for n in &enc2 {
        if !model.params.kind(n).is_some_and(ParamKind::is_buffer) {
            model.params.get_mut(n).unwrap().data_mut().fill(0.0);
        }
    }
    let (x, gt) = probe_batch(&cfg.input_shape(2), 9);
    let grads = gradients(&mut model, &x, &gt);
    let reach: f32 = grads.iter().filter(|(k, _)| k.starts_with("enc1.")).map(|(_, g)| max_abs(g)).fold(0.0, f32::max);
    assert!(reach > 0.0, "stage-1 encoder lost its gradient");
}

#[test]
fn monotone_capacity_in_both_families() {
    for dims in [Dims::D2, Dims::D3] {
        let counts: Vec<usize> = (2..=if dims == Dims::D2 { 5 } else { 4 })
            .map(|l| {
                let cfg = NetworkConfig::new(dims, l, 2, 16, vec![4 << (l - 1); dims.spatial_rank()]);
                network::count_specs(&network::trace(&cfg).unwrap().specs)
            })
            .collect();
        assert!(counts.windows(2).all(|w| w[0] < w[1]), "{dims:?}: {counts:?}");
    }
}

#[test]
fn phase_two_leaves_the_phase_one_checkpoint_alone() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let m = data::synth_generate(&data_dir, &SynthConfig::new(4, &[4, 16, 16], 2, 6).unwrap()).unwrap();
    let mut cfg2d = NetworkConfig::new(Dims::D2, 2, 1, 4, vec![16, 16]);
    cfg2d.pairs_per_cell = 2;
    let mut cfg3d = NetworkConfig::new(Dims::D3, 2, 1, 4, vec![4, 16, 16]);
    cfg3d.pairs_per_cell = 2;
    let hybrid = HybridConfig { cfg2d, cfg3d, lambda2d: 0.2, finetune2d: true };
    let t = TrainConfig { epochs: 1, batch_size: 2, learning_rate: 1e-3, ..TrainConfig::default_2d() };
    let ckpts = dir.path().join("ckpt");
    let sink = CheckpointSink::new(&ckpts, "");

    // Phase 1 alone, then phase 2 from its model.
    let subjects = m.subjects();
    let first = train_hybrid(&hybrid, &m, &subjects, &t, &t, None, &sink).unwrap();
    let p1_path = ckpts.join("phase1_best.ckpt");
    let before = std::fs::read(&p1_path).unwrap();
    let p1 = load_model(&p1_path).unwrap();
    let sink2 = CheckpointSink::new(&ckpts, "again_");
    let second = train_hybrid(&hybrid, &m, &subjects, &t, &t, Some(p1.clone()), &sink2).unwrap();
    assert!(second.phase1.is_none());
    assert_eq!(std::fs::read(&p1_path).unwrap(), before);
    assert!(ckpts.join("again_finetuned2d_best.ckpt").is_file());
    assert!(ckpts.join("again_model3d_best.ckpt").is_file());
    // Fine-tuning moved the 2D weights; the stored phase-1 model did not move.
    assert!(!second.phase2.model2d.params.bit_equal(&p1.params) || second.phase2.best_epoch.is_none());
    assert!(first.phase1.unwrap().best.params.bit_equal(&p1.params));
}
