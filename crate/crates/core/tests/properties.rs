use hdmae::checkpoint::{decode_checkpoint, encode_checkpoint};
use hdmae::gradcheck::{check, op_cases, DEFAULT_TOLERANCE};
use hdmae::masking::{context_aware_mask, random_mask, sample_plans};
use hdmae::model::{self, init_params, mae_loss, PositionTables};
use hdmae::optim::{adamw_step, AdamWConfig, AdamWState};
use hdmae::patch::{patchify, sincos_table};
use hdmae::phantom::synth_phantom;
use hdmae::rng::{self, Purpose};
use hdmae::tape::softmax_lastdim;
use hdmae::trainer::{Trainer, TrainConfig};
use hdmae::{phantom, Execution, MaskPlan, PatchConfig, RegionMask, Tape, Tensor, ViTConfig};
use proptest::prelude::*;

fn tiny_model() -> ViTConfig {
    ViTConfig {
        patch: PatchConfig {
            image_side: 16,
            patch_side: 4,
            embed_dim: 16,
        },
        enc_depth: 1,
        enc_heads: 2,
        dec_dim: 8,
        dec_depth: 1,
        dec_heads: 2,
        mlp_ratio: 2,
    }
}

fn region_strategy() -> impl Strategy<Value = RegionMask> {
    (2usize..7).prop_flat_map(|g| {
        prop::collection::vec(any::<bool>(), g * g).prop_map(move |v| RegionMask::new(g, v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn op_gradients_hold_on_random_inputs(seed in any::<u64>()) {
        for case in op_cases(seed) {
            let r = check(case.as_ref(), DEFAULT_TOLERANCE, Execution::Sequential).unwrap();
            prop_assert!(r.passed, "{:?}", r);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..9, scale in 0.0f64..1e4, seed in any::<u64>()) {
        let mut r = rng::from_seed(seed);
        let x = Tensor::<f64>::uniform(&[rows, cols], -scale, scale, &mut r);
        let y = softmax_lastdim(&x);
        for row in y.data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let y32 = softmax_lastdim(&x.cast::<f32>());
        for row in y32.data().chunks(cols) {
            prop_assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn reshape_there_and_back_is_bitwise(a in 1usize..6, b in 1usize..6, c in 1usize..6, seed in any::<u64>()) {
        let x = Tensor::<f32>::gaussian(&[a, b, c], 0.0, 1.0, &mut rng::from_seed(seed));
        let y = x.clone().reshape(&[a * b, c]).unwrap().reshape(&[c, b * a]).unwrap().reshape(&[a, b, c]).unwrap();
        prop_assert_eq!(x, y);
    }

    #[test]
    fn initializers_are_seed_deterministic(seed in any::<u64>()) {
        let a = init_params::<f32>(&tiny_model(), seed).unwrap();
        let b = init_params::<f32>(&tiny_model(), seed).unwrap();
        prop_assert_eq!(&a, &b);
        let c = init_params::<f32>(&tiny_model(), seed.wrapping_add(1)).unwrap();
        prop_assert_ne!(&a.proj_w, &c.proj_w);
    }

    #[test]
    fn position_vectors_are_distinct(g in 1usize..9, quarter in 1usize..9) {
        let t = sincos_table::<f64>(g, 4 * quarter).unwrap();
        for i in 0..g * g {
            for j in 0..i {
                prop_assert!(t.row(i) != t.row(j), "rows {} and {}", i, j);
            }
        }
    }

    #[test]
    fn unit_weight_reduces_to_random_masking(region in region_strategy(), ratio in 0.01f64..0.99, seed in any::<u64>()) {
        let a = context_aware_mask(&region, ratio, 1.0, &mut rng::from_seed(seed)).unwrap();
        let b = random_mask(region.len(), ratio, &mut rng::from_seed(seed)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn plans_are_pure_functions_of_their_inputs(region in region_strategy(), ratio in 0.01f64..0.99, w in 1.0f64..20.0, seed in any::<u64>()) {
        let a = sample_plans(&region, ratio, w, seed, 8, Execution::Parallel).unwrap();
        let b = sample_plans(&region, ratio, w, seed, 8, Execution::Sequential).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn phantoms_are_valid(seed in any::<u64>(), lesion in any::<bool>()) {
        let cfg = PatchConfig::default();
        let s = synth_phantom(seed, &cfg, lesion).unwrap();
        prop_assert!(s.image.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(s.region.grid_side(), cfg.grid_side());
        prop_assert_eq!(s.label, lesion);
        prop_assert_eq!(s.lesion_center.is_some(), lesion);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn forward_is_deterministic_and_ignores_visible_targets(seed in any::<u64>(), ratio in 0.1f64..0.9, noise in -1.0f32..1.0) {
        let cfg = tiny_model();
        let params = init_params::<f32>(&cfg, seed).unwrap();
        let pos = PositionTables::<f32>::new(&cfg).unwrap();
        let img = synth_phantom(seed, &cfg.patch, seed % 2 == 0).unwrap().image;
        let patches: Tensor<f32> = patchify(&img, &cfg.patch).unwrap();
        let plan = random_mask(cfg.patch.num_tokens(), ratio, &mut rng::stream(seed, Purpose::Masking)).unwrap();

        let run = |target: &Tensor<f32>| {
            let mut tape = Tape::no_grad();
            let vars = model::bind(&mut tape, &params, false);
            let fwd = model::mae_forward(&mut tape, &vars, &cfg, &pos, patches.clone(), &plan).unwrap();
            let t = tape.constant(target.clone());
            let loss = mae_loss(&mut tape, fwd.pred, t, &plan).unwrap();
            (tape.value(fwd.loss).item(), tape.value(loss).item(), tape.value(fwd.pred).clone())
        };
        let (l1, own1, pred1) = run(&patches);
        let (l2, _, pred2) = run(&patches);
        prop_assert_eq!(l1.to_bits(), l2.to_bits());
        prop_assert_eq!(pred1, pred2);
        prop_assert_eq!(l1.to_bits(), own1.to_bits());

        let mut edited = patches.clone();
        let width = edited.last_dim();
        for &v in plan.visible() {
            for x in &mut edited.data_mut()[v * width..(v + 1) * width] {
                *x += noise;
            }
        }
        let (_, own2, _) = run(&edited);
        prop_assert_eq!(own1.to_bits(), own2.to_bits());
    }

    #[test]
    fn zero_gradient_steps_shrink_by_the_decay_factor(seed in any::<u64>(), lr in 1e-4f64..0.5, wd in 0.0f64..0.2, steps in 1usize..5) {
        let params0 = init_params::<f32>(&tiny_model(), seed).unwrap();
        let zeros = params0.map(|_, _, t| Tensor::zeros(t.shape()));
        let cfg = AdamWConfig { lr, weight_decay: wd, ..Default::default() };
        let mut params = params0.clone();
        let mut state = AdamWState::new(&params);
        let mut want = params0.clone();
        for k in 0..steps {
            let lr_t = lr / (k + 1) as f64;
            adamw_step(&mut params, &zeros, &mut state, &cfg, lr_t).unwrap();
            let factor = (1.0 - lr_t * wd) as f32;
            for ((_, kind, _), w) in params0.fields().into_iter().zip(want.slots_mut()) {
                if kind.decays() {
                    w.data_mut().iter_mut().for_each(|x| *x *= factor);
                }
            }
        }
        prop_assert_eq!(params, want);
    }

    #[test]
    fn checkpoints_survive_two_cycles_bitwise(seed in 0u64..1000, steps in 0u64..3) {
        let mut cfg = TrainConfig::default();
        cfg.model = tiny_model();
        cfg.batch_size = 2;
        cfg.max_steps = Some(steps.max(1));
        cfg.seed = seed;
        let data = phantom::dataset(seed, 4, 0.5, &cfg.model.patch).unwrap();
        let mut t = Trainer::new(cfg, &data, Execution::Sequential).unwrap();
        for _ in 0..steps {
            t.train_step().unwrap();
        }
        let first = encode_checkpoint(&t.checkpoint()).unwrap();
        let once = decode_checkpoint(&first).unwrap();
        let second = encode_checkpoint(&once).unwrap();
        let twice = decode_checkpoint(&second).unwrap();
        prop_assert_eq!(&first, &second);
        prop_assert_eq!(once, twice);
    }
}

#[test]
fn every_plan_partitions_the_grid() {
    let region = RegionMask::new(4, (0..16).map(|i| i % 3 == 0).collect()).unwrap();
    for plan in sample_plans(&region, 0.5, 4.0, 1, 100, Execution::Parallel).unwrap() {
        let mut all: Vec<usize> = plan.masked().iter().chain(plan.visible()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..16).collect::<Vec<_>>());
        assert_eq!(plan, MaskPlan::with_masked(16, plan.masked().to_vec()).unwrap());
    }
}
