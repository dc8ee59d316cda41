use cubic_core::numerics::{Graph, ParamStore, Tensor};
use cubic_core::perception::{
    build_mask, EncoderMode, Group, Observation, ObservationBatch, Perception, PerceptionConfig, ARM_TOKENS, FEATURE_DIM,
    HEAD_TOKENS, IMAGE_CHANNELS, IMAGE_SIDE, JOINT_DIM,
};
use cubic_core::Arm;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_obs(rng: &mut ChaCha8Rng) -> Observation<f32> {
    Observation {
        head_feat: Tensor::randn([HEAD_TOKENS, FEATURE_DIM], 1.0, rng),
        left_wrist_feat: Tensor::randn([FEATURE_DIM], 1.0, rng),
        right_wrist_feat: Tensor::randn([FEATURE_DIM], 1.0, rng),
        left_joints: Tensor::randn([JOINT_DIM], 1.0, rng),
        right_joints: Tensor::randn([JOINT_DIM], 1.0, rng),
        timestamp: 0,
    }
}

struct Outputs {
    left_latents: Tensor<f32>,
    left_tokens: Tensor<f32>,
    right_latents: Tensor<f32>,
    right_tokens: Tensor<f32>,
    head: Tensor<f32>,
}

fn run(p: &Perception, store: &ParamStore<f32>, obs: &[&Observation<f32>]) -> Outputs {
    let g = Graph::with_params(store);
    let agg = p.aggregate(&g, &ObservationBatch::stack(obs).unwrap()).unwrap();
    Outputs {
        left_latents: g.tensor(agg.left.latents.unwrap()),
        left_tokens: g.tensor(agg.left.arm_tokens),
        right_latents: g.tensor(agg.right.latents.unwrap()),
        right_tokens: g.tensor(agg.right.arm_tokens),
        head: g.tensor(agg.head),
    }
}

fn setup(cfg: PerceptionConfig, seed: u64) -> (Perception, ParamStore<f32>) {
    let p = Perception::new(cfg).unwrap();
    let mut store = ParamStore::new();
    p.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
    (p, store)
}

#[test]
fn single_token_layout_matches_enumerated_rows() {
    let m = build_mask(1, 1, 1, false);
    let rows = [
        [true, true, false, false, true],
        [false, true, false, false, true],
        [false, false, true, true, true],
        [false, false, false, true, true],
        [false, false, false, false, true],
    ];
    for (i, row) in rows.iter().enumerate() {
        for (j, &want) in row.iter().enumerate() {
            assert_eq!(m.allowed(i, j), want, "({i}, {j})");
        }
    }
}

#[test]
fn default_layout_has_sixteen_tokens() {
    let m = build_mask(4, ARM_TOKENS, HEAD_TOKENS, false);
    assert_eq!(m.len(), 16);
    assert_eq!(Perception::new(PerceptionConfig::default()).unwrap().layout.len(), 16);
}

#[test]
fn arm_token_flag_only_couples_tokens_of_one_arm() {
    let m = build_mask(4, ARM_TOKENS, HEAD_TOKENS, true);
    let [_, la, _, ra, _] = m.offsets();
    assert!(m.allowed(la, la + 1) && m.allowed(ra + 1, ra));
    assert!(!m.couples_arms());
    let strict = build_mask(4, ARM_TOKENS, HEAD_TOKENS, false);
    assert!(!strict.allowed(la, la + 1));
}

proptest! {
    #[test]
    fn masks_never_couple_arms(n in 0usize..6, a in 1usize..4, h in 1usize..6, flag: bool) {
        let m = build_mask(n, a, h, flag);
        prop_assert!(!m.couples_arms());
        for i in 0..m.len() {
            prop_assert!(m.allowed(i, i));
            if m.group(i) == Group::Head {
                for j in 0..m.len() {
                    prop_assert_eq!(m.allowed(i, j), m.group(j) == Group::Head);
                }
            }
        }
    }
}

#[test]
fn right_inputs_never_reach_left_or_head_outputs() {
    let (p, store) = setup(PerceptionConfig::default(), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let started = std::time::Instant::now();
    for _ in 0..100 {
        let base = random_obs(&mut rng);
        let other = random_obs(&mut rng);
        let mut right = base.clone();
        right.right_wrist_feat = other.right_wrist_feat.clone();
        right.right_joints = other.right_joints.clone();
        let mut left = base.clone();
        left.left_wrist_feat = other.left_wrist_feat.clone();
        left.left_joints = other.left_joints.clone();
        let out = run(&p, &store, &[&base, &right, &left]);
        let item = |t: &Tensor<f32>, i: usize| {
            let per = t.numel() / 3;
            t.data()[i * per..(i + 1) * per].to_vec()
        };
        assert_eq!(item(&out.left_latents, 0), item(&out.left_latents, 1));
        assert_eq!(item(&out.left_tokens, 0), item(&out.left_tokens, 1));
        assert_eq!(item(&out.head, 0), item(&out.head, 1));
        assert_eq!(item(&out.right_latents, 0), item(&out.right_latents, 2));
        assert_eq!(item(&out.right_tokens, 0), item(&out.right_tokens, 2));
        assert_eq!(item(&out.head, 0), item(&out.head, 2));
        assert_ne!(item(&out.right_latents, 0), item(&out.right_latents, 1));
    }
    assert!(started.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn head_outputs_ignore_wrists_and_joints_but_latents_see_the_head() {
    let (p, store) = setup(PerceptionConfig::default(), 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random_obs(&mut rng);
    let mut b = random_obs(&mut rng);
    b.head_feat = a.head_feat.clone();
    let out = run(&p, &store, &[&a, &b]);
    let per = out.head.numel() / 2;
    assert_eq!(out.head.data()[..per], out.head.data()[per..]);

    let mut c = a.clone();
    c.head_feat = random_obs(&mut rng).head_feat;
    let out = run(&p, &store, &[&a, &c]);
    let per = out.left_latents.numel() / 2;
    assert_ne!(out.left_latents.data()[..per], out.left_latents.data()[per..]);
}

fn swap_arm_params(store: &ParamStore<f32>) -> ParamStore<f32> {
    let mut out = ParamStore::new();
    for (name, t) in store.iter() {
        let swapped = if let Some(rest) = name.strip_prefix("perception.left.") {
            format!("perception.right.{rest}")
        } else if let Some(rest) = name.strip_prefix("perception.right.") {
            format!("perception.left.{rest}")
        } else {
            name.clone()
        };
        out.insert(swapped, t.clone());
    }
    out
}

#[test]
fn swapping_arm_inputs_and_params_swaps_outputs() {
    let (p, store) = setup(PerceptionConfig::default(), 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let obs = random_obs(&mut rng);
    let out = run(&p, &store, &[&obs]);
    let mirrored = run(&p, &swap_arm_params(&store), &[&obs.swapped()]);
    assert_eq!(out.left_latents, mirrored.right_latents);
    assert_eq!(out.left_tokens, mirrored.right_tokens);
    assert_eq!(out.right_latents, mirrored.left_latents);
    assert_eq!(out.right_tokens, mirrored.left_tokens);
    assert_eq!(out.head, mirrored.head);
}

#[test]
fn zero_layers_pass_projected_tokens_through() {
    let cfg = PerceptionConfig {
        layers: 0,
        ..PerceptionConfig::default()
    };
    let (p, store) = setup(cfg, 7);
    let obs = random_obs(&mut ChaCha8Rng::seed_from_u64(8));
    let batch = ObservationBatch::stack(&[&obs]).unwrap();
    let g = Graph::with_params(&store);
    let agg = p.aggregate(&g, &batch).unwrap();
    let (head, lw, _) = p.encode_views(&g, &batch).unwrap();
    let lj = p.embed_joints(&g, Arm::Left, &batch.left_joints).unwrap();
    assert_eq!(g.tensor(agg.head), g.tensor(head));
    let tokens = g.tensor(agg.left.arm_tokens);
    let w = 32;
    assert_eq!(&tokens.data()[..w], g.tensor(lw).data());
    assert_eq!(&tokens.data()[w..], g.tensor(lj).data());
    assert_eq!(g.tensor(agg.left.latents.unwrap()).data(), store.get("perception.left.latents").unwrap().data());
}

#[test]
fn encoding_is_deterministic_and_shaped() {
    let (p, store) = setup(PerceptionConfig::default(), 9);
    let obs = random_obs(&mut ChaCha8Rng::seed_from_u64(10));
    let a = run(&p, &store, &[&obs]);
    let b = run(&p, &store, &[&obs]);
    assert_eq!(a.left_latents, b.left_latents);
    assert_eq!(a.left_latents.shape(), &[1, 4, 32]);
    assert_eq!(a.left_tokens.shape(), &[1, ARM_TOKENS, 32]);
    assert_eq!(a.head.shape(), &[1, HEAD_TOKENS, 32]);
}

#[test]
fn zero_world_features_give_bias_only_tokens() {
    let (p, store) = setup(PerceptionConfig::default(), 11);
    let zeros = Observation {
        head_feat: Tensor::zeros([HEAD_TOKENS, FEATURE_DIM]),
        left_wrist_feat: Tensor::zeros([FEATURE_DIM]),
        right_wrist_feat: Tensor::zeros([FEATURE_DIM]),
        left_joints: Tensor::zeros([JOINT_DIM]),
        right_joints: Tensor::zeros([JOINT_DIM]),
        timestamp: 0,
    };
    let g = Graph::with_params(&store);
    let (head, lw, _) = p.encode_views(&g, &ObservationBatch::stack(&[&zeros]).unwrap()).unwrap();
    let bias = store.get("perception.head_proj.bias").unwrap();
    let pos = store.get("perception.head_pos").unwrap();
    let head = g.tensor(head);
    for (t, row) in head.data().chunks(32).enumerate() {
        for (c, &v) in row.iter().enumerate() {
            assert_eq!(v, bias.data()[c] + pos.data()[t * 32 + c]);
        }
    }
    assert_eq!(g.tensor(lw).data(), store.get("perception.left.wrist_proj.bias").unwrap().data());
}

#[test]
fn image_mode_yields_four_head_tokens() {
    let cfg = PerceptionConfig {
        mode: EncoderMode::Images,
        ..PerceptionConfig::default()
    };
    let (p, store) = setup(cfg, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let img = || Tensor::<f32>::randn([IMAGE_SIDE, IMAGE_SIDE, IMAGE_CHANNELS], 1.0, &mut ChaCha8Rng::seed_from_u64(14));
    let obs = Observation {
        head_feat: img(),
        left_wrist_feat: img(),
        right_wrist_feat: img(),
        left_joints: Tensor::randn([JOINT_DIM], 1.0, &mut rng),
        right_joints: Tensor::randn([JOINT_DIM], 1.0, &mut rng),
        timestamp: 0,
    };
    let out = run(&p, &store, &[&obs, &obs]);
    assert_eq!(out.head.shape(), &[2, 4, 32]);
    assert_eq!(out.left_tokens.shape(), &[2, ARM_TOKENS, 32]);

    let mut bad = obs.clone();
    bad.head_feat = Tensor::zeros([16, 16, 3]);
    let g = Graph::with_params(&store);
    assert!(p.aggregate(&g, &ObservationBatch::stack(&[&bad]).unwrap()).is_err());
}

#[test]
fn joint_embedding_shape_linearity_and_zero() {
    let cfg = PerceptionConfig {
        linear_joint_embedding: true,
        ..PerceptionConfig::default()
    };
    let (p, mut store) = setup(cfg, 15);
    store.insert("perception.left.joint_linear.bias", Tensor::zeros([32]));
    let x = Tensor::<f32>::from_f64([1, JOINT_DIM], &[0.25, -0.5, 1.0]).unwrap();
    let x2 = Tensor::<f32>::from_f64([1, JOINT_DIM], &[0.5, -1.0, 2.0]).unwrap();
    let g = Graph::with_params(&store);
    let e1 = g.tensor(p.embed_joints(&g, Arm::Left, &x).unwrap());
    let e2 = g.tensor(p.embed_joints(&g, Arm::Left, &x2).unwrap());
    assert_eq!(e1.shape(), &[1, 1, 32]);
    for (a, b) in e1.data().iter().zip(e2.data()) {
        assert!((2.0 * a - b).abs() <= 1e-6 * b.abs().max(1.0));
    }
    let zero = g.tensor(p.embed_joints(&g, Arm::Left, &Tensor::zeros([1, JOINT_DIM])).unwrap());
    assert!(zero.data().iter().all(|&v| v == 0.0));
    assert!(p.embed_joints(&g, Arm::Left, &Tensor::zeros([1, JOINT_DIM + 1])).is_err());
}
