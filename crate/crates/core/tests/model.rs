mod common;

use std::fs;

use common::*;
use proptest::prelude::*;
use xvit::attention::{AttentionParams, DEFAULT_EPS};
use xvit::grad::Tape;
use xvit::model::count::{
    block_params, class_block_params, softmax_attention_flops, softmax_attention_macs, xnorm_attention_flops,
    xnorm_attention_macs,
};
use xvit::model::forward::{bind, model_on_tape};
use xvit::model::{
    block_forward, checkpoint_info, class_block_forward, class_stage_forward, count_flops, count_params,
    load_checkpoint, load_checkpoint_for, model_forward, save_checkpoint, stem_forward, BlockParams, ModelConfig,
    ModelParams,
};
use xvit::params::{scalar_count, ParamTree};
use xvit::{DType, Error, Tensor};

fn init(cfg: &ModelConfig, seed: u64) -> ModelParams {
    ModelParams::init(cfg, &mut rng(seed)).unwrap()
}

fn image(cfg: &ModelConfig, size: usize, seed: u64) -> Tensor {
    rand_tensor(&[cfg.in_channels, size, size], seed)
}

fn zeroed<S: ParamTree<Tensor>>(s: &S) -> S::With<Tensor> {
    s.map_leaves("", &mut |_, t| Tensor::zeros(t.shape().to_vec()))
}

/// Randomizes every leaf, including the affines and gammas that init leaves at 1/0.
fn scrambled(bp: &BlockParams, seed: u64) -> BlockParams {
    let mut r = rng(seed);
    let mut out = bp.clone();
    out.visit_mut("", &mut |_, t| *t = Tensor::uniform(t.shape().to_vec(), -0.5, 0.5, &mut r));
    out
}

fn affine_rows(x: &[f64], n: usize, c: usize, scale: &Tensor, shift: &Tensor) -> Vec<f64> {
    (0..n * c)
        .map(|i| x[i] * scale.data()[i % c] + shift.data()[i % c])
        .collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn plus_bias(x: &mut [f64], b: &[f64]) {
    let c = b.len();
    for (i, v) in x.iter_mut().enumerate() {
        *v += b[i % c];
    }
}

/// Residual block written directly over flat buffers.
fn oracle_block(x: &Tensor, bp: &BlockParams, grid: (usize, usize)) -> Vec<f64> {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let hd = bp.mlp.b1.numel();

    let a = affine_rows(x.data(), n, c, &bp.aff_attn.scale, &bp.aff_attn.shift);
    let a = Tensor::from_vec([n, c], a).unwrap();
    let x1 = add(x.data(), &oracle_xnorm(&a, &bp.attn).1);

    let l = affine_rows(&x1, n, c, &bp.aff_lpi.scale, &bp.aff_lpi.shift);
    let img = naive_transpose(&l, n, c);
    let dw = |input: &[f64], conv: &xvit::model::Conv<Tensor>| {
        let mut o = naive_dwconv3x3(input, conv.weight.data(), c, grid.0, grid.1);
        for (i, v) in o.iter_mut().enumerate() {
            *v += conv.bias.data()[i / n];
        }
        o
    };
    let h: Vec<f64> = dw(&img, &bp.lpi.conv1).into_iter().map(gelu_ref).collect();
    let h = dw(&h, &bp.lpi.conv2);
    let x2 = add(&x1, &naive_transpose(&h, c, n));

    let m = affine_rows(&x2, n, c, &bp.aff_mlp.scale, &bp.aff_mlp.shift);
    let mut h = naive_matmul(&m, bp.mlp.w1.data(), n, c, hd);
    plus_bias(&mut h, bp.mlp.b1.data());
    let h: Vec<f64> = h.into_iter().map(gelu_ref).collect();
    let mut o = naive_matmul(&h, bp.mlp.w2.data(), n, hd, c);
    plus_bias(&mut o, bp.mlp.b2.data());
    add(&x2, &o)
}

// ---- stem ----

#[test]
fn stem_token_counts() {
    let cfg = ModelConfig {
        patch_stride: 16,
        pos_embed: false,
        ..ModelConfig::nano()
    };
    let mp = init(&cfg, 1);
    assert_eq!(stem_forward(&image(&cfg, 32, 2), &mp, &cfg).unwrap().shape(), [4, 64]);
    assert_eq!(stem_forward(&image(&cfg, 64, 3), &mp, &cfg).unwrap().shape(), [16, 64]);

    let nano = ModelConfig::nano();
    let mp = init(&nano, 1);
    assert_eq!(stem_forward(&image(&nano, 32, 2), &mp, &nano).unwrap().shape(), [16, 64]);
}

#[test]
fn stem_rejects_bad_inputs() {
    let cfg = ModelConfig::nano();
    let mp = init(&cfg, 1);
    assert!(matches!(stem_forward(&image(&cfg, 36, 0), &mp, &cfg), Err(Error::Shape(_))));
    // The position embedding is sized for the configured resolution.
    assert!(matches!(stem_forward(&image(&cfg, 64, 0), &mp, &cfg), Err(Error::Shape(_))));
    let rgb = rand_tensor(&[3, 32, 32], 0);
    assert!(matches!(stem_forward(&rgb, &mp, &cfg), Err(Error::Shape(_))));
    let wide = rand_tensor(&[1, 32, 64], 0);
    assert!(matches!(stem_forward(&wide, &mp, &cfg), Err(Error::Shape(_))));
}

#[test]
fn zero_image_with_zero_biases_gives_zero_tokens() {
    let cfg = ModelConfig {
        pos_embed: false,
        ..ModelConfig::nano()
    };
    let mp = init(&cfg, 4);
    let tokens = stem_forward(&Tensor::zeros([1, 32, 32]), &mp, &cfg).unwrap();
    assert!(tokens.data().iter().all(|&v| v == 0.0));
}

#[test]
fn stem_matches_conv_oracle() {
    let cfg = ModelConfig {
        in_channels: 2,
        ..ModelConfig::nano()
    };
    let mut mp = init(&cfg, 5);
    let mut r = rng(6);
    for conv in &mut mp.stem {
        conv.bias = Tensor::uniform(conv.bias.shape().to_vec(), -0.1, 0.1, &mut r);
    }
    let img = image(&cfg, 32, 7);

    let (mut x, mut side) = (img.data().to_vec(), 32);
    let layers = mp.stem.len();
    for (i, ((cin, cout), conv)) in cfg.stem_channels().into_iter().zip(&mp.stem).enumerate() {
        let (o, oh, _) = naive_conv2d(&x, conv.weight.data(), Some(conv.bias.data()), cin, side, side, cout, 3, 2, 1);
        x = if i + 1 < layers { o.into_iter().map(gelu_ref).collect() } else { o };
        side = oh;
    }
    let n = side * side;
    let expected = add(&naive_transpose(&x, cfg.embed_dim, n), mp.pos_embed.as_ref().unwrap().data());

    let got = stem_forward(&img, &mp, &cfg).unwrap();
    assert!(max_abs(got.data(), &expected) <= 1e-12);
}

// ---- encoder block ----

#[test]
fn all_zero_block_is_identity() {
    let cfg = ModelConfig::nano();
    let bp: BlockParams = BlockParams::init(&cfg, &mut rng(0)).unwrap();
    let zero = zeroed(&bp);
    let x = rand_tensor(&[16, 64], 1);
    let y = block_forward(&x, &zero, (4, 4)).unwrap();
    assert_eq!(y.data(), x.data());
}

#[test]
fn delta_kernel_block_adds_gelu() {
    let cfg = ModelConfig::nano();
    let bp: BlockParams = BlockParams::init(&cfg, &mut rng(0)).unwrap();
    let mut p = zeroed(&bp);
    p.aff_lpi.scale = Tensor::full([64], 1.0);
    let delta = Tensor::from_fn([64, 3, 3], |i| if i % 9 == 4 { 1.0 } else { 0.0 });
    p.lpi.conv1.weight = delta.clone();
    p.lpi.conv2.weight = delta;

    let x = rand_tensor(&[16, 64], 2);
    let y = block_forward(&x, &p, (4, 4)).unwrap();
    let expected: Vec<f64> = x.data().iter().map(|&v| v + gelu_ref(v)).collect();
    assert!(max_abs(y.data(), &expected) <= 1e-14);
}

#[test]
fn block_matches_loop_oracle() {
    let cfg = ModelConfig::nano();
    for seed in 0..3 {
        let bp = scrambled(&BlockParams::init(&cfg, &mut rng(seed)).unwrap(), seed + 100);
        let x = rand_tensor(&[16, 64], seed + 200);
        let y = block_forward(&x, &bp, (4, 4)).unwrap();
        assert!(max_abs(y.data(), &oracle_block(&x, &bp, (4, 4))) <= 1e-12, "seed {seed}");
    }
    // Non-square grids are laid out row-major.
    let small = ModelConfig {
        embed_dim: 16,
        heads: 2,
        ..ModelConfig::nano()
    };
    let bp = scrambled(&BlockParams::init(&small, &mut rng(9)).unwrap(), 10);
    let x = rand_tensor(&[6, 16], 11);
    let y = block_forward(&x, &bp, (2, 3)).unwrap();
    assert!(max_abs(y.data(), &oracle_block(&x, &bp, (2, 3))) <= 1e-12);
}

#[test]
fn block_rejects_wrong_grid() {
    let cfg = ModelConfig::nano();
    let bp: BlockParams = BlockParams::init(&cfg, &mut rng(0)).unwrap();
    let x = rand_tensor(&[16, 64], 1);
    assert!(matches!(block_forward(&x, &bp, (3, 5)), Err(Error::Shape(_))));
}

// ---- whole model ----

#[test]
fn zero_head_gives_zero_logits() {
    let cfg = ModelConfig {
        num_classes: 2,
        ..ModelConfig::nano()
    };
    let mut mp = init(&cfg, 3);
    mp.head_w = Tensor::zeros([64, 2]);
    mp.head_b = Tensor::zeros([2]);
    let logits = model_forward(&image(&cfg, 32, 4), &mp, &cfg).unwrap();
    assert_eq!(logits.shape(), [2]);
    assert_eq!(logits.data(), [0.0, 0.0]);
}

#[test]
fn logits_are_finite_across_seeds() {
    let cfg = ModelConfig::nano();
    for seed in 0..100 {
        let mp = init(&cfg, seed);
        let logits = model_forward(&image(&cfg, 32, seed + 1000), &mp, &cfg).unwrap();
        assert_eq!(logits.shape(), [cfg.num_classes]);
        assert!(logits.is_finite(), "seed {seed}: {:?}", logits.data());
    }
}

#[test]
fn forward_is_bitwise_deterministic() {
    let cfg = ModelConfig::nano();
    let img = image(&cfg, 32, 8);
    let a = model_forward(&img, &init(&cfg, 7), &cfg).unwrap();
    let b = model_forward(&img, &init(&cfg, 7), &cfg).unwrap();
    assert_eq!(a.data(), b.data());
    let c = model_forward(&img, &init(&cfg, 8), &cfg).unwrap();
    assert_ne!(a.data(), c.data());
}

#[test]
fn class_stage_leaves_patch_tokens_untouched() {
    let cfg = ModelConfig::nano();
    let mp = init(&cfg, 12);
    let tokens = rand_tensor(&[16, 64], 13);
    let stacked = class_stage_forward(&tokens, &mp).unwrap();
    assert_eq!(stacked.shape(), [17, 64]);
    assert_eq!(&stacked.data()[64..], tokens.data());

    let mut cls = mp.cls_token.clone();
    for bp in &mp.class_blocks {
        cls = class_block_forward(&cls, &tokens, bp).unwrap();
    }
    assert_eq!(&stacked.data()[..64], cls.data());
    assert_ne!(cls.data(), mp.cls_token.data());
}

#[test]
fn model_is_stem_blocks_class_stage_and_head() {
    let cfg = ModelConfig::nano();
    let mp = init(&cfg, 14);
    let img = image(&cfg, 32, 15);
    let mut x = stem_forward(&img, &mp, &cfg).unwrap();
    for bp in &mp.blocks {
        x = block_forward(&x, bp, (4, 4)).unwrap();
    }
    let cls = class_stage_forward(&x, &mp).unwrap().rows(0, 1).unwrap();
    let cls = affine_rows(cls.data(), 1, 64, &mp.final_affine.scale, &mp.final_affine.shift);
    let mut logits = naive_matmul(&cls, mp.head_w.data(), 1, 64, cfg.num_classes);
    plus_bias(&mut logits, mp.head_b.data());
    let got = model_forward(&img, &mp, &cfg).unwrap();
    assert!(max_abs(got.data(), &logits) <= 1e-12);
}

// ---- parameter counts ----

fn config_strategy() -> impl Strategy<Value = ModelConfig> {
    (
        (1usize..=3, prop::sample::select(vec![1usize, 2, 4]), prop::sample::select(vec![1usize, 2, 4])),
        (prop::sample::select(vec![2usize, 4, 8]), 1usize..=3),
        (1usize..=3, 0usize..=2, 1usize..=4, 1usize..=5),
        any::<bool>(),
    )
        .prop_map(|((cin, heads, d), (stride, side), (depth, class_depth, mlp, classes), pos)| ModelConfig {
            image_size: stride * side,
            in_channels: cin,
            embed_dim: 4 * heads * d,
            heads,
            depth,
            class_depth,
            mlp_ratio: mlp,
            num_classes: classes,
            patch_stride: stride,
            pos_embed: pos,
            eps: DEFAULT_EPS,
        })
}

#[test]
fn param_count_matches_init() {
    for cfg in [ModelConfig::nano(), ModelConfig::micro()] {
        assert_eq!(count_params(&cfg).unwrap(), scalar_count(&init(&cfg, 0)));
    }
}

#[test]
fn param_count_is_additive() {
    let cfg = ModelConfig::nano();
    let base = count_params(&cfg).unwrap();
    let c = cfg.embed_dim;
    let more_classes = ModelConfig { num_classes: 7, ..cfg.clone() };
    assert_eq!(count_params(&more_classes).unwrap() - base, 3 * (c + 1));
    let deeper = ModelConfig { depth: 2 * cfg.depth, ..cfg.clone() };
    assert_eq!(count_params(&deeper).unwrap() - base, cfg.depth * block_params(&cfg));
    let more_class_blocks = ModelConfig { class_depth: cfg.class_depth + 1, ..cfg.clone() };
    assert_eq!(count_params(&more_class_blocks).unwrap() - base, class_block_params(&cfg));
    let no_pos = ModelConfig { pos_embed: false, ..cfg.clone() };
    assert_eq!(base - count_params(&no_pos).unwrap(), cfg.tokens() * c);
}

#[test]
fn invalid_configs_are_rejected() {
    let nano = ModelConfig::nano();
    let bad = [
        ModelConfig { heads: 3, ..nano.clone() },
        ModelConfig { patch_stride: 6, ..nano.clone() },
        ModelConfig { patch_stride: 1, ..nano.clone() },
        ModelConfig { image_size: 36, ..nano.clone() },
        ModelConfig { embed_dim: 36, heads: 1, patch_stride: 16, ..nano.clone() },
        ModelConfig { depth: 0, ..nano.clone() },
        ModelConfig { num_classes: 0, ..nano.clone() },
        ModelConfig { eps: 0.0, ..nano.clone() },
    ];
    for cfg in bad {
        assert!(matches!(count_params(&cfg), Err(Error::Config(_))), "{cfg:?}");
        assert!(ModelParams::<Tensor>::init(&cfg, &mut rng(0)).is_err());
    }
    assert!(matches!(ModelConfig::named("huge"), Err(Error::Config(_))));
    assert_eq!(ModelConfig::named("micro").unwrap(), ModelConfig::micro());
}

// ---- FLOP counts ----

/// Runs the full model on a tape and returns the multiply-accumulates it recorded.
fn tape_macs(cfg: &ModelConfig, seed: u64) -> u64 {
    let mp = init(cfg, seed);
    let img = image(cfg, cfg.image_size, seed);
    let mut tape = Tape::new();
    let vars = bind(&mut tape, &mp);
    let x = tape.leaf(img);
    model_on_tape(&mut tape, x, &vars, cfg).unwrap();
    tape.macs()
}

#[test]
fn model_flops_match_tape_macs() {
    for cfg in [ModelConfig::nano(), ModelConfig::micro()] {
        let flops = count_flops(&cfg, cfg.image_size).unwrap();
        assert_eq!(flops.total, 2 * tape_macs(&cfg, 0));
        assert_eq!(
            flops.total,
            flops.stem + flops.attention_xnorm + flops.lpi + flops.mlp + flops.class_blocks + flops.head
        );
    }
}

fn attention_on_tape_macs(n: usize, c: usize, heads: usize, softmax: bool) -> u64 {
    let p = AttentionParams::init(c, heads, DEFAULT_EPS, &mut rng(0)).unwrap();
    let x = rand_tensor(&[n, c], 1);
    let d = c / heads;
    let mut tape = Tape::new();
    let pv = bind(&mut tape, &p);
    let x = tape.leaf(x);
    let q = tape.matmul(x, pv.w_q).unwrap();
    let k = tape.matmul(x, pv.w_k).unwrap();
    let v = tape.matmul(x, pv.w_v).unwrap();
    let mut outs = Vec::new();
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * d, d).unwrap();
        let kh = tape.slice_cols(k, h * d, d).unwrap();
        let vh = tape.slice_cols(v, h * d, d).unwrap();
        outs.push(if softmax {
            let kt = tape.transpose(kh).unwrap();
            let s = tape.matmul(qh, kt).unwrap();
            let a = tape.softmax_rows(s).unwrap();
            tape.matmul(a, vh).unwrap()
        } else {
            let ctx = tape.matmul_tn(kh, vh).unwrap();
            let qn = tape.xnorm_rows(qh, pv.gamma_q, h, DEFAULT_EPS).unwrap();
            let cn = tape.xnorm_rows(ctx, pv.gamma_c, h, DEFAULT_EPS).unwrap();
            tape.matmul(qn, cn).unwrap()
        });
    }
    let merged = tape.concat_cols(&outs).unwrap();
    tape.matmul(merged, pv.w_o).unwrap();
    tape.macs()
}

#[test]
fn attention_macs_match_tape() {
    for (n, c, heads) in [(16, 64, 4), (49, 32, 2), (100, 48, 3), (7, 8, 1)] {
        assert_eq!(xnorm_attention_macs(n, c, heads), attention_on_tape_macs(n, c, heads, false));
        assert_eq!(softmax_attention_macs(n, c, heads), attention_on_tape_macs(n, c, heads, true));
    }
}

#[test]
fn xnorm_flops_are_affine_in_tokens() {
    let (c, h) = (192, 4);
    let f = |n| xnorm_attention_flops(n, c, h) as i128;
    for n in [64, 256, 1024, 4096] {
        // Equal second differences: exactly affine.
        assert_eq!(f(2 * n) - f(n), f(3 * n) - f(2 * n));
        let ratio = f(2 * n) as f64 / f(n) as f64;
        assert!((1.99..=2.01).contains(&ratio), "n={n} ratio={ratio}");
    }
}

#[test]
fn softmax_flops_are_quadratic_in_tokens() {
    let (c, h) = (192, 4);
    let f = |n| softmax_attention_flops(n, c, h) as i128;
    for n in [64, 256, 1024] {
        let (d1, d2, d3) = (f(2 * n) - f(n), f(3 * n) - f(2 * n), f(4 * n) - f(3 * n));
        assert_eq!(d3 - d2, d2 - d1);
        assert!(d2 - d1 > 0);
    }
    let mut prev = 0.0;
    for n in [256, 1024, 4096, 16384, 65536] {
        let ratio = f(2 * n) as f64 / f(n) as f64;
        assert!(ratio > prev && ratio < 4.0);
        prev = ratio;
    }
    assert!(prev > 3.9);
}

#[test]
fn count_flops_scales_with_image_size() {
    let cfg = ModelConfig::nano();
    let small = count_flops(&cfg, 32).unwrap();
    let big = count_flops(&cfg, 64).unwrap();
    assert_eq!(small.tokens, 16);
    assert_eq!(big.tokens, 64);
    assert_eq!(big.stem, 4 * small.stem);
    assert_eq!(big.lpi, 4 * small.lpi);
    assert_eq!(big.head, small.head);
    assert!(big.attention_softmax > big.attention_xnorm);
    assert!(matches!(count_flops(&cfg, 30), Err(Error::Shape(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn prop_param_count_matches_init(cfg in config_strategy(), seed in 0u64..100) {
        prop_assert_eq!(count_params(&cfg).unwrap(), scalar_count(&init(&cfg, seed)));
    }

    #[test]
    fn prop_flops_match_tape(cfg in config_strategy()) {
        let flops = count_flops(&cfg, cfg.image_size).unwrap();
        prop_assert_eq!(flops.total, 2 * tape_macs(&cfg, 1));
    }
}

// ---- checkpoints ----

#[test]
fn checkpoint_round_trip_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    let cfg = ModelConfig::nano();
    let mp = init(&cfg, 21);
    save_checkpoint(&mp, &cfg, &a).unwrap();
    let (cfg2, loaded) = load_checkpoint::<f64>(&a).unwrap();
    assert_eq!(cfg2, cfg);
    assert_eq!(loaded, mp);
    save_checkpoint(&loaded, &cfg2, &b).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let bytes = fs::read(&a).unwrap();
    assert_eq!(&bytes[..4], b"XVIT");
    assert_eq!(checkpoint_info(&a).unwrap(), (cfg, DType::F64));
}

#[test]
fn checkpoint_round_trips_f32() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.ckpt");
    let cfg = ModelConfig::nano();
    let mp: ModelParams<Tensor<f32>> = ModelParams::init(&cfg, &mut rng(22)).unwrap();
    save_checkpoint(&mp, &cfg, &path).unwrap();
    assert_eq!(checkpoint_info(&path).unwrap().1, DType::F32);
    let loaded: ModelParams<Tensor<f32>> = load_checkpoint_for(&path, &cfg).unwrap();
    assert_eq!(loaded, mp);
    // Element types are not converted silently.
    let err = load_checkpoint::<f64>(&path).unwrap_err();
    assert!(matches!(err, Error::Checkpoint { .. }), "{err}");
}

fn checkpoint_error(bytes: &[u8]) -> (String, String) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ckpt");
    fs::write(&path, bytes).unwrap();
    match load_checkpoint::<f64>(&path) {
        Err(Error::Checkpoint { tensor, reason }) => (tensor, reason),
        other => panic!("expected a checkpoint error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    let cfg = ModelConfig::nano();
    save_checkpoint(&init(&cfg, 23), &cfg, &path).unwrap();
    let good = fs::read(&path).unwrap();

    let mut header = good.clone();
    header[16 + 10] ^= 0x01;
    let (tensor, reason) = checkpoint_error(&header);
    assert_eq!(tensor, "<header>");
    assert!(reason.contains("checksum"), "{reason}");

    let mut magic = good.clone();
    magic[0] = b'Y';
    assert_eq!(checkpoint_error(&magic).0, "<header>");

    let mut version = good.clone();
    version[4] = 9;
    let (_, reason) = checkpoint_error(&version);
    assert!(reason.contains("version"), "{reason}");

    assert_eq!(checkpoint_error(&good[..good.len() - 8]).0, "<payload>");
    assert_eq!(checkpoint_error(&good[..10]).0, "<header>");

    let mut payload = good.clone();
    let last = payload.len() - 1;
    payload[last] ^= 0x80;
    let (tensor, reason) = checkpoint_error(&payload);
    assert_eq!(tensor, "<payload>");
    assert!(reason.contains("checksum"), "{reason}");
}

#[test]
fn loading_into_another_config_names_the_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("n.ckpt");
    let cfg = ModelConfig::nano();
    save_checkpoint(&init(&cfg, 24), &cfg, &path).unwrap();

    let wider = ModelConfig { mlp_ratio: 3, ..cfg.clone() };
    match load_checkpoint_for::<f64>(&path, &wider) {
        Err(Error::Checkpoint { tensor, reason }) => {
            assert_eq!(tensor, "blocks.0.mlp.w1");
            assert!(reason.contains("shape"), "{reason}");
        }
        other => panic!("unexpected {:?}", other.map(|_| ())),
    }

    let deeper = ModelConfig { depth: 5, ..cfg.clone() };
    assert!(matches!(
        load_checkpoint_for::<f64>(&path, &deeper),
        Err(Error::Checkpoint { .. })
    ));
}

#[test]
fn saving_checks_shapes_against_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig::nano();
    let mut mp = init(&cfg, 25);
    mp.head_b = Tensor::zeros([5]);
    let err = save_checkpoint(&mp, &cfg, dir.path().join("s.ckpt")).unwrap_err();
    assert!(matches!(&err, Error::Shape(m) if m.contains("head_b")), "{err}");
    assert!(mp.check_shapes(&cfg).is_err());
}
