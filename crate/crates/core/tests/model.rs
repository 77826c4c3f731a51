mod common;

use common::{rng, uniform};
use mptsnet::model::layers::{
    aggregate, classify, embed, fold, global_capture, local_extract, periodic_block,
    scale_broadcast_back, segment_pool,
};
use mptsnet::model::{
    Affine, BlockParams, BranchMerge, Model, ModelConfig, ModelParams, ParamTree, Variant,
};
use mptsnet::numerics::{Tape, Tensor, Var};
use mptsnet::spectral::PeriodSet;
use mptsnet::Error;
use ndarray::{s, Array3, Axis};
use rand::Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), data).unwrap()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn attention_block(tape: &mut Tape<f64>, d: usize, seed: u64) -> BlockParams<Var> {
    let mut r = rng(seed);
    BlockParams {
        conv: vec![Affine {
            weight: tape.leaf(uniform(&[d, d, 1], &mut r)),
            bias: tape.leaf(Tensor::zeros(vec![d])),
        }],
        merge: None,
        w_q: tape.leaf(uniform(&[d, d], &mut r)),
        w_k: tape.leaf(uniform(&[d, d], &mut r)),
        w_v: tape.leaf(uniform(&[d, d], &mut r)),
        w_o: tape.leaf(uniform(&[d, d], &mut r)),
    }
}

fn small_config(variant: Variant) -> ModelConfig {
    let mut cfg = ModelConfig::new(3, 24, 3).with_variant(variant);
    if variant != Variant::NoMp {
        cfg.k = 2;
    }
    cfg.d_embed = 8;
    cfg.heads = 2;
    cfg.kernel_sizes = vec![1, 3, 5];
    cfg
}

fn random_batch(b: usize, d: usize, l: usize, seed: u64) -> Array3<f64> {
    let mut r = rng(seed);
    Array3::from_shape_fn((b, d, l), |_| r.random_range(-1.0..1.0))
}

#[test]
fn identity_embedding_is_transparent() {
    let mut r = rng(1);
    let x = uniform(&[3, 5, 2], &mut r);
    let mut eye = vec![0.0; 9];
    for i in 0..3 {
        eye[i * 4] = 1.0;
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let p = Affine {
        weight: tape.constant(t(&[3, 3], &eye)),
        bias: tape.constant(Tensor::zeros(vec![3])),
    };
    let y = embed(&mut tape, xv, &p, false).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn embedding_shape_and_zero_input() {
    let mut r = rng(2);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(vec![3, 25, 4]));
    let p = Affine {
        weight: tape.constant(uniform(&[3, 8], &mut r)),
        bias: tape.constant(Tensor::zeros(vec![8])),
    };
    let y = embed(&mut tape, x, &p, true).unwrap();
    assert_eq!(tape.shape(y), &[8, 25, 4]);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn fold_matches_pad_and_reshape_layout() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 5], &[1., 2., 3., 4., 5.]));
    let f = fold(&mut tape, x, 2, 3).unwrap();
    assert_eq!(tape.shape(f), &[2, 1, 3]);
    assert_eq!(tape.value(f).data(), &[1., 2., 3., 4., 5., 0.]);
}

fn two_branch_block(tape: &mut Tape<f64>) -> BlockParams<Var> {
    let z = tape.constant(Tensor::zeros(vec![1, 1]));
    BlockParams {
        conv: vec![
            Affine {
                weight: tape.constant(t(&[1, 1, 1], &[2.0])),
                bias: tape.constant(t(&[1], &[0.5])),
            },
            Affine {
                weight: tape.constant(t(&[1, 1, 3], &[1.0, 0.0, -1.0])),
                bias: tape.constant(t(&[1], &[0.0])),
            },
        ],
        merge: None,
        w_q: z,
        w_k: z,
        w_v: z,
        w_o: z,
    }
}

#[test]
fn two_branch_local_extract_by_hand() {
    let mut tape = Tape::new();
    let block = two_branch_block(&mut tape);
    let seg = tape.constant(t(&[1, 1, 4], &[1., 2., 3., 4.]));
    let y = local_extract(&mut tape, seg, &block, BranchMerge::Mean).unwrap();
    // ker 1: 2x + 0.5 = [2.5, 4.5, 6.5, 8.5]
    // ker 3: x[t-1] - x[t+1] with zero padding = [-2, -2, -2, 3]
    let want: Vec<f64> = [0.25, 1.25, 2.25, 5.75].iter().map(|&v| gelu(v)).collect();
    assert!(close(tape.value(y).data(), &want, 1e-12));
}

#[test]
fn identical_branches_average_to_one_branch() {
    let mut tape = Tape::new();
    let w = tape.constant(t(&[1, 1, 1], &[1.0]));
    let b = tape.constant(t(&[1], &[0.0]));
    let z = tape.constant(Tensor::zeros(vec![1, 1]));
    let block = BlockParams {
        conv: vec![Affine { weight: w, bias: b }; 3],
        merge: None,
        w_q: z,
        w_k: z,
        w_v: z,
        w_o: z,
    };
    let x = [0.3, -1.2, 2.0, 0.0, 0.7];
    let seg = tape.constant(t(&[1, 1, 5], &x));
    let y = local_extract(&mut tape, seg, &block, BranchMerge::Mean).unwrap();
    let want: Vec<f64> = x.iter().map(|&v| gelu(v)).collect();
    assert!(close(tape.value(y).data(), &want, 1e-12));
}

#[test]
fn constant_segment_stays_constant_under_unit_kernels() {
    let mut tape = Tape::new();
    let block = BlockParams {
        conv: vec![Affine {
            weight: tape.constant(t(&[1, 1, 1], &[1.5])),
            bias: tape.constant(t(&[1], &[0.0])),
        }],
        merge: None,
        w_q: tape.constant(Tensor::zeros(vec![1, 1])),
        w_k: tape.constant(Tensor::zeros(vec![1, 1])),
        w_v: tape.constant(Tensor::zeros(vec![1, 1])),
        w_o: tape.constant(Tensor::zeros(vec![1, 1])),
    };
    let seg = tape.constant(Tensor::full(vec![2, 1, 6], 0.8));
    let y = local_extract(&mut tape, seg, &block, BranchMerge::Mean).unwrap();
    let v = tape.value(y).data();
    assert!(v.iter().all(|&a| (a - v[0]).abs() < 1e-15));
}

#[test]
fn concat_merge_shapes() {
    let mut r = rng(3);
    let mut tape = Tape::new();
    let d = 2;
    let mut block = attention_block(&mut tape, d, 4);
    block.conv.push(Affine {
        weight: tape.constant(uniform(&[d, d, 3], &mut r)),
        bias: tape.constant(Tensor::zeros(vec![d])),
    });
    block.merge = Some(Affine {
        weight: tape.constant(uniform(&[d, 2 * d, 1], &mut r)),
        bias: tape.constant(Tensor::zeros(vec![d])),
    });
    let seg = tape.constant(uniform(&[3, d, 5], &mut r));
    let y = local_extract(&mut tape, seg, &block, BranchMerge::ConcatProject).unwrap();
    assert_eq!(tape.shape(y), &[3, d, 5]);
}

#[test]
fn segment_pool_by_hand() {
    // [f=2, D=3, p=2]
    let x = [1., 3., -2., 2., 0.5, 0.5, 4., 0., 1., 1., -3., 5.];
    let mut tape = Tape::new();
    let v = tape.constant(t(&[2, 3, 2], &x));
    let y = segment_pool(&mut tape, v).unwrap();
    assert_eq!(tape.shape(y), &[2, 3]);
    assert_eq!(tape.value(y).data(), &[2., 0., 0.5, 2., 1., 1.]);

    let single = tape.constant(t(&[2, 3, 1], &x[..6]));
    let y = segment_pool(&mut tape, single).unwrap();
    assert_eq!(tape.value(y).data(), &x[..6]);
}

#[test]
fn identical_tokens_give_uniform_attention() {
    let mut tape = Tape::new();
    let block = attention_block(&mut tape, 4, 5);
    let row = [0.2, -0.4, 0.9, 0.1];
    let tokens: Vec<f64> = row.iter().cycle().take(20).copied().collect();
    let x = tape.constant(t(&[5, 4], &tokens));
    let cap = global_capture(&mut tape, x, &block, 2).unwrap();
    assert_eq!(tape.shape(cap.attention), &[2, 5, 5]);
    assert!(tape
        .value(cap.attention)
        .data()
        .iter()
        .all(|&a| (a - 0.2).abs() < 1e-12));
}

#[test]
fn single_token_attends_to_itself() {
    let mut tape = Tape::new();
    let block = attention_block(&mut tape, 4, 6);
    let x0 = t(&[1, 4], &[0.5, -1.0, 0.25, 2.0]);
    let x = tape.constant(x0.clone());
    let cap = global_capture(&mut tape, x, &block, 2).unwrap();
    assert!(tape.value(cap.attention).data().iter().all(|&a| a == 1.0));
    let v = tape.matmul(x, block.w_v).unwrap();
    let want = tape.matmul(v, block.w_o).unwrap();
    assert!(close(
        tape.value(cap.features).data(),
        tape.value(want).data(),
        1e-12
    ));
}

#[test]
fn attention_rows_sum_to_one() {
    let mut r = rng(7);
    let mut tape = Tape::new();
    let block = attention_block(&mut tape, 6, 8);
    let x = tape.constant(uniform(&[7, 6], &mut r));
    let cap = global_capture(&mut tape, x, &block, 3).unwrap();
    let a = tape.value(cap.attention).data();
    for row in a.chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn broadcast_back_tiles_segments() {
    let mut tape = Tape::new();
    let g = tape.constant(t(&[1, 2], &[3.0, -1.0]));
    let y = scale_broadcast_back(&mut tape, g, 5, 5).unwrap();
    assert_eq!(
        tape.value(y).data(),
        &[3.0; 5]
            .iter()
            .chain(&[-1.0; 5])
            .copied()
            .collect::<Vec<_>>()[..]
    );

    let g = tape.constant(t(&[3, 1], &[1.0, 2.0, 3.0]));
    let y = scale_broadcast_back(&mut tape, g, 3, 8).unwrap();
    assert_eq!(tape.value(y).data(), &[1., 1., 1., 2., 2., 2., 3., 3.]);

    let g = tape.constant(Tensor::zeros(vec![4, 6]));
    let y = scale_broadcast_back(&mut tape, g, 25, 100).unwrap();
    assert_eq!(tape.shape(y), &[6, 100]);
}

#[test]
fn aggregation_weights() {
    let mut tape = Tape::new();
    let outs: Vec<Var> = (0..5)
        .map(|i| tape.constant(Tensor::full(vec![2, 3], i as f64)))
        .collect();
    let (z, alpha) = aggregate(&mut tape, &outs, &[1.0; 5]).unwrap();
    assert!(alpha.iter().all(|&a| (a - 0.2).abs() < 1e-15));
    assert!(tape
        .value(z)
        .data()
        .iter()
        .all(|&v| (v - 2.0).abs() < 1e-12));

    let (z, alpha) = aggregate(&mut tape, &outs[..2], &[0.0, 60.0]).unwrap();
    assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(tape
        .value(z)
        .data()
        .iter()
        .all(|&v| (v - 1.0).abs() < 1e-12));

    let (z, alpha) = aggregate(&mut tape, &outs[3..4], &[7.5]).unwrap();
    assert_eq!(alpha, vec![1.0]);
    assert_eq!(z, outs[3]);
}

#[test]
fn zero_block_is_residual_identity() {
    let cfg = small_config(Variant::Full);
    let mut tape = Tape::new();
    let params = ModelParams::<f64>::init(&cfg, 1).unwrap();
    let zero = params.zeros_like().bind(&mut tape);
    let mut r = rng(9);
    let x0 = uniform(&[8, 24], &mut r);
    let x = tape.constant(x0.clone());
    let periods = PeriodSet::from_frequencies(24, &[4, 3]).unwrap();
    let (y, trace) =
        periodic_block(&mut tape, x, &periods, &[2.0, 1.0], &zero.blocks[0], &cfg).unwrap();
    assert_eq!(tape.value(y), &x0);
    assert_eq!(tape.shape(y), &[8, 24]);
    assert_eq!(trace.attention.len(), 2);
}

#[test]
fn zero_blocks_reduce_model_to_embed_pool_head() {
    let cfg = small_config(Variant::Full);
    let periods = PeriodSet::from_frequencies(24, &[4, 3]).unwrap();
    let mut model = Model::<f64>::init(cfg, periods, 2).unwrap();
    let zero = model.params.zeros_like();
    model.params.blocks = zero.blocks;
    let batch = random_batch(2, 3, 24, 10);
    let logits = model.predict_logits(batch.view()).unwrap();
    for (i, sample) in batch.outer_iter().enumerate() {
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape);
        let x = tape.constant(
            Tensor::from_f64(vec![3, 24], &sample.iter().copied().collect::<Vec<_>>()).unwrap(),
        );
        let h = embed(&mut tape, x, &p.embed, true).unwrap();
        let y = classify(&mut tape, h, &p.head).unwrap();
        assert!(close(&logits.row(i).to_vec(), tape.value(y).data(), 1e-12));
    }
}

#[test]
fn zero_head_gives_uniform_logits() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::full(vec![4, 10], 1.3));
    let head = Affine {
        weight: tape.constant(Tensor::zeros(vec![4, 3])),
        bias: tape.constant(Tensor::zeros(vec![3])),
    };
    let y = classify(&mut tape, z, &head).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0; 3]);
}

#[test]
fn time_constant_features_pool_to_themselves() {
    let mut tape = Tape::new();
    let feats = [0.5, -1.0];
    let z = tape.constant(t(&[2, 3], &[0.5, 0.5, 0.5, -1.0, -1.0, -1.0]));
    let head = Affine {
        weight: tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])),
        bias: tape.constant(Tensor::zeros(vec![2])),
    };
    let y = classify(&mut tape, z, &head).unwrap();
    assert!(close(tape.value(y).data(), &feats, 1e-15));
}

#[test]
fn single_sample_matches_batch_row() {
    let cfg = small_config(Variant::Full);
    let periods = PeriodSet::from_frequencies(24, &[4, 3]).unwrap();
    let model = Model::<f32>::init(cfg, periods, 3).unwrap();
    let batch = random_batch(4, 3, 24, 11);
    let all = model.predict_logits(batch.view()).unwrap();
    for i in 0..4 {
        let one = model
            .predict_logits(batch.slice(s![i..i + 1, .., ..]))
            .unwrap();
        assert_eq!(one.row(0), all.row(i));
    }
}

#[test]
fn batch_permutation_permutes_logits() {
    let cfg = small_config(Variant::Full);
    let periods = PeriodSet::from_frequencies(24, &[4, 3]).unwrap();
    let model = Model::<f64>::init(cfg, periods, 4).unwrap();
    let batch = random_batch(5, 3, 24, 12);
    let perm = [3, 0, 4, 1, 2];
    let shuffled = batch.select(Axis(0), &perm);
    let a = model.predict_logits(batch.view()).unwrap();
    let b = model.predict_logits(shuffled.view()).unwrap();
    for (i, &p) in perm.iter().enumerate() {
        assert_eq!(b.row(i), a.row(p));
    }
}

#[test]
fn no_mp_equals_full_on_whole_series_scale() {
    let mut full = small_config(Variant::Full);
    full.k = 1;
    let no_mp = small_config(Variant::NoMp);
    let params = ModelParams::<f64>::init(&full, 5).unwrap();
    let whole = PeriodSet::whole_series(24);
    let a = Model::new(full, whole.clone(), params.clone()).unwrap();
    let b = Model::new(no_mp, whole, params).unwrap();
    let batch = random_batch(3, 3, 24, 13);
    assert_eq!(
        a.predict_logits(batch.view()).unwrap(),
        b.predict_logits(batch.view()).unwrap()
    );
}

#[test]
fn attention_records_are_well_formed() {
    let cfg = small_config(Variant::Full);
    let periods = PeriodSet::from_frequencies(24, &[4, 3]).unwrap();
    let model = Model::<f32>::init(cfg, periods, 6).unwrap();
    let batch = random_batch(2, 3, 24, 14);
    let out = model.forward(batch.view()).unwrap();
    assert_eq!(out.attention.len(), 2);
    for sample in &out.attention {
        assert_eq!(sample.len(), 2);
        for rec in sample {
            assert_eq!(rec.composite.len(), 24);
            assert!(rec.composite.iter().all(|&c| c >= 0.0));
            let alpha: f64 = rec.scales.iter().map(|s| s.alpha).sum();
            assert!((alpha - 1.0).abs() < 1e-6);
            for sc in &rec.scales {
                assert_eq!(sc.attention.len(), sc.frequency);
                for row in &sc.attention {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
                }
            }
        }
    }
}

#[test]
fn every_variant_runs_and_stays_finite() {
    for v in [
        Variant::Full,
        Variant::NoLocal,
        Variant::NoGlobal,
        Variant::NoMp,
    ] {
        let cfg = small_config(v);
        let periods = if v == Variant::NoMp {
            PeriodSet::whole_series(24)
        } else {
            PeriodSet::from_frequencies(24, &[4, 3]).unwrap()
        };
        let mut model = Model::<f32>::init(cfg, periods, 7).unwrap();
        for slot in model.params.slots_mut() {
            slot.scale_in_place(0.1);
        }
        let batch = random_batch(2, 3, 24, 15);
        let out = model.forward(batch.view()).unwrap();
        assert!(out.logits.iter().all(|v| v.is_finite()));
        assert_eq!(out.logits.dim(), (2, 3));
        if v == Variant::NoGlobal {
            assert!(out.attention[0][0]
                .scales
                .iter()
                .all(|s| s.attention.is_empty()));
        }
    }
}

#[test]
fn even_kernel_is_rejected() {
    let mut cfg = small_config(Variant::Full);
    cfg.kernel_sizes = vec![1, 4];
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    assert!(matches!(
        ModelParams::<f32>::init(&cfg, 0),
        Err(Error::Config(_))
    ));
}

#[test]
fn checkpointed_structure_names_are_stable() {
    let cfg = small_config(Variant::Full);
    let p: ParamTree<Tensor<f32>> = ModelParams::init(&cfg, 0).unwrap();
    let names: Vec<String> = p.entries().into_iter().map(|(n, _)| n).collect();
    assert_eq!(names[0], "embed.weight");
    assert!(names.contains(&"blocks.1.attn.w_o".to_string()));
    assert_eq!(names.last().unwrap(), "head.bias");
}
