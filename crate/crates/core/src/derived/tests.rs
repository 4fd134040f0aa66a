use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::functional::resize_bilinear;
use crate::nn::testutil::rng;
use crate::nn::{OperatorKind, Trainable, BN_EPS};
use crate::search_space::{init_relaxation, random_cell, random_path, validate_path};
use crate::supernet::{planted_weights, ArchWeights, Supernet};
use crate::tensor::Tensor;

use OperatorKind::*;

fn path(p: &[usize]) -> PathGenotype {
    PathGenotype { path: p.to_vec() }
}

fn small_cell() -> CellGenotype {
    CellGenotype {
        blocks: vec![(1, 0, SepConv3, Skip).into(), (2, 0, AtrousConv3, MaxPool3).into()],
    }
}

fn small_spec(p: &[usize], classes: usize) -> DerivedNetworkSpec {
    DerivedNetworkSpec::new(small_cell(), path(p), 1, 4, classes)
}

fn build(spec: &DerivedNetworkSpec, seed: u64) -> (ParamStore<f64>, DerivedNetwork) {
    let mut store = ParamStore::new();
    let net = DerivedNetwork::new(&mut store, &mut rng(seed), spec).unwrap();
    (store, net)
}

fn scan_oracle(p: &[usize]) -> BTreeMap<usize, usize> {
    let mut out = BTreeMap::new();
    for rate in [4, 8, 16, 32] {
        if let Some(pos) = p.iter().rposition(|&r| r == rate) {
            out.insert(rate, pos + 1);
        }
    }
    out
}

#[test]
fn pyramid_inputs_take_the_last_occurrence() {
    assert_eq!(select_pyramid_inputs(&path(&[4, 4, 8, 8, 4])), BTreeMap::from([(4, 5), (8, 4)]));
    assert_eq!(
        select_pyramid_inputs(&path(&[4, 8, 16, 32])),
        BTreeMap::from([(4, 1), (8, 2), (16, 3), (32, 4)])
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn pyramid_inputs_match_a_linear_scan(seed in any::<u64>(), layers in 1usize..13) {
        let config = SearchConfig::new(layers, 1, 1, 2);
        let p = random_path(&config, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(validate_path(&config, &p).is_empty());
        prop_assert_eq!(select_pyramid_inputs(&p), scan_oracle(&p.path));
    }
}

#[test]
fn spec_validation_and_json() {
    let spec = small_spec(&[4, 8, 8], 3);
    spec.validate().unwrap();
    assert_eq!(DerivedNetworkSpec::from_json(&spec.to_json().unwrap()).unwrap(), spec);

    let mut bad = spec.clone();
    bad.pyramid_inputs.insert(8, 2);
    assert!(bad.validate().is_err());
    assert!(DerivedNetworkSpec { dim: 0, ..spec.clone() }.validate().is_err());
    assert!(small_spec(&[4, 16], 3).validate().is_err());
}

#[test]
fn shape_contracts() {
    let spec = small_spec(&[4, 8, 16, 8], 3);
    let config = spec.search_config();
    let (store, net) = build(&spec, 1);
    for (h, w) in [(32, 32), (30, 34)] {
        let mut ctx = Ctx::eval(&store);
        let x = ctx.input(Tensor::randn(&[2, 3, h, w], 1.0, &mut rng(2)));
        let f = net.features(&mut ctx, x).unwrap();
        let base = f.encoder.base_extent;
        assert_eq!(base, (h.div_ceil(4), w.div_ceil(4)));
        assert_eq!(f.taps.keys().copied().collect::<Vec<_>>(), [4, 8, 16]);
        for (&rate, &v) in &f.taps {
            let (eh, ew) = extent_at(base, rate).unwrap();
            assert_eq!(ctx.value(v).shape(), &[2, config.channels_at_rate(rate), eh, ew], "rate {rate}");
            assert_eq!(ctx.value(f.pyramid[&rate]).shape(), &[2, 4, eh, ew]);
        }
        if h % 32 == 0 {
            assert_eq!(extent_at(base, 16).unwrap(), (h / 16, w / 16));
        }
        assert_eq!(ctx.value(f.fusion).shape(), &[2, 4, base.0, base.1]);
        assert_eq!(ctx.value(f.aspp).shape()[1], 4);
        let p = net.forward(&mut ctx, x).unwrap();
        let p = ctx.value(p);
        assert_eq!(p.shape(), &[2, 3, h, w]);
        for n in 0..2 {
            for i in 0..h * w {
                let s: f64 = (0..3).map(|c| p.data()[(n * 3 + c) * h * w + i]).sum();
                assert!((s - 1.0).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn single_class_is_certain() {
    let (store, net) = build(&small_spec(&[4, 4], 1), 3);
    let mut ctx = Ctx::eval(&store);
    let x = ctx.input(Tensor::randn(&[1, 3, 16, 16], 1.0, &mut rng(4)));
    let p = net.forward(&mut ctx, x).unwrap();
    assert!(ctx.value(p).data().iter().all(|&v| v == 1.0));
}

#[test]
fn add_combine_builds_a_narrower_head() {
    let mut spec = small_spec(&[4, 8], 2);
    let (_, concat) = build(&spec, 0);
    spec.combine = Combine::Add;
    let (store, add) = build(&spec, 0);
    assert_eq!(concat.num_params() - add.num_params(), 9 * 4 * 4);
    let mut ctx = Ctx::eval(&store);
    let x = ctx.input(Tensor::randn(&[1, 3, 16, 16], 1.0, &mut rng(1)));
    let y = add.forward_logits(&mut ctx, x).unwrap();
    assert_eq!(ctx.value(y).shape(), &[1, 2, 16, 16]);
}

#[test]
fn eval_forward_is_deterministic() {
    let (store, net) = build(&small_spec(&[4, 8, 8], 3), 5);
    let img = Tensor::randn(&[1, 3, 24, 24], 1.0, &mut rng(6));
    let run = || {
        let mut ctx = Ctx::eval(&store);
        let x = ctx.input(img.clone());
        let y = net.forward(&mut ctx, x).unwrap();
        ctx.value(y).clone()
    };
    assert_eq!(run().data(), run().data());
}

fn set(store: &mut ParamStore<f64>, name: &str, t: Tensor<f64>) {
    store.assign(name, &t).unwrap_or_else(|e| panic!("{name}: {e}"));
}

fn identity_kernel(c: usize, k: usize) -> Tensor<f64> {
    let mut t = Tensor::zeros(&[c, c, k, k]);
    for o in 0..c {
        t.data_mut()[((o * c + o) * k + k / 2) * k + k / 2] = 1.0;
    }
    t
}

#[test]
fn fpn_two_level_arithmetic() {
    let mut store = ParamStore::<f64>::new();
    let fpn = Fpn::new(&mut store, &mut rng(0), &BTreeMap::from([(4, 3), (8, 3)]), 3).unwrap();
    for r in [4, 8] {
        set(&mut store, &format!("fpn.lateral.s{r}.conv.weight"), identity_kernel(3, 1));
        set(&mut store, &format!("fpn.smooth.s{r}.conv.weight"), identity_kernel(3, 3));
    }
    let (a, b) = (0.7, 0.4);
    let mut ctx = Ctx::eval(&store);
    let taps = BTreeMap::from([
        (4, ctx.input(Tensor::full(&[1, 3, 6, 6], a))),
        (8, ctx.input(Tensor::full(&[1, 3, 3, 3], b))),
    ]);
    let out = fpn.forward(&mut ctx, &taps).unwrap();
    let k2 = 1.0 / (1.0 + BN_EPS);
    let fine = ctx.value(out[&4]);
    let coarse = ctx.value(out[&8]);
    assert_eq!(fine.shape(), &[1, 3, 6, 6]);
    assert!(fine.data().iter().all(|&v| (v - (a + b) * k2).abs() < 1e-5));
    assert!(coarse.data().iter().all(|&v| (v - b * k2).abs() < 1e-5));
}

#[test]
fn single_level_fpn_is_lateral_then_smooth() {
    let mut store = ParamStore::<f64>::new();
    let fpn = Fpn::new(&mut store, &mut rng(1), &BTreeMap::from([(8, 2)]), 3).unwrap();
    let x = Tensor::randn(&[1, 2, 4, 4], 1.0, &mut rng(2));
    let mut ctx = Ctx::eval(&store);
    let xv = ctx.input(x);
    let out = fpn.forward(&mut ctx, &BTreeMap::from([(8, xv)])).unwrap();
    let (_, lateral, smooth) = &fpn.levels[0];
    let l = lateral.forward(&mut ctx, xv).unwrap();
    let manual = smooth.forward(&mut ctx, l).unwrap();
    assert_eq!(ctx.value(out[&8]).data(), ctx.value(manual).data());
    assert!(fpn.forward(&mut ctx, &BTreeMap::new()).is_err());
    assert!(Fpn::new(&mut store, &mut rng(1), &BTreeMap::new(), 3).is_err());
}

#[test]
fn fusion_stage_counts() {
    let mut store = ParamStore::<f64>::new();
    let fusion = FeatureFusion::new(&mut store, &mut rng(0), &[4, 8, 16, 32], 2).unwrap();
    let counts: Vec<(usize, usize)> = fusion.branches.iter().map(|(r, s)| (*r, s.len())).collect();
    assert_eq!(counts, [(4, 1), (8, 1), (16, 2), (32, 3)]);
    for (rate, ups) in [(4, 0), (8, 1), (16, 2), (32, 3)] {
        assert_eq!(FeatureFusion::upsamplings(rate).unwrap(), ups);
    }
    assert!(FeatureFusion::new(&mut store, &mut rng(0), &[64], 2).is_err());
    assert!(FeatureFusion::new(&mut store, &mut rng(0), &[2], 2).is_err());
}

#[test]
fn fusion_matches_unrolled_stages() {
    let mut store = ParamStore::<f64>::new();
    let fusion = FeatureFusion::new(&mut store, &mut rng(3), &[4, 16], 3).unwrap();
    let x4 = Tensor::randn(&[1, 3, 8, 8], 1.0, &mut rng(4));
    let x16 = Tensor::randn(&[1, 3, 2, 2], 1.0, &mut rng(5));
    let mut ctx = Ctx::eval(&store);
    let (v4, v16) = (ctx.input(x4), ctx.input(x16));
    let got = fusion.forward(&mut ctx, &BTreeMap::from([(4, v4), (16, v16)]), (8, 8)).unwrap();

    let s4 = &fusion.branches[0].1;
    let s16 = &fusion.branches[1].1;
    let a = s4[0].forward(&mut ctx, v4).unwrap();
    let b = s16[0].forward(&mut ctx, v16).unwrap();
    let b = resize_bilinear(&mut ctx.tape, b, 4, 4).unwrap();
    let b = s16[1].forward(&mut ctx, b).unwrap();
    let b = resize_bilinear(&mut ctx.tape, b, 8, 8).unwrap();
    let want = ctx.tape.add(a, b).unwrap();
    assert_eq!(ctx.value(got).shape(), &[1, 3, 8, 8]);
    assert!(ctx.value(got).max_abs_diff(ctx.value(want)).unwrap() < 1e-5);
}

#[test]
fn aspp_dilations_follow_the_final_rate() {
    assert_eq!(Aspp::rates_for(16), [6, 12, 18]);
    assert_eq!(Aspp::rates_for(8), [12, 24, 36]);
    assert_eq!(Aspp::rates_for(32), [3, 6, 9]);
    assert_eq!(Aspp::rates_for(4), [24, 48, 72]);
}

#[test]
fn aspp_constant_input_gives_constant_channels() {
    let mut store = ParamStore::<f64>::new();
    let aspp = Aspp::new(&mut store, &mut rng(7), 4, 5, 16).unwrap();
    // every dilation is at least 6, so on a 4×4 map only the centre tap lands
    let mut ctx = Ctx::eval(&store);
    let x = ctx.input(Tensor::full(&[1, 4, 4, 4], 0.3));
    let y = aspp.forward(&mut ctx, x).unwrap();
    let y = ctx.value(y);
    assert_eq!(y.shape(), &[1, 5, 4, 4]);
    for c in y.data().chunks(16) {
        assert!(c.iter().all(|&v| (v - c[0]).abs() < 1e-12));
    }
}

#[test]
fn aggregation_is_a_distribution() {
    let mut store = ParamStore::<f64>::new();
    let head = SemanticAggregation::new(&mut store, &mut rng(8), 3, 4, Combine::Concat).unwrap();
    let mut ctx = Ctx::eval(&store);
    let f = ctx.input(Tensor::randn(&[1, 3, 4, 4], 1.0, &mut rng(9)));
    let a = ctx.input(Tensor::randn(&[1, 3, 2, 2], 1.0, &mut rng(10)));
    let p = head.forward(&mut ctx, f, a, (16, 16)).unwrap();
    let p = ctx.value(p);
    assert_eq!(p.shape(), &[1, 4, 16, 16]);
    for i in 0..256 {
        let s: f64 = (0..4).map(|c| p.data()[c * 256 + i]).sum();
        assert!((s - 1.0).abs() < 1e-5);
    }
}

/// Runs the supernet with one-hot weights planted on `(cell, path)` and the
/// discrete encoder sharing its weights; returns the largest difference
/// over all layer outputs along the path.
pub(crate) fn relaxation_gap(config: &SearchConfig, cell: &CellGenotype, p: &PathGenotype, seed: u64, training: bool) -> f64 {
    let mut sstore = ParamStore::<f64>::new();
    let (a, b) = init_relaxation(config, seed).unwrap();
    let sup = Supernet::new(&mut sstore, &mut rng(seed), config, &a, &b).unwrap();
    for (name, t) in sstore.named_tensors().iter().map(|(n, t)| (n.to_string(), (*t).clone())).collect::<Vec<_>>() {
        if !name.starts_with("arch.") && (name.ends_with(".gamma") || name.ends_with(".beta")) {
            let shape = t.shape().to_vec();
            sstore.assign(&name, &Tensor::randn(&shape, 0.5, &mut rng(seed ^ 77)).map(|v| v + 1.0)).unwrap();
        }
    }
    let mut dstore = ParamStore::<f64>::new();
    let enc = DerivedEncoder::new(&mut dstore, &mut rng(seed + 1), config, cell, p).unwrap();
    let copied = dstore.copy_matching_from(&sstore).unwrap();
    assert_eq!(copied, dstore.named_tensors().len(), "every encoder tensor has a supernet twin");

    let (alpha, beta) = planted_weights::<f64>(config, cell, p).unwrap();
    let img = Tensor::randn(&[2, 3, 32, 32], 1.0, &mut rng(seed + 2));

    let mut sctx = Ctx::new(&sstore, training, Trainable::Nothing);
    let x = sctx.input(img.clone());
    let w = ArchWeights {
        alpha: sctx.input(alpha),
        beta: sctx.input(beta),
    };
    let grid = sup.encode(&mut sctx, x, &w).unwrap();

    let mut dctx = Ctx::new(&dstore, training, Trainable::Nothing);
    let x = dctx.input(img);
    let out = enc.forward(&mut dctx, x).unwrap();

    let mut worst = 0f64;
    for (i, &rate) in p.path.iter().enumerate() {
        let level = config.level_of(rate).unwrap();
        let s = grid.states[i + 1][level].expect("planted state is live");
        let d = sctx.value(s).max_abs_diff(dctx.value(out.layers[i])).unwrap();
        worst = worst.max(d);
    }
    worst
}

#[test]
fn one_hot_supernet_equals_the_discrete_encoder() {
    let config = SearchConfig::new(4, 2, 1, 2);
    for seed in 0..4 {
        let mut r = rng(100 + seed);
        let cell = random_cell(config.blocks, &mut r);
        let p = random_path(&config, &mut r);
        for training in [false, true] {
            let gap = relaxation_gap(&config, &cell, &p, seed, training);
            assert!(gap < 1e-10, "seed {seed} training {training}: {gap} for {cell:?} {p:?}");
        }
    }
}

#[test]
fn planted_path_with_revisits() {
    let config = SearchConfig::new(5, 1, 1, 2);
    let cell = CellGenotype {
        blocks: vec![(0, 1, AvgPool3, SepConv5).into()],
    };
    let gap = relaxation_gap(&config, &cell, &path(&[8, 8, 4, 8, 16]), 9, true);
    assert!(gap < 1e-10, "{gap}");
}

#[test]
fn num_params_counts_every_registered_scalar() {
    for seed in 0..3 {
        let mut r = rng(seed);
        let config = SearchConfig::new(5, 3, 2, 4);
        let spec = DerivedNetworkSpec::new(random_cell(3, &mut r), random_path(&config, &mut r), 2, 8, 4);
        let (store, net) = build(&spec, seed);
        assert_eq!(net.num_params(), store.num_scalars(None));
    }
}
