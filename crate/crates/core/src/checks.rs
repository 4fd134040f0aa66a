//! Finite-difference gradient checks of every differentiable building block
//! on tiny double-precision shapes.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::derived::{Aspp, Combine, FeatureFusion, Fpn, SemanticAggregation};
use crate::error::Result;
use crate::nn::functional::resize_bilinear;
use crate::nn::{projected_gradcheck, Ctx, OpInstance, OperatorKind};
use crate::search_space::{init_relaxation, SearchConfig};
use crate::supernet::{HiddenStateGrid, MixedCell, Stem, Supernet};
use crate::tensor::{FiniteDiffReport, ParamGroup, ParamStore, Tensor, Var};

pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCase {
    pub name: String,
    pub report: FiniteDiffReport,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < GRAD_TOLERANCE
    }
}

fn check<F>(name: &str, store: &mut ParamStore<f64>, seed: u64, f: F) -> Result<GradCase>
where
    F: FnMut(&mut Ctx<'_, f64>) -> Result<Var>,
{
    Ok(GradCase {
        name: name.to_string(),
        report: projected_gradcheck(store, seed ^ 0x51ed, GRAD_EPS, f)?,
    })
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn randn_param(store: &mut ParamStore<f64>, r: &mut ChaCha8Rng, name: &str, shape: &[usize]) -> Result<crate::tensor::ParamId> {
    store.add(name, Tensor::randn(shape, 1.0, r), ParamGroup::Weight)
}

/// Scatters BN scales away from 1 so the affine gradient is exercised.
fn jitter_gamma(store: &mut ParamStore<f64>, r: &mut ChaCha8Rng) {
    let names: Vec<String> = store.named_tensors().iter().map(|(n, _)| n.to_string()).collect();
    for name in names.iter().filter(|n| n.ends_with(".gamma")) {
        let id = store.find(name).expect("listed above");
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::randn(&shape, 1.0, r).map(|v| 1.0 + 0.5 * v);
    }
}

pub fn check_operator(kind: OperatorKind, seed: u64) -> Result<GradCase> {
    let mut store = ParamStore::new();
    let mut r = rng(seed, 10 + kind.index() as u64);
    let x = randn_param(&mut store, &mut r, "x", &[1, 4, 8, 8])?;
    let op = OpInstance::new(&mut store, &mut r, "op", kind, 4)?;
    jitter_gamma(&mut store, &mut r);
    check(kind.name(), &mut store, seed, |ctx| {
        let xv = ctx.param(x);
        op.forward(ctx, xv)
    })
}

pub fn check_stem(seed: u64) -> Result<GradCase> {
    let config = SearchConfig::new(1, 1, 4, 2);
    let mut store = ParamStore::new();
    let mut r = rng(seed, 20);
    let stem = Stem::new(&mut store, &mut r, &config)?;
    jitter_gamma(&mut store, &mut r);
    let img = Tensor::randn(&[1, 3, 16, 16], 1.0, &mut r);
    check("stem", &mut store, seed, |ctx| {
        let x = ctx.input(img.clone());
        Ok(stem.forward(ctx, x)?.1)
    })
}

pub fn check_mixed_op(seed: u64) -> Result<GradCase> {
    let mut store = ParamStore::new();
    let mut r = rng(seed, 21);
    let cell = MixedCell::new(&mut store, &mut r, "cell", 1, 2)?;
    jitter_gamma(&mut store, &mut r);
    let a = store.add("alpha", Tensor::randn(&[2, OperatorKind::COUNT], 1.0, &mut r), ParamGroup::Arch)?;
    let x0 = randn_param(&mut store, &mut r, "x0", &[1, 2, 8, 8])?;
    let x1 = randn_param(&mut store, &mut r, "x1", &[1, 2, 8, 8])?;
    check("mixed_op", &mut store, seed, |ctx| {
        let av = ctx.param(a);
        let alpha = ctx.tape.softmax_groups(av, OperatorKind::COUNT, None)?;
        let inputs = [ctx.param(x0), ctx.param(x1)];
        let mut cache = [None, None];
        Ok(cell.mixed_op(ctx, 0, &inputs, &mut cache, alpha)?.expect("dense weights keep every term"))
    })
}

pub fn check_cell(seed: u64) -> Result<GradCase> {
    let mut store = ParamStore::new();
    let mut r = rng(seed, 22);
    let cell = MixedCell::new(&mut store, &mut r, "cell", 2, 2)?;
    jitter_gamma(&mut store, &mut r);
    let edges = crate::search_space::edge_count(2);
    let a = store.add("alpha", Tensor::randn(&[edges, OperatorKind::COUNT], 1.0, &mut r), ParamGroup::Arch)?;
    let p1 = randn_param(&mut store, &mut r, "prev1", &[1, 2, 8, 8])?;
    let p2 = randn_param(&mut store, &mut r, "prev2", &[1, 2, 8, 8])?;
    check("cell_forward", &mut store, seed, |ctx| {
        let av = ctx.param(a);
        let alpha = ctx.tape.softmax_groups(av, OperatorKind::COUNT, None)?;
        let (x1, x2) = (ctx.param(p1), ctx.param(p2));
        cell.forward(ctx, x1, x2, alpha)
    })
}

pub fn check_layer_update(seed: u64) -> Result<GradCase> {
    let mut worst: Option<GradCase> = None;
    for level in [0, 1] {
        let config = SearchConfig::new(2, 1, 2, 2);
        let mut store = ParamStore::new();
        let (a, b) = init_relaxation(&config, seed)?;
        let mut r = rng(seed, 23);
        let net = Supernet::new(&mut store, &mut r, &config, &a, &b)?;
        jitter_gamma(&mut store, &mut r);
        let la = store.find("arch.alpha").expect("registered by the supernet");
        *store.get_mut(la) = Tensor::randn(&[config.num_edges(), OperatorKind::COUNT], 1.0, &mut r);
        let lb = store.find("arch.beta").expect("registered by the supernet");
        *store.get_mut(lb) = Tensor::randn(&[2, config.levels(), 3], 1.0, &mut r);
        let h0 = randn_param(&mut store, &mut r, "h0", &[1, 2, 8, 8])?;
        let h4 = randn_param(&mut store, &mut r, "h1.s4", &[1, 2, 8, 8])?;
        let h8 = randn_param(&mut store, &mut r, "h1.s8", &[1, 4, 4, 4])?;
        let case = check("layer_update", &mut store, seed, |ctx| {
            let w = net.arch_weights(ctx)?;
            let stem_rate2 = ctx.input(Tensor::zeros(&[1, 1, 16, 16]));
            let grid = HiddenStateGrid {
                stem_rate2,
                states: vec![
                    vec![Some(ctx.param(h0)), None, None, None],
                    vec![Some(ctx.param(h4)), Some(ctx.param(h8)), None, None],
                ],
            };
            Ok(net.layer_update(ctx, &grid, 2, level, &w)?.expect("live state"))
        })?;
        worst = match worst {
            Some(w) if w.report.max_rel_error >= case.report.max_rel_error => Some(w),
            _ => Some(case),
        };
    }
    Ok(worst.expect("two levels checked"))
}

pub fn check_fpn(seed: u64) -> Result<GradCase> {
    let mut store = ParamStore::new();
    let mut r = rng(seed, 30);
    let fpn = Fpn::new(&mut store, &mut r, &BTreeMap::from([(4, 4), (8, 4)]), 4)?;
    jitter_gamma(&mut store, &mut r);
    let t4 = Tensor::randn(&[1, 4, 8, 8], 1.0, &mut r);
    let t8 = Tensor::randn(&[1, 4, 4, 4], 1.0, &mut r);
    check("fpn", &mut store, seed, |ctx| {
        let taps = BTreeMap::from([(4, ctx.input(t4.clone())), (8, ctx.input(t8.clone()))]);
        let out = fpn.forward(ctx, &taps)?;
        let up = resize_bilinear(&mut ctx.tape, out[&8], 8, 8)?;
        ctx.tape.add(out[&4], up)
    })
}

pub fn check_fusion(seed: u64) -> Result<GradCase> {
    let mut store = ParamStore::new();
    let mut r = rng(seed, 31);
    let fusion = FeatureFusion::new(&mut store, &mut r, &[4, 8, 16], 4)?;
    jitter_gamma(&mut store, &mut r);
    let levels = [
        (4, Tensor::randn(&[1, 4, 8, 8], 1.0, &mut r)),
        (8, Tensor::randn(&[1, 4, 4, 4], 1.0, &mut r)),
        (16, Tensor::randn(&[1, 4, 2, 2], 1.0, &mut r)),
    ];
    check("fusion", &mut store, seed, |ctx| {
        let m: BTreeMap<usize, Var> = levels.iter().map(|(s, t)| (*s, ctx.input(t.clone()))).collect();
        fusion.forward(ctx, &m, (8, 8))
    })
}

pub fn check_aspp(seed: u64) -> Result<GradCase> {
    let mut store = ParamStore::new();
    let mut r = rng(seed, 32);
    let aspp = Aspp::new(&mut store, &mut r, 4, 4, 32)?;
    jitter_gamma(&mut store, &mut r);
    // two samples, so the pooled branch is not a per-channel constant to BN
    let x = Tensor::randn(&[2, 4, 4, 4], 1.0, &mut r);
    check("aspp", &mut store, seed, |ctx| {
        let xv = ctx.input(x.clone());
        aspp.forward(ctx, xv)
    })
}

pub fn check_aggregation(seed: u64) -> Result<GradCase> {
    let mut store = ParamStore::new();
    let mut r = rng(seed, 33);
    let head = SemanticAggregation::new(&mut store, &mut r, 4, 3, Combine::Concat)?;
    jitter_gamma(&mut store, &mut r);
    let f = Tensor::randn(&[1, 4, 4, 4], 1.0, &mut r);
    let a = Tensor::randn(&[1, 4, 2, 2], 1.0, &mut r);
    check("aggregation", &mut store, seed, |ctx| {
        let (fv, av) = (ctx.input(f.clone()), ctx.input(a.clone()));
        head.forward(ctx, fv, av, (8, 8))
    })
}

/// Every case in order: the eight candidate operators, then stem, mixed
/// operator, cell, layer update and the four decoder heads.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCase>> {
    let mut out = Vec::new();
    for kind in OperatorKind::ALL {
        out.push(check_operator(kind, seed)?);
    }
    out.push(check_stem(seed)?);
    out.push(check_mixed_op(seed)?);
    out.push(check_cell(seed)?);
    out.push(check_layer_update(seed)?);
    out.push(check_fpn(seed)?);
    out.push(check_fusion(seed)?);
    out.push(check_aspp(seed)?);
    out.push(check_aggregation(seed)?);
    Ok(out)
}
