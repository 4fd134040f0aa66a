//! The continuously relaxed network searched over: stem, mixed operators,
//! mixed cells, the β-weighted layer update and a summed multi-scale head.
//!
//! Every trellis edge `(l, s ← src)` owns its own transition adapter and
//! cell. Parameter names are shared with the discrete encoder so trained
//! weights transfer by name.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::functional::{self, Conv2dOpts};
use crate::nn::{Conv2d, ConvBn, Ctx, OpInstance, OperatorKind};
use crate::search_space::{AlphaParams, BetaParams, CellGenotype, PathGenotype, SearchConfig, STEM_RATE};
use crate::tensor::{ParamGroup, ParamId, ParamStore, Scalar, Tensor, Var};

/// Two stride-2 3×3 conv + BN + ReLU layers: rate 2 with `B·F/2`
/// channels, then rate 4 with `B·F` channels.
#[derive(Debug, Clone)]
pub struct Stem {
    pub conv1: ConvBn,
    pub conv2: ConvBn,
}

impl Stem {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, config: &SearchConfig) -> Result<Self> {
        let s2 = Conv2dOpts {
            stride: 2,
            ..Default::default()
        };
        let c2 = config.channels_at_rate(2);
        let c4 = config.channels_at_rate(STEM_RATE);
        Ok(Stem {
            conv1: ConvBn::new(store, rng, "stem.conv1", 3, c2, 3, s2, true)?,
            conv2: ConvBn::new(store, rng, "stem.conv2", c2, c4, 3, s2, true)?,
        })
    }

    /// Returns `(H^{-1} at rate 2, H^0 at rate 4)`.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, image: Var) -> Result<(Var, Var)> {
        let (_, c, h, w) = ctx.value(image).dims4()?;
        if c != 3 {
            return Err(Error::shape(format!("stem expects 3 input channels, got {c}")));
        }
        if h == 0 || w == 0 {
            return Err(Error::shape("empty input image"));
        }
        let h1 = self.conv1.forward(ctx, image)?;
        let h0 = self.conv2.forward(ctx, h1)?;
        Ok((h1, h0))
    }

    pub fn num_params(&self) -> usize {
        self.conv1.num_params() + self.conv2.num_params()
    }
}

/// Resolution transition between consecutive layers.
#[derive(Debug, Clone)]
pub enum Adapter {
    Identity,
    /// 3×3 stride-2 conv + BN.
    Down(ConvBn),
    /// Bilinear ×2, then 1×1 conv + BN.
    Up(ConvBn),
}

impl Adapter {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        config: &SearchConfig,
        from_rate: usize,
        to_rate: usize,
    ) -> Result<Self> {
        let (cin, cout) = (config.channels_at_rate(from_rate), config.channels_at_rate(to_rate));
        if to_rate == from_rate {
            Ok(Adapter::Identity)
        } else if to_rate == 2 * from_rate {
            let opts = Conv2dOpts {
                stride: 2,
                ..Default::default()
            };
            Ok(Adapter::Down(ConvBn::new(store, rng, name, cin, cout, 3, opts, false)?))
        } else if 2 * to_rate == from_rate {
            Ok(Adapter::Up(ConvBn::new(store, rng, name, cin, cout, 1, Conv2dOpts::default(), false)?))
        } else {
            Err(Error::invalid(format!("no transition from rate {from_rate} to {to_rate}")))
        }
    }

    /// Maps `x` onto the target level, whose extent is `target`. Upsampling
    /// resizes to `target`, which is exactly ×2 for extents divisible by 2.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var, target: (usize, usize)) -> Result<Var> {
        let y = match self {
            Adapter::Identity => x,
            Adapter::Down(cb) => cb.forward(ctx, x)?,
            Adapter::Up(cb) => {
                let up = functional::resize_bilinear(&mut ctx.tape, x, target.0, target.1)?;
                cb.forward(ctx, up)?
            }
        };
        let (_, _, h, w) = ctx.value(y).dims4()?;
        if (h, w) != target {
            return Err(Error::shape(format!("transition produced {h}x{w}, expected {}x{}", target.0, target.1)));
        }
        Ok(y)
    }

    pub fn num_params(&self) -> usize {
        match self {
            Adapter::Identity => 0,
            Adapter::Down(cb) | Adapter::Up(cb) => cb.num_params(),
        }
    }
}

/// Chain of down adapters taking the rate-2 stem output to the first
/// layer's rate; it stands in for `H^{l−2}` at layer 1.
#[derive(Debug, Clone)]
pub struct Prev2Chain {
    pub steps: Vec<Adapter>,
}

impl Prev2Chain {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, config: &SearchConfig, to_rate: usize) -> Result<Self> {
        let mut steps = Vec::new();
        let mut rate = 2;
        while rate < to_rate {
            steps.push(Adapter::new(
                store,
                rng,
                &format!("prev2.s{to_rate}.d{}", steps.len()),
                config,
                rate,
                2 * rate,
            )?);
            rate *= 2;
        }
        Ok(Prev2Chain { steps })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut y = x;
        for s in &self.steps {
            let (_, _, h, w) = ctx.value(y).dims4()?;
            y = s.forward(ctx, y, (h.div_ceil(2), w.div_ceil(2)))?;
        }
        Ok(y)
    }

    pub fn num_params(&self) -> usize {
        self.steps.iter().map(Adapter::num_params).sum()
    }
}

/// Spatial extent `level` halvings below `base`, each a stride-2
/// convolution with ceiling rounding.
pub fn level_extent(base: (usize, usize), level: usize) -> (usize, usize) {
    let (mut h, mut w) = base;
    for _ in 0..level {
        h = h.div_ceil(2);
        w = w.div_ceil(2);
    }
    (h, w)
}

/// Parameter-name prefix of the trellis edge into `(layer, rate)` from
/// `from_rate`.
pub fn edge_prefix(layer: usize, rate: usize, from_rate: usize) -> String {
    format!("node.l{layer}.s{rate}.from{from_rate}")
}

pub fn op_name(cell_prefix: &str, block: usize, slot: usize, kind: OperatorKind) -> String {
    format!("{cell_prefix}.b{block}.in{slot}.{}", kind.name())
}

fn zeros_like<T: Scalar>(ctx: &mut Ctx<'_, T>, like: Var) -> Var {
    let shape = ctx.value(like).shape().to_vec();
    ctx.tape.constant(Tensor::zeros(&shape))
}

/// Sum of the present terms, or an explicit zero tensor shaped like `like`.
fn sum_or_zeros<T: Scalar>(ctx: &mut Ctx<'_, T>, terms: &[Var], like: Var) -> Result<Var> {
    if terms.is_empty() {
        Ok(zeros_like(ctx, like))
    } else {
        ctx.tape.sum_n(terms)
    }
}

/// A cell where every (block, input slot) edge carries all candidate
/// operators, mixed by α.
#[derive(Debug, Clone)]
pub struct MixedCell {
    /// `ops[edge][k]` for every non-Null operator, in `OperatorKind` order.
    pub ops: Vec<Vec<OpInstance>>,
    pub blocks: usize,
}

impl MixedCell {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, prefix: &str, blocks: usize, channels: usize) -> Result<Self> {
        let mut ops = Vec::new();
        for i in 0..blocks {
            for j in 0..i + 2 {
                let mut edge = Vec::new();
                for kind in OperatorKind::ALL {
                    if kind != OperatorKind::Null {
                        edge.push(OpInstance::new(store, rng, &op_name(prefix, i, j, kind), kind, channels)?);
                    }
                }
                ops.push(edge);
            }
        }
        Ok(MixedCell { ops, blocks })
    }

    /// One block: `H_i = Σ_in Σ_k α^k_{in→i}·O_k(in)`. Terms with weight
    /// exactly zero (and the Null operator) are skipped; a block with no
    /// remaining term returns `None`, meaning zero.
    pub fn mixed_op<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        block: usize,
        inputs: &[Var],
        relu_cache: &mut [Option<Var>],
        alpha: Var,
    ) -> Result<Option<Var>> {
        if inputs.len() != block + 2 {
            return Err(Error::shape(format!("block {block} takes {} inputs, got {}", block + 2, inputs.len())));
        }
        let shape = ctx.value(inputs[0]).shape().to_vec();
        for &x in inputs {
            if ctx.value(x).shape() != shape.as_slice() {
                return Err(Error::shape(format!("mixed op inputs {:?} vs {shape:?}", ctx.value(x).shape())));
            }
        }
        let base = crate::search_space::edge_count(block);
        let mut terms = Vec::new();
        for (j, &x) in inputs.iter().enumerate() {
            let edge = base + j;
            for op in &self.ops[edge] {
                let idx = edge * OperatorKind::COUNT + op.kind.index();
                if ctx.value(alpha).data()[idx] == T::zero() {
                    continue;
                }
                if let Some(y) = op.forward_cached(ctx, x, &mut relu_cache[j])? {
                    terms.push((idx, y));
                }
            }
        }
        if terms.is_empty() {
            return Ok(None);
        }
        ctx.tape.mix(alpha, &terms).map(Some)
    }

    /// `cell(H^{l−1}, H^{l−2}, α)`: blocks in order over the growing input
    /// set, output is the sum of block outputs.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, prev1: Var, prev2: Var, alpha: Var) -> Result<Var> {
        if ctx.value(prev1).shape() != ctx.value(prev2).shape() {
            return Err(Error::shape(format!(
                "cell inputs {:?} vs {:?}",
                ctx.value(prev1).shape(),
                ctx.value(prev2).shape()
            )));
        }
        let mut states: Vec<Option<Var>> = vec![Some(prev2), Some(prev1)];
        let mut relu: Vec<Option<Var>> = vec![None, None];
        let mut outputs = Vec::new();
        for i in 0..self.blocks {
            let inputs: Vec<Var> = states
                .iter()
                .map(|s| s.unwrap_or_else(|| zeros_like(ctx, prev1)))
                .collect();
            let h = self.mixed_op(ctx, i, &inputs, &mut relu, alpha)?;
            outputs.extend(h);
            states.push(h);
            relu.push(None);
        }
        sum_or_zeros(ctx, &outputs, prev1)
    }
}

#[derive(Debug, Clone)]
struct Branch {
    level: usize,
    src: usize,
    adapter: Adapter,
    cell: MixedCell,
}

/// Hidden states `^sH^l` indexed `[l][level]`, `l = 0` being the stem.
/// `None` marks a state that is unreachable or carries zero weight.
#[derive(Debug, Clone)]
pub struct HiddenStateGrid {
    pub stem_rate2: Var,
    pub states: Vec<Vec<Option<Var>>>,
}

/// Normalized architecture weights on the tape: α flat `(edges, 8)` and β
/// flat `(L, levels, 3)`.
#[derive(Debug, Clone, Copy)]
pub struct ArchWeights {
    pub alpha: Var,
    pub beta: Var,
}

#[derive(Debug, Clone)]
pub struct Supernet {
    pub config: SearchConfig,
    pub stem: Stem,
    prev2: Vec<Option<Prev2Chain>>,
    /// Branches for each layer `l ≥ 1` at index `l − 1`.
    branches: Vec<Vec<Branch>>,
    head: Vec<Conv2d>,
    pub alpha: ParamId,
    pub beta: ParamId,
}

impl Supernet {
    /// Registers all weights in `store` and the architecture logits under
    /// `arch.alpha` / `arch.beta`.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        config: &SearchConfig,
        alpha: &AlphaParams,
        beta: &BetaParams,
    ) -> Result<Self> {
        config.validate()?;
        alpha.check()?;
        beta.check(config)?;
        if alpha.blocks != config.blocks {
            return Err(Error::shape("alpha block count does not match the configuration"));
        }
        let stem = Stem::new(store, rng, config)?;
        let mut prev2 = Vec::new();
        for lv in 0..config.levels() {
            prev2.push(if config.reachable(1, lv) {
                Some(Prev2Chain::new(store, rng, config, config.rate(lv))?)
            } else {
                None
            });
        }
        let mut branches = Vec::new();
        for l in 1..=config.layers {
            let mut layer = Vec::new();
            for lv in 0..config.levels() {
                for src in 0..3 {
                    if !config.beta_live(l, lv, src) {
                        continue;
                    }
                    let (rate, from) = (config.rate(lv), config.rate(lv + src - 1));
                    let prefix = edge_prefix(l, rate, from);
                    let adapter = Adapter::new(store, rng, &format!("{prefix}.adapt"), config, from, rate)?;
                    let cell = MixedCell::new(store, rng, &format!("{prefix}.cell"), config.blocks, config.channels_at_rate(rate))?;
                    layer.push(Branch {
                        level: lv,
                        src,
                        adapter,
                        cell,
                    });
                }
            }
            branches.push(layer);
        }
        let mut head = Vec::new();
        for lv in 0..config.levels() {
            let rate = config.rate(lv);
            head.push(Conv2d::new(
                store,
                rng,
                &format!("head.s{rate}"),
                config.channels_at_rate(rate),
                config.num_classes,
                1,
                Conv2dOpts::default(),
                true,
            )?);
        }
        let to_t = |v: &[f64]| v.iter().map(|&x| T::of(x)).collect::<Vec<T>>();
        let alpha_id = store.add(
            "arch.alpha",
            Tensor::new(vec![config.num_edges(), OperatorKind::COUNT], to_t(&alpha.logits))?,
            ParamGroup::Arch,
        )?;
        let beta_id = store.add(
            "arch.beta",
            Tensor::new(vec![config.layers, config.levels(), 3], to_t(&beta.logits))?,
            ParamGroup::Arch,
        )?;
        Ok(Supernet {
            config: config.clone(),
            stem,
            prev2,
            branches,
            head,
            alpha: alpha_id,
            beta: beta_id,
        })
    }

    /// Softmax of the stored logits, recorded on the tape.
    pub fn arch_weights<T: Scalar>(&self, ctx: &mut Ctx<'_, T>) -> Result<ArchWeights> {
        let a = ctx.param(self.alpha);
        let b = ctx.param(self.beta);
        let mask = self.config.beta_mask();
        Ok(ArchWeights {
            alpha: ctx.tape.softmax_groups(a, OperatorKind::COUNT, None)?,
            beta: ctx.tape.softmax_groups(b, 3, Some(&mask))?,
        })
    }

    pub fn alpha_params<T: Scalar>(&self, store: &ParamStore<T>) -> AlphaParams {
        AlphaParams {
            blocks: self.config.blocks,
            logits: store.get(self.alpha).data().iter().map(|v| v.f64()).collect(),
        }
    }

    pub fn beta_params<T: Scalar>(&self, store: &ParamStore<T>) -> BetaParams {
        BetaParams {
            layers: self.config.layers,
            levels: self.config.levels(),
            logits: store.get(self.beta).data().iter().map(|v| v.f64()).collect(),
        }
    }

    /// One trellis state: the β-weighted sum over live incoming
    /// branches of `cell(adapt(^{src}H^{l−1}), ^sH^{l−2})`. When
    /// `^sH^{l−2}` is absent the branch's adapted first input stands in.
    pub fn layer_update<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        grid: &HiddenStateGrid,
        layer: usize,
        level: usize,
        w: &ArchWeights,
    ) -> Result<Option<Var>> {
        if layer == 0 || layer > self.config.layers || grid.states.len() < layer {
            return Err(Error::invalid(format!("layer {layer} cannot be updated from this grid")));
        }
        let base = grid.states[0][0].ok_or_else(|| Error::invalid("grid has no stem output"))?;
        let (_, _, bh, bw) = ctx.value(base).dims4()?;
        let target = level_extent((bh, bw), level);
        let mut terms = Vec::new();
        let mut any_source = false;
        for br in self.branches[layer - 1].iter().filter(|b| b.level == level) {
            any_source = true;
            let from = level + br.src - 1;
            let Some(x) = grid.states[layer - 1][from] else {
                continue;
            };
            let bidx = self.config.beta_index(layer, level, br.src);
            if ctx.value(w.beta).data()[bidx] == T::zero() {
                continue;
            }
            let prev1 = br.adapter.forward(ctx, x, target)?;
            let prev2 = if layer == 1 {
                let chain = self.prev2[level].as_ref().expect("layer-1 chain exists for reachable levels");
                chain.forward(ctx, grid.stem_rate2)?
            } else {
                grid.states[layer - 2][level].unwrap_or(prev1)
            };
            let y = br.cell.forward(ctx, prev1, prev2, w.alpha)?;
            terms.push((bidx, y));
        }
        if !any_source && self.config.reachable(layer, level) {
            return Err(Error::invalid(format!(
                "state ({layer}, {}) has no existing source",
                self.config.rate(level)
            )));
        }
        if terms.is_empty() {
            return Ok(None);
        }
        ctx.tape.mix(w.beta, &terms).map(Some)
    }

    /// Stem plus every reachable state for `l = 1..L`.
    pub fn encode<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, image: Var, w: &ArchWeights) -> Result<HiddenStateGrid> {
        let (h1, h0) = self.stem.forward(ctx, image)?;
        let levels = self.config.levels();
        let mut first = vec![None; levels];
        first[0] = Some(h0);
        let mut grid = HiddenStateGrid {
            stem_rate2: h1,
            states: vec![first],
        };
        for l in 1..=self.config.layers {
            let mut row = vec![None; levels];
            for (lv, slot) in row.iter_mut().enumerate() {
                if self.config.reachable(l, lv) {
                    *slot = self.layer_update(ctx, &grid, l, lv, w)?;
                }
            }
            grid.states.push(row);
        }
        Ok(grid)
    }

    /// Per-level 1×1 classifiers on the final layer, upsampled to the
    /// input size and summed.
    pub fn head<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, last: &[Option<Var>], out_hw: (usize, usize)) -> Result<Var> {
        let mut terms = Vec::new();
        for (lv, state) in last.iter().enumerate() {
            if let Some(x) = *state {
                let y = self.head[lv].forward(ctx, x)?;
                terms.push(functional::resize_bilinear(&mut ctx.tape, y, out_hw.0, out_hw.1)?);
            }
        }
        if terms.is_empty() {
            return Err(Error::invalid("no final-layer state carries weight"));
        }
        ctx.tape.sum_n(&terms)
    }

    /// Logits `(N, num_classes, H, W)`.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, image: Var, w: &ArchWeights) -> Result<Var> {
        let (_, _, h, wd) = ctx.value(image).dims4()?;
        let grid = self.encode(ctx, image, w)?;
        let last = grid.states.last().expect("grid has the stem row");
        self.head(ctx, last, (h, wd))
    }
}

/// Normalized one-hot `(α, β)` selecting exactly the operators of `cell`
/// and the transitions of `path`; every other weight is zero.
pub fn planted_weights<T: Scalar>(
    config: &SearchConfig,
    cell: &CellGenotype,
    path: &PathGenotype,
) -> Result<(Tensor<T>, Tensor<T>)> {
    cell.validate(config.blocks)?;
    if let Some(v) = crate::search_space::validate_path(config, path).first() {
        return Err(Error::invalid(v.to_string()));
    }
    let mut alpha = Tensor::zeros(&[config.num_edges(), OperatorKind::COUNT]);
    for (i, b) in cell.blocks.iter().enumerate() {
        for (slot, kind) in [(b.input1, b.op1), (b.input2, b.op2)] {
            alpha.data_mut()[config.edge_index(i, slot) * OperatorKind::COUNT + kind.index()] = T::one();
        }
    }
    let mut beta = Tensor::zeros(&[config.layers, config.levels(), 3]);
    let mut from = 0;
    for (i, &rate) in path.path.iter().enumerate() {
        let level = config.level_of(rate)?;
        beta.data_mut()[config.beta_index(i + 1, level, from + 1 - level)] = T::one();
        from = level;
    }
    Ok((alpha, beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::{gradcheck, rng};
    use crate::nn::Trainable;
    use crate::search_space::init_relaxation;

    fn planted_alpha(config: &SearchConfig, picks: &[(usize, usize, OperatorKind)]) -> Tensor<f64> {
        let mut a = Tensor::zeros(&[config.num_edges(), OperatorKind::COUNT]);
        for &(block, slot, kind) in picks {
            a.data_mut()[config.edge_index(block, slot) * 8 + kind.index()] = 1.0;
        }
        a
    }

    fn small_store(config: &SearchConfig, seed: u64) -> (ParamStore<f64>, Supernet) {
        let mut store = ParamStore::new();
        let (a, b) = init_relaxation(config, seed).unwrap();
        let net = Supernet::new(&mut store, &mut rng(seed), config, &a, &b).unwrap();
        (store, net)
    }

    #[test]
    fn stem_shapes() {
        let config = SearchConfig::new(2, 3, 4, 2);
        let (store, net) = small_store(&config, 0);
        let mut ctx = Ctx::eval(&store);
        let x = ctx.input(Tensor::randn(&[1, 3, 64, 64], 1.0, &mut rng(1)));
        let (h1, h0) = net.stem.forward(&mut ctx, x).unwrap();
        assert_eq!(ctx.value(h1).shape(), &[1, 6, 32, 32]);
        assert_eq!(ctx.value(h0).shape(), &[1, 12, 16, 16]);
        let bad = ctx.input(Tensor::zeros(&[1, 2, 64, 64]));
        assert!(net.stem.forward(&mut ctx, bad).is_err());
        let odd = ctx.input(Tensor::zeros(&[1, 3, 50, 64]));
        let (_, h0) = net.stem.forward(&mut ctx, odd).unwrap();
        assert_eq!(ctx.value(h0).shape(), &[1, 12, 13, 16]);
        let z = ctx.input(Tensor::zeros(&[1, 3, 32, 32]));
        let (_, h0) = net.stem.forward(&mut ctx, z).unwrap();
        assert!(ctx.value(h0).all_finite());
    }

    fn mixed_fixture(seed: u64) -> (ParamStore<f64>, MixedCell, Tensor<f64>, Tensor<f64>) {
        let mut store = ParamStore::new();
        let mut r = rng(seed);
        let cell = MixedCell::new(&mut store, &mut r, "cell", 2, 3).unwrap();
        let x0 = Tensor::randn(&[2, 3, 6, 6], 1.0, &mut r);
        let x1 = Tensor::randn(&[2, 3, 6, 6], 1.0, &mut r);
        (store, cell, x0, x1)
    }

    #[test]
    fn mixed_op_one_hot_cases() {
        let (store, cell, x0, x1) = mixed_fixture(0);
        let config = SearchConfig::new(1, 2, 1, 2);
        let mut ctx = Ctx::eval(&store);
        let (v0, v1) = (ctx.input(x0), ctx.input(x1.clone()));
        let a = ctx.input(planted_alpha(&config, &[(0, 1, OperatorKind::Skip)]));
        let y = cell.mixed_op(&mut ctx, 0, &[v0, v1], &mut [None, None], a).unwrap().unwrap();
        assert_eq!(ctx.value(y).data(), x1.data());
        let a = ctx.input(planted_alpha(&config, &[(0, 0, OperatorKind::Null)]));
        assert!(cell.mixed_op(&mut ctx, 0, &[v0, v1], &mut [None, None], a).unwrap().is_none());
    }

    #[test]
    fn mixed_op_matches_term_by_term_sum() {
        let (store, cell, x0, x1) = mixed_fixture(1);
        let mut ctx = Ctx::eval(&store);
        let (v0, v1) = (ctx.input(x0), ctx.input(x1));
        let logits = Tensor::randn(&[5, 8], 1.0, &mut rng(5));
        let lv = ctx.input(logits);
        let a = ctx.tape.softmax_groups(lv, 8, None).unwrap();
        let y = cell.mixed_op(&mut ctx, 0, &[v0, v1], &mut [None, None], a).unwrap().unwrap();
        let got = ctx.value(y).clone();
        let aw = ctx.value(a).clone();
        let mut want = Tensor::zeros(got.shape());
        for (j, &x) in [v0, v1].iter().enumerate() {
            for kind in OperatorKind::ALL {
                let o = cell.ops[j].iter().find(|o| o.kind == kind);
                let term = match o {
                    Some(op) => op.forward(&mut ctx, x).unwrap(),
                    None => continue,
                };
                let w = aw.data()[j * 8 + kind.index()];
                let t = ctx.value(term).map(|v| v * w);
                want.add_assign(&t).unwrap();
            }
        }
        assert!(got.max_abs_diff(&want).unwrap() < 1e-5);
    }

    #[test]
    fn cell_identity_and_null() {
        let (store, cell, x0, x1) = mixed_fixture(2);
        let config = SearchConfig::new(1, 2, 1, 2);
        let mut store1 = ParamStore::<f64>::new();
        let cell1 = MixedCell::new(&mut store1, &mut rng(0), "c", 1, 3).unwrap();
        let mut ctx = Ctx::eval(&store1);
        let (v0, v1) = (ctx.input(x0.clone()), ctx.input(x1.clone()));
        // two unit-weight branches, both Skip on H^{l−1}
        let a2 = {
            let mut t = Tensor::zeros(&[2, 8]);
            t.data_mut()[8 + OperatorKind::Skip.index()] = 2.0;
            t
        };
        let av = ctx.input(a2);
        let y = cell1.forward(&mut ctx, v1, v0, av).unwrap();
        let want = x1.map(|v| 2.0 * v);
        assert!(ctx.value(y).max_abs_diff(&want).unwrap() < 1e-12);

        let mut ctx = Ctx::eval(&store);
        let (v0, v1) = (ctx.input(x0), ctx.input(x1));
        let null: Vec<_> = (0..2).flat_map(|i| (0..i + 2).map(move |j| (i, j, OperatorKind::Null))).collect();
        let av = ctx.input(planted_alpha(&config, &null));
        let y = cell.forward(&mut ctx, v1, v0, av).unwrap();
        assert!(ctx.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cell_matches_unrolled_dag() {
        let (store, cell, x0, x1) = mixed_fixture(3);
        let mut ctx = Ctx::new(&store, true, Trainable::Nothing);
        let (v0, v1) = (ctx.input(x0), ctx.input(x1));
        let lv = ctx.input(Tensor::randn(&[5, 8], 1.0, &mut rng(8)));
        let a = ctx.tape.softmax_groups(lv, 8, None).unwrap();
        let y = cell.forward(&mut ctx, v1, v0, a).unwrap();
        let got = ctx.value(y).clone();
        let aw = ctx.value(a).clone();
        let term = |ctx: &mut Ctx<'_, f64>, edge: usize, x: Var| {
            let mut acc = Tensor::zeros(ctx.value(x).shape());
            for op in &cell.ops[edge] {
                let t = op.forward(ctx, x).unwrap();
                let w = aw.data()[edge * 8 + op.kind.index()];
                acc.add_assign(&ctx.value(t).map(|v| v * w)).unwrap();
            }
            acc
        };
        let mut h1 = term(&mut ctx, 0, v0);
        h1.add_assign(&term(&mut ctx, 1, v1)).unwrap();
        let h1v = ctx.input(h1.clone());
        let mut h2 = term(&mut ctx, 2, v0);
        h2.add_assign(&term(&mut ctx, 3, v1)).unwrap();
        h2.add_assign(&term(&mut ctx, 4, h1v)).unwrap();
        h2.add_assign(&h1).unwrap();
        assert!(got.max_abs_diff(&h2).unwrap() < 1e-5);
    }

    #[test]
    fn forward_shapes_and_grid_contract() {
        let config = SearchConfig::new(4, 2, 2, 3);
        let (store, net) = small_store(&config, 4);
        let mut ctx = Ctx::new(&store, true, Trainable::Nothing);
        let w = net.arch_weights(&mut ctx).unwrap();
        let x = ctx.input(Tensor::randn(&[2, 3, 64, 64], 1.0, &mut rng(2)));
        let grid = net.encode(&mut ctx, x, &w).unwrap();
        for (l, row) in grid.states.iter().enumerate() {
            for (lv, s) in row.iter().enumerate() {
                assert_eq!(s.is_some(), config.reachable(l, lv), "({l}, {lv})");
                if let Some(v) = s {
                    let rate = config.rate(lv);
                    let shape = [2, config.channels_for(rate).unwrap(), 64 / rate, 64 / rate];
                    assert_eq!(ctx.value(*v).shape(), shape);
                }
            }
        }
        let logits = net.head(&mut ctx, grid.states.last().unwrap(), (64, 64)).unwrap();
        assert_eq!(ctx.value(logits).shape(), &[2, 3, 64, 64]);
        let p = functional::softmax_channels(&mut ctx.tape, logits).unwrap();
        let p = ctx.value(p);
        for px in 0..64 * 64 {
            let s: f64 = (0..3).map(|c| p.data()[c * 4096 + px]).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    fn beta_one_hot(config: &SearchConfig, live: &[(usize, usize, usize)]) -> Tensor<f64> {
        let mut b = Tensor::zeros(&[config.layers, config.levels(), 3]);
        for &(l, lv, src) in live {
            b.data_mut()[config.beta_index(l, lv, src)] = 1.0;
        }
        b
    }

    #[test]
    fn layer_update_identity_branch_doubles() {
        let config = SearchConfig::new(3, 1, 2, 2);
        let (store, net) = small_store(&config, 5);
        let mut ctx = Ctx::eval(&store);
        let x = ctx.input(Tensor::randn(&[1, 3, 32, 32], 1.0, &mut rng(3)));
        let mut a = Tensor::zeros(&[2, 8]);
        a.data_mut()[8 + OperatorKind::Skip.index()] = 1.0;
        a.data_mut()[OperatorKind::Null.index()] = 1.0;
        let av = ctx.input(a);
        let beta = beta_one_hot(&config, &[(1, 0, 1), (2, 0, 1), (3, 0, 1)]);
        let w = ArchWeights {
            alpha: av,
            beta: ctx.input(beta),
        };
        // one Skip on H^{l−1} in a one-block cell gives H^{l−1}; Null adds nothing
        let grid = net.encode(&mut ctx, x, &w).unwrap();
        let h2 = ctx.value(grid.states[2][0].unwrap()).clone();
        let h3 = ctx.value(grid.states[3][0].unwrap()).clone();
        assert!(h3.max_abs_diff(&h2).unwrap() < 1e-12);

        let mut a2 = Tensor::zeros(&[2, 8]);
        a2.data_mut()[8 + OperatorKind::Skip.index()] = 2.0;
        let w2 = ArchWeights {
            alpha: ctx.input(a2),
            beta: w.beta,
        };
        let grid2 = net.encode(&mut ctx, x, &w2).unwrap();
        let h2 = ctx.value(grid2.states[2][0].unwrap()).clone();
        let h3 = net.layer_update(&mut ctx, &grid2, 3, 0, &w2).unwrap().unwrap();
        assert!(ctx.value(h3).max_abs_diff(&h2.map(|v| 2.0 * v)).unwrap() < 1e-12);
    }

    #[test]
    fn layer_one_boundary_has_single_branch() {
        let config = SearchConfig::new(2, 1, 2, 2);
        let (store, net) = small_store(&config, 6);
        let mut ctx = Ctx::eval(&store);
        let w = net.arch_weights(&mut ctx).unwrap();
        let beta = ctx.value(w.beta).clone();
        assert_eq!(beta.data()[config.beta_index(1, 1, 0)], 1.0);
        assert_eq!(net.branches[0].iter().filter(|b| b.level == 1).count(), 1);
    }

    #[test]
    fn layer_update_matches_three_term_sum() {
        let config = SearchConfig::new(3, 2, 2, 2);
        let (store, net) = small_store(&config, 7);
        let mut ctx = Ctx::new(&store, true, Trainable::Nothing);
        let lv = ctx.input(Tensor::randn(&[config.num_edges(), 8], 1.0, &mut rng(9)));
        let alpha = ctx.tape.softmax_groups(lv, 8, None).unwrap();
        let lb = ctx.input(Tensor::randn(&[3, 4, 3], 1.0, &mut rng(10)));
        let mask = config.beta_mask();
        let beta = ctx.tape.softmax_groups(lb, 3, Some(&mask)).unwrap();
        let w = ArchWeights { alpha, beta };
        let x = ctx.input(Tensor::randn(&[1, 3, 32, 32], 1.0, &mut rng(11)));
        let grid = net.encode(&mut ctx, x, &w).unwrap();
        let got = ctx.value(grid.states[3][1].unwrap()).clone();
        let bw = ctx.value(beta).clone();
        let mut want = Tensor::zeros(got.shape());
        for br in net.branches[2].iter().filter(|b| b.level == 1) {
            let src_state = grid.states[2][br.src].unwrap();
            let p1 = br.adapter.forward(&mut ctx, src_state, (4, 4)).unwrap();
            let p2 = grid.states[1][1].unwrap();
            let y = br.cell.forward(&mut ctx, p1, p2, alpha).unwrap();
            let wt = bw.data()[config.beta_index(3, 1, br.src)];
            want.add_assign(&ctx.value(y).map(|v| v * wt)).unwrap();
        }
        assert_eq!(net.branches[2].iter().filter(|b| b.level == 1).count(), 3);
        assert!(got.max_abs_diff(&want).unwrap() < 1e-5);
    }

    #[test]
    fn every_live_arch_logit_gets_gradient() {
        let config = SearchConfig::new(3, 2, 2, 2);
        let mut store = ParamStore::<f64>::new();
        let (a, b) = init_relaxation(&config, 3).unwrap();
        let net = Supernet::new(&mut store, &mut rng(3), &config, &a, &b).unwrap();
        let mut ctx = Ctx::new(&store, true, Trainable::Group(ParamGroup::Arch));
        let w = net.arch_weights(&mut ctx).unwrap();
        let x = ctx.input(Tensor::randn(&[2, 3, 32, 32], 1.0, &mut rng(4)));
        let logits = net.forward(&mut ctx, x, &w).unwrap();
        let labels: Vec<u8> = (0..2 * 32 * 32).map(|i| (i % 7 % 2) as u8).collect();
        let ce = functional::softmax_cross_entropy(&mut ctx.tape, logits, &labels, 255).unwrap();
        let grads = ctx.finish().0.backward(ce.loss).unwrap();
        let ga = grads.param(net.alpha).unwrap();
        assert!(ga.data().iter().all(|&g| g != 0.0));
        let gb = grads.param(net.beta).unwrap();
        let mask = config.beta_mask();
        for l in 1..=3 {
            for lv in 0..4 {
                let live: Vec<usize> = (0..3).filter(|&s| mask[config.beta_index(l, lv, s)]).collect();
                for s in 0..3 {
                    let g = gb.data()[config.beta_index(l, lv, s)];
                    if live.len() >= 2 && live.contains(&s) {
                        assert!(g != 0.0, "beta ({l}, {lv}, {s})");
                    } else {
                        assert_eq!(g, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn fits_one_separable_batch() {
        let config = SearchConfig::new(2, 1, 2, 2);
        let mut store = ParamStore::<f32>::new();
        let (a, b) = init_relaxation(&config, 0).unwrap();
        let net = Supernet::new(&mut store, &mut rng(0), &config, &a, &b).unwrap();
        let mut img = Tensor::zeros(&[2, 3, 32, 32]);
        let mut labels = vec![0u8; 2 * 32 * 32];
        for i in 0..2 * 32 * 32 {
            let (n, x) = (i / 1024, i % 32);
            let cls = (x >= 16) as usize;
            labels[i] = cls as u8;
            for c in 0..3 {
                img.data_mut()[(n * 3 + c) * 1024 + i % 1024] = if cls == 1 { 0.9 } else { 0.1 };
            }
        }
        let ids = store.ids_in(ParamGroup::Weight);
        let mut opt = crate::tensor::Sgd::new(crate::tensor::SgdConfig {
            momentum: 0.9,
            weight_decay: 0.0,
        });
        let mut losses = Vec::new();
        for _ in 0..50 {
            let mut ctx = Ctx::new(&store, true, Trainable::Group(ParamGroup::Weight));
            let w = net.arch_weights(&mut ctx).unwrap();
            let x = ctx.input(img.clone());
            let logits = net.forward(&mut ctx, x, &w).unwrap();
            let ce = functional::softmax_cross_entropy(&mut ctx.tape, logits, &labels, 255).unwrap();
            losses.push(ctx.value(ce.loss).item());
            let (tape, bn) = ctx.finish();
            let g = tape.backward(ce.loss).unwrap();
            crate::nn::apply_bn_updates(&mut store, &bn, 0.1).unwrap();
            opt.step(&mut store, &g, &ids, 0.05).unwrap();
        }
        assert!(losses[49] < 0.5 * losses[0], "{losses:?}");
    }

    #[test]
    fn gradcheck_stem() {
        let config = SearchConfig::new(1, 1, 4, 2);
        let mut store = ParamStore::<f64>::new();
        let mut r = rng(1);
        let stem = Stem::new(&mut store, &mut r, &config).unwrap();
        let img = Tensor::randn(&[1, 3, 32, 32], 1.0, &mut r);
        let rep = gradcheck(&mut store, 1, |ctx| {
            let x = ctx.input(img.clone());
            Ok(stem.forward(ctx, x)?.1)
        });
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn gradcheck_layer_update() {
        let config = SearchConfig::new(2, 1, 2, 2);
        for level in [0, 1] {
            let mut store = ParamStore::<f64>::new();
            let (a, b) = init_relaxation(&config, 2).unwrap();
            let mut r = rng(2);
            let net = Supernet::new(&mut store, &mut r, &config, &a, &b).unwrap();
            let la = store.find("arch.alpha").unwrap();
            *store.get_mut(la) = Tensor::randn(&[config.num_edges(), 8], 1.0, &mut r);
            let lb = store.find("arch.beta").unwrap();
            *store.get_mut(lb) = Tensor::randn(&[2, 4, 3], 1.0, &mut r);
            let h0 = store.add("h0", Tensor::randn(&[2, 2, 8, 8], 1.0, &mut r), ParamGroup::Weight).unwrap();
            let h4 = store.add("h1.s4", Tensor::randn(&[2, 2, 8, 8], 1.0, &mut r), ParamGroup::Weight).unwrap();
            let h8 = store.add("h1.s8", Tensor::randn(&[2, 4, 4, 4], 1.0, &mut r), ParamGroup::Weight).unwrap();
            let rep = gradcheck(&mut store, 2, |ctx| {
                let w = net.arch_weights(ctx)?;
                let stem_rate2 = ctx.input(Tensor::zeros(&[2, 1, 16, 16]));
                let grid = HiddenStateGrid {
                    stem_rate2,
                    states: vec![
                        vec![Some(ctx.param(h0)), None, None, None],
                        vec![Some(ctx.param(h4)), Some(ctx.param(h8)), None, None],
                    ],
                };
                Ok(net.layer_update(ctx, &grid, 2, level, &w)?.unwrap())
            });
            assert!(rep.max_rel_error < 1e-4, "level {level}: {rep:?}");
        }
    }
}
