//! Discrete and relaxed descriptions of the two-level search space: cells
//! of `B` blocks and the `L`-layer resolution trellis.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::OperatorKind;

/// Downsample rate of the stem output that feeds the first layer.
pub const STEM_RATE: usize = 4;
/// Standard deviation of the initial architecture logits.
pub const INIT_SCALE: f64 = 1e-3;

fn default_resolutions() -> Vec<usize> {
    vec![4, 8, 16, 32]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchConfig {
    #[serde(rename = "L")]
    pub layers: usize,
    #[serde(rename = "B")]
    pub blocks: usize,
    #[serde(rename = "F")]
    pub multiplier: usize,
    pub num_classes: usize,
    #[serde(default = "default_resolutions", skip_serializing_if = "is_default_resolutions")]
    pub resolutions: Vec<usize>,
}

fn is_default_resolutions(r: &[usize]) -> bool {
    r == default_resolutions().as_slice()
}

impl SearchConfig {
    pub fn new(layers: usize, blocks: usize, multiplier: usize, num_classes: usize) -> Self {
        SearchConfig {
            layers,
            blocks,
            multiplier,
            num_classes,
            resolutions: default_resolutions(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.blocks == 0 || self.multiplier == 0 || self.num_classes == 0 {
            return Err(Error::invalid(format!("L, B, F and num_classes must be positive: {self:?}")));
        }
        if self.num_classes > 255 {
            return Err(Error::invalid("at most 255 classes fit 8-bit masks"));
        }
        let ok = !self.resolutions.is_empty()
            && self.resolutions.len() <= 4
            && self
                .resolutions
                .iter()
                .enumerate()
                .all(|(i, &s)| s == STEM_RATE << i);
        if !ok {
            return Err(Error::invalid(format!(
                "resolutions must be consecutive powers of two starting at 4, got {:?}",
                self.resolutions
            )));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.resolutions.len()
    }

    pub fn rate(&self, level: usize) -> usize {
        self.resolutions[level]
    }

    pub fn level_of(&self, rate: usize) -> Result<usize> {
        self.resolutions
            .iter()
            .position(|&s| s == rate)
            .ok_or_else(|| Error::invalid(format!("rate {rate} not in {:?}", self.resolutions)))
    }

    /// `B·F·s/4` channels at downsample rate `s`.
    pub fn channels_for(&self, rate: usize) -> Result<usize> {
        self.level_of(rate)?;
        Ok(self.channels_at_rate(rate))
    }

    /// The channel rule without the membership check; the stem's rate-2
    /// output uses it too.
    pub fn channels_at_rate(&self, rate: usize) -> usize {
        (self.blocks * self.multiplier * rate / STEM_RATE).max(1)
    }

    /// Layer `l` (0 = stem output) can hold level `level` only if
    /// `level ≤ l`.
    pub fn reachable(&self, layer: usize, level: usize) -> bool {
        level < self.levels() && level <= layer
    }

    /// Number of (block, input slot) edges: `Σ_{i=1..B} (i+1)`.
    pub fn num_edges(&self) -> usize {
        edge_count(self.blocks)
    }

    /// Flat edge index of (0-based block `i`, input slot `j`).
    pub fn edge_index(&self, block: usize, slot: usize) -> usize {
        edge_count(block) + slot
    }

    /// Whether β source `src` (0 = s/2, 1 = s, 2 = 2s) into (l, level) is
    /// a live trellis edge.
    pub fn beta_live(&self, layer: usize, level: usize, src: usize) -> bool {
        if layer == 0 || layer > self.layers || !self.reachable(layer, level) {
            return false;
        }
        match (level + src).checked_sub(1) {
            Some(from) => from < self.levels() && self.reachable(layer - 1, from),
            None => false,
        }
    }

    pub fn beta_index(&self, layer: usize, level: usize, src: usize) -> usize {
        ((layer - 1) * self.levels() + level) * 3 + src
    }

    pub fn beta_mask(&self) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.layers * self.levels() * 3);
        for l in 1..=self.layers {
            for lv in 0..self.levels() {
                for src in 0..3 {
                    mask.push(self.beta_live(l, lv, src));
                }
            }
        }
        mask
    }
}

/// `Σ_{i=1..b} (i+1) = b(b+3)/2`.
pub fn edge_count(blocks: usize) -> usize {
    blocks * (blocks + 3) / 2
}

/// One block: `(input1, input2, op1, op2)`. Input indices address
/// `0 = H^{l−2}`, `1 = H^{l−1}`, `2+j = ` output of block `j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "(usize, usize, OperatorKind, OperatorKind)", into = "(usize, usize, OperatorKind, OperatorKind)")]
pub struct BlockGenotype {
    pub input1: usize,
    pub input2: usize,
    pub op1: OperatorKind,
    pub op2: OperatorKind,
}

impl From<(usize, usize, OperatorKind, OperatorKind)> for BlockGenotype {
    fn from((input1, input2, op1, op2): (usize, usize, OperatorKind, OperatorKind)) -> Self {
        BlockGenotype { input1, input2, op1, op2 }
    }
}

impl From<BlockGenotype> for (usize, usize, OperatorKind, OperatorKind) {
    fn from(b: BlockGenotype) -> Self {
        (b.input1, b.input2, b.op1, b.op2)
    }
}

impl BlockGenotype {
    pub fn branches(&self) -> [(usize, OperatorKind); 2] {
        [(self.input1, self.op1), (self.input2, self.op2)]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CellGenotype {
    pub blocks: Vec<BlockGenotype>,
}

impl CellGenotype {
    pub fn validate(&self, blocks: usize) -> Result<()> {
        if self.blocks.len() != blocks {
            return Err(Error::invalid(format!(
                "cell has {} blocks, expected {blocks}",
                self.blocks.len()
            )));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            for input in [b.input1, b.input2] {
                if input >= i + 2 {
                    return Err(Error::invalid(format!(
                        "block {} reads input {input}, only {} available",
                        i + 1,
                        i + 2
                    )));
                }
            }
            if (b.input1, b.op1) == (b.input2, b.op2) {
                return Err(Error::invalid(format!("block {} repeats the branch ({}, {})", i + 1, b.input1, b.op1)));
            }
        }
        Ok(())
    }
}

/// A random valid cell without `none` branches.
pub fn random_cell(blocks: usize, rng: &mut impl Rng) -> CellGenotype {
    let ops = &OperatorKind::ALL[..OperatorKind::COUNT - 1];
    let blocks = (0..blocks)
        .map(|i| loop {
            let b = BlockGenotype {
                input1: rng.random_range(0..i + 2),
                input2: rng.random_range(0..i + 2),
                op1: ops[rng.random_range(0..ops.len())],
                op2: ops[rng.random_range(0..ops.len())],
            };
            if (b.input1, b.op1) != (b.input2, b.op2) {
                break b;
            }
        })
        .collect();
    CellGenotype { blocks }
}

/// A random walk over the trellis from the stem rate, one level step at most
/// per layer.
pub fn random_path(config: &SearchConfig, rng: &mut impl Rng) -> PathGenotype {
    let top = config.levels() - 1;
    let mut level = 0usize;
    let path = (0..config.layers)
        .map(|_| {
            let lo = level.saturating_sub(1);
            let hi = (level + 1).min(top);
            level = rng.random_range(lo..=hi);
            config.rate(level)
        })
        .collect();
    PathGenotype { path }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PathGenotype {
    pub path: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PathViolation {
    Length { expected: usize, got: usize },
    UnknownRate { layer: usize, rate: usize },
    Jump { layer: usize, from: usize, to: usize },
}

impl fmt::Display for PathViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PathViolation::Length { expected, got } => write!(f, "path has {got} layers, expected {expected}"),
            PathViolation::UnknownRate { layer, rate } => write!(f, "layer {layer}: rate {rate} is not a resolution"),
            PathViolation::Jump { layer, from, to } => {
                write!(f, "layer {layer}: transition {from} -> {to} is not up/identity/down by 2")
            }
        }
    }
}

/// Checks the path against the trellis: every step (including the first,
/// from the stem rate) is ×2 up, identity or ×2 down.
pub fn validate_path(config: &SearchConfig, path: &PathGenotype) -> Vec<PathViolation> {
    let mut out = Vec::new();
    if path.path.len() != config.layers {
        out.push(PathViolation::Length {
            expected: config.layers,
            got: path.path.len(),
        });
    }
    let mut prev = Some(0usize);
    let mut prev_rate = STEM_RATE;
    for (i, &rate) in path.path.iter().enumerate() {
        let layer = i + 1;
        let level = config.level_of(rate).ok();
        match (prev, level) {
            (_, None) => out.push(PathViolation::UnknownRate { layer, rate }),
            (Some(p), Some(c)) if p.abs_diff(c) > 1 => out.push(PathViolation::Jump {
                layer,
                from: prev_rate,
                to: rate,
            }),
            _ => {}
        }
        prev = level;
        prev_rate = rate;
    }
    out
}

/// The full decoded architecture as stored in `genotype.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Genotype {
    pub cell: CellGenotype,
    pub path: PathGenotype,
    pub config: GenotypeConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenotypeConfig {
    #[serde(rename = "L")]
    pub layers: usize,
    #[serde(rename = "B")]
    pub blocks: usize,
    #[serde(rename = "F")]
    pub multiplier: usize,
    pub num_classes: usize,
}

impl From<&SearchConfig> for GenotypeConfig {
    fn from(c: &SearchConfig) -> Self {
        GenotypeConfig {
            layers: c.layers,
            blocks: c.blocks,
            multiplier: c.multiplier,
            num_classes: c.num_classes,
        }
    }
}

impl GenotypeConfig {
    pub fn search_config(&self) -> SearchConfig {
        SearchConfig::new(self.layers, self.blocks, self.multiplier, self.num_classes)
    }
}

impl Genotype {
    pub fn validate(&self) -> Result<()> {
        let config = self.config.search_config();
        config.validate()?;
        self.cell.validate(config.blocks)?;
        let violations = validate_path(&config, &self.path);
        if let Some(v) = violations.first() {
            return Err(Error::invalid(v.to_string()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let g: Genotype = serde_json::from_str(text)?;
        g.validate()?;
        Ok(g)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("genotype serializes")
    }
}

/// Operator logits `(edges, 8)`, shared by every cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaParams {
    pub blocks: usize,
    pub logits: Vec<f64>,
}

/// Path logits `(L, levels, 3)`; source 0 is `s/2`, 1 is `s`, 2 is `2s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub layers: usize,
    pub levels: usize,
    pub logits: Vec<f64>,
}

impl AlphaParams {
    pub fn num_edges(&self) -> usize {
        edge_count(self.blocks)
    }

    pub fn check(&self) -> Result<()> {
        if self.logits.len() != self.num_edges() * OperatorKind::COUNT {
            return Err(Error::shape(format!(
                "alpha has {} logits, expected {}",
                self.logits.len(),
                self.num_edges() * OperatorKind::COUNT
            )));
        }
        Ok(())
    }
}

impl BetaParams {
    pub fn check(&self, config: &SearchConfig) -> Result<()> {
        if self.layers != config.layers || self.levels != config.levels() || self.logits.len() != self.layers * self.levels * 3 {
            return Err(Error::shape(format!(
                "beta ({} layers, {} levels, {} logits) does not match the configuration",
                self.layers,
                self.levels,
                self.logits.len()
            )));
        }
        Ok(())
    }
}

/// `n` i.i.d. draws of `N(0, 1)·0.001`.
pub fn init_logits(n: usize, rng: &mut impl rand::Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * INIT_SCALE
        })
        .collect()
}

pub fn init_relaxation(config: &SearchConfig, seed: u64) -> Result<(AlphaParams, BetaParams)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alpha = AlphaParams {
        blocks: config.blocks,
        logits: init_logits(config.num_edges() * OperatorKind::COUNT, &mut rng),
    };
    let beta = BetaParams {
        layers: config.layers,
        levels: config.levels(),
        logits: init_logits(config.layers * config.levels() * 3, &mut rng),
    };
    Ok((alpha, beta))
}

/// Softmax over `group`-sized chunks, restricted to `mask` where given.
/// Masked entries are exactly 0; fully masked groups are all zero.
pub fn masked_softmax(logits: &[f64], group: usize, mask: Option<&[bool]>) -> Result<Vec<f64>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("architecture logits".into()));
    }
    let keep = |i: usize| mask.is_none_or(|m| m[i]);
    let mut out = vec![0.0; logits.len()];
    for base in (0..logits.len()).step_by(group) {
        let idx: Vec<usize> = (base..base + group).filter(|&i| keep(i)).collect();
        let mx = idx.iter().map(|&i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = idx.iter().map(|&i| (logits[i] - mx).exp()).sum();
        for &i in &idx {
            out[i] = (logits[i] - mx).exp() / z;
        }
    }
    Ok(out)
}

/// Normalized α, flat `(edges, 8)`.
pub fn normalize_alpha(alpha: &AlphaParams) -> Result<Vec<f64>> {
    alpha.check()?;
    masked_softmax(&alpha.logits, OperatorKind::COUNT, None)
}

/// Normalized β, flat `(L, levels, 3)`, softmax over the live incoming
/// sources of each reachable state. Unreachable states are all zero.
pub fn normalize_beta(beta: &BetaParams, config: &SearchConfig) -> Result<Vec<f64>> {
    beta.check(config)?;
    let mask = config.beta_mask();
    for l in 1..=config.layers {
        for lv in 0..config.levels() {
            if config.reachable(l, lv) && (0..3).all(|src| !mask[config.beta_index(l, lv, src)]) {
                return Err(Error::invalid(format!("beta group ({l}, {}) has no live source", config.rate(lv))));
            }
        }
    }
    masked_softmax(&beta.logits, 3, Some(&mask))
}

/// Mean Shannon entropy (nats) of the nonempty groups of a normalized
/// weight vector.
pub fn mean_entropy(weights: &[f64], group: usize) -> f64 {
    let mut total = 0.0;
    let mut groups = 0;
    for g in weights.chunks(group) {
        if g.iter().all(|&p| p == 0.0) {
            continue;
        }
        total += g.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum::<f64>();
        groups += 1;
    }
    if groups == 0 {
        0.0
    } else {
        total / groups as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn desk() -> SearchConfig {
        SearchConfig::new(6, 3, 4, 3)
    }

    #[test]
    fn channel_rule() {
        assert_eq!(SearchConfig::new(10, 5, 8, 7).channels_for(4).unwrap(), 40);
        assert_eq!(SearchConfig::new(10, 5, 8, 7).channels_for(32).unwrap(), 320);
        assert_eq!(SearchConfig::new(10, 3, 4, 7).channels_for(8).unwrap(), 24);
        assert!(desk().channels_for(64).is_err());
        assert!(desk().channels_for(2).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(desk().validate().is_ok());
        let mut c = desk();
        c.resolutions = vec![4, 16];
        assert!(c.validate().is_err());
        assert!(SearchConfig::new(0, 3, 4, 3).validate().is_err());
    }

    #[test]
    fn init_is_deterministic_and_sized() {
        let c = SearchConfig::new(10, 5, 8, 7);
        let (a1, b1) = init_relaxation(&c, 7).unwrap();
        let (a2, b2) = init_relaxation(&c, 7).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        assert_eq!(a1.num_edges(), 20);
        assert_eq!(a1.logits.len(), 20 * 8);
        assert_eq!(b1.logits.len(), 10 * 4 * 3);
        assert_ne!(init_relaxation(&c, 8).unwrap().0, a1);
    }

    #[test]
    fn init_scale_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let v = init_logits(100_000, &mut rng);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        let std = var.sqrt();
        assert!((0.00097..=0.00103).contains(&std), "{std}");
    }

    #[test]
    fn edge_count_matches_enumeration() {
        for b in 1..10 {
            let enumerated: usize = (0..b).map(|i| (0..i + 2).count()).sum();
            assert_eq!(edge_count(b), enumerated);
            let c = SearchConfig::new(3, b, 2, 2);
            let mut seen = Vec::new();
            for i in 0..b {
                for j in 0..i + 2 {
                    seen.push(c.edge_index(i, j));
                }
            }
            assert_eq!(seen, (0..edge_count(b)).collect::<Vec<_>>());
        }
    }

    #[test]
    fn alpha_normalization_examples() {
        let a = AlphaParams {
            blocks: 1,
            logits: vec![0.3; 16],
        };
        assert!(normalize_alpha(&a).unwrap().iter().all(|&w| (w - 0.125).abs() < 1e-15));
        let mut a = a;
        a.logits[5] = 1e4;
        let w = normalize_alpha(&a).unwrap();
        assert!((w[5] - 1.0).abs() < 1e-6);
        a.logits[0] = f64::NAN;
        assert!(normalize_alpha(&a).is_err());
    }

    #[test]
    fn beta_normalization_examples() {
        let c = desk();
        let beta = BetaParams {
            layers: 6,
            levels: 4,
            logits: vec![0.0; 72],
        };
        let w = normalize_beta(&beta, &c).unwrap();
        let at = |l, s: usize| {
            let lv = c.level_of(s).unwrap();
            [0, 1, 2].map(|src| w[c.beta_index(l, lv, src)])
        };
        for v in at(4, 8) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(at(4, 4), [0.0, 0.5, 0.5]);
        assert_eq!(at(1, 8), [1.0, 0.0, 0.0]);
        assert_eq!(at(1, 4), [0.0, 1.0, 0.0]);
        assert_eq!(at(4, 32), [0.5, 0.5, 0.0]);
        assert_eq!(at(1, 16), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn path_validation() {
        let c = SearchConfig::new(5, 3, 4, 3);
        let ok = |p: Vec<usize>| validate_path(&c, &PathGenotype { path: p }).is_empty();
        assert!(ok(vec![4, 4, 8, 8, 4]));
        assert!(ok(vec![8, 8, 16, 32, 32]));
        assert!(!ok(vec![4, 16, 16, 8, 4]));
        assert!(!ok(vec![16, 8, 8, 4, 4]));
        assert!(!ok(vec![4, 4, 8, 8]));
        assert!(!ok(vec![4, 4, 8, 8, 6]));
    }

    fn bfs_reachable(config: &SearchConfig) -> Vec<Vec<bool>> {
        let mut reach = vec![vec![false; config.levels()]; config.layers + 1];
        reach[0][0] = true;
        for l in 1..=config.layers {
            for from in 0..config.levels() {
                if !reach[l - 1][from] {
                    continue;
                }
                for to in from.saturating_sub(1)..=(from + 1).min(config.levels() - 1) {
                    reach[l][to] = true;
                }
            }
        }
        reach
    }

    #[test]
    fn reachability_matches_trellis_bfs() {
        for layers in 1..8 {
            let c = SearchConfig::new(layers, 2, 2, 2);
            let reach = bfs_reachable(&c);
            for (l, row) in reach.iter().enumerate() {
                for (lv, &r) in row.iter().enumerate() {
                    assert_eq!(c.reachable(l, lv), r, "layer {l} level {lv}");
                }
            }
        }
    }

    #[test]
    fn genotype_json_schema() {
        let g = Genotype {
            cell: CellGenotype {
                blocks: vec![
                    (1, 0, OperatorKind::SepConv3, OperatorKind::Skip).into(),
                    (2, 1, OperatorKind::MaxPool3, OperatorKind::AtrousConv5).into(),
                ],
            },
            path: PathGenotype { path: vec![4, 8, 8] },
            config: GenotypeConfig {
                layers: 3,
                blocks: 2,
                multiplier: 4,
                num_classes: 3,
            },
        };
        let text = g.to_json();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["cell"][0], serde_json::json!([1, 0, "sep_conv_3x3", "skip_connect"]));
        assert_eq!(v["path"], serde_json::json!([4, 8, 8]));
        assert_eq!(v["config"], serde_json::json!({"L": 3, "B": 2, "F": 4, "num_classes": 3}));
        assert_eq!(Genotype::from_json(&text).unwrap(), g);

        let mut bad = g.clone();
        bad.cell.blocks[0].input1 = 2;
        assert!(Genotype::from_json(&bad.to_json()).is_err());
        let mut bad = g;
        bad.path.path = vec![4, 16, 8];
        assert!(Genotype::from_json(&bad.to_json()).is_err());
    }

    #[test]
    fn entropy_of_uniform_groups() {
        let w = vec![0.25; 8];
        assert!((mean_entropy(&w, 4) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(mean_entropy(&[1.0, 0.0, 0.0, 0.0], 2), 0.0);
    }

    proptest! {
        #[test]
        fn alpha_groups_sum_to_one_and_shift_invariant(
            logits in prop::collection::vec(-20.0f64..20.0, 40),
            shift in -50.0f64..50.0,
        ) {
            let a = AlphaParams { blocks: 2, logits };
            let w = normalize_alpha(&a).unwrap();
            for g in w.chunks(8) {
                prop_assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-7);
                prop_assert!(g.iter().all(|&v| v >= 0.0));
            }
            let shifted = AlphaParams { blocks: 2, logits: a.logits.iter().map(|v| v + shift).collect() };
            let ws = normalize_alpha(&shifted).unwrap();
            for (x, y) in w.iter().zip(&ws) {
                prop_assert!((x - y).abs() < 1e-7);
            }
        }

        #[test]
        fn beta_groups_sum_to_one_and_shift_invariant(
            logits in prop::collection::vec(-20.0f64..20.0, 5 * 4 * 3),
            shift in -50.0f64..50.0,
        ) {
            let c = SearchConfig::new(5, 2, 2, 2);
            let b = BetaParams { layers: 5, levels: 4, logits };
            let w = normalize_beta(&b, &c).unwrap();
            for l in 1..=5 {
                for lv in 0..4 {
                    let s: f64 = (0..3).map(|src| w[c.beta_index(l, lv, src)]).sum();
                    if c.reachable(l, lv) {
                        prop_assert!((s - 1.0).abs() < 1e-7);
                    } else {
                        prop_assert_eq!(s, 0.0);
                    }
                    for src in 0..3 {
                        if !c.beta_live(l, lv, src) {
                            prop_assert_eq!(w[c.beta_index(l, lv, src)], 0.0);
                        }
                    }
                }
            }
            let shifted = BetaParams { logits: b.logits.iter().map(|v| v + shift).collect(), ..b };
            let ws = normalize_beta(&shifted, &c).unwrap();
            for (x, y) in w.iter().zip(&ws) {
                prop_assert!((x - y).abs() < 1e-7);
            }
        }
    }
}
