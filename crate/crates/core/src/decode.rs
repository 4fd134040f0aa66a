//! Discrete architecture from converged relaxation weights: strongest
//! predecessors per block, and the maximum-probability trellis path.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::nn::OperatorKind;
use crate::search_space::{
    BlockGenotype, CellGenotype, Genotype, GenotypeConfig, PathGenotype, SearchConfig, STEM_RATE,
};

/// Upper bound on `L` for exhaustive path enumeration.
pub const BRUTE_FORCE_MAX_LAYERS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeOptions {
    /// Let `none` compete when scoring slots and choosing operators.
    pub include_null: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions { include_null: false }
    }
}

fn candidates(opts: DecodeOptions) -> impl Iterator<Item = OperatorKind> {
    OperatorKind::ALL
        .into_iter()
        .filter(move |&k| opts.include_null || k != OperatorKind::Null)
}

/// Best operator on one edge, lowest index winning ties.
fn best_op(weights: &[f64], opts: DecodeOptions) -> (OperatorKind, f64) {
    let mut best = (OperatorKind::SepConv3, f64::NEG_INFINITY);
    for k in candidates(opts) {
        if weights[k.index()] > best.1 {
            best = (k, weights[k.index()]);
        }
    }
    best
}

/// For each block, the two input slots with the largest best-operator
/// weight (lower slot wins ties), each with its argmax operator. The
/// block lists the chosen slots in ascending order.
pub fn decode_cell(alpha: &[f64], blocks: usize, opts: DecodeOptions) -> Result<CellGenotype> {
    let edges = crate::search_space::edge_count(blocks);
    if alpha.len() != edges * OperatorKind::COUNT {
        return Err(Error::shape(format!(
            "{} normalized alpha weights for {blocks} blocks, expected {}",
            alpha.len(),
            edges * OperatorKind::COUNT
        )));
    }
    let mut out = Vec::with_capacity(blocks);
    for i in 0..blocks {
        let base = crate::search_space::edge_count(i);
        let mut scored: Vec<(usize, OperatorKind, f64)> = (0..i + 2)
            .map(|j| {
                let e = (base + j) * OperatorKind::COUNT;
                let (k, s) = best_op(&alpha[e..e + OperatorKind::COUNT], opts);
                (j, k, s)
            })
            .collect();
        scored.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
        let mut pick = [scored[0], scored[1]];
        pick.sort_by_key(|p| p.0);
        out.push(BlockGenotype {
            input1: pick[0].0,
            input2: pick[1].0,
            op1: pick[0].1,
            op2: pick[1].1,
        });
    }
    Ok(CellGenotype { blocks: out })
}

fn check_beta(beta: &[f64], config: &SearchConfig) -> Result<()> {
    config.validate()?;
    let n = config.layers * config.levels() * 3;
    if beta.len() != n {
        return Err(Error::shape(format!("{} normalized beta weights, expected {n}", beta.len())));
    }
    Ok(())
}

fn log_weight(beta: &[f64], config: &SearchConfig, layer: usize, level: usize, src: usize) -> f64 {
    if config.beta_live(layer, level, src) {
        beta[config.beta_index(layer, level, src)].ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// A path with its log-probability `Σ_l ln β^l_{s_{l−1}→s_l}`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedPath {
    pub path: PathGenotype,
    pub log_prob: f64,
}

/// Viterbi over the trellis from the stem rate. Ties go to the smaller
/// terminal rate and, along backpointers, to the smaller source rate.
pub fn decode_path_dp(beta: &[f64], config: &SearchConfig) -> Result<DecodedPath> {
    check_beta(beta, config)?;
    let levels = config.levels();
    let mut score = vec![f64::NEG_INFINITY; levels];
    score[0] = 0.0;
    let mut back = vec![vec![usize::MAX; levels]; config.layers + 1];
    for l in 1..=config.layers {
        let mut next = vec![f64::NEG_INFINITY; levels];
        for lv in 0..levels {
            for src in 0..3 {
                let Some(from) = (lv + src).checked_sub(1).filter(|&f| f < levels) else {
                    continue;
                };
                let cand = score[from] + log_weight(beta, config, l, lv, src);
                if cand > next[lv] {
                    next[lv] = cand;
                    back[l][lv] = from;
                }
            }
        }
        score = next;
    }
    let mut end = 0;
    for lv in 1..levels {
        if score[lv] > score[end] {
            end = lv;
        }
    }
    if score[end] == f64::NEG_INFINITY {
        return Err(Error::invalid("every path has zero probability"));
    }
    let mut path = vec![0; config.layers];
    let mut lv = end;
    for l in (1..=config.layers).rev() {
        path[l - 1] = config.rate(lv);
        lv = back[l][lv];
    }
    Ok(DecodedPath {
        path: PathGenotype { path },
        log_prob: score[end],
    })
}

/// Exhaustive search over every valid path, with the same tie rule as
/// [`decode_path_dp`]: among equal scores the path whose reversed level
/// sequence is lexicographically smallest.
pub fn brute_force_path(beta: &[f64], config: &SearchConfig) -> Result<DecodedPath> {
    check_beta(beta, config)?;
    if config.layers > BRUTE_FORCE_MAX_LAYERS {
        return Err(Error::invalid(format!(
            "exhaustive enumeration is limited to {BRUTE_FORCE_MAX_LAYERS} layers, got {}",
            config.layers
        )));
    }
    let levels = config.levels();
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut stack: Vec<(Vec<usize>, f64)> = vec![(vec![0], 0.0)];
    while let Some((seq, score)) = stack.pop() {
        let l = seq.len();
        if l == config.layers + 1 {
            let better = match &best {
                None => true,
                Some((s, p)) => score > *s || (score == *s && seq.iter().rev().lt(p.iter().rev())),
            };
            if better && score > f64::NEG_INFINITY {
                best = Some((score, seq));
            }
            continue;
        }
        let from = seq[l - 1];
        for lv in from.saturating_sub(1)..(from + 2).min(levels) {
            let src = from + 1 - lv;
            let mut next = seq.clone();
            next.push(lv);
            stack.push((next, score + log_weight(beta, config, l, lv, src)));
        }
    }
    let (log_prob, seq) = best.ok_or_else(|| Error::invalid("every path has zero probability"))?;
    Ok(DecodedPath {
        path: PathGenotype {
            path: seq[1..].iter().map(|&lv| config.rate(lv)).collect(),
        },
        log_prob,
    })
}

/// Graphviz description of the cell DAG, one node per block.
pub fn cell_dot(cell: &CellGenotype) -> String {
    let mut s = String::from("digraph cell {\n  rankdir=LR;\n");
    s.push_str("  in0 [label=\"H(l-2)\", shape=box];\n  in1 [label=\"H(l-1)\", shape=box];\n");
    let name = |input: usize| {
        if input < 2 {
            format!("in{input}")
        } else {
            format!("block{}", input - 1)
        }
    };
    for (i, b) in cell.blocks.iter().enumerate() {
        let _ = writeln!(s, "  block{} [label=\"block {}\", shape=circle];", i + 1, i + 1);
        for (input, op) in b.branches() {
            let _ = writeln!(s, "  {} -> block{} [label=\"{op}\"];", name(input), i + 1);
        }
    }
    s.push_str("  out [label=\"H(l)\", shape=box];\n");
    for i in 0..cell.blocks.len() {
        let _ = writeln!(s, "  block{} -> out;", i + 1);
    }
    s.push_str("}\n");
    s
}

/// Graphviz description of the selected path, one node per layer.
pub fn trellis_dot(path: &PathGenotype) -> String {
    let mut s = String::from("digraph trellis {\n  rankdir=LR;\n");
    let _ = writeln!(s, "  stem [label=\"stem 1/{STEM_RATE}\", shape=box];");
    let mut prev = "stem".to_string();
    for (i, rate) in path.path.iter().enumerate() {
        let node = format!("layer{}", i + 1);
        let _ = writeln!(s, "  {node} [label=\"L{} 1/{rate}\"];", i + 1);
        let _ = writeln!(s, "  {prev} -> {node};");
        prev = node;
    }
    s.push_str("}\n");
    s
}

/// Files written by [`emit_genotype`].
#[derive(Debug, Clone)]
pub struct EmittedFiles {
    pub genotype: PathBuf,
    pub cell_dot: PathBuf,
    pub trellis_dot: PathBuf,
}

/// Writes `genotype.json`, `cell.dot` and `trellis.dot` into `dir`.
pub fn emit_genotype(cell: &CellGenotype, path: &PathGenotype, config: &SearchConfig, dir: &Path) -> Result<EmittedFiles> {
    let genotype = Genotype {
        cell: cell.clone(),
        path: path.clone(),
        config: GenotypeConfig::from(config),
    };
    genotype.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = EmittedFiles {
        genotype: dir.join("genotype.json"),
        cell_dot: dir.join("cell.dot"),
        trellis_dot: dir.join("trellis.dot"),
    };
    for (p, text) in [
        (&files.genotype, genotype.to_json()),
        (&files.cell_dot, cell_dot(cell)),
        (&files.trellis_dot, trellis_dot(path)),
    ] {
        fs::write(p, text).map_err(|e| Error::io(p, e))?;
    }
    Ok(files)
}
