//! Static efficiency metrics of a derived network: parameters, FLOPs,
//! multiply-adds, activation memory and naive memory traffic.
//!
//! The walker mirrors the network structure from its description alone, without
//! instantiating weights. A multiply-add counts as two FLOPs. Memory is the
//! total (not peak) footprint of every tensor an op materializes; MemR+W is
//! per-op input + parameter reads plus output writes, with no cache model.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::derived::{extent_at, Aspp, Combine, DerivedNetworkSpec, FeatureFusion};
use crate::error::{Error, Result};
use crate::nn::OperatorKind;
use crate::search_space::{SearchConfig, STEM_RATE};
use crate::supernet::level_extent;

pub const DEFAULT_INPUT: (usize, usize) = (1024, 1024);
pub const DEFAULT_BYTES_PER_ELEM: u64 = 4;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub params: u64,
    pub flops: u64,
    pub madd: u64,
    pub memory_bytes: u64,
    pub mem_rw_bytes: u64,
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Counts) {
        self.params += o.params;
        self.flops += o.flops;
        self.madd += o.madd;
        self.memory_bytes += o.memory_bytes;
        self.mem_rw_bytes += o.mem_rw_bytes;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    #[serde(flatten)]
    pub counts: Counts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub input_hw: (usize, usize),
    pub bytes_per_elem: u64,
    #[serde(flatten)]
    pub totals: Counts,
    pub per_layer: Vec<LayerCost>,
}

/// `(channels, height, width)` of a batch-1 activation.
pub type Shape = (usize, usize, usize);

fn numel(s: Shape) -> u64 {
    (s.0 * s.1 * s.2) as u64
}

/// Accumulates one entry per primitive op.
#[derive(Debug, Clone)]
pub struct CostWalker {
    pub bytes: u64,
    pub entries: Vec<LayerCost>,
}

impl CostWalker {
    pub fn new(bytes_per_elem: u64) -> Self {
        CostWalker {
            bytes: bytes_per_elem,
            entries: Vec::new(),
        }
    }

    fn push(&mut self, name: &str, params: u64, flops: u64, madd: u64, inputs: u64, out: u64, materialized: bool) {
        self.entries.push(LayerCost {
            name: name.to_string(),
            counts: Counts {
                params,
                flops,
                madd,
                memory_bytes: if materialized { out * self.bytes } else { 0 },
                mem_rw_bytes: (inputs + params + out) * self.bytes,
            },
        });
    }

    /// Same-padded convolution; stride 2 rounds the extent up.
    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        name: &str,
        x: Shape,
        cout: usize,
        k: usize,
        stride: usize,
        groups: usize,
        bias: bool,
    ) -> Result<Shape> {
        if x.0 % groups != 0 || cout % groups != 0 || stride == 0 {
            return Err(Error::shape(format!("{name}: {} -> {cout} channels in {groups} groups", x.0)));
        }
        let y = (cout, x.1.div_ceil(stride), x.2.div_ceil(stride));
        let taps = (k * k * x.0 / groups) as u64;
        let mac = numel(y) * taps;
        let weights = cout as u64 * taps;
        let b = if bias { cout as u64 } else { 0 };
        let bias_adds = if bias { numel(y) } else { 0 };
        self.push(name, weights + b, 2 * mac + bias_adds, mac, numel(x), numel(y), true);
        Ok(y)
    }

    /// Inference-time batch norm: one scale and one shift per element.
    pub fn bn(&mut self, name: &str, x: Shape) -> Shape {
        self.push(name, 2 * x.0 as u64, 2 * numel(x), numel(x), numel(x), numel(x), true);
        x
    }

    pub fn relu(&mut self, name: &str, x: Shape) -> Shape {
        self.push(name, 0, numel(x), 0, numel(x), numel(x), true);
        x
    }

    pub fn conv_bn(&mut self, name: &str, x: Shape, cout: usize, k: usize, stride: usize, relu: bool) -> Result<Shape> {
        let y = self.conv(&format!("{name}.conv"), x, cout, k, stride, 1, false)?;
        let y = self.bn(&format!("{name}.bn"), y);
        Ok(if relu { self.relu(&format!("{name}.relu"), y) } else { y })
    }

    pub fn bilinear(&mut self, name: &str, x: Shape, hw: (usize, usize)) -> Shape {
        let y = (x.0, hw.0, hw.1);
        self.push(name, 0, 8 * numel(y), 4 * numel(y), numel(x), numel(y), true);
        y
    }

    pub fn pool(&mut self, name: &str, x: Shape, k: usize) -> Shape {
        self.push(name, 0, (k * k) as u64 * numel(x), 0, numel(x), numel(x), true);
        x
    }

    pub fn global_pool(&mut self, name: &str, x: Shape) -> Shape {
        let y = (x.0, 1, 1);
        self.push(name, 0, numel(x), 0, numel(x), numel(y), true);
        y
    }

    /// Elementwise sum of `terms` same-shaped tensors; a single term is free.
    pub fn sum(&mut self, name: &str, x: Shape, terms: usize) -> Shape {
        if terms >= 2 {
            let m = terms as u64;
            self.push(name, 0, (m - 1) * numel(x), 0, m * numel(x), numel(x), true);
        }
        x
    }

    pub fn concat(&mut self, name: &str, xs: &[Shape]) -> Shape {
        let c = xs.iter().map(|s| s.0).sum();
        let y = (c, xs[0].1, xs[0].2);
        let inputs = xs.iter().map(|&s| numel(s)).sum();
        self.push(name, 0, 0, 0, inputs, numel(y), true);
        y
    }

    /// Identity: aliases its input, but still read and written once.
    pub fn skip(&mut self, name: &str, x: Shape) -> Shape {
        self.push(name, 0, 0, 0, numel(x), numel(x), false);
        x
    }

    pub fn softmax(&mut self, name: &str, x: Shape) -> Shape {
        self.push(name, 0, 3 * numel(x), 0, numel(x), numel(x), true);
        x
    }

    pub fn totals(&self) -> Counts {
        let mut c = Counts::default();
        for e in &self.entries {
            c += e.counts;
        }
        c
    }
}

fn walk_cell(w: &mut CostWalker, prefix: &str, spec: &DerivedNetworkSpec, x: Shape) -> Result<Shape> {
    let c = x.0;
    let mut relu_done = vec![false; 2 + spec.cell.blocks.len()];
    let mut present = 0;
    for (i, b) in spec.cell.blocks.iter().enumerate() {
        let mut terms = 0;
        for (input, kind) in [(b.input1, b.op1), (b.input2, b.op2)] {
            let name = format!("{prefix}.b{i}.in{input}.{}", kind.name());
            match kind {
                OperatorKind::Null => continue,
                OperatorKind::Skip => {
                    w.skip(&name, x);
                }
                OperatorKind::AvgPool3 | OperatorKind::MaxPool3 => {
                    w.pool(&name, x, 3);
                }
                _ => {
                    let (k, _) = kind.conv_geometry().expect("conv operator");
                    if !relu_done[input] {
                        w.relu(&format!("{prefix}.relu{input}"), x);
                        relu_done[input] = true;
                    }
                    let y = w.conv(&format!("{name}.dw"), x, c, k, 1, c, false)?;
                    let y = w.conv(&format!("{name}.pw"), y, c, 1, 1, 1, false)?;
                    w.bn(&format!("{name}.bn"), y);
                }
            }
            terms += 1;
        }
        w.sum(&format!("{prefix}.b{i}.sum"), x, terms);
        if terms > 0 {
            present += 1;
        }
    }
    Ok(w.sum(&format!("{prefix}.sum"), x, present))
}

fn walk_adapter(w: &mut CostWalker, name: &str, config: &SearchConfig, x: Shape, from: usize, to: usize, target: (usize, usize)) -> Result<Shape> {
    let cout = config.channels_at_rate(to);
    if to == from {
        Ok(x)
    } else if to == 2 * from {
        w.conv_bn(name, x, cout, 3, 2, false)
    } else {
        let up = w.bilinear(&format!("{name}.resize"), x, target);
        w.conv_bn(name, up, cout, 1, 1, false)
    }
}

/// Walks the whole network at `input_hw`.
pub fn walk(spec: &DerivedNetworkSpec, input_hw: (usize, usize), bytes_per_elem: u64) -> Result<CostWalker> {
    spec.validate()?;
    let (h, wd) = input_hw;
    if h == 0 || wd == 0 {
        return Err(Error::shape("empty input"));
    }
    let config = spec.search_config();
    let mut w = CostWalker::new(bytes_per_elem);
    let img = (3, h, wd);
    let h1 = w.conv_bn("stem.conv1", img, config.channels_at_rate(2), 3, 2, true)?;
    let h0 = w.conv_bn("stem.conv2", h1, config.channels_at_rate(STEM_RATE), 3, 2, true)?;
    let base = (h0.1, h0.2);

    let mut chain = h1;
    let mut rate = 2;
    let first = spec.path.path[0];
    while rate < first {
        chain = w.conv_bn(&format!("prev2.s{first}.d{}", (rate / 2).trailing_zeros()), chain, config.channels_at_rate(2 * rate), 3, 2, false)?;
        rate *= 2;
    }

    let mut states: Vec<(usize, Shape)> = vec![(STEM_RATE, h0)];
    for (i, &rate) in spec.path.path.iter().enumerate() {
        let l = i + 1;
        let (from, prev) = states[l - 1];
        let target = level_extent(base, config.level_of(rate)?);
        let prefix = crate::supernet::edge_prefix(l, rate, from);
        let x = walk_adapter(&mut w, &format!("{prefix}.adapt"), &config, prev, from, rate, target)?;
        let out = walk_cell(&mut w, &format!("{prefix}.cell"), spec, x)?;
        states.push((rate, out));
    }

    let dim = spec.dim;
    let mut above: Option<Shape> = None;
    let mut pyramid = BTreeMap::new();
    for (&rate, &layer) in spec.pyramid_inputs.iter().rev() {
        let tap = states[layer].1;
        let mut m = w.conv_bn(&format!("fpn.lateral.s{rate}"), tap, dim, 1, 1, false)?;
        if let Some(a) = above {
            w.bilinear(&format!("fpn.topdown.s{rate}"), a, (m.1, m.2));
            m = w.sum(&format!("fpn.merge.s{rate}"), m, 2);
        }
        above = Some(m);
        pyramid.insert(rate, w.conv_bn(&format!("fpn.smooth.s{rate}"), m, dim, 3, 1, true)?);
    }

    for (&rate, &x) in &pyramid {
        let ups = FeatureFusion::upsamplings(rate)?;
        let mut y = x;
        for k in 0..ups.max(1) {
            y = w.conv_bn(&format!("fusion.s{rate}.stage{k}"), y, dim, 3, 1, true)?;
            if k < ups {
                y = w.bilinear(&format!("fusion.s{rate}.stage{k}.resize"), y, extent_at(base, rate >> (k + 1))?);
            }
        }
    }
    let fusion = w.sum("fusion.sum", (dim, base.0, base.1), pyramid.len());

    let final_rate = spec.final_rate();
    let deep = states.last().expect("path is nonempty").1;
    let mut branches = vec![w.conv_bn("aspp.conv1x1", deep, dim, 1, 1, true)?];
    for d in Aspp::rates_for(final_rate) {
        let name = format!("aspp.atrous{d}");
        let y = w.conv(&format!("{name}.dw"), deep, deep.0, 3, 1, deep.0, false)?;
        let y = w.conv(&format!("{name}.pw"), y, dim, 1, 1, 1, false)?;
        let y = w.bn(&format!("{name}.bn"), y);
        branches.push(w.relu(&format!("{name}.relu"), y));
    }
    let g = w.global_pool("aspp.gap", deep);
    let g = w.conv("aspp.pool", g, dim, 1, 1, 1, false)?;
    let g = w.relu("aspp.pool.relu", g);
    branches.push(w.bilinear("aspp.pool.resize", g, (deep.1, deep.2)));
    let cat = w.concat("aspp.concat", &branches);
    let mut aspp = w.conv_bn("aspp.project", cat, dim, 1, 1, true)?;
    if (aspp.1, aspp.2) != base {
        aspp = w.bilinear("head.aspp_resize", aspp, base);
    }

    let joined = match spec.combine {
        Combine::Concat => w.concat("head.concat", &[fusion, aspp]),
        Combine::Add => w.sum("head.add", fusion, 2),
    };
    let y = w.conv_bn("head.conv", joined, dim, 3, 1, true)?;
    let y = w.conv("head.classifier", y, spec.num_classes, 1, 1, 1, true)?;
    let y = w.bilinear("head.resize", y, input_hw);
    w.softmax("head.softmax", y);
    Ok(w)
}

pub fn report_with(spec: &DerivedNetworkSpec, input_hw: (usize, usize), bytes_per_elem: u64) -> Result<CostReport> {
    let w = walk(spec, input_hw, bytes_per_elem)?;
    Ok(CostReport {
        input_hw,
        bytes_per_elem,
        totals: w.totals(),
        per_layer: w.entries,
    })
}

pub fn report(spec: &DerivedNetworkSpec, input_hw: (usize, usize)) -> Result<CostReport> {
    report_with(spec, input_hw, DEFAULT_BYTES_PER_ELEM)
}

pub fn count_params(spec: &DerivedNetworkSpec) -> Result<u64> {
    Ok(walk(spec, (32, 32), DEFAULT_BYTES_PER_ELEM)?.totals().params)
}

impl CostReport {
    /// Summary in the units of the usual efficiency tables.
    pub fn table(&self) -> String {
        let t = &self.totals;
        let gb = (1u64 << 30) as f64;
        let mut s = String::new();
        let _ = writeln!(s, "input {}x{}, {} bytes per element", self.input_hw.0, self.input_hw.1, self.bytes_per_elem);
        let _ = writeln!(s, "{:<14}{:>12}", "Params (M)", format!("{:.2}", t.params as f64 / 1e6));
        let _ = writeln!(s, "{:<14}{:>12}", "FLOPs (G)", format!("{:.1}", t.flops as f64 / 1e9));
        let _ = writeln!(s, "{:<14}{:>12}", "Memory (GB)", format!("{:.2}", t.memory_bytes as f64 / gb));
        let _ = writeln!(s, "{:<14}{:>12}", "MAdd (T)", format!("{:.2}", t.madd as f64 / 1e12));
        let _ = writeln!(s, "{:<14}{:>12}", "MemR+W (GB)", format!("{:.2}", t.mem_rw_bytes as f64 / gb));
        s
    }

    pub fn sum_of_layers(&self) -> Counts {
        let mut c = Counts::default();
        for e in &self.per_layer {
            c += e.counts;
        }
        c
    }
}
