//! The discrete network built from a decoded genotype: the searched encoder
//! plus a light decoder of feature pyramid, fusion to rate 4, ASPP on the
//! deepest feature and a semantic aggregation head.

mod decoder;
mod encoder;
mod train;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Ctx;
use crate::search_space::{CellGenotype, Genotype, PathGenotype, SearchConfig};
use crate::tensor::{ParamStore, Scalar, Var};

pub use decoder::{extent_at, AtrousSeparable, Aspp, Combine, FeatureFusion, Fpn, SemanticAggregation, ASPP_BASE_RATES};
pub use encoder::{DerivedEncoder, DiscreteCell, EncoderLayer, EncoderOutput};
pub use train::{
    evaluate_miou, predict, read_metrics, train_derived, ConfusionMatrix, MetricsRecord, MiouReport, TrainConfig, TrainOptions,
    TrainOutcome,
};

/// For each rate on the path, its last (1-based) layer.
pub fn select_pyramid_inputs(path: &PathGenotype) -> BTreeMap<usize, usize> {
    let mut out = BTreeMap::new();
    for (i, &rate) in path.path.iter().enumerate() {
        out.insert(rate, i + 1);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DerivedNetworkSpec {
    pub cell: CellGenotype,
    pub path: PathGenotype,
    #[serde(rename = "F")]
    pub multiplier: usize,
    pub dim: usize,
    pub num_classes: usize,
    /// Rate `s` to the layer index it is tapped from.
    pub pyramid_inputs: BTreeMap<usize, usize>,
    #[serde(default)]
    pub combine: Combine,
}

impl DerivedNetworkSpec {
    pub fn new(cell: CellGenotype, path: PathGenotype, multiplier: usize, dim: usize, num_classes: usize) -> Self {
        let pyramid_inputs = select_pyramid_inputs(&path);
        DerivedNetworkSpec {
            cell,
            path,
            multiplier,
            dim,
            num_classes,
            pyramid_inputs,
            combine: Combine::default(),
        }
    }

    /// Uses the genotype's own multiplier unless `multiplier` overrides it.
    pub fn from_genotype(g: &Genotype, multiplier: Option<usize>, dim: usize) -> Self {
        Self::new(
            g.cell.clone(),
            g.path.clone(),
            multiplier.unwrap_or(g.config.multiplier),
            dim,
            g.config.num_classes,
        )
    }

    pub fn search_config(&self) -> SearchConfig {
        SearchConfig::new(self.path.path.len(), self.cell.blocks.len(), self.multiplier, self.num_classes)
    }

    pub fn final_rate(&self) -> usize {
        *self.path.path.last().expect("validated path is nonempty")
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid("dim must be positive"));
        }
        let config = self.search_config();
        config.validate()?;
        self.cell.validate(config.blocks)?;
        if let Some(v) = crate::search_space::validate_path(&config, &self.path).first() {
            return Err(Error::invalid(v.to_string()));
        }
        if self.pyramid_inputs != select_pyramid_inputs(&self.path) {
            return Err(Error::invalid(format!(
                "pyramid inputs {:?} are not the last layer of each rate on the path",
                self.pyramid_inputs
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Intermediate results of one forward pass.
#[derive(Debug, Clone)]
pub struct Features {
    pub encoder: EncoderOutput,
    pub taps: BTreeMap<usize, Var>,
    pub pyramid: BTreeMap<usize, Var>,
    pub fusion: Var,
    pub aspp: Var,
    pub logits: Var,
}

#[derive(Debug, Clone)]
pub struct DerivedNetwork {
    pub spec: DerivedNetworkSpec,
    pub encoder: DerivedEncoder,
    pub fpn: Fpn,
    pub fusion: FeatureFusion,
    pub aspp: Aspp,
    pub aggregation: SemanticAggregation,
}

impl DerivedNetwork {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, spec: &DerivedNetworkSpec) -> Result<Self> {
        spec.validate()?;
        let config = spec.search_config();
        let encoder = DerivedEncoder::new(store, rng, &config, &spec.cell, &spec.path)?;
        let taps: BTreeMap<usize, usize> = spec.pyramid_inputs.keys().map(|&r| (r, config.channels_at_rate(r))).collect();
        let fpn = Fpn::new(store, rng, &taps, spec.dim)?;
        let rates: Vec<usize> = taps.keys().copied().collect();
        let fusion = FeatureFusion::new(store, rng, &rates, spec.dim)?;
        let final_rate = spec.final_rate();
        let aspp = Aspp::new(store, rng, config.channels_at_rate(final_rate), spec.dim, final_rate)?;
        let aggregation = SemanticAggregation::new(store, rng, spec.dim, spec.num_classes, spec.combine)?;
        Ok(DerivedNetwork {
            spec: spec.clone(),
            encoder,
            fpn,
            fusion,
            aspp,
            aggregation,
        })
    }

    pub fn features<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, image: Var) -> Result<Features> {
        let (_, _, h, w) = ctx.value(image).dims4()?;
        let encoder = self.encoder.forward(ctx, image)?;
        let taps: BTreeMap<usize, Var> = self
            .spec
            .pyramid_inputs
            .iter()
            .map(|(&rate, &layer)| (rate, encoder.layers[layer - 1]))
            .collect();
        let pyramid = self.fpn.forward(ctx, &taps)?;
        let fusion = self.fusion.forward(ctx, &pyramid, encoder.base_extent)?;
        let last = *encoder.layers.last().expect("encoder has layers");
        let aspp = self.aspp.forward(ctx, last)?;
        let logits = self.aggregation.logits(ctx, fusion, aspp, (h, w))?;
        Ok(Features {
            encoder,
            taps,
            pyramid,
            fusion,
            aspp,
            logits,
        })
    }

    /// Class logits `(N, num_classes, H, W)` before the softmax.
    pub fn forward_logits<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, image: Var) -> Result<Var> {
        Ok(self.features(ctx, image)?.logits)
    }

    /// Per-pixel class probabilities.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, image: Var) -> Result<Var> {
        let logits = self.forward_logits(ctx, image)?;
        crate::nn::functional::softmax_channels(&mut ctx.tape, logits)
    }

    pub fn num_params(&self) -> usize {
        self.encoder.num_params()
            + self.fpn.num_params()
            + self.fusion.num_params()
            + self.aspp.num_params()
            + self.aggregation.num_params()
    }
}

#[cfg(test)]
mod tests;
