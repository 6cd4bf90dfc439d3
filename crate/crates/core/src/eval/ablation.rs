//! Trains and evaluates the full adapter against its three ablations.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterConfig, ADAPTER_PREFIX};
use crate::dataset::ExperimentData;
use crate::error::{Error, Result};
use crate::eval::{evaluate, Metrics, DEFAULT_KS};
use crate::stack::ModelStack;
use crate::trainer::{train, TrainConfig, TrainReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// One projection and prefix shared by every layer.
    NoLayerWise,
    /// `D = P`: no learned prefix and no gate.
    NoRefinement,
    /// No alignment loss.
    NoDistribution,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NoLayerWise,
        Variant::NoRefinement,
        Variant::NoDistribution,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full model",
            Variant::NoLayerWise => "w/o LayerWise",
            Variant::NoRefinement => "w/o Refinement",
            Variant::NoDistribution => "w/o Distribution",
        }
    }

    pub fn apply(
        self,
        adapter: &AdapterConfig,
        train: &TrainConfig,
    ) -> (AdapterConfig, TrainConfig) {
        let (mut a, mut t) = (adapter.clone(), train.clone());
        match self {
            Variant::Full => {}
            Variant::NoLayerWise => a.layer_wise = false,
            Variant::NoRefinement => a.refinement = false,
            Variant::NoDistribution => t.lambda = 0.0,
        }
        (a, t)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "none",
            Variant::NoLayerWise => "layerwise",
            Variant::NoRefinement => "refinement",
            Variant::NoDistribution => "distribution",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "full" => Ok(Variant::Full),
            "layerwise" => Ok(Variant::NoLayerWise),
            "refinement" => Ok(Variant::NoRefinement),
            "distribution" => Ok(Variant::NoDistribution),
            other => Err(Error::Config(format!(
                "unknown ablation {other:?}; expected none, layerwise, refinement or distribution"
            ))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub adapter_params: usize,
    pub metrics: Metrics,
    pub training: TrainReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<18} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            "variant", "HR@5", "HR@10", "N@5", "N@10", "params"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<18} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8}\n",
                r.variant.label(),
                r.metrics.hr_at(5),
                r.metrics.hr_at(10),
                r.metrics.ndcg_at(5),
                r.metrics.ndcg_at(10),
                r.adapter_params
            ));
        }
        out
    }
}

/// Trains one variant on top of `base`'s ID model and backbone and scores
/// it on the test cases.
pub fn run_variant(
    base: &ModelStack,
    data: &ExperimentData,
    train_cfg: &TrainConfig,
    variant: Variant,
    seed: u64,
) -> Result<(ModelStack, AblationRow)> {
    let (adapter, tc) = variant.apply(&base.cfg.adapter, train_cfg);
    let mut stack = base.with_adapter(adapter, seed)?;
    let training = train(&mut stack, data, &tc, seed)?;
    let metrics = evaluate(&stack, &data.test, &DEFAULT_KS)?;
    let row = AblationRow {
        variant,
        adapter_params: stack.store.num_elements(ADAPTER_PREFIX),
        metrics,
        training,
    };
    Ok((stack, row))
}

/// Every variant under one seed.
pub fn ablation_run(
    base: &ModelStack,
    data: &ExperimentData,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<AblationReport> {
    let rows = Variant::ALL
        .iter()
        .map(|&v| run_variant(base, data, train_cfg, v, seed).map(|(_, row)| row))
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport { rows })
}
