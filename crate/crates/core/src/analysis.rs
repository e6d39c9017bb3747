//! Per-layer norm reports and LoRA-vs-SymLoRA comparison tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdaptedLinear, AdapterKind};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::scalar::Scalar;
use crate::store::AdapterHost;
use crate::training::ScoreStats;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    #[default]
    Frobenius,
    EntrywiseAbsSum,
}

impl NormKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Frobenius => "frobenius",
            Self::EntrywiseAbsSum => "entrywise_abs_sum",
        }
    }

    pub fn apply<T: Scalar>(self, m: &Matrix<T>) -> f64 {
        match self {
            Self::Frobenius => m.frobenius_norm().as_f64(),
            Self::EntrywiseAbsSum => m.entrywise_abs_sum().as_f64(),
        }
    }
}

impl std::str::FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frobenius" => Ok(Self::Frobenius),
            "entrywise_abs_sum" | "abs-sum" => Ok(Self::EntrywiseAbsSum),
            other => Err(Error::InvalidConfig(format!("unknown norm kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormRow {
    pub layer: usize,
    pub matrix_name: String,
    pub norm_kind: NormKind,
    /// `‖λ W0‖` for SymLoRA, `‖W0‖` for LoRA.
    pub base_term_norm: f64,
    pub adapter_norm: f64,
    pub difference: f64,
    pub lambda_value: Option<f64>,
}

/// One grid: every adapted matrix of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    pub adapter_kind: AdapterKind,
    pub norm_kind: NormKind,
    /// Task the adapters were trained for, if known.
    pub task: Option<String>,
    pub rows: Vec<NormRow>,
    pub min: f64,
    pub max: f64,
}

fn row_range(rows: &[NormRow]) -> (f64, f64) {
    rows.iter()
        .flat_map(|r| [r.base_term_norm, r.adapter_norm, r.difference])
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

fn matrix_name(layer: &AdaptedLinear<impl Scalar>) -> String {
    let name = layer.name();
    name.rsplit('.').next().unwrap_or(name).to_string()
}

/// One row per adapted matrix of `host`.
pub fn norm_report<T: Scalar>(host: &impl AdapterHost<T>, norm_kind: NormKind) -> Result<NormReport> {
    let mut rows = Vec::new();
    let mut kind = None;
    for layer in host.adapted_layers() {
        let Some(adapter) = layer.adapter() else { continue };
        let lambda = adapter.lambda_scale();
        let w0 = layer.base().weight();
        let base_term = match lambda {
            Some(l) => w0.scale(l),
            None => w0.clone(),
        };
        let base_term_norm = norm_kind.apply(&base_term);
        let adapter_norm = norm_kind.apply(&adapter.delta_weight());
        kind = Some(adapter.kind());
        rows.push(NormRow {
            layer: layer.base().layer_index(),
            matrix_name: matrix_name(layer),
            norm_kind,
            base_term_norm,
            adapter_norm,
            difference: base_term_norm - adapter_norm,
            lambda_value: lambda.map(|l| l.as_f64()),
        });
    }
    let adapter_kind = kind.ok_or(Error::NoAdapters)?;
    let (min, max) = row_range(&rows);
    Ok(NormReport {
        adapter_kind,
        norm_kind,
        task: None,
        rows,
        min,
        max,
    })
}

/// Several grids on one shared color scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormReportFile {
    pub grids: Vec<NormReport>,
    pub min: f64,
    pub max: f64,
}

impl NormReportFile {
    pub fn new(grids: Vec<NormReport>) -> Self {
        let (min, max) = grids
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), g| (lo.min(g.min), hi.max(g.max)));
        Self { grids, min, max }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

impl NormReport {
    pub fn render_text(&self) -> String {
        let mut out = format!(
            "{} norms ({})\n{:<6} {:<8} {:>14} {:>14} {:>14} {:>10}\n",
            self.adapter_kind.as_str(),
            self.norm_kind.as_str(),
            "layer",
            "matrix",
            "base_term",
            "adapter",
            "difference",
            "lambda"
        );
        for r in &self.rows {
            let lambda = r.lambda_value.map_or("-".to_string(), |l| format!("{l:.6}"));
            let _ = writeln!(
                out,
                "{:<6} {:<8} {:>14.6} {:>14.6} {:>14.6} {:>10}",
                r.layer, r.matrix_name, r.base_term_norm, r.adapter_norm, r.difference, lambda
            );
        }
        out
    }
}

/// Scores for both arms on one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResults {
    pub metric: String,
    pub symlora: Option<ScoreStats>,
    pub lora: Option<ScoreStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub task: String,
    pub metric: String,
    pub symlora: ScoreStats,
    pub lora: ScoreStats,
    /// `symlora.mean - lora.mean`.
    pub difference: f64,
    /// The two intervals intersect.
    pub tie: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

pub fn compare_runs(results: &BTreeMap<String, ArmResults>) -> Result<ComparisonTable> {
    let mut rows = Vec::with_capacity(results.len());
    for (task, arms) in results {
        let missing = |arm: &'static str| Error::MissingArm {
            task: task.clone(),
            arm,
        };
        let symlora = arms.symlora.ok_or_else(|| missing("symlora"))?;
        let lora = arms.lora.ok_or_else(|| missing("lora"))?;
        rows.push(ComparisonRow {
            task: task.clone(),
            metric: arms.metric.clone(),
            symlora,
            lora,
            difference: symlora.mean - lora.mean,
            tie: symlora.overlaps(&lora),
        });
    }
    Ok(ComparisonTable { rows })
}

fn cell(s: &ScoreStats) -> String {
    match s.half_width {
        Some(h) => format!("{:.4} ± {:.4}", s.mean, h),
        None => format!("{:.4} ± -", s.mean),
    }
}

impl ComparisonTable {
    pub fn ties(&self) -> usize {
        self.rows.iter().filter(|r| r.tie).count()
    }

    pub fn render_text(&self) -> String {
        let mut out = format!(
            "{:<18} {:<22} {:>20} {:>20} {:>9} {:>4}\n",
            "task", "metric", "symlora", "lora", "diff", "tie"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<18} {:<22} {:>20} {:>20} {:>+9.4} {:>4}",
                r.task,
                r.metric,
                cell(&r.symlora),
                cell(&r.lora),
                r.difference,
                if r.tie { "yes" } else { "no" }
            );
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// Full-scale GLUE validation scores used as a rendering fixture:
/// `(task, metric, symlora mean, symlora half-width, lora mean, lora half-width)`.
/// Half-widths are fractions, not percentage points.
pub const GLUE_REFERENCE: [(&str, &str, f64, Option<f64>, f64, Option<f64>); 8] = [
    ("CoLA", "matthews_correlation", 0.63, Some(0.029), 0.63, None),
    ("QNLI", "accuracy", 0.92, Some(0.007), 0.93, Some(0.003)),
    ("SST-2", "accuracy", 0.94, Some(0.015), 0.95, Some(0.002)),
    ("MNLI", "accuracy", 0.86, Some(0.005), 0.87, Some(0.003)),
    ("QQP", "accuracy", 0.90, Some(0.003), 0.90, Some(0.001)),
    ("RTE", "accuracy", 0.85, Some(0.041), 0.86, Some(0.007)),
    ("MRPC", "accuracy", 0.88, Some(0.015), 0.89, Some(0.007)),
    ("STS-B", "pearson_correlation", 0.90, Some(0.005), 0.91, None),
];

/// [`GLUE_REFERENCE`] as [`compare_runs`] input.
pub fn glue_reference_results() -> BTreeMap<String, ArmResults> {
    let stats = |mean: f64, half_width: Option<f64>| ScoreStats {
        mean,
        std: None,
        n: 0,
        half_width,
        estimate: crate::training::StdEstimate::Sample,
    };
    GLUE_REFERENCE
        .iter()
        .map(|&(task, metric, sm, sh, lm, lh)| {
            (
                task.to_string(),
                ArmResults {
                    metric: metric.to_string(),
                    symlora: Some(stats(sm, sh)),
                    lora: Some(stats(lm, lh)),
                },
            )
        })
        .collect()
}
