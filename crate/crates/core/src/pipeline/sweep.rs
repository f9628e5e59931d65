use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::image_seed;
use crate::scalar::Real;
use crate::segmentor::PromptableSegmentor;
use crate::synth::{severity_for_regime, severity_tag, DatasetItem, Skip};

use super::{
    evaluate_prepared, prepare, ImageReport, NegativeStrategy, PipelineError, RefinementConfig,
};

pub const CSV_HEADER: &str =
    "regime,strategy,image,coarse_dice,mean_dice,std_dice,max_dice,chosen_k,steps";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub regime: u32,
    pub severity: f64,
    #[serde(flatten)]
    pub report: ImageReport,
}

/// Means over the images of one (regime, strategy) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub regime: u32,
    pub strategy: NegativeStrategy,
    pub images: usize,
    pub coarse_dice: f64,
    pub mean_dice: f64,
    pub mean_gain: f64,
    pub mean_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub config: RefinementConfig,
    pub backend: String,
    pub regimes: Vec<u32>,
    pub strategies: Vec<NegativeStrategy>,
    pub rows: Vec<SweepRow>,
    pub aggregates: Vec<Aggregate>,
    pub skips: Vec<Skip>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let rep = &r.report;
            let k = rep.chosen_k.map(|k| k.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{},{:.1}",
                r.regime,
                rep.strategy,
                rep.image,
                rep.coarse_dice,
                rep.mean_dice,
                rep.std_dice,
                rep.max_dice,
                k,
                rep.mean_steps()
            );
        }
        out
    }

    pub fn aggregate(&self, regime: u32, strategy: NegativeStrategy) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.regime == regime && a.strategy == strategy)
    }
}

/// Evaluates every (regime, strategy, image) cell. Each image gets a seed
/// derived from `cfg.seed` and its id; its initializations use consecutive
/// seeds from there. Rows come out ordered by regime, strategy, then item.
pub fn run_sweep<T: Real, S: PromptableSegmentor<T> + ?Sized>(
    items: &[DatasetItem<T>],
    regimes: &[u32],
    strategies: &[NegativeStrategy],
    seg: &S,
    cfg: &RefinementConfig,
) -> Result<SweepReport, PipelineError> {
    cfg.validate()?;
    let severities = regimes
        .iter()
        .map(|&r| severity_for_regime(r))
        .collect::<Result<Vec<_>, _>>()?;

    let tasks: Vec<(usize, usize)> = (0..regimes.len())
        .flat_map(|ri| (0..items.len()).map(move |ii| (ri, ii)))
        .collect();
    // one cell per task: a row per strategy, or a skip
    let cells: Vec<Result<Vec<SweepRow>, Skip>> = tasks
        .par_iter()
        .map(|&(ri, ii)| {
            let item = &items[ii];
            let sev = severities[ri];
            let skip = |reason: String| Skip {
                item: format!("{}@{}", item.id, regimes[ri]),
                reason,
            };
            let tag = severity_tag(sev);
            let coarse = item
                .coarse
                .get(&tag)
                .ok_or_else(|| skip(format!("missing coarse_s{tag}")))?;
            let seed = image_seed(cfg.seed, &item.id);
            let mut local = cfg.clone();
            local.seed = seed;
            let prep = prepare(coarse, &item.tendon, &local).map_err(|e| skip(e.to_string()))?;
            strategies
                .iter()
                .map(|&strategy| {
                    local.negative_strategy = strategy;
                    evaluate_prepared(
                        &item.id,
                        &item.image,
                        &prep,
                        &item.pathology,
                        seg,
                        &local,
                        seed,
                        cfg.n_init,
                    )
                    .map(|report| SweepRow {
                        regime: regimes[ri],
                        severity: sev,
                        report,
                    })
                    .map_err(|e| skip(format!("{strategy}: {e}")))
                })
                .collect()
        })
        .collect();

    let mut rows = Vec::new();
    let mut skips = Vec::new();
    let mut by_task: Vec<Option<Vec<SweepRow>>> = Vec::with_capacity(cells.len());
    for c in cells {
        match c {
            Ok(r) => by_task.push(Some(r)),
            Err(s) => {
                skips.push(s);
                by_task.push(None);
            }
        }
    }
    let mut aggregates = Vec::new();
    for (ri, &regime) in regimes.iter().enumerate() {
        for (si, &strategy) in strategies.iter().enumerate() {
            let cell: Vec<SweepRow> = (0..items.len())
                .filter_map(|ii| {
                    by_task[ri * items.len() + ii]
                        .as_ref()
                        .map(|r| r[si].clone())
                })
                .collect();
            if !cell.is_empty() {
                let n = cell.len() as f64;
                let mean =
                    |f: fn(&ImageReport) -> f64| cell.iter().map(|r| f(&r.report)).sum::<f64>() / n;
                aggregates.push(Aggregate {
                    regime,
                    strategy,
                    images: cell.len(),
                    coarse_dice: mean(|r| r.coarse_dice),
                    mean_dice: mean(|r| r.mean_dice),
                    mean_gain: mean(|r| r.mean_dice - r.coarse_dice),
                    mean_std: mean(|r| r.std_dice),
                });
            }
            rows.extend(cell);
        }
    }
    Ok(SweepReport {
        config: cfg.clone(),
        backend: seg.name(),
        regimes: regimes.to_vec(),
        strategies: strategies.to_vec(),
        rows,
        aggregates,
        skips,
    })
}
