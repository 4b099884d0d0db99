//! Quantitative evaluation: overlap and volume metrics plus report
//! assembly.
//!
//! Per case: Dice overlap and exact pixel-count volumes.  Across cases:
//! mean Dice, Pearson correlation of predicted vs. true volumes, and the
//! mean volume-difference fraction |V_pred − V_true| / V_true over cases
//! with nonempty truth.  [`evaluate`] runs one inference mode over a whole
//! test set with per-case seeds derived from sample ids, so case order
//! never changes a result.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{decode_label, Sample};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::derive_seed;
use crate::sampler::{DespeckleParams, InferMode, InferenceConfig, Sampler};

/// Metrics of a single evaluated case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    /// Sample id.
    pub id: String,
    /// Overlap score in `[0, 1]`.
    pub dice: f64,
    /// Positive pixels in the predicted mask.
    pub vol_pred: usize,
    /// Positive pixels in the truth mask.
    pub vol_true: usize,
    /// Volume difference fraction; absent when the truth is empty.
    pub vdp: Option<f64>,
}

/// Aggregates over the case list, each recomputable from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    /// Mean Dice over all cases.
    pub mean_dice: f64,
    /// Pearson correlation of the volume lists; absent when undefined
    /// (fewer than two cases or a constant list).
    pub vc: Option<f64>,
    /// Mean volume difference over nonempty-truth cases; absent when
    /// every truth is empty.
    pub mean_vdp: Option<f64>,
    /// How many cases had an empty truth (excluded from `mean_vdp`).
    pub n_empty_truth: usize,
}

/// Full evaluation output: config echo, per-case list, aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Resolved settings the evaluation ran with.
    pub config: serde_json::Value,
    /// Per-case metrics, in dataset order.
    pub cases: Vec<CaseResult>,
    /// Summary statistics.
    pub aggregates: Aggregates,
}

/// Dice overlap `2|P∩G| / (|P| + |G|)`; 1 when both masks are empty.
pub fn dice(pred: &Array2<bool>, truth: &Array2<bool>) -> Result<f64> {
    if pred.dim() != truth.dim() {
        return Err(Error::shapes(
            "dice: pred vs truth",
            &[pred.dim().0, pred.dim().1],
            &[truth.dim().0, truth.dim().1],
        ));
    }
    let mut inter = 0usize;
    let mut p = 0usize;
    let mut g = 0usize;
    for (&a, &b) in pred.iter().zip(truth.iter()) {
        p += a as usize;
        g += b as usize;
        inter += (a && b) as usize;
    }
    if p + g == 0 {
        Ok(1.0)
    } else {
        Ok(2.0 * inter as f64 / (p + g) as f64)
    }
}

/// Pearson correlation of two paired lists.
///
/// Undefined — and reported as [`Error::MetricUndefined`] — for fewer
/// than two pairs or when either list is constant.
pub fn volume_correlation(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shapes(
            "volume correlation: pred vs truth",
            &[pred.len()],
            &[truth.len()],
        ));
    }
    if pred.len() < 2 {
        return Err(Error::MetricUndefined(format!(
            "correlation needs at least two cases, got {}",
            pred.len()
        )));
    }
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mt = truth.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vp = 0.0;
    let mut vt = 0.0;
    for (&a, &b) in pred.iter().zip(truth.iter()) {
        cov += (a - mp) * (b - mt);
        vp += (a - mp) * (a - mp);
        vt += (b - mt) * (b - mt);
    }
    if vp == 0.0 || vt == 0.0 {
        return Err(Error::MetricUndefined(
            "correlation of a constant volume list".into(),
        ));
    }
    // Clamp shields downstream consumers from rounding overshoot.
    Ok((cov / (vp * vt).sqrt()).clamp(-1.0, 1.0))
}

/// Volume difference fraction `|vol_pred − vol_true| / vol_true`.
///
/// Callers must exclude empty-truth cases instead of calling this.
pub fn vdp(vol_pred: usize, vol_true: usize) -> Result<f64> {
    if vol_true == 0 {
        return Err(Error::MetricUndefined(
            "volume difference against an empty truth".into(),
        ));
    }
    Ok((vol_pred as f64 - vol_true as f64).abs() / vol_true as f64)
}

/// Metrics of one prediction/truth mask pair.
pub fn case_result(id: &str, pred: &Array2<bool>, truth: &Array2<bool>) -> Result<CaseResult> {
    let dice = dice(pred, truth)?;
    let vol_pred = pred.iter().filter(|&&m| m).count();
    let vol_true = truth.iter().filter(|&&m| m).count();
    let vdp = if vol_true == 0 {
        None
    } else {
        Some(vdp(vol_pred, vol_true)?)
    };
    Ok(CaseResult {
        id: id.to_string(),
        dice,
        vol_pred,
        vol_true,
        vdp,
    })
}

/// Compute the aggregate block from a case list.
pub fn aggregate(cases: &[CaseResult]) -> Result<Aggregates> {
    if cases.is_empty() {
        return Err(Error::InvalidData("no cases to aggregate".into()));
    }
    let n = cases.len() as f64;
    let mean_dice = cases.iter().map(|c| c.dice).sum::<f64>() / n;
    let pred: Vec<f64> = cases.iter().map(|c| c.vol_pred as f64).collect();
    let truth: Vec<f64> = cases.iter().map(|c| c.vol_true as f64).collect();
    let vc = match volume_correlation(&pred, &truth) {
        Ok(r) => Some(r),
        Err(Error::MetricUndefined(_)) => None,
        Err(e) => return Err(e),
    };
    let vdps: Vec<f64> = cases.iter().filter_map(|c| c.vdp).collect();
    let mean_vdp = if vdps.is_empty() {
        None
    } else {
        Some(vdps.iter().sum::<f64>() / vdps.len() as f64)
    };
    let n_empty_truth = cases.iter().filter(|c| c.vol_true == 0).count();
    Ok(Aggregates {
        mean_dice,
        vc,
        mean_vdp,
        n_empty_truth,
    })
}

/// Bundle cases and their aggregates into a report.
pub fn assemble_report(
    config: serde_json::Value,
    cases: Vec<CaseResult>,
) -> Result<EvalReport> {
    let aggregates = aggregate(&cases)?;
    Ok(EvalReport {
        config,
        cases,
        aggregates,
    })
}

fn eval_case<F: Real>(
    sampler: &Sampler<'_, F>,
    sample: &Sample,
    mode: InferMode,
    inference: &InferenceConfig,
    despeckle: Option<&DespeckleParams>,
) -> Result<CaseResult> {
    let mut cfg = inference.clone();
    cfg.seed = derive_seed(inference.seed, &sample.id);
    let x0 = sample.image_as::<F>();
    let (_prob, mask) = sampler.infer_mode(mode, &x0, &cfg, despeckle)?;
    let truth = decode_label(&sample.label, 0.0);
    case_result(&sample.id, &mask, &truth)
}

/// Run `mode` over every sample and assemble the report.
///
/// Each case derives its own seed from the configured seed and the sample
/// id, so results are independent of dataset order, stable under
/// subsetting, and identical for every `workers` count.  `extra` is
/// echoed into the report config verbatim.
pub fn evaluate<F: Real>(
    sampler: &Sampler<'_, F>,
    samples: &[Sample],
    mode: InferMode,
    inference: &InferenceConfig,
    despeckle: Option<&DespeckleParams>,
    workers: usize,
    extra: serde_json::Value,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::InvalidData("evaluation dataset is empty".into()));
    }
    if workers == 0 {
        return Err(Error::InvalidConfig("workers must be at least 1".into()));
    }
    for sample in samples {
        sample.validate()?;
    }
    let results: Vec<Result<CaseResult>> = if workers == 1 {
        samples
            .iter()
            .map(|s| eval_case(sampler, s, mode, inference, despeckle))
            .collect()
    } else {
        use std::sync::atomic::{AtomicUsize, Ordering};
        use std::sync::Mutex;
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<CaseResult>>>> =
            samples.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..workers.min(samples.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= samples.len() {
                        break;
                    }
                    let r = eval_case(sampler, &samples[i], mode, inference, despeckle);
                    *slots[i].lock().expect("no poisoned case slot") = Some(r);
                });
            }
        });
        slots
            .into_iter()
            .map(|m| {
                m.into_inner()
                    .expect("no poisoned case slot")
                    .expect("every case slot filled")
            })
            .collect()
    };
    let mut cases = Vec::with_capacity(samples.len());
    for r in results {
        cases.push(r?);
    }
    let config = json!({
        "tool_version": crate::TOOL_VERSION,
        "mode": mode,
        "inference": inference,
        "despeckle": despeckle,
        "run": extra,
    });
    assemble_report(config, cases)
}

impl EvalReport {
    /// Pretty JSON for the on-disk report.
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("evaluation report", e))
    }

    /// Human-readable fixed-width table with an aggregate footer.
    pub fn format_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<16} {:>8} {:>9} {:>9} {:>8}\n",
            "id", "dice", "vol_pred", "vol_true", "vdp"
        ));
        for c in &self.cases {
            let vdp = c
                .vdp
                .map(|v| format!("{v:.4}"))
                .unwrap_or_else(|| "-".to_string());
            out.push_str(&format!(
                "{:<16} {:>8.4} {:>9} {:>9} {:>8}\n",
                c.id, c.dice, c.vol_pred, c.vol_true, vdp
            ));
        }
        let a = &self.aggregates;
        let vc = a
            .vc
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "undefined".to_string());
        let mv = a
            .mean_vdp
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "undefined".to_string());
        out.push_str(&format!(
            "mean_dice {:.4}  vc {vc}  mean_vdp {mv}  empty_truth_cases {}\n",
            a.mean_dice, a.n_empty_truth
        ));
        out
    }
}
