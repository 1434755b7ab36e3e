//! Forecast verification: threshold confusion counts, threat score,
//! per-level IoU and RMSE, broken down by lead time.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{classify_levels, LevelField, LEVEL_BOUNDS, LEVEL_NAMES, NUM_LEVELS};
use crate::tensor::Tensor;

/// Default TS thresholds (mm): the non-zero level boundaries.
pub const TS_THRESHOLDS: [f64; 4] = [0.1, 4.0, 13.0, 25.0];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub hits: u64,
    pub misses: u64,
    pub false_alarms: u64,
    pub correct_negatives: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.hits + self.misses + self.false_alarms + self.correct_negatives
    }

    fn add(&mut self, o: &Self) {
        self.hits += o.hits;
        self.misses += o.misses;
        self.false_alarms += o.false_alarms;
        self.correct_negatives += o.correct_negatives;
    }
}

fn same_len(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, a, b));
    }
    Ok(())
}

/// Exceedance counts at `threshold`: an event is `value >= threshold`.
pub fn confusion(pred: &Tensor, gt: &Tensor, threshold: f64) -> Result<ConfusionCounts> {
    same_len("confusion", pred.shape(), gt.shape())?;
    if !pred.all_finite() || !gt.all_finite() {
        return Err(Error::NonFinite("confusion inputs".into()));
    }
    Ok(confusion_raw(pred.data(), gt.data(), threshold))
}

fn confusion_raw(pred: &[f64], gt: &[f64], th: f64) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for (p, g) in pred.iter().zip(gt) {
        match (*g >= th, *p >= th) {
            (true, true) => c.hits += 1,
            (true, false) => c.misses += 1,
            (false, true) => c.false_alarms += 1,
            (false, false) => c.correct_negatives += 1,
        }
    }
    c
}

/// Threat score in percent; 0 when there are no hits, misses or false alarms.
pub fn ts(c: &ConfusionCounts) -> f64 {
    let den = c.hits + c.misses + c.false_alarms;
    if den == 0 {
        0.0
    } else {
        100.0 * c.hits as f64 / den as f64
    }
}

/// Per-level intersection and union cell counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelCounts {
    pub intersection: [u64; NUM_LEVELS],
    pub union: [u64; NUM_LEVELS],
}

impl LevelCounts {
    fn from_slices(pred: &[u8], gt: &[u8]) -> Self {
        let mut c = Self::default();
        for (&p, &g) in pred.iter().zip(gt) {
            if p == g {
                c.intersection[p as usize] += 1;
                c.union[p as usize] += 1;
            } else {
                c.union[p as usize] += 1;
                c.union[g as usize] += 1;
            }
        }
        c
    }

    fn add(&mut self, o: &Self) {
        for i in 0..NUM_LEVELS {
            self.intersection[i] += o.intersection[i];
            self.union[i] += o.union[i];
        }
    }

    pub fn iou(&self) -> LevelIou {
        let mut out = LevelIou::default();
        for i in 0..NUM_LEVELS {
            if self.union[i] == 0 {
                out.iou[i] = 100.0;
                out.vacuous[i] = true;
            } else {
                out.iou[i] = 100.0 * self.intersection[i] as f64 / self.union[i] as f64;
            }
        }
        out
    }
}

/// IoU in percent per level. Levels absent from both fields report 100 and
/// are flagged vacuous.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LevelIou {
    pub iou: [f64; NUM_LEVELS],
    pub vacuous: [bool; NUM_LEVELS],
}

impl LevelIou {
    /// Mean over non-vacuous levels; `None` when every level is vacuous.
    pub fn mean(&self) -> Option<f64> {
        let vals: Vec<f64> = (0..NUM_LEVELS)
            .filter(|&i| !self.vacuous[i])
            .map(|i| self.iou[i])
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

pub fn iou_per_level(pred: &LevelField, gt: &LevelField) -> Result<LevelIou> {
    same_len("iou_per_level", pred.shape(), gt.shape())?;
    Ok(LevelCounts::from_slices(pred.levels(), gt.levels()).iou())
}

pub fn rmse(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    same_len("rmse", pred.shape(), gt.shape())?;
    let se: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(p, g)| (p - g) * (p - g))
        .sum();
    Ok((se / pred.numel() as f64).sqrt())
}

/// A `(j, h, w)` forecast.
#[derive(Clone, Debug)]
pub enum Forecast {
    Levels(LevelField),
    Amounts(Tensor),
}

#[derive(Clone, Debug, Default)]
struct LeadAccum {
    levels: LevelCounts,
    confusion: Vec<ConfusionCounts>,
    sq_err: f64,
    cells: u64,
}

/// Pools counts across samples, separately for each lead time.
#[derive(Clone, Debug)]
pub struct Evaluator {
    thresholds: Vec<f64>,
    leads: Vec<LeadAccum>,
    amounts: bool,
    samples: usize,
}

impl Evaluator {
    pub fn new(horizon: usize, thresholds: &[f64]) -> Self {
        Self {
            thresholds: thresholds.to_vec(),
            leads: vec![
                LeadAccum {
                    confusion: vec![ConfusionCounts::default(); thresholds.len()],
                    ..LeadAccum::default()
                };
                horizon
            ],
            amounts: true,
            samples: 0,
        }
    }

    /// Add one forecast against its `(j, h, w)` target precipitation.
    pub fn add(&mut self, forecast: &Forecast, target: &Tensor) -> Result<()> {
        let ts_ = target.shape();
        if ts_.len() != 3 || ts_[0] != self.leads.len() {
            return Err(Error::shape("evaluate", ts_, &[self.leads.len()]));
        }
        let gt_levels = classify_levels(target)?;
        let (pred_levels, pred_amounts) = match forecast {
            Forecast::Levels(l) => {
                self.amounts = false;
                (l.clone(), l.representative_precip())
            }
            Forecast::Amounts(t) => {
                let clamped = Tensor::from_fn(t.shape(), |i| t.data()[i].max(0.0));
                (classify_levels(&clamped)?, t.clone())
            }
        };
        same_len("evaluate", pred_levels.shape(), ts_)?;
        let hw = ts_[1] * ts_[2];
        for (k, acc) in self.leads.iter_mut().enumerate() {
            let r = k * hw..(k + 1) * hw;
            acc.levels.add(&LevelCounts::from_slices(
                &pred_levels.levels()[r.clone()],
                &gt_levels.levels()[r.clone()],
            ));
            let (p, g) = (&pred_amounts.data()[r.clone()], &target.data()[r]);
            for (c, th) in acc.confusion.iter_mut().zip(&self.thresholds) {
                c.add(&confusion_raw(p, g, *th));
            }
            acc.sq_err += p.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            acc.cells += hw as u64;
        }
        self.samples += 1;
        Ok(())
    }

    pub fn finish(&self) -> VerificationReport {
        let leads: Vec<LeadMetrics> = self
            .leads
            .iter()
            .enumerate()
            .map(|(k, a)| {
                let iou = a.levels.iou();
                let ts_v: Vec<f64> = a.confusion.iter().map(ts).collect();
                LeadMetrics {
                    lead: k + 1,
                    iou: iou.iou,
                    vacuous: iou.vacuous,
                    mean_iou: iou.mean(),
                    mean_ts: mean(&ts_v),
                    ts: ts_v,
                    rmse: (self.amounts && a.cells > 0).then(|| (a.sq_err / a.cells as f64).sqrt()),
                    confusion: a.confusion.clone(),
                }
            })
            .collect();
        let mut iou = [0.0; NUM_LEVELS];
        let mut vacuous = [true; NUM_LEVELS];
        for c in 0..NUM_LEVELS {
            let vals: Vec<f64> = leads
                .iter()
                .filter(|l| !l.vacuous[c])
                .map(|l| l.iou[c])
                .collect();
            if vals.is_empty() {
                iou[c] = 100.0;
            } else {
                iou[c] = mean(&vals);
                vacuous[c] = false;
            }
        }
        let per_lead_means: Vec<f64> = leads.iter().filter_map(|l| l.mean_iou).collect();
        let ts_mean: Vec<f64> = (0..self.thresholds.len())
            .map(|i| mean(&leads.iter().map(|l| l.ts[i]).collect::<Vec<_>>()))
            .collect();
        let rmses: Vec<f64> = leads.iter().filter_map(|l| l.rmse).collect();
        VerificationReport {
            samples: self.samples,
            thresholds: self.thresholds.clone(),
            mean: AggregateMetrics {
                iou,
                vacuous,
                mean_iou: (!per_lead_means.is_empty()).then(|| mean(&per_lead_means)),
                mean_ts: mean(&ts_mean),
                ts: ts_mean,
                rmse: (!rmses.is_empty()).then(|| mean(&rmses)),
            },
            leads,
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeadMetrics {
    pub lead: usize,
    pub iou: [f64; NUM_LEVELS],
    pub vacuous: [bool; NUM_LEVELS],
    pub mean_iou: Option<f64>,
    pub ts: Vec<f64>,
    pub mean_ts: f64,
    pub rmse: Option<f64>,
    pub confusion: Vec<ConfusionCounts>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub iou: [f64; NUM_LEVELS],
    pub vacuous: [bool; NUM_LEVELS],
    pub mean_iou: Option<f64>,
    pub ts: Vec<f64>,
    pub mean_ts: f64,
    pub rmse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub samples: usize,
    pub thresholds: Vec<f64>,
    pub leads: Vec<LeadMetrics>,
    pub mean: AggregateMetrics,
}

fn pct(v: f64) -> String {
    format!("{v:.2}")
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.2}"))
}

impl VerificationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    fn header(&self) -> Vec<String> {
        let mut h = vec!["lead".to_string()];
        h.extend(LEVEL_NAMES.iter().map(|n| format!("IoU_{n}")));
        h.push("mIoU".into());
        h.extend(self.thresholds.iter().map(|t| format!("TS@{t}")));
        h.push("mTS".into());
        h.push("RMSE".into());
        h
    }

    fn rows(&self) -> Vec<Vec<String>> {
        fn fmt_iou(iou: &[f64; NUM_LEVELS], vac: &[bool; NUM_LEVELS]) -> Vec<String> {
            (0..NUM_LEVELS)
                .map(|i| {
                    if vac[i] {
                        format!("{}*", pct(iou[i]))
                    } else {
                        pct(iou[i])
                    }
                })
                .collect()
        }
        let mut rows: Vec<Vec<String>> = self
            .leads
            .iter()
            .map(|l| {
                let mut r = vec![l.lead.to_string()];
                r.extend(fmt_iou(&l.iou, &l.vacuous));
                r.push(opt(l.mean_iou));
                r.extend(l.ts.iter().map(|v| pct(*v)));
                r.push(pct(l.mean_ts));
                r.push(opt(l.rmse));
                r
            })
            .collect();
        let m = &self.mean;
        let mut r = vec!["mean".to_string()];
        r.extend(fmt_iou(&m.iou, &m.vacuous));
        r.push(opt(m.mean_iou));
        r.extend(m.ts.iter().map(|v| pct(*v)));
        r.push(pct(m.mean_ts));
        r.push(opt(m.rmse));
        rows.push(r);
        rows
    }

    /// Right-aligned text table; `*` marks vacuous levels.
    pub fn to_table(&self) -> String {
        let header = self.header();
        let rows = self.rows();
        let widths: Vec<usize> = (0..header.len())
            .map(|c| {
                rows.iter()
                    .map(|r| r[c].len())
                    .chain([header[c].len()])
                    .max()
                    .unwrap()
            })
            .collect();
        let mut out = String::new();
        for line in std::iter::once(&header).chain(&rows) {
            let cells: Vec<String> = line
                .iter()
                .zip(&widths)
                .map(|(v, w)| format!("{v:>w$}"))
                .collect();
            let _ = writeln!(out, "{}", cells.join("  "));
        }
        out
    }

    /// One CSV row per lead time.
    pub fn to_csv(&self) -> String {
        let mut out = self.header().join(",") + "\n";
        for l in &self.leads {
            let mut r = vec![l.lead.to_string()];
            r.extend(l.iou.iter().map(|v| pct(*v)));
            r.push(opt(l.mean_iou));
            r.extend(l.ts.iter().map(|v| pct(*v)));
            r.push(pct(l.mean_ts));
            r.push(opt(l.rmse));
            out += &(r.join(",") + "\n");
        }
        out
    }
}

/// Lower bounds of the levels, for reference in reports.
pub fn level_bounds() -> [f64; NUM_LEVELS] {
    LEVEL_BOUNDS
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn confusion_examples() {
        let c = confusion(&t(&[5.0, 0.0, 5.0, 0.0]), &t(&[5.0, 5.0, 0.0, 0.0]), 1.0).unwrap();
        assert_eq!(
            c,
            ConfusionCounts {
                hits: 1,
                misses: 1,
                false_alarms: 1,
                correct_negatives: 1
            }
        );
        assert!((ts(&c) - 100.0 / 3.0).abs() < 1e-12);
        let z = confusion(&t(&[0.0; 4]), &t(&[0.0; 4]), 0.1).unwrap();
        assert_eq!(z.correct_negatives, 4);
        assert_eq!(ts(&z), 0.0);
        let same = confusion(&t(&[1.0, 7.0]), &t(&[1.0, 7.0]), 4.0).unwrap();
        assert_eq!((same.misses, same.false_alarms), (0, 0));
        assert_eq!(ts(&same), 100.0);
        assert!(confusion(&t(&[1.0]), &t(&[1.0, 2.0]), 1.0).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = LevelField::new(vec![4], vec![0, 1, 1, 2]).unwrap();
        let r = iou_per_level(&a, &a).unwrap();
        assert_eq!(&r.iou[..3], &[100.0; 3]);
        assert_eq!(r.vacuous, [false, false, false, true, true]);
        assert_eq!(r.mean(), Some(100.0));
        let b = LevelField::new(vec![4], vec![0, 0, 0, 1]).unwrap();
        let c = LevelField::new(vec![4], vec![1, 1, 1, 0]).unwrap();
        let r = iou_per_level(&b, &c).unwrap();
        assert_eq!(r.iou[0], 0.0);
        assert_eq!(r.iou[1], 0.0);
    }

    #[test]
    fn perfect_forecast_report() {
        let target = Tensor::from_fn(&[3, 4, 4], |i| (i % 7) as f64 * 3.0);
        let mut ev = Evaluator::new(3, &TS_THRESHOLDS);
        ev.add(&Forecast::Amounts(target.clone()), &target).unwrap();
        let rep = ev.finish();
        assert_eq!(rep.leads.len(), 3);
        assert_eq!(rep.mean.mean_iou, Some(100.0));
        assert_eq!(rep.mean.rmse, Some(0.0));
        let lead_mean = rep.leads.iter().map(|l| l.mean_iou.unwrap()).sum::<f64>() / 3.0;
        assert!((rep.mean.mean_iou.unwrap() - lead_mean).abs() < 1e-12);
        let table = rep.to_table();
        assert!(table.contains("100.00"));
        assert_eq!(rep.to_csv().lines().count(), 4);
        let back: VerificationReport = serde_json::from_str(&rep.to_json().unwrap()).unwrap();
        assert_eq!(back, rep);
    }

    #[test]
    fn levels_forecast_has_no_rmse() {
        let target = Tensor::from_fn(&[1, 2, 2], |i| i as f64 * 5.0);
        let mut ev = Evaluator::new(1, &TS_THRESHOLDS);
        ev.add(
            &Forecast::Levels(classify_levels(&target).unwrap()),
            &target,
        )
        .unwrap();
        let rep = ev.finish();
        assert_eq!(rep.mean.rmse, None);
        assert_eq!(rep.mean.mean_iou, Some(100.0));
        assert!(rep.leads[0].ts.iter().all(|&v| v == 100.0 || v == 0.0));
    }

    fn field() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(prop_oneof![Just(0.0), 0.0f64..30.0], 16)
    }

    proptest! {
        #[test]
        fn counts_partition(p in field(), g in field(), th in 0.0f64..30.0) {
            let c = confusion(&t(&p), &t(&g), th).unwrap();
            prop_assert_eq!(c.total(), 16);
        }

        #[test]
        fn iou_symmetric_and_permutation_invariant(p in field(), g in field(), shift in 0usize..16) {
            let (lp, lg) = (classify_levels(&t(&p)).unwrap(), classify_levels(&t(&g)).unwrap());
            prop_assert_eq!(iou_per_level(&lp, &lg).unwrap(), iou_per_level(&lg, &lp).unwrap());
            let rot = |v: &[f64]| { let mut r = v.to_vec(); r.rotate_left(shift); r };
            let (rp, rg) = (classify_levels(&t(&rot(&p))).unwrap(), classify_levels(&t(&rot(&g))).unwrap());
            prop_assert_eq!(iou_per_level(&lp, &lg).unwrap(), iou_per_level(&rp, &rg).unwrap());
            prop_assert_eq!(confusion(&t(&p), &t(&g), 4.0).unwrap(), confusion(&t(&rot(&p)), &t(&rot(&g)), 4.0).unwrap());
        }

        #[test]
        fn ts_monotone_in_hits(h in 0u64..100, m in 0u64..100, fa in 0u64..100) {
            let a = ConfusionCounts { hits: h, misses: m, false_alarms: fa, correct_negatives: 0 };
            let b = ConfusionCounts { hits: h + 1, ..a };
            prop_assert!(ts(&b) >= ts(&a));
            prop_assert!((0.0..=100.0).contains(&ts(&a)));
        }
    }
}
