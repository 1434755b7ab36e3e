//! Train-and-verify sweeps over one model setting at a time.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::Sample;
use crate::hyag::AttentionKind;
use crate::metok::OrderingStrategy;
use crate::model::{Model, ModelConfig};
use crate::posembed::PosKind;
use crate::train::{evaluate, train_loop, RunOptions, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Axis {
    Ordering,
    GroupSize,
    Attention,
    Posembed,
    Depth,
    Skip,
    /// Number of recent steps whose precipitation ranks the patches.
    ScoreWindow,
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ordering" => Ok(Self::Ordering),
            "group-size" => Ok(Self::GroupSize),
            "attention" => Ok(Self::Attention),
            "posembed" => Ok(Self::Posembed),
            "depth" => Ok(Self::Depth),
            "skip" => Ok(Self::Skip),
            "score-window" => Ok(Self::ScoreWindow),
            _ => Err(Error::Config(format!(
                "unknown axis '{s}' (ordering, group-size, attention, posembed, depth, skip, score-window)"
            ))),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ordering => "ordering",
            Self::GroupSize => "group-size",
            Self::Attention => "attention",
            Self::Posembed => "posembed",
            Self::Depth => "depth",
            Self::Skip => "skip",
            Self::ScoreWindow => "score-window",
        })
    }
}

fn parse_list<T: FromStr<Err = Error>>(values: &[String]) -> Result<Vec<T>> {
    values.iter().map(|v| v.trim().parse()).collect()
}

fn parse_usize(values: &[String]) -> Result<Vec<usize>> {
    values
        .iter()
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("'{v}' is not a non-negative integer")))
        })
        .collect()
}

/// Labelled model configurations for `axis`. `values` overrides the default
/// sweep where one makes sense.
pub fn variants(
    axis: Axis,
    base: &ModelConfig,
    values: &[String],
) -> Result<Vec<(String, ModelConfig)>> {
    let with = |label: String, f: &dyn Fn(&mut ModelConfig)| {
        let mut c = base.clone();
        f(&mut c);
        (label, c)
    };
    let out: Vec<(String, ModelConfig)> = match axis {
        Axis::Ordering => {
            let v = if values.is_empty() {
                vec![
                    OrderingStrategy::Original,
                    OrderingStrategy::Random,
                    OrderingStrategy::Precip,
                ]
            } else {
                parse_list(values)?
            };
            v.into_iter()
                .map(|o| with(o.to_string(), &|c| c.ordering = o))
                .collect()
        }
        Axis::GroupSize => {
            let v = if values.is_empty() {
                vec![2, 4, 8, 16]
            } else {
                parse_usize(values)?
            };
            v.into_iter()
                .map(|g| with(format!("g={g}"), &|c| c.group = g))
                .collect()
        }
        Axis::Attention => {
            let v = if values.is_empty() {
                vec![
                    AttentionKind::Grouping,
                    AttentionKind::Sra,
                    AttentionKind::Full,
                ]
            } else {
                parse_list(values)?
            };
            v.into_iter()
                .map(|a| with(a.to_string(), &|c| c.attention = a))
                .collect()
        }
        Axis::Posembed => {
            let v = if values.is_empty() {
                vec![
                    PosKind::Solar,
                    PosKind::Learned,
                    PosKind::Sinusoidal,
                    PosKind::None,
                ]
            } else {
                parse_list(values)?
            };
            v.into_iter()
                .map(|p| with(p.to_string(), &|c| c.pos = p))
                .collect()
        }
        Axis::Depth => {
            let v = if values.is_empty() {
                vec![1, 2, 4]
            } else {
                parse_usize(values)?
            };
            v.into_iter()
                .map(|d| with(format!("encoder_depth={d}"), &|c| c.encoder_depth = d))
                .collect()
        }
        Axis::Skip => [true, false]
            .into_iter()
            .map(|s| with(format!("skip={s}"), &|c| c.skip = s))
            .collect(),
        Axis::ScoreWindow => {
            let v = if values.is_empty() {
                vec![1, 2, 3]
            } else {
                parse_usize(values)?
            };
            v.into_iter()
                .map(|w| with(format!("window={w}"), &|c| c.score_window = w))
                .collect()
        }
    };
    for (label, c) in &out {
        c.validate()
            .map_err(|e| Error::Config(format!("variant {label}: {e}")))?;
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub rank: usize,
    pub val_mean_iou: Option<f64>,
    pub val_mean_ts: f64,
    pub val_rmse: Option<f64>,
    pub final_train_loss: f64,
    pub parameters: usize,
}

/// Train every variant from the same seed and rank by validation mean IoU
/// (or RMSE for regression heads).
pub fn run(
    variants: &[(String, ModelConfig)],
    train_cfg: &TrainConfig,
    train: &[Sample],
    val: &[Sample],
    mut progress: impl FnMut(&str, usize, f64),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(variants.len());
    for (label, cfg) in variants {
        let mut model = Model::new(cfg.clone())?;
        let out = train_loop(
            &mut model,
            train_cfg,
            train,
            val,
            &RunOptions::default(),
            |r| progress(label, r.epoch, r.train_loss),
        )?;
        let rep = evaluate(&model, val)?;
        rows.push(AblationRow {
            label: label.clone(),
            rank: 0,
            val_mean_iou: rep.mean.mean_iou,
            val_mean_ts: rep.mean.mean_ts,
            val_rmse: rep.mean.rmse,
            final_train_loss: out.history.last().map_or(f64::NAN, |r| r.train_loss),
            parameters: model.store.scalar_count(),
        });
    }
    let key = |r: &AblationRow| match (r.val_mean_iou, r.val_rmse) {
        (_, Some(rmse)) => -rmse,
        (Some(iou), None) => iou,
        (None, None) => f64::NEG_INFINITY,
    };
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| key(&rows[b]).total_cmp(&key(&rows[a])));
    for (rank, &i) in order.iter().enumerate() {
        rows[i].rank = rank + 1;
    }
    Ok(rows)
}

/// Rows in rank order as an aligned text table.
pub fn table(rows: &[AblationRow]) -> String {
    let mut sorted: Vec<&AblationRow> = rows.iter().collect();
    sorted.sort_by_key(|r| r.rank);
    let header = [
        "rank",
        "variant",
        "val_mIoU",
        "val_mTS",
        "val_RMSE",
        "train_loss",
        "params",
    ];
    let cells: Vec<Vec<String>> = sorted
        .iter()
        .map(|r| {
            vec![
                r.rank.to_string(),
                r.label.clone(),
                r.val_mean_iou.map_or("-".into(), |v| format!("{v:.2}")),
                format!("{:.2}", r.val_mean_ts),
                r.val_rmse.map_or("-".into(), |v| format!("{v:.4}")),
                format!("{:.5}", r.final_train_loss),
                r.parameters.to_string(),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            cells
                .iter()
                .map(|r| r[c].len())
                .chain([header[c].len()])
                .max()
                .unwrap()
        })
        .collect();
    let mut out = String::new();
    let line = |v: &[String]| {
        v.iter()
            .zip(&widths)
            .map(|(s, w)| format!("{s:>w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    out += &line(&header.map(String::from));
    out.push('\n');
    for r in &cells {
        out += &line(r);
        out.push('\n');
    }
    out
}

pub fn csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(
        "rank,variant,val_mean_iou,val_mean_ts,val_rmse,final_train_loss,parameters\n",
    );
    let mut sorted: Vec<&AblationRow> = rows.iter().collect();
    sorted.sort_by_key(|r| r.rank);
    for r in sorted {
        out += &format!(
            "{},{},{},{},{},{},{}\n",
            r.rank,
            r.label,
            r.val_mean_iou.map_or(String::new(), |v| v.to_string()),
            r.val_mean_ts,
            r.val_rmse.map_or(String::new(), |v| v.to_string()),
            r.final_train_loss,
            r.parameters
        );
    }
    out
}
