//! Gradient checks at toy dimensions and the attention scaling benchmark.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{classify_levels, synth_sample, SynthConfig};
use crate::hyag::{
    full_self_attention, AttentionKind, BlockConfig, GroupingAttention, HyagLayer, NeighborhoodFfn,
};
use crate::metok::{self, GroupSpec, Permutation};
use crate::model::{Model, ModelConfig};
use crate::nn::Conv1d;
use crate::tensor::{grad_check, GradCheckOptions, GradReport, Graph, ParamStore, Tensor, Var};
use crate::train::{dice_loss, loss_for, recall_loss, LossKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    Ga,
    Nffn,
    Block,
    Model,
    Losses,
}

impl Component {
    pub const ALL: [Component; 5] = [Self::Ga, Self::Nffn, Self::Block, Self::Model, Self::Losses];
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ga" => Ok(Self::Ga),
            "nffn" => Ok(Self::Nffn),
            "block" => Ok(Self::Block),
            "model" => Ok(Self::Model),
            "losses" => Ok(Self::Losses),
            _ => Err(Error::Config(format!(
                "unknown component '{s}' (ga, nffn, block, model, losses)"
            ))),
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ga => "ga",
            Self::Nffn => "nffn",
            Self::Block => "block",
            Self::Model => "model",
            Self::Losses => "losses",
        })
    }
}

/// Toy model used by the gradient checks: 16×16 grid, p=4, d=8, g=4, s=2, j=1.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        height: 16,
        width: 16,
        variables: 2,
        history: 2,
        horizon: 1,
        patch: 4,
        dim: 8,
        group: 4,
        encoder_depth: 1,
        translator_depth: 1,
        heads: 2,
        ffn_ratio: 2,
        translator_ffn_ratio: 2,
        decoder_dim: 8,
        ..ModelConfig::default()
    }
}

const TOY_N: usize = 16;
const TOY_D: usize = 8;
const TOY_G: usize = 4;

fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Contract `y` with fixed random weights so every output element matters.
fn contract(g: &mut Graph, y: Var, w: &Tensor) -> Result<Var> {
    let w = g.constant(w.clone());
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// Run the checks for one component. Each entry names the checked function.
pub fn gradcheck(
    component: Component,
    seed: u64,
    opts: &GradCheckOptions,
) -> Result<Vec<(String, GradReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let w = rand_tensor(&[TOY_N, TOY_D], &mut rng);
    let mut out = Vec::new();
    match component {
        Component::Ga => {
            let ga = GroupingAttention::new(&mut store, "ga", TOY_D, 2, &mut rng)?;
            let z = store.add("z", rand_tensor(&[TOY_N, TOY_D], &mut rng));
            let e = store.add("e", rand_tensor(&[TOY_N / TOY_G, TOY_D], &mut rng));
            let rep = grad_check(
                |g, s| {
                    let (zv, ev) = (g.param(s, z), g.param(s, e));
                    let y = ga.forward(g, s, zv, ev)?.out;
                    contract(g, y, &w)
                },
                &store,
                opts,
            )?;
            out.push(("grouping_attention".into(), rep));
        }
        Component::Nffn => {
            let f = NeighborhoodFfn::new(&mut store, "nffn", TOY_D, 4 * TOY_D, TOY_G, &mut rng)?;
            let z = store.add("z", rand_tensor(&[TOY_N, TOY_D], &mut rng));
            let rep = grad_check(
                |g, s| {
                    let zv = g.param(s, z);
                    let y = f.forward(g, s, zv)?;
                    contract(g, y, &w)
                },
                &store,
                opts,
            )?;
            out.push(("neighborhood_ffn".into(), rep));
        }
        Component::Block => {
            for pre_norm in [false, true] {
                let mut store = ParamStore::new();
                let cfg = BlockConfig {
                    dim: TOY_D,
                    heads: 2,
                    d_ff: 2 * TOY_D,
                    group: TOY_G,
                    pre_norm,
                    attention: AttentionKind::Grouping,
                };
                let layer = HyagLayer::new(&mut store, "layer", TOY_N, &cfg, &mut rng)?;
                let z = store.add("z", rand_tensor(&[TOY_N, TOY_D], &mut rng));
                let perm = Permutation::random(TOY_N, &mut rng);
                let rep = grad_check(
                    |g, s| {
                        let zv = g.param(s, z);
                        let zh = metok::rearrange(g, zv, &perm)?;
                        let y = layer.forward(g, s, zh, &perm)?;
                        let y = metok::unshuffle(g, y, &perm)?;
                        contract(g, y, &w)
                    },
                    &store,
                    opts,
                )?;
                let name = if pre_norm { "block_pre_norm" } else { "block" };
                out.push((name.into(), rep));
            }
        }
        Component::Model => {
            let cfg = ModelConfig {
                seed,
                ..toy_model_config()
            };
            let model = Model::new(cfg.clone())?;
            let scfg = SynthConfig {
                samples: 1,
                height: cfg.height,
                width: cfg.width,
                history: cfg.history,
                horizon: cfg.horizon,
                variables: cfg.variables,
                storms_min: 2,
                storms_max: 3,
                intensity_mu: 1.5,
                ..SynthConfig::default()
            };
            let sample = synth_sample(&scfg, seed, 0)?;
            let rep = grad_check(
                |g, s| {
                    let y = model.forward_with(g, s, &sample.inputs)?;
                    loss_for(g, LossKind::Dice, y, &sample.targets)
                },
                &model.store,
                opts,
            )?;
            out.push(("model_dice".into(), rep));
        }
        Component::Losses => {
            let x = store.add(
                "logits",
                Tensor::from_fn(&[4, 4, 5], |_| rng.random_range(-2.0..2.0)),
            );
            let r = store.add("amounts", rand_tensor(&[4, 4], &mut rng));
            let precip = Tensor::from_fn(&[4, 4], |_| {
                if rng.random::<f64>() < 0.3 {
                    0.0
                } else {
                    rng.random_range(0.0..30.0)
                }
            });
            let labels = classify_levels(&precip)?;
            for kind in [
                LossKind::Dice,
                LossKind::Recall,
                LossKind::Ce,
                LossKind::Mse,
            ] {
                let rep = grad_check(
                    |g, s| match kind {
                        LossKind::Dice => {
                            let v = g.param(s, x);
                            dice_loss(g, v, &labels)
                        }
                        LossKind::Recall => {
                            let v = g.param(s, x);
                            recall_loss(g, v, &labels)
                        }
                        LossKind::Ce => {
                            let v = g.param(s, x);
                            loss_for(g, kind, v, &precip)
                        }
                        LossKind::Mse => {
                            let v = g.param(s, r);
                            loss_for(g, kind, v, &precip)
                        }
                    },
                    &store,
                    opts,
                )?;
                out.push((format!("{kind}_loss"), rep));
            }
        }
    }
    Ok(out)
}

/// One row of the attention scaling benchmark.
#[derive(Clone, Debug, Serialize)]
pub struct ScalingRow {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub ga_macs: u64,
    pub full_macs: u64,
    pub ga_seconds: f64,
    pub full_seconds: f64,
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let k = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / k, ly.iter().sum::<f64>() / k);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Time one grouping-attention and one full self-attention forward pass per
/// size, with `m` groups held fixed. Reports the best of `reps` runs.
pub fn attention_scaling(
    sizes: &[usize],
    m: usize,
    d: usize,
    heads: usize,
    reps: usize,
    seed: u64,
) -> Result<Vec<ScalingRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let attn = GroupingAttention::new(&mut store, "attn", d, heads, &mut rng)?;
    let mut rows = Vec::with_capacity(sizes.len());
    for &n in sizes {
        if m == 0 || n % m != 0 {
            return Err(Error::Config(format!(
                "{m} groups do not divide {n} tokens"
            )));
        }
        let spec = GroupSpec::new(n, n / m)?;
        let mut s = store.clone();
        let conv = Conv1d::new(
            &mut s,
            "embed",
            d,
            d,
            spec.group_size,
            spec.group_size,
            &mut rng,
        );
        let z = rand_tensor(&[n, d], &mut rng);
        let (mut ga_t, mut full_t) = (f64::INFINITY, f64::INFINITY);
        let (mut ga_macs, mut full_macs) = (0, 0);
        for _ in 0..reps.max(1) {
            let t = Instant::now();
            let mut g = Graph::new();
            let zv = g.constant(z.clone());
            let e = metok::group_embed(&mut g, &s, zv, &conv, &spec)?;
            ga_macs = attn.forward(&mut g, &s, zv, e)?.score_macs;
            ga_t = ga_t.min(t.elapsed().as_secs_f64());

            let t = Instant::now();
            let mut g = Graph::new();
            let zv = g.constant(z.clone());
            full_macs = full_self_attention(&mut g, &s, &attn, zv)?.score_macs;
            full_t = full_t.min(t.elapsed().as_secs_f64());
        }
        rows.push(ScalingRow {
            n,
            m,
            d,
            ga_macs,
            full_macs,
            ga_seconds: ga_t,
            full_seconds: full_t,
        });
    }
    Ok(rows)
}

/// Fitted exponents: `(ga_macs, full_macs, ga_time, full_time)`.
pub fn scaling_slopes(rows: &[ScalingRow]) -> (f64, f64, f64, f64) {
    let n: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let col = |f: &dyn Fn(&ScalingRow) -> f64| rows.iter().map(f).collect::<Vec<f64>>();
    (
        loglog_slope(&n, &col(&|r| r.ga_macs as f64)),
        loglog_slope(&n, &col(&|r| r.full_macs as f64)),
        loglog_slope(&n, &col(&|r| r.ga_seconds)),
        loglog_slope(&n, &col(&|r| r.full_seconds)),
    )
}
