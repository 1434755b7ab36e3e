//! Synthetic storm fields advected by a steady divergence-free flow.
//!
//! Each sample draws a handful of Gaussian storm cells with log-normal peak
//! intensities, carries their centres along a uniform drift plus a periodic
//! cellular swirl, and derives humidity/temperature/wind analogues from the
//! resulting precipitation and flow. The domain is periodic.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use super::{GeoTime, GridSequence, Sample, VariableMeta};
use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub samples: usize,
    pub height: usize,
    pub width: usize,
    pub history: usize,
    pub horizon: usize,
    pub variables: usize,
    pub storms_min: usize,
    pub storms_max: usize,
    /// Mean and standard deviation of ln(peak intensity in mm/h).
    pub intensity_mu: f64,
    pub intensity_sigma: f64,
    /// Storm radius range in cells.
    pub radius_min: f64,
    pub radius_max: f64,
    /// Per-step intensity growth rate range (natural log units).
    pub growth: f64,
    /// Maximum uniform drift, cells per step.
    pub drift: f64,
    /// Peak speed of the periodic swirl, cells per step.
    pub swirl: f64,
    pub geo: GeoTime,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            samples: 1000,
            height: 32,
            width: 32,
            history: 6,
            horizon: 6,
            variables: 4,
            storms_min: 1,
            storms_max: 3,
            intensity_mu: 0.6,
            intensity_sigma: 1.2,
            radius_min: 1.5,
            radius_max: 3.5,
            growth: 0.05,
            drift: 1.0,
            swirl: 0.5,
            geo: GeoTime::default(),
        }
    }
}

impl SynthConfig {
    /// Named presets: `default`, `heavy` (wetter, more extreme) and `dry`.
    pub fn with_profile(mut self, profile: &str) -> Result<Self> {
        match profile {
            "default" => {}
            "heavy" => {
                self.intensity_mu += 0.6;
                self.storms_max += 1;
            }
            "dry" => {
                self.intensity_mu -= 0.6;
                self.storms_min = 0;
            }
            other => return Err(Error::Config(format!("unknown levels profile '{other}'"))),
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.height < 2 || self.width < 2 {
            return bad("grid dimensions must be at least 2");
        }
        if self.samples == 0 || self.history == 0 || self.horizon == 0 || self.variables == 0 {
            return bad("samples, history, horizon and variables must be positive");
        }
        if self.storms_min > self.storms_max {
            return bad("storms_min exceeds storms_max");
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) {
            return bad("radius range must be positive and ordered");
        }
        if !(self.intensity_sigma >= 0.0 && self.intensity_mu.is_finite()) {
            return bad("intensity distribution parameters are invalid");
        }
        if !(self.growth >= 0.0 && self.drift >= 0.0 && self.swirl >= 0.0) {
            return bad("growth, drift and swirl must be non-negative");
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.history + self.horizon
    }
}

struct Storm {
    x: f64,
    y: f64,
    radius: f64,
    peak: f64,
    growth: f64,
}

struct Flow {
    drift: (f64, f64),
    amp: f64,
    kx: f64,
    ky: f64,
    phase: (f64, f64),
}

impl Flow {
    /// Velocity `(u, v)` in cells per step at column `x`, row `y`.
    fn at(&self, x: f64, y: f64) -> (f64, f64) {
        let (sx, cx) = (self.kx * x + self.phase.0).sin_cos();
        let (sy, cy) = (self.ky * y + self.phase.1).sin_cos();
        // streamfunction amp/k · sin(kx x + a) sin(ky y + b)
        let k = self.kx.max(self.ky);
        let u = self.amp / k * self.ky * sx * cy;
        let v = -self.amp / k * self.kx * cx * sy;
        (self.drift.0 + u, self.drift.1 + v)
    }
}

fn wrap(v: f64, period: f64) -> f64 {
    v.rem_euclid(period)
}

fn periodic_delta(a: f64, b: f64, period: f64) -> f64 {
    let d = (a - b).rem_euclid(period);
    if d > period / 2.0 {
        d - period
    } else {
        d
    }
}

fn variable_meta(l: usize) -> Vec<VariableMeta> {
    let base = [
        ("relative_humidity", "1"),
        ("temperature_anomaly", "K"),
        ("u_wind", "cell/h"),
        ("v_wind", "cell/h"),
    ];
    (0..l)
        .map(|i| {
            let (name, unit) = base
                .get(i)
                .map(|(n, u)| (n.to_string(), u.to_string()))
                .unwrap_or_else(|| (format!("humidity_level{}", i - base.len() + 1), "1".into()));
            VariableMeta { name, unit }
        })
        .collect()
}

/// Full `history + horizon` sequence for sample `index`.
pub fn synth_sequence(cfg: &SynthConfig, seed: u64, index: usize) -> Result<GridSequence> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let (h, w, l, steps) = (cfg.height, cfg.width, cfg.variables, cfg.steps());
    let (hf, wf) = (h as f64, w as f64);

    let speed = cfg.drift * rng.random_range(0.3..=1.0);
    let dir = rng.random_range(0.0..TAU);
    let flow = Flow {
        drift: (speed * dir.cos(), speed * dir.sin()),
        amp: cfg.swirl * rng.random_range(0.5..=1.0),
        kx: TAU / wf,
        ky: TAU / hf,
        phase: (rng.random_range(0.0..TAU), rng.random_range(0.0..TAU)),
    };
    let intensity = LogNormal::new(cfg.intensity_mu, cfg.intensity_sigma)
        .map_err(|e| Error::Config(format!("intensity distribution: {e}")))?;
    let count = rng.random_range(cfg.storms_min..=cfg.storms_max);
    let mut storms: Vec<Storm> = (0..count)
        .map(|_| Storm {
            x: rng.random_range(0.0..wf),
            y: rng.random_range(0.0..hf),
            radius: rng.random_range(cfg.radius_min..=cfg.radius_max),
            peak: intensity.sample(&mut rng),
            growth: if cfg.growth > 0.0 {
                rng.random_range(-cfg.growth..=cfg.growth)
            } else {
                0.0
            },
        })
        .collect();

    let mut precip = vec![0.0; steps * h * w];
    for k in 0..steps {
        let field = &mut precip[k * h * w..(k + 1) * h * w];
        for s in &storms {
            let peak = s.peak * (s.growth * k as f64).exp();
            let inv = 1.0 / (2.0 * s.radius * s.radius);
            for r in 0..h {
                let dy = periodic_delta(r as f64, s.y, hf);
                for c in 0..w {
                    let dx = periodic_delta(c as f64, s.x, wf);
                    field[r * w + c] += peak * (-(dx * dx + dy * dy) * inv).exp();
                }
            }
        }
        // midpoint step of the storm centres
        for s in &mut storms {
            let (u1, v1) = flow.at(s.x, s.y);
            let (u2, v2) = flow.at(s.x + 0.5 * u1, s.y + 0.5 * v1);
            s.x = wrap(s.x + u2, wf);
            s.y = wrap(s.y + v2, hf);
        }
    }

    let mut vars = vec![0.0; steps * h * w * l];
    for k in 0..steps {
        for r in 0..h {
            for c in 0..w {
                let cell = (k * h + r) * w + c;
                let p = precip[cell];
                let (u, v) = flow.at(c as f64, r as f64);
                let out = &mut vars[cell * l..(cell + 1) * l];
                for (i, o) in out.iter_mut().enumerate() {
                    *o = match i {
                        0 => 0.4 + 0.6 * (p / 2.0).tanh(),
                        1 => 0.5 * (TAU * r as f64 / hf).sin() - 0.4 * p.ln_1p(),
                        2 => u,
                        3 => v,
                        _ => (p / (2.0 + i as f64)).tanh(),
                    };
                }
            }
        }
    }

    GridSequence::new(
        Tensor::new(vec![steps, h, w, l], vars)?,
        Tensor::new(vec![steps, h, w], precip)?,
        variable_meta(l),
        cfg.geo,
    )
}

pub fn synth_sample(cfg: &SynthConfig, seed: u64, index: usize) -> Result<Sample> {
    Sample::from_sequence(&synth_sequence(cfg, seed, index)?, cfg.history)
}

/// `cfg.samples` samples; sample `i` depends only on `(cfg, seed, i)`.
pub fn synth_advect(cfg: &SynthConfig, seed: u64) -> Result<Vec<Sample>> {
    cfg.validate()?;
    parallel::map_range(cfg.samples, |i| synth_sample(cfg, seed, i))
        .into_iter()
        .collect()
}
