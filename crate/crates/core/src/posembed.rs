//! Positional embeddings for patch tokens: solar geometry, a learned table,
//! fixed sinusoids, or nothing.

use std::f64::consts::TAU;

use chrono::{DateTime, Datelike};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GeoTime;
use crate::metok::PatchGrid;
use crate::nn::Linear;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Maximum solar declination, degrees.
pub const OBLIQUITY_DEG: f64 = 23.44;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolarContext {
    /// Latitude Φ, radians.
    pub latitude: f64,
    /// Declination δ, radians.
    pub declination: f64,
    /// Local solar hour angle, radians; zero at local noon.
    pub hour_angle: f64,
    pub day_of_year: u32,
}

impl SolarContext {
    /// Context for a point at `lat_deg`, `lon_deg` at `epoch_hours` UTC.
    pub fn at(lat_deg: f64, lon_deg: f64, epoch_hours: f64) -> Result<Self> {
        if !(lat_deg.abs() <= 90.0) || !lon_deg.is_finite() {
            return Err(Error::Input(format!(
                "invalid coordinates ({lat_deg}, {lon_deg})"
            )));
        }
        let day = day_of_year(epoch_hours)?;
        let utc_hour = epoch_hours.rem_euclid(24.0);
        Ok(Self {
            latitude: lat_deg.to_radians(),
            declination: declination(day)?,
            hour_angle: hour_angle(utc_hour, lon_deg),
            day_of_year: day,
        })
    }
}

/// Ordinal day (1..=366) of a time given in hours since the Unix epoch.
pub fn day_of_year(epoch_hours: f64) -> Result<u32> {
    let secs = (epoch_hours * 3600.0).floor();
    if !secs.is_finite() || secs.abs() > 1e15 {
        return Err(Error::Input(format!(
            "time {epoch_hours} h is out of range"
        )));
    }
    DateTime::from_timestamp(secs as i64, 0)
        .map(|t| t.ordinal())
        .ok_or_else(|| Error::Input(format!("time {epoch_hours} h is out of range")))
}

/// δ = −23.44°·cos(2π(day + 10)/365), radians.
pub fn declination(day_of_year: u32) -> Result<f64> {
    if !(1..=366).contains(&day_of_year) {
        return Err(Error::Input(format!(
            "day of year {day_of_year} outside 1..=366"
        )));
    }
    Ok(-OBLIQUITY_DEG.to_radians() * (TAU * (day_of_year as f64 + 10.0) / 365.0).cos())
}

/// Local solar hour angle in radians from UTC hour and longitude (degrees east).
pub fn hour_angle(utc_hour: f64, lon_deg: f64) -> f64 {
    (((utc_hour + lon_deg / 15.0).rem_euclid(24.0)) - 12.0) * 15f64.to_radians()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElevationForm {
    /// `arccos(sinΦ sinδ + cosΦ cosδ cos s)`, in `[0, π]`.
    #[default]
    Arccos,
    /// `arcsin` of the same expression, in `[−π/2, π/2]`.
    Arcsin,
}

pub fn solar_elevation(ctx: &SolarContext, form: ElevationForm) -> f64 {
    let (phi, delta) = (ctx.latitude, ctx.declination);
    let x =
        (phi.sin() * delta.sin() + phi.cos() * delta.cos() * ctx.hour_angle.cos()).clamp(-1.0, 1.0);
    match form {
        ElevationForm::Arccos => x.acos(),
        ElevationForm::Arcsin => x.asin(),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosKind {
    #[default]
    Solar,
    Learned,
    Sinusoidal,
    None,
}

impl std::str::FromStr for PosKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "solar" => Ok(Self::Solar),
            "learned" => Ok(Self::Learned),
            "sinusoidal" => Ok(Self::Sinusoidal),
            "none" => Ok(Self::None),
            _ => Err(Error::Config(format!("unknown positional embedding '{s}'"))),
        }
    }
}

impl std::fmt::Display for PosKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Solar => "solar",
            Self::Learned => "learned",
            Self::Sinusoidal => "sinusoidal",
            Self::None => "none",
        })
    }
}

/// Geographic centre `(lat, lon)` of each patch, row-major.
pub fn patch_centres(grid: &PatchGrid, geo: &GeoTime) -> Vec<(f64, f64)> {
    let mid = (grid.patch as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(grid.n());
    for r in 0..grid.n_rows {
        for c in 0..grid.n_cols {
            let row = (r * grid.patch) as f64 + mid;
            let col = (c * grid.patch) as f64 + mid;
            out.push((geo.lat0 + row * geo.dlat, geo.lon0 + col * geo.dlon));
        }
    }
    out
}

/// `(sin α, cos α)` per step and patch: shape `(t, n, 2)`.
pub fn solar_features(
    grid: &PatchGrid,
    times: &[f64],
    geo: &GeoTime,
    form: ElevationForm,
) -> Result<Tensor> {
    let centres = patch_centres(grid, geo);
    let mut data = Vec::with_capacity(times.len() * centres.len() * 2);
    for &t in times {
        for &(lat, lon) in &centres {
            let a = solar_elevation(&SolarContext::at(lat, lon, t)?, form);
            data.extend([a.sin(), a.cos()]);
        }
    }
    Tensor::new(vec![times.len(), centres.len(), 2], data)
}

/// Fixed encoding of flattened patch indices: `(n, d)`.
pub fn sinusoidal_table(n: usize, d: usize) -> Tensor {
    Tensor::from_fn(&[n, d], |i| {
        let (pos, c) = ((i / d) as f64, i % d);
        let freq = 1.0 / 10000f64.powf((2 * (c / 2)) as f64 / d as f64);
        if c % 2 == 0 {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        }
    })
}

#[derive(Clone, Debug)]
enum PosParams {
    Solar(Linear),
    Learned(ParamId),
    Fixed,
}

#[derive(Clone, Debug)]
pub struct PosEmbed {
    pub kind: PosKind,
    pub form: ElevationForm,
    n: usize,
    d: usize,
    params: PosParams,
}

impl PosEmbed {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        kind: PosKind,
        form: ElevationForm,
        n: usize,
        d: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let params = match kind {
            PosKind::Solar => {
                PosParams::Solar(Linear::new(store, &format!("{name}.solar"), 2, d, rng))
            }
            PosKind::Learned => {
                PosParams::Learned(store.add_uniform(format!("{name}.table"), &[n, d], 0.02, rng))
            }
            PosKind::Sinusoidal | PosKind::None => PosParams::Fixed,
        };
        Self {
            kind,
            form,
            n,
            d,
            params,
        }
    }

    /// `(t, n, d)` embedding, or `None` for [`PosKind::None`] so callers can
    /// skip the addition entirely.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        grid: &PatchGrid,
        times: &[f64],
        geo: &GeoTime,
    ) -> Result<Option<Var>> {
        if grid.n() != self.n {
            return Err(Error::shape("pos_embed", &[grid.n()], &[self.n]));
        }
        let t = times.len();
        let (n, d) = (self.n, self.d);
        let v = match (&self.params, self.kind) {
            (_, PosKind::None) => return Ok(None),
            (PosParams::Solar(proj), _) => {
                let feats =
                    g.constant(solar_features(grid, times, geo, self.form)?.reshape(&[t * n, 2])?);
                let e = proj.forward(g, store, feats)?;
                g.reshape(e, &[t, n, d])?
            }
            (PosParams::Learned(id), _) => {
                let table = g.param(store, *id);
                let rows: Vec<usize> = (0..t).flat_map(|_| 0..n).collect();
                let e = g.gather_rows(table, &rows)?;
                g.reshape(e, &[t, n, d])?
            }
            (PosParams::Fixed, _) => {
                let tab = sinusoidal_table(n, d);
                let data = (0..t).flat_map(|_| tab.data().iter().copied()).collect();
                g.constant(Tensor::new(vec![t, n, d], data)?)
            }
        };
        Ok(Some(v))
    }
}

/// Embedding tensor of shape `(t, n, d)`; zeros for [`PosKind::None`].
pub fn pos_embed(
    embed: &PosEmbed,
    store: &ParamStore,
    grid: &PatchGrid,
    times: &[f64],
    geo: &GeoTime,
) -> Result<Tensor> {
    let mut g = Graph::new();
    Ok(match embed.forward(&mut g, store, grid, times, geo)? {
        Some(v) => g.value(v).clone(),
        None => Tensor::zeros(&[times.len(), embed.n, embed.d]),
    })
}
