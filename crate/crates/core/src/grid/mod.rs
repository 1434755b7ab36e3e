//! Meteorological grid sequences, their on-disk format, intensity levels and
//! a synthetic long-tailed generator.

mod format;
mod levels;
mod synth;

use serde::{Deserialize, Serialize};

pub use format::{load_grid, read_grid, save_grid, write_grid, FORMAT_VERSION, MAGIC};
pub use levels::{
    classify_level, classify_levels, LevelField, LEVEL_BOUNDS, LEVEL_NAMES, NUM_LEVELS,
};
pub use synth::{synth_advect, synth_sample, synth_sequence, SynthConfig};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableMeta {
    pub name: String,
    pub unit: String,
}

/// Geographic placement and timing of a grid: cell `(row, col)` is centred at
/// `(lat0 + row·dlat, lon0 + col·dlon)` degrees; step `k` is valid at
/// `t0 + k·dt` hours since the Unix epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoTime {
    pub lat0: f64,
    pub lon0: f64,
    pub dlat: f64,
    pub dlon: f64,
    pub t0: f64,
    pub dt: f64,
}

impl Default for GeoTime {
    fn default() -> Self {
        // 0.25° grid in the northern tropics, 2020-06-01T00Z, hourly
        Self {
            lat0: 20.0,
            lon0: 120.0,
            dlat: 0.25,
            dlon: 0.25,
            t0: 441_936.0,
            dt: 1.0,
        }
    }
}

/// A `(t, h, w, l)` stack of meteorological variables with the matching
/// `(t, h, w)` precipitation (mm/h).
#[derive(Clone, Debug, PartialEq)]
pub struct GridSequence {
    pub vars: Tensor,
    pub precip: Tensor,
    pub variables: Vec<VariableMeta>,
    pub geo: GeoTime,
}

impl GridSequence {
    pub fn new(
        vars: Tensor,
        precip: Tensor,
        variables: Vec<VariableMeta>,
        geo: GeoTime,
    ) -> Result<Self> {
        let seq = Self {
            vars,
            precip,
            variables,
            geo,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        let vs = self.vars.shape();
        let ps = self.precip.shape();
        if vs.len() != 4 || ps.len() != 3 || vs[..3] != ps[..] {
            return Err(Error::shape("grid_sequence", vs, ps));
        }
        if self.variables.len() != vs[3] {
            return Err(Error::Input(format!(
                "{} variable descriptors for {} variables",
                self.variables.len(),
                vs[3]
            )));
        }
        if !self.vars.all_finite() {
            return Err(Error::NonFinite("grid variables".into()));
        }
        if self
            .precip
            .data()
            .iter()
            .any(|p| !p.is_finite() || *p < 0.0)
        {
            return Err(Error::Input(
                "precipitation must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.vars.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.vars.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.vars.shape()[2]
    }

    pub fn num_vars(&self) -> usize {
        self.vars.shape()[3]
    }

    /// Precipitation at step `k`, row-major `(h, w)`.
    pub fn precip_at(&self, k: usize) -> &[f64] {
        let hw = self.height() * self.width();
        &self.precip.data()[k * hw..(k + 1) * hw]
    }

    /// Variables at step `k`, row-major `(h, w, l)`.
    pub fn vars_at(&self, k: usize) -> &[f64] {
        let n = self.height() * self.width() * self.num_vars();
        &self.vars.data()[k * n..(k + 1) * n]
    }

    /// Valid time of step `k`, hours since the Unix epoch.
    pub fn time_at(&self, k: usize) -> f64 {
        self.geo.t0 + k as f64 * self.geo.dt
    }

    /// Steps `start..end` as a new sequence with shifted start time.
    pub fn slice_steps(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.steps() {
            return Err(Error::Input(format!(
                "step range {start}..{end} of {}",
                self.steps()
            )));
        }
        let (h, w, l) = (self.height(), self.width(), self.num_vars());
        let vars = Tensor::new(
            vec![end - start, h, w, l],
            self.vars.data()[start * h * w * l..end * h * w * l].to_vec(),
        )?;
        let precip = Tensor::new(
            vec![end - start, h, w],
            self.precip.data()[start * h * w..end * h * w].to_vec(),
        )?;
        let mut geo = self.geo;
        geo.t0 = self.time_at(start);
        Self::new(vars, precip, self.variables.clone(), geo)
    }
}

/// `s` input steps and the `(j, h, w)` precipitation that follows them.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub inputs: GridSequence,
    pub targets: Tensor,
}

impl Sample {
    pub fn new(inputs: GridSequence, targets: Tensor) -> Result<Self> {
        let ts = targets.shape();
        if ts.len() != 3 || ts[1] != inputs.height() || ts[2] != inputs.width() {
            return Err(Error::shape("sample", inputs.precip.shape(), ts));
        }
        if targets.data().iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Input(
                "target precipitation must be finite and non-negative".into(),
            ));
        }
        Ok(Self { inputs, targets })
    }

    /// Split a full sequence into the first `history` steps and the
    /// precipitation of the remaining steps.
    pub fn from_sequence(seq: &GridSequence, history: usize) -> Result<Self> {
        if history == 0 || history >= seq.steps() {
            return Err(Error::Input(format!(
                "history {history} must lie in 1..{}",
                seq.steps()
            )));
        }
        let inputs = seq.slice_steps(0, history)?;
        let future = seq.slice_steps(history, seq.steps())?;
        Self::new(inputs, future.precip)
    }

    pub fn history(&self) -> usize {
        self.inputs.steps()
    }

    pub fn horizon(&self) -> usize {
        self.targets.shape()[0]
    }

    /// Target precipitation at lead `k`.
    pub fn target_at(&self, k: usize) -> &[f64] {
        let hw = self.inputs.height() * self.inputs.width();
        &self.targets.data()[k * hw..(k + 1) * hw]
    }

    /// Reassemble into one `s + j` step sequence. The variables of future
    /// steps are not part of a sample and are written as zeros.
    pub fn to_sequence(&self) -> Result<GridSequence> {
        let (s, j) = (self.history(), self.horizon());
        let (h, w, l) = (
            self.inputs.height(),
            self.inputs.width(),
            self.inputs.num_vars(),
        );
        let mut vars = self.inputs.vars.data().to_vec();
        vars.resize((s + j) * h * w * l, 0.0);
        let mut precip = self.inputs.precip.data().to_vec();
        precip.extend_from_slice(self.targets.data());
        GridSequence::new(
            Tensor::new(vec![s + j, h, w, l], vars)?,
            Tensor::new(vec![s + j, h, w], precip)?,
            self.inputs.variables.clone(),
            self.inputs.geo,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(t: usize) -> GridSequence {
        GridSequence::new(
            Tensor::from_fn(&[t, 2, 3, 1], |i| i as f64),
            Tensor::from_fn(&[t, 2, 3], |i| i as f64 * 0.5),
            vec![VariableMeta {
                name: "q".into(),
                unit: "1".into(),
            }],
            GeoTime::default(),
        )
        .unwrap()
    }

    #[test]
    fn sample_split_and_reassemble() {
        let full = seq(5);
        let sample = Sample::from_sequence(&full, 3).unwrap();
        assert_eq!(sample.history(), 3);
        assert_eq!(sample.horizon(), 2);
        assert_eq!(sample.target_at(0), full.precip_at(3));
        assert_eq!(sample.inputs.time_at(0), full.time_at(0));
        let back = sample.to_sequence().unwrap();
        assert_eq!(back.precip, full.precip);
        assert_eq!(Sample::from_sequence(&back, 3).unwrap(), sample);
    }

    #[test]
    fn rejects_negative_precip() {
        let mut s = seq(2);
        s.precip.data_mut()[0] = -1.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn rejects_mismatched_spatial_dims() {
        let s = seq(2);
        assert!(Sample::new(s, Tensor::zeros(&[1, 3, 3])).is_err());
    }
}
