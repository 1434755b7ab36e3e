use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_LEVELS: usize = 5;

/// Lower bounds (mm) of the left-closed intensity intervals
/// `[0, 0.1) [0.1, 4) [4, 13) [13, 25) [25, ∞)`.
pub const LEVEL_BOUNDS: [f64; NUM_LEVELS] = [0.0, 0.1, 4.0, 13.0, 25.0];

/// Rainless, light rain, moderate rain, heavy rain, rainstorm.
pub const LEVEL_NAMES: [&str; NUM_LEVELS] = ["RL", "LR", "MR", "HR", "RS"];

/// Intensity level of a single precipitation amount.
pub fn classify_level(p: f64) -> Result<u8> {
    if !p.is_finite() || p < 0.0 {
        return Err(Error::Input(format!(
            "precipitation {p} is not a finite non-negative amount"
        )));
    }
    Ok(LEVEL_BOUNDS[1..].iter().take_while(|&&b| p >= b).count() as u8)
}

/// Per-cell intensity levels with the shape of the source field.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LevelField {
    shape: Vec<usize>,
    levels: Vec<u8>,
}

impl LevelField {
    pub fn new(shape: Vec<usize>, levels: Vec<u8>) -> Result<Self> {
        if shape.iter().product::<usize>() != levels.len() {
            return Err(Error::InvalidTensor(format!(
                "level shape {shape:?} does not hold {} cells",
                levels.len()
            )));
        }
        if let Some(bad) = levels.iter().find(|&&l| l as usize >= NUM_LEVELS) {
            return Err(Error::Input(format!("level {bad} out of range")));
        }
        Ok(Self { shape, levels })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn levels(&self) -> &[u8] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Cells per level.
    pub fn histogram(&self) -> [usize; NUM_LEVELS] {
        let mut h = [0; NUM_LEVELS];
        for &l in &self.levels {
            h[l as usize] += 1;
        }
        h
    }

    /// Lower-bound precipitation of each cell's level, so that
    /// `classify_levels(representative)` returns `self`.
    pub fn representative_precip(&self) -> Tensor {
        Tensor::new(
            self.shape.clone(),
            self.levels
                .iter()
                .map(|&l| LEVEL_BOUNDS[l as usize])
                .collect(),
        )
        .expect("shape already validated")
    }
}

/// Map every cell to its intensity level.
pub fn classify_levels(precip: &Tensor) -> Result<LevelField> {
    let levels = precip
        .data()
        .iter()
        .map(|&p| classify_level(p))
        .collect::<Result<Vec<_>>>()?;
    LevelField::new(precip.shape().to_vec(), levels)
}
