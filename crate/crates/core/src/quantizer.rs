//! Mean absolute scaling and uniform-grid quantization.
//!
//! A raw series `x` is divided by its mean absolute value `s` (fit on the
//! training portion only), clamped into `[y_min, y_max]` and mapped to the
//! index of the nearest centroid of a uniform grid with `d` cells. Tokens
//! `0..d` are value tokens; `d` and `d + 1` are reserved for PAD and EOS.

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, Error, Result};

pub const DEFAULT_GRID_SIZE: usize = 4094;
pub const DEFAULT_Y_MIN: f64 = -15.0;
pub const DEFAULT_Y_MAX: f64 = 15.0;

/// One univariate series with its forecasting metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub id: String,
    pub values: Vec<f64>,
    pub season_length: usize,
    pub horizon: usize,
}

impl TimeSeries {
    pub fn new(
        id: impl Into<String>,
        values: Vec<f64>,
        season_length: usize,
        horizon: usize,
    ) -> Result<Self> {
        let ts = TimeSeries {
            id: id.into(),
            values,
            season_length,
            horizon,
        };
        ts.validate()?;
        Ok(ts)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::EmptySeries);
        }
        check_finite(&self.values)?;
        if self.horizon == 0 {
            return Err(Error::Config(format!("series '{}': horizon must be >= 1", self.id)));
        }
        if self.season_length == 0 {
            return Err(Error::Config(format!(
                "series '{}': season_length must be >= 1",
                self.id
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// The parameters that identify a grid. Cheap to copy and serialize; the
/// full [`Grid`] is rebuilt from it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub d: usize,
    pub y_min: f64,
    pub y_max: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            d: DEFAULT_GRID_SIZE,
            y_min: DEFAULT_Y_MIN,
            y_max: DEFAULT_Y_MAX,
        }
    }
}

impl GridSpec {
    pub fn build(&self) -> Result<Grid> {
        build_grid(self.d, self.y_min, self.y_max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    spec: GridSpec,
    centroids: Vec<f64>,
    boundaries: Vec<f64>,
    spacing: f64,
}

impl Grid {
    pub fn spec(&self) -> GridSpec {
        self.spec
    }

    /// Number of value tokens.
    pub fn d(&self) -> usize {
        self.spec.d
    }

    pub fn y_min(&self) -> f64 {
        self.spec.y_min
    }

    pub fn y_max(&self) -> f64 {
        self.spec.y_max
    }

    pub fn centroids(&self) -> &[f64] {
        &self.centroids
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    /// Distance between neighbouring centroids.
    pub fn r(&self) -> f64 {
        self.spacing
    }

    pub fn pad_token(&self) -> usize {
        self.spec.d
    }

    pub fn eos_token(&self) -> usize {
        self.spec.d + 1
    }

    /// Value tokens plus the two special tokens.
    pub fn vocab_size(&self) -> usize {
        self.spec.d + 2
    }

    pub fn is_value_token(&self, token: usize) -> bool {
        token < self.spec.d
    }
}

pub fn build_grid(d: usize, y_min: f64, y_max: f64) -> Result<Grid> {
    if d < 2 {
        return Err(Error::Config(format!("grid size d must be >= 2, got {d}")));
    }
    if !(y_min.is_finite() && y_max.is_finite()) || y_min >= y_max {
        return Err(Error::Config(format!(
            "grid bounds must satisfy y_min < y_max, got [{y_min}, {y_max}]"
        )));
    }
    let span = y_max - y_min;
    let last = (d - 1) as f64;
    let mut centroids: Vec<f64> = (0..d)
        .map(|i| y_min + span * (i as f64 / last))
        .collect();
    centroids[d - 1] = y_max;
    let boundaries: Vec<f64> = centroids
        .windows(2)
        .map(|w| 0.5 * (w[0] + w[1]))
        .collect();
    if boundaries.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!(
            "grid [{y_min}, {y_max}] with d = {d} is too fine for 64-bit resolution"
        )));
    }
    Ok(Grid {
        spec: GridSpec { d, y_min, y_max },
        centroids,
        boundaries,
        spacing: span / last,
    })
}

/// Mean absolute value of the training values, or 1 for an all-zero series.
pub fn fit_scale(train_values: &[f64]) -> Result<f64> {
    if train_values.is_empty() {
        return Err(Error::EmptySeries);
    }
    check_finite(train_values)?;
    let total: f64 = train_values.iter().map(|x| x.abs()).sum();
    if total == 0.0 {
        return Ok(1.0);
    }
    Ok(total / train_values.len() as f64)
}

/// Maps a scaled value to its cell. Values outside the grid are clamped;
/// a value sitting exactly on a boundary goes to the upper cell.
pub fn tokenize(y: f64, grid: &Grid) -> Result<usize> {
    if !y.is_finite() {
        return Err(Error::NonFinite { index: 0, value: y });
    }
    let y = y.clamp(grid.y_min(), grid.y_max());
    Ok(grid.boundaries.partition_point(|&b| b <= y))
}

pub fn detokenize(token: usize, grid: &Grid) -> Result<f64> {
    grid.centroids
        .get(token)
        .copied()
        .ok_or(Error::TokenOutOfRange {
            token,
            limit: grid.d(),
        })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizedSeries {
    pub tokens: Vec<usize>,
    pub scale: f64,
    pub grid: GridSpec,
}

/// Scales `ts` by the scale fit on `scale_from` and tokenizes every value.
/// `scale_from` must be the training slice; the caller owns that contract.
pub fn encode_series(ts: &TimeSeries, grid: &Grid, scale_from: &[f64]) -> Result<TokenizedSeries> {
    encode_values(&ts.values, grid, scale_from)
}

pub fn encode_values(values: &[f64], grid: &Grid, scale_from: &[f64]) -> Result<TokenizedSeries> {
    let scale = fit_scale(scale_from)?;
    let tokens = encode_with_scale(values, grid, scale)?;
    Ok(TokenizedSeries {
        tokens,
        scale,
        grid: grid.spec(),
    })
}

pub fn encode_with_scale(values: &[f64], grid: &Grid, scale: f64) -> Result<Vec<usize>> {
    values
        .iter()
        .enumerate()
        .map(|(index, &x)| {
            tokenize(x / scale, grid).map_err(|_| Error::NonFinite { index, value: x })
        })
        .collect()
}

pub fn decode_series(tokenized: &TokenizedSeries, grid: &Grid) -> Result<Vec<f64>> {
    tokenized
        .tokens
        .iter()
        .map(|&t| detokenize(t, grid).map(|c| c * tokenized.scale))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_grid() -> Grid {
        build_grid(5, -2.0, 2.0).unwrap()
    }

    #[test]
    fn fit_scale_examples() {
        assert_eq!(fit_scale(&[1.0, -2.0, 3.0]).unwrap(), 2.0);
        assert_eq!(fit_scale(&[0.0, 0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(fit_scale(&[5.0]).unwrap(), 5.0);
        assert!(matches!(fit_scale(&[]), Err(Error::EmptySeries)));
        assert!(matches!(fit_scale(&[1.0, f64::NAN]), Err(Error::NonFinite { index: 1, .. })));
    }

    #[test]
    fn default_grid_spacing() {
        let g = GridSpec::default().build().unwrap();
        assert_eq!(g.r(), 30.0 / 4093.0);
        assert!((g.r() - 0.0073).abs() < 5e-5);
        assert_eq!(g.vocab_size(), 4096);
        assert_eq!(detokenize(4093, &g).unwrap(), 15.0);
        assert_eq!(detokenize(0, &g).unwrap(), -15.0);
    }

    #[test]
    fn small_grids() {
        let g = small_grid();
        assert_eq!(g.centroids(), &[-2.0, -1.0, 0.0, 1.0, 2.0]);
        assert_eq!(g.boundaries(), &[-1.5, -0.5, 0.5, 1.5]);
        assert_eq!(g.r(), 1.0);

        let g = build_grid(2, 0.0, 1.0).unwrap();
        assert_eq!(g.centroids(), &[0.0, 1.0]);
        assert_eq!(g.boundaries(), &[0.5]);
        assert_eq!(g.r(), 1.0);
    }

    #[test]
    fn bad_grids_rejected() {
        assert!(matches!(build_grid(1, 0.0, 1.0), Err(Error::Config(_))));
        assert!(matches!(build_grid(4, 1.0, 1.0), Err(Error::Config(_))));
        assert!(matches!(build_grid(4, 2.0, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn centroids_within_four_ulps_of_closed_form() {
        for &(d, lo, hi) in &[(4094, -15.0, 15.0), (64, -15.0, 15.0), (7, 0.1, 0.3), (1000, -3.3, 7.1)] {
            let g = build_grid(d, lo, hi).unwrap();
            for (i, &c) in g.centroids().iter().enumerate() {
                let exact = lo + i as f64 * (hi - lo) / (d - 1) as f64;
                let ulp = f64::EPSILON * exact.abs().max(hi.abs()).max(lo.abs());
                assert!((c - exact).abs() <= 4.0 * ulp, "d={d} i={i}: {c} vs {exact}");
            }
        }
    }

    #[test]
    fn tokenize_examples() {
        let g = small_grid();
        assert_eq!(tokenize(0.3, &g).unwrap(), 2);
        assert_eq!(tokenize(-100.0, &g).unwrap(), 0);
        assert_eq!(tokenize(100.0, &g).unwrap(), 4);
        assert_eq!(tokenize(-0.5, &g).unwrap(), 2);
        assert!(tokenize(f64::INFINITY, &g).is_err());
    }

    #[test]
    fn detokenize_examples() {
        let g = small_grid();
        assert_eq!(detokenize(0, &g).unwrap(), -2.0);
        assert_eq!(detokenize(2, &g).unwrap(), 0.0);
        assert!(matches!(detokenize(5, &g), Err(Error::TokenOutOfRange { token: 5, limit: 5 })));
    }

    #[test]
    fn every_centroid_maps_to_its_own_token() {
        for d in [2, 5, 64, 4094] {
            let g = build_grid(d, -15.0, 15.0).unwrap();
            for (j, &c) in g.centroids().iter().enumerate() {
                assert_eq!(tokenize(c, &g).unwrap(), j);
            }
        }
    }

    #[test]
    fn encode_example() {
        let g = small_grid();
        let ts = TimeSeries::new("a", vec![2.0, -4.0, 6.0], 1, 1).unwrap();
        let enc = encode_series(&ts, &g, &ts.values).unwrap();
        assert_eq!(enc.scale, 4.0);
        // 0.5 and 1.5 sit exactly on boundaries and go to the upper cell.
        assert_eq!(enc.tokens, vec![3, 1, 4]);

        let zeros = TimeSeries::new("z", vec![0.0; 4], 1, 1).unwrap();
        let enc = encode_series(&zeros, &g, &zeros.values).unwrap();
        assert_eq!(enc.scale, 1.0);
        assert_eq!(enc.tokens, vec![tokenize(0.0, &g).unwrap(); 4]);
    }

    #[test]
    fn time_series_validation() {
        assert!(TimeSeries::new("a", vec![], 1, 1).is_err());
        assert!(TimeSeries::new("a", vec![1.0, f64::NAN], 1, 1).is_err());
        assert!(TimeSeries::new("a", vec![1.0], 0, 1).is_err());
        assert!(TimeSeries::new("a", vec![1.0], 1, 0).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_within_half_spacing(y in -15.0f64..=15.0) {
            let g = build_grid(64, -15.0, 15.0).unwrap();
            let back = detokenize(tokenize(y, &g).unwrap(), &g).unwrap();
            prop_assert!((back - y).abs() <= g.r() / 2.0);
        }

        #[test]
        fn tokenize_is_monotone(a in -20.0f64..20.0, b in -20.0f64..20.0) {
            let g = build_grid(97, -15.0, 15.0).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(tokenize(lo, &g).unwrap() <= tokenize(hi, &g).unwrap());
        }

        #[test]
        fn scale_equivariance(
            values in proptest::collection::vec(-100.0f64..100.0, 1..40),
            exponent in -20i32..20,
        ) {
            // Power-of-two factors scale exactly in binary floating point, so
            // the scaled series must tokenize identically.
            let alpha = 2f64.powi(exponent);
            let g = build_grid(64, -15.0, 15.0).unwrap();
            let scaled: Vec<f64> = values.iter().map(|x| x * alpha).collect();
            let a = encode_values(&values, &g, &values).unwrap();
            let b = encode_values(&scaled, &g, &scaled).unwrap();
            prop_assert_eq!(a.tokens, b.tokens);
        }

        #[test]
        fn decode_encode_within_half_cell(
            values in proptest::collection::vec(-50.0f64..50.0, 1..60),
        ) {
            let g = build_grid(256, -15.0, 15.0).unwrap();
            let enc = encode_values(&values, &g, &values).unwrap();
            let dec = decode_series(&enc, &g).unwrap();
            for (x, y) in values.iter().zip(&dec) {
                if (x / enc.scale).abs() <= 15.0 {
                    prop_assert!((x - y).abs() <= enc.scale * g.r() / 2.0 * (1.0 + 1e-12));
                }
            }
        }
    }
}
