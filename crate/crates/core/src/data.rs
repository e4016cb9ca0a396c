//! Synthetic datasets, the JSONL dataset format, the benchmark suite
//! manifest and the last-`k` train/test split.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::TimeSeries;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Sinusoid,
    Ar1,
    TrendSeasonal,
    RandomWalk,
    Constant,
}

impl GeneratorKind {
    pub const ALL: [GeneratorKind; 5] = [
        GeneratorKind::Sinusoid,
        GeneratorKind::Ar1,
        GeneratorKind::TrendSeasonal,
        GeneratorKind::RandomWalk,
        GeneratorKind::Constant,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            GeneratorKind::Sinusoid => "sinusoid",
            GeneratorKind::Ar1 => "ar1",
            GeneratorKind::TrendSeasonal => "trend_seasonal",
            GeneratorKind::RandomWalk => "random_walk",
            GeneratorKind::Constant => "constant",
        }
    }
}

impl fmt::Display for GeneratorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GeneratorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GeneratorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown generator kind '{s}'")))
    }
}

/// Generator parameters. Each kind reads only the fields it needs:
///
/// | kind            | model                                                   |
/// |-----------------|---------------------------------------------------------|
/// | sinusoid        | `level + A sin(2 pi t / period + phase) + noise`        |
/// | ar1             | `level + z_t`, `z_t = phi z_{t-1} + N(0, noise^2)`      |
/// | trend_seasonal  | `level + slope t + A sin(2 pi t / period + phase) + noise` |
/// | random_walk     | `level + cumulative sum of N(0, noise^2)`               |
/// | constant        | `level + noise`                                         |
///
/// Per series, `level` and `A` are multiplied by a factor drawn from
/// `U[0.5, 1.5]` and the phase is drawn from `U[0, 2 pi)`, so series in one
/// dataset differ in scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorParams {
    pub level: f64,
    pub amplitude: f64,
    pub period: usize,
    pub phi: f64,
    pub slope: f64,
    pub noise: f64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        GeneratorParams {
            level: 1.0,
            amplitude: 1.0,
            period: 12,
            phi: 0.9,
            slope: 0.0,
            noise: 0.0,
        }
    }
}

impl GeneratorParams {
    fn validate(&self, kind: GeneratorKind) -> Result<()> {
        let finite = [self.level, self.amplitude, self.phi, self.slope, self.noise];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("generator parameters must be finite".into()));
        }
        if self.noise < 0.0 {
            return Err(Error::Config(format!("noise must be >= 0, got {}", self.noise)));
        }
        if self.amplitude < 0.0 {
            return Err(Error::Config(format!("amplitude must be >= 0, got {}", self.amplitude)));
        }
        match kind {
            GeneratorKind::Sinusoid | GeneratorKind::TrendSeasonal if self.period < 2 => Err(
                Error::Config(format!("period must be >= 2, got {}", self.period)),
            ),
            GeneratorKind::Ar1 if self.phi.abs() >= 1.0 => Err(Error::Config(format!(
                "AR coefficient must satisfy |phi| < 1, got {}",
                self.phi
            ))),
            _ => Ok(()),
        }
    }
}

/// Everything needed to regenerate one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub name: String,
    pub kind: GeneratorKind,
    pub n_series: usize,
    pub length: usize,
    pub seed: u64,
    pub horizon: usize,
    pub season_length: usize,
    #[serde(default)]
    pub params: GeneratorParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub series: Vec<TimeSeries>,
    pub generator: Option<GeneratorSpec>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for ts in &self.series {
            ts.validate()?;
            if !seen.insert(ts.id.as_str()) {
                return Err(Error::Config(format!(
                    "dataset '{}': duplicate series id '{}'",
                    self.name, ts.id
                )));
            }
        }
        Ok(())
    }
}

/// Seed of series `index` inside a dataset seeded with `seed`.
fn series_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index as u64)
}

/// Builds a dataset from `spec`. Series lengths must leave room for a
/// context: `length > horizon + season_length`.
pub fn generate(spec: &GeneratorSpec) -> Result<Dataset> {
    spec.params.validate(spec.kind)?;
    if spec.n_series == 0 {
        return Err(Error::Config("n_series must be >= 1".into()));
    }
    if spec.horizon == 0 || spec.season_length == 0 {
        return Err(Error::Config("horizon and season_length must be >= 1".into()));
    }
    if spec.length <= spec.horizon + spec.season_length {
        return Err(Error::Config(format!(
            "length {} must exceed horizon + season_length = {}",
            spec.length,
            spec.horizon + spec.season_length
        )));
    }
    let series = (0..spec.n_series)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(series_seed(spec.seed, i));
            let values = generate_values(spec.kind, &spec.params, spec.length, &mut rng);
            TimeSeries::new(
                format!("{}_{i:03}", spec.name),
                values,
                spec.season_length,
                spec.horizon,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        name: spec.name.clone(),
        series,
        generator: Some(spec.clone()),
    })
}

fn generate_values(kind: GeneratorKind, p: &GeneratorParams, length: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let level = p.level * rng.random_range(0.5..1.5);
    let amplitude = p.amplitude * rng.random_range(0.5..1.5);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let noise = Normal::new(0.0, p.noise).expect("noise validated");
    let seasonal = |t: usize| {
        amplitude * (std::f64::consts::TAU * t as f64 / p.period as f64 + phase).sin()
    };
    match kind {
        GeneratorKind::Sinusoid => (0..length)
            .map(|t| level + seasonal(t) + noise.sample(rng))
            .collect(),
        GeneratorKind::TrendSeasonal => (0..length)
            .map(|t| level + p.slope * t as f64 + seasonal(t) + noise.sample(rng))
            .collect(),
        GeneratorKind::Ar1 => {
            // start from the stationary distribution
            let stationary = p.noise / (1.0 - p.phi * p.phi).sqrt();
            let mut z = Normal::new(0.0, stationary).expect("finite").sample(rng);
            (0..length)
                .map(|_| {
                    let out = level + z;
                    z = p.phi * z + noise.sample(rng);
                    out
                })
                .collect()
        }
        GeneratorKind::RandomWalk => {
            let mut x = level;
            (0..length)
                .map(|_| {
                    let out = x;
                    x += noise.sample(rng);
                    out
                })
                .collect()
        }
        GeneratorKind::Constant => (0..length).map(|_| level + noise.sample(rng)).collect(),
    }
}

/// Splits off the last `horizon` observations as the test set.
pub fn split(ts: &TimeSeries) -> Result<(&[f64], &[f64])> {
    let n = ts.values.len();
    if n <= ts.horizon {
        return Err(Error::TooShort {
            len: n,
            reason: format!("cannot hold out a horizon of {}", ts.horizon),
        });
    }
    Ok(ts.values.split_at(n - ts.horizon))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SeriesRecord {
    id: String,
    values: Vec<f64>,
    season_length: usize,
    horizon: usize,
}

/// Reads a JSONL dataset; the dataset name is the file stem.
pub fn load(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut series = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let rec: SeriesRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let ts = TimeSeries::new(rec.id, rec.values, rec.season_length, rec.horizon)
            .map_err(|e| parse_err(e.to_string()))?;
        if !seen.insert(ts.id.clone()) {
            return Err(parse_err(format!("duplicate series id '{}'", ts.id)));
        }
        series.push(ts);
    }
    if series.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: "dataset contains no series".into(),
        });
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Dataset {
        name,
        series,
        generator: None,
    })
}

pub fn save(dataset: &Dataset, path: &Path) -> Result<()> {
    dataset.validate()?;
    let mut out = Vec::new();
    for ts in &dataset.series {
        let rec = SeriesRecord {
            id: ts.id.clone(),
            values: ts.values.clone(),
            season_length: ts.season_length,
            horizon: ts.horizon,
        };
        serde_json::to_writer(&mut out, &rec)
            .map_err(|e| Error::Config(format!("cannot serialize series '{}': {e}", ts.id)))?;
        out.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

/// The benchmark suite: one generator spec per dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteManifest {
    #[serde(rename = "dataset")]
    pub datasets: Vec<GeneratorSpec>,
}

impl SuiteManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Parse { line, message, .. } => Error::Parse {
                path: path.to_path_buf(),
                line,
                message,
            },
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let manifest: SuiteManifest = toml::from_str(text).map_err(|e| Error::Parse {
            path: "<manifest>".into(),
            line: e
                .span()
                .map(|s| text[..s.start].lines().count().max(1))
                .unwrap_or(0),
            message: e.message().to_string(),
        })?;
        let mut names = HashSet::new();
        for spec in &manifest.datasets {
            if !names.insert(spec.name.as_str()) {
                return Err(Error::Config(format!("duplicate dataset name '{}'", spec.name)));
            }
            spec.params.validate(spec.kind)?;
        }
        if manifest.datasets.is_empty() {
            return Err(Error::Config("suite manifest lists no datasets".into()));
        }
        Ok(manifest)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize manifest: {e}")))
    }

    pub fn generate_all(&self) -> Result<Vec<Dataset>> {
        self.datasets.iter().map(generate).collect()
    }
}
