//! Run configuration: defaults, a `key = value` file and command-line
//! overrides, applied in that order.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anisolve::parallel::square_side;
use anisolve::{GridShape, MultigridConfig, StopCriteria};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config file line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("invalid value {value:?} for {key}: {message}")]
    Value { key: String, value: String, message: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SolverChoice {
    Cg,
    Mg,
}

impl SolverChoice {
    pub fn name(self) -> &'static str {
        match self {
            SolverChoice::Cg => "cg",
            SolverChoice::Mg => "mg",
        }
    }
}

impl fmt::Display for SolverChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SolverChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cg" => Ok(SolverChoice::Cg),
            "mg" => Ok(SolverChoice::Mg),
            _ => Err("expected cg or mg".into()),
        }
    }
}

/// How the right-hand side is generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum RhsMode {
    /// Independent U[0,1) values from a seeded stream per global column.
    Random,
    /// `f = A u*` for the smooth field `u* = sin(pi x) sin(pi y) cos(pi z / H)`.
    Manufactured,
    Zero,
}

impl RhsMode {
    pub fn name(self) -> &'static str {
        match self {
            RhsMode::Random => "random",
            RhsMode::Manufactured => "manufactured",
            RhsMode::Zero => "zero",
        }
    }
}

impl FromStr for RhsMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(RhsMode::Random),
            "manufactured" => Ok(RhsMode::Manufactured),
            "zero" => Ok(RhsMode::Zero),
            _ => Err("expected random, manufactured or zero".into()),
        }
    }
}

/// Every setting of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub solver: SolverChoice,
    /// Global number of columns per horizontal direction.
    pub nx: usize,
    pub nz: usize,
    pub nu_cfl: f64,
    pub epsilon: f64,
    pub levels: usize,
    /// Coarsest-level smoother iterations; `None` follows the CFL schedule.
    pub coarse_smooths: Option<usize>,
    pub ranks: usize,
    pub max_iter: usize,
    pub seed: u64,
    pub rhs: RhsMode,
    pub depth: f64,
    pub lambda: f64,
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            solver: SolverChoice::Mg,
            nx: 128,
            nz: 128,
            nu_cfl: 8.4,
            epsilon: 1e-5,
            levels: anisolve::multigrid::DEFAULT_LEVELS,
            coarse_smooths: None,
            ranks: 1,
            max_iter: 1000,
            seed: 2024,
            rhs: RhsMode::Random,
            depth: 0.01,
            lambda: 1.0,
            output: None,
        }
    }
}

/// Settings given explicitly, by the config file or on the command line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigOverrides {
    pub solver: Option<SolverChoice>,
    pub nx: Option<usize>,
    pub nz: Option<usize>,
    pub nu_cfl: Option<f64>,
    pub epsilon: Option<f64>,
    pub levels: Option<usize>,
    pub coarse_smooths: Option<usize>,
    pub ranks: Option<usize>,
    pub max_iter: Option<usize>,
    pub seed: Option<u64>,
    pub rhs: Option<RhsMode>,
    pub depth: Option<f64>,
    pub lambda: Option<f64>,
    pub output: Option<PathBuf>,
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.into(),
        value: value.into(),
        message: e.to_string(),
    })
}

impl ConfigOverrides {
    /// Parses `key = value` lines; `#` starts a comment, blank lines are ignored.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut out = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: n + 1,
                message: format!("expected key = value, got {line:?}"),
            })?;
            out.set(key.trim(), value.trim())?;
        }
        Ok(out)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "solver" => self.solver = Some(parse_value(key, value)?),
            "nx" => self.nx = Some(parse_value(key, value)?),
            "nz" => self.nz = Some(parse_value(key, value)?),
            "cfl" | "nu_cfl" => self.nu_cfl = Some(parse_value(key, value)?),
            "epsilon" => self.epsilon = Some(parse_value(key, value)?),
            "levels" => self.levels = Some(parse_value(key, value)?),
            "coarse_smooths" => self.coarse_smooths = Some(parse_value(key, value)?),
            "ranks" => self.ranks = Some(parse_value(key, value)?),
            "max_iter" => self.max_iter = Some(parse_value(key, value)?),
            "seed" => self.seed = Some(parse_value(key, value)?),
            "rhs" => self.rhs = Some(parse_value(key, value)?),
            "depth" => self.depth = Some(parse_value(key, value)?),
            "lambda" => self.lambda = Some(parse_value(key, value)?),
            "output" => self.output = Some(PathBuf::from(value)),
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Applies every setting present in `self` on top of `config`.
    pub fn apply(&self, config: &mut RunConfig) {
        macro_rules! take {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field.clone() { config.$field = v; })*
            };
        }
        take!(solver, nx, nz, nu_cfl, epsilon, levels, ranks, max_iter, seed, rhs, depth, lambda);
        if let Some(c) = self.coarse_smooths {
            config.coarse_smooths = Some(c);
        }
        if let Some(p) = &self.output {
            config.output = Some(p.clone());
        }
    }
}

impl RunConfig {
    /// Defaults, then the config file (if any), then `flags`; validated.
    pub fn resolve(file: Option<&Path>, flags: &ConfigOverrides) -> Result<Self, ConfigError> {
        let mut config = Self::default();
        if let Some(path) = file {
            ConfigOverrides::from_file(path)?.apply(&mut config);
        }
        flags.apply(&mut config);
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.nx == 0 || self.nz == 0 {
            return invalid(format!("grid sizes must be positive (nx = {}, nz = {})", self.nx, self.nz));
        }
        if !(self.nu_cfl > 0.0 && self.nu_cfl.is_finite()) {
            return invalid(format!("the CFL number must be positive, got {}", self.nu_cfl));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return invalid(format!("epsilon must lie in (0, 1), got {}", self.epsilon));
        }
        if !(self.depth > 0.0) || !(self.lambda > 0.0) {
            return invalid("depth and lambda must be positive".into());
        }
        if self.max_iter == 0 {
            return invalid("max_iter must be at least 1".into());
        }
        let s = square_side(self.ranks).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !self.nx.is_multiple_of(s) {
            return invalid(format!("{} columns cannot be split over a {s}x{s} rank grid", self.nx));
        }
        if self.solver == SolverChoice::Mg {
            if self.levels == 0 {
                return invalid("multigrid needs at least one level".into());
            }
            if self.coarse_smooths == Some(0) {
                return invalid("coarse_smooths must be at least 1".into());
            }
            let local = self.nx / s;
            let factor = 1usize.checked_shl(self.levels as u32 - 1).unwrap_or(0);
            if factor == 0 || !local.is_multiple_of(factor) {
                return invalid(format!(
                    "a local grid of {local} columns cannot be coarsened to {} levels",
                    self.levels
                ));
            }
        }
        Ok(())
    }

    pub fn stop_criteria(&self) -> StopCriteria {
        StopCriteria::new(self.epsilon, self.max_iter).expect("validated")
    }

    pub fn multigrid_config(&self) -> MultigridConfig {
        let mut config = MultigridConfig::for_cfl(self.levels, self.nu_cfl);
        if let Some(c) = self.coarse_smooths {
            config.coarse_smooths = c;
        }
        config
    }

    pub fn global_shape(&self) -> GridShape {
        GridShape::new(self.nx, self.nx, self.nz, 1).expect("validated")
    }
}
