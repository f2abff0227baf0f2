use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{BaselineKind, ScoreConfig};
use crate::calibration::SampleSizes;
use crate::embedding::ContrastiveConfig;
use crate::error::{Error, Result};
use crate::nplm::NplmConfig;

/// A test statistic the scan can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    Nplm,
    Baseline(BaselineKind),
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Nplm,
        Method::Baseline(BaselineKind::Mahalanobis),
        Method::Baseline(BaselineKind::Mmd),
        Method::Baseline(BaselineKind::Frechet),
        Method::Baseline(BaselineKind::Supervised),
        Method::Baseline(BaselineKind::IdealSupervised),
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Nplm => "nplm",
            Method::Baseline(k) => k.name(),
        }
    }

    /// Parses a comma-separated list such as `nplm,mahalanobis`.
    pub fn parse_list(list: &str) -> Result<Vec<Method>> {
        let methods: Vec<Method> = list
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect::<Result<_>>()?;
        if methods.is_empty() {
            return Err(Error::Config("empty method list".into()));
        }
        Ok(methods)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "nplm" {
            return Ok(Method::Nplm);
        }
        s.parse::<BaselineKind>()
            .map(Method::Baseline)
            .map_err(|_| Error::Config(format!("unknown method '{s}'")))
    }
}

impl TryFrom<String> for Method {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.name().to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_clusters: usize,
    /// Informative dimensions D.
    pub dim: usize,
    /// Uniform noise dimensions M appended before the rotation.
    pub n_noise_dims: usize,
    pub n_per_class: usize,
    pub held_out_class: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_clusters: 5,
            dim: 4,
            n_noise_dims: 0,
            n_per_class: 10_000,
            held_out_class: 4,
        }
    }
}

/// Train/validation/test fractions applied per class to both pools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: 0.5,
            val: 0.1,
            test: 0.4,
        }
    }
}

impl SplitConfig {
    pub fn fractions(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub embed_dim: usize,
    /// Fraction of training labels moved to a random other class.
    pub label_noise: f64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            embed_dim: 4,
            label_noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanConfig {
    pub n_toys: usize,
    pub f_s: Vec<f64>,
    pub methods: Vec<Method>,
    /// Draw R once and reuse it in every toy.
    pub fixed_reference: bool,
    pub sizes: SampleSizes,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            n_toys: 500,
            f_s: vec![0.005, 0.01, 0.02, 0.05, 0.10],
            methods: vec![Method::Nplm, Method::Baseline(BaselineKind::Mahalanobis)],
            fixed_reference: false,
            sizes: SampleSizes::SYNTHETIC,
        }
    }
}

/// Every setting of one experiment; module seeds all derive from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub synthetic: SyntheticConfig,
    pub split: SplitConfig,
    pub embedding: EmbeddingConfig,
    pub contrastive: ContrastiveConfig,
    pub nplm: NplmConfig,
    pub supervised: ScoreConfig,
    pub scan: ScanConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            synthetic: SyntheticConfig::default(),
            split: SplitConfig::default(),
            embedding: EmbeddingConfig::default(),
            contrastive: ContrastiveConfig::default(),
            nplm: NplmConfig::default(),
            supervised: ScoreConfig::default(),
            scan: ScanConfig::default(),
        }
    }
}

/// Command-line values that replace config entries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub methods: Option<Vec<Method>>,
    pub label_noise: Option<f64>,
    pub embed_dim: Option<usize>,
    pub n_toys: Option<usize>,
    pub fixed_reference: bool,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML file; a missing file is an I/O error.
    pub fn load(path: &Path) -> Result<Self> {
        let context = |e: Error| e.context(path.display().to_string());
        Self::from_toml(&fs::read_to_string(path).map_err(|e| context(e.into()))?).map_err(context)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn apply(mut self, o: &Overrides) -> Result<Self> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(m) = &o.methods {
            self.scan.methods = m.clone();
        }
        if let Some(x) = o.label_noise {
            self.embedding.label_noise = x;
        }
        if let Some(d) = o.embed_dim {
            self.embedding.embed_dim = d;
        }
        if let Some(n) = o.n_toys {
            self.scan.n_toys = n;
        }
        self.scan.fixed_reference |= o.fixed_reference;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let s = &self.synthetic;
        if s.n_clusters < 2 || s.dim == 0 || s.n_per_class == 0 {
            return bad("synthetic: need at least two clusters, one dimension and one point per class");
        }
        if s.held_out_class >= s.n_clusters {
            return bad("synthetic: held_out_class must name one of the clusters");
        }
        let fr = self.split.fractions();
        if fr.iter().any(|&f| !(f > 0.0)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("split: fractions must be positive and sum to 1");
        }
        if self.embedding.embed_dim == 0 {
            return bad("embedding: embed_dim must be positive");
        }
        if !(0.0..1.0).contains(&self.embedding.label_noise) {
            return bad("embedding: label_noise must lie in [0, 1)");
        }
        self.contrastive.validate()?;
        if !self.nplm.widths.is_empty() {
            self.nplm.validate().map_err(|e| Error::Config(format!("nplm: {e}")))?;
        }
        if self.supervised.n_bins < 2 || self.supervised.batch_size == 0 || !(self.supervised.learning_rate > 0.0) {
            return bad("supervised: need n_bins ≥ 2, positive batch size and learning rate");
        }
        let sc = &self.scan;
        if sc.n_toys == 0 {
            return bad("scan: n_toys must be at least 1");
        }
        if sc.f_s.iter().any(|f| !(0.0..1.0).contains(f)) || !sc.f_s.windows(2).all(|w| w[0] < w[1]) {
            return bad("scan: f_s must be strictly ascending values in [0, 1)");
        }
        if sc.methods.is_empty() {
            return bad("scan: no methods selected");
        }
        if sc.sizes.n_ref == 0 || sc.sizes.n_data == 0 {
            return bad("scan: sample sizes must be positive");
        }
        Ok(())
    }
}
