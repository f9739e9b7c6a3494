use std::fmt;
use std::fs;
use std::path::Path;

use cdscope::probe::ProbeConfig;
use cdscope::sae::TrainConfig;
use cdscope::store::DType;
use serde::{Deserialize, Serialize};

/// Bad input detected before any work starts. Maps to exit code 1.
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

pub fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

/// Everything that shapes a run apart from file paths. Loaded from TOML, then
/// patched by command-line flags, then recorded verbatim in every manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads for data-parallel stages; 0 uses every core.
    pub threads: usize,
    pub layer: Option<String>,
    pub sae: SaeSection,
    pub scc: SccSection,
    pub cds: CdsSection,
    pub ablate: AblateSection,
    pub probe: ProbeSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaeSection {
    pub expansion: usize,
    pub k: usize,
    pub k_aux: usize,
    pub alpha: f64,
    pub lr: f64,
    pub steps: u64,
    pub batch: usize,
    pub dead_threshold: u64,
    pub tokens_per_image: usize,
    pub dtype: String,
}

impl Default for SaeSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        SaeSection {
            expansion: 32,
            k: 30,
            k_aux: t.k_aux,
            alpha: t.alpha_aux,
            lr: t.learning_rate,
            steps: t.total_steps,
            batch: t.batch_size,
            dead_threshold: t.dead_threshold_steps,
            tokens_per_image: 4,
            dtype: "f32".into(),
        }
    }
}

impl SaeSection {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            k_aux: self.k_aux,
            alpha_aux: self.alpha,
            dead_threshold_steps: self.dead_threshold,
            learning_rate: self.lr,
            batch_size: self.batch,
            total_steps: self.steps,
            seed,
        }
    }

    pub fn dtype(&self) -> anyhow::Result<DType> {
        parse_dtype(&self.dtype)
            .ok_or_else(|| invalid(format!("sae.dtype: expected \"f32\" or \"f64\", got {:?}", self.dtype)))
    }
}

fn parse_dtype(s: &str) -> Option<DType> {
    match s {
        "f32" => Some(DType::F32),
        "f64" => Some(DType::F64),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SccSection {
    pub grid_p: usize,
    pub patch_n: usize,
    pub shift: usize,
}

impl Default for SccSection {
    fn default() -> Self {
        SccSection {
            grid_p: 14,
            patch_n: 16,
            shift: 1,
        }
    }
}

/// Published thresholds for the three CLIP encoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
pub enum Preset {
    #[serde(rename = "clip-b16")]
    #[value(name = "clip-b16")]
    ClipB16,
    #[serde(rename = "clip-l14")]
    #[value(name = "clip-l14")]
    ClipL14,
    #[serde(rename = "clip-l14-336")]
    #[value(name = "clip-l14-336")]
    ClipL14_336,
}

impl Preset {
    pub fn gamma(self) -> f64 {
        match self {
            Preset::ClipB16 => 0.14,
            Preset::ClipL14 => 0.20,
            Preset::ClipL14_336 => 0.13,
        }
    }

    pub fn tau(self) -> f64 {
        match self {
            Preset::ClipB16 => 60.0,
            Preset::ClipL14 | Preset::ClipL14_336 => 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CdsSection {
    pub k_cds: usize,
    pub model: Option<Preset>,
    /// Overrides the preset threshold when set.
    pub gamma: Option<f64>,
    pub tau: Option<f64>,
    pub hist_bins: usize,
    pub awcds_bins: usize,
}

impl Default for CdsSection {
    fn default() -> Self {
        CdsSection {
            k_cds: 5,
            model: None,
            gamma: None,
            tau: None,
            hist_bins: 20,
            awcds_bins: 10,
        }
    }
}

impl CdsSection {
    pub fn gamma(&self) -> f64 {
        self.gamma.unwrap_or(self.model.unwrap_or(Preset::ClipB16).gamma())
    }

    pub fn tau(&self) -> f64 {
        self.tau.unwrap_or(self.model.unwrap_or(Preset::ClipB16).tau())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub normalize: bool,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection { normalize: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub epochs: usize,
    pub batch: usize,
    pub momentum: f64,
    pub lr_min: f64,
    pub lr_max: f64,
    pub wd_min: f64,
    pub wd_max: f64,
    pub trials: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        let p = ProbeConfig::default();
        ProbeSection {
            epochs: p.epochs,
            batch: p.batch,
            momentum: p.momentum,
            lr_min: p.lr_range.0,
            lr_max: p.lr_range.1,
            wd_min: p.wd_range.0,
            wd_max: p.wd_range.1,
            trials: p.trials,
        }
    }
}

impl ProbeSection {
    pub fn probe_config(&self, seed: u64) -> ProbeConfig {
        ProbeConfig {
            epochs: self.epochs,
            batch: self.batch,
            momentum: self.momentum,
            lr_range: (self.lr_min, self.lr_max),
            wd_range: (self.wd_min, self.wd_max),
            trials: self.trials,
            seed,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| invalid(format!("config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| invalid(format!("config {}: {e}", path.display())))
    }

    /// Range checks with the offending key in every message.
    pub fn validate(&self) -> anyhow::Result<()> {
        fn positive<T: PartialOrd + Default + fmt::Display>(key: &str, v: T) -> anyhow::Result<()> {
            if v > T::default() {
                Ok(())
            } else {
                Err(invalid(format!("{key}: must be positive, got {v}")))
            }
        }
        fn finite_positive(key: &str, v: f64) -> anyhow::Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(invalid(format!("{key}: must be a positive finite number, got {v}")))
            }
        }
        let s = &self.sae;
        positive("sae.expansion", s.expansion)?;
        positive("sae.k", s.k)?;
        positive("sae.k_aux", s.k_aux)?;
        if !(s.alpha >= 0.0 && s.alpha.is_finite()) {
            return Err(invalid(format!("sae.alpha: must be >= 0, got {}", s.alpha)));
        }
        finite_positive("sae.lr", s.lr)?;
        positive("sae.steps", s.steps)?;
        positive("sae.batch", s.batch)?;
        positive("sae.dead_threshold", s.dead_threshold)?;
        positive("sae.tokens_per_image", s.tokens_per_image)?;
        s.dtype()?;

        positive("scc.grid_p", self.scc.grid_p)?;
        positive("scc.patch_n", self.scc.patch_n)?;
        positive("scc.shift", self.scc.shift)?;
        if self.scc.shift >= self.scc.grid_p {
            return Err(invalid(format!(
                "scc.shift: must be below scc.grid_p = {}, got {}",
                self.scc.grid_p, self.scc.shift
            )));
        }

        let c = &self.cds;
        positive("cds.k_cds", c.k_cds)?;
        let gamma = c.gamma();
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(invalid(format!("cds.gamma: must lie in (0, 1), got {gamma}")));
        }
        finite_positive("cds.tau", c.tau())?;
        positive("cds.hist_bins", c.hist_bins)?;
        positive("cds.awcds_bins", c.awcds_bins)?;

        let p = &self.probe;
        positive("probe.epochs", p.epochs)?;
        positive("probe.batch", p.batch)?;
        positive("probe.trials", p.trials)?;
        if !(0.0..1.0).contains(&p.momentum) {
            return Err(invalid(format!(
                "probe.momentum: must lie in [0, 1), got {}",
                p.momentum
            )));
        }
        for (key, lo, hi) in [("probe.lr", p.lr_min, p.lr_max), ("probe.wd", p.wd_min, p.wd_max)] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(invalid(format!(
                    "{key}_min/{key}_max: need 0 < min <= max, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    /// Copy with preset-derived values spelled out, as written to manifests.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        out.cds.gamma = Some(self.cds.gamma());
        out.cds.tau = Some(self.cds.tau());
        out
    }
}
