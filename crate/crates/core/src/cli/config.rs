use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::f64::consts::PI;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Rho,
    Spectrum,
    FredholmDecay,
    ConeSolve,
    Expansion,
    Sweep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CapConfig {
    /// Opening angle in radians; overrides `theta0_over_pi`.
    pub theta0: Option<f64>,
    pub theta0_over_pi: f64,
}

impl Default for CapConfig {
    fn default() -> Self {
        Self { theta0: None, theta0_over_pi: 0.5 }
    }
}

impl CapConfig {
    pub fn angle(&self) -> f64 {
        self.theta0.unwrap_or(self.theta0_over_pi * PI)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub interior: usize,
    /// Number of grid levels; level j has `interior * 2^j` interior nodes.
    pub refinements: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { interior: 400, refinements: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// The schedule is M = 2, 4, ..., 2^levels.
    pub levels: u32,
    pub lock_tol: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { levels: 16, lock_tol: 1e-2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrumConfig {
    pub ell_max: usize,
    pub k_max: usize,
    /// Eigenfunctions of index below this are written as plot data.
    pub plot_modes: usize,
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        Self { ell_max: 2, k_max: 4, plot_modes: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FredholmConfig {
    pub lambda: f64,
    /// Source exponents a in f = rho^{a-2}; empty means {1, 2, s+1}.
    pub exponents: Vec<f64>,
    /// Range of rho used for the log-log slope.
    pub window: [f64; 2],
    pub rel_tol: f64,
}

impl Default for FredholmConfig {
    fn default() -> Self {
        Self { lambda: 0.0, exponents: Vec::new(), window: [2e-4, 1e-3], rel_tol: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CylinderConfig {
    pub t_max: f64,
    pub ht: f64,
    /// Inflow is `epsilon * phi_1`.
    pub epsilon: f64,
    pub rel_tol: f64,
}

impl Default for CylinderConfig {
    fn default() -> Self {
        Self { t_max: 14.0, ht: 0.05, epsilon: 1e-2, rel_tol: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpansionConfig {
    /// Number of rates extracted.
    pub terms: usize,
    /// The index set is built up to `gamma_max_factor * gamma_1`.
    pub gamma_max_factor: f64,
    pub res_tol: f64,
    /// Remainder-rate window relative to t0; default [2, 2 + 15 / target].
    pub window: Option<[f64; 2]>,
    pub rel_tol: f64,
    pub check_stagnation: bool,
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        Self { terms: 1, gamma_max_factor: 3.5, res_tol: 1e-6, window: None, rel_tol: 0.05, check_stagnation: true }
    }
}

/// One sweep entry; unset fields inherit from the base config.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepEntry {
    pub n: Option<usize>,
    pub theta0: Option<f64>,
    pub theta0_over_pi: Option<f64>,
    pub interior: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: Option<ExperimentKind>,
    pub n: usize,
    pub cap: CapConfig,
    pub grid: GridConfig,
    pub schedule: ScheduleConfig,
    pub spectrum: SpectrumConfig,
    pub fredholm: FredholmConfig,
    pub cylinder: CylinderConfig,
    pub expansion: ExpansionConfig,
    /// When present the pipeline runs once per entry, even if empty.
    pub sweep: Option<Vec<SweepEntry>>,
    pub output: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: None,
            n: 3,
            cap: CapConfig::default(),
            grid: GridConfig::default(),
            schedule: ScheduleConfig::default(),
            spectrum: SpectrumConfig::default(),
            fredholm: FredholmConfig::default(),
            cylinder: CylinderConfig::default(),
            expansion: ExpansionConfig::default(),
            sweep: None,
            output: None,
        }
    }
}

/// A fully resolved run: one dimension, one cap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Case {
    pub n: usize,
    pub theta0: f64,
    pub interior: usize,
}

impl Case {
    pub fn label(&self) -> String {
        format!("n{}_t{:.6}_N{}", self.n, self.theta0 / PI, self.interior)
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive, got {v}")))
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Ok((Self::parse(&text)?, text))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 3 {
            return Err(Error::Config(format!("n must be at least 3, got {}", self.n)));
        }
        let theta0 = self.cap.angle();
        if !(theta0 > 0.0 && theta0 < PI) {
            return Err(Error::Config(format!("cap angle must lie in (0, pi), got {theta0}")));
        }
        if self.grid.interior < 16 {
            return Err(Error::Config(format!("grid.interior must be at least 16, got {}", self.grid.interior)));
        }
        if self.grid.refinements == 0 {
            return Err(Error::Config("grid.refinements must be at least 1".into()));
        }
        positive("schedule.lock_tol", self.schedule.lock_tol)?;
        positive("fredholm.rel_tol", self.fredholm.rel_tol)?;
        positive("fredholm.window[0]", self.fredholm.window[0])?;
        if self.fredholm.window[1] <= self.fredholm.window[0] {
            return Err(Error::Config("fredholm.window must be increasing".into()));
        }
        positive("cylinder.t_max", self.cylinder.t_max)?;
        positive("cylinder.ht", self.cylinder.ht)?;
        positive("cylinder.epsilon", self.cylinder.epsilon)?;
        positive("cylinder.rel_tol", self.cylinder.rel_tol)?;
        positive("expansion.gamma_max_factor", self.expansion.gamma_max_factor)?;
        positive("expansion.res_tol", self.expansion.res_tol)?;
        positive("expansion.rel_tol", self.expansion.rel_tol)?;
        if self.expansion.terms == 0 {
            return Err(Error::Config("expansion.terms must be at least 1".into()));
        }
        for (i, e) in self.sweep.iter().flatten().enumerate() {
            let mut c = self.clone();
            c.sweep = None;
            c.apply(e);
            c.validate().map_err(|err| Error::Config(format!("sweep entry {i}: {err}")))?;
        }
        Ok(())
    }

    fn apply(&mut self, e: &SweepEntry) {
        if let Some(n) = e.n {
            self.n = n;
        }
        if let Some(f) = e.theta0_over_pi {
            self.cap = CapConfig { theta0: None, theta0_over_pi: f };
        }
        if let Some(t) = e.theta0 {
            self.cap.theta0 = Some(t);
        }
        if let Some(i) = e.interior {
            self.grid.interior = i;
        }
    }

    /// Cases in run order.
    pub fn cases(&self) -> Vec<Case> {
        let base = |c: &Self| Case { n: c.n, theta0: c.cap.angle(), interior: c.grid.interior };
        match &self.sweep {
            None => vec![base(self)],
            Some(entries) => entries
                .iter()
                .map(|e| {
                    let mut c = self.clone();
                    c.apply(e);
                    base(&c)
                })
                .collect(),
        }
    }

    /// Hex SHA-256 of the canonical serialization of the resolved config.
    pub fn hash(source: &str) -> String {
        Sha256::digest(source.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_fields_are_rejected() {
        let err = ExperimentConfig::parse("n = 3\n[grid]\ninterior = 100\nrefine = 2\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("refine") && msg.contains("line"), "{msg}");
    }

    #[test]
    fn sweep_resolves_overrides() {
        let cfg =
            ExperimentConfig::parse("n = 4\n[grid]\ninterior = 64\n[[sweep]]\ntheta0_over_pi = 0.25\n[[sweep]]\nn = 3\ninterior = 32\n")
                .unwrap();
        let cases = cfg.cases();
        assert_eq!(cases.len(), 2);
        assert_eq!((cases[0].n, cases[0].interior), (4, 64));
        assert!((cases[0].theta0 - PI / 4.0).abs() < 1e-15);
        assert_eq!((cases[1].n, cases[1].interior), (3, 32));
        assert!((cases[1].theta0 - PI / 2.0).abs() < 1e-15);
    }

    #[test]
    fn empty_sweep_has_no_cases() {
        let cfg = ExperimentConfig::parse("kind = \"sweep\"\nsweep = []\n").unwrap();
        assert!(cfg.cases().is_empty());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for text in ["n = 2", "[cap]\ntheta0 = 4.0", "[cylinder]\nht = -1.0", "[[sweep]]\ninterior = 4"] {
            assert!(matches!(ExperimentConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }
}
