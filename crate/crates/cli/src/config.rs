//! Run configuration read from TOML. Every field has a default matching the
//! homodimer of the weak-coupling study.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use dyadhops::bath::{ExponentialBath, ExponentialMode};
use dyadhops::grid::UniformGrid;
use dyadhops::heom::HeomSettings;
use dyadhops::model::ExcitonModel;
use dyadhops::response::{HopsSettings, Pathway, ThirdOrderGrids};
use dyadhops::spectra::{FrequencyWindow, SpectrumOptions};
use dyadhops::stats::{log_spaced, Resampling};
use dyadhops::C64;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub bath: BathConfig,
    pub hops: HopsSettings,
    pub heom: HeomSettings,
    pub grids: GridConfig,
    pub linear: LinearConfig,
    /// Pathway labels (`r1`..`r6`) or signal names (`gsb`, `se`, `esa`).
    pub pathways: Vec<String>,
    pub sampling: SamplingConfig,
    pub spectra: SpectraConfig,
    pub error: ErrorConfig,
    pub noise_check: NoiseCheckConfig,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            bath: BathConfig::default(),
            hops: HopsSettings::default(),
            heom: HeomSettings::default(),
            grids: GridConfig::default(),
            linear: LinearConfig::default(),
            pathways: Pathway::ALL.iter().map(|p| p.label().to_string()).collect(),
            sampling: SamplingConfig::default(),
            spectra: SpectraConfig::default(),
            error: ErrorConfig::default(),
            noise_check: NoiseCheckConfig::default(),
            output: PathBuf::from("run"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub epsilon: Vec<f64>,
    /// Nearest-neighbour coupling, used when `coupling` is absent.
    pub v: f64,
    pub coupling: Option<Vec<Vec<f64>>>,
    pub dipole: Vec<f64>,
    pub disorder_sigma: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            epsilon: vec![0.0, 0.0],
            v: 0.3,
            coupling: None,
            dipole: vec![1.0, 1.0],
            disorder_sigma: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeConfig {
    pub p: f64,
    #[serde(default)]
    pub p_imag: f64,
    pub gamma: f64,
    pub omega: f64,
}

impl ModeConfig {
    fn mode(&self) -> ExponentialMode {
        ExponentialMode::new(C64::new(self.p, self.p_imag), C64::new(self.gamma, self.omega))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BathConfig {
    /// Modes attached to every site.
    pub modes: Vec<ModeConfig>,
    /// Explicit per-site mode lists; overrides `modes`.
    pub sites: Option<Vec<Vec<ModeConfig>>>,
}

impl Default for BathConfig {
    fn default() -> Self {
        Self {
            modes: vec![ModeConfig {
                p: 0.5,
                p_imag: 0.0,
                gamma: 0.25,
                omega: 1.0,
            }],
            sites: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub tau_max: f64,
    pub t_max: f64,
    pub step: f64,
    pub waiting: Vec<f64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            tau_max: 10.0,
            t_max: 10.0,
            step: 0.5,
            waiting: vec![0.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearConfig {
    pub t_max: f64,
    pub step: f64,
}

impl Default for LinearConfig {
    fn default() -> Self {
        Self { t_max: 25.0, step: 0.25 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub n_traj: usize,
    pub seed: u64,
    pub first_trajectory: u64,
    /// Write every trajectory to `trajectories.bin`.
    pub store_trajectories: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            n_traj: 1000,
            seed: 1,
            first_trajectory: 0,
            store_trajectories: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Apodization {
    Time(f64),
    Mode(ApodizationMode),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApodizationMode {
    Off,
    /// Half of the longer coherence axis.
    Auto,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowConfig {
    pub omega_min: f64,
    pub omega_max: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Window {
    Fixed(WindowConfig),
    Mode(WindowMode),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowMode {
    /// Smallest box holding every reference signal above `window_threshold`.
    Auto,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectraConfig {
    pub padding: usize,
    pub apodization: Apodization,
    /// Square integration window for the error measure.
    pub window: Window,
    /// Relative level that defines the automatic window.
    pub window_threshold: f64,
}

impl Default for SpectraConfig {
    fn default() -> Self {
        Self {
            padding: 4,
            apodization: Apodization::Mode(ApodizationMode::Off),
            window: Window::Fixed(WindowConfig { omega_min: -3.0, omega_max: 3.0 }),
            window_threshold: 1e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceKind {
    Heom,
    Pool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErrorConfig {
    pub n_traj: Vec<usize>,
    pub n_boot: usize,
    pub resampling: Resampling,
    pub reference: ReferenceKind,
}

impl Default for ErrorConfig {
    fn default() -> Self {
        Self {
            n_traj: log_spaced(100, 10_000, 9),
            n_boot: 500,
            resampling: Resampling::WithReplacement,
            reference: ReferenceKind::Heom,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseCheckConfig {
    pub n_traj: usize,
    /// Largest lag time checked.
    pub max_lag: f64,
    /// Sampling duration of every trajectory.
    pub duration: f64,
    pub sigma: f64,
    /// Correlation the samples are compared with; the bath itself when absent.
    pub target: Option<Vec<ModeConfig>>,
}

impl Default for NoiseCheckConfig {
    fn default() -> Self {
        Self {
            n_traj: 10_000,
            max_lag: 20.0,
            duration: 40.0,
            sigma: 5.0,
            target: None,
        }
    }
}

impl RunConfig {
    /// Reads a TOML file, or the resolved configuration embedded in a JSON
    /// sidecar or report of an earlier run.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            let v: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            let c = if v.get("config").is_some() { &v["config"] } else { &v["metadata"]["config"] };
            ensure!(!c.is_null(), "{} holds no configuration", path.display());
            Self::deserialize(c).with_context(|| format!("configuration in {}", path.display()))?
        } else {
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model()?;
        self.bath()?;
        self.pathway_list()?;
        self.third_order_grids()?;
        let finite = [self.hops.dt, self.hops.noise_dt, self.heom.dt, self.linear.t_max, self.linear.step];
        ensure!(finite.iter().all(|v| v.is_finite() && *v > 0.0), "time steps and lengths must be positive and finite");
        let dt = self.hops.dt;
        self.third_order_grids()?.tau.steps_per_point(dt, "grid step")?;
        self.linear_grid()?.steps_per_point(dt, "linear step")?;
        ensure!(self.spectra.padding >= 2, "spectra.padding must be at least 2");
        if let Window::Fixed(w) = self.spectra.window {
            ensure!(w.omega_min < w.omega_max && w.omega_min.is_finite() && w.omega_max.is_finite(), "bad spectra.window");
        }
        Ok(())
    }

    pub fn model(&self) -> Result<ExcitonModel> {
        let n = self.model.epsilon.len();
        let coupling = match &self.model.coupling {
            Some(c) => c.clone(),
            None => (0..n)
                .map(|a| (0..n).map(|b| if a.abs_diff(b) == 1 { self.model.v } else { 0.0 }).collect())
                .collect(),
        };
        let mut model = ExcitonModel::new(self.model.epsilon.clone(), coupling, self.model.dipole.clone())?;
        if let Some(s) = self.model.disorder_sigma {
            ensure!(s.is_finite() && s >= 0.0, "disorder_sigma must be non-negative");
            model = model.with_disorder(s);
        }
        Ok(model)
    }

    pub fn bath(&self) -> Result<ExponentialBath> {
        let n = self.model.epsilon.len();
        let sites: Vec<Vec<ExponentialMode>> = match &self.bath.sites {
            Some(s) => {
                ensure!(s.len() == n, "bath.sites has {} entries for {n} sites", s.len());
                s.iter().map(|l| l.iter().map(ModeConfig::mode).collect()).collect()
            }
            None => vec![self.bath.modes.iter().map(ModeConfig::mode).collect(); n],
        };
        Ok(ExponentialBath::new(sites)?)
    }

    pub fn pathway_list(&self) -> Result<Vec<Pathway>> {
        let mut out: Vec<Pathway> = Vec::new();
        for name in &self.pathways {
            let add: Vec<Pathway> = match name.to_ascii_lowercase().as_str() {
                "gsb" => vec![Pathway::R3, Pathway::R4],
                "se" => vec![Pathway::R1, Pathway::R2],
                "esa" => vec![Pathway::R5, Pathway::R6],
                other => match Pathway::from_label(other) {
                    Some(p) => vec![p],
                    None => bail!("unknown pathway or signal {name:?}"),
                },
            };
            for p in add {
                if !out.contains(&p) {
                    out.push(p);
                }
            }
        }
        ensure!(!out.is_empty(), "no pathways selected");
        out.sort();
        Ok(out)
    }

    pub fn third_order_grids(&self) -> Result<ThirdOrderGrids> {
        let g = &self.grids;
        Ok(ThirdOrderGrids::new(
            UniformGrid::up_to(g.tau_max, g.step)?,
            UniformGrid::up_to(g.t_max, g.step)?,
            g.waiting.clone(),
        )?)
    }

    pub fn linear_grid(&self) -> Result<UniformGrid> {
        Ok(UniformGrid::up_to(self.linear.t_max, self.linear.step)?)
    }

    pub fn spectrum_options(&self) -> SpectrumOptions {
        let apodization = match self.spectra.apodization {
            Apodization::Time(t) => Some(t),
            Apodization::Mode(ApodizationMode::Off) => None,
            Apodization::Mode(ApodizationMode::Auto) => Some(self.grids.tau_max.max(self.grids.t_max) / 2.0),
        };
        SpectrumOptions {
            padding: self.spectra.padding,
            apodization,
        }
    }

    pub fn linear_spectrum_options(&self) -> SpectrumOptions {
        let apodization = match self.spectra.apodization {
            Apodization::Time(t) => Some(t),
            Apodization::Mode(ApodizationMode::Off) => None,
            Apodization::Mode(ApodizationMode::Auto) => Some(self.linear.t_max / 2.0),
        };
        SpectrumOptions {
            padding: self.spectra.padding,
            apodization,
        }
    }

    pub fn fixed_window(&self) -> Option<FrequencyWindow> {
        match self.spectra.window {
            Window::Fixed(w) => Some(FrequencyWindow::square(w.omega_min, w.omega_max)),
            Window::Mode(WindowMode::Auto) => None,
        }
    }

    pub fn noise_target(&self) -> Result<Option<Vec<ExponentialMode>>> {
        Ok(self.noise_check.target.as_ref().map(|t| t.iter().map(ModeConfig::mode).collect()))
    }
}
