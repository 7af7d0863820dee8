//! Run configuration: a TOML file with dotted sections.
//!
//! Relative paths are resolved against the directory holding the config.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mesh: Option<MeshConfig>,
    #[serde(default, rename = "material")]
    pub materials: Vec<MaterialConfig>,
    pub pml: Option<PmlConfig>,
    #[serde(default, rename = "port")]
    pub ports: Vec<PortConfig>,
    pub time: TimeConfig,
    pub circuit: Option<CircuitConfig>,
    #[serde(default)]
    pub archive: ArchiveConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub compare: CompareConfig,
    pub post: Option<PostConfig>,
    /// Directory used to resolve relative paths.
    #[serde(skip)]
    pub base: PathBuf,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MeshConfig {
    /// `box` or `file`.
    pub source: String,
    pub cells: Option<[usize; 3]>,
    pub size: Option<[f64; 3]>,
    pub file: Option<PathBuf>,
    /// `boundary`, `none`, or a list of bounding-box faces `2 * axis + side`.
    #[serde(default = "default_pec")]
    pub pec: PecSpec,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum PecSpec {
    Named(String),
    Faces(Vec<usize>),
}

fn default_pec() -> PecSpec {
    PecSpec::Named("boundary".into())
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MaterialConfig {
    #[serde(default = "one")]
    pub eps_r: f64,
    #[serde(default = "one")]
    pub mu_r: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PmlConfig {
    pub thickness: f64,
    #[serde(default = "default_order")]
    pub order: u32,
    pub reflection: f64,
    pub faces: Vec<usize>,
}

fn default_order() -> u32 {
    3
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PortConfig {
    pub label: String,
    pub from: [f64; 3],
    pub to: [f64; 3],
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum DtRule {
    Seconds(f64),
    /// Must read `auto`.
    Auto(String),
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub dt: DtRule,
    /// Used by `dt = "auto"`; taken from the netlist sources when absent.
    pub f_max: Option<f64>,
    pub steps: usize,
    #[serde(default = "default_t_delta")]
    pub t_delta: usize,
}

fn default_t_delta() -> usize {
    2
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CircuitConfig {
    pub netlist: PathBuf,
}

#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ArchiveConfig {
    pub path: Option<PathBuf>,
    /// Number of lags to extract; defaults to `time.steps`.
    pub lags: Option<usize>,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_out")]
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: default_out() }
    }
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub gmres_tol: f64,
    pub gmres_restart: usize,
    pub gmres_max_iter: usize,
    pub newton_tol: f64,
    pub newton_max: usize,
    pub max_halvings: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            gmres_tol: 1e-12,
            gmres_restart: 60,
            gmres_max_iter: 5000,
            newton_tol: 1e-12,
            newton_max: 50,
            max_halvings: 4,
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    pub threshold: f64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self { threshold: 1e-10 }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PostConfig {
    pub f_start: f64,
    pub f_stop: f64,
    pub points: usize,
    #[serde(default = "default_z0")]
    pub z0: f64,
    /// Points with `|V(f)|` below this fraction of the largest `|V|` are flagged.
    #[serde(default = "default_floor")]
    pub noise_floor: f64,
}

fn default_z0() -> f64 {
    50.0
}

fn default_floor() -> f64 {
    1e-6
}

impl PostConfig {
    pub fn grid(&self) -> Vec<f64> {
        if self.points == 1 {
            return vec![self.f_start];
        }
        let h = (self.f_stop - self.f_start) / (self.points - 1) as f64;
        (0..self.points).map(|i| self.f_start + i as f64 * h).collect()
    }
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl RunConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
        cfg.base = base.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if let DtRule::Seconds(dt) = self.time.dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(bad("time.dt must be positive"));
            }
        }
        if let DtRule::Auto(s) = &self.time.dt {
            if s != "auto" {
                return Err(bad(format!("time.dt must be seconds or \"auto\", got \"{s}\"")));
            }
        }
        if let Some(f) = self.time.f_max {
            if !(f > 0.0 && f.is_finite()) {
                return Err(bad("time.f_max must be positive"));
            }
        }
        if self.time.steps == 0 {
            return Err(bad("time.steps must be positive"));
        }
        if self.time.t_delta == 0 {
            return Err(bad("time.t_delta must be at least 1"));
        }
        if let Some(m) = &self.mesh {
            match m.source.as_str() {
                "box" if m.cells.is_none() || m.size.is_none() => {
                    return Err(bad("mesh.source = \"box\" needs mesh.cells and mesh.size"))
                }
                "file" if m.file.is_none() => {
                    return Err(bad("mesh.source = \"file\" needs mesh.file"))
                }
                "box" | "file" => {}
                other => return Err(bad(format!("unknown mesh.source \"{other}\""))),
            }
            if let PecSpec::Named(n) = &m.pec {
                if n != "boundary" && n != "none" {
                    return Err(bad(format!("mesh.pec must be boundary, none or a face list, got \"{n}\"")));
                }
            }
        }
        let s = &self.solver;
        if !(s.gmres_tol > 0.0 && s.gmres_tol < 1.0) || !(s.newton_tol > 0.0) {
            return Err(bad("solver tolerances must be positive (GMRES below 1)"));
        }
        if !(self.compare.threshold > 0.0) {
            return Err(bad("compare.threshold must be positive"));
        }
        if let Some(p) = &self.post {
            if p.points == 0 || !(p.f_start >= 0.0) || !(p.f_stop >= p.f_start) || !(p.z0 > 0.0) {
                return Err(bad("post needs points >= 1, 0 <= f_start <= f_stop and z0 > 0"));
            }
        }
        Ok(())
    }

    /// Number of archive lags.
    pub fn lags(&self) -> usize {
        self.archive.lags.unwrap_or(self.time.steps)
    }

    /// Time step from the configured rule; `netlist_f_max` feeds the auto
    /// rule when `time.f_max` is absent.
    pub fn dt(&self, netlist_f_max: Option<f64>) -> Result<f64, CliError> {
        match self.time.dt {
            DtRule::Seconds(dt) => Ok(dt),
            DtRule::Auto(_) => {
                let f = self.time.f_max.or(netlist_f_max).ok_or_else(|| {
                    bad("dt = \"auto\" needs time.f_max or a netlist source with a frequency")
                })?;
                Ok(auto_dt(f))
            }
        }
    }
}

/// `1 / (30 f_max)`.
pub fn auto_dt(f_max: f64) -> f64 {
    1.0 / (30.0 * f_max)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIN: &str = "[time]\ndt = \"auto\"\nf_max = 2e9\nsteps = 10\n";

    #[test]
    fn auto_time_step_follows_the_rule() {
        let c = RunConfig::parse(MIN, Path::new(".")).unwrap();
        let dt = c.dt(None).unwrap();
        assert_eq!(dt, 1.0 / 60e9);
        assert!((dt - 16.67e-12).abs() < 0.01e-12);
        let c = RunConfig::parse("[time]\ndt = 16e-12\nsteps = 10\n", Path::new(".")).unwrap();
        assert_eq!(c.dt(Some(2e9)).unwrap(), 16e-12);
    }

    #[test]
    fn auto_without_frequency_is_a_config_error() {
        let c = RunConfig::parse("[time]\ndt = \"auto\"\nsteps = 10\n", Path::new(".")).unwrap();
        assert!(matches!(c.dt(None), Err(CliError::Config(_))));
        assert_eq!(c.dt(Some(1e9)).unwrap(), auto_dt(1e9));
    }

    #[test]
    fn rejects_bad_values() {
        for text in [
            "[time]\ndt = -1.0\nsteps = 10\n",
            "[time]\ndt = \"soon\"\nsteps = 10\n",
            "[time]\ndt = 1e-12\nsteps = 0\n",
            "[time]\ndt = 1e-12\nsteps = 5\nbogus = 1\n",
            "[time]\ndt = 1e-12\nsteps = 5\n[mesh]\nsource = \"box\"\n",
        ] {
            assert!(matches!(RunConfig::parse(text, Path::new(".")), Err(CliError::Config(_))), "{text}");
        }
    }

    #[test]
    fn relative_paths_resolve_against_the_config_dir() {
        let text = format!("{MIN}[circuit]\nnetlist = \"a/b.cir\"\n[archive]\npath = \"/abs/x.empx\"\n");
        let c = RunConfig::parse(&text, Path::new("/cfg")).unwrap();
        let n = &c.circuit.as_ref().unwrap().netlist;
        assert_eq!(c.resolve(n), PathBuf::from("/cfg/a/b.cir"));
        assert_eq!(c.resolve(c.archive.path.as_ref().unwrap()), PathBuf::from("/abs/x.empx"));
        assert_eq!(c.lags(), 10);
    }
}
