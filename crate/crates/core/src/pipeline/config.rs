use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classify::ApVariant;
use crate::descriptors::ScaleGrid;
use crate::error::{Error, Result};
use crate::parallel::Parallelism;
use crate::scale_coding::{validate_thresholds, RepresentationMode};

/// Arithmetic scale grid `lo, lo + step, ...` with `n` factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lo: f64,
    pub step: f64,
    pub n: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            lo: 0.5,
            step: 0.1,
            n: 21,
        }
    }
}

impl GridSpec {
    pub fn grid(&self) -> Result<ScaleGrid> {
        ScaleGrid::arithmetic(self.lo, self.step, self.n)
    }
}

impl FromStr for GridSpec {
    type Err = Error;

    /// Parses `lo,step,n`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let bad = || Error::Config(format!("grid must be lo,step,n, got {s:?}"));
        let [lo, step, n] = parts.as_slice() else {
            return Err(bad());
        };
        Ok(GridSpec {
            lo: lo.parse().map_err(|_| bad())?,
            step: step.parse().map_err(|_| bad())?,
            n: n.parse().map_err(|_| bad())?,
        })
    }
}

/// Per-descriptor coding used before pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoderKind {
    #[default]
    Fisher,
    /// Hard-assignment bag of words against the GMM means.
    Bow,
}

/// Everything that determines the numbers a run produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Experiment {
    pub grid: GridSpec,
    pub k: usize,
    pub samples_per_image: usize,
    pub thresholds: Vec<f64>,
    pub modes: Vec<RepresentationMode>,
    pub coder: CoderKind,
    #[serde(rename = "C")]
    pub c: f64,
    pub svm_tol: f64,
    pub seed: u64,
    pub ap_variant: ApVariant,
    /// Also evaluate the sum of the per-mode scores.
    pub fuse: bool,
    pub gmm_max_iter: usize,
    #[serde(skip)]
    pub parallelism: Parallelism,
}

impl Default for Experiment {
    fn default() -> Self {
        Experiment {
            grid: GridSpec::default(),
            k: 16,
            samples_per_image: 100,
            thresholds: vec![1.1, 1.8],
            modes: vec![
                RepresentationMode::Invariant,
                RepresentationMode::Absolute,
                RepresentationMode::Relative,
            ],
            coder: CoderKind::Fisher,
            c: 1.0,
            svm_tol: 1e-3,
            seed: 0,
            ap_variant: ApVariant::AllPoints,
            fuse: true,
            gmm_max_iter: 100,
            parallelism: Parallelism::default(),
        }
    }
}

impl Experiment {
    pub fn validate(&self) -> Result<()> {
        self.grid.grid().map_err(|e| Error::Config(e.to_string()))?;
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.samples_per_image == 0 {
            return Err(Error::Config("samples_per_image must be at least 1".into()));
        }
        validate_thresholds(&self.thresholds).map_err(|e| Error::Config(e.to_string()))?;
        if self.modes.is_empty() {
            return Err(Error::Config("no representation mode selected".into()));
        }
        let unique: HashSet<_> = self.modes.iter().collect();
        if unique.len() != self.modes.len() {
            return Err(Error::Config("representation modes repeat".into()));
        }
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::Config(format!("C must be positive, got {}", self.c)));
        }
        if !(self.svm_tol > 0.0) {
            return Err(Error::Config("svm_tol must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub manifest: PathBuf,
    pub descriptors: PathBuf,
    /// GMM and SVM models.
    pub model_dir: PathBuf,
    /// Representations, scores, reports and sweep tables.
    pub output_dir: PathBuf,
    /// Precomputed `fc-external` representations.
    pub external_dir: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            manifest: "manifest.json".into(),
            descriptors: "descriptors".into(),
            model_dir: "models".into(),
            output_dir: "out".into(),
            external_dir: None,
        }
    }
}

/// Config file contents: a `[paths]` table and an `[experiment]` table.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub experiment: Experiment,
}

impl PipelineConfig {
    /// Parses TOML. Relative paths are resolved against `base`.
    pub fn from_toml_str(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let p = &mut cfg.paths;
        for path in [&mut p.manifest, &mut p.descriptors, &mut p.model_dir, &mut p.output_dir] {
            *path = base.join(&*path);
        }
        if let Some(ext) = &mut p.external_dir {
            *ext = base.join(&*ext);
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::from_toml_str(&text, base)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.experiment.validate()?;
        let p = &self.paths;
        let mut all = vec![&p.manifest, &p.descriptors, &p.model_dir, &p.output_dir];
        all.extend(&p.external_dir);
        let unique: HashSet<_> = all.iter().collect();
        if unique.len() != all.len() {
            return Err(Error::Config("configured paths must be distinct".into()));
        }
        if self.experiment.modes.contains(&RepresentationMode::External) && p.external_dir.is_none() {
            return Err(Error::Config("mode fc-external needs paths.external_dir".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        PipelineConfig::default().validate().unwrap();
        assert_eq!(Experiment::default().grid.grid().unwrap().len(), 21);
    }

    #[test]
    fn toml_round_trip_and_resolution() {
        let text = r#"
[paths]
manifest = "data/m.json"
descriptors = "data/desc"

[experiment]
k = 4
thresholds = [1.0]
modes = ["absolute", "fc-external"]
ap_variant = "11pt"
C = 2.5

[experiment.grid]
lo = 0.5
step = 0.5
n = 5
"#;
        let cfg = PipelineConfig::from_toml_str(text, Path::new("/base")).unwrap();
        assert_eq!(cfg.paths.manifest, Path::new("/base/data/m.json"));
        assert_eq!(cfg.paths.model_dir, Path::new("/base/models"));
        assert_eq!(cfg.experiment.k, 4);
        assert_eq!(cfg.experiment.c, 2.5);
        assert_eq!(cfg.experiment.ap_variant, ApVariant::ElevenPoint);
        assert_eq!(cfg.experiment.modes[1], RepresentationMode::External);
        assert_eq!(cfg.experiment.grid.n, 5);
        // fc-external without a directory
        assert!(cfg.validate().is_err());
        let back = PipelineConfig::from_toml_str(&cfg.to_toml_string(), Path::new("")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(PipelineConfig::from_toml_str("[experiment]\nkk = 3\n", Path::new("")).is_err());
    }

    #[test]
    fn invalid_settings() {
        let bad = [
            Experiment { k: 0, ..Experiment::default() },
            Experiment { thresholds: vec![1.8, 1.1], ..Experiment::default() },
            Experiment { modes: vec![], ..Experiment::default() },
            Experiment {
                modes: vec![RepresentationMode::Absolute, RepresentationMode::Absolute],
                ..Experiment::default()
            },
            Experiment { c: 0.0, ..Experiment::default() },
        ];
        for e in bad {
            assert!(e.validate().is_err(), "{e:?}");
        }
        let mut cfg = PipelineConfig::default();
        cfg.paths.output_dir = cfg.paths.model_dir.clone();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn grid_spec_parses() {
        let g: GridSpec = "0.5, 0.1, 21".parse().unwrap();
        assert_eq!(g, GridSpec::default());
        assert!("0.5,0.1".parse::<GridSpec>().is_err());
        assert!("a,b,c".parse::<GridSpec>().is_err());
    }
}
