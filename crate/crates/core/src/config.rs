//! Run configuration shared by every pipeline stage.
//!
//! Files are TOML. Both `[section]` tables and flat dotted keys such as
//! `model.d = 64` are accepted; the echoed copy uses the flat form.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cells::Node2vecConfig;
use crate::error::{Error, Result};
use crate::eval::{FinetuneConfig, ReportFormat, ROBUSTNESS_LEVELS};
use crate::jepa::{DistanceKind, ModelConfig};
use crate::measures::MeasureKind;
use crate::train::TrainConfig;
use crate::traj::{GridMode, GridSpec};

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "TJEPA_SEED";

/// File name of the echoed configuration inside a run directory.
pub const ECHO_NAME: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub mode: GridMode,
    /// `[min_lon, min_lat, max_lon, max_lat]`.
    pub bbox: [f64; 4],
    /// Meters in geographic mode, bbox units in planar mode.
    pub cell_size: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            mode: GridMode::Geographic,
            bbox: [-8.69, 41.10, -8.55, 41.19],
            cell_size: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig { min_len: 20, max_len: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_queries: usize,
    pub db_size: usize,
    pub db_fractions: Vec<f64>,
    pub levels: Vec<f64>,
    /// Distortion radius; one cell width when unset.
    pub distort_magnitude: Option<f64>,
    pub distance: DistanceKind,
    pub measure: MeasureKind,
    /// Match threshold for EDR and LCSS.
    pub eps: f64,
    /// Trajectories drawn for the fine-tune protocol.
    pub finetune_size: usize,
    /// Share of those used to train the head; the rest are scored.
    pub finetune_train_fraction: f64,
    pub finetune: FinetuneConfig,
    pub format: ReportFormat,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_queries: 1000,
            db_size: 10_000,
            db_fractions: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            levels: ROBUSTNESS_LEVELS.to_vec(),
            distort_magnitude: None,
            distance: DistanceKind::Euclidean,
            measure: MeasureKind::Hausdorff,
            eps: 100.0,
            finetune_size: 500,
            finetune_train_fraction: 0.8,
            finetune: FinetuneConfig::default(),
            format: ReportFormat::Json,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Preprocessed dataset read by training and evaluation.
    pub data: PathBuf,
    pub cells: PathBuf,
    pub checkpoint: PathBuf,
    pub reports: PathBuf,
    pub run_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data: "run/dataset.jsonl".into(),
            cells: "run/cells.bin".into(),
            checkpoint: "run/model.ckpt".into(),
            reports: "run/reports".into(),
            run_dir: "run".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives every random choice; copied into the section seeds on load.
    pub seed: u64,
    pub grid: GridConfig,
    pub preprocess: PreprocessConfig,
    pub node2vec: Node2vecConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            grid: GridConfig::default(),
            preprocess: PreprocessConfig::default(),
            node2vec: Node2vecConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads a config file, applies the seed override from the environment
    /// and resolves relative paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let env_seed = std::env::var(SEED_ENV).ok();
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_text(&text, base, env_seed.as_deref())
    }

    pub fn from_text(text: &str, base: &Path, env_seed: Option<&str>) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(s) = env_seed {
            cfg.seed = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
        }
        cfg.node2vec.seed = cfg.seed;
        cfg.train.seed = cfg.seed;
        cfg.eval.finetune.seed = cfg.seed;
        let paths = &mut cfg.paths;
        for p in [&mut paths.data, &mut paths.cells, &mut paths.checkpoint, &mut paths.reports, &mut paths.run_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(w) = &mut cfg.train.warm_start {
            if w.is_relative() {
                *w = base.join(&*w);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        self.node2vec.validate().map_err(|e| Error::Config(format!("node2vec: {e}")))?;
        self.model.validate()?;
        self.train.validate()?;
        let p = &self.preprocess;
        if p.min_len == 0 || p.min_len > p.max_len {
            return Err(Error::Config(format!(
                "preprocess: need 0 < min_len <= max_len, got {} and {}",
                p.min_len, p.max_len
            )));
        }
        let e = &self.eval;
        if e.n_queries == 0 || e.db_size < e.n_queries {
            return Err(Error::Config("eval: need 0 < n_queries <= db_size".into()));
        }
        if e.db_fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return Err(Error::Config(format!("eval: db_fractions {:?} must lie in (0, 1]", e.db_fractions)));
        }
        if e.levels.iter().any(|&l| !(0.0..=1.0).contains(&l)) {
            return Err(Error::Config(format!("eval: levels {:?} must lie in [0, 1]", e.levels)));
        }
        if e.distort_magnitude.is_some_and(|m| !(m >= 0.0 && m.is_finite())) {
            return Err(Error::Config("eval: distort_magnitude must be finite and non-negative".into()));
        }
        if !(e.eps > 0.0 && e.eps.is_finite()) {
            return Err(Error::Config("eval: eps must be positive".into()));
        }
        if !(e.finetune_train_fraction > 0.0 && e.finetune_train_fraction < 1.0) {
            return Err(Error::Config("eval: finetune_train_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.grid.bbox, self.grid.cell_size, self.grid.mode).map_err(|e| Error::Config(format!("grid: {e}")))
    }

    pub fn distort_magnitude(&self) -> f64 {
        self.eval.distort_magnitude.unwrap_or(self.grid.cell_size)
    }

    /// One `section.key = value` line per leaf, in field order.
    pub fn to_flat_text(&self) -> String {
        fn walk(prefix: &str, table: &toml::Table, out: &mut String) {
            for (k, v) in table {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match v {
                    toml::Value::Table(t) => walk(&key, t, out),
                    v => out.push_str(&format!("{key} = {v}\n")),
                }
            }
        }
        let table = toml::Table::try_from(self).expect("run config serializes");
        let mut out = String::new();
        walk("", &table, &mut out);
        out
    }

    /// Writes the resolved config into `dir` and returns the file path.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(ECHO_NAME);
        std::fs::write(&path, self.to_flat_text()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_flat_echo_round_trips() {
        let cfg = RunConfig::from_text("", Path::new("/base"), None).unwrap();
        assert_eq!(cfg.paths.data, Path::new("/base/run/dataset.jsonl"));
        let flat = cfg.to_flat_text();
        assert!(flat.lines().all(|l| !l.starts_with('[')));
        assert!(flat.contains("model.d = 256\n"));
        assert_eq!(RunConfig::from_text(&flat, Path::new("/elsewhere"), None).unwrap(), cfg);
    }

    #[test]
    fn sections_and_dotted_keys_agree() {
        let a = RunConfig::from_text("[model]\nd = 64\nenc_heads = 4\n", Path::new("."), None).unwrap();
        let b = RunConfig::from_text("model.d = 64\nmodel.enc_heads = 4\n", Path::new("."), None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.model.d, 64);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        for text in [
            "sed = 1\n",
            "model.depth = 2\n",
            "[grid]\ncell = 5\n",
            "grid.cell_size = -1.0\n",
            "preprocess.min_len = 30\npreprocess.max_len = 20\n",
            "eval.db_fractions = [0.0]\n",
            "model.d = 10\n",
        ] {
            let r = RunConfig::from_text(text, Path::new("."), None);
            assert!(matches!(r, Err(Error::Config(_))), "{text:?} gave {r:?}");
        }
    }

    #[test]
    fn seed_override_reaches_every_section() {
        let cfg = RunConfig::from_text("seed = 3\nnode2vec.seed = 9\n", Path::new("."), Some("17")).unwrap();
        assert_eq!(cfg.seed, 17);
        assert_eq!((cfg.node2vec.seed, cfg.train.seed, cfg.eval.finetune.seed), (17, 17, 17));
        assert!(matches!(
            RunConfig::from_text("", Path::new("."), Some("x")),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn distortion_defaults_to_one_cell() {
        let cfg = RunConfig::from_text("grid.cell_size = 250.0\n", Path::new("."), None).unwrap();
        assert_eq!(cfg.distort_magnitude(), 250.0);
    }
}
