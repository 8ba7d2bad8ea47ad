//! Experiment configuration for `tamlab train`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use tamlab::benchgen::{load_split, BenchmarkSplit, Family, GenConfig, Mode};
use tamlab::meta::{compatibility_violations, AdaptMethod, TamConfig, TrainMethod};
use tamlab::model::{Architecture, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchmarkRef {
    /// An existing split file, relative paths resolved against the config file.
    Path(PathBuf),
    /// Generate the split before training.
    Generate(GenConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub benchmark: BenchmarkRef,
    pub method: TrainMethod,
    pub model: ModelConfig,
    pub training: TamConfig,
    pub k_values: Vec<usize>,
    /// One training run per seed; each seeds both initialization and sampling.
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Test-time adaptation recorded for `eval` (method default when null).
    pub eval_method: Option<AdaptMethod>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let gen = GenConfig::new(Family::Classification, Mode::Plain);
        Self {
            benchmark: BenchmarkRef::Generate(gen),
            method: TrainMethod::Tam,
            model: ModelConfig::default(),
            training: TamConfig::default(),
            k_values: vec![1, 5, 10, 20],
            seeds: vec![0],
            output_dir: PathBuf::from("runs/default"),
            eval_method: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let BenchmarkRef::Path(p) = &mut cfg.benchmark {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    /// Training settings with the experiment's k list applied.
    pub fn training(&self) -> TamConfig {
        TamConfig {
            k_values: self.k_values.clone(),
            ..self.training.clone()
        }
    }

    /// Violations that need no benchmark data.
    pub fn static_violations(&self) -> Vec<String> {
        let mut v: Vec<String> = self.model.violations().into_iter().map(|m| format!("model: {m}")).collect();
        v.extend(self.training().violations().into_iter().map(|m| format!("training: {m}")));
        if self.seeds.is_empty() {
            v.push("seeds must not be empty".into());
        }
        match &self.benchmark {
            BenchmarkRef::Path(p) if !p.exists() => v.push(format!("benchmark path {} does not exist", p.display())),
            BenchmarkRef::Generate(g) => {
                v.extend(g.violations().into_iter().map(|m| format!("benchmark: {m}")));
                if self.method == TrainMethod::CompTam && g.mode != Mode::Compositional {
                    v.push("method comp-tam needs a compositional benchmark".into());
                }
                let want = if g.family == Family::Classification {
                    Architecture::Encoder
                } else {
                    Architecture::Decoder
                };
                if self.model.architecture != want {
                    v.push(format!("model: {:?} benchmarks need the {want:?} architecture", g.family));
                }
            }
            _ => {}
        }
        v
    }

    /// Violations against the loaded benchmark.
    pub fn split_violations(&self, split: &BenchmarkSplit) -> Vec<String> {
        let mut v: Vec<String> = compatibility_violations(split, &self.model, self.method)
            .into_iter()
            .map(|m| format!("model: {m}"))
            .collect();
        let need = self.training.examples_per_task;
        let short = if self.method == TrainMethod::TaskAgnostic {
            None
        } else {
            split.train.iter().position(|t| t.examples.len() < need)
        };
        if let Some(i) = short {
            v.push(format!(
                "training: examples_per_task ({need}) exceeds the {} examples of training task {i}",
                split.train[i].examples.len()
            ));
        }
        let support = split.meta.config.support_size;
        if let Some(&k) = self.k_values.iter().find(|&&k| k > support) {
            v.push(format!("k_values: {k} exceeds the benchmark support pool of {support}"));
        }
        v
    }

    pub fn load_benchmark(&self) -> anyhow::Result<BenchmarkSplit> {
        Ok(match &self.benchmark {
            BenchmarkRef::Path(p) => load_split(p)?,
            BenchmarkRef::Generate(g) => tamlab::benchgen::build_split(g, 1)?,
        })
    }
}
