use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use planlens_core::model::{CostModel, ModelError};
use planlens_core::plan::PlanGraph;
use planlens_core::workload::{Workload, WorkloadError};
use thiserror::Error;

use crate::cache::ExplanationCache;

pub const DEFAULT_CACHE_SIZE: usize = 1024;

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("workload in {path}: {source}")]
    Workload {
        path: PathBuf,
        source: WorkloadError,
    },
    #[error("model {path}: {source}")]
    Model { path: PathBuf, source: ModelError },
    #[error("plan id {plan_id} appears in workloads {first} and {second}")]
    DuplicatePlan {
        plan_id: String,
        first: String,
        second: String,
    },
    #[error("workload id {0} is loaded twice")]
    DuplicateWorkload(String),
}

/// Everything the service serves. Read-only after construction apart from the cache.
pub struct AppState {
    workloads: BTreeMap<String, Arc<Workload>>,
    plan_index: HashMap<String, (String, usize)>,
    models: BTreeMap<String, Arc<CostModel>>,
    pub(crate) cache: ExplanationCache,
}

impl AppState {
    pub fn new(
        workloads: Vec<Workload>,
        models: BTreeMap<String, CostModel>,
        cache_size: usize,
    ) -> Result<Self, LoadError> {
        let mut by_id = BTreeMap::new();
        let mut plan_index: HashMap<String, (String, usize)> = HashMap::new();
        for w in workloads {
            for (i, p) in w.plans.iter().enumerate() {
                if let Some((first, _)) = plan_index.get(p.plan_id()) {
                    return Err(LoadError::DuplicatePlan {
                        plan_id: p.plan_id().to_string(),
                        first: first.clone(),
                        second: w.workload_id.clone(),
                    });
                }
                plan_index.insert(p.plan_id().to_string(), (w.workload_id.clone(), i));
            }
            let id = w.workload_id.clone();
            if by_id.insert(id.clone(), Arc::new(w)).is_some() {
                return Err(LoadError::DuplicateWorkload(id));
            }
        }
        Ok(Self {
            workloads: by_id,
            plan_index,
            models: models.into_iter().map(|(k, m)| (k, Arc::new(m))).collect(),
            cache: ExplanationCache::new(cache_size),
        })
    }

    /// Loads workloads and models from disk.
    ///
    /// `workload_dir` is either one workload directory or a directory of them.
    /// Every `*.json` file in `model_dir` is a model named by its file stem,
    /// except `*.history.json` training logs.
    pub fn load(
        workload_dir: &Path,
        model_dir: &Path,
        cache_size: usize,
    ) -> Result<Self, LoadError> {
        Self::new(
            load_workloads(workload_dir)?,
            load_models(model_dir)?,
            cache_size,
        )
    }

    pub fn workloads(&self) -> impl Iterator<Item = &Workload> {
        self.workloads.values().map(|w| w.as_ref())
    }

    pub fn workload(&self, id: &str) -> Option<&Workload> {
        self.workloads.get(id).map(|w| w.as_ref())
    }

    pub fn plan(&self, id: &str) -> Option<(Arc<Workload>, usize)> {
        let (wid, i) = self.plan_index.get(id)?;
        Some((self.workloads[wid].clone(), *i))
    }

    pub fn plan_graph(&self, id: &str) -> Option<&PlanGraph> {
        let (wid, i) = self.plan_index.get(id)?;
        Some(&self.workloads[wid].plans[*i])
    }

    pub fn models(&self) -> impl Iterator<Item = (&String, &Arc<CostModel>)> {
        self.models.iter()
    }

    pub fn model(&self, id: &str) -> Option<Arc<CostModel>> {
        self.models.get(id).cloned()
    }
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>, LoadError> {
    let io = |source| LoadError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io)? {
        out.push(entry.map_err(io)?.path());
    }
    out.sort();
    Ok(out)
}

pub fn load_workloads(dir: &Path) -> Result<Vec<Workload>, LoadError> {
    let load = |path: &Path| {
        Workload::load(path).map_err(|source| LoadError::Workload {
            path: path.to_path_buf(),
            source,
        })
    };
    if dir.join("workload.json").is_file() {
        return Ok(vec![load(dir)?]);
    }
    read_dir_sorted(dir)?
        .into_iter()
        .filter(|p| p.join("workload.json").is_file())
        .map(|p| load(&p))
        .collect()
}

pub fn load_models(dir: &Path) -> Result<BTreeMap<String, CostModel>, LoadError> {
    let mut out = BTreeMap::new();
    for path in read_dir_sorted(dir)? {
        let name = match path.file_name().and_then(|n| n.to_str()) {
            Some(n) if n.ends_with(".json") && !n.ends_with(".history.json") => n,
            _ => continue,
        };
        let id = name.trim_end_matches(".json").to_string();
        let model = CostModel::load(&path).map_err(|source| LoadError::Model {
            path: path.clone(),
            source,
        })?;
        out.insert(id, model);
    }
    Ok(out)
}
