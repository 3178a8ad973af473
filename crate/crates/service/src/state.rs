use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{mpsc, Arc, Mutex, RwLock, Weak};
use std::time::{SystemTime, UNIX_EPOCH};

use exloop_core::dataset::{class_counts, load_samples, record_harvest, DatasetManifest, ImageStore};
use exloop_core::game::{GameSession, Harvest, HarvestSink};
use exloop_core::nn::{build_initial_cnn, fine_tune, read_weights, write_weights, Model, TrainConfig};
use exloop_core::verify::{CenteredContrast, FaceValidity, TemplateRegistry, ThresholdTable};
use exloop_core::{Error, Result, NUM_CLASSES};
use serde::{Deserialize, Serialize};

use crate::config::ServiceConfig;

/// Id of the live dataset that matched frames are harvested into.
pub const HARVEST_DATASET: &str = "harvest";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRequest {
    pub dataset_id: String,
    pub base_model_id: String,
    pub freeze_prefix: usize,
    #[serde(default = "default_head_width")]
    pub head_width: usize,
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub learning_rate: Option<f32>,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Serve the resulting model once training succeeds.
    #[serde(default)]
    pub activate: bool,
}

fn default_head_width() -> usize {
    exloop_core::nn::INITIAL_HIDDEN_WIDTH
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainJob {
    pub job_id: String,
    pub status: JobStatus,
    pub dataset_id: String,
    pub base_model_id: String,
    pub freeze_prefix: usize,
    pub result_model_id: Option<String>,
    pub error: Option<String>,
    /// Unix seconds.
    pub queued_at: f64,
    pub started_at: Option<f64>,
    pub finished_at: Option<f64>,
}

pub(crate) fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

pub struct AppState {
    pub data_dir: PathBuf,
    pub thresholds: ThresholdTable,
    pub templates: TemplateRegistry,
    pub validity: Box<dyn FaceValidity>,
    serving: RwLock<Arc<Model>>,
    models: Mutex<HashMap<String, Arc<Model>>>,
    pub(crate) sessions: Mutex<HashMap<String, Arc<Mutex<GameSession>>>>,
    harvest: Mutex<DatasetManifest>,
    store: ImageStore,
    jobs: Mutex<HashMap<String, TrainJob>>,
    queue: Mutex<mpsc::Sender<(String, TrainRequest)>>,
}

impl AppState {
    /// Opens (creating if needed) the data directory and starts the training
    /// worker.
    pub fn open(cfg: &ServiceConfig) -> Result<Arc<Self>> {
        let model = match &cfg.model_path {
            Some(p) => {
                let (spec, weights) = read_weights(p)?;
                Model::new(spec, weights)?
            }
            None => {
                let (spec, weights) = build_initial_cnn(cfg.seed);
                Model::new(spec, weights)?
            }
        };
        let thresholds = match &cfg.thresholds_path {
            Some(p) => ThresholdTable::load(p)?,
            None => ThresholdTable::default(),
        };
        Self::with_model(&cfg.data_dir, model, thresholds)
    }

    pub fn with_model(data_dir: &Path, model: Model, thresholds: ThresholdTable) -> Result<Arc<Self>> {
        for sub in ["models", "datasets", "templates"] {
            let d = data_dir.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| Error::Io { path: d, source: e })?;
        }
        let mut models = HashMap::new();
        for entry in std::fs::read_dir(data_dir.join("models")).map_err(|e| Error::Io {
            path: data_dir.join("models"),
            source: e,
        })? {
            let path = entry.map_err(|e| Error::Io { path: data_dir.into(), source: e })?.path();
            if path.extension().is_some_and(|e| e == "expw") {
                let (spec, weights) = read_weights(&path)?;
                let m = Model::new(spec, weights)?;
                models.insert(m.id.0.clone(), Arc::new(m));
            }
        }
        let model = Arc::new(model);
        let model_file = data_dir.join("models").join(format!("{}.expw", model.id));
        if !model_file.exists() {
            write_weights(&model_file, &model.spec, &model.weights)?;
        }
        models.insert(model.id.0.clone(), model.clone());

        let manifest_path = data_dir.join("harvest.json");
        let harvest = if manifest_path.exists() {
            DatasetManifest::load(&manifest_path)?
        } else {
            DatasetManifest::new(HARVEST_DATASET)
        };

        let (tx, rx) = mpsc::channel();
        let state = Arc::new(AppState {
            data_dir: data_dir.to_path_buf(),
            thresholds,
            templates: TemplateRegistry::open(data_dir.join("templates"))?,
            validity: Box::new(CenteredContrast::default()),
            serving: RwLock::new(model),
            models: Mutex::new(models),
            sessions: Mutex::new(HashMap::new()),
            harvest: Mutex::new(harvest),
            store: ImageStore::new(data_dir),
            jobs: Mutex::new(HashMap::new()),
            queue: Mutex::new(tx),
        });
        let weak = Arc::downgrade(&state);
        std::thread::Builder::new()
            .name("exloop-train".into())
            .spawn(move || train_worker(weak, rx))
            .map_err(|e| Error::Io { path: data_dir.into(), source: e })?;
        Ok(state)
    }

    /// The model every request in flight sees; swapping never affects a
    /// request that already holds a snapshot.
    pub fn serving_model(&self) -> Arc<Model> {
        self.serving.read().expect("model lock poisoned").clone()
    }

    pub fn model(&self, id: &str) -> Option<Arc<Model>> {
        self.models.lock().expect("models lock poisoned").get(id).cloned()
    }

    pub fn model_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.models.lock().expect("models lock poisoned").keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn activate(&self, id: &str) -> Option<Arc<Model>> {
        let m = self.model(id)?;
        *self.serving.write().expect("model lock poisoned") = m.clone();
        Some(m)
    }

    pub fn harvest_counts(&self) -> [usize; NUM_CLASSES] {
        class_counts(&self.harvest.lock().expect("harvest lock poisoned"))
    }

    pub fn harvest_snapshot(&self) -> DatasetManifest {
        self.harvest.lock().expect("harvest lock poisoned").clone()
    }

    fn dataset_path(&self, id: &str) -> Option<PathBuf> {
        let ok = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) && !id.starts_with('.');
        ok.then(|| self.data_dir.join("datasets").join(format!("{id}.json")))
    }

    pub fn dataset_exists(&self, id: &str) -> bool {
        id == HARVEST_DATASET || self.dataset_path(id).is_some_and(|p| p.exists())
    }

    fn load_dataset(&self, id: &str) -> Result<DatasetManifest> {
        if id == HARVEST_DATASET {
            return Ok(self.harvest_snapshot());
        }
        let path = self
            .dataset_path(id)
            .ok_or_else(|| Error::Config(format!("invalid dataset id {id}")))?;
        DatasetManifest::load(&path)
    }

    pub fn job(&self, id: &str) -> Option<TrainJob> {
        self.jobs.lock().expect("jobs lock poisoned").get(id).cloned()
    }

    /// Queues a training job. Identical concurrent requests become separate
    /// jobs.
    pub fn submit_job(&self, req: TrainRequest) -> TrainJob {
        let job = TrainJob {
            job_id: format!("job-{:016x}", rand::random::<u64>()),
            status: JobStatus::Queued,
            dataset_id: req.dataset_id.clone(),
            base_model_id: req.base_model_id.clone(),
            freeze_prefix: req.freeze_prefix,
            result_model_id: None,
            error: None,
            queued_at: unix_now(),
            started_at: None,
            finished_at: None,
        };
        self.jobs.lock().expect("jobs lock poisoned").insert(job.job_id.clone(), job.clone());
        // The worker only stops once the state is dropped, so this cannot fail
        // while `self` is alive.
        let _ = self.queue.lock().expect("queue lock poisoned").send((job.job_id.clone(), req));
        job
    }

    fn update_job(&self, id: &str, f: impl FnOnce(&mut TrainJob)) {
        if let Some(j) = self.jobs.lock().expect("jobs lock poisoned").get_mut(id) {
            f(j);
        }
    }

    fn run_job(&self, req: &TrainRequest) -> Result<String> {
        let base = self
            .model(&req.base_model_id)
            .ok_or_else(|| Error::Precondition(format!("model {} not found", req.base_model_id)))?;
        let manifest = self.load_dataset(&req.dataset_id)?;
        let samples = load_samples(&manifest, &self.data_dir)?;
        let defaults = TrainConfig::default();
        let cfg = TrainConfig {
            epochs: req.epochs.unwrap_or(defaults.epochs),
            learning_rate: req.learning_rate.unwrap_or(defaults.learning_rate),
            seed: req.seed.unwrap_or(defaults.seed),
            ..defaults
        };
        let (model, _) = fine_tune(&base, &samples, req.freeze_prefix, req.head_width, &cfg)?;
        let path = self.data_dir.join("models").join(format!("{}.expw", model.id));
        write_weights(&path, &model.spec, &model.weights)?;
        let id = model.id.0.clone();
        self.models.lock().expect("models lock poisoned").insert(id.clone(), Arc::new(model));
        if req.activate {
            self.activate(&id);
        }
        Ok(id)
    }

    /// Stores a matched frame in the live harvest dataset and persists the
    /// manifest; on failure neither changes.
    fn persist_harvest(&self, h: Harvest<'_>) -> Result<()> {
        let mut live = self.harvest.lock().expect("harvest lock poisoned");
        let mut next = live.clone();
        let user = h.user_id.map(str::to_string);
        match record_harvest(&mut next, &self.store, h.image, h.label, h.confidence, user, unix_now().floor() as i64) {
            Err(Error::DuplicatePath(_)) => return Ok(()),
            other => other?,
        }
        next.save(&self.data_dir.join("harvest.json"))?;
        *live = next;
        Ok(())
    }
}

/// Harvest sink writing into the service's live dataset.
pub(crate) struct StateSink<'a>(pub &'a AppState);

impl HarvestSink for StateSink<'_> {
    fn harvest(&mut self, h: Harvest<'_>) -> Result<()> {
        self.0.persist_harvest(h)
    }
}

fn train_worker(state: Weak<AppState>, rx: mpsc::Receiver<(String, TrainRequest)>) {
    while let Ok((id, req)) = rx.recv() {
        let Some(state) = state.upgrade() else { return };
        state.update_job(&id, |j| {
            j.status = JobStatus::Running;
            j.started_at = Some(unix_now());
        });
        tracing::info!(job = %id, dataset = %req.dataset_id, "training started");
        let outcome = state.run_job(&req);
        state.update_job(&id, |j| {
            j.finished_at = Some(unix_now());
            match outcome {
                Ok(model) => {
                    j.status = JobStatus::Done;
                    j.result_model_id = Some(model);
                }
                Err(e) => {
                    j.status = JobStatus::Failed;
                    j.error = Some(e.to_string());
                }
            }
        });
    }
}
