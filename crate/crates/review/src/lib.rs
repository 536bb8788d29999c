//! Local HTTP service for reviewing misclassified sounds.
//!
//! Serves the review queue, the taxonomy and the audio files, and records
//! error-category and class annotations in an append-only journal.

use std::collections::HashMap;
use std::future::Future;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use broadsound::dataset::DatasetManifest;
use broadsound::evaluation::{read_queue, ReviewItem};
use broadsound::Taxonomy;
use tokio::net::TcpListener;

mod api;
pub mod journal;
pub mod range;

pub use journal::{error_report, AnnotationStore, Annotations, ClassAnnotation, ErrorAnnotation, ErrorCategory, ErrorReport};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("annotation store is corrupt at line {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error(transparent)]
    Core(#[from] broadsound::Error),
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error("invalid review queue: {0}")]
    Queue(String),
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub queue: PathBuf,
    pub manifest: PathBuf,
    pub store: PathBuf,
    pub bind: String,
    pub taxonomy: Taxonomy,
    /// Static assets served for paths no endpoint claims.
    pub ui_dir: Option<PathBuf>,
}

/// Everything the handlers read. Only the annotation store is mutable.
pub struct ReviewState {
    taxonomy: Taxonomy,
    queue: Vec<ReviewItem>,
    queue_index: HashMap<String, usize>,
    manifest: DatasetManifest,
    annotations: Mutex<Annotations>,
}

impl ReviewState {
    pub fn load(
        taxonomy: Taxonomy,
        queue_path: &Path,
        manifest_path: &Path,
        store_path: &Path,
    ) -> Result<ReviewState, ServiceError> {
        let queue = read_queue(queue_path)?;
        let manifest = DatasetManifest::read_jsonl(manifest_path)?;
        let mut queue_index = HashMap::with_capacity(queue.len());
        for (i, item) in queue.iter().enumerate() {
            for code in [&item.true_code, &item.predicted_code] {
                if taxonomy.node(code).is_none() {
                    return Err(ServiceError::Queue(format!(
                        "item {} ({}): unknown class `{code}`",
                        i + 1,
                        item.sound_id
                    )));
                }
            }
            if queue_index.insert(item.sound_id.clone(), i).is_some() {
                return Err(ServiceError::Queue(format!("duplicate sound id `{}`", item.sound_id)));
            }
        }
        let annotations = Annotations::open(store_path)?;
        Ok(ReviewState {
            taxonomy,
            queue,
            queue_index,
            manifest,
            annotations: Mutex::new(annotations),
        })
    }

    pub fn queue(&self) -> &[ReviewItem] {
        &self.queue
    }

    fn queue_item(&self, sound_id: &str) -> Option<&ReviewItem> {
        self.queue_index.get(sound_id).map(|&i| &self.queue[i])
    }

    /// Audio file for a queued or manifest sound, if one is recorded.
    fn audio_path(&self, sound_id: &str) -> Option<PathBuf> {
        let rel = self
            .queue_item(sound_id)
            .and_then(|item| item.audio_path.as_deref())
            .or_else(|| self.manifest.get(sound_id).and_then(|r| r.audio_path.as_deref()))?;
        Some(self.manifest.resolve_path(rel))
    }

    fn knows_sound(&self, sound_id: &str) -> bool {
        self.queue_index.contains_key(sound_id) || self.manifest.get(sound_id).is_some()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Annotations> {
        // A panic while holding the lock cannot leave the journal half-applied:
        // appends reach the store only after the write succeeded.
        self.annotations.lock().unwrap_or_else(|p| p.into_inner())
    }
}

/// A bound but not yet running service.
pub struct Service {
    state: Arc<ReviewState>,
    listener: TcpListener,
    ui_dir: Option<PathBuf>,
}

impl Service {
    pub async fn bind(config: ServiceConfig) -> Result<Service, ServiceError> {
        let state = ReviewState::load(config.taxonomy, &config.queue, &config.manifest, &config.store)?;
        Service::with_state(state, &config.bind, config.ui_dir).await
    }

    pub async fn with_state(state: ReviewState, addr: &str, ui_dir: Option<PathBuf>) -> Result<Service, ServiceError> {
        let listener = TcpListener::bind(addr).await.map_err(|source| ServiceError::Bind {
            addr: addr.to_string(),
            source,
        })?;
        Ok(Service {
            state: Arc::new(state),
            listener,
            ui_dir,
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr, ServiceError> {
        Ok(self.listener.local_addr()?)
    }

    /// Serves until `shutdown` resolves, then syncs the journal.
    pub async fn run(self, shutdown: impl Future<Output = ()> + Send + 'static) -> Result<(), ServiceError> {
        let app = api::router(self.state.clone(), self.ui_dir.as_deref());
        axum::serve(self.listener, app).with_graceful_shutdown(shutdown).await?;
        let state = self.state;
        tokio::task::spawn_blocking(move || state.lock().sync())
            .await
            .map_err(|e| ServiceError::Io(std::io::Error::other(e)))?
    }
}
