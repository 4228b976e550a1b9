#![allow(dead_code)]

use std::sync::{Arc, OnceLock};

use tokio::net::TcpListener;
use tokio::sync::oneshot;

use vfm_client::Client;
use vfm_core::checkpoint::Checkpoint;
use vfm_core::data::{FeatureSpace, Task};
use vfm_core::elicitation::{synthetic_preferences, PreferenceMatrix, SyntheticConfig};
use vfm_core::params::VariationalParams;
use vfm_core::train::{train, TrainConfig};
use vfm_server::{AppState, Catalog, RequestLog, ServerConfig};

/// Users the fixture model is trained on; the rest play live users.
pub const TRAINED_USERS: usize = 80;

pub fn matrix() -> &'static PreferenceMatrix {
    static M: OnceLock<PreferenceMatrix> = OnceLock::new();
    M.get_or_init(|| synthetic_preferences(&SyntheticConfig::default(), 11).unwrap())
}

/// A classifier trained on the first users of the synthetic matrix.
pub fn trained() -> &'static Checkpoint {
    static C: OnceLock<Checkpoint> = OnceLock::new();
    C.get_or_init(|| {
        let users: Vec<usize> = (0..TRAINED_USERS).collect();
        let data = matrix().to_dataset(&users).unwrap();
        let mut config = TrainConfig::new(Task::Classification);
        config.dim = 3;
        config.max_epochs = 150;
        config.patience_elbo = usize::MAX;
        config.seed = 5;
        let outcome = train(&data, None, &config).unwrap();
        Checkpoint::new(data.space().clone(), config, outcome.params, Some(outcome.average))
            .with_feature_counts(data.feature_counts().to_vec())
    })
}

pub fn catalog() -> Catalog {
    Catalog::from_checkpoint(trained()).unwrap()
}

/// Checkpoint for a d = 0 model built from explicit values.
pub fn checkpoint_from(space: FeatureSpace, params: VariationalParams, task: Task) -> Checkpoint {
    let mut config = TrainConfig::new(task);
    config.dim = params.dim();
    Checkpoint::new(space, config, params, None)
}

pub fn config(samples: usize) -> ServerConfig {
    ServerConfig {
        samples,
        ..ServerConfig::default()
    }
}

/// A server on an ephemeral port; stops when dropped.
pub struct Server {
    pub client: Client,
    pub app: Arc<AppState>,
    pub base: String,
    _stop: oneshot::Sender<()>,
}

pub async fn start(catalog: Catalog, config: ServerConfig, log: Option<RequestLog>) -> Server {
    let app = AppState::new(catalog, config, log);
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let (tx, rx) = oneshot::channel::<()>();
    tokio::spawn(vfm_server::serve(listener, app.clone(), async move {
        let _ = rx.await;
    }));
    Server {
        client: Client::new(base.clone()),
        app,
        base,
        _stop: tx,
    }
}
