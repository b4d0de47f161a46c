//! Serves a live ensemble session: generated characters stream out as
//! length-prefixed JSON frames over TCP, weight and control messages come
//! back on the same connection or as OSC datagrams.

pub mod config;
pub mod osc;
pub mod protocol;
pub mod session;
pub mod tcp;

use std::net::SocketAddr;

use config::{build_ensemble, model_infos, Manifest, ServerConfig};
use osc::OscListener;
use session::{Session, SessionHandle};
use tcp::TcpServer;

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("model {name:?}: {source}")]
    Model {
        name: String,
        source: conductor_core::Error,
    },
    #[error(transparent)]
    Core(#[from] conductor_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A session with its network listeners.
pub struct Server {
    // dropped in order: listeners first, then the session
    tcp: TcpServer,
    osc: Option<OscListener>,
    session: Session,
}

impl Server {
    pub fn start(config: &ServerConfig) -> Result<Self, ServerError> {
        let manifest = Manifest::load(&config.manifest)?;
        let models = manifest.load_models()?;
        let ensemble = build_ensemble(&models, config.session.weights.as_deref())?;
        let session = Session::start(ensemble, config.session.clone(), model_infos(&models))?;
        let tcp = TcpServer::spawn(&config.listen, session.handle(), config.client_queue)?;
        let osc = match &config.osc {
            Some(addr) => {
                let handle = session.handle();
                Some(OscListener::spawn(addr, move |w| handle.set_weights(w).is_ok())?)
            }
            None => None,
        };
        Ok(Self { tcp, osc, session })
    }

    pub fn handle(&self) -> SessionHandle {
        self.session.handle()
    }

    pub fn tcp_addr(&self) -> SocketAddr {
        self.tcp.local_addr()
    }

    pub fn osc(&self) -> Option<&OscListener> {
        self.osc.as_ref()
    }

    /// Runs until the session ends.
    pub fn wait(self) -> Result<(), ServerError> {
        let Server { tcp, osc, session } = self;
        let result = session.wait();
        drop(osc);
        drop(tcp);
        result
    }
}
