//! Simulators implementing [`crate::types::Environment`].

pub mod household;
pub mod nav;

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("episode already finished")]
    EpisodeOver,
    #[error(transparent)]
    Parse(#[from] household::ActionParseError),
    #[error("unknown action `{0}`")]
    UnknownAction(String),
    #[error(transparent)]
    Graph(#[from] nav::GraphError),
}
