//! Live control service for a trained sub-goal agent: clients open a
//! session, place waypoints while the agent moves, and receive state
//! messages back.

pub mod protocol;
pub mod server;
pub mod session;

pub use protocol::{CreateRequest, LayoutSpec, Request, Response, StateMessage, Status, PROTOCOL_VERSION};
pub use server::{serve, Service, ServiceConfig};
pub use session::Session;
