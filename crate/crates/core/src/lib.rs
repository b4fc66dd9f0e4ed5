pub mod admm;
pub mod agent;
pub mod clock;
pub mod constraints;
pub mod driver;
pub mod error;
pub mod gateway;
pub mod monitor;
pub mod oracle;
pub mod projection;
pub mod protocol;
pub mod registry;
pub mod scenario;
pub mod sink;
pub mod solver;
pub mod transport;
pub mod utility;

pub use error::{Error, ProtocolError, Result, TransportError};
