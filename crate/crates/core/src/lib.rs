pub mod checkpoint;
pub mod dataset;
pub mod em;
pub mod error;
pub mod io;
pub mod kv;
pub mod nn;
pub mod oracle;
pub mod params;
pub mod pipeline;
pub mod projection;
pub mod scene;
pub mod splat;
pub mod tasks;
pub mod train;

pub use error::{Error, Result};
