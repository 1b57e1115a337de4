//! Service layer over `xmodal-core`: session state, the JSON API and the
//! sample wire encoding.

pub mod api;
pub mod encoding;
pub mod error;
pub mod session;

pub use api::router;
pub use error::ApiError;
pub use session::SessionState;
