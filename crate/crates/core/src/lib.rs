//! Human-saliency guided training for synthetic face detection.
//!
//! The crate covers the whole offline pipeline: aggregating annotator
//! masks into saliency maps ([`saliency`]), cropping faces and their maps
//! to the network geometry ([`preprocess`]), class activation maps over a
//! small conv backbone ([`model`]), the composite saliency + cross-entropy
//! loss ([`loss`]), a deterministic SGD harness ([`train`]), open-set
//! evaluation ([`eval`]) and the two-alternative forced choice annotation
//! store ([`annotate`]). [`toybench`] is a synthetic shift benchmark that
//! exercises all of it at desk scale.

pub mod annotate;
pub mod error;
pub mod eval;
pub mod grid;
pub mod jsonl;
pub mod loss;
pub mod model;
pub mod plot;
pub mod preprocess;
pub mod saliency;
pub mod tensor;
pub mod toybench;
pub mod train;

pub use error::{Error, Result};
pub use grid::Grid;
pub use tensor::Tensor3;
