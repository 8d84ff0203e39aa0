//! Synthetic walkers, multi-domain streams, and on-disk datasets.

pub mod io;
pub mod stream;
pub mod walker;

pub use io::{export_stream, ingest_directory, load_stream};
pub use stream::{fingerprint, generate_domain_stream, standard_stream, FrameShape};
pub use walker::{generate_identity, render_sequence, DomainSpec, IdentitySpec};
