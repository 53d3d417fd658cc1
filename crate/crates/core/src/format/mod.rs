//! On-disk formats: the `.dms` model file, the external weight import layout and mask sidecars.

pub mod dms;
pub mod import;
pub mod mask;

pub(crate) mod bytes;

pub use dms::{bit_identical, deserialize, read_model, serialize, write_model, DMS_MAGIC, DMS_VERSION};
