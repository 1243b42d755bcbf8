//! File formats: SMLF frame stacks, CSV tables, PSF/camera JSON documents
//! and raw output-map planes.

pub mod camera_json;
pub mod maps;
pub mod psf_json;
pub mod smlf;
pub mod table;
