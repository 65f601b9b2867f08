//! Command-line front end and HTTP service.

use std::path::Path;

use aqueduct_core::demo::demo_instance;
use aqueduct_core::{load_instance, Instance, InstanceError};

pub mod service;

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_INVALID: u8 = 2;
pub const EXIT_USAGE: u8 = 64;

/// The instance at `path`, or the bundled demo.
pub fn instance_or_demo(path: Option<&Path>) -> Result<Instance, InstanceError> {
    match path {
        Some(p) => load_instance(p),
        None => Ok(demo_instance()),
    }
}
