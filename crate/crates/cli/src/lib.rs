//! Command-line front end: experiment configuration, grid driver and reports.

pub mod commands;
pub mod config;
pub mod report;

use dualinc::ErrorClass;

/// Process exit code for an error: 1 configuration, 2 data, 3 runtime.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<dualinc::Error>() {
            return match e.class() {
                ErrorClass::Config => 1,
                ErrorClass::Data => 2,
                ErrorClass::Runtime => 3,
            };
        }
    }
    3
}
