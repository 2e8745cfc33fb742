//! Cleans WiFi connectivity logs into semantic locations.
//!
//! Raw `(device, time, access point)` events become a table of validity
//! intervals and gaps. Gaps are filled at building/region level by a
//! self-trained classifier and clean regions are refined to rooms from room
//! and group affinities of co-located devices.

pub mod clock;
pub mod config;
pub mod engine;
pub mod eval;
pub mod error;
pub mod model;
pub mod sim;
pub mod cache;
pub mod coarse;
pub mod fine;
pub mod store;

pub use error::{LocaterError, Result};
