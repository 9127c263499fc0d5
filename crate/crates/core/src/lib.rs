//! Simulator of a phone whose security monitor manages sovereign apps
//! without being able to inspect them.

pub mod attestation;
pub mod domains;
pub mod hw;
pub mod policy;
pub mod security_monitor;
pub mod sim;
