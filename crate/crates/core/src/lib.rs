//! Point-cloud dataset toolkit.
//!
//! - [`format`]: the `.pcrecord` slice format and its page codec
//! - [`index`]: in-memory sample index over slice headers
//! - [`ingest`]: PLY / OBJ / XYZ / KITTI / NPY parsers and directory conversion
//! - [`pipeline`]: order-preserving multi-stage parallel loading
//! - [`distributed`]: sharding and a simulated data-parallel training loop
//! - [`streaming`]: object-store streaming under a disk budget
//! - [`autotune`]: monitoring and Bayesian search over pipeline parallelism
//! - [`bench`]: timing, CPU and memory sampling harness

pub mod autotune;
pub mod bench;
pub mod distributed;
pub mod format;
pub mod index;
pub mod ingest;
pub mod pipeline;
pub mod streaming;
pub mod sys;
