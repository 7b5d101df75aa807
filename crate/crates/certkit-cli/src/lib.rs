//! Problem and result file formats behind the `certkit` binary.

pub mod problem_file;
pub mod result_file;
