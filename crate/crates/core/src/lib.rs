pub mod bench;
pub mod candidates;
pub mod catalog;
pub mod cost;
pub mod generate;
pub mod ilp;
pub mod io;
pub mod mir;
pub mod optimizer;
pub mod orders;
pub mod par;
pub mod runtime;
pub mod topology;
