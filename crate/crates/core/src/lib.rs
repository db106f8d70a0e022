pub mod ingest;
pub mod rouge;
pub mod prompt;
pub mod extract;
pub mod gateway;
pub mod graph;
pub mod run;
