pub mod auth;
pub mod canonical;
pub mod consensus;
pub mod episode;
pub mod explore;
pub mod fuzz;
pub mod harness;
pub mod message;
pub mod quorum;
pub mod report;
pub mod scenario;
pub mod simnet;
pub mod space;
pub mod supervisor;
pub mod voter;
