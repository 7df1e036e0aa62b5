pub mod agent;
pub mod backends;
pub mod dqa;
pub mod env;
pub mod eval;
pub mod exec;
pub mod policy;
pub mod run;
pub mod templates;
pub mod training;
pub mod types;
pub mod util;
