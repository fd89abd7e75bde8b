pub mod agent;
pub mod chat;
pub mod cohort;
pub mod engine;
pub mod ids;
pub mod llm;
pub mod model;
pub mod money;
pub mod presence;
pub mod service;
pub mod sim;
pub mod store;
pub mod tally;
pub mod time;
