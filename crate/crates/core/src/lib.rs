pub mod ad;
pub mod data;
pub mod engine;
pub mod eval;
pub mod models;
