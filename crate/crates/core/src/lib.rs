pub mod env;
pub mod quantile;
pub mod datagen;
pub mod augment;
pub mod gvf;
pub mod agent;
pub mod evalbench;
pub mod theory;
pub mod config;
pub mod pipeline;
