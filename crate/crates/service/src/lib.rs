//! HTTP API and command line for the dosing rule loop.

pub mod api;
pub mod cli;
pub mod config;
pub mod models;
