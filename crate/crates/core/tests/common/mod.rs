#![allow(dead_code)]

pub mod golden;
pub mod mutation;

pub const SAMPLE_DATASET: &str = include_str!("../../fixtures/sample_dataset.json");
