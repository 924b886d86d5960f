//! Helpers shared by several integration test crates.

#![allow(dead_code)]

pub mod grad_suite;
