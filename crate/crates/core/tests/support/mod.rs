#![allow(dead_code)]

pub mod grad_suite;
pub mod lru_oracle;
