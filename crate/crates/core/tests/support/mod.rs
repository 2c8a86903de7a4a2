#![allow(dead_code)]

pub mod taint_oracle;
