#![allow(dead_code)]

pub mod checks;
pub mod grad;
pub mod oracle;
