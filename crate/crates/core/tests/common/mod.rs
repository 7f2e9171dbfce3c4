// Each test binary uses only part of these helpers.
#![allow(dead_code)]

pub mod dgp;
pub mod oracle;
