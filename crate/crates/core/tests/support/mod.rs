#![allow(dead_code)]

pub mod gradcheck;
pub mod reference_eval;
