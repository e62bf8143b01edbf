#![allow(dead_code)]

pub mod baseline;
pub mod criteria;
pub mod gradcheck;
pub mod suite;
