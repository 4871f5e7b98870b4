#![allow(dead_code)]

pub mod qpgen;
