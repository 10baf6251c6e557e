#![allow(dead_code)]

pub mod criteria;
pub mod gradsuite;
pub mod oracle;
