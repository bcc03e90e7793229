//! Built-in IEEE test systems (MATPOWER library data).

use crate::case::{parse_matpower_case, NetworkCase};

pub const IEEE6_TEXT: &str = include_str!("../data/case6ww.m");
pub const IEEE14_TEXT: &str = include_str!("../data/case14.m");
pub const IEEE30_TEXT: &str = include_str!("../data/case30.m");

/// 6-bus, 3-generator system (Wood & Wollenberg).
pub fn ieee6() -> NetworkCase {
    parse_matpower_case(IEEE6_TEXT).expect("bundled case parses")
}

pub fn ieee14() -> NetworkCase {
    parse_matpower_case(IEEE14_TEXT).expect("bundled case parses")
}

pub fn ieee30() -> NetworkCase {
    parse_matpower_case(IEEE30_TEXT).expect("bundled case parses")
}

/// Looks up a bundled case by a short name (`ieee6`, `case14`, ...).
pub fn by_name(name: &str) -> Option<NetworkCase> {
    match name.to_ascii_lowercase().as_str() {
        "ieee6" | "case6ww" | "ieee-6" => Some(ieee6()),
        "ieee14" | "case14" | "ieee-14" => Some(ieee14()),
        "ieee30" | "case30" | "ieee-30" => Some(ieee30()),
        _ => None,
    }
}
