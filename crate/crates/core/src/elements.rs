//! Shipped per-element lookup tables.

use std::collections::HashMap;

use once_cell::sync::Lazy;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const ELEMENTS_CSV: &str = include_str!("../data/elements.csv");
const OXIDATION_CSV: &str = include_str!("../data/oxidation_states.csv");

pub const MAX_Z: u8 = 94;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    S,
    P,
    D,
    F,
}

impl Block {
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElementFacts {
    pub z: u8,
    pub symbol: &'static str,
    pub period: u8,
    /// 1..=18, or 0 for f-block elements.
    pub group: u8,
    pub block: Block,
    pub s: u8,
    pub p: u8,
    pub d: u8,
    pub f: u8,
    pub mass: f64,
    pub metal: bool,
}

static FACTS: Lazy<Vec<ElementFacts>> = Lazy::new(|| parse_facts(ELEMENTS_CSV));

static OXIDATION: Lazy<HashMap<u8, Vec<i32>>> = Lazy::new(|| {
    let mut map = HashMap::new();
    for line in OXIDATION_CSV.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split(',');
        let sym = parts.next().unwrap();
        let z = z_from_symbol(sym).unwrap_or_else(|| panic!("unknown symbol {sym} in oxidation table"));
        let states = parts.map(|s| s.trim().parse::<i32>().unwrap()).collect();
        map.insert(z, states);
    }
    map
});

static VERSION: Lazy<String> = Lazy::new(|| {
    let digest = Sha256::digest(ELEMENTS_CSV.as_bytes());
    hex::encode(&digest[..8])
});

fn parse_facts(src: &'static str) -> Vec<ElementFacts> {
    let mut out = Vec::new();
    for line in src.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("z,") {
            continue;
        }
        let c: Vec<&'static str> = line.split(',').collect();
        let num = |i: usize| c[i].parse::<u8>().unwrap();
        let block = match c[4] {
            "s" => Block::S,
            "p" => Block::P,
            "d" => Block::D,
            "f" => Block::F,
            other => panic!("bad block {other}"),
        };
        out.push(ElementFacts {
            z: num(0),
            symbol: c[1],
            period: num(2),
            group: num(3),
            block,
            s: num(5),
            p: num(6),
            d: num(7),
            f: num(8),
            mass: c[9].parse().unwrap(),
            metal: c[10] == "1",
        });
    }
    for (i, e) in out.iter().enumerate() {
        assert_eq!(e.z as usize, i + 1, "element table must be contiguous from Z = 1");
    }
    out
}

/// Short hash of the shipped element table, recorded in token-table files.
pub fn facts_version() -> &'static str {
    &VERSION
}

pub fn facts(z: u8) -> Result<&'static ElementFacts> {
    if z == 0 || z > MAX_Z {
        return Err(Error::UnsupportedElement(z as u32));
    }
    Ok(&FACTS[z as usize - 1])
}

pub fn all_facts() -> &'static [ElementFacts] {
    &FACTS
}

pub fn symbol(z: u8) -> &'static str {
    facts(z).map(|f| f.symbol).unwrap_or("?")
}

pub fn z_from_symbol(sym: &str) -> Option<u8> {
    FACTS.iter().find(|e| e.symbol == sym).map(|e| e.z)
}

pub fn atomic_mass(z: u8) -> Result<f64> {
    Ok(facts(z)?.mass)
}

/// Common oxidation states from the shipped table (empty for noble gases without compounds).
pub fn common_oxidation_states(z: u8) -> &'static [i32] {
    OXIDATION.get(&z).map(|v| v.as_slice()).unwrap_or(&[])
}

/// The 89-element set used for the MP-20-scale token table: Z = 1..=83 and the actinides Ac..Pu.
pub fn mp20_elements() -> Vec<u8> {
    (1..=83).chain(89..=94).collect()
}
