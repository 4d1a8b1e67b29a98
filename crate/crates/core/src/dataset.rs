//! Corpus loading, canonicalization, augmentation, atom-count sampling and splitting.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::Matrix3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::crystal::{Crystal, Frac};
use crate::error::{Error, Result};

pub const DEFAULT_MAX_ATOMS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub crystals: Vec<Crystal>,
    pub atom_count_hist: BTreeMap<usize, f64>,
    pub element_set: Vec<u8>,
    /// Crystals dropped for exceeding `max_atoms`.
    pub skipped: usize,
}

impl Corpus {
    /// Canonicalize and index a list of crystals.
    pub fn from_crystals(crystals: Vec<Crystal>, max_atoms: usize) -> Result<Self> {
        let mut kept = Vec::with_capacity(crystals.len());
        let mut skipped = 0;
        for c in crystals {
            if c.num_atoms() > max_atoms {
                skipped += 1;
                log::warn!("skipping crystal with {} atoms (max {max_atoms})", c.num_atoms());
                continue;
            }
            kept.push(c.canonicalize()?);
        }
        if kept.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for c in &kept {
            *counts.entry(c.num_atoms()).or_default() += 1;
        }
        let total = kept.len() as f64;
        let atom_count_hist = counts.into_iter().map(|(n, k)| (n, k as f64 / total)).collect();
        let mut element_set: Vec<u8> = kept.iter().flat_map(|c| c.atomic_numbers.iter().copied()).collect();
        element_set.sort_unstable();
        element_set.dedup();
        Ok(Self { crystals: kept, atom_count_hist, element_set, skipped })
    }

    pub fn len(&self) -> usize {
        self.crystals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.crystals.is_empty()
    }

    pub fn sample_atom_count<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut last = 1;
        for (&n, &p) in &self.atom_count_hist {
            acc += p;
            last = n;
            if u < acc {
                return n;
            }
        }
        last
    }

    /// Deterministic shuffled split by the first fraction.
    pub fn split(&self, fractions: (f64, f64), seed: u64) -> Result<(Vec<Crystal>, Vec<Crystal>)> {
        if fractions.0 < 0.0 || fractions.1 < 0.0 || ((fractions.0 + fractions.1) - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("split fractions {fractions:?} must be nonnegative and sum to 1")));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = (fractions.0 * self.len() as f64).round() as usize;
        let train = idx[..n_train].iter().map(|&i| self.crystals[i].clone()).collect();
        let val = idx[n_train..].iter().map(|&i| self.crystals[i].clone()).collect();
        Ok((train, val))
    }
}

/// Parse crystal JSON lines. Blank lines and `#` header lines are ignored; errors carry
/// 1-based line numbers.
pub fn parse_jsonl(text: &str) -> Result<Vec<Crystal>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let c = Crystal::from_json_line(line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        out.push(c);
    }
    Ok(out)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Crystal>> {
    parse_jsonl(&std::fs::read_to_string(path)?)
}

pub fn load_corpus(path: &Path, max_atoms: usize) -> Result<Corpus> {
    let crystals = read_jsonl(path)?;
    if crystals.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Corpus::from_crystals(crystals, max_atoms)
}

pub fn write_jsonl(path: &Path, crystals: &[Crystal]) -> Result<()> {
    let mut s = String::new();
    for c in crystals {
        s.push_str(&c.to_json_line());
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn augment_translation<R: Rng>(c: &Crystal, rng: &mut R) -> Crystal {
    let t: Frac = rng.gen();
    c.translated(t)
}

fn cubic(a: f64) -> Matrix3<f64> {
    Matrix3::from_diagonal_element(a)
}

fn fcc_primitive(a: f64) -> Matrix3<f64> {
    let h = a / 2.0;
    Matrix3::new(0.0, h, h, h, 0.0, h, h, h, 0.0)
}

fn bcc_primitive(a: f64) -> Matrix3<f64> {
    let h = a / 2.0;
    Matrix3::new(-h, h, h, h, -h, h, h, h, -h)
}

fn hexagonal(a: f64, c: f64) -> Matrix3<f64> {
    Matrix3::new(a, 0.0, 0.0, -a / 2.0, a * 3f64.sqrt() / 2.0, 0.0, 0.0, 0.0, c)
}

fn tetragonal(a: f64, c: f64) -> Matrix3<f64> {
    Matrix3::new(a, 0.0, 0.0, 0.0, a, 0.0, 0.0, 0.0, c)
}

/// Sixteen small textbook structures (1 to 6 atoms per cell).
pub fn toy_corpus() -> Vec<Crystal> {
    let t = 1.0 / 3.0;
    let u = 0.305;
    let entries: Vec<(Vec<u8>, Vec<Frac>, Matrix3<f64>)> = vec![
        (vec![13], vec![[0.0; 3]], fcc_primitive(4.05)),
        (vec![29], vec![[0.0; 3]], fcc_primitive(3.61)),
        (vec![26], vec![[0.0; 3]], bcc_primitive(2.87)),
        (vec![12, 12], vec![[t, 2.0 * t, 0.25], [2.0 * t, t, 0.75]], hexagonal(3.21, 5.21)),
        (vec![11, 17], vec![[0.0; 3], [0.5; 3]], fcc_primitive(5.64)),
        (vec![55, 17], vec![[0.0; 3], [0.5; 3]], cubic(4.12)),
        (vec![14, 14], vec![[0.0; 3], [0.25; 3]], fcc_primitive(5.43)),
        (vec![31, 33], vec![[0.0; 3], [0.25; 3]], fcc_primitive(5.65)),
        (
            vec![30, 30, 8, 8],
            vec![[t, 2.0 * t, 0.0], [2.0 * t, t, 0.5], [t, 2.0 * t, 0.382], [2.0 * t, t, 0.882]],
            hexagonal(3.25, 5.21),
        ),
        (vec![20, 9, 9], vec![[0.0; 3], [0.25; 3], [0.75; 3]], fcc_primitive(5.46)),
        (
            vec![38, 22, 8, 8, 8],
            vec![[0.0; 3], [0.5; 3], [0.5, 0.5, 0.0], [0.5, 0.0, 0.5], [0.0, 0.5, 0.5]],
            cubic(3.905),
        ),
        (
            vec![22, 22, 8, 8, 8, 8],
            vec![
                [0.0; 3],
                [0.5; 3],
                [u, u, 0.0],
                [1.0 - u, 1.0 - u, 0.0],
                [0.5 + u, 0.5 - u, 0.5],
                [0.5 - u, 0.5 + u, 0.5],
            ],
            tetragonal(4.594, 2.959),
        ),
        (vec![12, 8], vec![[0.0; 3], [0.5; 3]], fcc_primitive(4.21)),
        (
            vec![5, 5, 7, 7],
            vec![[t, 2.0 * t, 0.25], [2.0 * t, t, 0.75], [2.0 * t, t, 0.25], [t, 2.0 * t, 0.75]],
            hexagonal(2.50, 6.66),
        ),
        (
            vec![75, 8, 8, 8],
            vec![[0.0; 3], [0.5, 0.0, 0.0], [0.0, 0.5, 0.0], [0.0, 0.0, 0.5]],
            cubic(3.75),
        ),
        (
            vec![8, 8, 29, 29, 29, 29],
            vec![
                [0.0; 3],
                [0.5; 3],
                [0.25, 0.25, 0.25],
                [0.75, 0.75, 0.25],
                [0.75, 0.25, 0.75],
                [0.25, 0.75, 0.75],
            ],
            cubic(4.27),
        ),
    ];
    entries
        .into_iter()
        .map(|(z, f, l)| Crystal::new_wrapped(z, f, l).expect("toy structure is valid"))
        .collect()
}
