//! Chemically structured element tokens.
//!
//! Each element gets a 34-d descriptor (period, group and block one-hots plus
//! four scaled valence occupancies). Descriptors are standardized over the
//! element set, each feature group is rescaled by `|G|^{-1/2}`, and rows are
//! ℓ2-normalized. Optionally the balanced descriptors are projected onto their
//! top principal directions before normalization. Decoding is nearest prototype
//! by inner product.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::elements::{self, ElementFacts};
use crate::error::{Error, Result};

pub const RAW_DIM: usize = 34;
/// Feature group sizes: period, group, block, valence.
pub const GROUP_SIZES: [usize; 4] = [7, 19, 4, 4];
const STD_FLOOR: f64 = 1e-8;

/// `[onehot7(period-1), onehot19(group), onehot4(block), s/2, p/6, d/10, f/14]`.
pub fn raw_descriptor(z: u8) -> Result<[f64; RAW_DIM]> {
    Ok(descriptor_from_facts(elements::facts(z)?))
}

fn descriptor_from_facts(e: &ElementFacts) -> [f64; RAW_DIM] {
    let mut d = [0.0; RAW_DIM];
    d[e.period as usize - 1] = 1.0;
    d[7 + e.group as usize] = 1.0;
    d[26 + e.block.index()] = 1.0;
    d[30] = e.s as f64 / 2.0;
    d[31] = e.p as f64 / 6.0;
    d[32] = e.d as f64 / 10.0;
    d[33] = e.f as f64 / 14.0;
    d
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenTable {
    /// Supported atomic numbers, ascending; row `k` of every prototype matrix belongs to `elements[k]`.
    pub elements: Vec<u8>,
    pub raw_prototypes: Vec<Vec<f64>>,
    pub pca_prototypes: Option<Vec<Vec<f64>>>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// 34 × d_H, columns are principal directions.
    pub pca_basis: Option<Vec<Vec<f64>>>,
    pub explained_variance: Vec<f64>,
    pub d_h: usize,
    pub use_pca: bool,
    pub facts_version: String,
}

impl TokenTable {
    /// Build prototypes for `element_set` (order and duplicates are ignored).
    pub fn build(element_set: &[u8], d_h: usize, use_pca: bool) -> Result<Self> {
        let mut elems: Vec<u8> = element_set.to_vec();
        elems.sort_unstable();
        elems.dedup();
        if elems.is_empty() {
            return Err(Error::InvalidInput("empty element set".into()));
        }
        if use_pca && !(1..=RAW_DIM).contains(&d_h) {
            return Err(Error::InvalidInput(format!("token dimension {d_h} outside 1..=34")));
        }
        if !use_pca && d_h != RAW_DIM {
            return Err(Error::InvalidInput(format!(
                "raw tokens have dimension {RAW_DIM}, got --dh {d_h}"
            )));
        }
        let raw: Vec<[f64; RAW_DIM]> = elems
            .iter()
            .map(|&z| raw_descriptor(z))
            .collect::<Result<_>>()?;
        let n = raw.len() as f64;

        let mut mean = vec![0.0; RAW_DIM];
        for d in &raw {
            for k in 0..RAW_DIM {
                mean[k] += d[k] / n;
            }
        }
        let mut std = vec![0.0; RAW_DIM];
        for d in &raw {
            for k in 0..RAW_DIM {
                std[k] += (d[k] - mean[k]).powi(2) / n;
            }
        }
        for s in std.iter_mut() {
            *s = s.sqrt();
            if *s < STD_FLOOR {
                *s = 1.0;
            }
        }

        let weights = group_weights();
        let balanced: Vec<Vec<f64>> = raw
            .iter()
            .map(|d| {
                (0..RAW_DIM)
                    .map(|k| (d[k] - mean[k]) / std[k] * weights[k])
                    .collect()
            })
            .collect();
        let raw_prototypes = balanced.iter().map(|v| normalized(v)).collect::<Result<Vec<_>>>()?;

        let (pca_basis, pca_prototypes, explained_variance) = if use_pca {
            let (basis, var) = principal_directions(&balanced, d_h)?;
            let protos = balanced
                .iter()
                .map(|v| {
                    let p: Vec<f64> = (0..d_h)
                        .map(|c| (0..RAW_DIM).map(|k| v[k] * basis[k][c]).sum())
                        .collect();
                    normalized(&p)
                })
                .collect::<Result<Vec<_>>>()?;
            (Some(basis), Some(protos), var)
        } else {
            (None, None, Vec::new())
        };

        Ok(Self {
            elements: elems,
            raw_prototypes,
            pca_prototypes,
            mean,
            std,
            pca_basis,
            explained_variance,
            d_h,
            use_pca,
            facts_version: elements::facts_version().to_string(),
        })
    }

    /// Prototypes used by [`encode`]/[`decode`] by default (PCA when built with it).
    pub fn prototypes(&self) -> &[Vec<f64>] {
        self.prototypes_for(self.use_pca)
    }

    pub fn prototypes_for(&self, compressed: bool) -> &[Vec<f64>] {
        match (&self.pca_prototypes, compressed) {
            (Some(p), true) => p,
            _ => &self.raw_prototypes,
        }
    }

    pub fn token_dim(&self) -> usize {
        self.prototypes()[0].len()
    }

    pub fn index_of(&self, z: u8) -> Result<usize> {
        self.elements
            .binary_search(&z)
            .map_err(|_| Error::UnsupportedElement(z as u32))
    }

    pub fn prototype(&self, z: u8) -> Result<&[f64]> {
        Ok(&self.prototypes()[self.index_of(z)?])
    }

    pub fn encode(&self, atomic_numbers: &[u8]) -> Result<Array2<f64>> {
        encode(atomic_numbers, self, self.use_pca)
    }

    pub fn decode(&self, h: &[f64]) -> Result<u8> {
        decode(h, self)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Per-feature `|G|^{-1/2}` weights.
pub fn group_weights() -> [f64; RAW_DIM] {
    let mut w = [0.0; RAW_DIM];
    let mut k = 0;
    for g in GROUP_SIZES {
        for _ in 0..g {
            w[k] = 1.0 / (g as f64).sqrt();
            k += 1;
        }
    }
    w
}

fn normalized(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return Err(Error::InvalidInput(
            "element descriptor is identically zero after standardization".into(),
        ));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Top `d` principal directions (as a 34 × d row-major basis) of the rows of `data`
/// and their variances. Columns are sign-fixed so the largest-magnitude loading is positive.
fn principal_directions(data: &[Vec<f64>], d: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let n = data.len();
    let x = DMatrix::from_fn(n, RAW_DIM, |i, k| data[i][k]);
    let means = x.row_mean();
    let xc = DMatrix::from_fn(n, RAW_DIM, |i, k| x[(i, k)] - means[k]);
    let cov = xc.transpose() * &xc / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..RAW_DIM).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let top = eig.eigenvalues[order[0]].max(0.0);
    let rank = order
        .iter()
        .filter(|&&i| eig.eigenvalues[i] > 1e-10 * top.max(1e-300))
        .count();
    if d > rank {
        return Err(Error::RankExceeded { requested: d, rank });
    }
    let mut basis = vec![vec![0.0; d]; RAW_DIM];
    let mut variances = Vec::with_capacity(d);
    for (c, &i) in order.iter().take(d).enumerate() {
        let col = eig.eigenvectors.column(i);
        let (mut big, mut sign) = (0.0f64, 1.0);
        for k in 0..RAW_DIM {
            if col[k].abs() > big + 1e-12 {
                big = col[k].abs();
                sign = col[k].signum();
            }
        }
        for k in 0..RAW_DIM {
            basis[k][c] = sign * col[k];
        }
        variances.push(eig.eigenvalues[i]);
    }
    Ok((basis, variances))
}

/// Token matrix `H` with row `i` equal to the prototype of `atomic_numbers[i]`.
pub fn encode(atomic_numbers: &[u8], table: &TokenTable, compressed: bool) -> Result<Array2<f64>> {
    let protos = table.prototypes_for(compressed);
    let dim = protos[0].len();
    let mut h = Array2::zeros((atomic_numbers.len(), dim));
    for (i, &z) in atomic_numbers.iter().enumerate() {
        let row = &protos[table.index_of(z)?];
        for k in 0..dim {
            h[(i, k)] = row[k];
        }
    }
    Ok(h)
}

/// Nearest prototype by inner product; ties go to the smallest atomic number.
pub fn decode(h: &[f64], table: &TokenTable) -> Result<u8> {
    decode_with(h, table, table.use_pca)
}

pub fn decode_with(h: &[f64], table: &TokenTable, compressed: bool) -> Result<u8> {
    let protos = table.prototypes_for(compressed);
    if h.len() != protos[0].len() {
        return Err(Error::InvalidInput(format!(
            "token has dimension {}, table expects {}",
            h.len(),
            protos[0].len()
        )));
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite token".into()));
    }
    if h.iter().all(|&v| v == 0.0) {
        return Err(Error::ZeroToken);
    }
    let mut best = (f64::NEG_INFINITY, 0usize);
    for (k, p) in protos.iter().enumerate() {
        let s: f64 = p.iter().zip(h).map(|(a, b)| a * b).sum();
        if s > best.0 {
            best = (s, k);
        }
    }
    Ok(table.elements[best.1])
}
