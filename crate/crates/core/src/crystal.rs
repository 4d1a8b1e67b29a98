//! Periodic unit cells, the lower-triangular lattice latent, and periodic geometry.
//!
//! Conventions: lattice vectors are the *rows* of a 3×3 matrix `L`, fractional
//! coordinates are row vectors, and Cartesian positions are `x = f·L`.

use nalgebra::{Matrix3, RowVector3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Lattice = Matrix3<f64>;
pub type Frac = [f64; 3];

/// Torus-aware residual `u - round(u)`, rounding halves toward +∞, so the result lies in `[-½, ½)`.
#[inline]
pub fn wrap(u: f64) -> f64 {
    let mut w = u - (u + 0.5).floor();
    // `u + 0.5` can round up across an integer for values just below a half.
    if w >= 0.5 {
        w -= 1.0;
    } else if w < -0.5 {
        w += 1.0;
    }
    w
}

/// `u - floor(u)`, always in `[0, 1)`.
#[inline]
pub fn mod1(u: f64) -> f64 {
    let m = u - u.floor();
    if m >= 1.0 {
        0.0
    } else {
        m
    }
}

pub fn wrap3(v: Frac) -> Frac {
    [wrap(v[0]), wrap(v[1]), wrap(v[2])]
}

pub fn mod1_3(v: Frac) -> Frac {
    [mod1(v[0]), mod1(v[1]), mod1(v[2])]
}

/// Unconstrained 6-vector parameterizing a lower-triangular lattice with positive diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatticeLatent(pub [f64; 6]);

impl LatticeLatent {
    pub fn zeros() -> Self {
        Self([0.0; 6])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Rebuild `[[e^y1,0,0],[y2,e^y3,0],[y4,y5,e^y6]]` from the latent.
pub fn lattice_from_latent(y: &LatticeLatent) -> Result<Lattice> {
    if !y.is_finite() {
        return Err(Error::InvalidInput(format!("non-finite lattice latent {:?}", y.0)));
    }
    Ok(lattice_from_latent_unchecked(&y.0))
}

pub(crate) fn lattice_from_latent_unchecked(y: &[f64; 6]) -> Lattice {
    Matrix3::new(
        y[0].exp(),
        0.0,
        0.0,
        y[1],
        y[2].exp(),
        0.0,
        y[3],
        y[4],
        y[5].exp(),
    )
}

/// Inverse of [`lattice_from_latent`] up to a rigid rotation of the Cartesian frame.
///
/// The lower-triangular factor with positive diagonal is the Cholesky factor of
/// the metric `G = L·Lᵀ`, which is the unique rotation of `L` into that form.
pub fn latent_from_lattice(lattice: &Lattice) -> Result<LatticeLatent> {
    if lattice.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite lattice".into()));
    }
    let det = lattice.determinant();
    if !(det > 0.0) {
        return Err(Error::InvalidInput(format!(
            "lattice must have positive determinant, got {det}"
        )));
    }
    let chol = metric_tensor(lattice)
        .cholesky()
        .ok_or_else(|| Error::InvalidInput("lattice metric is not positive definite".into()))?;
    let c = chol.l();
    Ok(LatticeLatent([
        c[(0, 0)].ln(),
        c[(1, 0)],
        c[(1, 1)].ln(),
        c[(2, 0)],
        c[(2, 1)],
        c[(2, 2)].ln(),
    ]))
}

/// Rotate `L` into lower-triangular form with positive diagonal.
pub fn lower_triangular_form(lattice: &Lattice) -> Result<Lattice> {
    let y = latent_from_lattice(lattice)?;
    Ok(lattice_from_latent_unchecked(&y.0))
}

/// `G = L·Lᵀ`.
pub fn metric_tensor(lattice: &Lattice) -> Matrix3<f64> {
    lattice * lattice.transpose()
}

/// Mean of the three lattice-vector lengths.
pub fn cell_scale(lattice: &Lattice) -> f64 {
    (0..3).map(|i| lattice.row(i).norm()).sum::<f64>() / 3.0
}

pub fn cell_scale_latent(y: &LatticeLatent) -> Result<f64> {
    Ok(cell_scale(&lattice_from_latent(y)?))
}

/// Lattice lengths `(a, b, c)` and angles `(α, β, γ)` in degrees.
pub fn lattice_parameters(lattice: &Lattice) -> ([f64; 3], [f64; 3]) {
    let g = metric_tensor(lattice);
    let len = [g[(0, 0)].sqrt(), g[(1, 1)].sqrt(), g[(2, 2)].sqrt()];
    let angle = |i: usize, j: usize| {
        (g[(i, j)] / (len[i] * len[j]))
            .clamp(-1.0, 1.0)
            .acos()
            .to_degrees()
    };
    (len, [angle(1, 2), angle(0, 2), angle(0, 1)])
}

pub fn volume(lattice: &Lattice) -> f64 {
    lattice.determinant().abs()
}

#[inline]
pub fn frac_to_cart(f: &Frac, lattice: &Lattice) -> Vector3<f64> {
    (RowVector3::new(f[0], f[1], f[2]) * lattice).transpose()
}

/// `X = F·L`, one Cartesian row per fractional row.
pub fn cartesian(frac: &[Frac], lattice: &Lattice) -> Vec<[f64; 3]> {
    frac.iter()
        .map(|f| {
            let x = frac_to_cart(f, lattice);
            [x[0], x[1], x[2]]
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinImageResult {
    pub delta_frac: Frac,
    pub cart_dist: f64,
    pub norm_dist: f64,
}

/// Metric-aware minimum image of `f_i - f_j` over offsets `{-R..R}³`.
///
/// Ties are resolved toward the lexicographically smallest offset.
pub fn min_image(fi: &Frac, fj: &Frac, lattice: &Lattice, radius: i32) -> MinImageResult {
    let g = metric_tensor(lattice);
    let delta = [fi[0] - fj[0], fi[1] - fj[1], fi[2] - fj[2]];
    let best = min_image_delta(&delta, &g, radius);
    let cart = frac_to_cart(&best, lattice).norm();
    MinImageResult {
        delta_frac: best,
        cart_dist: cart,
        norm_dist: cart / cell_scale(lattice),
    }
}

/// Offset search on a precomputed metric; returns the minimizing fractional displacement.
pub fn min_image_delta(delta: &Frac, g: &Matrix3<f64>, radius: i32) -> Frac {
    let mut best = *delta;
    let mut best_q = f64::INFINITY;
    for rx in -radius..=radius {
        for ry in -radius..=radius {
            for rz in -radius..=radius {
                let v = [
                    delta[0] + rx as f64,
                    delta[1] + ry as f64,
                    delta[2] + rz as f64,
                ];
                let q = quad_form(&v, g);
                if q < best_q {
                    best_q = q;
                    best = v;
                }
            }
        }
    }
    best
}

#[inline]
pub(crate) fn quad_form(v: &Frac, g: &Matrix3<f64>) -> f64 {
    let mut q = 0.0;
    for a in 0..3 {
        for b in 0..3 {
            q += v[a] * g[(a, b)] * v[b];
        }
    }
    q
}

/// Shortest nonzero lattice vector length reachable with offsets in `{-R..R}³`.
pub fn shortest_self_image(lattice: &Lattice, radius: i32) -> f64 {
    let g = metric_tensor(lattice);
    let mut best = f64::INFINITY;
    for rx in -radius..=radius {
        for ry in -radius..=radius {
            for rz in -radius..=radius {
                if rx == 0 && ry == 0 && rz == 0 {
                    continue;
                }
                let q = quad_form(&[rx as f64, ry as f64, rz as f64], &g);
                best = best.min(q);
            }
        }
    }
    best.max(0.0).sqrt()
}

/// Greedy basis reduction: rows are shortened by integer combinations of the other
/// rows until `|G_ij| ≤ ½·min(G_ii, G_jj)` and no `b_k ± b_i ± b_j` is shorter than `b_k`.
///
/// Returns the reduced basis and the integer change of basis `M` with `L' = M·L`.
pub fn reduce_basis(lattice: &Lattice) -> (Lattice, Matrix3<f64>) {
    let mut basis = *lattice;
    let mut m = Matrix3::<f64>::identity();
    const TOL: f64 = 1e-10;
    for _ in 0..200 {
        sort_rows_by_length(&mut basis, &mut m);
        let mut changed = false;
        for i in 0..3 {
            for j in 0..3 {
                if i == j {
                    continue;
                }
                let gij = basis.row(i).dot(&basis.row(j));
                let gjj = basis.row(j).norm_squared();
                if gij.abs() > 0.5 * gjj * (1.0 + TOL) {
                    let k = (gij / gjj).round();
                    let (bj, mj) = (basis.row(j).into_owned(), m.row(j).into_owned());
                    basis.set_row(i, &(basis.row(i) - bj * k));
                    m.set_row(i, &(m.row(i) - mj * k));
                    changed = true;
                }
            }
        }
        for k in 0..3 {
            let (i, j) = match k {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            let cur = basis.row(k).norm_squared();
            let mut best = (cur, 0.0, 0.0);
            for si in [-1.0, 1.0] {
                for sj in [-1.0, 1.0] {
                    let cand = basis.row(k) + basis.row(i) * si + basis.row(j) * sj;
                    let q = cand.norm_squared();
                    if q < best.0 * (1.0 - TOL) {
                        best = (q, si, sj);
                    }
                }
            }
            if best.1 != 0.0 {
                let nb = basis.row(k) + basis.row(i) * best.1 + basis.row(j) * best.2;
                let nm = m.row(k) + m.row(i) * best.1 + m.row(j) * best.2;
                basis.set_row(k, &nb);
                m.set_row(k, &nm);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    sort_rows_by_length(&mut basis, &mut m);
    if basis.determinant() < 0.0 {
        basis = -basis;
        m = -m;
    }
    (basis, m)
}

fn sort_rows_by_length(basis: &mut Lattice, m: &mut Matrix3<f64>) {
    let mut order = [0usize, 1, 2];
    let norms: Vec<f64> = (0..3).map(|i| basis.row(i).norm_squared()).collect();
    // insertion sort; lengths equal to rounding keep their current order
    for i in 1..3 {
        let mut j = i;
        while j > 0 && norms[order[j]] < norms[order[j - 1]] * (1.0 - 1e-10) {
            order.swap(j, j - 1);
            j -= 1;
        }
    }
    if order == [0, 1, 2] {
        return;
    }
    let (b0, m0) = (*basis, *m);
    for (dst, &src) in order.iter().enumerate() {
        basis.set_row(dst, &b0.row(src));
        m.set_row(dst, &m0.row(src));
    }
}

/// A periodic crystal: atomic numbers, fractional coordinates in `[0,1)³`, and a lattice (rows, Å).
#[derive(Debug, Clone, PartialEq)]
pub struct Crystal {
    pub atomic_numbers: Vec<u8>,
    pub frac_coords: Vec<Frac>,
    pub lattice: Lattice,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrystalRecord {
    pub atomic_numbers: Vec<u32>,
    pub frac_coords: Vec<[f64; 3]>,
    pub lattice: [[f64; 3]; 3],
}

impl Crystal {
    /// Validating constructor; coordinates must already lie in `[0,1)`.
    pub fn new(atomic_numbers: Vec<u8>, frac_coords: Vec<Frac>, lattice: Lattice) -> Result<Self> {
        if atomic_numbers.is_empty() {
            return Err(Error::InvalidInput("crystal has no atoms".into()));
        }
        if atomic_numbers.len() != frac_coords.len() {
            return Err(Error::InvalidInput(format!(
                "{} atomic numbers but {} coordinates",
                atomic_numbers.len(),
                frac_coords.len()
            )));
        }
        if atomic_numbers.iter().any(|&z| z == 0) {
            return Err(Error::InvalidInput("atomic number 0".into()));
        }
        if frac_coords
            .iter()
            .flatten()
            .any(|v| !v.is_finite() || !(0.0..1.0).contains(v))
        {
            return Err(Error::InvalidInput("fractional coordinates outside [0,1)".into()));
        }
        if lattice.iter().any(|v| !v.is_finite()) || !(lattice.determinant() > 0.0) {
            return Err(Error::InvalidInput(
                "lattice must be finite with positive determinant".into(),
            ));
        }
        Ok(Self {
            atomic_numbers,
            frac_coords,
            lattice,
        })
    }

    /// Like [`Crystal::new`] but wraps coordinates into `[0,1)` first.
    pub fn new_wrapped(atomic_numbers: Vec<u8>, frac_coords: Vec<Frac>, lattice: Lattice) -> Result<Self> {
        let frac = frac_coords.into_iter().map(mod1_3).collect();
        Self::new(atomic_numbers, frac, lattice)
    }

    pub fn num_atoms(&self) -> usize {
        self.atomic_numbers.len()
    }

    pub fn volume(&self) -> f64 {
        volume(&self.lattice)
    }

    pub fn cartesian(&self) -> Vec<[f64; 3]> {
        cartesian(&self.frac_coords, &self.lattice)
    }

    pub fn latent(&self) -> Result<LatticeLatent> {
        latent_from_lattice(&self.lattice)
    }

    /// Reduce the basis, re-express coordinates in it, and rotate the lattice
    /// into lower-triangular form with positive diagonal.
    pub fn canonicalize(&self) -> Result<Crystal> {
        let (reduced, m) = reduce_basis(&self.lattice);
        let m_inv = m
            .try_inverse()
            .ok_or_else(|| Error::InvalidInput("degenerate lattice basis".into()))?
            .map(|v| v.round());
        let frac = self
            .frac_coords
            .iter()
            .map(|f| {
                let r = RowVector3::new(f[0], f[1], f[2]) * m_inv;
                mod1_3([r[0], r[1], r[2]])
            })
            .collect();
        let lattice = lower_triangular_form(&reduced)?;
        Crystal::new(self.atomic_numbers.clone(), frac, lattice)
    }

    /// Apply `F' = mod1(F + 1·tᵀ)`.
    pub fn translated(&self, t: Frac) -> Crystal {
        let frac = self
            .frac_coords
            .iter()
            .map(|f| mod1_3([f[0] + t[0], f[1] + t[1], f[2] + t[2]]))
            .collect();
        Crystal {
            atomic_numbers: self.atomic_numbers.clone(),
            frac_coords: frac,
            lattice: self.lattice,
        }
    }

    pub fn to_record(&self) -> CrystalRecord {
        let l = &self.lattice;
        CrystalRecord {
            atomic_numbers: self.atomic_numbers.iter().map(|&z| z as u32).collect(),
            frac_coords: self.frac_coords.clone(),
            lattice: [
                [l[(0, 0)], l[(0, 1)], l[(0, 2)]],
                [l[(1, 0)], l[(1, 1)], l[(1, 2)]],
                [l[(2, 0)], l[(2, 1)], l[(2, 2)]],
            ],
        }
    }

    pub fn from_record(rec: &CrystalRecord) -> Result<Self> {
        let z = rec
            .atomic_numbers
            .iter()
            .map(|&z| {
                u8::try_from(z)
                    .map_err(|_| Error::InvalidInput(format!("atomic number {z} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        let l = rec.lattice;
        let lattice = Matrix3::new(
            l[0][0], l[0][1], l[0][2], l[1][0], l[1][1], l[1][2], l[2][0], l[2][1], l[2][2],
        );
        Crystal::new_wrapped(z, rec.frac_coords.clone(), lattice)
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&self.to_record()).expect("crystal record serializes")
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        let rec: CrystalRecord = serde_json::from_str(line)?;
        Self::from_record(&rec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn wrap_examples() {
        assert_relative_eq!(wrap(0.7), -0.3, epsilon = 1e-15);
        assert_eq!(wrap(0.5), -0.5);
        assert_eq!(wrap(-0.5), -0.5);
        assert_relative_eq!(wrap(1.3), 0.3, epsilon = 1e-15);
        assert_relative_eq!(wrap(-2.2), -0.2, epsilon = 1e-15);
        let w = wrap(0.49999999999999994);
        assert!((-0.5..0.5).contains(&w));
    }

    #[test]
    fn mod1_examples() {
        assert_relative_eq!(mod1(-0.2), 0.8, epsilon = 1e-15);
        assert_eq!(mod1(1.0), 0.0);
        assert_eq!(mod1(2.75), 0.75);
        assert_eq!(mod1(-1e-18), 0.0);
    }

    #[test]
    fn latent_examples() {
        assert_eq!(
            lattice_from_latent(&LatticeLatent::zeros()).unwrap(),
            Matrix3::identity()
        );
        let l2 = 2f64.ln();
        let l = lattice_from_latent(&LatticeLatent([l2, 0.0, l2, 0.0, 0.0, l2])).unwrap();
        assert_relative_eq!(l, Matrix3::from_diagonal_element(2.0), epsilon = 1e-14);
        assert_relative_eq!(l.determinant(), 8.0, epsilon = 1e-12);

        let l = lattice_from_latent(&LatticeLatent([0.0, 1.0, 0.0, 2.0, 3.0, 0.0])).unwrap();
        let expect = Matrix3::new(1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 2.0, 3.0, 1.0);
        assert_eq!(l, expect);
        // cofactor expansion along the first row
        let det = 1.0 * (1.0 * 1.0 - 0.0 * 3.0) - 0.0 + 0.0;
        assert_relative_eq!(l.determinant(), det, epsilon = 1e-14);

        assert!(lattice_from_latent(&LatticeLatent([f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0])).is_err());
    }

    #[test]
    fn latent_inverse_examples() {
        let y = latent_from_lattice(&Matrix3::from_diagonal(&Vector3::new(2.0, 3.0, 4.0))).unwrap();
        let expect = [2f64.ln(), 0.0, 3f64.ln(), 0.0, 0.0, 4f64.ln()];
        for (a, b) in y.0.iter().zip(expect) {
            assert_relative_eq!(*a, b, epsilon = 1e-14);
        }
        // identity rotated by 90° about z: rows are (0,1,0), (-1,0,0), (0,0,1)
        let rot = Matrix3::new(0.0, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let y = latent_from_lattice(&rot).unwrap();
        for v in y.0 {
            assert!(v.abs() < 1e-14);
        }
        assert!(latent_from_lattice(&Matrix3::zeros()).is_err());
        assert!(latent_from_lattice(&-Matrix3::<f64>::identity()).is_err());
    }

    #[test]
    fn metric_and_scale_examples() {
        assert_eq!(metric_tensor(&Matrix3::identity()), Matrix3::identity());
        let d = Matrix3::from_diagonal(&Vector3::new(2.0, 3.0, 4.0));
        assert_eq!(metric_tensor(&d), Matrix3::from_diagonal(&Vector3::new(4.0, 9.0, 16.0)));
        let sh = Matrix3::new(1.0, 0.0, 0.0, 0.5, 1.0, 0.0, 0.0, 0.0, 1.0);
        let expect = Matrix3::new(1.0, 0.5, 0.0, 0.5, 1.25, 0.0, 0.0, 0.0, 1.0);
        assert_relative_eq!(metric_tensor(&sh), expect, epsilon = 1e-15);

        assert_eq!(cell_scale_latent(&LatticeLatent::zeros()).unwrap(), 1.0);
        assert_relative_eq!(cell_scale(&d), 3.0, epsilon = 1e-15);
        let sh = Matrix3::new(1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert_relative_eq!(cell_scale(&sh), (2.0 + 2f64.sqrt()) / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn min_image_examples() {
        let r = min_image(&[0.9, 0.0, 0.0], &[0.0, 0.0, 0.0], &Matrix3::identity(), 1);
        assert_relative_eq!(r.delta_frac[0], -0.1, epsilon = 1e-15);
        assert_eq!(&r.delta_frac[1..], &[0.0, 0.0]);
        assert_relative_eq!(r.cart_dist, 0.1, epsilon = 1e-15);

        let f = [0.3, 0.2, 0.9];
        let r = min_image(&f, &f, &Matrix3::identity(), 1);
        assert_eq!(r.delta_frac, [0.0; 3]);
        assert_eq!(r.cart_dist, 0.0);
    }

    #[test]
    fn cartesian_examples() {
        let x = cartesian(&[[0.5, 0.5, 0.5]], &Matrix3::from_diagonal_element(2.0));
        assert_eq!(x, vec![[1.0, 1.0, 1.0]]);
        assert!(cartesian(&[], &Matrix3::identity()).is_empty());
        let sh = Matrix3::new(1.0, 0.2, 0.0, 0.5, 1.0, 0.0, 0.3, 0.1, 2.0);
        assert_eq!(cartesian(&[[1.0, 0.0, 0.0]], &sh), vec![[1.0, 0.2, 0.0]]);
    }

    #[test]
    fn shortest_self_image_cubic() {
        let l = Matrix3::from_diagonal_element(3.0);
        assert_relative_eq!(shortest_self_image(&l, 1), 3.0, epsilon = 1e-14);
    }

    #[test]
    fn reduce_basis_shortens_sheared_cell() {
        let l = Matrix3::new(1.0, 0.0, 0.0, 3.2, 1.0, 0.0, -4.1, 2.3, 1.5);
        let (r, m) = reduce_basis(&l);
        assert_relative_eq!(m * l, r, epsilon = 1e-10);
        assert_relative_eq!(m.determinant().abs(), 1.0, epsilon = 1e-10);
        assert_relative_eq!(r.determinant(), l.determinant(), epsilon = 1e-10);
        let g = metric_tensor(&r);
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!(g[(i, j)].abs() <= 0.5 * g[(i, i)].min(g[(j, j)]) + 1e-9);
                }
            }
        }
    }

    #[test]
    fn canonicalize_keeps_distances() {
        let l = Matrix3::new(2.0, 0.0, 0.0, 5.1, 2.5, 0.0, -3.0, 1.0, 3.0);
        let c = Crystal::new(vec![8, 26], vec![[0.1, 0.2, 0.3], [0.7, 0.45, 0.05]], l).unwrap();
        let cc = c.canonicalize().unwrap();
        let d0 = min_image(&c.frac_coords[0], &c.frac_coords[1], &c.lattice, 4).cart_dist;
        let d1 = min_image(&cc.frac_coords[0], &cc.frac_coords[1], &cc.lattice, 1).cart_dist;
        assert_relative_eq!(d0, d1, epsilon = 1e-10);
        assert_relative_eq!(cc.volume(), c.volume(), epsilon = 1e-10);
        for i in 0..3 {
            for j in (i + 1)..3 {
                assert_eq!(cc.lattice[(i, j)], 0.0);
            }
            assert!(cc.lattice[(i, i)] > 0.0);
        }
    }

    #[test]
    fn crystal_rejects_bad_input() {
        assert!(Crystal::new(vec![], vec![], Matrix3::identity()).is_err());
        assert!(Crystal::new(vec![1], vec![[1.0, 0.0, 0.0]], Matrix3::identity()).is_err());
        assert!(Crystal::new(vec![1], vec![[0.0; 3]], -Matrix3::<f64>::identity()).is_err());
        assert!(Crystal::new_wrapped(vec![1], vec![[1.25, -0.5, 0.0]], Matrix3::identity()).is_ok());
    }

    #[test]
    fn json_line_roundtrip() {
        let c = Crystal::new(vec![11, 17], vec![[0.0; 3], [0.5; 3]], Matrix3::from_diagonal_element(4.1)).unwrap();
        let line = c.to_json_line();
        assert_eq!(Crystal::from_json_line(&line).unwrap(), c);
    }
}
