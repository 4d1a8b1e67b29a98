//! Validity gates, fingerprint matching, uniqueness/novelty, distribution distances and CSP metrics.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::crystal::{lattice_parameters, metric_tensor, min_image_delta, quad_form, shortest_self_image, wrap, Crystal, Frac};
use crate::elements::{atomic_mass, common_oxidation_states, facts};
use crate::error::{Error, Result};

pub const MIN_VOLUME: f64 = 0.1;
pub const MIN_DISTANCE: f64 = 0.5;
/// Grams per mole-of-amu over Å³, i.e. g/cm³ per amu/Å³.
const AMU_PER_A3_TO_G_CM3: f64 = 1.660_539_066_60;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchTolerances {
    pub stol: f64,
    pub ltol: f64,
    /// Degrees.
    pub angle_tol: f64,
}

impl Default for MatchTolerances {
    fn default() -> Self {
        Self { stol: 0.5, ltol: 0.3, angle_tol: 10.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Invalid {
    NonFinite,
    Lattice,
    Volume,
    MinDist,
}

impl Invalid {
    pub fn reason(self) -> &'static str {
        match self {
            Invalid::NonFinite => "non_finite",
            Invalid::Lattice => "lattice",
            Invalid::Volume => "volume",
            Invalid::MinDist => "min_dist",
        }
    }
}

/// Smallest interatomic or self-image distance, in Å. Uses the reduced cell with offsets in
/// `{-1,0,1}³`, falling back to a wider search if the cell cannot be reduced.
pub fn min_distance(c: &Crystal) -> f64 {
    let (c, radius) = match c.canonicalize() {
        Ok(r) => (r, 1),
        Err(_) => (c.clone(), 3),
    };
    let g = metric_tensor(&c.lattice);
    let mut best = shortest_self_image(&c.lattice, radius);
    for i in 0..c.num_atoms() {
        for j in 0..i {
            let (a, b) = (c.frac_coords[i], c.frac_coords[j]);
            let d = min_image_delta(&[a[0] - b[0], a[1] - b[1], a[2] - b[2]], &g, radius);
            best = best.min(quad_form(&d, &g).max(0.0).sqrt());
        }
    }
    best
}

pub fn structural_validity(c: &Crystal) -> std::result::Result<(), Invalid> {
    if c.lattice.iter().chain(c.frac_coords.iter().flatten()).any(|v| !v.is_finite()) {
        return Err(Invalid::NonFinite);
    }
    let (len, _) = lattice_parameters(&c.lattice);
    if len.iter().any(|&l| !(l > 0.0)) {
        return Err(Invalid::Lattice);
    }
    if !(c.lattice.determinant().abs() >= MIN_VOLUME) {
        return Err(Invalid::Volume);
    }
    if min_distance(c) < MIN_DISTANCE {
        return Err(Invalid::MinDist);
    }
    Ok(())
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Element counts divided by their common divisor, sorted by atomic number.
pub fn reduced_composition(zs: &[u8]) -> Vec<(u8, usize)> {
    let mut counts: BTreeMap<u8, usize> = BTreeMap::new();
    for &z in zs {
        *counts.entry(z).or_default() += 1;
    }
    let g = counts.values().fold(0, |a, &b| gcd(a, b)).max(1);
    counts.into_iter().map(|(z, n)| (z, n / g)).collect()
}

/// Charge neutrality with common oxidation states; unaries and all-metal alloys pass.
pub fn composition_validity(zs: &[u8]) -> bool {
    let comp = reduced_composition(zs);
    if comp.len() == 1 {
        return true;
    }
    if comp.iter().all(|&(z, _)| facts(z).map(|f| f.metal).unwrap_or(false)) {
        return true;
    }
    let states: Vec<&[i32]> = comp.iter().map(|&(z, _)| common_oxidation_states(z)).collect();
    if states.iter().any(|s| s.is_empty()) {
        return false;
    }
    fn search(i: usize, charge: i64, comp: &[(u8, usize)], states: &[&[i32]]) -> bool {
        if i == comp.len() {
            return charge == 0;
        }
        states[i].iter().any(|&s| search(i + 1, charge + s as i64 * comp[i].1 as i64, comp, states))
    }
    search(0, 0, &comp, &states)
}

/// Scale-normalized structural summary used by the matcher.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fingerprint {
    pub composition: Vec<(u8, usize)>,
    pub num_atoms: usize,
    pub volume: f64,
    /// Sorted lattice lengths.
    pub lengths: [f64; 3],
    /// Sorted angles folded into `[0, 90]`.
    pub angles: [f64; 3],
    /// Sorted pairwise minimum-image distances over `V^{1/3}`.
    pub distances: Vec<f64>,
}

fn sorted3(mut v: [f64; 3]) -> [f64; 3] {
    v.sort_by(f64::total_cmp);
    v
}

pub fn fingerprint(c: &Crystal) -> Fingerprint {
    let canon = c.canonicalize().unwrap_or_else(|_| c.clone());
    let (len, ang) = lattice_parameters(&canon.lattice);
    let volume = canon.lattice.determinant().abs();
    let g = metric_tensor(&canon.lattice);
    let scale = volume.cbrt();
    let n = canon.num_atoms();
    let mut distances = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in 0..i {
            let (a, b) = (canon.frac_coords[i], canon.frac_coords[j]);
            let d = min_image_delta(&[a[0] - b[0], a[1] - b[1], a[2] - b[2]], &g, 1);
            distances.push(quad_form(&d, &g).max(0.0).sqrt() / scale);
        }
    }
    distances.sort_by(f64::total_cmp);
    Fingerprint {
        composition: reduced_composition(&c.atomic_numbers),
        num_atoms: n,
        volume,
        lengths: sorted3(len),
        angles: sorted3(ang.map(|a| a.min(180.0 - a))),
        distances,
    }
}

pub fn fingerprints_match(a: &Fingerprint, b: &Fingerprint, tol: &MatchTolerances) -> bool {
    if a.composition != b.composition || a.num_atoms != b.num_atoms {
        return false;
    }
    for k in 0..3 {
        let (lo, hi) = (a.lengths[k].min(b.lengths[k]), a.lengths[k].max(b.lengths[k]));
        if !(hi / lo - 1.0 <= tol.ltol) {
            return false;
        }
        if !((a.angles[k] - b.angles[k]).abs() <= tol.angle_tol) {
            return false;
        }
    }
    let dtol = tol.stol * (a.num_atoms as f64).powf(-1.0 / 3.0);
    a.distances.iter().zip(&b.distances).all(|(x, y)| (x - y).abs() <= dtol)
}

pub fn structures_match(a: &Crystal, b: &Crystal, tol: &MatchTolerances) -> bool {
    fingerprints_match(&fingerprint(a), &fingerprint(b), tol)
}

fn dedup(fps: &[&Fingerprint], tol: &MatchTolerances) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for (i, fp) in fps.iter().enumerate() {
        if !kept.iter().any(|&k| fingerprints_match(fps[k], fp, tol)) {
            kept.push(i);
        }
    }
    kept
}

/// Greedy first-occurrence deduplication. Returns the rate and the kept indices.
pub fn uniqueness(crystals: &[Crystal], tol: &MatchTolerances) -> (f64, Vec<usize>) {
    let fps: Vec<Fingerprint> = crystals.iter().map(fingerprint).collect();
    uniqueness_fp(&fps, tol)
}

pub fn uniqueness_fp(fps: &[Fingerprint], tol: &MatchTolerances) -> (f64, Vec<usize>) {
    if fps.is_empty() {
        return (0.0, Vec::new());
    }
    let refs: Vec<&Fingerprint> = fps.iter().collect();
    let kept = dedup(&refs, tol);
    (kept.len() as f64 / fps.len() as f64, kept)
}

/// Novel, unique-and-novel rates and the indices of the UN representatives. Candidates that
/// match no reference are deduplicated among themselves; both rates are over all candidates.
pub fn un_rate(crystals: &[Crystal], reference: &[Crystal], tol: &MatchTolerances) -> (f64, f64, Vec<usize>) {
    let fps: Vec<Fingerprint> = crystals.iter().map(fingerprint).collect();
    let refs: Vec<Fingerprint> = reference.iter().map(fingerprint).collect();
    un_rate_fp(&fps, &refs, tol)
}

pub fn un_rate_fp(fps: &[Fingerprint], refs: &[Fingerprint], tol: &MatchTolerances) -> (f64, f64, Vec<usize>) {
    if fps.is_empty() {
        return (0.0, 0.0, Vec::new());
    }
    let novel: Vec<usize> = (0..fps.len()).filter(|&i| !refs.iter().any(|r| fingerprints_match(r, &fps[i], tol))).collect();
    let sub: Vec<&Fingerprint> = novel.iter().map(|&i| &fps[i]).collect();
    let kept: Vec<usize> = dedup(&sub, tol).into_iter().map(|k| novel[k]).collect();
    let n = fps.len() as f64;
    (novel.len() as f64 / n, kept.len() as f64 / n, kept)
}

/// One-dimensional Wasserstein-1 distance `∫|F_a − F_b|` between empirical distributions.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidInput("wasserstein1 needs nonempty samples".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("wasserstein1 input".into()));
    }
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let mut all: Vec<f64> = xs.iter().chain(&ys).copied().collect();
    all.sort_by(f64::total_cmp);
    let (na, nb) = (xs.len() as f64, ys.len() as f64);
    let (mut i, mut j, mut total) = (0, 0, 0.0);
    for w in all.windows(2) {
        while i < xs.len() && xs[i] <= w[0] {
            i += 1;
        }
        while j < ys.len() && ys[j] <= w[0] {
            j += 1;
        }
        total += (i as f64 / na - j as f64 / nb).abs() * (w[1] - w[0]);
    }
    Ok(total)
}

/// Mass density in g/cm³.
pub fn density(c: &Crystal) -> Result<f64> {
    let mass: f64 = c.atomic_numbers.iter().map(|&z| atomic_mass(z)).sum::<Result<f64>>()?;
    Ok(mass * AMU_PER_A3_TO_G_CM3 / c.volume())
}

/// Number of distinct elements.
pub fn n_ary(c: &Crystal) -> usize {
    reduced_composition(&c.atomic_numbers).len()
}

/// `(W₁ of density, W₁ of element count)` between two sets.
pub fn distribution_metrics(generated: &[Crystal], reference: &[Crystal]) -> Result<(f64, f64)> {
    let rho = |s: &[Crystal]| s.iter().map(density).collect::<Result<Vec<f64>>>();
    let nary = |s: &[Crystal]| s.iter().map(|c| n_ary(c) as f64).collect::<Vec<f64>>();
    Ok((wasserstein1(&rho(generated)?, &rho(reference)?)?, wasserstein1(&nary(generated), &nary(reference))?))
}

/// Minimum-cost perfect matching on a square cost matrix (Hungarian method with potentials).
/// Returns the column assigned to each row.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    // p[j]: row matched to column j, 1-based with 0 as the virtual root
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=n {
        out[p[j] - 1] = j - 1;
    }
    out
}

fn assignment_sq(pred: &Crystal, gt: &Crystal, shift: Frac, g: &nalgebra::Matrix3<f64>) -> (f64, Vec<usize>) {
    let n = gt.num_atoms();
    let mut perm = vec![0; n];
    let mut total = 0.0;
    let mut elements: Vec<u8> = gt.atomic_numbers.clone();
    elements.sort_unstable();
    elements.dedup();
    for z in elements {
        let pi: Vec<usize> = (0..n).filter(|&i| pred.atomic_numbers[i] == z).collect();
        let gi: Vec<usize> = (0..n).filter(|&i| gt.atomic_numbers[i] == z).collect();
        let cost: Vec<Vec<f64>> = pi
            .iter()
            .map(|&p| {
                gi.iter()
                    .map(|&q| {
                        let (a, b) = (pred.frac_coords[p], gt.frac_coords[q]);
                        let d = min_image_delta(&[a[0] + shift[0] - b[0], a[1] + shift[1] - b[1], a[2] + shift[2] - b[2]], g, 1);
                        quad_form(&d, g).max(0.0)
                    })
                    .collect()
            })
            .collect();
        for (r, c) in min_cost_assignment(&cost).into_iter().enumerate() {
            total += cost[r][c];
            perm[pi[r]] = gi[c];
        }
    }
    (total, perm)
}

/// RMS Cartesian displacement (Å) after the best global translation and a per-element optimal
/// assignment, measured in the ground-truth cell. Both crystals must share a composition.
pub fn site_rmsd(pred: &Crystal, gt: &Crystal) -> Result<f64> {
    let mut za = pred.atomic_numbers.clone();
    let mut zb = gt.atomic_numbers.clone();
    za.sort_unstable();
    zb.sort_unstable();
    if za != zb {
        return Err(Error::InvalidInput("rmsd needs identical compositions".into()));
    }
    let pred = pred.canonicalize()?;
    let gt = gt.canonicalize()?;
    let g = metric_tensor(&gt.lattice);
    let n = gt.num_atoms();
    let rarest = *zb
        .iter()
        .min_by_key(|&&z| (zb.iter().filter(|&&x| x == z).count(), z))
        .expect("nonempty");
    let anchor = pred.atomic_numbers.iter().position(|&z| z == rarest).expect("present");
    let mut best = f64::INFINITY;
    for q in (0..n).filter(|&q| gt.atomic_numbers[q] == rarest) {
        let (a, b) = (pred.frac_coords[anchor], gt.frac_coords[q]);
        let mut shift = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let (mut sq, perm) = assignment_sq(&pred, &gt, shift, &g);
        // refine the shift to the mean residual under that assignment
        let mut mean = [0.0; 3];
        for (i, &j) in perm.iter().enumerate() {
            let (a, b) = (pred.frac_coords[i], gt.frac_coords[j]);
            let d = min_image_delta(&[a[0] + shift[0] - b[0], a[1] + shift[1] - b[1], a[2] + shift[2] - b[2]], &g, 1);
            for k in 0..3 {
                mean[k] += d[k] / n as f64;
            }
        }
        for k in 0..3 {
            shift[k] = wrap(shift[k] - mean[k]);
        }
        sq = sq.min(assignment_sq(&pred, &gt, shift, &g).0);
        best = best.min(sq);
    }
    Ok((best / n as f64).sqrt())
}

/// Match rate and mean RMSD over matched pairs (`None` when nothing matched).
pub fn csp_metrics(predictions: &[Crystal], truths: &[Crystal], tol: &MatchTolerances) -> Result<(f64, Option<f64>)> {
    if predictions.len() != truths.len() {
        return Err(Error::InvalidInput(format!("{} predictions for {} ground truths", predictions.len(), truths.len())));
    }
    if predictions.is_empty() {
        return Ok((0.0, None));
    }
    let mut rmsds = Vec::new();
    for (p, t) in predictions.iter().zip(truths) {
        if structures_match(p, t, tol) {
            rmsds.push(site_rmsd(p, t)?);
        }
    }
    let mr = rmsds.len() as f64 / predictions.len() as f64;
    let mean = (!rmsds.is_empty()).then(|| rmsds.iter().sum::<f64>() / rmsds.len() as f64);
    Ok((mr, mean))
}

/// `(SUN, MSUN) = (UN·stable, UN·metastable)`.
pub fn sun_compose(un: f64, stable_frac: f64, meta_frac: f64) -> Result<(f64, f64)> {
    for v in [un, stable_frac, meta_frac] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidInput(format!("fraction {v} outside [0,1]")));
        }
    }
    Ok((un * stable_frac, un * meta_frac))
}

pub const STABLE_EHULL: f64 = 0.0;
pub const METASTABLE_EHULL: f64 = 0.1;

/// Read `id,e_above_hull` rows (header optional); `id` is the 0-based index of the generated crystal.
pub fn read_stability(path: &Path) -> Result<HashMap<usize, f64>> {
    let mut out = HashMap::new();
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).comment(Some(b'#')).from_path(path).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse { line: line + 1, msg: e.to_string() })?;
        let id = rec.get(0).unwrap_or("").trim();
        let e = rec.get(1).unwrap_or("").trim();
        match (id.parse::<usize>(), e.parse::<f64>()) {
            (Ok(i), Ok(v)) => {
                out.insert(i, v);
            }
            _ if line == 0 => {}
            _ => return Err(Error::Parse { line: line + 1, msg: format!("expected id,e_above_hull, got {id:?},{e:?}") }),
        }
    }
    Ok(out)
}

/// Fractions of `ids` at or below the stable and metastable energy thresholds; missing ids count as unstable.
pub fn stability_fractions(ids: &[usize], ehull: &HashMap<usize, f64>) -> (f64, f64) {
    if ids.is_empty() {
        return (0.0, 0.0);
    }
    let count = |t: f64| ids.iter().filter(|i| ehull.get(i).is_some_and(|&e| e <= t)).count() as f64;
    let n = ids.len() as f64;
    (count(STABLE_EHULL) / n, count(METASTABLE_EHULL) / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Budget {
    Intensive,
    Extensive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub kind: Budget,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_generated: usize,
    pub n_valid: usize,
    pub n_novel_candidates: usize,
    pub struct_val: f64,
    pub comp_val: f64,
    pub unique: f64,
    pub novel: f64,
    pub un: f64,
    pub sun: Option<f64>,
    pub msun: Option<f64>,
    pub wdist_rho: Option<f64>,
    pub wdist_nary: Option<f64>,
    pub budget: BTreeMap<String, Annotation>,
    pub warnings: Vec<String>,
}

pub fn evaluate(generated: &[Crystal], reference: &[Crystal], ehull: Option<&HashMap<usize, f64>>, tol: &MatchTolerances) -> Result<MetricsReport> {
    let n = generated.len();
    let mut warnings = Vec::new();
    if n == 0 {
        warnings.push("no generated structures; rates reported as 0".to_string());
    }
    let valid: Vec<Crystal> = generated.iter().filter(|c| structural_validity(c).is_ok()).cloned().collect();
    let comp_ok = generated.iter().filter(|c| composition_validity(&c.atomic_numbers)).count();
    let rate = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    let fps: Vec<Fingerprint> = generated.iter().map(fingerprint).collect();
    let refs: Vec<Fingerprint> = reference.iter().map(fingerprint).collect();
    let (unique, _) = uniqueness_fp(&fps, tol);
    let (novel, un, un_ids) = un_rate_fp(&fps, &refs, tol);
    let (sun, msun) = match ehull {
        Some(e) => {
            let (s, m) = stability_fractions(&un_ids, e);
            let (a, b) = sun_compose(un, s, m)?;
            (Some(a), Some(b))
        }
        None => (None, None),
    };
    let (wdist_rho, wdist_nary) = if valid.is_empty() || reference.is_empty() {
        warnings.push("distribution distances need valid structures and a reference set".to_string());
        (None, None)
    } else {
        let (a, b) = distribution_metrics(&valid, reference)?;
        (Some(a), Some(b))
    };
    let mut budget = BTreeMap::new();
    for k in ["struct_val", "comp_val", "wdist_rho", "wdist_nary"] {
        budget.insert(k.to_string(), Annotation { kind: Budget::Intensive, n });
    }
    for k in ["unique", "novel", "un", "sun", "msun"] {
        budget.insert(k.to_string(), Annotation { kind: Budget::Extensive, n });
    }
    Ok(MetricsReport {
        n_generated: n,
        n_valid: valid.len(),
        n_novel_candidates: n,
        struct_val: rate(valid.len()),
        comp_val: rate(comp_ok),
        unique,
        novel,
        un,
        sun,
        msun,
        wdist_rho,
        wdist_nary,
        budget,
        warnings,
    })
}
