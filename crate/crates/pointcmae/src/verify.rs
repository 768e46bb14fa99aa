//! Independent oracles for the numerical core: geometry kernels recomputed
//! from their definitions, mask analytics checked by enumeration and
//! simulation, and the full training objective differentiated by finite
//! differences in f64.
//!
//! Each oracle reimplements the quantity it checks from scratch rather
//! than calling into the code under test, so a shared bug cannot hide.

use crate::data::derive_seed;
use crate::error::Result;
use crate::geometry::{fps, knn};
use crate::losses::{chamfer_l2, pretrain_loss};
use crate::masking::{comask_mc, comask_probability, MaskModel};
use crate::model::{forward_pretrain, init_params, ModelConfig};
use crate::tensor::{ParamStore, Tape};
use crate::geometry::PointCloud;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt;

const CLOUD_TAG: u64 = 0x434c_4f55;
const MASK_TAG: u64 = 0x4d53_4b56;

/// Outcome of one oracle run.
#[derive(Debug, Clone)]
pub struct OracleReport {
    pub name: String,
    pub cases: usize,
    /// Largest deviation observed, in the oracle's own units (relative
    /// error, z-score, or mismatch fraction).
    pub max_deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub first_failure: Option<String>,
}

impl OracleReport {
    fn new(name: &str, tolerance: f64) -> Self {
        OracleReport {
            name: name.to_string(),
            cases: 0,
            max_deviation: 0.0,
            tolerance,
            passed: true,
            first_failure: None,
        }
    }

    fn record(&mut self, deviation: f64, context: impl FnOnce() -> String) {
        self.cases += 1;
        if deviation > self.max_deviation {
            self.max_deviation = deviation;
        }
        if deviation > self.tolerance && self.passed {
            self.passed = false;
            self.first_failure = Some(context());
        }
    }
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<22} {:>5} cases  max dev {:>11.3e} (tol {:>8.1e})  {}",
            self.name,
            self.cases,
            self.max_deviation,
            self.tolerance,
            if self.passed { "PASS" } else { "FAIL" }
        )?;
        if let Some(ctx) = &self.first_failure {
            write!(f, "\n    first failure: {ctx}")?;
        }
        Ok(())
    }
}

fn dist2(a: [f32; 3], b: [f32; 3]) -> f64 {
    let dx = a[0] as f64 - b[0] as f64;
    let dy = a[1] as f64 - b[1] as f64;
    let dz = a[2] as f64 - b[2] as f64;
    dx * dx + dy * dy + dz * dz
}

fn random_points(rng: &mut impl rand::Rng, count: usize) -> Vec<[f32; 3]> {
    (0..count)
        .map(|_| {
            [
                rng.random_range(-1.0f32..1.0),
                rng.random_range(-1.0f32..1.0),
                rng.random_range(-1.0f32..1.0),
            ]
        })
        .collect()
}

/// Farthest point sampling recomputed from the definition: at each step,
/// scan every unselected point, compute its distance to the selected set
/// in full, and take the maximum (lowest index on ties).
fn fps_reference(points: &[[f32; 3]], n: usize, start: usize) -> Vec<usize> {
    let mut selected = vec![start];
    while selected.len() < n {
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..points.len() {
            if selected.contains(&i) {
                continue;
            }
            let mut d = f64::INFINITY;
            for &s in &selected {
                let ds = dist2(points[i], points[s]);
                if ds < d {
                    d = ds;
                }
            }
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        selected.push(best);
    }
    selected
}

pub fn oracle_fps(seed: u64, clouds: usize) -> Result<OracleReport> {
    let mut report = OracleReport::new("fps", 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..clouds {
        let count = 10 + (case * 13) % 119;
        let points = random_points(&mut rng, count);
        let n = 3 + case % (count - 3).min(29);
        let start = case % points.len();
        let got = fps(&points, n, start)?;
        let want = fps_reference(&points, n, start);
        report.record(if got == want { 0.0 } else { 1.0 }, || {
            format!("cloud {case}: fps {got:?} vs reference {want:?}")
        });
    }
    Ok(report)
}

/// Nearest neighbours recomputed by repeated minimum extraction over the
/// full distance list, ordered by (distance, index).
fn knn_reference(points: &[[f32; 3]], center: usize, k: usize) -> Vec<usize> {
    let mut taken = vec![false; points.len()];
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best = usize::MAX;
        let mut best_d = f64::INFINITY;
        for i in 0..points.len() {
            if taken[i] {
                continue;
            }
            let d = dist2(points[i], points[center]);
            if d < best_d || (d == best_d && i < best) {
                best_d = d;
                best = i;
            }
        }
        taken[best] = true;
        out.push(best);
    }
    out
}

pub fn oracle_knn(seed: u64, clouds: usize) -> Result<OracleReport> {
    let mut report = OracleReport::new("knn", 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..clouds {
        let count = 12 + (case * 11) % 117;
        let points = random_points(&mut rng, count);
        let k = 2 + case % 9;
        let centers: Vec<usize> = vec![case % points.len(), (case * 7 + 3) % points.len()];
        let got = knn(&points, &centers, k)?;
        for (ci, &c) in centers.iter().enumerate() {
            let want = knn_reference(&points, c, k);
            let slice = &got[ci * k..(ci + 1) * k];
            report.record(if slice == want.as_slice() { 0.0 } else { 1.0 }, || {
                format!("cloud {case} center {c}: knn {slice:?} vs reference {want:?}")
            });
        }
    }
    Ok(report)
}

/// Chamfer distance recomputed with nested loops in f64: per patch, for
/// both directions, average the minimum squared distance over the patch's
/// own points, then average over patches.
fn chamfer_reference(pred: &[[f64; 3]], gt: &[[f64; 3]], m: usize, k: usize) -> f64 {
    let mut total = 0.0;
    for patch in 0..m {
        let a = &pred[patch * k..(patch + 1) * k];
        let b = &gt[patch * k..(patch + 1) * k];
        let dir = |from: &[[f64; 3]], to: &[[f64; 3]]| -> f64 {
            from.iter()
                .map(|p| {
                    to.iter()
                        .map(|q| {
                            (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)
                        })
                        .fold(f64::INFINITY, f64::min)
                })
                .sum::<f64>()
                / k as f64
        };
        total += dir(a, b) + dir(b, a);
    }
    total / m as f64
}

pub fn oracle_chamfer(seed: u64, cases: usize) -> Result<OracleReport> {
    let mut report = OracleReport::new("chamfer", 1e-9);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let m = 1 + case % 8;
        let k = 2 + case % 14;
        let pred: Vec<[f64; 3]> = (0..m * k)
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect();
        let gt: Vec<[f64; 3]> = (0..m * k)
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect();
        let want = chamfer_reference(&pred, &gt, m, k);

        let mut tape: Tape<f64> = Tape::new();
        let p = tape.leaf(pred.iter().flatten().copied().collect(), m * k, 3)?;
        let g = tape.leaf(gt.iter().flatten().copied().collect(), m * k, 3)?;
        let loss = chamfer_l2(&mut tape, p, g, m, k)?;
        let got = tape.scalar(loss)?;
        let rel = (got - want).abs() / want.abs().max(1e-12);
        report.record(rel, || {
            format!("case {case} (m {m}, k {k}): tape {got} vs reference {want}")
        });
    }
    Ok(report)
}

pub(crate) fn binomial(n: u64, k: u64) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut num: u128 = 1;
    let mut den: u128 = 1;
    for i in 0..k as u128 {
        num *= n as u128 - i;
        den *= i + 1;
        let g = gcd(num, den);
        num /= g;
        den /= g;
    }
    (num / den) as f64
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Exhaustive check of fixed-count co-mask statistics at small sizes:
/// enumerate every pair of masks of cardinality m out of n and compare the
/// exact mean overlap against m^2/n and the exact miss probability against
/// C(n-m, m) / C(n, m).
pub fn oracle_mask_enumeration() -> Result<OracleReport> {
    let mut report = OracleReport::new("mask enumeration", 1e-12);
    for (n, m) in [(6usize, 2usize), (7, 3), (8, 5)] {
        let masks: Vec<u32> = (0u32..1 << n)
            .filter(|b| b.count_ones() as usize == m)
            .collect();
        let mut overlap_sum = 0u64;
        let mut misses = 0u64;
        for &a in &masks {
            for &b in &masks {
                let overlap = (a & b).count_ones() as u64;
                overlap_sum += overlap;
                if overlap == 0 {
                    misses += 1;
                }
            }
        }
        let pairs = (masks.len() * masks.len()) as f64;
        let mean = overlap_sum as f64 / pairs;
        let want_mean = (m * m) as f64 / n as f64;
        report.record((mean - want_mean).abs(), || {
            format!("n {n} m {m}: enumerated mean {mean} vs m^2/n {want_mean}")
        });
        let miss = misses as f64 / pairs;
        let want_miss = binomial((n - m) as u64, m as u64) / binomial(n as u64, m as u64);
        report.record((miss - want_miss).abs(), || {
            format!("n {n} m {m}: enumerated miss {miss} vs closed form {want_miss}")
        });
    }
    Ok(report)
}

/// Monte-Carlo fidelity of the co-mask analytics: the independent-flip
/// closed form against a Bernoulli simulation, and the fixed-count
/// sampler's overlap statistics against hypergeometric truth. Deviations
/// are z-scores; the tolerance is the z window.
pub fn oracle_mask_closed_form(trials: usize, z_tol: f64, seed: u64) -> Result<OracleReport> {
    let mut report = OracleReport::new("mask closed form", z_tol);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (n, ratio) in [(16usize, 0.3f64), (32, 0.45), (64, 0.6)] {
        let m = (ratio * n as f64).floor() as u64;
        let floor = 2.0 / trials as f64;

        let bern = comask_mc(n, ratio, trials, MaskModel::Bernoulli, &mut rng)?;
        let p = comask_probability(n, ratio)?;
        let z = (bern.overlap_rate - p).abs() / (bern.overlap_stderr + floor);
        report.record(z, || {
            format!(
                "n {n} r {ratio}: Bernoulli overlap {} vs closed form {p} (z {z:.2})",
                bern.overlap_rate
            )
        });
        let mean_bern = n as f64 * ratio * ratio;
        let zm = (bern.mean_comask - mean_bern).abs() / (bern.comask_stderr + floor);
        report.record(zm, || {
            format!(
                "n {n} r {ratio}: Bernoulli mean {} vs n r^2 {mean_bern} (z {zm:.2})",
                bern.mean_comask
            )
        });

        let fixed = comask_mc(n, ratio, trials, MaskModel::FixedCount, &mut rng)?;
        let want_mean = (m * m) as f64 / n as f64;
        let zf = (fixed.mean_comask - want_mean).abs() / (fixed.comask_stderr + floor);
        report.record(zf, || {
            format!(
                "n {n} r {ratio}: fixed-count mean {} vs m^2/n {want_mean} (z {zf:.2})",
                fixed.mean_comask
            )
        });
        let want_overlap = 1.0 - binomial(n as u64 - m, m) / binomial(n as u64, m);
        let zo = (fixed.overlap_rate - want_overlap).abs() / (fixed.overlap_stderr + floor);
        report.record(zo, || {
            format!(
                "n {n} r {ratio}: fixed-count overlap {} vs hypergeometric {want_overlap} (z {zo:.2})",
                fixed.overlap_rate
            )
        });
        if 2 * m as usize > n {
            report.record(if fixed.overlap_rate == 1.0 { 0.0 } else { z_tol + 1.0 }, || {
                format!(
                    "n {n} r {ratio}: 2m > n forces overlap, got rate {}",
                    fixed.overlap_rate
                )
            });
        }
    }
    Ok(report)
}

/// Objective variants the gradient oracle sweeps: every architecture
/// toggle plus both interesting contrastive weights.
pub fn gradient_check_variants() -> Vec<(String, ModelConfig)> {
    let base = ModelConfig::micro();
    let mut variants = Vec::new();
    variants.push(("dual mask + contrastive, lambda 1".to_string(), base.clone()));
    let mut v = base.clone();
    v.lambda = 0.0;
    variants.push(("lambda 0".to_string(), v));
    let mut v = base.clone();
    v.share_decoder = true;
    variants.push(("shared decoder".to_string(), v));
    let mut v = base.clone();
    v.share_encoder = false;
    variants.push(("separate encoders".to_string(), v));
    let mut v = base.clone();
    v.contrastive = false;
    variants.push(("reconstruction only".to_string(), v));
    let mut v = base.clone();
    v.dual_mask = false;
    v.contrastive = false;
    v.share_decoder = false;
    v.share_encoder = true;
    variants.push(("single mask".to_string(), v));
    variants
}

/// Central finite differences in f64 against the analytic gradients of
/// the complete pre-training objective, across all toggle variants.
/// `probes` scalar positions are sampled evenly across each variant's
/// parameter vector. Deviations are relative errors.
pub fn oracle_gradients(probes: usize, seed: u64) -> Result<OracleReport> {
    let mut report = OracleReport::new("gradients", 1e-4);
    let h = 1e-6;
    for (label, cfg) in gradient_check_variants() {
        let mut cloud_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[CLOUD_TAG]));
        let cloud = PointCloud::new(random_points(&mut cloud_rng, 48))?;
        let mask_seed = derive_seed(seed, &[MASK_TAG]);
        let mut store: ParamStore<f64> = init_params(&cfg, seed)?;

        let eval_loss = |store: &ParamStore<f64>| -> Result<f64> {
            let mut tape: Tape<f64> = Tape::new();
            let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
            let out = forward_pretrain(&mut tape, store, &cfg, &cloud, &mut mask_rng)?;
            let loss = pretrain_loss(&mut tape, &cfg, &out)?;
            Ok(loss.total_value)
        };

        // Analytic pass.
        {
            let mut tape: Tape<f64> = Tape::new();
            let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
            let out = forward_pretrain(&mut tape, &store, &cfg, &cloud, &mut mask_rng)?;
            let loss = pretrain_loss(&mut tape, &cfg, &out)?;
            tape.backward(loss.total)?;
            tape.apply_param_grads(&mut store)?;
        }
        let analytic: Vec<Vec<f64>> = store.iter().map(|p| p.grad.clone()).collect();
        store.zero_grads();

        let total_scalars = store.scalar_count();
        let stride = (total_scalars / probes).max(1);
        let mut flat = 0usize;
        let mut next = 0usize;
        for pi in 0..store.len() {
            let len = store.get(pi)?.value.len();
            for j in 0..len {
                if flat == next {
                    next += stride;
                    let original = store.get(pi)?.value[j];
                    store.get_mut(pi)?.value[j] = original + h;
                    let up = eval_loss(&store)?;
                    store.get_mut(pi)?.value[j] = original - h;
                    let down = eval_loss(&store)?;
                    store.get_mut(pi)?.value[j] = original;
                    let fd = (up - down) / (2.0 * h);
                    let an = analytic[pi][j];
                    // The difference quotient carries roughly 1e-10 of
                    // absolute noise at this h (loss roundoff divided by
                    // 2h; it does not shrink with h). The 1e-5 floor in
                    // the denominator turns the check into an absolute
                    // one at 1e-9 for near-zero components, safely above
                    // that noise, while anything larger is held to the
                    // true relative tolerance.
                    let rel = (an - fd).abs() / fd.abs().max(an.abs()).max(1e-5);
                    let name = store.get(pi)?.name.clone();
                    report.record(rel, || {
                        format!(
                            "{label}: {name}[{j}] analytic {an:.9e} vs fd {fd:.9e} (rel {rel:.3e})"
                        )
                    });
                }
                flat += 1;
            }
        }
    }
    Ok(report)
}

/// Run every oracle with shared budgets. `trials` drives the Monte-Carlo
/// checks, `probes` the per-variant finite-difference count.
pub fn run_all(trials: usize, probes: usize, seed: u64) -> Result<Vec<OracleReport>> {
    Ok(vec![
        oracle_fps(seed, 16)?,
        oracle_knn(seed.wrapping_add(1), 16)?,
        oracle_chamfer(seed.wrapping_add(2), 20)?,
        oracle_mask_enumeration()?,
        oracle_mask_closed_form(trials, 3.0, seed.wrapping_add(3))?,
        oracle_gradients(probes, seed.wrapping_add(4))?,
    ])
}
