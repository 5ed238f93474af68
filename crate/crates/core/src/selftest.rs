//! Built-in gradient and invariant suites, run by `relcon selftest`.

use rand::Rng as _;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{finite_difference_check, Tape, Var};
use crate::data::Labels;
use crate::error::Result;
use crate::losses::{
    consistency_mse, feature_consistency_loss, gram_matrix, relation_matrix, src_loss,
    src_loss_value, weighted_cross_entropy, RELATION_EPS,
};
use crate::metrics::roc_auc;
use crate::model::Params;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::trainer::{ema_update, lambda_rampup};

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

fn normal(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| StandardNormal.sample(rng)).collect())
}

fn probs(rng: &mut Rng, b: usize, k: usize) -> Tensor {
    crate::autodiff::softmax_rows(&normal(rng, &[b, k]))
}

type Builder = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

/// One random loss instance: a closure over the student side and its input.
fn instance(which: usize, rng: &mut Rng) -> (Builder, Tensor) {
    let b = rng.random_range(2..=8);
    let d = rng.random_range(1..=6);
    let k = rng.random_range(2..=5);
    match which {
        0 => {
            let labels = Labels::Single((0..b).map(|_| rng.random_range(0..k)).collect());
            let w = Tensor::from_vec(&[k], (0..k).map(|_| rng.random_range(0.5..2.0)).collect());
            let f: Builder = Box::new(move |t, x| weighted_cross_entropy(t, x, &labels, &w));
            (f, normal(rng, &[b, k]))
        }
        1 => {
            let hot = (0..b * k).map(|_| u8::from(rng.random_bool(0.4))).collect();
            let labels = Labels::Multi { classes: k, hot };
            let w = Tensor::from_vec(&[k], (0..k).map(|_| rng.random_range(0.5..2.0)).collect());
            let f: Builder = Box::new(move |t, x| weighted_cross_entropy(t, x, &labels, &w));
            (f, normal(rng, &[b, k]))
        }
        2 => {
            let target = probs(rng, b, k);
            let f: Builder = Box::new(move |t, x| {
                let p = t.softmax(x)?;
                let pt = t.constant(target.clone());
                consistency_mse(t, p, pt)
            });
            (f, normal(rng, &[b, k]))
        }
        3 => {
            // with one feature column R only depends on signs, so the gradient is identically zero
            let d = d.max(2);
            let teacher = normal(rng, &[b, d]);
            let f: Builder = Box::new(move |t, x| {
                let at = t.constant(teacher.clone());
                src_loss(t, x, at)
            });
            (f, normal(rng, &[b, d]))
        }
        _ => {
            let teacher = normal(rng, &[b, d]);
            let f: Builder = Box::new(move |t, x| {
                let at = t.constant(teacher.clone());
                feature_consistency_loss(t, x, at)
            });
            (f, normal(rng, &[b, d]))
        }
    }
}

const GRAD_CASES: [&str; 5] = [
    "grad: weighted cross-entropy (single-label)",
    "grad: weighted cross-entropy (multi-label)",
    "grad: consistency mse through softmax",
    "grad: relation consistency through gram and row norm",
    "grad: feature consistency",
];

pub fn gradient_suite(seed: u64, instances: usize) -> Vec<Check> {
    let mut out = Vec::new();
    for (which, name) in GRAD_CASES.iter().enumerate() {
        let mut rng = Rng::seed_from_u64(seed ^ ((which as u64) << 32));
        let mut worst: f64 = 0.0;
        let mut failure = None;
        for _ in 0..instances {
            let (f, x) = instance(which, &mut rng);
            match finite_difference_check(f, &x, GRAD_EPS) {
                Ok(e) => worst = worst.max(e),
                Err(e) => failure = Some(e.to_string()),
            }
        }
        let passed = failure.is_none() && worst <= GRAD_TOL;
        let detail = failure.unwrap_or_else(|| format!("max relative error {worst:.3e} over {instances} instances"));
        out.push(check(name, passed, detail));
    }
    out
}

fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b)
}

/// Symmetry, unit rows, scale invariance and permutation equivariance.
pub fn relation_suite(seed: u64, batches: usize) -> Vec<Check> {
    let mut rng = Rng::seed_from_u64(seed);
    let (mut sym, mut unit, mut scale, mut perm) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..batches {
        let b = rng.random_range(2..=16);
        let d = rng.random_range(1..=32);
        let a = normal(&mut rng, &[b, d]);
        let g = gram_matrix(&a).expect("batch of two or more").0;
        sym = sym.max(max_abs(&g, &g.transpose().expect("rank 2")));
        let r = relation_matrix(&a, RELATION_EPS).expect("valid batch").0;
        for i in 0..b {
            let n: f64 = r.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            unit = unit.max((n - 1.0).abs());
        }
        for c in [0.5, 3.7, 100.0] {
            let rc = relation_matrix(&a.map(|v| c * v), RELATION_EPS).expect("valid batch").0;
            scale = scale.max(max_abs(&r, &rc));
        }
        let mut p: Vec<usize> = (0..b).collect();
        rand::seq::SliceRandom::shuffle(p.as_mut_slice(), &mut rng);
        let rp = relation_matrix(&a.select_rows(&p).expect("permutation"), RELATION_EPS)
            .expect("valid batch")
            .0;
        for i in 0..b {
            for j in 0..b {
                perm = perm.max((rp.at2(i, j) - r.at2(p[i], p[j])).abs());
            }
        }
    }
    vec![
        check("relation: gram symmetry", sym <= 1e-12, format!("max |G - G^T| = {sym:.3e}")),
        check("relation: unit row norms", unit <= 1e-9, format!("max |‖R_i‖ - 1| = {unit:.3e}")),
        check("relation: scale invariance", scale <= 1e-9, format!("max |R(cA) - R(A)| = {scale:.3e}")),
        check("relation: permutation equivariance", perm <= 1e-12, format!("max deviation {perm:.3e}")),
    ]
}

/// Matrix-form relation loss against a pairwise double loop.
pub fn src_oracle_suite(seed: u64, instances: usize) -> Check {
    let mut rng = Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let b = rng.random_range(2..=16);
        let d = rng.random_range(1..=32);
        let (s, t) = (normal(&mut rng, &[b, d]), normal(&mut rng, &[b, d]));
        let fast = src_loss_value(&s, &t).expect("valid batch");
        let slow = pairwise_src(&s, &t);
        worst = worst.max((fast - slow).abs() / slow.abs().max(1e-300));
    }
    check(
        "relation loss: pairwise oracle",
        worst <= 1e-10,
        format!("max relative error {worst:.3e} over {instances} instances"),
    )
}

fn pairwise_src(s: &Tensor, t: &Tensor) -> f64 {
    let b = s.rows();
    let dot = |a: &Tensor, i: usize, j: usize| -> f64 { a.row(i).iter().zip(a.row(j)).map(|(x, y)| x * y).sum() };
    let mut total = 0.0;
    for i in 0..b {
        let ns = (0..b).map(|j| dot(s, i, j).powi(2)).sum::<f64>().sqrt().max(RELATION_EPS);
        let nt = (0..b).map(|j| dot(t, i, j).powi(2)).sum::<f64>().sqrt().max(RELATION_EPS);
        for j in 0..b {
            total += (dot(s, i, j) / ns - dot(t, i, j) / nt).powi(2);
        }
    }
    total / b as f64
}

pub fn ema_suite() -> Check {
    let mut worst: f64 = 0.0;
    for alpha in [0.9, 0.99] {
        let student = Params::new(vec![("w".into(), Tensor::from_vec(&[1], vec![0.0]))]);
        let mut teacher = Params::new(vec![("w".into(), Tensor::from_vec(&[1], vec![1.0]))]);
        for t in 1..=1000 {
            ema_update(&mut teacher, &student, alpha).expect("same layout");
            let gap = teacher.get("w").expect("present").data()[0];
            worst = worst.max((gap - alpha.powi(t)).abs());
        }
    }
    check("ema: geometric closed form", worst <= 1e-12, format!("max deviation {worst:.3e}"))
}

pub fn ramp_suite() -> Check {
    let t_ramp = 30.0;
    let start = (lambda_rampup(0.0, t_ramp) - (-5.0f64).exp()).abs();
    let ends = lambda_rampup(t_ramp, t_ramp) == 1.0 && lambda_rampup(t_ramp + 7.5, t_ramp) == 1.0;
    let monotone = (0..1000)
        .map(|i| lambda_rampup(i as f64 * 0.04, t_ramp))
        .collect::<Vec<_>>()
        .windows(2)
        .all(|w| w[1] >= w[0]);
    check(
        "ramp-up: endpoints and monotonicity",
        start <= 1e-12 && ends && monotone,
        format!("|λ(0) - e^-5| = {start:.3e}, λ(T) = λ(>T) = 1: {ends}, monotone: {monotone}"),
    )
}

/// AUC against explicit pair counting, plus the complement identity.
pub fn auc_suite(seed: u64, sets: usize) -> Check {
    let mut rng = Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..sets {
        let n = rng.random_range(2..=50);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        // a coarse grid forces ties
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64 / 5.0).collect();
        let (mut wins2, mut pairs) = (0u64, 0u64);
        for i in (0..n).filter(|&i| labels[i]) {
            for j in (0..n).filter(|&j| !labels[j]) {
                pairs += 1;
                wins2 += match scores[i].partial_cmp(&scores[j]) {
                    Some(std::cmp::Ordering::Greater) => 2,
                    Some(std::cmp::Ordering::Equal) => 1,
                    _ => 0,
                };
            }
        }
        let oracle = wins2 as f64 / (2 * pairs) as f64;
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let (a, b) = (roc_auc(&scores, &labels), roc_auc(&neg, &labels));
        match (a, b) {
            (Ok(a), Ok(b)) if a == oracle && a + b == 1.0 => {}
            _ => bad += 1,
        }
    }
    check(
        "auc: pairwise oracle and complement",
        bad == 0,
        format!("{bad} of {sets} sets disagree"),
    )
}

pub fn run_all(seed: u64) -> Vec<Check> {
    let mut out = gradient_suite(seed, 100);
    out.extend(relation_suite(seed, 1000));
    out.push(src_oracle_suite(seed, 500));
    out.push(ema_suite());
    out.push(ramp_suite());
    out.push(auc_suite(seed, 200));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_suite_passes_at_reduced_size() {
        let mut checks = gradient_suite(7, 10);
        checks.extend(relation_suite(7, 50));
        checks.push(src_oracle_suite(7, 50));
        checks.push(ema_suite());
        checks.push(ramp_suite());
        checks.push(auc_suite(7, 50));
        for c in checks {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }

    #[test]
    fn pairwise_oracle_matches_the_worked_example() {
        let s = Tensor::eye(2);
        let t = Tensor::from_rows(&[&[1.0, 1.0], &[1.0, 1.0]]);
        assert!((pairwise_src(&s, &t) - 0.585786437626905).abs() < 1e-12);
    }
}
