//! Supervised, consistency and relation losses.
//!
//! Every loss takes its teacher-side argument as a tape value and detaches it
//! first, so gradients only ever reach the student side.

use crate::autodiff::{Tape, Var};
use crate::data::Labels;
use crate::error::{Error, Result};
use crate::fmt::sig9;
use crate::tensor::Tensor;

/// Default guard against zero rows in the relation normalization.
pub const RELATION_EPS: f64 = 1e-8;

/// Case-wise Gram matrix `A Aᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix(pub Tensor);

/// Gram matrix with every row scaled to unit L2 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationMatrix(pub Tensor);

impl RelationMatrix {
    pub fn values(&self) -> &Tensor {
        &self.0
    }
}

/// Per-step loss components.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub supervised: f64,
    pub consistency: f64,
    pub relation: f64,
    pub total: f64,
    pub lambda: f64,
    pub beta: f64,
}

fn check_same(op: &'static str, tape: &Tape, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::dim(op, tape.shape(a), tape.shape(b)));
    }
    Ok(())
}

/// Class-weighted cross-entropy.
///
/// Single-label: batch mean of `-w_y log softmax(logits)_y`. Multi-label: mean
/// over batch and classes of `w_k`-weighted binary cross-entropy on sigmoids.
pub fn weighted_cross_entropy(
    tape: &mut Tape,
    logits: Var,
    labels: &Labels,
    class_weights: &Tensor,
) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || labels.len() != shape[0] || class_weights.shape() != [shape[1]] {
        return Err(Error::dim("weighted_cross_entropy", &shape, class_weights.shape()));
    }
    let (b, k) = (shape[0], shape[1]);
    if class_weights.data().iter().any(|&w| w <= 0.0) {
        return Err(Error::Contract("class weights must be positive".into()));
    }
    let w = class_weights.data();
    match labels {
        Labels::Single(ys) => {
            let mut mask = vec![0.0; b * k];
            for (i, &y) in ys.iter().enumerate() {
                if y >= k {
                    return Err(Error::Contract(format!("label {y} >= K={k}")));
                }
                mask[i * k + y] = w[y];
            }
            let mask = tape.constant(Tensor::from_vec(&[b, k], mask));
            let logp = tape.log_softmax(logits)?;
            let picked = tape.mul(logp, mask)?;
            let total = tape.sum(picked);
            Ok(tape.scale(total, -1.0 / b as f64))
        }
        Labels::Multi { classes, hot } => {
            if *classes != k {
                return Err(Error::Contract(format!("multi-hot width {classes} != K={k}")));
            }
            // -w [y ln s(x) + (1-y) ln s(-x)] = -w [ln s(x) - (1-y) x]
            let wmat: Vec<f64> = (0..b * k).map(|i| w[i % k]).collect();
            let wneg: Vec<f64> = (0..b * k).map(|i| w[i % k] * (1.0 - hot[i] as f64)).collect();
            let wmat = tape.constant(Tensor::from_vec(&[b, k], wmat));
            let wneg = tape.constant(Tensor::from_vec(&[b, k], wneg));
            let ls = tape.log_sigmoid(logits)?;
            let pos = tape.mul(ls, wmat)?;
            let neg = tape.mul(logits, wneg)?;
            let diff = tape.sub(neg, pos)?;
            let total = tape.sum(diff);
            Ok(tape.scale(total, 1.0 / (b * k) as f64))
        }
    }
}

/// `(1/B) Σ_i ‖p_i − p'_i‖²` on probability outputs; the teacher side is detached.
pub fn consistency_mse(tape: &mut Tape, p_student: Var, p_teacher: Var) -> Result<Var> {
    check_same("consistency_mse", tape, p_student, p_teacher)?;
    let b = tape.shape(p_student)[0] as f64;
    let target = tape.detach(p_teacher);
    let d = tape.sub(p_student, target)?;
    let sq = tape.frobenius_sq(d);
    Ok(tape.scale(sq, 1.0 / b))
}

fn check_batch(op: &'static str, shape: &[usize]) -> Result<()> {
    if shape.len() != 2 || shape[0] < 2 {
        return Err(Error::Contract(format!(
            "{op} needs [B, D] features with B >= 2, got {shape:?}"
        )));
    }
    Ok(())
}

/// Differentiable `A Aᵀ`.
pub fn gram(tape: &mut Tape, a: Var) -> Result<Var> {
    check_batch("gram", tape.shape(a))?;
    let at = tape.transpose(a)?;
    tape.matmul(a, at)
}

/// Differentiable row-normalized Gram matrix: `G_i / max(‖G_i‖, eps)`.
pub fn relation(tape: &mut Tape, a: Var, eps: f64) -> Result<Var> {
    let g = gram(tape, a)?;
    let norms = tape.row_l2_norm(g)?;
    let guarded = tape.clamp_min(norms, eps);
    tape.div_rows(g, guarded)
}

pub fn gram_matrix(a: &Tensor) -> Result<GramMatrix> {
    check_batch("gram_matrix", a.shape())?;
    Ok(GramMatrix(a.matmul(&a.transpose()?)?))
}

pub fn relation_matrix(a: &Tensor, eps: f64) -> Result<RelationMatrix> {
    if eps < 0.0 {
        return Err(Error::Contract(format!("eps must be >= 0, got {eps}")));
    }
    let GramMatrix(mut g) = gram_matrix(a)?;
    let b = g.shape()[0];
    for row in g.data_mut().chunks_mut(b) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    Ok(RelationMatrix(g))
}

/// Sample-relation consistency: `(1/B) ‖R(A_s) − R(A_t)‖²_F`, teacher detached.
pub fn src_loss(tape: &mut Tape, a_student: Var, a_teacher: Var) -> Result<Var> {
    check_same("src_loss", tape, a_student, a_teacher)?;
    check_batch("src_loss", tape.shape(a_student))?;
    let b = tape.shape(a_student)[0] as f64;
    let teacher = tape.detach(a_teacher);
    let rs = relation(tape, a_student, RELATION_EPS)?;
    let rt = relation(tape, teacher, RELATION_EPS)?;
    let d = tape.sub(rs, rt)?;
    let sq = tape.frobenius_sq(d);
    Ok(tape.scale(sq, 1.0 / b))
}

/// Value-only [`src_loss`], for monitoring without touching any tape.
pub fn src_loss_value(a_student: &Tensor, a_teacher: &Tensor) -> Result<f64> {
    if a_student.shape() != a_teacher.shape() {
        return Err(Error::dim("src_loss", a_student.shape(), a_teacher.shape()));
    }
    let rs = relation_matrix(a_student, RELATION_EPS)?;
    let rt = relation_matrix(a_teacher, RELATION_EPS)?;
    let b = a_student.rows() as f64;
    Ok(rs.0.data().iter().zip(rt.0.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / b)
}

/// Mean over all `B·D` entries of `(A_s − A_t)²`, teacher detached.
pub fn feature_consistency_loss(tape: &mut Tape, a_student: Var, a_teacher: Var) -> Result<Var> {
    check_same("feature_consistency_loss", tape, a_student, a_teacher)?;
    let teacher = tape.detach(a_teacher);
    let d = tape.sub(a_student, teacher)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// `amplify · |R1 − R2|` clipped to `[0, 1]`.
pub fn distance_matrix(r1: &RelationMatrix, r2: &RelationMatrix, amplify: f64) -> Result<Tensor> {
    if amplify <= 0.0 {
        return Err(Error::Contract(format!("amplify must be > 0, got {amplify}")));
    }
    r1.0.zip_map(&r2.0, "distance_matrix", |a, b| (amplify * (a - b).abs()).clamp(0.0, 1.0))
}

/// Inverse class frequency, normalized to mean 1. Absent classes count as one sample.
pub fn inverse_frequency_weights(labels: &Labels, classes: usize) -> Tensor {
    let counts = labels.class_counts(classes);
    let inv: Vec<f64> = counts.iter().map(|&c| 1.0 / c.max(1) as f64).collect();
    let mean = inv.iter().sum::<f64>() / classes as f64;
    Tensor::from_vec(&[classes], inv.iter().map(|v| v / mean).collect())
}

/// Matrix as CSV text: one row per line, 9 significant digits, no header.
pub fn matrix_csv(m: &Tensor) -> String {
    let cols = m.shape()[1];
    let mut out = String::new();
    for row in m.data().chunks(cols) {
        let line: Vec<String> = row.iter().map(|&v| sig9(v)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Parses [`matrix_csv`] output.
pub fn parse_matrix_csv(text: &str) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut rows = 0;
    let mut cols = None;
    for (ln, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let vals: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse(format!("matrix line {}: {e}", ln + 1)))?;
        if *cols.get_or_insert(vals.len()) != vals.len() {
            return Err(Error::Parse(format!("matrix line {} is ragged", ln + 1)));
        }
        data.extend(vals);
        rows += 1;
    }
    Tensor::new(vec![rows, cols.unwrap_or(0)], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn scalar_of(f: impl FnOnce(&mut Tape) -> Result<Var>) -> f64 {
        let mut t = Tape::new();
        let v = f(&mut t).unwrap();
        t.value(v).item()
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = scalar_of(|t| {
            let l = t.constant(Tensor::zeros(&[3, 2]));
            weighted_cross_entropy(t, l, &Labels::Single(vec![0, 1, 1]), &Tensor::filled(&[2], 1.0))
        });
        assert!((uniform - std::f64::consts::LN_2).abs() < 1e-15);

        let confident = scalar_of(|t| {
            let l = t.constant(Tensor::from_rows(&[&[60.0, -60.0]]));
            weighted_cross_entropy(t, l, &Labels::Single(vec![0]), &Tensor::filled(&[2], 1.0))
        });
        assert!(confident < 1e-40);

        let logits = Tensor::from_rows(&[&[0.3, -1.2, 2.0], &[1.0, 0.5, -0.5]]);
        let unweighted = -(softmax_at(&logits, 0, 2).ln() + softmax_at(&logits, 1, 0).ln()) / 2.0;
        let got = scalar_of(|t| {
            let l = t.constant(logits.clone());
            weighted_cross_entropy(t, l, &Labels::Single(vec![2, 0]), &Tensor::filled(&[3], 1.0))
        });
        assert!((got - unweighted).abs() < 1e-14);
    }

    fn softmax_at(x: &Tensor, i: usize, k: usize) -> f64 {
        let row = x.row(i);
        row[k].exp() / row.iter().map(|v| v.exp()).sum::<f64>()
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut t = Tape::new();
        let l = t.constant(Tensor::zeros(&[1, 2]));
        let r = weighted_cross_entropy(&mut t, l, &Labels::Single(vec![2]), &Tensor::filled(&[2], 1.0));
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn multilabel_cross_entropy_matches_direct_bce() {
        let logits = Tensor::from_rows(&[&[0.5, -2.0], &[3.0, 0.1]]);
        let hot = vec![1u8, 0, 0, 1];
        let w = [0.5, 1.5];
        let mut expect = 0.0;
        for i in 0..4 {
            let s = 1.0 / (1.0 + (-logits.data()[i]).exp());
            let y = hot[i] as f64;
            expect -= w[i % 2] * (y * s.ln() + (1.0 - y) * (1.0 - s).ln());
        }
        expect /= 4.0;
        let got = scalar_of(|t| {
            let l = t.constant(logits.clone());
            weighted_cross_entropy(t, l, &Labels::Multi { classes: 2, hot: hot.clone() }, &Tensor::from_vec(&[2], w.to_vec()))
        });
        assert!((got - expect).abs() < 1e-14);
    }

    #[test]
    fn consistency_examples() {
        let cm = |a: Tensor, b: Tensor| {
            scalar_of(|t| {
                let (x, y) = (t.constant(a), t.constant(b));
                consistency_mse(t, x, y)
            })
        };
        let p = Tensor::from_rows(&[&[0.3, 0.7]]);
        assert_eq!(cm(p.clone(), p), 0.0);
        assert_eq!(cm(Tensor::from_rows(&[&[1.0, 0.0]]), Tensor::from_rows(&[&[0.0, 1.0]])), 2.0);
        assert_eq!(
            cm(
                Tensor::from_rows(&[&[0.5, 0.5], &[1.0, 0.0]]),
                Tensor::from_rows(&[&[0.5, 0.5], &[0.0, 1.0]])
            ),
            1.0
        );
    }

    #[test]
    fn gram_examples() {
        assert_eq!(gram_matrix(&Tensor::eye(2)).unwrap().0, Tensor::eye(2));
        let g = gram_matrix(&Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
        assert_eq!(g.0.data(), &[5.0, 11.0, 11.0, 25.0]);
        let g = gram_matrix(&Tensor::filled(&[2, 2], 1.0)).unwrap();
        assert_eq!(g.0.data(), &[2.0; 4]);
        assert!(gram_matrix(&Tensor::from_rows(&[&[1.0, 2.0]])).is_err());
    }

    #[test]
    fn relation_examples() {
        assert_eq!(relation_matrix(&Tensor::eye(2), RELATION_EPS).unwrap().0, Tensor::eye(2));
        let r = relation_matrix(&Tensor::filled(&[2, 2], 1.0), RELATION_EPS).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!(r.0.data().iter().all(|v| (v - h).abs() < 1e-15));
        let a = Tensor::from_rows(&[&[0.2, -1.0, 0.4], &[1.5, 0.3, 0.0], &[0.1, 0.1, 0.9]]);
        let scaled = a.map(|v| v * 3.7);
        let d = relation_matrix(&a, RELATION_EPS)
            .unwrap()
            .0
            .max_abs_diff(&relation_matrix(&scaled, RELATION_EPS).unwrap().0);
        assert!(d <= 1e-9);
    }

    #[test]
    fn zero_feature_row_is_guarded() {
        let a = Tensor::from_rows(&[&[0.0, 0.0], &[1.0, 2.0]]);
        let r = relation_matrix(&a, RELATION_EPS).unwrap();
        assert!(r.0.all_finite());
        assert_eq!(r.0.row(0), &[0.0, 0.0]);
        let err = finite_difference_check(
            |t, v| {
                let teacher = t.constant(Tensor::from_rows(&[&[0.5, 0.1], &[0.2, 1.0]]));
                src_loss(t, v, teacher)
            },
            &Tensor::from_rows(&[&[0.0, 0.0], &[1.0, 2.0]]),
            1e-5,
        );
        assert!(err.unwrap().is_finite());
    }

    #[test]
    fn src_loss_examples() {
        let src = |a: Tensor, b: Tensor| {
            scalar_of(|t| {
                let (x, y) = (t.constant(a), t.constant(b));
                src_loss(t, x, y)
            })
        };
        let a = Tensor::from_rows(&[&[1.0, 0.5], &[-0.3, 2.0]]);
        assert_eq!(src(a.clone(), a), 0.0);
        // rows of R_t are all 1/sqrt(2): two rows each contributing (1-h)^2 + h^2
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let expect = 0.5 * 2.0 * ((1.0 - h).powi(2) + h * h);
        let got = src(Tensor::eye(2), Tensor::filled(&[2, 2], 1.0));
        assert!((got - expect).abs() < 1e-15);
        assert!((got - 0.585786437626905).abs() < 1e-12);
        let mut t = Tape::new();
        let (x, y) = (t.constant(Tensor::eye(2)), t.constant(Tensor::eye(3)));
        assert!(matches!(src_loss(&mut t, x, y), Err(Error::Dimension { .. })));
    }

    #[test]
    fn src_loss_value_matches_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (a, b) = (random(&[5, 3], &mut rng), random(&[5, 3], &mut rng));
        let tape_v = scalar_of(|t| {
            let (x, y) = (t.constant(a.clone()), t.constant(b.clone()));
            src_loss(t, x, y)
        });
        assert!((tape_v - src_loss_value(&a, &b).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn feature_consistency_examples() {
        let fc = |a: Tensor, b: Tensor| {
            scalar_of(|t| {
                let (x, y) = (t.constant(a), t.constant(b));
                feature_consistency_loss(t, x, y)
            })
        };
        let a = Tensor::from_rows(&[&[0.4, -0.2], &[1.0, 0.0]]);
        let b = Tensor::from_rows(&[&[0.1, 0.2], &[0.3, 0.5]]);
        assert_eq!(fc(a.clone(), a.clone()), 0.0);
        assert_eq!(fc(Tensor::from_rows(&[&[1.0, 1.0]]), Tensor::from_rows(&[&[0.0, 0.0]])), 1.0);
        let base = fc(a.clone(), b.clone());
        let scaled = fc(a.map(|v| v * 3.0), b.map(|v| v * 3.0));
        assert!((scaled - 9.0 * base).abs() < 1e-12);
    }

    #[test]
    fn teacher_inputs_receive_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut t = Tape::new();
        let s = t.leaf(random(&[4, 3], &mut rng));
        let te = t.leaf(random(&[4, 3], &mut rng));
        let l1 = src_loss(&mut t, s, te).unwrap();
        let l2 = feature_consistency_loss(&mut t, s, te).unwrap();
        let ps = t.softmax(s).unwrap();
        let pt = t.softmax(te).unwrap();
        let l3 = consistency_mse(&mut t, ps, pt).unwrap();
        let a = t.add(l1, l2).unwrap();
        let total = t.add(a, l3).unwrap();
        let g = t.backward(total).unwrap();
        assert!(g.wrt(te).data().iter().all(|&v| v == 0.0));
        assert!(g.wrt(s).data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn distance_examples() {
        let r = RelationMatrix(Tensor::from_rows(&[&[0.5, 0.1], &[0.2, 0.9]]));
        assert_eq!(distance_matrix(&r, &r, 3.0).unwrap(), Tensor::zeros(&[2, 2]));
        let r2 = RelationMatrix(Tensor::from_rows(&[&[0.3, 0.6], &[0.2, 0.9]]));
        let d = distance_matrix(&r, &r2, 3.0).unwrap();
        assert!((d.data()[0] - 0.6).abs() < 1e-12);
        assert_eq!(d.data()[1], 1.0);
        assert!(distance_matrix(&r, &r2, 0.0).is_err());
    }

    #[test]
    fn inverse_frequency_has_unit_mean() {
        let w = inverse_frequency_weights(&Labels::Single(vec![0, 0, 0, 1]), 2);
        assert!((w.data()[0] - 0.5).abs() < 1e-15 && (w.data()[1] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn matrix_csv_round_trip() {
        let m = relation_matrix(&Tensor::from_rows(&[&[1.0, 0.2], &[0.3, 0.8], &[0.5, 0.5]]), RELATION_EPS).unwrap();
        let back = parse_matrix_csv(&matrix_csv(&m.0)).unwrap();
        assert!(back.max_abs_diff(&m.0) < 1e-8);
    }
}
