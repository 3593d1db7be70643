//! Trajectory and grid losses plus the evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Mat3, Vec3};
use crate::real::Real;
use crate::trajectory::Trajectory;

const TIME_EPS: f64 = 1e-9;

/// A reference sample matched to index `index` of the evaluated sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Matched {
    pub index: usize,
    pub pos: [f64; 3],
    pub rot: Mat3<f64>,
}

/// Resamples `reference` at every time in `times` that falls within its
/// range (linear in position, slerp in rotation).
pub fn match_reference(times: &[f64], reference: &Trajectory) -> Result<Vec<Matched>> {
    let (Some(&t0), Some(&t1)) = (reference.times.first(), reference.times.last()) else {
        return Err(Error::EmptyOverlap);
    };
    let mut out = Vec::with_capacity(times.len());
    for (index, &t) in times.iter().enumerate() {
        if t < t0 - TIME_EPS || t > t1 + TIME_EPS {
            continue;
        }
        let k = reference.times.partition_point(|&x| x <= t + TIME_EPS);
        let (pos, rot) = if k == 0 || k >= reference.times.len() || (reference.times[k - 1] - t).abs() <= TIME_EPS {
            let s = &reference.states[k.clamp(1, reference.len()) - 1];
            (s.pos.to_array(), s.rot)
        } else {
            let (a, b) = (&reference.states[k - 1], &reference.states[k]);
            let w = (t - reference.times[k - 1]) / (reference.times[k] - reference.times[k - 1]);
            ((a.pos + (b.pos - a.pos).scale(w)).to_array(), slerp(&a.rot, &b.rot, w))
        };
        out.push(Matched { index, pos, rot });
    }
    if out.is_empty() {
        return Err(Error::EmptyOverlap);
    }
    Ok(out)
}

fn slerp(a: &Mat3<f64>, b: &Mat3<f64>, w: f64) -> Mat3<f64> {
    let qa = a.to_quaternion();
    let mut qb = b.to_quaternion();
    let mut dot: f64 = qa.iter().zip(&qb).map(|(x, y)| x * y).sum();
    if dot < 0.0 {
        qb = qb.map(|v| -v);
        dot = -dot;
    }
    let (ka, kb) = if dot > 0.9995 {
        (1.0 - w, w)
    } else {
        let th = dot.acos();
        ((((1.0 - w) * th).sin()) / th.sin(), (w * th).sin() / th.sin())
    };
    let q: [f64; 4] = std::array::from_fn(|i| ka * qa[i] + kb * qb[i]);
    Mat3::from_quaternion(q)
}

/// Options for [`trajectory_loss`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the mean squared geodesic orientation error; 0 disables it.
    pub orientation_weight: f64,
}

/// Mean squared position error over matched samples, plus the optional
/// orientation term. Generic so it can be built on the tape.
pub fn sequence_loss<R: Real>(
    positions: &[Vec3<R>],
    rotations: Option<&[Mat3<R>]>,
    matched: &[Matched],
    cfg: &LossConfig,
) -> R {
    let mut acc = R::zero();
    for m in matched {
        let d = positions[m.index] - Vec3::from_f64(m.pos);
        acc += d.norm_squared();
    }
    let n = matched.len() as f64;
    let mut loss = acc.scale(1.0 / n);
    if cfg.orientation_weight != 0.0 {
        if let Some(rots) = rotations {
            let mut ang = R::zero();
            for m in matched {
                let a = geodesic_angle(&rots[m.index], &Mat3::from_f64(m.rot.m));
                ang += a * a;
            }
            loss += ang.scale(cfg.orientation_weight / n);
        }
    }
    loss
}

fn geodesic_angle<R: Real>(a: &Mat3<R>, b: &Mat3<R>) -> R {
    let mut tr = R::zero();
    for i in 0..3 {
        for k in 0..3 {
            tr += a.m[k][i] * b.m[k][i];
        }
    }
    ((tr - R::one()).scale(0.5)).clamp_const(-1.0, 1.0).acos()
}

pub fn trajectory_loss(tau: &Trajectory, reference: &Trajectory) -> Result<f64> {
    trajectory_loss_with(tau, reference, &LossConfig::default())
}

pub fn trajectory_loss_with(tau: &Trajectory, reference: &Trajectory, cfg: &LossConfig) -> Result<f64> {
    let matched = match_reference(&tau.times, reference)?;
    let pos: Vec<Vec3<f64>> = tau.states.iter().map(|s| s.pos).collect();
    let rot: Vec<Mat3<f64>> = tau.states.iter().map(|s| s.rot).collect();
    Ok(sequence_loss(&pos, Some(&rot), &matched, cfg))
}

/// `‖W ∘ (pred − target)‖²` divided by the number of cells with `W > 0`.
pub fn masked_grid_loss<R: Real>(pred: &[R], target: &[f64], weights: &[f64]) -> Result<R> {
    if pred.len() != target.len() || pred.len() != weights.len() {
        return Err(Error::Shape(format!(
            "pred {}, target {}, weights {}",
            pred.len(),
            target.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::Config("mask weights must be finite and non-negative".into()));
    }
    let active = weights.iter().filter(|&&w| w > 0.0).count();
    if active == 0 {
        return Err(Error::AllMasked);
    }
    let mut acc = R::zero();
    for ((p, &t), &w) in pred.iter().zip(target).zip(weights) {
        if w > 0.0 {
            let d = (*p - R::from_f64(t)).scale(w);
            acc += d * d;
        }
    }
    Ok(acc.scale(1.0 / active as f64))
}

/// How [`translation_error`] aggregates distances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranslationMetric {
    /// `sqrt(mean ‖x − x*‖)`.
    #[default]
    SqrtMeanNorm,
    /// `sqrt(mean ‖x − x*‖²)`.
    Rmse,
}

pub fn translation_error(tau: &Trajectory, reference: &Trajectory, metric: TranslationMetric) -> Result<f64> {
    let matched = match_reference(&tau.times, reference)?;
    let n = matched.len() as f64;
    let sum: f64 = matched
        .iter()
        .map(|m| {
            let d = (tau.states[m.index].pos - Vec3::from_f64(m.pos)).norm();
            match metric {
                TranslationMetric::SqrtMeanNorm => d,
                TranslationMetric::Rmse => d * d,
            }
        })
        .sum();
    Ok((sum / n).sqrt())
}

/// Mean geodesic angle between matched orientations [rad].
pub fn rotation_error(tau: &Trajectory, reference: &Trajectory) -> Result<f64> {
    let matched = match_reference(&tau.times, reference)?;
    let sum: f64 = matched
        .iter()
        .map(|m| geodesic_angle(&tau.states[m.index].rot, &m.rot))
        .sum();
    Ok(sum / matched.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::RigidState;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_traj(rng: &mut ChaCha8Rng, n: usize) -> Trajectory {
        let mut tr = Trajectory::default();
        for k in 0..n {
            let mut s = RigidState::at_rest(
                [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(0.0..1.0)],
                0.0,
            );
            s.rot = Mat3::from_rpy(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-3.0..3.0));
            tr.times.push(k as f64 * 0.1);
            tr.states.push(s);
        }
        tr
    }

    fn offset(tr: &Trajectory, d: [f64; 3]) -> Trajectory {
        let mut out = tr.clone();
        for s in &mut out.states {
            s.pos += Vec3::from_f64(d);
        }
        out
    }

    #[test]
    fn identical_trajectories_score_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tr = random_traj(&mut rng, 10);
        assert_eq!(trajectory_loss(&tr, &tr).unwrap(), 0.0);
        assert_eq!(translation_error(&tr, &tr, TranslationMetric::SqrtMeanNorm).unwrap(), 0.0);
        assert!(rotation_error(&tr, &tr).unwrap() < 1e-7);
    }

    #[test]
    fn unit_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tr = random_traj(&mut rng, 10);
        let moved = offset(&tr, [1.0, 0.0, 0.0]);
        assert!((trajectory_loss(&moved, &tr).unwrap() - 1.0).abs() < 1e-12);
        assert!((translation_error(&moved, &tr, TranslationMetric::SqrtMeanNorm).unwrap() - 1.0).abs() < 1e-12);
        assert!((translation_error(&moved, &tr, TranslationMetric::Rmse).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn printed_metric_differs_from_rmse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tr = random_traj(&mut rng, 4);
        let moved = offset(&tr, [0.04, 0.0, 0.0]);
        let printed = translation_error(&moved, &tr, TranslationMetric::SqrtMeanNorm).unwrap();
        assert!((printed - 0.2).abs() < 1e-12);
        let rmse = translation_error(&moved, &tr, TranslationMetric::Rmse).unwrap();
        assert!((rmse - 0.04).abs() < 1e-12);
    }

    #[test]
    fn hand_summed_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_traj(&mut rng, 10);
        let b = random_traj(&mut rng, 10);
        let mut expected = 0.0;
        for (x, y) in a.states.iter().zip(&b.states) {
            for k in 0..3 {
                let d = x.pos.to_array()[k] - y.pos.to_array()[k];
                expected += d * d;
            }
        }
        expected /= 10.0;
        assert!((trajectory_loss(&a, &b).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn quarter_turn_rotation_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tr = random_traj(&mut rng, 6);
        let mut turned = tr.clone();
        for s in &mut turned.states {
            s.rot = s.rot.mul_mat(&Mat3::from_yaw(std::f64::consts::FRAC_PI_2));
        }
        let e = rotation_error(&turned, &tr).unwrap();
        assert!((e - std::f64::consts::FRAC_PI_2).abs() < 1e-9);
    }

    #[test]
    fn resamples_reference_in_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let reference = random_traj(&mut rng, 3);
        let mut tau = Trajectory::default();
        tau.times = vec![0.05, 0.15, 0.5];
        let mid = |a: usize, b: usize| {
            (reference.states[a].pos + reference.states[b].pos).scale(0.5)
        };
        tau.states = vec![RigidState::at_rest(mid(0, 1).to_array(), 0.0); 3];
        tau.states[1].pos = mid(1, 2);
        let m = match_reference(&tau.times, &reference).unwrap();
        assert_eq!(m.len(), 2);
        assert!(trajectory_loss(&tau, &reference).unwrap() < 1e-24);
    }

    #[test]
    fn disjoint_times_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_traj(&mut rng, 3);
        let mut b = a.clone();
        b.times.iter_mut().for_each(|t| *t += 10.0);
        assert!(matches!(trajectory_loss(&a, &b), Err(Error::EmptyOverlap)));
    }

    #[test]
    fn masked_loss_cases() {
        let pred = vec![0.0, 1.0, 2.0, 0.5];
        assert_eq!(masked_grid_loss(&pred, &pred, &[1.0; 4]).unwrap(), 0.0);
        let target = vec![5.0, 1.0, 9.0, 0.0];
        assert_eq!(masked_grid_loss(&pred, &target, &[0.0, 0.0, 0.0, 1.0]).unwrap(), 0.25);
        assert!(matches!(masked_grid_loss(&pred, &target, &[0.0; 4]), Err(Error::AllMasked)));
        assert!(matches!(masked_grid_loss(&pred, &target[..3], &[1.0; 4]), Err(Error::Shape(_))));
    }

    #[test]
    fn masked_loss_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 32 * 32;
        let pred: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let target: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.1..2.0) }).collect();
        let mut sum = 0.0;
        let mut count = 0;
        for i in 0..n {
            if w[i] > 0.0 {
                sum += (w[i] * (pred[i] - target[i])).powi(2);
                count += 1;
            }
        }
        let got = masked_grid_loss(&pred, &target, &w).unwrap();
        assert!((got - sum / count as f64).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn rotation_error_frame_invariant(seed in 0u64..1000, r in -3.0f64..3.0, p in -1.5f64..1.5, y in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_traj(&mut rng, 5);
            let b = random_traj(&mut rng, 5);
            let q = Mat3::from_rpy(r, p, y);
            let rotate = |t: &Trajectory| {
                let mut o = t.clone();
                o.states.iter_mut().for_each(|s| s.rot = q.mul_mat(&s.rot));
                o
            };
            let e0 = rotation_error(&a, &b).unwrap();
            let e1 = rotation_error(&rotate(&a), &rotate(&b)).unwrap();
            prop_assert!((e0 - e1).abs() < 1e-9);
        }

        #[test]
        fn masked_loss_permutation_invariant(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 50;
            let pred: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let target: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.reverse();
            perm.swap(3, 17);
            let pp: Vec<f64> = perm.iter().map(|&i| pred[i]).collect();
            let tp: Vec<f64> = perm.iter().map(|&i| target[i]).collect();
            let wp: Vec<f64> = perm.iter().map(|&i| w[i]).collect();
            let a = masked_grid_loss(&pred, &target, &w).unwrap();
            let b = masked_grid_loss(&pp, &tp, &wp).unwrap();
            prop_assert!(a >= 0.0);
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
