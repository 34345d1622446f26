//! Trajectory I/O, timestamp association, rigid alignment and ATE RMSE.
//!
//! Trajectories use the TUM text convention: one sample per line,
//! `timestamp tx ty tz qx qy qz qw`, `#` comment lines allowed, poses
//! camera-to-world. The solver works in world-to-camera, so conversion
//! happens at this I/O boundary. Written values carry nine decimal places.

use std::io::{BufRead, Write};

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};

use crate::geometry::SE3Pose;
use crate::sim::median;
use crate::{invalid, Error, Result};

/// One timestamped camera-to-world pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySample {
    pub timestamp: f64,
    /// Camera-to-world transform (TUM file convention).
    pub pose: SE3Pose,
}

/// Timestamped pose sequence with strictly increasing timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    samples: Vec<TrajectorySample>,
}

impl Trajectory {
    pub fn new(samples: Vec<TrajectorySample>) -> Result<Self> {
        for pair in samples.windows(2) {
            if pair[1].timestamp <= pair[0].timestamp {
                return Err(invalid(format!(
                    "timestamps must be strictly increasing ({} then {})",
                    pair[0].timestamp, pair[1].timestamp
                )));
            }
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[TrajectorySample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Camera position of sample `i` in world coordinates.
    pub fn position(&self, i: usize) -> Vector3<f64> {
        self.samples[i].pose.translation
    }
}

/// ATE statistics over associated samples, in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct AteResult {
    pub rmse: f64,
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    pub per_sample_errors: Vec<f64>,
    /// Rigid transform that was applied to the estimate (identity when
    /// alignment is disabled).
    pub alignment: SE3Pose,
}

/// Parses a TUM trajectory. Comment (`#`) and blank lines are skipped;
/// quaternions must be within 1e-3 of unit norm and are normalized on
/// ingest.
pub fn read_trajectory_tum<R: BufRead>(reader: R) -> Result<Trajectory> {
    let mut samples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let lineno = idx + 1;
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected 8 fields, found {}", fields.len()),
            });
        }
        let mut values = [0.0f64; 8];
        for (i, f) in fields.iter().enumerate() {
            values[i] = f.parse().map_err(|_| Error::Parse {
                line: lineno,
                message: format!("field {} is not a number: {f:?}", i + 1),
            })?;
        }
        let [t, tx, ty, tz, qx, qy, qz, qw] = values;
        let q = Quaternion::new(qw, qx, qy, qz);
        if (q.norm() - 1.0).abs() > 1e-3 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("quaternion norm {} too far from 1", q.norm()),
            });
        }
        let rotation = UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner();
        samples.push(TrajectorySample {
            timestamp: t,
            pose: SE3Pose::new(rotation, Vector3::new(tx, ty, tz)),
        });
    }
    if samples.is_empty() {
        return Err(invalid("trajectory file contains no samples"));
    }
    Trajectory::new(samples)
}

/// Writes a trajectory in TUM format with nine decimal places per field.
pub fn write_trajectory_tum<W: Write>(trajectory: &Trajectory, mut w: W) -> Result<()> {
    writeln!(w, "# timestamp tx ty tz qx qy qz qw")?;
    for s in trajectory.samples() {
        let rot = Rotation3::from_matrix_unchecked(s.pose.rotation);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        let t = &s.pose.translation;
        writeln!(
            w,
            "{:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
            s.timestamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w
        )?;
    }
    Ok(())
}

/// Greedy nearest-timestamp matching: candidate pairs are sorted by time
/// gap and taken while both sides are unused; pairs farther apart than
/// `max_dt` are dropped. Errors when nothing matches.
pub fn associate(gt: &Trajectory, est: &Trajectory, max_dt: f64) -> Result<Vec<(usize, usize)>> {
    if max_dt <= 0.0 {
        return Err(invalid("association tolerance must be positive"));
    }
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (i, a) in gt.samples().iter().enumerate() {
        for (j, b) in est.samples().iter().enumerate() {
            let dt = (a.timestamp - b.timestamp).abs();
            if dt <= max_dt {
                candidates.push((dt, i, j));
            }
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut gt_used = vec![false; gt.len()];
    let mut est_used = vec![false; est.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in candidates {
        if !gt_used[i] && !est_used[j] {
            gt_used[i] = true;
            est_used[j] = true;
            pairs.push((i, j));
        }
    }
    if pairs.is_empty() {
        return Err(Error::Association(format!(
            "no sample pairs within {max_dt} s of each other"
        )));
    }
    pairs.sort_unstable();
    Ok(pairs)
}

/// Rigid (no scale) alignment minimizing `sum ||gt_i - (R est_i + t)||^2`.
/// Needs at least three non-collinear correspondences.
pub fn align_umeyama(gt: &[Vector3<f64>], est: &[Vector3<f64>]) -> Result<SE3Pose> {
    if gt.len() != est.len() {
        return Err(invalid("alignment inputs must have equal length"));
    }
    let n = gt.len();
    if n < 3 {
        return Err(Error::Alignment(format!("need at least 3 correspondences, got {n}")));
    }
    let scale = 1.0 / n as f64;
    let gt_mean: Vector3<f64> = gt.iter().sum::<Vector3<f64>>() * scale;
    let est_mean: Vector3<f64> = est.iter().sum::<Vector3<f64>>() * scale;
    let mut cross = Matrix3::zeros();
    for (a, b) in est.iter().zip(gt.iter()) {
        cross += (a - est_mean) * (b - gt_mean).transpose();
    }
    let svd = cross.svd(true, true);
    let sv = svd.singular_values;
    if sv[0] <= 1e-12 || sv[1] <= 1e-9 * sv[0] {
        return Err(Error::Alignment(
            "degenerate correspondence geometry (coincident or collinear points)".into(),
        ));
    }
    let u = svd.u.ok_or_else(|| Error::Alignment("SVD failed".into()))?;
    let v_t = svd.v_t.ok_or_else(|| Error::Alignment("SVD failed".into()))?;
    let mut d = Matrix3::identity();
    if (v_t.transpose() * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = v_t.transpose() * d * u.transpose();
    let translation = gt_mean - rotation * est_mean;
    Ok(SE3Pose::new(rotation, translation))
}

/// ATE over associated samples: per-sample error is the distance between
/// the ground-truth camera position and the (optionally rigidly aligned)
/// estimated position.
pub fn ate_rmse(gt: &Trajectory, est: &Trajectory, align: bool, max_dt: f64) -> Result<AteResult> {
    let pairs = associate(gt, est, max_dt)?;
    let gt_pos: Vec<Vector3<f64>> = pairs.iter().map(|&(i, _)| gt.position(i)).collect();
    let est_pos: Vec<Vector3<f64>> = pairs.iter().map(|&(_, j)| est.position(j)).collect();
    let alignment = if align { align_umeyama(&gt_pos, &est_pos)? } else { SE3Pose::identity() };
    let per_sample_errors: Vec<f64> = gt_pos
        .iter()
        .zip(est_pos.iter())
        .map(|(g, e)| (g - alignment.transform(e)).norm())
        .collect();
    let n = per_sample_errors.len() as f64;
    let mean_sq = per_sample_errors.iter().map(|e| e * e).sum::<f64>() / n;
    let mean = per_sample_errors.iter().sum::<f64>() / n;
    let max = per_sample_errors.iter().cloned().fold(0.0, f64::max);
    let med = median(&mut per_sample_errors.clone());
    Ok(AteResult {
        rmse: mean_sq.sqrt(),
        mean,
        median: med,
        max,
        per_sample_errors,
        alignment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::se3_exp;
    use nalgebra::Vector6;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn trajectory_from_positions(positions: &[Vector3<f64>]) -> Trajectory {
        let samples = positions
            .iter()
            .enumerate()
            .map(|(i, p)| TrajectorySample {
                timestamp: i as f64 * 0.1,
                pose: SE3Pose::new(Matrix3::identity(), *p),
            })
            .collect();
        Trajectory::new(samples).unwrap()
    }

    fn random_trajectory(seed: u64, n: usize) -> Trajectory {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..n)
            .map(|i| {
                let xi = Vector6::from_fn(|_, _| rng.random_range(-1.0..1.0));
                TrajectorySample { timestamp: i as f64 * 0.05, pose: se3_exp(&xi) }
            })
            .collect();
        Trajectory::new(samples).unwrap()
    }

    #[test]
    fn parses_identity_line() {
        let t = read_trajectory_tum("0.0 0 0 0 0 0 0 1".as_bytes()).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.samples()[0].timestamp, 0.0);
        assert!((t.samples()[0].pose.rotation - Matrix3::identity()).norm() < 1e-15);
        assert_eq!(t.samples()[0].pose.translation, Vector3::zeros());
    }

    #[test]
    fn comment_only_file_is_empty_error() {
        let err = read_trajectory_tum("# header\n# only comments\n".as_bytes());
        assert!(err.is_err());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let input = "# ok\n0.0 0 0 0 0 0 0 1\n0.1 bad 0 0 0 0 0 1\n";
        match read_trajectory_tum(input.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        match read_trajectory_tum("0.0 1 2 3 0 0 0".as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn non_monotonic_timestamps_rejected() {
        let input = "1.0 0 0 0 0 0 0 1\n0.5 0 0 0 0 0 0 1\n";
        assert!(read_trajectory_tum(input.as_bytes()).is_err());
    }

    #[test]
    fn non_unit_quaternion_rejected_but_near_unit_normalized() {
        let bad = "0.0 0 0 0 0.5 0.5 0.5 0.9\n";
        assert!(read_trajectory_tum(bad.as_bytes()).is_err());
        let near = "0.0 0 0 0 0 0 0 1.0005\n";
        let t = read_trajectory_tum(near.as_bytes()).unwrap();
        assert!(t.samples()[0].pose.has_valid_rotation(1e-9));
    }

    #[test]
    fn write_read_round_trip() {
        let t = random_trajectory(21, 100);
        let mut buf = Vec::new();
        write_trajectory_tum(&t, &mut buf).unwrap();
        let back = read_trajectory_tum(buf.as_slice()).unwrap();
        assert_eq!(back.len(), t.len());
        for (a, b) in t.samples().iter().zip(back.samples()) {
            assert!((a.pose.translation - b.pose.translation).norm() < 1e-9);
            let rel = a.pose.between(&b.pose);
            assert!(rel.rotation_angle() < 1e-9);
        }
    }

    #[test]
    fn association_trivials() {
        let a = random_trajectory(1, 20);
        let pairs = associate(&a, &a, 0.02).unwrap();
        assert_eq!(pairs.len(), 20);
        for (k, &(i, j)) in pairs.iter().enumerate() {
            assert_eq!((i, j), (k, k));
        }

        // Shift by max_dt/2: full pairing retained.
        let shifted = Trajectory::new(
            a.samples()
                .iter()
                .map(|s| TrajectorySample { timestamp: s.timestamp + 0.01, ..*s })
                .collect(),
        )
        .unwrap();
        assert_eq!(associate(&a, &shifted, 0.02).unwrap().len(), 20);

        // Shift by 2*max_dt: nothing associates.
        let far = Trajectory::new(
            a.samples()
                .iter()
                .map(|s| TrajectorySample { timestamp: s.timestamp + 0.04, ..*s })
                .collect(),
        )
        .unwrap();
        match associate(&a, &far, 0.02) {
            Err(Error::Association(_)) => {}
            other => panic!("expected association error, got {other:?}"),
        }
    }

    #[test]
    fn association_count_is_symmetric() {
        let a = random_trajectory(2, 30);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let jittered = Trajectory::new(
            a.samples()
                .iter()
                .step_by(2)
                .map(|s| TrajectorySample {
                    timestamp: s.timestamp + rng.random_range(-0.015..0.015),
                    ..*s
                })
                .collect(),
        )
        .unwrap();
        let ab = associate(&a, &jittered, 0.02).unwrap().len();
        let ba = associate(&jittered, &a, 0.02).unwrap().len();
        assert_eq!(ab, ba);
    }

    #[test]
    fn umeyama_identity_and_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt: Vec<Vector3<f64>> = (0..40)
            .map(|_| Vector3::from_fn(|_, _| rng.random_range(-3.0..3.0)))
            .collect();
        let id = align_umeyama(&gt, &gt).unwrap();
        assert!((id.rotation - Matrix3::identity()).norm() < 1e-10);
        assert!(id.translation.norm() < 1e-10);

        let g = se3_exp(&Vector6::new(0.3, -0.7, 0.2, 2.0, -1.0, 0.5));
        let est: Vec<Vector3<f64>> = gt.iter().map(|p| g.transform(p)).collect();
        let align = align_umeyama(&gt, &est).unwrap();
        for (p, e) in gt.iter().zip(est.iter()) {
            assert!((p - align.transform(e)).norm() < 1e-10);
        }
    }

    #[test]
    fn umeyama_degenerate_configurations() {
        let two = vec![Vector3::zeros(), Vector3::zeros()];
        assert!(align_umeyama(&two, &two).is_err());
        let collinear: Vec<Vector3<f64>> =
            (0..10).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        match align_umeyama(&collinear, &collinear) {
            Err(Error::Alignment(_)) => {}
            other => panic!("expected alignment error, got {other:?}"),
        }
    }

    #[test]
    fn ate_identity_is_zero() {
        let t = random_trajectory(5, 50);
        let r = ate_rmse(&t, &t, false, 0.02).unwrap();
        assert_eq!(r.rmse, 0.0);
        assert_eq!(r.max, 0.0);
    }

    #[test]
    fn ate_constant_offset_without_alignment() {
        let gt = random_trajectory(6, 50);
        let est = Trajectory::new(
            gt.samples()
                .iter()
                .map(|s| TrajectorySample {
                    timestamp: s.timestamp,
                    pose: SE3Pose::new(s.pose.rotation, s.pose.translation + Vector3::new(1.0, 0.0, 0.0)),
                })
                .collect(),
        )
        .unwrap();
        let r = ate_rmse(&gt, &est, false, 0.02).unwrap();
        assert!((r.rmse - 1.0).abs() < 1e-12);
        assert!((r.mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ate_alignment_cancels_rigid_transforms() {
        let gt = random_trajectory(7, 60);
        let g = se3_exp(&Vector6::new(-0.2, 0.4, 0.6, 1.5, 0.3, -2.0));
        let est = Trajectory::new(
            gt.samples()
                .iter()
                .map(|s| TrajectorySample {
                    timestamp: s.timestamp,
                    pose: SE3Pose::new(
                        g.rotation * s.pose.rotation,
                        g.transform(&s.pose.translation),
                    ),
                })
                .collect(),
        )
        .unwrap();
        let r = ate_rmse(&gt, &est, true, 0.02).unwrap();
        assert!(r.rmse < 1e-10, "rmse {}", r.rmse);
    }

    #[test]
    fn rmse_squared_equals_mean_of_squares() {
        let gt = random_trajectory(8, 40);
        let est = random_trajectory(9, 40);
        let r = ate_rmse(&gt, &est, false, 0.02).unwrap();
        let mean_sq =
            r.per_sample_errors.iter().map(|e| e * e).sum::<f64>() / r.per_sample_errors.len() as f64;
        assert!((r.rmse * r.rmse - mean_sq).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn tum_round_trip_preserves_poses(seed in 0u64..1000) {
            let t = random_trajectory(seed, 20);
            let mut buf = Vec::new();
            write_trajectory_tum(&t, &mut buf).unwrap();
            let back = read_trajectory_tum(buf.as_slice()).unwrap();
            for (a, b) in t.samples().iter().zip(back.samples()) {
                prop_assert!((a.pose.translation - b.pose.translation).norm() < 1e-9);
                prop_assert!(a.pose.between(&b.pose).rotation_angle() < 1e-9);
            }
        }

        #[test]
        fn ate_invariant_to_rigid_remap(seed in 0u64..200) {
            let gt = random_trajectory(seed, 25);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
            let xi = Vector6::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let g = se3_exp(&xi);
            let est = Trajectory::new(
                gt.samples()
                    .iter()
                    .map(|s| TrajectorySample {
                        timestamp: s.timestamp,
                        pose: SE3Pose::new(
                            g.rotation * s.pose.rotation,
                            g.transform(&s.pose.translation),
                        ),
                    })
                    .collect(),
            )
            .unwrap();
            let r = ate_rmse(&gt, &est, true, 0.02).unwrap();
            prop_assert!(r.rmse < 1e-10);
        }
    }
}
