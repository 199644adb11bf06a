//! Output-norm recalibration of merged weight matrices.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::archive::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationStatus {
    Kept,
    Rescaled,
    /// Base output norm was zero, so no target exists.
    SkippedZeroBase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub base_norm: f64,
    pub merged_norm: f64,
    /// Output norm after any rescale.
    pub final_norm: f64,
    pub factor: f64,
    pub status: CalibrationStatus,
}

/// `probe_count` standard-normal vectors of length `dim`.
pub fn probe_vectors(dim: usize, probe_seed: u64, probe_count: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(probe_seed);
    (0..probe_count)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect()
}

fn matrix_dims(w: &Tensor) -> Result<(usize, usize)> {
    match *w.shape() {
        [rows, cols] => Ok((rows, cols)),
        ref s => Err(Error::InvalidArgument(format!(
            "output norm needs a matrix, got shape {s:?}"
        ))),
    }
}

/// RMS over probes of `||W x||_2`.
pub fn output_norm(w: &Tensor, probes: &[Vec<f64>]) -> Result<f64> {
    let (rows, cols) = matrix_dims(w)?;
    if probes.is_empty() {
        return Err(Error::InvalidArgument("no probe vectors".into()));
    }
    let data = w.data();
    let mut acc = 0.0;
    for x in probes {
        if x.len() != cols {
            return Err(Error::InvalidArgument(format!(
                "probe length {} does not match {cols} columns",
                x.len()
            )));
        }
        for r in 0..rows {
            let row = &data[r * cols..(r + 1) * cols];
            let y: f64 = row.iter().zip(x).map(|(&a, b)| a as f64 * b).sum();
            acc += y * y;
        }
    }
    Ok((acc / probes.len() as f64).sqrt())
}

/// Rescale `merged` in place so its output norm matches `base` whenever the
/// ratio deviates from 1 by more than `eps`.
pub fn norm_calibrate(
    merged: &mut Tensor,
    base: &Tensor,
    eps: f64,
    probe_seed: u64,
    probe_count: usize,
) -> Result<Calibration> {
    if merged.shape() != base.shape() {
        return Err(Error::Misaligned(format!(
            "merged shape {:?} vs base shape {:?}",
            merged.shape(),
            base.shape()
        )));
    }
    let (_, cols) = matrix_dims(base)?;
    let probes = probe_vectors(cols, probe_seed, probe_count);
    let base_norm = output_norm(base, &probes)?;
    let merged_norm = output_norm(merged, &probes)?;
    if base_norm == 0.0 {
        return Ok(Calibration {
            base_norm,
            merged_norm,
            final_norm: merged_norm,
            factor: 1.0,
            status: CalibrationStatus::SkippedZeroBase,
        });
    }
    if merged_norm == 0.0 || (merged_norm / base_norm - 1.0).abs() <= eps {
        return Ok(Calibration {
            base_norm,
            merged_norm,
            final_norm: merged_norm,
            factor: 1.0,
            status: CalibrationStatus::Kept,
        });
    }
    let factor = base_norm / merged_norm;
    for x in merged.data_mut() {
        *x = (*x as f64 * factor) as f32;
    }
    let final_norm = output_norm(merged, &probes)?;
    Ok(Calibration {
        base_norm,
        merged_norm,
        final_norm,
        factor,
        status: CalibrationStatus::Rescaled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn scaled(t: &Tensor, c: f64) -> Tensor {
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| (x as f64 * c) as f32).collect()).unwrap()
    }

    #[test]
    fn identical_weights_are_kept() {
        let base = random_matrix(6, 5, 1);
        let mut merged = base.clone();
        let c = norm_calibrate(&mut merged, &base, 0.05, 42, 8).unwrap();
        assert_eq!(c.factor, 1.0);
        assert_eq!(c.status, CalibrationStatus::Kept);
        assert_eq!(merged, base);
    }

    #[test]
    fn doubled_weights_are_halved() {
        let base = random_matrix(6, 5, 2);
        let mut merged = scaled(&base, 2.0);
        let c = norm_calibrate(&mut merged, &base, 0.05, 42, 8).unwrap();
        assert!((c.factor - 0.5).abs() < 1e-12);
        assert_eq!(c.status, CalibrationStatus::Rescaled);
        assert!((c.final_norm - c.base_norm).abs() <= 1e-6 * c.base_norm);
    }

    #[test]
    fn deviation_just_below_threshold_is_kept() {
        let base = random_matrix(7, 3, 3);
        let mut merged = scaled(&base, 1.049);
        let before = merged.clone();
        let c = norm_calibrate(&mut merged, &base, 0.05, 42, 8).unwrap();
        assert_eq!(c.status, CalibrationStatus::Kept);
        assert!((c.merged_norm / c.base_norm - 1.049).abs() < 1e-6);
        assert_eq!(merged, before);
    }

    #[test]
    fn calibration_is_idempotent() {
        let base = random_matrix(8, 8, 4);
        let mut merged = random_matrix(8, 8, 5);
        norm_calibrate(&mut merged, &base, 0.05, 9, 8).unwrap();
        let second = norm_calibrate(&mut merged, &base, 0.05, 9, 8).unwrap();
        assert!((second.factor - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_base_is_skipped() {
        let base = Tensor::zeros(vec![3, 3]);
        let mut merged = random_matrix(3, 3, 6);
        let before = merged.clone();
        let c = norm_calibrate(&mut merged, &base, 0.05, 1, 8).unwrap();
        assert_eq!(c.status, CalibrationStatus::SkippedZeroBase);
        assert_eq!(merged, before);
    }

    #[test]
    fn output_norm_of_identity_is_probe_rms() {
        let id = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let probes = vec![vec![3.0, 4.0], vec![0.0, 0.0]];
        // sqrt((25 + 0) / 2)
        assert!((output_norm(&id, &probes).unwrap() - 12.5f64.sqrt()).abs() < 1e-12);
        assert!(output_norm(&Tensor::zeros(vec![4]), &probes).is_err());
    }
}
