use super::tensor::{Scalar, Tensor4};
use crate::error::{Error, Result};

/// Number of output classes: foliage, lower stem, upper stem, empty.
pub const NUM_CLASSES: usize = 4;

/// Per-voxel class index of a one-hot target tensor.
pub fn class_indices<T: Scalar>(target: &Tensor4<T>) -> Result<Vec<u8>> {
    if target.channels() != NUM_CLASSES {
        return Err(Error::shape("target", format!("expected {NUM_CLASSES} channels, got {}", target.channels())));
    }
    let v = target.voxels();
    let d = target.data();
    (0..v)
        .map(|i| {
            let mut hot = None;
            for c in 0..NUM_CLASSES {
                let x = d[c * v + i];
                if x == T::ONE && hot.is_none() {
                    hot = Some(c as u8);
                } else if x != T::ZERO {
                    return Err(Error::InvalidArgument(format!("target voxel {i} is not one-hot")));
                }
            }
            hot.ok_or_else(|| Error::InvalidArgument(format!("target voxel {i} is not one-hot")))
        })
        .collect()
}

/// Softmax over the four channels plus class-weighted cross-entropy,
/// averaged over voxels. Returns the loss and its gradient w.r.t. `logits`.
pub fn softmax_xent<T: Scalar>(logits: &Tensor4<T>, target: &[u8], class_weights: &[f64; NUM_CLASSES]) -> Result<(f64, Tensor4<T>)> {
    if logits.channels() != NUM_CLASSES {
        return Err(Error::shape("loss", format!("expected {NUM_CLASSES} logit channels, got {}", logits.channels())));
    }
    let v = logits.voxels();
    if target.len() != v {
        return Err(Error::shape("loss", format!("{} targets for {v} voxels", target.len())));
    }
    let scale = 1.0 / v as f64;
    let mut grad = Tensor4::zeros(logits.dims());
    let d = logits.data();
    let g = grad.data_mut();
    let mut total = 0.0f64;
    for (i, &t) in target.iter().enumerate() {
        let t = t as usize;
        if t >= NUM_CLASSES {
            return Err(Error::InvalidArgument(format!("target class {t} out of range")));
        }
        let z: [f64; NUM_CLASSES] = std::array::from_fn(|c| d[c * v + i].to_f64());
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: [f64; NUM_CLASSES] = std::array::from_fn(|c| (z[c] - m).exp());
        let sum: f64 = e.iter().sum();
        let w = class_weights[t];
        total += w * (sum.ln() - (z[t] - m));
        for c in 0..NUM_CLASSES {
            let p = e[c] / sum;
            let onehot = if c == t { 1.0 } else { 0.0 };
            g[c * v + i] = T::from_f64(w * (p - onehot) * scale);
        }
    }
    Ok((total * scale, grad))
}

/// [`softmax_xent`] against a one-hot target tensor.
pub fn softmax_xent_onehot<T: Scalar>(logits: &Tensor4<T>, target: &Tensor4<T>, class_weights: &[f64; NUM_CLASSES]) -> Result<(f64, Tensor4<T>)> {
    if logits.spatial() != target.spatial() {
        return Err(Error::shape("loss", format!("logits {:?} vs target {:?}", logits.spatial(), target.spatial())));
    }
    softmax_xent(logits, &class_indices(target)?, class_weights)
}

/// Per-voxel argmax; ties go to the lower channel.
pub fn argmax_classes<T: Scalar>(logits: &Tensor4<T>) -> Vec<u8> {
    let v = logits.voxels();
    let d = logits.data();
    let ch = logits.channels();
    (0..v)
        .map(|i| {
            let mut best = 0;
            for c in 1..ch {
                if d[c * v + i] > d[best * v + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const UNIT: [f64; 4] = [1.0; 4];

    #[test]
    fn uniform_logits_give_ln4() {
        let logits = Tensor4::<f64>::zeros([4, 3, 2, 2]);
        let target: Vec<u8> = (0..12).map(|i| (i % 4) as u8).collect();
        let (loss, _) = softmax_xent(&logits, &target, &UNIT).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_give_near_zero_loss() {
        let mut logits = Tensor4::<f32>::zeros([4, 2, 2, 2]);
        let target = vec![2u8; 8];
        for i in 0..8 {
            logits.data_mut()[2 * 8 + i] = 50.0;
        }
        let (loss, _) = softmax_xent(&logits, &target, &UNIT).unwrap();
        assert!(loss < 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dims = [4, 2, 3, 2];
        let n: usize = dims.iter().product();
        let logits = Tensor4::from_vec(dims, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let target: Vec<u8> = (0..12).map(|_| rng.random_range(0..4)).collect();
        let w = [0.5, 2.0, 3.0, 0.25];
        let (_, g) = softmax_xent(&logits, &target, &w).unwrap();
        let h = 1e-5;
        for i in 0..n {
            let mut p = logits.clone();
            p.data_mut()[i] += h;
            let mut m = logits.clone();
            m.data_mut()[i] -= h;
            let fd = (softmax_xent(&p, &target, &w).unwrap().0 - softmax_xent(&m, &target, &w).unwrap().0) / (2.0 * h);
            let rel = (fd - g.data()[i]).abs() / fd.abs().max(1e-6);
            assert!(rel < 1e-4, "element {i}: {fd} vs {}", g.data()[i]);
        }
    }

    #[test]
    fn non_onehot_target_is_rejected() {
        let logits = Tensor4::<f64>::zeros([4, 1, 1, 2]);
        let mut target = Tensor4::<f64>::zeros([4, 1, 1, 2]);
        target.set(0, 0, 0, 0, 1.0);
        target.set(1, 0, 0, 0, 1.0);
        target.set(3, 0, 0, 1, 1.0);
        assert!(softmax_xent_onehot(&logits, &target, &UNIT).is_err());
        target.set(1, 0, 0, 0, 0.0);
        assert!(softmax_xent_onehot(&logits, &target, &UNIT).is_ok());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let logits = Tensor4::from_vec([4, 1, 1, 2], vec![1.0f32, 0.0, 1.0, 3.0, 0.0, 3.0, 1.0, 0.0]).unwrap();
        assert_eq!(argmax_classes(&logits), vec![0, 1]);
    }
}
