use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::RngStream;
use crate::tensor::Tensor;

const INIT_DOMAIN: u64 = 0x494E_4954; // "INIT"

/// FNV-1a, so each parameter's stream depends only on its name.
fn name_hash(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

pub(crate) fn stream(seed: u64, name: &str) -> RngStream {
    RngStream::from_key(&[INIT_DOMAIN, seed, name_hash(name)])
}

/// `U(−bound, bound)` with `bound = gain / √fan_in`.
pub(crate) fn uniform(seed: u64, name: &str, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
    let mut rng = stream(seed, name);
    let bound = gain / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.rng().gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// `[rows, cols]` matrix whose columns are orthonormal in blocks of `rows`
/// (all of them when `cols ≤ rows`).
pub(crate) fn orthogonal_columns(seed: u64, name: &str, rows: usize, cols: usize) -> Tensor {
    let mut rng = stream(seed, name);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut block_start = 0;
    while basis.len() < cols {
        if basis.len() - block_start == rows {
            block_start = basis.len();
        }
        let mut v: Vec<f64> = (0..rows).map(|_| rng.rng().sample(StandardNormal)).collect();
        for q in &basis[block_start..] {
            let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= norm);
        basis.push(v);
    }
    let mut data = vec![0.0; rows * cols];
    for (j, col) in basis.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            data[i * cols + j] = *v;
        }
    }
    Tensor::new(vec![rows, cols], data).expect("shape and data agree")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthogonal_columns_are_orthonormal() {
        let t = orthogonal_columns(3, "w", 12, 8);
        for a in 0..8 {
            for b in 0..8 {
                let dot: f64 = (0..12).map(|i| t.data()[i * 8 + a] * t.data()[i * 8 + b]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn streams_depend_on_name_only() {
        assert_eq!(uniform(1, "a", &[4], 4, 1.0), uniform(1, "a", &[4], 4, 1.0));
        assert_ne!(uniform(1, "a", &[4], 4, 1.0), uniform(1, "b", &[4], 4, 1.0));
    }
}
