use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::{Element, Tensor};

/// Mean kernel of a `(C_out, C_in, K, K)` conv weight: the single cluster
/// center of all `C_out * C_in` kernels, zeroed ones included.
pub fn cluster_center<T: Element>(weights: &Tensor<T>) -> Result<Tensor<T>> {
    if weights.rank() != 4 {
        return Err(invalid!(
            "cluster center needs a (C_out, C_in, K, K) weight, got {:?}",
            weights.shape()
        ));
    }
    weights.mean_over_leading_axes(2)
}

/// Kernel-to-center distances of one layer, row-major over
/// `(C_out, C_in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub out_channels: usize,
    pub in_channels: usize,
    pub values: Vec<f64>,
}

impl DistanceMatrix {
    pub fn new(out_channels: usize, in_channels: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != out_channels * in_channels || values.is_empty() {
            return Err(shape_err!(
                "{} distances for a ({out_channels}, {in_channels}) grid",
                values.len()
            ));
        }
        Ok(Self {
            out_channels,
            in_channels,
            values,
        })
    }

    pub fn get(&self, out_channel: usize, in_channel: usize) -> f64 {
        self.values[out_channel * self.in_channels + in_channel]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Multiplies every distance by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * c).collect(),
            ..*self
        }
    }
}

fn frobenius_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Frobenius distance of every kernel to `center`.
///
/// With `normalize`, each kernel is first scaled to unit norm (all-zero
/// kernels stay zero) and the center is recomputed from the scaled kernels,
/// so `center` only fixes the expected kernel shape. The weights themselves
/// are never modified.
pub fn kernel_distances<T: Element>(weights: &Tensor<T>, center: &Tensor<T>, normalize: bool) -> Result<DistanceMatrix> {
    let &[c_out, c_in, kh, kw] = weights.shape() else {
        return Err(invalid!(
            "kernel distances need a (C_out, C_in, K, K) weight, got {:?}",
            weights.shape()
        ));
    };
    if center.shape() != [kh, kw] {
        return Err(shape_err!(
            "center {:?} does not match kernels of {kh}x{kw}",
            center.shape()
        ));
    }
    let area = kh * kw;
    let mut kernels: Vec<f64> = weights.data().iter().map(|v| v.to_f64()).collect();
    let center: Vec<f64> = if normalize {
        for kernel in kernels.chunks_exact_mut(area) {
            let norm = kernel.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                kernel.iter_mut().for_each(|v| *v /= norm);
            }
        }
        let mut mean = vec![0f64; area];
        for kernel in kernels.chunks_exact(area) {
            mean.iter_mut().zip(kernel).for_each(|(m, v)| *m += v);
        }
        let count = (c_out * c_in) as f64;
        mean.iter_mut().for_each(|m| *m /= count);
        mean
    } else {
        center.data().iter().map(|v| v.to_f64()).collect()
    };
    let values: Vec<f64> = kernels
        .chunks_exact(area)
        .map(|k| frobenius_distance(k, &center))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kernel distance".into()));
    }
    DistanceMatrix::new(c_out, c_in, values)
}

/// Center and distances of one layer in one call.
pub fn layer_distances<T: Element>(weights: &Tensor<T>, normalize: bool) -> Result<DistanceMatrix> {
    let center = cluster_center(weights)?;
    kernel_distances(weights, &center, normalize)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn opposite_kernels_have_zero_center() {
        let k = [0.5f32, -1.0, 2.0, 0.25];
        let mut data = k.to_vec();
        data.extend(k.iter().map(|v| -v));
        let w = Tensor::new(vec![2, 1, 2, 2], data).unwrap();
        let c = cluster_center(&w).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_kernel_is_its_own_center() {
        let w = Tensor::new(vec![1, 1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(cluster_center(&w).unwrap().data(), w.data());
        let d = layer_distances(&w, false).unwrap();
        assert_eq!(d.values, vec![0.0]);
    }

    #[test]
    fn non_4d_rejected() {
        let w = Tensor::<f32>::zeros(&[2, 2, 2]);
        assert!(matches!(cluster_center(&w), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn identity_kernel_distance_to_zero_center() {
        let w = Tensor::new(vec![1, 1, 2, 2], vec![1.0f32, 0.0, 0.0, 1.0]).unwrap();
        let d = kernel_distances(&w, &Tensor::zeros(&[2, 2]), false).unwrap();
        assert!((d.values[0] - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn center_shape_checked() {
        let w = Tensor::<f32>::zeros(&[1, 1, 3, 3]);
        assert!(kernel_distances(&w, &Tensor::zeros(&[2, 2]), false).is_err());
    }

    #[test]
    fn normalized_distances_ignore_kernel_scale() {
        let w = Tensor::new(vec![2, 1, 1, 2], vec![1.0f32, 0.0, 0.0, 10.0]).unwrap();
        let d = layer_distances(&w, true).unwrap();
        // unit kernels (1,0) and (0,1), center (0.5, 0.5)
        assert!((d.values[0] - d.values[1]).abs() < 1e-15);
        assert!((d.values[0] - 0.5f64.sqrt()).abs() < 1e-15);
        // weights untouched
        assert_eq!(w.data(), &[1.0, 0.0, 0.0, 10.0]);
    }

    #[test]
    fn normalized_zero_kernel_stays_zero() {
        let w = Tensor::new(vec![2, 1, 1, 2], vec![0.0f32, 0.0, 3.0, 4.0]).unwrap();
        let d = layer_distances(&w, true).unwrap();
        // unit kernels (0,0) and (0.6,0.8), center (0.3,0.4)
        assert!((d.values[0] - 0.5).abs() < 1e-15);
        assert!((d.values[1] - 0.5).abs() < 1e-15);
    }
}
