use std::f64::consts::PI;

use crate::error::{LabError, Result};

/// Sine/cosine features of a scalar on an octave frequency ladder
/// `pi * 2^k`, `k = 0..dim/2`.
///
/// Layout is `[sin(w_0 x), .., sin(w_{h-1} x), cos(w_0 x), .., cos(w_{h-1} x)]`.
pub fn sinusoidal_embed(x: f64, dim: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(dim);
    sinusoidal_embed_into(x, dim, &mut out)?;
    Ok(out)
}

/// Appends the embedding of `x` to `out`.
pub fn sinusoidal_embed_into(x: f64, dim: usize, out: &mut Vec<f64>) -> Result<()> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(LabError::config(format!(
            "embedding dim must be even and positive, got {dim}"
        )));
    }
    if !x.is_finite() {
        return Err(LabError::NonFinite(format!("embedding input {x}")));
    }
    let half = dim / 2;
    let start = out.len();
    out.resize(start + dim, 0.0);
    let mut freq = PI;
    for k in 0..half {
        let a = freq * x;
        out[start + k] = a.sin();
        out[start + half + k] = a.cos();
        freq *= 2.0;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn exact_points() {
        assert_eq!(sinusoidal_embed(0.0, 4).unwrap(), vec![0.0, 0.0, 1.0, 1.0]);
        assert!(close(&sinusoidal_embed(1.0, 4).unwrap(), &[0.0, 0.0, -1.0, 1.0]));
        assert!(close(&sinusoidal_embed(0.5, 4).unwrap(), &[1.0, 0.0, 0.0, -1.0]));
    }

    #[test]
    fn odd_dim_rejected() {
        assert!(sinusoidal_embed(0.3, 3).is_err());
        assert!(sinusoidal_embed(0.3, 0).is_err());
    }

    #[test]
    fn fundamental_has_period_two() {
        for &x in &[0.0, 0.125, 0.3, 0.77] {
            let a = sinusoidal_embed(x, 8).unwrap();
            let b = sinusoidal_embed(x + 2.0, 8).unwrap();
            assert!((a[0] - b[0]).abs() < 1e-12);
            assert!((a[4] - b[4]).abs() < 1e-12);
        }
    }
}
