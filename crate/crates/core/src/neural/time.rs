use crate::error::{Error, Result};

/// Sinusoidal embedding of `scale * t`: the first half holds
/// `sin(s * w_i)`, the second half `cos(s * w_i)`, `w_i = 10000^(-2i/dim)`.
pub fn time_embedding(t: f64, dim: usize, scale: f64) -> Result<Vec<f64>> {
    if dim % 2 != 0 {
        return Err(Error::Config(format!("time embedding dim must be even, got {dim}")));
    }
    let half = dim / 2;
    let s = scale * t;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = 10000f64.powf(-2.0 * i as f64 / dim as f64);
        out[i] = (s * freq).sin();
        out[half + i] = (s * freq).cos();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_time() {
        let e = time_embedding(0.0, 8, 1000.0).unwrap();
        assert_eq!(&e[..4], &[0.0; 4]);
        assert_eq!(&e[4..], &[1.0; 4]);
    }

    #[test]
    fn shape_and_odd_dim() {
        for t in [0.0, 0.3, 1.0] {
            assert_eq!(time_embedding(t, 32, 1000.0).unwrap().len(), 32);
        }
        assert!(time_embedding(0.5, 7, 1000.0).is_err());
    }

    #[test]
    fn continuity() {
        let a = time_embedding(0.37, 32, 1000.0).unwrap();
        let b = time_embedding(0.37 + 1e-9, 32, 1000.0).unwrap();
        let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-4, "{diff}");
    }
}
