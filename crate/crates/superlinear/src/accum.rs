//! Causal linear recurrence producing the representative stream K_a(t).
//!
//! A diagonal-decay recurrence is the minimal causal summarizer inside the
//! O(L) accumulation budget: H(t) = decay .* H(t-1) + input_proj X(t),
//! K_a(t) = key_proj H(t).

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

const MAGIC: &[u8; 8] = b"SLRECP01";

#[derive(Debug, Error)]
pub enum AccumError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("decay channel {channel} out of [0, 1]: {value}")]
    DecayOutOfRange { channel: usize, value: f64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad parameter file: {0}")]
    BadFormat(String),
}

/// Recurrence parameters for one head dimension d.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrenceParams {
    /// Per-channel retention in [0, 1].
    pub decay: Array1<f64>,
    /// Maps a token embedding to the state update, d x d.
    pub input_proj: Array2<f64>,
    /// Maps the state H(t) to K_a(t), d x d.
    pub key_proj: Array2<f64>,
}

impl RecurrenceParams {
    pub fn dim(&self) -> usize {
        self.decay.len()
    }

    pub fn validate(&self) -> Result<(), AccumError> {
        let d = self.decay.len();
        for (c, &v) in self.decay.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(AccumError::DecayOutOfRange { channel: c, value: v });
            }
        }
        for (name, m) in [("input_proj", &self.input_proj), ("key_proj", &self.key_proj)] {
            if m.dim() != (d, d) {
                return Err(AccumError::DimensionMismatch(format!(
                    "{name} is {:?}, expected ({d}, {d})",
                    m.dim()
                )));
            }
        }
        Ok(())
    }

    /// Stable random initialization: decay ~ U[0.8, 0.999], gaussian
    /// projections scaled by 1/sqrt(d).
    pub fn random(dim: usize, rng: &mut impl Rng) -> RecurrenceParams {
        let decay = Array1::from_shape_fn(dim, |_| rng.gen_range(0.8..0.999));
        let scale = 1.0 / (dim as f64).sqrt();
        let input_proj =
            Array2::from_shape_fn((dim, dim), |_| rng.sample::<f64, _>(StandardNormal) * scale);
        let key_proj =
            Array2::from_shape_fn((dim, dim), |_| rng.sample::<f64, _>(StandardNormal) * scale);
        RecurrenceParams { decay, input_proj, key_proj }
    }

    /// Identity projections with a uniform decay, handy for fixtures.
    pub fn identity(dim: usize, decay: f64) -> RecurrenceParams {
        RecurrenceParams {
            decay: Array1::from_elem(dim, decay),
            input_proj: Array2::eye(dim),
            key_proj: Array2::eye(dim),
        }
    }

    /// Serializes as a 16-byte header (8-byte magic, u64 LE dim) followed by
    /// little-endian f64s: decay, then input_proj and key_proj row-major.
    pub fn save(&self, path: &Path) -> Result<(), AccumError> {
        self.validate()?;
        let mut file = std::fs::File::create(path)?;
        file.write_all(MAGIC)?;
        file.write_all(&(self.dim() as u64).to_le_bytes())?;
        let mut dump = |vals: &mut dyn Iterator<Item = &f64>| -> std::io::Result<()> {
            for v in vals {
                file.write_all(&v.to_le_bytes())?;
            }
            Ok(())
        };
        dump(&mut self.decay.iter())?;
        dump(&mut self.input_proj.iter())?;
        dump(&mut self.key_proj.iter())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RecurrenceParams, AccumError> {
        let mut file = std::fs::File::open(path)?;
        let mut header = [0u8; 16];
        file.read_exact(&mut header)?;
        if &header[..8] != MAGIC {
            return Err(AccumError::BadFormat("wrong magic".to_string()));
        }
        let dim = u64::from_le_bytes(header[8..16].try_into().unwrap()) as usize;
        let mut body = Vec::new();
        file.read_to_end(&mut body)?;
        let expected = (dim + 2 * dim * dim) * 8;
        if body.len() != expected {
            return Err(AccumError::BadFormat(format!(
                "expected {expected} payload bytes, got {}",
                body.len()
            )));
        }
        let mut vals = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let decay = Array1::from_iter(vals.by_ref().take(dim));
        let input_proj =
            Array2::from_shape_vec((dim, dim), vals.by_ref().take(dim * dim).collect()).unwrap();
        let key_proj =
            Array2::from_shape_vec((dim, dim), vals.take(dim * dim).collect()).unwrap();
        let params = RecurrenceParams { decay, input_proj, key_proj };
        params.validate()?;
        Ok(params)
    }
}

/// Runs the recurrence over X (L x d) and returns K_a (L x d).
///
/// K_a(0..t) depends only on X(0..t); exactly one state update per position.
pub fn accumulate(x: &Array2<f64>, params: &RecurrenceParams) -> Result<Array2<f64>, AccumError> {
    params.validate()?;
    let d = params.dim();
    if x.ncols() != d {
        return Err(AccumError::DimensionMismatch(format!(
            "input has {} columns, parameters expect {d}",
            x.ncols()
        )));
    }
    let len = x.nrows();
    let mut out = Array2::zeros((len, d));
    let mut state = Array1::<f64>::zeros(d);
    for t in 0..len {
        let update = params.input_proj.dot(&x.row(t));
        for c in 0..d {
            state[c] = params.decay[c] * state[c] + update[c];
        }
        out.row_mut(t).assign(&params.key_proj.dot(&state));
    }
    Ok(out)
}

/// Identity stand-in for the K_a(t) = K(t) scoring mode.
pub fn passthrough_ka(k: &Array2<f64>) -> Array2<f64> {
    k.clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{gaussian_matrix, substream};

    #[test]
    fn zero_decay_is_memoryless() {
        let mut rng = substream(1, 0);
        let d = 4;
        let mut params = RecurrenceParams::random(d, &mut rng);
        params.decay.fill(0.0);
        let x = gaussian_matrix(6, d, &mut rng);
        let ka = accumulate(&x, &params).unwrap();
        for t in 0..6 {
            let direct = params.key_proj.dot(&params.input_proj.dot(&x.row(t)));
            for c in 0..d {
                assert!((ka[[t, c]] - direct[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unit_decay_identity_is_prefix_sum() {
        let mut rng = substream(2, 0);
        let d = 3;
        let params = RecurrenceParams::identity(d, 1.0);
        let x = gaussian_matrix(5, d, &mut rng);
        let ka = accumulate(&x, &params).unwrap();
        let mut run = Array1::<f64>::zeros(d);
        for t in 0..5 {
            run = run + x.row(t);
            for c in 0..d {
                assert!((ka[[t, c]] - run[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn causality_under_suffix_perturbation() {
        let mut rng = substream(3, 0);
        let d = 6;
        let params = {
            let mut p = RecurrenceParams::random(d, &mut rng);
            p.decay.fill(0.9);
            p
        };
        let x = gaussian_matrix(20, d, &mut rng);
        let base = accumulate(&x, &params).unwrap();
        let mut x2 = x.clone();
        for t in 11..20 {
            for c in 0..d {
                x2[[t, c]] += 5.0;
            }
        }
        let perturbed = accumulate(&x2, &params).unwrap();
        for t in 0..=10 {
            for c in 0..d {
                assert_eq!(base[[t, c]], perturbed[[t, c]], "t={t} c={c}");
            }
        }
    }

    #[test]
    fn linearity() {
        let mut rng = substream(4, 0);
        let d = 5;
        let params = RecurrenceParams::random(d, &mut rng);
        let x = gaussian_matrix(16, d, &mut rng);
        let y = gaussian_matrix(16, d, &mut rng);
        let (a, b) = (1.7, -0.4);
        let combo = accumulate(&(a * &x + b * &y), &params).unwrap();
        let parts = a * &accumulate(&x, &params).unwrap() + b * &accumulate(&y, &params).unwrap();
        for (u, v) in combo.iter().zip(parts.iter()) {
            let scale = u.abs().max(v.abs()).max(1.0);
            assert!((u - v).abs() / scale < 1e-12);
        }
    }

    #[test]
    fn passthrough_is_identity() {
        let mut rng = substream(5, 0);
        let k = gaussian_matrix(3, 4, &mut rng);
        assert_eq!(passthrough_ka(&k), k);
        let empty = Array2::<f64>::zeros((0, 4));
        assert_eq!(passthrough_ka(&empty), empty);
        let one = gaussian_matrix(1, 4, &mut rng);
        assert_eq!(passthrough_ka(&one), one);
    }

    #[test]
    fn decay_validation() {
        let mut p = RecurrenceParams::identity(2, 0.5);
        p.decay[1] = 1.5;
        assert!(matches!(
            p.validate(),
            Err(AccumError::DecayOutOfRange { channel: 1, .. })
        ));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let params = RecurrenceParams::identity(3, 0.5);
        let x = Array2::<f64>::zeros((4, 2));
        assert!(matches!(
            accumulate(&x, &params),
            Err(AccumError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn save_load_roundtrip_and_layout() {
        let mut rng = substream(6, 0);
        let params = RecurrenceParams::random(3, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.bin");
        params.save(&path).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 16 + (3 + 2 * 9) * 8);
        let first = f64::from_le_bytes(bytes[16..24].try_into().unwrap());
        assert_eq!(first, params.decay[0]);

        let loaded = RecurrenceParams::load(&path).unwrap();
        assert_eq!(loaded, params);
    }
}
