//! Binary PPM rendering of scene latents.

use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("expected a [C, H, W] latent with C >= 1, got shape {0:?}")]
    Shape(Vec<usize>),
    #[error("reference std must be positive, got {0}")]
    Scale(f64),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Map `[-3 sigma_ref, 3 sigma_ref]` onto `[0, 255]`, clamped.
pub fn quantize(v: f64, sigma_ref: f64) -> u8 {
    let x = (v + 3.0 * sigma_ref) / (6.0 * sigma_ref) * 255.0;
    x.round().clamp(0.0, 255.0) as u8
}

/// P6 bytes: the first three channels as RGB. A one- or two-channel latent
/// repeats its last channel.
pub fn encode_ppm(z0: &Tensor, sigma_ref: f64) -> Result<Vec<u8>, ImageError> {
    let s = z0.shape();
    if s.len() != 3 || s[0] == 0 {
        return Err(ImageError::Shape(s.to_vec()));
    }
    if !(sigma_ref > 0.0 && sigma_ref.is_finite()) {
        return Err(ImageError::Scale(sigma_ref));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    let d = z0.data();
    for i in 0..h * w {
        for ch in 0..3 {
            out.push(quantize(d[ch.min(c - 1) * h * w + i], sigma_ref));
        }
    }
    Ok(out)
}

pub fn emit_image(z0: &Tensor, sigma_ref: f64, path: &Path) -> Result<(), ImageError> {
    let bytes = encode_ppm(z0, sigma_ref)?;
    std::fs::write(path, bytes).map_err(|source| ImageError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    // Minimal P6 reader: header tokens split on whitespace, then raw bytes.
    fn parse(bytes: &[u8]) -> (usize, usize, Vec<u8>) {
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap().to_string());
        }
        assert_eq!(fields[0], "P6");
        assert_eq!(fields[3], "255");
        (
            fields[1].parse().unwrap(),
            fields[2].parse().unwrap(),
            bytes[pos + 1..].to_vec(),
        )
    }

    #[test]
    fn zero_latent_is_mid_gray() {
        let (w, h, px) = parse(&encode_ppm(&Tensor::zeros(&[4, 3, 5]), 1.0).unwrap());
        assert_eq!((w, h), (5, 3));
        assert_eq!(px.len(), 45);
        assert!(px.iter().all(|&p| p == 128));
    }

    #[test]
    fn saturated_channel_is_full_plane() {
        let sigma = 0.7;
        let mut data = vec![0.0; 3 * 4];
        data[4..8].iter_mut().for_each(|v| *v = 3.0 * sigma);
        let z = Tensor::new(&[3, 2, 2], data).unwrap();
        let (_, _, px) = parse(&encode_ppm(&z, sigma).unwrap());
        assert!(px.chunks(3).all(|rgb| rgb == [128, 255, 128]));
    }

    #[test]
    fn round_trip_recovers_quantized_values() {
        let z = Tensor::from_fn(&[3, 4, 6], |i| ((i * 37) % 23) as f64 / 3.0 - 3.5);
        let bytes = encode_ppm(&z, 1.2).unwrap();
        assert_eq!(bytes, encode_ppm(&z, 1.2).unwrap());
        let (w, h, px) = parse(&bytes);
        for i in 0..w * h {
            for c in 0..3 {
                assert_eq!(px[3 * i + c], quantize(z.data()[c * w * h + i], 1.2));
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.ppm");
        emit_image(&z, 1.2, &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes);
        assert!(emit_image(&z, 1.2, &dir.path().join("missing/z.ppm")).is_err());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(encode_ppm(&Tensor::zeros(&[4, 4]), 1.0).is_err());
        assert!(encode_ppm(&Tensor::zeros(&[1, 2, 2]), 0.0).is_err());
    }
}
