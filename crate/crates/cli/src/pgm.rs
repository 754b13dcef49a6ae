//! Binary greymap (P5) output of BEV magnitude maps.

use std::io::{self, Write};
use std::path::Path;

use stbev_core::geometry::BevFeature;

/// Per-cell L2 norm over channels, laid out with row `j` and column `i`.
pub fn magnitude(feature: &BevFeature) -> (usize, usize, Vec<f64>) {
    let spec = feature.spec();
    let (w, h) = (spec.cells_x, spec.cells_y);
    let mut out = vec![0.0; w * h];
    for i in 0..w {
        for j in 0..h {
            out[j * w + i] = feature.cell(i, j).iter().map(|v| v * v).sum::<f64>().sqrt();
        }
    }
    (w, h, out)
}

/// Min-max normalizes `values` to `0..=255`; a constant map becomes all
/// zeros. Returns the bytes with the `(min, max)` used.
pub fn quantize(values: &[f64]) -> (Vec<u8>, f64, f64) {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() {
        return (Vec::new(), 0.0, 0.0);
    }
    let span = max - min;
    let bytes = values
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - min) / span * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect();
    (bytes, min, max)
}

pub fn encode(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Writes the magnitude map of `feature` and returns its `(min, max)`.
pub fn write_magnitude(path: &Path, feature: &BevFeature) -> io::Result<(f64, f64)> {
    let (w, h, mag) = magnitude(feature);
    let (bytes, min, max) = quantize(&mag);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(w, h, &bytes))?;
    Ok((min, max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use stbev_core::geometry::BevSpec;

    /// Parses a P5 file produced by `encode`.
    pub fn decode(data: &[u8]) -> Option<(usize, usize, Vec<u8>)> {
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < data.len() && data[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < data.len() && !data[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return None;
            }
            fields.push(std::str::from_utf8(&data[start..pos]).ok()?.to_string());
        }
        if fields[0] != "P5" || fields[3] != "255" {
            return None;
        }
        let (w, h): (usize, usize) = (fields[1].parse().ok()?, fields[2].parse().ok()?);
        let pixels = data.get(pos + 1..)?;
        (pixels.len() == w * h).then(|| (w, h, pixels.to_vec()))
    }

    #[test]
    fn quantize_cases() {
        assert_eq!(quantize(&[1.0, 3.0, 2.0]), (vec![0, 255, 128], 1.0, 3.0));
        assert_eq!(quantize(&[0.0; 4]), (vec![0; 4], 0.0, 0.0));
    }

    #[test]
    fn encode_decode_round_trip() {
        let px = vec![0, 10, 255, 32, 9, 1];
        let bytes = encode(3, 2, &px);
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(decode(&bytes), Some((3, 2, px)));
        assert_eq!(decode(b"P2\n1 1\n255\n\x00"), None);
    }

    #[test]
    fn magnitude_layout() {
        let spec = BevSpec::new(3, 2, 1.0, [0.0, 0.0], vec![1.0]).unwrap();
        let mut f = BevFeature::zeros(&spec, 2);
        f.cell_mut(2, 1).copy_from_slice(&[3.0, 4.0]);
        let (w, h, m) = magnitude(&f);
        assert_eq!((w, h), (3, 2));
        assert_eq!(m[5], 5.0);
        assert_eq!(m.iter().filter(|&&v| v != 0.0).count(), 1);
    }
}
