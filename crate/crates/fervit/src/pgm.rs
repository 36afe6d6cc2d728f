//! Binary PGM (P5) and PPM (P6) image IO, dependency-free and byte-exact.
//!
//! Readers accept maxval 255 only and tolerate `#` comments in the header;
//! the writer emits a canonical header so written files are reproducible
//! byte for byte.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::io::Write;
use std::path::Path;

/// Write an 8-bit grayscale P5 image.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::contract(
            "write_pgm",
            format!("{} pixels for {width}x{height}", pixels.len()),
        ));
    }
    let mut file = std::fs::File::create(path)?;
    write!(file, "P5\n{width} {height}\n255\n")?;
    file.write_all(pixels)?;
    Ok(())
}

/// Min-max normalize to the full 0..=255 range. A constant map comes back
/// as all zeros.
pub fn normalize_to_bytes(values: &[f64]) -> Vec<u8> {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max - min).is_normal() || max <= min {
        return vec![0; values.len()];
    }
    values
        .iter()
        .map(|v| (255.0 * (v - min) / (max - min)).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Read a P5 or P6 image as a [3, H, W] tensor with values in [0, 1];
/// grayscale input is replicated across the three channels.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let data = std::fs::read(path)?;
    let mut pos = 0usize;

    let magic = next_token(&data, &mut pos)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => {
            return Err(Error::format(
                "image",
                format!("unsupported magic '{other}', expected P5 or P6"),
            ))
        }
    };
    let width: usize = parse_header_int(&data, &mut pos)?;
    let height: usize = parse_header_int(&data, &mut pos)?;
    let maxval: usize = parse_header_int(&data, &mut pos)?;
    if maxval != 255 {
        return Err(Error::format("image", format!("maxval {maxval}, only 255 supported")));
    }
    // Exactly one whitespace byte separates the header from pixel data.
    pos += 1;
    let expected = width * height * channels;
    if data.len() < pos + expected {
        return Err(Error::format("image", "truncated pixel data"));
    }
    let raw = &data[pos..pos + expected];

    let mut values = vec![0.0f64; 3 * width * height];
    match channels {
        1 => {
            for (i, &b) in raw.iter().enumerate() {
                let v = b as f64 / 255.0;
                values[i] = v;
                values[width * height + i] = v;
                values[2 * width * height + i] = v;
            }
        }
        _ => {
            for i in 0..width * height {
                for c in 0..3 {
                    values[c * width * height + i] = raw[i * 3 + c] as f64 / 255.0;
                }
            }
        }
    }
    Tensor::from_vec(values, &[3, height, width])
}

fn next_token(data: &[u8], pos: &mut usize) -> Result<String> {
    // Skip whitespace and # comments.
    loop {
        while *pos < data.len() && data[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < data.len() && data[*pos] == b'#' {
            while *pos < data.len() && data[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < data.len() && !data[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format("image", "unexpected end of header"));
    }
    String::from_utf8(data[start..*pos].to_vec())
        .map_err(|_| Error::format("image", "non-ASCII header"))
}

fn parse_header_int(data: &[u8], pos: &mut usize) -> Result<usize> {
    let tok = next_token(data, pos)?;
    tok.parse()
        .map_err(|_| Error::format("image", format!("bad header integer '{tok}'")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_write_read_roundtrip() {
        let dir = std::env::temp_dir().join("fervit_pgm");
        std::fs::create_dir_all(&dir).unwrap();
        let file = dir.join("test.pgm");
        let pixels: Vec<u8> = (0..12).map(|i| (i * 20) as u8).collect();
        write_pgm(&file, 4, 3, &pixels).unwrap();

        let img = read_image(&file).unwrap();
        assert_eq!(img.shape(), &[3, 3, 4]);
        for (i, &p) in pixels.iter().enumerate() {
            let expect = p as f64 / 255.0;
            for c in 0..3 {
                assert!((img.values()[c * 12 + i] - expect).abs() < 1e-12);
            }
        }
        std::fs::remove_file(&file).unwrap();
    }

    #[test]
    fn ppm_reads_three_channels() {
        let dir = std::env::temp_dir().join("fervit_ppm");
        std::fs::create_dir_all(&dir).unwrap();
        let file = dir.join("test.ppm");
        let mut bytes = b"P6\n# comment line\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 255, 0]);
        std::fs::write(&file, bytes).unwrap();

        let img = read_image(&file).unwrap();
        assert_eq!(img.shape(), &[3, 1, 2]);
        assert_eq!(img.values()[0], 1.0); // R of pixel 0
        assert_eq!(img.values()[2], 0.0); // G of pixel 0
        assert_eq!(img.values()[3], 1.0); // G of pixel 1
        std::fs::remove_file(&file).unwrap();
    }

    #[test]
    fn normalization_spans_full_byte_range() {
        let bytes = normalize_to_bytes(&[0.2, 0.5, 1.4]);
        assert_eq!(bytes.first(), Some(&0));
        assert_eq!(bytes.last(), Some(&255));
        // Constant maps collapse to zero rather than dividing by zero.
        assert_eq!(normalize_to_bytes(&[3.3, 3.3]), vec![0, 0]);
    }

    #[test]
    fn bad_magic_and_truncation_are_format_errors() {
        let dir = std::env::temp_dir().join("fervit_pgm_bad");
        std::fs::create_dir_all(&dir).unwrap();
        let file = dir.join("bad.pgm");
        std::fs::write(&file, b"P4\n1 1\n255\n\x00").unwrap();
        assert!(matches!(read_image(&file), Err(Error::Format { .. })));
        std::fs::write(&file, b"P5\n4 4\n255\n\x00\x00").unwrap();
        assert!(matches!(read_image(&file), Err(Error::Format { .. })));
        std::fs::remove_file(&file).unwrap();
    }
}
