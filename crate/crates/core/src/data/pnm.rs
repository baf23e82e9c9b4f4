//! Binary Netpbm images: PGM (`P5`, one channel) and PPM (`P6`, three channels).
//!
//! Only 8-bit files (maxval ≤ 255) are supported. Samples map to `[0, 1]`
//! as `byte / maxval`; writing rounds `value * 255` after clamping.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Encodes a 1- or 3-channel `C×H×W` image with values in `[0, 1]`.
pub fn encode<S: Scalar>(image: &Tensor<S>) -> Result<Vec<u8>> {
    let (c, h, w) = image.chw()?;
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::shape("save_ppm", format!("{c} channels; expected 1 or 3"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let px = h * w;
    let v = image.values();
    out.reserve(c * px);
    for i in 0..px {
        for ch in 0..c {
            let x = v[ch * px + i].as_f64().clamp(0.0, 1.0);
            out.push((x * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn save<S: Scalar>(image: &Tensor<S>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(image)?)?;
    Ok(())
}

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn parse_header(b: &[u8]) -> Result<Header> {
    let fail = |offset: usize, reason: &str| Error::ImageFormat {
        offset,
        reason: reason.into(),
    };
    if b.len() < 2 || b[0] != b'P' {
        return Err(fail(0, "missing `P` magic"));
    }
    let channels = match b[1] {
        b'5' => 1,
        b'6' => 3,
        _ => return Err(fail(1, "only binary P5/P6 are supported")),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match b.get(pos) {
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while b.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(fail(pos, "truncated header")),
            }
        }
        let start = pos;
        while b.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if pos == start {
            return Err(fail(pos, "expected a decimal number"));
        }
        *field = std::str::from_utf8(&b[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fail(start, "number out of range"))?;
    }
    match b.get(pos) {
        Some(c) if c.is_ascii_whitespace() => pos += 1,
        _ => return Err(fail(pos, "expected one whitespace byte before pixel data")),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(fail(2, "zero image dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(fail(pos - 1, "maxval must be in 1..=255"));
    }
    Ok(Header {
        channels,
        width,
        height,
        maxval,
        data_start: pos,
    })
}

pub fn decode<S: Scalar>(bytes: &[u8]) -> Result<Tensor<S>> {
    let h = parse_header(bytes)?;
    let px = h.width * h.height;
    let need = px * h.channels;
    let data = &bytes[h.data_start..];
    if data.len() < need {
        return Err(Error::ImageFormat {
            offset: bytes.len(),
            reason: format!("pixel data truncated: need {need} bytes, have {}", data.len()),
        });
    }
    let scale = 1.0 / h.maxval as f64;
    let mut v = vec![S::zero(); need];
    for i in 0..px {
        for ch in 0..h.channels {
            v[ch * px + i] = S::of(data[i * h.channels + ch] as f64 * scale);
        }
    }
    Tensor::new(vec![h.channels, h.height, h.width], v)
}

pub fn load<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn black_2x2_rgb_payload() {
        let b = encode(&Tensor::<f64>::zeros(&[3, 2, 2])).unwrap();
        let header = b"P6\n2 2\n255\n";
        assert_eq!(&b[..header.len()], header);
        assert_eq!(&b[header.len()..], &[0u8; 12]);
    }

    #[test]
    fn header_errors_carry_offsets() {
        let err = decode::<f64>(b"P7\n1 1\n255\n\0").unwrap_err();
        assert!(matches!(err, Error::ImageFormat { offset: 1, .. }), "{err}");
        let err = decode::<f64>(b"P5\n1 x\n255\n\0").unwrap_err();
        assert!(matches!(err, Error::ImageFormat { offset: 5, .. }), "{err}");
        let err = decode::<f64>(b"P5\n2 2\n255\n\0\0").unwrap_err();
        assert!(matches!(err, Error::ImageFormat { .. }), "{err}");
    }

    #[test]
    fn comments_in_header() {
        let t = decode::<f64>(b"P5\n# made by hand\n1 1\n255\n\xff").unwrap();
        assert_eq!(t.values(), &[1.0]);
    }

    proptest! {
        #[test]
        fn round_trip_within_quantization(c in prop::sample::select(vec![1usize, 3]), h in 1usize..6, w in 1usize..6, seed: u64) {
            let mut rng = crate::rng::Rng::seed(seed);
            let img = Tensor::<f64>::uniform(&[c, h, w], 0.0, 1.0, &mut rng);
            let back: Tensor<f64> = decode(&encode(&img).unwrap()).unwrap();
            prop_assert_eq!(back.shape(), img.shape());
            prop_assert!(back.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-12);
        }
    }
}
