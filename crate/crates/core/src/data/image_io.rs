//! 8-bit PNG (grayscale or RGB) and binary PPM (P6) decoding and encoding.
//!
//! Decoded pixels are row-major from the top-left, channels interleaved
//! (`R, G, B` for color images).

use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    /// 1 (gray) or 3 (RGB).
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl RawImage {
    /// Floating point copy scaled to `[0, 1]`.
    pub fn to_image(&self) -> Image {
        let data = self.pixels.iter().map(|&p| p as f32 / 255.0).collect();
        Image::new(self.height, self.width, self.channels, data).expect("validated at decode")
    }
}

pub fn decode_image(path: &Path) -> Result<RawImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bytes(&bytes)
}

pub fn decode_bytes(bytes: &[u8]) -> Result<RawImage> {
    if bytes.starts_with(PNG_MAGIC) {
        decode_png(bytes)
    } else if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else {
        let magic: Vec<String> = bytes.iter().take(4).map(|b| format!("{b:02x}")).collect();
        Err(Error::UnsupportedFormat { magic: magic.join(" ") })
    }
}

fn decode_png(bytes: &[u8]) -> Result<RawImage> {
    let fmt = |e: png::DecodingError| Error::Format(format!("png: {e}"));
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(fmt)?;
    let info = reader.info();
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format(format!(
            "png bit depth {:?} not supported",
            info.bit_depth
        )));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(Error::Format(format!("png color type {other:?} not supported"))),
    };
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format("png too large".into()))?;
    let mut buf = vec![0; size];
    let frame = reader.next_frame(&mut buf).map_err(fmt)?;
    let (w, h) = (frame.width as usize, frame.height as usize);
    buf.truncate(frame.buffer_size());
    if buf.len() != w * h * channels {
        return Err(Error::Format("png line padding not supported".into()));
    }
    Ok(RawImage {
        height: h,
        width: w,
        channels,
        pixels: buf,
    })
}

/// Binary PPM: `P6 <w> <h> <maxval>` then one whitespace byte and raw RGB.
fn decode_ppm(bytes: &[u8]) -> Result<RawImage> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::Format("ppm header truncated".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("ppm header field is not a number".into()))?;
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(Error::Format("ppm has zero size".into()));
    }
    if maxval != 255 {
        return Err(Error::Format(format!("ppm maxval {maxval} not supported")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format("ppm header truncated".into()));
    }
    pos += 1;
    let need = w * h * 3;
    let body = &bytes[pos..];
    if body.len() < need {
        return Err(Error::Format(format!("ppm truncated: {} of {need} bytes", body.len())));
    }
    Ok(RawImage {
        height: h,
        width: w,
        channels: 3,
        pixels: body[..need].to_vec(),
    })
}

pub fn encode_png(width: usize, height: usize, channels: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    let color = match channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(Error::Format(format!("cannot write {c}-channel png"))),
    };
    if pixels.len() != width * height * channels {
        return Err(Error::shape("encode_png", &[height, width, channels], &[pixels.len()]));
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let fmt = |e: png::EncodingError| Error::Format(format!("png: {e}"));
        let mut writer = enc.write_header().map_err(fmt)?;
        writer.write_image_data(pixels).map_err(fmt)?;
    }
    Ok(out)
}

pub fn write_png(path: &Path, width: usize, height: usize, channels: usize, pixels: &[u8]) -> Result<()> {
    let bytes = encode_png(width, height, channels, pixels)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_ppm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height * 3 {
        return Err(Error::shape("encode_ppm", &[height, width, 3], &[pixels.len()]));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ppm_fixture_bytes() {
        let mut bytes = b"P6\n# fixture\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 255, 0, 0, 0, 255, 10, 20, 30]);
        let img = decode_bytes(&bytes).unwrap();
        assert_eq!((img.height, img.width, img.channels), (2, 2, 3));
        assert_eq!(img.pixels, vec![255, 0, 0, 0, 255, 0, 0, 0, 255, 10, 20, 30]);
        let f = img.to_image();
        assert_eq!(f.at(1, 1, 2), 30.0 / 255.0);
    }

    #[test]
    fn text_ppm_is_unsupported() {
        let err = decode_bytes(b"P3\n1 1\n255\n0 0 0\n").unwrap_err();
        match err {
            Error::UnsupportedFormat { magic } => assert!(magic.starts_with("50 33")),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn truncated_inputs_are_format_errors() {
        let mut bytes = b"P6 2 2 255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3]);
        assert!(matches!(decode_bytes(&bytes), Err(Error::Format(_))));
        let png = encode_png(3, 3, 1, &[7; 9]).unwrap();
        assert!(matches!(decode_bytes(&png[..png.len() - 20]), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn png_round_trip(w in 1usize..9, h in 1usize..9, gray in any::<bool>(), seed in any::<u64>()) {
            let c = if gray { 1 } else { 3 };
            let pixels: Vec<u8> = (0..w * h * c).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 7) as u8).collect();
            let back = decode_bytes(&encode_png(w, h, c, &pixels).unwrap()).unwrap();
            prop_assert_eq!((back.width, back.height, back.channels), (w, h, c));
            prop_assert_eq!(back.pixels, pixels);
        }

        #[test]
        fn ppm_round_trip(w in 1usize..9, h in 1usize..9, seed in any::<u64>()) {
            let pixels: Vec<u8> = (0..w * h * 3).map(|i| (seed.wrapping_mul(i as u64 + 3) >> 11) as u8).collect();
            let back = decode_bytes(&encode_ppm(w, h, &pixels).unwrap()).unwrap();
            prop_assert_eq!(back.pixels, pixels);
        }
    }
}
