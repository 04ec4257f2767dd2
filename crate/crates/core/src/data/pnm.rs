//! Binary PGM (`P5`) and PPM (`P6`) codecs, maxval 255 only.

use super::Image;
use crate::error::{Error, Result};

fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset,
        msg: msg.into(),
    }
}

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    payload_start: usize,
}

fn skip_whitespace_and_comments(bytes: &[u8], mut pos: usize) -> usize {
    loop {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
        } else {
            return pos;
        }
    }
}

fn read_uint(bytes: &[u8], pos: usize, what: &str) -> Result<(usize, usize)> {
    let start = skip_whitespace_and_comments(bytes, pos);
    let mut end = start;
    while end < bytes.len() && bytes[end].is_ascii_digit() {
        end += 1;
    }
    if end == start {
        return Err(format_err(start, format!("expected {what}")));
    }
    let value = std::str::from_utf8(&bytes[start..end])
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or_else(|| format_err(start, format!("{what} out of range")))?;
    Ok((value, end))
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(format_err(0, "bad magic, expected P5 or P6")),
    };
    let (width, pos) = read_uint(bytes, 2, "width")?;
    let (height, pos) = read_uint(bytes, pos, "height")?;
    let (maxval, pos) = read_uint(bytes, pos, "maxval")?;
    if width == 0 || height == 0 {
        return Err(format_err(pos, "zero image dimension"));
    }
    if maxval != 255 {
        return Err(format_err(pos, format!("unsupported maxval {maxval}, expected 255")));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => {}
        _ => return Err(format_err(pos, "expected single whitespace after maxval")),
    }
    Ok(Header {
        channels,
        width,
        height,
        payload_start: pos + 1,
    })
}

/// Decodes a binary PGM or PPM; sample `p` maps to `p / 255`.
pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    let h = parse_header(bytes)?;
    let plane = h.width * h.height;
    let need = plane * h.channels;
    let payload = &bytes[h.payload_start..];
    if payload.len() < need {
        return Err(format_err(
            bytes.len(),
            format!("truncated payload: need {need} bytes, have {}", payload.len()),
        ));
    }
    let mut pixels = vec![0.0; need];
    for (i, &b) in payload[..need].iter().enumerate() {
        let (px, c) = (i / h.channels, i % h.channels);
        pixels[c * plane + px] = b as f64 / 255.0;
    }
    Image::new(h.channels, h.height, h.width, pixels)
}

/// Encodes as `P5` (1 channel) or `P6` (3 channels) with value `round(p·255)`.
pub fn encode_image(img: &Image) -> Vec<u8> {
    let magic = if img.channels() == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    let plane = img.width() * img.height();
    let px = img.pixels();
    out.reserve(px.len());
    for i in 0..plane {
        for c in 0..img.channels() {
            out.push(to_byte(px[c * plane + i]));
        }
    }
    out
}

pub fn to_byte(p: f64) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_white_gray_pixel() {
        let img = decode_image(b"P5\n1 1\n255\n\xff").unwrap();
        assert_eq!(img.channels(), 1);
        assert_eq!(img.pixels(), &[1.0]);
    }

    #[test]
    fn two_rgb_pixels() {
        let img = decode_image(b"P6\n2 1\n255\n\x00\x00\x00\xff\xff\xff").unwrap();
        assert_eq!(img.channels(), 3);
        for c in 0..3 {
            assert_eq!(img.get(c, 0, 0), 0.0);
            assert_eq!(img.get(c, 0, 1), 1.0);
        }
    }

    #[test]
    fn header_comments_are_skipped() {
        let img = decode_image(b"P5 # made by hand\n2 # width\n1\n255\n\x00\x80").unwrap();
        assert_eq!(img.dims(), (1, 2));
        assert_eq!(img.get(0, 0, 1), 128.0 / 255.0);
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        match decode_image(b"P3\n1 1\n255\n0") {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_payload() {
        let err = decode_image(b"P6\n2 2\n255\n\x00\x00\x00").unwrap_err();
        match err {
            Error::Format { offset, msg } => {
                assert_eq!(offset, 14);
                assert!(msg.contains("truncated"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_maxval() {
        let err = decode_image(b"P5\n1 1\n65535\n\x00\x00").unwrap_err();
        assert!(matches!(err, Error::Format { offset: 12, .. }), "{err:?}");
    }
}
