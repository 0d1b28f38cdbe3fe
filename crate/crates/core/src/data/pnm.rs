//! Binary PGM (P5) and PPM (P6) images with maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::dataset::Image;

fn parse_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Reads the next whitespace-separated header token, skipping `#` comments.
fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| &bytes[start..*pos])
}

/// Decodes P5/P6 bytes into an image scaled to `[0, 1]`.
pub fn decode_pnm(bytes: &[u8], path: &Path) -> Result<Image> {
    let mut pos = 0;
    let magic = token(bytes, &mut pos).ok_or_else(|| parse_err(path, "missing magic"))?;
    let channels = match magic {
        b"P5" => 1,
        b"P6" => 3,
        other => {
            return Err(parse_err(
                path,
                format!("unsupported magic '{}'", String::from_utf8_lossy(other)),
            ))
        }
    };
    let mut num = |what: &str| -> Result<usize> {
        let t = token(bytes, &mut pos).ok_or_else(|| parse_err(path, format!("missing {what}")))?;
        std::str::from_utf8(t)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| parse_err(path, format!("bad {what} '{}'", String::from_utf8_lossy(t))))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if width == 0 || height == 0 {
        return Err(parse_err(path, "zero image dimension"));
    }
    if maxval != 255 {
        return Err(parse_err(path, format!("maxval {maxval}, only 255 is supported")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(parse_err(path, "missing header terminator"));
    }
    pos += 1;
    let n = width * height * channels;
    let payload = bytes
        .get(pos..pos + n)
        .ok_or_else(|| parse_err(path, format!("payload has {} of {n} bytes", bytes.len() - pos)))?;
    // Interleaved RGB on disk, channel-major in memory.
    let mut pixels = vec![0.0f32; n];
    for (i, &b) in payload.iter().enumerate() {
        let (p, c) = (i / channels, i % channels);
        pixels[c * width * height + p] = b as f32 / 255.0;
    }
    Image::new(channels, height, width, pixels)
}

pub fn read_pnm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes, path)
}

/// Encodes a 1- or 3-channel image; values are clamped to `[0, 1]` and
/// rounded to the nearest level.
pub fn encode_pnm(image: &Image) -> Result<Vec<u8>> {
    let magic = match image.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::Dataset(format!("cannot encode {c}-channel image"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width, image.height).into_bytes();
    let plane = image.width * image.height;
    for p in 0..plane {
        for c in 0..image.channels {
            let v = image.pixels[c * plane + p].clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn write_pnm(path: &Path, image: &Image) -> Result<()> {
    fs::write(path, encode_pnm(image)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_header_with_comments() {
        let mut bytes = b"P5\n# made by hand\n2 2\n255\n".to_vec();
        bytes.extend([0u8, 255, 51, 102]);
        let img = decode_pnm(&bytes, Path::new("x.pgm")).unwrap();
        assert_eq!(img.shape(), [1, 2, 2]);
        assert_eq!(img.pixels, vec![0.0, 1.0, 0.2, 0.4]);
    }

    #[test]
    fn ppm_is_deinterleaved() {
        let mut bytes = b"P6 1 2 255\n".to_vec();
        bytes.extend([255u8, 0, 0, 0, 255, 0]);
        let img = decode_pnm(&bytes, Path::new("x.ppm")).unwrap();
        assert_eq!(img.pixels, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn malformed_headers_name_the_file() {
        for bad in [
            &b"P2 1 1 255\n\0"[..],
            b"P5 1 1 65535\n\0\0",
            b"P5 x 1 255\n\0",
            b"P5 2 2 255\n\0",
        ] {
            match decode_pnm(bad, Path::new("broken.pgm")) {
                Err(Error::Parse { path, .. }) => assert_eq!(path, Path::new("broken.pgm")),
                other => panic!("expected parse error, got {other:?}"),
            }
        }
    }

    #[test]
    fn encode_decode_round_trip_on_byte_levels() {
        let pixels: Vec<f32> = (0..12).map(|i| (i * 20) as f32 / 255.0).collect();
        let img = Image::new(3, 2, 2, pixels).unwrap();
        let back = decode_pnm(&encode_pnm(&img).unwrap(), Path::new("t.ppm")).unwrap();
        assert_eq!(back, img);
    }
}
