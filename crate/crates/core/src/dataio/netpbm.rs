//! Binary Netpbm: PPM (`P6`) colour images and PGM (`P5`) grey masks, maxval 255.

use std::path::Path;

use super::DataError;
use crate::metrics::{ClassSet, LabelMask};
use crate::tensor::{Shape, Tensor};

/// Decoded 8-bit raster, interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub bytes: Vec<u8>,
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|e| DataError::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| DataError::io(path, e))
}

struct Header {
    width: usize,
    height: usize,
    maxval: usize,
    offset: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2], path: &Path) -> Result<Header, DataError> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            expected: String::from_utf8_lossy(magic).into_owned(),
            found,
        });
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // Whitespace and `#` comments may separate header fields.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let name = ["width", "height", "maxval"][i];
        if start == pos {
            return Err(DataError::BadHeader {
                path: path.to_path_buf(),
                detail: format!("expected {name}"),
            });
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("digits are ASCII");
        *field = text.parse().map_err(|_| DataError::BadHeader {
            path: path.to_path_buf(),
            detail: format!("{name} {text} out of range"),
        })?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(DataError::BadHeader {
            path: path.to_path_buf(),
            detail: "missing whitespace after maxval".into(),
        });
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(DataError::BadHeader {
            path: path.to_path_buf(),
            detail: format!("empty raster {width}x{height}"),
        });
    }
    if maxval != 255 {
        return Err(DataError::BadMaxval {
            path: path.to_path_buf(),
            maxval,
        });
    }
    Ok(Header {
        width,
        height,
        maxval,
        offset: pos + 1,
    })
}

fn decode(bytes: &[u8], magic: &[u8; 2], channels: usize, path: &Path) -> Result<Raster, DataError> {
    let h = parse_header(bytes, magic, path)?;
    debug_assert_eq!(h.maxval, 255);
    let expected = h.width * h.height * channels;
    let payload = &bytes[h.offset..];
    if payload.len() < expected {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected,
            got: payload.len(),
        });
    }
    Ok(Raster {
        width: h.width,
        height: h.height,
        channels,
        bytes: payload[..expected].to_vec(),
    })
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Raster, DataError> {
    decode(bytes, b"P6", 3, path)
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Raster, DataError> {
    decode(bytes, b"P5", 1, path)
}

pub fn encode(r: &Raster) -> Vec<u8> {
    let magic = if r.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", r.width, r.height).into_bytes();
    out.extend_from_slice(&r.bytes);
    out
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Raster, DataError> {
    let path = path.as_ref();
    decode_ppm(&read_file(path)?, path)
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Raster, DataError> {
    let path = path.as_ref();
    decode_pgm(&read_file(path)?, path)
}

pub fn write_raster(path: impl AsRef<Path>, r: &Raster) -> Result<(), DataError> {
    write_file(path.as_ref(), &encode(r))
}

/// Channels-first `(1, 3, H, W)` image with every byte divided by 255.
pub fn raster_to_tensor(r: &Raster) -> Tensor<f32> {
    Tensor::from_fn(Shape::new(1, r.channels, r.height, r.width), |_, c, y, x| {
        r.bytes[(y * r.width + x) * r.channels + c] as f32 / 255.0
    })
}

/// Inverse of [`raster_to_tensor`]: values are clamped to [0, 1] and rounded.
pub fn tensor_to_raster(t: &Tensor<f32>) -> Raster {
    let s = t.shape();
    assert!(s.n == 1 && (s.c == 3 || s.c == 1), "expected a single 1- or 3-channel image");
    let mut bytes = vec![0u8; s.numel()];
    for c in 0..s.c {
        for y in 0..s.h {
            for x in 0..s.w {
                let v = t.at(0, c, y, x).clamp(0.0, 1.0);
                bytes[(y * s.w + x) * s.c + c] = (v * 255.0).round() as u8;
            }
        }
    }
    Raster {
        width: s.w,
        height: s.h,
        channels: s.c,
        bytes,
    }
}

pub fn load_image_ppm(path: impl AsRef<Path>) -> Result<Tensor<f32>, DataError> {
    Ok(raster_to_tensor(&read_ppm(path)?))
}

pub fn save_image_ppm(path: impl AsRef<Path>, image: &Tensor<f32>) -> Result<(), DataError> {
    write_raster(path, &tensor_to_raster(image))
}

/// Reads a class-index mask and validates every value against `classes`.
pub fn load_mask_pgm(path: impl AsRef<Path>, classes: &ClassSet) -> Result<LabelMask, DataError> {
    let path = path.as_ref();
    let r = read_pgm(path)?;
    validate_labels(&r.bytes, r.width, classes, path)?;
    Ok(LabelMask::new(1, r.height, r.width, r.bytes))
}

pub(crate) fn validate_labels(labels: &[u8], width: usize, classes: &ClassSet, path: &Path) -> Result<(), DataError> {
    let k = classes.len();
    if let Some(i) = labels
        .iter()
        .position(|&v| v != classes.ignore_label && v as usize >= k)
    {
        return Err(DataError::LabelOutOfRange {
            path: path.to_path_buf(),
            x: i % width,
            y: i / width,
            value: labels[i],
            k,
        });
    }
    Ok(())
}

pub fn save_mask_pgm(path: impl AsRef<Path>, mask: &LabelMask) -> Result<(), DataError> {
    assert_eq!(mask.n, 1, "one mask per file");
    write_raster(
        path,
        &Raster {
            width: mask.w,
            height: mask.h,
            channels: 1,
            bytes: mask.labels.clone(),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: &str) -> &Path {
        Path::new(s)
    }

    #[test]
    fn white_pixel() {
        let r = decode_ppm(b"P6\n1 1\n255\n\xff\xff\xff", p("w.ppm")).unwrap();
        let t = raster_to_tensor(&r);
        assert_eq!(t.shape(), Shape::new(1, 3, 1, 1));
        assert!(t.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn two_pixels_channelwise() {
        let r = decode_ppm(b"P6 2 1 255\n\x00\x00\x00\xff\x00\x00", p("a.ppm")).unwrap();
        let t = raster_to_tensor(&r);
        assert_eq!(t.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn comments_in_header() {
        let r = decode_pgm(b"P5\n# made by hand\n2 # width\n1\n255\n\x01\x02", p("c.pgm")).unwrap();
        assert_eq!((r.width, r.height, r.bytes.clone()), (2, 1, vec![1, 2]));
    }

    #[test]
    fn distinct_diagnostics() {
        assert!(matches!(
            decode_ppm(b"P3\n1 1\n255\n", p("x")),
            Err(DataError::BadMagic { .. })
        ));
        assert!(matches!(
            decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0", p("x")),
            Err(DataError::BadMaxval { maxval: 65535, .. })
        ));
        assert!(matches!(
            decode_ppm(b"P6\n2 2\n255\n\0\0\0", p("x")),
            Err(DataError::Truncated { expected: 12, got: 3, .. })
        ));
        assert!(matches!(decode_pgm(b"P5\n2\n", p("x")), Err(DataError::BadHeader { .. })));
    }

    #[test]
    fn round_trip_bytes() {
        let r = Raster {
            width: 3,
            height: 2,
            channels: 3,
            bytes: (0..18).map(|i| (i * 14) as u8).collect(),
        };
        let back = decode_ppm(&encode(&r), p("r")).unwrap();
        assert_eq!(back, r);
        assert_eq!(tensor_to_raster(&raster_to_tensor(&r)), r);
    }

    #[test]
    fn mask_validation() {
        let classes = ClassSet::floodnet();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        std::fs::write(&path, b"P5\n3 1\n255\n\x00\xff\x09").unwrap();
        match load_mask_pgm(&path, &classes) {
            Err(DataError::LabelOutOfRange { x: 2, y: 0, value: 9, k: 9, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        std::fs::write(&path, b"P5\n2 1\n255\n\x00\xff").unwrap();
        assert_eq!(load_mask_pgm(&path, &classes).unwrap().labels, vec![0, 255]);
    }
}
