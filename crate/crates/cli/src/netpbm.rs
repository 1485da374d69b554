//! Binary PGM (P5) and PPM (P6) with maxval 255.

use std::fs;
use std::path::Path;

use saliency_core::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetpbmError {
    #[error("{path}: byte {offset}: {message}")]
    Parse {
        path: String,
        offset: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Value(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Gray,
    Color,
}

impl Kind {
    fn magic(self) -> &'static [u8; 2] {
        match self {
            Kind::Gray => b"P5",
            Kind::Color => b"P6",
        }
    }

    fn channels(self) -> usize {
        match self {
            Kind::Gray => 1,
            Kind::Color => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub width: usize,
    pub height: usize,
    pub maxval: usize,
    /// Offset of the first payload byte.
    pub data_offset: usize,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, (usize, String)> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            let msg = match self.bytes.get(start) {
                Some(b) => format!("expected {what}, found byte 0x{b:02x}"),
                None => format!("expected {what}, found end of file"),
            };
            return Err((start, msg));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| (start, format!("{what} out of range")))
    }
}

pub fn parse_header(bytes: &[u8], kind: Kind) -> Result<Header, (usize, String)> {
    if bytes.len() < 2 || &bytes[..2] != kind.magic() {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err((
            0,
            format!(
                "expected magic {}, found {found:?}",
                String::from_utf8_lossy(kind.magic())
            ),
        ));
    }
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval_at = {
        cur.skip_space();
        cur.pos
    };
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err((maxval_at, format!("unsupported maxval {maxval}, need 255")));
    }
    if width == 0 || height == 0 {
        return Err((2, format!("empty image {width}x{height}")));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => {}
        _ => {
            return Err((
                cur.pos,
                "expected a single whitespace byte after maxval".into(),
            ))
        }
    }
    Ok(Header {
        width,
        height,
        maxval,
        data_offset: cur.pos + 1,
    })
}

/// Decodes a P5 (`h×w`) or P6 (`h×w×3`) image scaled to `[0, 1]`.
pub fn decode(bytes: &[u8], kind: Kind, path: &str) -> Result<Tensor, NetpbmError> {
    let parse_err = |(offset, message): (usize, String)| NetpbmError::Parse {
        path: path.to_owned(),
        offset,
        message,
    };
    let header = parse_header(bytes, kind).map_err(parse_err)?;
    let expected = header.width * header.height * kind.channels();
    let payload = &bytes[header.data_offset..];
    if payload.len() != expected {
        let what = if payload.len() < expected {
            "truncated payload"
        } else {
            "trailing bytes after payload"
        };
        return Err(parse_err((
            header.data_offset + payload.len().min(expected),
            format!("{what}: expected {expected} bytes, found {}", payload.len()),
        )));
    }
    let data: Vec<f64> = payload.iter().map(|&b| f64::from(b) / 255.0).collect();
    let shape = match kind {
        Kind::Gray => vec![header.height, header.width],
        Kind::Color => vec![header.height, header.width, 3],
    };
    Ok(Tensor::new(shape, data).expect("payload length checked"))
}

fn read(path: &Path) -> Result<Vec<u8>, NetpbmError> {
    fs::read(path).map_err(|source| NetpbmError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_image(path: &Path) -> Result<Tensor, NetpbmError> {
    decode(&read(path)?, Kind::Color, &path.display().to_string())
}

pub fn load_gray(path: &Path) -> Result<Tensor, NetpbmError> {
    decode(&read(path)?, Kind::Gray, &path.display().to_string())
}

pub fn encode_gray(map: &Tensor) -> Result<Vec<u8>, NetpbmError> {
    let &[h, w] = map.shape() else {
        return Err(NetpbmError::Value(format!(
            "gray map must be 2-d, got shape {:?}",
            map.shape()
        )));
    };
    if let Some(v) = map.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(NetpbmError::Value(format!("map value {v} outside [0, 1]")));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&v| (v * 255.0).round() as u8));
    Ok(out)
}

pub fn save_gray(map: &Tensor, path: &Path) -> Result<(), NetpbmError> {
    fs::write(path, encode_gray(map)?).map_err(|source| NetpbmError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Nearest-neighbour resize of an `h×w` or `h×w×ch` image to `side×side`,
/// sampling source index `⌊i·h/side⌋`.
pub fn resize_square(image: &Tensor, side: usize) -> Tensor {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let ch = image.shape().get(2).copied().unwrap_or(1);
    let src = image.data();
    let mut out = Vec::with_capacity(side * side * ch);
    for i in 0..side {
        let si = i * h / side;
        for j in 0..side {
            let sj = j * w / side;
            let at = (si * w + sj) * ch;
            out.extend_from_slice(&src[at..at + ch]);
        }
    }
    let mut shape = vec![side, side];
    shape.extend(image.shape().get(2));
    Tensor::new(shape, out).expect("resized shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse_error(bytes: &[u8], kind: Kind) -> (usize, String) {
        match decode(bytes, kind, "mem") {
            Err(NetpbmError::Parse {
                offset, message, ..
            }) => (offset, message),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn gray_two_by_two() {
        let mut bytes = b"P5 2 2 255\n".to_vec();
        bytes.extend([0, 255, 0, 255]);
        let t = decode(&bytes, Kind::Gray, "mem").unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.data(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn color_two_by_two() {
        let mut bytes = b"P6 2 2 255\n".to_vec();
        bytes.extend(0..12u8);
        let t = decode(&bytes, Kind::Color, "mem").unwrap();
        assert_eq!(t.shape(), &[2, 2, 3]);
        assert_eq!(t.data()[5], 5.0 / 255.0);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5\n# made by hand\n3 1\n# depth\n255\n".to_vec();
        bytes.extend([1, 2, 3]);
        let t = decode(&bytes, Kind::Gray, "mem").unwrap();
        assert_eq!(t.shape(), &[1, 3]);
    }

    #[test]
    fn truncated_payload_names_both_counts() {
        let mut bytes = b"P5 2 2 255\n".to_vec();
        bytes.extend([0, 1, 2]);
        let (offset, msg) = parse_error(&bytes, Kind::Gray);
        assert_eq!(offset, 14);
        assert!(msg.contains("expected 4 bytes, found 3"), "{msg}");
    }

    #[test]
    fn malformed_headers() {
        assert_eq!(parse_error(b"P6 2 2 255\n", Kind::Gray).0, 0);
        let (offset, msg) = parse_error(b"P5 2 x 255\n", Kind::Gray);
        assert_eq!(offset, 5);
        assert!(msg.contains("height"));
        let (offset, msg) = parse_error(b"P5 2 2 65535\n\0\0\0\0", Kind::Gray);
        assert_eq!(offset, 7);
        assert!(msg.contains("maxval 65535"));
        assert!(parse_error(b"P5 2 2 255", Kind::Gray)
            .1
            .contains("whitespace"));
        assert!(parse_error(b"P5 2", Kind::Gray).1.contains("end of file"));
    }

    #[test]
    fn half_gray_rounds_to_128() {
        let bytes = encode_gray(&Tensor::full([2, 3], 0.5)).unwrap();
        assert_eq!(&bytes[..11], b"P5\n3 2\n255\n");
        assert!(bytes[11..].iter().all(|&b| b == 128));
    }

    #[test]
    fn round_trip_within_half_step() {
        let data: Vec<f64> = (0..35).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let map = Tensor::new([5, 7], data).unwrap();
        let bytes = encode_gray(&map).unwrap();
        let back = decode(&bytes, Kind::Gray, "mem").unwrap();
        assert_eq!(back.shape(), &[5, 7]);
        assert!(map.max_abs_diff(&back) <= 1.0 / 510.0 + 1e-15);
    }

    #[test]
    fn rejects_values_outside_unit_interval() {
        assert!(encode_gray(&Tensor::full([1, 1], 1.5)).is_err());
        assert!(encode_gray(&Tensor::full([1, 1, 1], 0.5)).is_err());
    }

    #[test]
    fn resize_picks_nearest_source() {
        let t = Tensor::new([2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = resize_square(&t, 4);
        assert_eq!(r.shape(), &[4, 4, 1]);
        assert_eq!(&r.data()[..4], &[1.0, 1.0, 2.0, 2.0]);
        assert_eq!(&r.data()[12..], &[3.0, 3.0, 4.0, 4.0]);
    }
}
