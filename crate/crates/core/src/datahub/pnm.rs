//! Binary PPM (P6) images and PGM (P5) label maps, 8 bits per sample.

use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::IGNORE_INDEX;

/// Interleaved 8-bit RGB image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

/// Per-pixel class indices; [`IGNORE_INDEX`] marks excluded pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Dimension(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Image { width, height, data })
    }
}

impl LabelMap {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "{width}x{height} label map needs {} bytes, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(LabelMap { width, height, data })
    }

    /// Checks every value is a class below `classes` or the ignore index.
    pub fn validate(&self, classes: usize) -> std::result::Result<(), (usize, u8)> {
        match self
            .data
            .iter()
            .position(|&v| v != IGNORE_INDEX && v as usize >= classes)
        {
            Some(i) => Err((i, self.data[i])),
            None => Ok(()),
        }
    }
}

fn encode(magic: &str, width: usize, height: usize, payload: &[u8]) -> Vec<u8> {
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(payload);
    out
}

struct Header {
    width: usize,
    height: usize,
    payload_offset: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2], path: &Path) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::format(
            path,
            0,
            format!("expected magic number {}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (k, field) in fields.iter_mut().enumerate() {
        // whitespace and comments before each field
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
        if start == pos {
            return Err(Error::format(path, pos, "expected a decimal header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(path, start, "header field out of range"))?;
        if k == 2 && *field != 255 {
            return Err(Error::format(path, start, format!("max value must be 255, got {field}")));
        }
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::format(path, pos, "missing whitespace after header")),
    }
    Ok(Header {
        width: fields[0],
        height: fields[1],
        payload_offset: pos,
    })
}

fn payload<'a>(bytes: &'a [u8], header: &Header, channels: usize, path: &Path) -> Result<&'a [u8]> {
    let need = header.width * header.height * channels;
    let have = bytes.len() - header.payload_offset;
    if have < need {
        return Err(Error::format(
            path,
            bytes.len(),
            format!("truncated payload: expected {need} bytes, found {have}"),
        ));
    }
    if have > need {
        return Err(Error::format(
            path,
            header.payload_offset + need,
            format!("{} trailing bytes after payload", have - need),
        ));
    }
    Ok(&bytes[header.payload_offset..])
}

pub fn encode_ppm(image: &Image) -> Vec<u8> {
    encode("P6", image.width, image.height, &image.data)
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Image> {
    let header = parse_header(bytes, b"P6", path)?;
    let data = payload(bytes, &header, 3, path)?.to_vec();
    Image::new(header.width, header.height, data)
}

pub fn encode_pgm(labels: &LabelMap) -> Vec<u8> {
    encode("P5", labels.width, labels.height, &labels.data)
}

/// Decodes a label map, rejecting values outside `0..classes` other than the ignore index.
pub fn decode_pgm(bytes: &[u8], classes: usize, path: &Path) -> Result<LabelMap> {
    let header = parse_header(bytes, b"P5", path)?;
    let data = payload(bytes, &header, 1, path)?.to_vec();
    let labels = LabelMap::new(header.width, header.height, data)?;
    labels.validate(classes).map_err(|(i, v)| {
        Error::format(
            path,
            header.payload_offset + i,
            format!("label value {v} outside 0..{classes} and not the ignore index"),
        )
    })?;
    Ok(labels)
}

pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    std::fs::write(path, encode_ppm(image)).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes, path)
}

pub fn write_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    std::fs::write(path, encode_pgm(labels)).map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path, classes: usize) -> Result<LabelMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, classes, path)
}
