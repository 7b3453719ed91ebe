//! Image (PNG, binary PPM/PGM) and Middlebury `.flo` file I/O.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{FlowField, Frame, Tensor};

/// Little-endian `f32` tag that opens every `.flo` file.
pub const FLO_MAGIC: f32 = 202021.25;

fn invalid_data(path: &Path, msg: impl Into<String>) -> Error {
    Error::io(path, io::Error::new(io::ErrorKind::InvalidData, msg.into()))
}

/// Reads an 8-bit PNG or binary PPM (P6) / PGM (P5) into a frame scaled to `[0, 1]`.
/// Alpha channels are dropped.
pub fn read_image(path: impl AsRef<Path>) -> Result<Frame> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"\x89PNG") {
        decode_png(path, &bytes)
    } else if bytes.starts_with(b"P6") || bytes.starts_with(b"P5") {
        decode_pnm(path, &bytes)
    } else {
        Err(invalid_data(path, "not a PNG or binary PPM/PGM file"))
    }
}

fn decode_png(path: &Path, bytes: &[u8]) -> Result<Frame> {
    let mut decoder = png::Decoder::new(bytes);
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| invalid_data(path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| invalid_data(path, e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(invalid_data(
            path,
            format!("unsupported bit depth {:?}", info.bit_depth),
        ));
    }
    let (keep, stride) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (1, 2),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (3, 4),
        other => return Err(invalid_data(path, format!("unsupported color type {other:?}"))),
    };
    let (h, w) = (info.height as usize, info.width as usize);
    let data: Vec<f64> = buf[..info.buffer_size()]
        .chunks_exact(stride)
        .flat_map(|px| px[..keep].iter().map(|&b| f64::from(b) / 255.0))
        .collect();
    Frame::new(Tensor::from_vec(h, w, keep, data)?)
}

fn decode_pnm(path: &Path, bytes: &[u8]) -> Result<Frame> {
    let channels = if bytes[1] == b'6' { 3 } else { 1 };
    // Header: magic, width, height, maxval, separated by whitespace and comments.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| invalid_data(path, "malformed PNM header"))?;
    }
    // exactly one whitespace byte before the raster
    pos += 1;
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(invalid_data(
            path,
            format!("unsupported bit depth (maxval {maxval})"),
        ));
    }
    let n = w * h * channels;
    if w == 0 || h == 0 || bytes.len() < pos + n {
        return Err(invalid_data(path, "truncated PNM raster"));
    }
    let data = bytes[pos..pos + n]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    Frame::new(Tensor::from_vec(h, w, channels, data)?)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a frame, clamped to `[0, 1]` and quantized to 8 bits. `.ppm`/`.pgm`
/// extensions select binary PNM output, anything else PNG.
pub fn write_image(frame: &Frame, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let t = frame.tensor();
    let raster: Vec<u8> = t.data().iter().map(|&v| quantize(v)).collect();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    match ext.as_deref() {
        Some("ppm") | Some("pgm") => {
            let magic = if t.channels() == 3 { "P6" } else { "P5" };
            write!(out, "{magic}\n{} {}\n255\n", t.width(), t.height())
                .and_then(|_| out.write_all(&raster))
                .map_err(|e| Error::io(path, e))?;
        }
        _ => {
            let mut encoder = png::Encoder::new(&mut out, t.width() as u32, t.height() as u32);
            encoder.set_color(if t.channels() == 3 {
                png::ColorType::Rgb
            } else {
                png::ColorType::Grayscale
            });
            encoder.set_depth(png::BitDepth::Eight);
            let mut writer = encoder
                .write_header()
                .map_err(|e| invalid_data(path, e.to_string()))?;
            writer
                .write_image_data(&raster)
                .map_err(|e| invalid_data(path, e.to_string()))?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Parses Middlebury `.flo` bytes.
pub fn decode_flo(path: &Path, bytes: &[u8]) -> Result<FlowField> {
    if bytes.len() < 12 {
        return Err(Error::format(path, "truncated .flo header"));
    }
    let word = |k: usize| [bytes[4 * k], bytes[4 * k + 1], bytes[4 * k + 2], bytes[4 * k + 3]];
    let magic = f32::from_le_bytes(word(0));
    if magic != FLO_MAGIC {
        return Err(Error::format(
            path,
            format!("bad .flo magic {magic}, expected {FLO_MAGIC}"),
        ));
    }
    let w = i32::from_le_bytes(word(1));
    let h = i32::from_le_bytes(word(2));
    if w <= 0 || h <= 0 {
        return Err(Error::format(path, format!("invalid .flo size {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let expected = 12 + 8 * w * h;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!(
                "payload is {} bytes, expected {} for {w}x{h}",
                bytes.len(),
                expected
            ),
        ));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
        .collect();
    FlowField::new(Tensor::from_vec(h, w, 2, data)?).map_err(|e| Error::format(path, e.to_string()))
}

/// Serializes a flow field in `.flo` layout (values narrowed to `f32`).
pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let t = flow.tensor();
    let mut out = Vec::with_capacity(12 + 4 * t.data().len());
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(t.width() as i32).to_le_bytes());
    out.extend_from_slice(&(t.height() as i32).to_le_bytes());
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_flo(path, &bytes)
}

pub fn write_flo(flow: &FlowField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_flo(flow)).map_err(|e| Error::io(path, e))
}
