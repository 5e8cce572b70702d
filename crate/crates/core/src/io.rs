//! On-disk formats.
//!
//! **RTEN** tensor container: magic bytes `52 54 45 4E` ("RTEN"), then
//! unsigned 32-bit little-endian fields: version (= 1), dtype code
//! (1 = float32 little-endian), ndim, then ndim dimension sizes, then the
//! row-major float32 payload. All multi-byte integers are little-endian.
//!
//! **PPM** P6: `P6\n<width> <height>\n255\n` followed by interleaved RGB
//! bytes. Only maxval 255 is accepted. Pixels map to bytes as
//! `round(clamp(v, 0, 1) * 255)`.
//!
//! **Checkpoint**: a plain-text manifest followed by concatenated RTEN
//! records. Line 1 is `RTENCKPT 1 <n_meta> <n_tensors>`, then `<n_meta>`
//! lines `meta <key> <value>`, then `<n_tensors>` lines
//! `tensor <name> <d0>x<d1>x... <offset>` where the offset is relative to
//! the first byte after the blank separator line that ends the manifest.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const RTEN_MAGIC: [u8; 4] = [0x52, 0x54, 0x45, 0x4E];
const RTEN_VERSION: u32 = 1;
const RTEN_DTYPE_F32: u32 = 1;

/// Serialize a tensor into RTEN bytes.
pub fn rten_bytes(tensor: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * tensor.shape().len() + 4 * tensor.numel());
    out.extend_from_slice(&RTEN_MAGIC);
    out.extend_from_slice(&RTEN_VERSION.to_le_bytes());
    out.extend_from_slice(&RTEN_DTYPE_F32.to_le_bytes());
    out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parse one RTEN record starting at `offset` in `bytes`. Returns the tensor
/// and the offset one past its payload. Diagnostics carry the byte offset of
/// the offending field.
pub fn rten_parse(path: &str, bytes: &[u8], offset: u64) -> Result<(Tensor, u64)> {
    let mut pos = offset as usize;
    let take4 = |pos: &mut usize, what: &str| -> Result<[u8; 4]> {
        if *pos + 4 > bytes.len() {
            return Err(Error::format(
                path,
                *pos as u64,
                format!("truncated payload while reading {what}"),
            ));
        }
        let mut buf = [0u8; 4];
        buf.copy_from_slice(&bytes[*pos..*pos + 4]);
        *pos += 4;
        Ok(buf)
    };

    let magic = take4(&mut pos, "magic")?;
    if magic != RTEN_MAGIC {
        return Err(Error::format(path, offset, "bad magic bytes (want RTEN)"));
    }
    let version = u32::from_le_bytes(take4(&mut pos, "version")?);
    if version != RTEN_VERSION {
        return Err(Error::format(
            path,
            (offset + 4) as u64,
            format!("unsupported version {version}"),
        ));
    }
    let dtype = u32::from_le_bytes(take4(&mut pos, "dtype")?);
    if dtype != RTEN_DTYPE_F32 {
        return Err(Error::format(
            path,
            (offset + 8) as u64,
            format!("unsupported dtype code {dtype}"),
        ));
    }
    let ndim = u32::from_le_bytes(take4(&mut pos, "ndim")?) as usize;
    if ndim > 8 {
        return Err(Error::format(
            path,
            (offset + 12) as u64,
            format!("ndim {ndim} exceeds limit 8"),
        ));
    }
    let mut shape = Vec::with_capacity(ndim);
    let mut numel: u64 = 1;
    for i in 0..ndim {
        let dim_off = pos as u64;
        let d = u32::from_le_bytes(take4(&mut pos, "dimension")?) as u64;
        numel = numel.checked_mul(d).ok_or_else(|| {
            Error::format(path, dim_off, format!("dimension overflow at axis {i}"))
        })?;
        if numel > (1 << 30) {
            return Err(Error::format(
                path,
                dim_off,
                format!("dimension overflow: {numel} elements"),
            ));
        }
        shape.push(d as usize);
    }
    let payload = numel as usize * 4;
    if pos + payload > bytes.len() {
        return Err(Error::format(
            path,
            pos as u64,
            format!(
                "truncated payload: want {payload} bytes, have {}",
                bytes.len() - pos
            ),
        ));
    }
    let mut data = Vec::with_capacity(numel as usize);
    for i in 0..numel as usize {
        let mut buf = [0u8; 4];
        buf.copy_from_slice(&bytes[pos + 4 * i..pos + 4 * i + 4]);
        data.push(f32::from_le_bytes(buf));
    }
    pos += payload;
    let tensor = Tensor::new(shape, data)
        .map_err(|e| Error::format(path, offset, format!("invalid tensor: {e}")))?;
    Ok((tensor, pos as u64))
}

pub fn write_rten(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, rten_bytes(tensor)).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_rten(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| Error::io(display.clone(), e))?;
    let (tensor, end) = rten_parse(&display, &bytes, 0)?;
    if end as usize != bytes.len() {
        return Err(Error::format(
            &display,
            end,
            format!("{} trailing bytes after payload", bytes.len() as u64 - end),
        ));
    }
    Ok(tensor)
}

/// Encode a `[3,H,W]` image in `[0,1]` as binary PPM.
pub fn ppm_bytes(image: &Tensor) -> Result<Vec<u8>> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::ShapeMismatch {
            context: "ppm_bytes".to_string(),
            expected: vec![3, 0, 0],
            actual: shape.to_vec(),
        });
    }
    let (h, w) = (shape[1], shape[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let data = image.data();
    for i in 0..plane {
        for c in 0..3 {
            let v = data[c * plane + i].clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn write_ppm(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ppm_bytes(image)?).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Decode a binary PPM into a `[3,H,W]` tensor in `[0,1]`.
pub fn ppm_parse(path: &str, bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0usize;
    if bytes.len() < 2 || &bytes[0..2] != b"P6" {
        return Err(Error::format(path, 0, "bad magic bytes (want P6)"));
    }
    pos += 2;
    let mut fields = Vec::new();
    while fields.len() < 3 {
        // Skip whitespace and `#` comment lines between header fields.
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(Error::format(path, pos as u64, "expected header integer"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("digits are utf8");
        let value: u64 = text
            .parse()
            .map_err(|_| Error::format(path, start as u64, "dimension overflow"))?;
        fields.push((value, start as u64));
    }
    let (w, _) = fields[0];
    let (h, _) = fields[1];
    let (maxval, maxval_off) = fields[2];
    if maxval != 255 {
        return Err(Error::format(
            path,
            maxval_off,
            format!("unsupported maxval {maxval} (want 255)"),
        ));
    }
    if w == 0 || h == 0 || w.checked_mul(h).map_or(true, |p| p > (1 << 28)) {
        return Err(Error::format(path, 3, "dimension overflow"));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::format(path, pos as u64, "missing header terminator"));
    }
    pos += 1;
    let (w, h) = (w as usize, h as usize);
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(Error::format(
            path,
            pos as u64,
            format!("truncated payload: want {need} bytes, have {}", bytes.len() - pos),
        ));
    }
    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            data[c * plane + i] = bytes[pos + 3 * i + c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| Error::io(display.clone(), e))?;
    ppm_parse(&display, &bytes)
}

/// Checkpoint = ordered `(name, tensor)` pairs plus string metadata.
pub fn write_checkpoint(
    path: impl AsRef<Path>,
    meta: &[(String, String)],
    tensors: &[(String, &Tensor)],
) -> Result<()> {
    let path = path.as_ref();
    let mut blob = Vec::new();
    let mut lines = Vec::new();
    for (name, tensor) in tensors {
        let offset = blob.len();
        blob.extend_from_slice(&rten_bytes(tensor));
        let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
        lines.push(format!("tensor {name} {} {offset}", dims.join("x")));
    }
    let mut text = format!("RTENCKPT 1 {} {}\n", meta.len(), tensors.len());
    for (k, v) in meta {
        text.push_str(&format!("meta {k} {v}\n"));
    }
    for line in &lines {
        text.push_str(line);
        text.push('\n');
    }
    text.push('\n');
    let mut file =
        fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(text.as_bytes())
        .and_then(|_| file.write_all(&blob))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_checkpoint(
    path: impl AsRef<Path>,
) -> Result<(Vec<(String, String)>, Vec<(String, Tensor)>)> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(display.clone(), e))?;

    // The manifest ends at the first blank line.
    let mut pos = 0usize;
    let mut lines = Vec::new();
    loop {
        let start = pos;
        while pos < bytes.len() && bytes[pos] != b'\n' {
            pos += 1;
        }
        if pos >= bytes.len() {
            return Err(Error::format(&display, start as u64, "unterminated manifest"));
        }
        let line = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| Error::format(&display, start as u64, "manifest is not utf8"))?;
        pos += 1;
        if line.is_empty() {
            break;
        }
        lines.push((line.to_string(), start as u64));
    }
    let blob_start = pos as u64;

    let (header, header_off) = lines
        .first()
        .ok_or_else(|| Error::format(&display, 0, "empty manifest"))?;
    let head: Vec<&str> = header.split_whitespace().collect();
    if head.len() != 4 || head[0] != "RTENCKPT" || head[1] != "1" {
        return Err(Error::format(&display, *header_off, "bad manifest header"));
    }
    let n_meta: usize = head[2]
        .parse()
        .map_err(|_| Error::format(&display, *header_off, "bad meta count"))?;
    let n_tensors: usize = head[3]
        .parse()
        .map_err(|_| Error::format(&display, *header_off, "bad tensor count"))?;
    if lines.len() != 1 + n_meta + n_tensors {
        return Err(Error::format(
            &display,
            *header_off,
            format!("manifest line count {} does not match header", lines.len()),
        ));
    }

    let mut meta = Vec::with_capacity(n_meta);
    for (line, off) in &lines[1..1 + n_meta] {
        let mut parts = line.splitn(3, ' ');
        match (parts.next(), parts.next(), parts.next()) {
            (Some("meta"), Some(k), Some(v)) => meta.push((k.to_string(), v.to_string())),
            _ => return Err(Error::format(&display, *off, "bad meta line")),
        }
    }

    let mut tensors = Vec::with_capacity(n_tensors);
    for (line, off) in &lines[1 + n_meta..] {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != "tensor" {
            return Err(Error::format(&display, *off, "bad tensor line"));
        }
        let name = parts[1].to_string();
        let offset: u64 = parts[3]
            .parse()
            .map_err(|_| Error::format(&display, *off, "bad tensor offset"))?;
        let (tensor, _) = rten_parse(&display, &bytes, blob_start + offset)?;
        let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
        if dims.join("x") != parts[2] {
            return Err(Error::format(
                &display,
                *off,
                format!("manifest shape {} disagrees with payload {}", parts[2], dims.join("x")),
            ));
        }
        tensors.push((name, tensor));
    }
    Ok((meta, tensors))
}
