//! PNG and base64 conversion of image planes.

use std::io::Cursor;

use base64::Engine;
use tbn_core::image::ImagePlane;

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("invalid base64: {0}")]
    Base64(#[from] base64::DecodeError),
    #[error("invalid png: {0}")]
    Decode(#[from] png::DecodingError),
    #[error("png encoding failed: {0}")]
    Encode(#[from] png::EncodingError),
    #[error("{0}")]
    Unsupported(String),
}

/// 8-bit PNG of a 1, 3 or 4 channel plane with values in `[0, 1]`.
pub fn encode_png(image: &ImagePlane<f32>) -> Result<Vec<u8>, ImageError> {
    let color = match image.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        4 => png::ColorType::Rgba,
        c => return Err(ImageError::Unsupported(format!("cannot write {c}-channel png"))),
    };
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, image.width() as u32, image.height() as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header()?;
        w.write_image_data(&image.to_bytes(255))?;
    }
    Ok(out)
}

/// RGB plane of a PNG. Alpha is dropped and gray is replicated.
pub fn decode_png(bytes: &[u8]) -> Result<ImagePlane<f32>, ImageError> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info()?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| ImageError::Unsupported("png too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let src_channels = info.color_type.samples();
    let data = &buf[..info.buffer_size()];
    let mut rgb = Vec::with_capacity(w * h * 3);
    for px in data.chunks(src_channels) {
        match src_channels {
            1 | 2 => rgb.extend_from_slice(&[px[0]; 3]),
            _ => rgb.extend_from_slice(&px[..3]),
        }
    }
    ImagePlane::from_bytes(h, w, 3, &rgb).map_err(|e| ImageError::Unsupported(e.to_string()))
}

/// Accepts plain base64 or a `data:` URL.
pub fn decode_base64_png(text: &str) -> Result<ImagePlane<f32>, ImageError> {
    let payload = match text.split_once("base64,") {
        Some((head, rest)) if head.starts_with("data:") => rest,
        _ => text,
    };
    let bytes = base64::engine::general_purpose::STANDARD.decode(payload.trim())?;
    decode_png(&bytes)
}

pub fn encode_base64_png(image: &ImagePlane<f32>) -> Result<String, ImageError> {
    Ok(base64::engine::general_purpose::STANDARD.encode(encode_png(image)?))
}
