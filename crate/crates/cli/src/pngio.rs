//! PNG encoding of images, 1-bit masks and indexed part maps.

use std::io::Cursor;

use ifam_core::Tensor;

/// Palette entry `i` colours part `i`; index 0 is the background.
pub const PART_PALETTE: [[u8; 3]; 9] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

fn encode(width: usize, height: usize, color: png::ColorType, depth: png::BitDepth, palette: Option<Vec<u8>>, data: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(depth);
        if let Some(p) = palette {
            enc.set_palette(p);
        }
        let mut w = enc.write_header().expect("in-memory PNG header");
        w.write_image_data(data).expect("in-memory PNG data");
    }
    out
}

struct Decoded {
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    data: Vec<u8>,
}

fn decode(bytes: &[u8]) -> Result<Decoded, String> {
    let mut reader = png::Decoder::new(Cursor::new(bytes)).read_info().map_err(|e| e.to_string())?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    buf.truncate(info.buffer_size());
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        depth: info.bit_depth,
        data: buf,
    })
}

/// `[3, H, W]` tensor with values in `[0, 1]` to 8-bit RGB.
pub fn encode_rgb(image: &Tensor) -> Vec<u8> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let d = image.data();
    let mut px = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            px.push((d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    encode(w, h, png::ColorType::Rgb, png::BitDepth::Eight, None, &px)
}

pub fn decode_rgb(bytes: &[u8]) -> Result<Tensor, String> {
    let d = decode(bytes)?;
    if d.color != png::ColorType::Rgb || d.depth != png::BitDepth::Eight {
        return Err(format!("expected 8-bit RGB, got {:?} {:?}", d.color, d.depth));
    }
    let n = d.width * d.height;
    let data = (0..3 * n).map(|i| d.data[(i % n) * 3 + i / n] as f64 / 255.0).collect();
    Tensor::new(&[3, d.height, d.width], data).map_err(|e| e.to_string())
}

/// Row-major boolean mask as a 1-bit greyscale PNG.
pub fn encode_mask(mask: &[bool], width: usize, height: usize) -> Vec<u8> {
    let stride = width.div_ceil(8);
    let mut px = vec![0u8; stride * height];
    for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        let (y, x) = (i / width, i % width);
        px[y * stride + x / 8] |= 0x80 >> (x % 8);
    }
    encode(width, height, png::ColorType::Grayscale, png::BitDepth::One, None, &px)
}

pub fn decode_mask(bytes: &[u8]) -> Result<(Vec<bool>, usize, usize), String> {
    let d = decode(bytes)?;
    if d.color != png::ColorType::Grayscale || d.depth != png::BitDepth::One {
        return Err(format!("expected 1-bit greyscale, got {:?} {:?}", d.color, d.depth));
    }
    let stride = d.width.div_ceil(8);
    let mask = (0..d.width * d.height)
        .map(|i| {
            let (y, x) = (i / d.width, i % d.width);
            d.data[y * stride + x / 8] & (0x80 >> (x % 8)) != 0
        })
        .collect();
    Ok((mask, d.width, d.height))
}

/// Token part indices on a `grid` upsampled by `scale` into an 8-bit indexed PNG.
pub fn encode_part_map(parts: &[usize], grid: (usize, usize), scale: usize) -> Vec<u8> {
    let (gh, gw) = grid;
    let (h, w) = (gh * scale, gw * scale);
    let px: Vec<u8> = (0..h * w)
        .map(|i| parts[(i / w / scale) * gw + (i % w) / scale] as u8)
        .collect();
    let k = parts.iter().copied().max().unwrap_or(0).max(PART_PALETTE.len() - 1);
    let palette = (0..=k).flat_map(|i| part_colour(i)).collect();
    encode(w, h, png::ColorType::Indexed, png::BitDepth::Eight, Some(palette), &px)
}

/// Palette colour of part `i`; cycles past the fixed palette.
pub fn part_colour(i: usize) -> [u8; 3] {
    if i == 0 {
        PART_PALETTE[0]
    } else {
        PART_PALETTE[1 + (i - 1) % (PART_PALETTE.len() - 1)]
    }
}

/// Pixel indices and palette of an indexed PNG.
pub fn decode_indexed(bytes: &[u8]) -> Result<(Vec<u8>, Vec<[u8; 3]>, usize, usize), String> {
    let mut reader = png::Decoder::new(Cursor::new(bytes)).read_info().map_err(|e| e.to_string())?;
    let palette: Vec<[u8; 3]> = reader
        .info()
        .palette
        .as_ref()
        .ok_or("no palette")?
        .chunks(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    if info.color_type != png::ColorType::Indexed {
        return Err("not an indexed PNG".into());
    }
    buf.truncate(info.buffer_size());
    Ok((buf, palette, info.width as usize, info.height as usize))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_round_trip_on_quantized_values() {
        let t = Tensor::from_fn(&[3, 5, 7], |i| ((i * 37) % 256) as f64 / 255.0);
        assert_eq!(decode_rgb(&encode_rgb(&t)).unwrap(), t);
    }

    #[test]
    fn mask_round_trip_odd_width() {
        let m: Vec<bool> = (0..11 * 3).map(|i| i % 3 == 0 || i == 10).collect();
        assert_eq!(decode_mask(&encode_mask(&m, 11, 3)).unwrap(), (m, 11, 3));
    }

    #[test]
    fn part_map_indices_survive() {
        let parts = vec![0, 1, 2, 3, 0, 0, 1, 1, 2];
        let (px, pal, w, h) = decode_indexed(&encode_part_map(&parts, (3, 3), 2)).unwrap();
        assert_eq!((w, h), (6, 6));
        assert_eq!(px[0], 0);
        assert_eq!(px[2], 1);
        assert_eq!(px[6 * 5 + 5], 2);
        assert_eq!(pal[1], PART_PALETTE[1]);
        assert_eq!(pal[0], [0, 0, 0]);
    }
}
