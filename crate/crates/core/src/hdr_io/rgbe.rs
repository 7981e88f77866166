//! Radiance `.hdr` (RGBE) reading and writing.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::EnvironmentImage;
use crate::error::{Error, Result};

/// Decodes one RGBE quadruple: `mantissa * 2^(E - 128) / 256`, zero when `E = 0`.
pub fn decode_rgbe(rgbe: [u8; 4]) -> [f32; 3] {
    if rgbe[3] == 0 {
        return [0.0; 3];
    }
    let f = (rgbe[3] as f64 - 136.0).exp2();
    [
        (rgbe[0] as f64 * f) as f32,
        (rgbe[1] as f64 * f) as f32,
        (rgbe[2] as f64 * f) as f32,
    ]
}

/// Encodes linear RGB with a shared exponent taken from the largest channel.
pub fn encode_rgbe(rgb: [f32; 3]) -> [u8; 4] {
    let max = rgb.iter().fold(0.0f32, |m, &c| m.max(c)) as f64;
    if max < 1e-32 {
        return [0; 4];
    }
    // max = m * 2^e with m in [0.5, 1)
    let mut e = max.log2().floor() as i32 + 1;
    if max / (e as f64).exp2() >= 1.0 {
        e += 1;
    } else if max / (e as f64).exp2() < 0.5 {
        e -= 1;
    }
    let scale = 256.0 / (e as f64).exp2();
    let m = |c: f32| ((c.max(0.0) as f64) * scale).floor().min(255.0) as u8;
    [
        m(rgb[0]),
        m(rgb[1]),
        m(rgb[2]),
        (e + 128).clamp(0, 255) as u8,
    ]
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::HdrParse {
        offset,
        message: message.into(),
    }
}

/// Loads a Radiance HDR file.
pub fn load_hdr(path: impl AsRef<Path>) -> Result<EnvironmentImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_hdr(&bytes)
}

fn read_line(bytes: &[u8], pos: &mut usize) -> Result<String> {
    let start = *pos;
    let end = bytes[start..]
        .iter()
        .position(|&b| b == b'\n')
        .map(|i| start + i)
        .ok_or_else(|| parse_err(start, "unterminated header line"))?;
    *pos = end + 1;
    Ok(String::from_utf8_lossy(&bytes[start..end])
        .trim_end_matches('\r')
        .to_string())
}

/// Decodes an in-memory Radiance HDR file (flat, old-style and adaptive RLE scanlines).
pub fn read_hdr(bytes: &[u8]) -> Result<EnvironmentImage> {
    let mut pos = 0;
    let magic = read_line(bytes, &mut pos)?;
    if !(magic.starts_with("#?RADIANCE") || magic.starts_with("#?RGBE")) {
        return Err(parse_err(0, format!("bad magic {magic:?}")));
    }
    loop {
        let line_start = pos;
        let line = read_line(bytes, &mut pos)?;
        if line.is_empty() {
            break;
        }
        if let Some(fmt) = line.strip_prefix("FORMAT=") {
            if fmt.trim() != "32-bit_rle_rgbe" {
                return Err(parse_err(line_start, format!("unsupported format {fmt:?}")));
            }
        }
    }
    let res_start = pos;
    let res = read_line(bytes, &mut pos)?;
    let parts: Vec<&str> = res.split_whitespace().collect();
    let (height, width) = match parts.as_slice() {
        ["-Y", h, "+X", w] => (
            h.parse::<usize>()
                .map_err(|_| parse_err(res_start, format!("bad height in {res:?}")))?,
            w.parse::<usize>()
                .map_err(|_| parse_err(res_start, format!("bad width in {res:?}")))?,
        ),
        _ => {
            return Err(parse_err(
                res_start,
                format!("unsupported resolution line {res:?}"),
            ))
        }
    };
    if width == 0 || height == 0 {
        return Err(parse_err(res_start, "empty image"));
    }

    let mut pixels = Vec::with_capacity(width * height);
    let mut scan = vec![[0u8; 4]; width];
    for _ in 0..height {
        read_scanline(bytes, &mut pos, &mut scan)?;
        pixels.extend(scan.iter().map(|&q| decode_rgbe(q)));
    }
    EnvironmentImage::new(width, height, pixels)
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    if *pos + n > bytes.len() {
        return Err(parse_err(*pos, "truncated scanline"));
    }
    let out = &bytes[*pos..*pos + n];
    *pos += n;
    Ok(out)
}

fn read_scanline(bytes: &[u8], pos: &mut usize, scan: &mut [[u8; 4]]) -> Result<()> {
    let width = scan.len();
    let head = take(bytes, pos, 4)?;
    let adaptive =
        (8..0x8000).contains(&width) && head[0] == 2 && head[1] == 2 && head[2] & 0x80 == 0;
    if adaptive {
        let encoded = ((head[2] as usize) << 8) | head[3] as usize;
        if encoded != width {
            return Err(parse_err(
                *pos - 4,
                format!("scanline width {encoded} != {width}"),
            ));
        }
        for ch in 0..4 {
            let mut x = 0;
            while x < width {
                let at = *pos;
                let count = take(bytes, pos, 1)?[0] as usize;
                if count > 128 {
                    let run = count - 128;
                    if x + run > width {
                        return Err(parse_err(at, "run overflows scanline"));
                    }
                    let v = take(bytes, pos, 1)?[0];
                    scan[x..x + run].iter_mut().for_each(|p| p[ch] = v);
                    x += run;
                } else {
                    if count == 0 || x + count > width {
                        return Err(parse_err(at, "bad literal count"));
                    }
                    let lit = take(bytes, pos, count)?;
                    for (p, &v) in scan[x..x + count].iter_mut().zip(lit) {
                        p[ch] = v;
                    }
                    x += count;
                }
            }
        }
        return Ok(());
    }

    // Flat pixels, possibly with old-style (1,1,1,n) repeat markers.
    let mut x = 0;
    let mut quad = [head[0], head[1], head[2], head[3]];
    let mut shift = 0;
    loop {
        if quad[0] == 1 && quad[1] == 1 && quad[2] == 1 {
            if x == 0 {
                return Err(parse_err(*pos - 4, "repeat marker at scanline start"));
            }
            let run = (quad[3] as usize) << shift;
            if x + run > width {
                return Err(parse_err(*pos - 4, "repeat overflows scanline"));
            }
            let prev = scan[x - 1];
            scan[x..x + run].iter_mut().for_each(|p| *p = prev);
            x += run;
            shift += 8;
        } else {
            scan[x] = quad;
            x += 1;
            shift = 0;
        }
        if x >= width {
            return Ok(());
        }
        let next = take(bytes, pos, 4)?;
        quad = [next[0], next[1], next[2], next[3]];
    }
}

/// Saves `image` as an adaptive-RLE Radiance HDR file.
pub fn save_hdr(image: &EnvironmentImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = write_hdr(image);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Encodes `image` as Radiance HDR bytes.
pub fn write_hdr(image: &EnvironmentImage) -> Vec<u8> {
    let (w, h) = (image.width(), image.height());
    let mut out = Vec::with_capacity(w * h * 4 + 64);
    out.extend_from_slice(b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n");
    out.extend_from_slice(format!("-Y {h} +X {w}\n").as_bytes());
    let rle = (8..0x8000).contains(&w);
    let mut channel = vec![0u8; w];
    for row in 0..h {
        let quads: Vec<[u8; 4]> = (0..w).map(|c| encode_rgbe(image.pixel(row, c))).collect();
        if !rle {
            quads.iter().for_each(|q| out.extend_from_slice(q));
            continue;
        }
        out.extend_from_slice(&[2, 2, (w >> 8) as u8, (w & 0xff) as u8]);
        for ch in 0..4 {
            for (slot, q) in channel.iter_mut().zip(&quads) {
                *slot = q[ch];
            }
            encode_channel(&channel, &mut out);
        }
    }
    out
}

fn encode_channel(data: &[u8], out: &mut Vec<u8>) {
    const MIN_RUN: usize = 4;
    let mut i = 0;
    while i < data.len() {
        // find the next run of at least MIN_RUN identical bytes
        let mut run_start = i;
        let mut run_len = 0;
        while run_start < data.len() {
            run_len = 1;
            while run_start + run_len < data.len()
                && run_len < 127
                && data[run_start + run_len] == data[run_start]
            {
                run_len += 1;
            }
            if run_len >= MIN_RUN {
                break;
            }
            run_start += run_len;
        }
        if run_len < MIN_RUN {
            run_start = data.len();
        }
        while i < run_start {
            let n = (run_start - i).min(128);
            out.push(n as u8);
            out.extend_from_slice(&data[i..i + n]);
            i += n;
        }
        if run_start < data.len() {
            out.push((128 + run_len) as u8);
            out.push(data[run_start]);
            i = run_start + run_len;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hdr_io::generate_synthetic_env;
    use proptest::prelude::*;

    #[test]
    fn decode_examples() {
        assert_eq!(decode_rgbe([128, 128, 128, 129]), [1.0, 1.0, 1.0]);
        assert_eq!(decode_rgbe([0, 0, 0, 0]), [0.0, 0.0, 0.0]);
        assert_eq!(decode_rgbe([64, 0, 255, 128]), [0.25, 0.0, 255.0 / 256.0]);
    }

    #[test]
    fn encode_examples() {
        assert_eq!(encode_rgbe([1.0, 1.0, 1.0]), [128, 128, 128, 129]);
        assert_eq!(encode_rgbe([0.0, 0.0, 0.0]), [0, 0, 0, 0]);
        assert_eq!(encode_rgbe([0.5, 0.25, 0.0]), [128, 64, 0, 128]);
    }

    #[test]
    fn zero_image_has_zero_payload() {
        // Width below 8 is written flat, so the payload is raw quadruples.
        let img = EnvironmentImage::constant(4, 2, [0.0; 3]).unwrap();
        let bytes = write_hdr(&img);
        let payload = &bytes[bytes.len() - 4 * 4 * 2..];
        assert!(payload.iter().all(|&b| b == 0));
        assert_eq!(read_hdr(&bytes).unwrap(), img);
    }

    #[test]
    fn file_round_trip_within_one_percent() {
        let img = generate_synthetic_env(5, 32, 64).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("env.hdr");
        save_hdr(&img, &path).unwrap();
        let back = load_hdr(&path).unwrap();
        assert_eq!((back.width(), back.height()), (64, 32));
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            let max = a.iter().fold(0f32, |m, &c| m.max(c));
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() <= 0.01 * max, "{a:?} vs {b:?}");
            }
        }
        // Idempotent after the first round trip.
        assert_eq!(read_hdr(&write_hdr(&back)).unwrap(), back);
    }

    #[test]
    fn flat_and_old_rle_scanlines_decode() {
        let mut bytes = b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n-Y 1 +X 4\n".to_vec();
        bytes.extend_from_slice(&[128, 128, 128, 129]);
        bytes.extend_from_slice(&[1, 1, 1, 2]);
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        let img = read_hdr(&bytes).unwrap();
        assert_eq!(img.pixels(), &[[1.0; 3], [1.0; 3], [1.0; 3], [0.0; 3]]);
    }

    #[test]
    fn malformed_inputs_report_offsets() {
        assert!(matches!(
            read_hdr(b"P6\n"),
            Err(Error::HdrParse { offset: 0, .. })
        ));
        let bad_fmt = b"#?RADIANCE\nFORMAT=32-bit_rle_xyze\n\n-Y 1 +X 1\n";
        assert!(matches!(
            read_hdr(bad_fmt),
            Err(Error::HdrParse { offset: 11, .. })
        ));
        let mut truncated = b"#?RADIANCE\n\n-Y 2 +X 8\n".to_vec();
        let header = truncated.len();
        truncated.extend_from_slice(&[2, 2, 0, 8, 136, 5]);
        match read_hdr(&truncated) {
            Err(Error::HdrParse { offset, .. }) => assert!(offset >= header),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(read_hdr(b"#?RADIANCE\n\n+X 2 -Y 2\n").is_err());
    }

    proptest! {
        #[test]
        fn rgbe_quantisation_bound(r in 0f32..1e4, g in 0f32..1e4, b in 0f32..1e4) {
            let enc = encode_rgbe([r, g, b]);
            let dec = decode_rgbe(enc);
            let max = r.max(g).max(b);
            for (x, y) in [r, g, b].iter().zip(dec) {
                prop_assert!((x - y).abs() <= max / 128.0 + 1e-30);
            }
            prop_assert_eq!(encode_rgbe(dec), enc);
        }

        #[test]
        fn rle_round_trips(data in prop::collection::vec(prop_oneof![Just(7u8), any::<u8>()], 1..400)) {
            let mut out = Vec::new();
            encode_channel(&data, &mut out);
            let mut scan = vec![[0u8; 4]; data.len()];
            let mut bytes = vec![0u8; 0];
            // Wrap the encoded channel 0 into a full adaptive scanline with constant other channels.
            if (8..0x8000).contains(&data.len()) {
                bytes.extend_from_slice(&[2, 2, (data.len() >> 8) as u8, (data.len() & 0xff) as u8]);
                bytes.extend_from_slice(&out);
                for _ in 1..4 {
                    encode_channel(&vec![0u8; data.len()], &mut bytes);
                }
                let mut pos = 0;
                read_scanline(&bytes, &mut pos, &mut scan).unwrap();
                prop_assert_eq!(pos, bytes.len());
                let decoded: Vec<u8> = scan.iter().map(|p| p[0]).collect();
                prop_assert_eq!(decoded, data);
            }
        }
    }
}
