//! On-disk formats: binary PPM (P6), little-endian PFM, MVSNet-style camera
//! text files and `key=value` manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4};

use crate::camera::CameraModel;
use crate::error::{MvsError, Result};
use crate::tensor::Tensor;

/// Plane count assumed when a camera file does not carry one.
pub const DEFAULT_NUM_PLANES: usize = 48;

/// 8-bit RGB image, row-major, interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(MvsError::invalid(format!(
                "{}x{} RGB image needs {} bytes, got {}",
                width,
                height,
                width * height * 3,
                data.len()
            )));
        }
        Ok(RgbImage { width, height, data })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Planar [3,H,W] tensor with values in [0, 1].
    pub fn to_tensor(&self) -> Tensor {
        let (h, w) = (self.height, self.width);
        Tensor::from_fn(&[3, h, w], |i| {
            let (c, p) = (i / (h * w), i % (h * w));
            self.data[3 * p + c] as f64 / 255.0
        })
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| MvsError::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| MvsError::io(path, e))
}

/// Reads one whitespace-delimited header token starting at `*pos`.
fn header_token<'a>(bytes: &'a [u8], pos: &mut usize, path: &Path) -> Result<&'a str> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(MvsError::Format {
            path: path.into(),
            offset: start,
            msg: "unexpected end of header".into(),
        });
    }
    std::str::from_utf8(&bytes[start..*pos]).map_err(|_| MvsError::Format {
        path: path.into(),
        offset: start,
        msg: "header is not ASCII".into(),
    })
}

fn header_number<T: std::str::FromStr>(bytes: &[u8], pos: &mut usize, path: &Path, what: &str) -> Result<T> {
    let start = *pos;
    let tok = header_token(bytes, pos, path)?;
    tok.parse().map_err(|_| MvsError::Format {
        path: path.into(),
        offset: start,
        msg: format!("invalid {what} '{tok}'"),
    })
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<RgbImage> {
    let mut pos = 0;
    let magic = header_token(bytes, &mut pos, path)?;
    if magic != "P6" {
        return Err(MvsError::Format {
            path: path.into(),
            offset: 0,
            msg: format!("expected P6 magic, got '{magic}'"),
        });
    }
    let w: usize = header_number(bytes, &mut pos, path, "width")?;
    let h: usize = header_number(bytes, &mut pos, path, "height")?;
    let maxval: u32 = header_number(bytes, &mut pos, path, "maxval")?;
    if maxval != 255 {
        return Err(MvsError::Format {
            path: path.into(),
            offset: pos,
            msg: format!("only 8-bit PPM is supported, maxval {maxval}"),
        });
    }
    pos += 1;
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(MvsError::Format {
            path: path.into(),
            offset: bytes.len(),
            msg: format!("truncated pixel data: need {need} bytes from offset {pos}"),
        });
    }
    RgbImage::new(w, h, bytes[pos..pos + need].to_vec())
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    write_bytes(path, &encode_ppm(img))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    decode_ppm(&read_bytes(path)?, path)
}

/// Single-channel PFM, little-endian, rows stored bottom to top.
/// Values are narrowed to f32.
pub fn encode_pfm(map: &Tensor) -> Result<Vec<u8>> {
    let s = map.shape();
    if s.len() != 2 {
        return Err(MvsError::invalid(format!("PFM needs an [H,W] map, got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    for row in (0..h).rev() {
        for x in 0..w {
            out.extend_from_slice(&(map.data()[row * w + x] as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut pos = 0;
    let magic = header_token(bytes, &mut pos, path)?;
    if magic != "Pf" {
        return Err(MvsError::Format {
            path: path.into(),
            offset: 0,
            msg: format!("expected single-channel 'Pf' magic, got '{magic}'"),
        });
    }
    let w: usize = header_number(bytes, &mut pos, path, "width")?;
    let h: usize = header_number(bytes, &mut pos, path, "height")?;
    let scale_at = pos;
    let scale: f64 = header_number(bytes, &mut pos, path, "scale")?;
    if scale == 0.0 {
        return Err(MvsError::Format {
            path: path.into(),
            offset: scale_at,
            msg: "scale must be non-zero".into(),
        });
    }
    pos += 1;
    let need = w * h * 4;
    if bytes.len() < pos + need {
        return Err(MvsError::Format {
            path: path.into(),
            offset: bytes.len(),
            msg: format!("truncated data: need {need} bytes from offset {pos}"),
        });
    }
    let little = scale < 0.0;
    let mut data = vec![0.0; w * h];
    for (k, chunk) in bytes[pos..pos + need].chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (file_row, x) = (k / w, k % w);
        data[(h - 1 - file_row) * w + x] = v as f64;
    }
    Tensor::new(vec![h, w], data)
}

pub fn write_pfm(path: &Path, map: &Tensor) -> Result<()> {
    write_bytes(path, &encode_pfm(map)?)
}

pub fn read_pfm(path: &Path) -> Result<Tensor> {
    decode_pfm(&read_bytes(path)?, path)
}

pub fn encode_camera(cam: &CameraModel) -> String {
    let mut s = String::from("extrinsic\n");
    for r in 0..4 {
        let row: Vec<String> = (0..4).map(|c| cam.t[(r, c)].to_string()).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s.push_str("\nintrinsic\n");
    for r in 0..3 {
        let row: Vec<String> = (0..3).map(|c| cam.k[(r, c)].to_string()).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s.push_str(&format!("\n{} {}\n", cam.depth_min, cam.depth_interval));
    if cam.num_planes != DEFAULT_NUM_PLANES {
        s.pop();
        s.push_str(&format!(" {}\n", cam.num_planes));
    }
    s
}

/// Parses the camera text format. An optional third value on the depth line
/// is the plane count.
pub fn decode_camera(text: &str, path: &Path) -> Result<CameraModel> {
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
        .collect();
    let perr = |line: usize, msg: String| MvsError::Parse {
        path: path.into(),
        line,
        msg,
    };
    let last_line = text.lines().count().max(1);
    let get = |i: usize| lines.get(i).copied().ok_or_else(|| perr(last_line, "unexpected end of file".into()));
    let numbers = |(line, l): (usize, &str), n: Option<usize>| -> Result<Vec<f64>> {
        let vals: Vec<f64> = l
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| perr(line, format!("invalid number '{t}'"))))
            .collect::<Result<_>>()?;
        if let Some(n) = n {
            if vals.len() != n {
                return Err(perr(line, format!("expected {n} values, got {}", vals.len())));
            }
        }
        Ok(vals)
    };
    let (l0, tag) = get(0)?;
    if tag != "extrinsic" {
        return Err(perr(l0, format!("expected 'extrinsic', got '{tag}'")));
    }
    let mut t = Matrix4::zeros();
    for r in 0..4 {
        let row = numbers(get(1 + r)?, Some(4))?;
        for c in 0..4 {
            t[(r, c)] = row[c];
        }
    }
    let (l5, tag) = get(5)?;
    if tag != "intrinsic" {
        return Err(perr(l5, format!("expected 'intrinsic', got '{tag}'")));
    }
    let mut k = Matrix3::zeros();
    for r in 0..3 {
        let row = numbers(get(6 + r)?, Some(3))?;
        for c in 0..3 {
            k[(r, c)] = row[c];
        }
    }
    let depth_line = get(9)?;
    let d = numbers(depth_line, None)?;
    if d.len() < 2 {
        return Err(perr(depth_line.0, "expected 'depth_min depth_interval'".into()));
    }
    let num_planes = match d.get(2) {
        Some(&n) if n >= 1.0 && n.fract() == 0.0 => n as usize,
        Some(&n) => return Err(perr(depth_line.0, format!("invalid plane count {n}"))),
        None => DEFAULT_NUM_PLANES,
    };
    let cam = CameraModel {
        k,
        t,
        depth_min: d[0],
        depth_interval: d[1],
        num_planes,
    };
    cam.validate().map_err(|e| perr(depth_line.0, e.to_string()))?;
    Ok(cam)
}

pub fn write_camera(path: &Path, cam: &CameraModel) -> Result<()> {
    write_bytes(path, encode_camera(cam).as_bytes())
}

pub fn read_camera(path: &Path) -> Result<CameraModel> {
    let text = fs::read_to_string(path).map_err(|e| MvsError::io(path, e))?;
    decode_camera(&text, path)
}

pub fn encode_manifest(entries: &BTreeMap<String, String>) -> String {
    entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub fn decode_manifest(text: &str, path: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| MvsError::Parse {
            path: path.into(),
            line: i + 1,
            msg: format!("expected key=value, got '{line}'"),
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}
