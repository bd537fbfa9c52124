//! Splat cloud and image file formats.
//!
//! PLY export follows the de-facto Gaussian-splatting vertex layout (log
//! scales, pre-sigmoid opacity, color as the zeroth spherical-harmonic
//! coefficient, zero normals) so third-party viewers load the files.
//! Images ship as 8-bit PNG or as raw little-endian f32 dumps with an
//! `IMGF` header.

use nalgebra::Vector3;
use ndarray::Array3;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{logit, quat_norm, sigmoid, GaussianSplat, SplatCloud};
use crate::error::{Error, Result};

/// Zeroth spherical-harmonic basis constant.
const SH_C0: f64 = 0.282_094_791_773_878_14;

const PLY_PROPS: [&str; 17] = [
    "x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0",
    "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
];

/// Write the cloud as binary little-endian PLY, one vertex per splat.
pub fn export_ply(cloud: &SplatCloud, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "ply")?;
    writeln!(w, "format binary_little_endian 1.0")?;
    writeln!(w, "element vertex {}", cloud.len())?;
    for prop in PLY_PROPS {
        writeln!(w, "property float {prop}")?;
    }
    writeln!(w, "end_header")?;

    let mut put = |v: f64, w: &mut BufWriter<std::fs::File>| -> Result<()> {
        w.write_all(&(v as f32).to_le_bytes())?;
        Ok(())
    };
    for s in &cloud.splats {
        put(s.position.x, &mut w)?;
        put(s.position.y, &mut w)?;
        put(s.position.z, &mut w)?;
        for _ in 0..3 {
            put(0.0, &mut w)?;
        }
        for c in 0..3 {
            put((s.color[c] - 0.5) / SH_C0, &mut w)?;
        }
        put(logit(s.opacity), &mut w)?;
        for k in 0..3 {
            put(s.scale[k].ln(), &mut w)?;
        }
        for k in 0..4 {
            put(s.rotation[k], &mut w)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a PLY written by [`export_ply`] (or any binary-LE PLY carrying the
/// same float properties, in any order).
pub fn import_ply(path: &Path) -> Result<SplatCloud> {
    let file = std::fs::File::open(path)
        .map_err(|_| Error::MissingFile(path.display().to_string()))?;
    let mut reader = BufReader::new(file);

    let mut line = String::new();
    reader.read_line(&mut line)?;
    if line.trim() != "ply" {
        return Err(Error::Parse("not a PLY file".into()));
    }
    let mut vertex_count: Option<usize> = None;
    let mut props: Vec<String> = Vec::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(Error::Parse("unexpected end of PLY header".into()));
        }
        let t = line.trim();
        if t == "end_header" {
            break;
        }
        if t == "format binary_little_endian 1.0" || t.starts_with("comment") {
            continue;
        }
        if let Some(rest) = t.strip_prefix("element vertex ") {
            vertex_count = Some(
                rest.parse()
                    .map_err(|_| Error::Parse(format!("bad vertex count: {rest}")))?,
            );
            continue;
        }
        if let Some(rest) = t.strip_prefix("property float ") {
            props.push(rest.to_string());
            continue;
        }
        if t.starts_with("element") || t.starts_with("property") {
            return Err(Error::Parse(format!("unsupported PLY declaration: {t}")));
        }
        if t.starts_with("format") {
            return Err(Error::Parse(format!("unsupported PLY format: {t}")));
        }
    }
    let n = vertex_count.ok_or_else(|| Error::Parse("PLY header missing vertex count".into()))?;
    let index = |name: &str| -> Result<usize> {
        props
            .iter()
            .position(|p| p == name)
            .ok_or_else(|| Error::Parse(format!("PLY missing property {name}")))
    };
    let ix: Vec<usize> = PLY_PROPS
        .iter()
        .filter(|p| !p.starts_with('n'))
        .map(|p| index(p))
        .collect::<Result<_>>()?;

    let stride = props.len();
    let mut payload = vec![0u8; n * stride * 4];
    reader.read_exact(&mut payload).map_err(|_| {
        Error::Parse(format!(
            "PLY payload truncated (expected {n} vertices x {stride} floats)"
        ))
    })?;

    let mut splats = Vec::with_capacity(n);
    for v in 0..n {
        let at = |slot: usize| -> f64 {
            let o = (v * stride + slot) * 4;
            f32::from_le_bytes([payload[o], payload[o + 1], payload[o + 2], payload[o + 3]])
                as f64
        };
        // ix order: x y z f_dc_0..2 opacity scale_0..2 rot_0..3.
        let q = [at(ix[10]), at(ix[11]), at(ix[12]), at(ix[13])];
        let qn = quat_norm(&q);
        let rotation = if qn < 1e-12 {
            [1.0, 0.0, 0.0, 0.0]
        } else {
            [q[0] / qn, q[1] / qn, q[2] / qn, q[3] / qn]
        };
        splats.push(GaussianSplat {
            position: Vector3::new(at(ix[0]), at(ix[1]), at(ix[2])),
            scale: Vector3::new(at(ix[7]).exp(), at(ix[8]).exp(), at(ix[9]).exp()),
            rotation,
            opacity: sigmoid(at(ix[6])),
            color: [
                (at(ix[3]) * SH_C0 + 0.5).clamp(0.0, 1.0),
                (at(ix[4]) * SH_C0 + 0.5).clamp(0.0, 1.0),
                (at(ix[5]) * SH_C0 + 0.5).clamp(0.0, 1.0),
            ],
        });
    }
    Ok(SplatCloud::new(splats))
}

/// Save an H×W×3 image in [0,1] as 8-bit PNG.
pub fn save_png(image: &Array3<f64>, path: &Path) -> Result<()> {
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if c != 3 {
        return Err(Error::Shape(format!("PNG writer expects 3 channels, got {c}")));
    }
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for row in 0..h {
        for col in 0..w {
            let px = [
                (image[[row, col, 0]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (image[[row, col, 1]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (image[[row, col, 2]].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            buf.put_pixel(col as u32, row as u32, image::Rgb(px));
        }
    }
    buf.save(path)?;
    Ok(())
}

/// Load an 8-bit PNG as H×W×3 floats in [0,1].
pub fn load_png(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|_| Error::MissingFile(path.display().to_string()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::zeros((h, w, 3));
    for row in 0..h {
        for col in 0..w {
            let px = img.get_pixel(col as u32, row as u32);
            for c in 0..3 {
                out[[row, col, c]] = px.0[c] as f64 / 255.0;
            }
        }
    }
    Ok(out)
}

/// Raw float image dump: magic `IMGF`, then u32 H, W, C and f32 row-major
/// data, all little-endian.
pub fn save_imgf(image: &Array3<f64>, path: &Path) -> Result<()> {
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let file = std::fs::File::create(path)?;
    let mut out = BufWriter::new(file);
    out.write_all(b"IMGF")?;
    out.write_all(&(h as u32).to_le_bytes())?;
    out.write_all(&(w as u32).to_le_bytes())?;
    out.write_all(&(c as u32).to_le_bytes())?;
    for v in image.iter() {
        out.write_all(&(*v as f32).to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_imgf(path: &Path) -> Result<Array3<f64>> {
    let file = std::fs::File::open(path)
        .map_err(|_| Error::MissingFile(path.display().to_string()))?;
    let mut reader = BufReader::new(file);
    let mut magic = [0u8; 4];
    reader.read_exact(&mut magic)?;
    if &magic != b"IMGF" {
        return Err(Error::Parse("bad IMGF magic".into()));
    }
    let mut dim = [0u8; 4];
    let mut rd = |r: &mut BufReader<std::fs::File>| -> Result<usize> {
        r.read_exact(&mut dim)?;
        Ok(u32::from_le_bytes(dim) as usize)
    };
    let h = rd(&mut reader)?;
    let w = rd(&mut reader)?;
    let c = rd(&mut reader)?;
    let mut payload = vec![0u8; h * w * c * 4];
    reader
        .read_exact(&mut payload)
        .map_err(|_| Error::Parse("IMGF payload truncated".into()))?;
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Array3::from_shape_vec((h, w, c), data)
        .map_err(|e| Error::Parse(format!("IMGF shape: {e}")))
}
