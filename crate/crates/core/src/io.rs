//! File formats: binary PPM images, PGM masks and 16-bit depth maps, ASCII
//! PLY point clouds and meshes, and the content-hash manifest.

use std::fmt::Write as FmtWrite;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::Error;
use crate::geometry::{LidarSample, Ray};
use crate::math::{Real, Vec3};
use crate::Result;

/// Floating-point RGB raster with channel values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRgb {
    pub width: u32,
    pub height: u32,
    pub data: Vec<[Real; 3]>,
}

impl ImageRgb {
    pub fn new(width: u32, height: u32) -> Self {
        ImageRgb { width, height, data: vec![[0.0; 3]; (width * height) as usize] }
    }

    pub fn at(&self, x: u32, y: u32) -> [Real; 3] {
        self.data[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, v: [Real; 3]) {
        self.data[(y * self.width + x) as usize] = v;
    }
}

/// Boolean per-pixel mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<bool>,
}

impl MaskImage {
    pub fn new(width: u32, height: u32) -> Self {
        MaskImage { width, height, data: vec![false; (width * height) as usize] }
    }

    pub fn at(&self, x: u32, y: u32) -> bool {
        self.data[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        self.data[(y * self.width + x) as usize] = v;
    }

    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

fn quantize8(v: Real) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5) as u8
}

/// Writes a binary 8-bit PPM (P6).
pub fn write_ppm(path: &Path, img: &ImageRgb) -> Result<()> {
    let mut buf = Vec::with_capacity(img.data.len() * 3 + 32);
    write!(buf, "P6\n{} {}\n255\n", img.width, img.height)?;
    for px in &img.data {
        buf.extend_from_slice(&[quantize8(px[0]), quantize8(px[1]), quantize8(px[2])]);
    }
    std::fs::write(path, buf)?;
    Ok(())
}

fn read_pnm_header(reader: &mut impl BufRead, magic: &str) -> Result<(u32, u32, u32)> {
    let mut tokens = Vec::new();
    let mut line = String::new();
    while tokens.len() < 4 {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(Error::Parse("truncated PNM header".into()));
        }
        let body = line.split('#').next().unwrap_or("");
        tokens.extend(body.split_whitespace().map(|s| s.to_string()));
    }
    if tokens[0] != magic {
        return Err(Error::Parse(format!("expected {magic} file, got {}", tokens[0])));
    }
    let parse = |s: &str| {
        s.parse::<u32>()
            .map_err(|_| Error::Parse(format!("bad PNM header token {s}")))
    };
    Ok((parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?))
}

/// Reads a binary 8-bit PPM (P6) into floating-point RGB.
pub fn read_ppm(path: &Path) -> Result<ImageRgb> {
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    let (width, height, maxval) = read_pnm_header(&mut reader, "P6")?;
    if maxval != 255 {
        return Err(Error::Parse("only 8-bit PPM is supported".into()));
    }
    let mut raw = vec![0u8; (width * height * 3) as usize];
    reader.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(3)
        .map(|c| {
            [
                c[0] as Real / 255.0,
                c[1] as Real / 255.0,
                c[2] as Real / 255.0,
            ]
        })
        .collect();
    Ok(ImageRgb { width, height, data })
}

/// Writes a mask as a binary 8-bit PGM (P5), 255 = true.
pub fn write_mask_pgm(path: &Path, mask: &MaskImage) -> Result<()> {
    let mut buf = Vec::with_capacity(mask.data.len() + 32);
    write!(buf, "P5\n{} {}\n255\n", mask.width, mask.height)?;
    buf.extend(mask.data.iter().map(|&b| if b { 255u8 } else { 0 }));
    std::fs::write(path, buf)?;
    Ok(())
}

/// Reads a P5 mask written by [`write_mask_pgm`].
pub fn read_mask_pgm(path: &Path) -> Result<MaskImage> {
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    let (width, height, maxval) = read_pnm_header(&mut reader, "P5")?;
    if maxval != 255 {
        return Err(Error::Parse("only 8-bit mask PGM is supported".into()));
    }
    let mut raw = vec![0u8; (width * height) as usize];
    reader.read_exact(&mut raw)?;
    Ok(MaskImage { width, height, data: raw.into_iter().map(|v| v >= 128).collect() })
}

/// Writes a depth raster as a 16-bit PGM (P5, big-endian samples) with the
/// meters-per-unit scale in a header comment. Sentinel value 0 marks pixels
/// with no surface (sky).
pub fn write_depth_pgm(path: &Path, width: u32, height: u32, depth: &[Option<Real>]) -> Result<()> {
    let max_depth = depth
        .iter()
        .flatten()
        .fold(0.0 as Real, |acc, &d| acc.max(d));
    // unit 1..=65535 spans (0, max_depth]
    let scale = if max_depth > 0.0 { max_depth / 65535.0 } else { 1.0 };
    let mut buf = Vec::with_capacity(depth.len() * 2 + 64);
    write!(
        buf,
        "P5\n# meters_per_unit {}\n# sentinel 0 = no surface\n{} {}\n65535\n",
        scale, width, height
    )?;
    for d in depth {
        let q: u16 = match d {
            Some(v) => ((v / scale).round() as u64).clamp(1, 65535) as u16,
            None => 0,
        };
        buf.extend_from_slice(&q.to_be_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Reads a 16-bit depth PGM back into meters. Returns `(width, height, depths)`.
pub fn read_depth_pgm(path: &Path) -> Result<(u32, u32, Vec<Option<Real>>)> {
    let raw = std::fs::read(path)?;
    let text_end = {
        // header: magic, comments, dims, maxval; find the byte offset after
        // the maxval line
        let mut fields = 0;
        let mut i = 0;
        while i < raw.len() && fields < 4 {
            // skip whitespace
            while i < raw.len() && raw[i].is_ascii_whitespace() {
                i += 1;
            }
            if i < raw.len() && raw[i] == b'#' {
                while i < raw.len() && raw[i] != b'\n' {
                    i += 1;
                }
                continue;
            }
            while i < raw.len() && !raw[i].is_ascii_whitespace() {
                i += 1;
            }
            fields += 1;
        }
        i + 1
    };
    let header = std::str::from_utf8(&raw[..text_end.min(raw.len())])
        .map_err(|_| Error::Parse("bad depth PGM header".into()))?;
    let mut scale = 1.0;
    for line in header.lines() {
        if let Some(rest) = line.strip_prefix("# meters_per_unit ") {
            scale = rest
                .trim()
                .parse::<Real>()
                .map_err(|_| Error::Parse("bad depth scale".into()))?;
        }
    }
    let tokens: Vec<&str> = header
        .lines()
        .filter(|l| !l.starts_with('#'))
        .flat_map(|l| l.split_whitespace())
        .collect();
    if tokens.len() < 4 || tokens[0] != "P5" || tokens[3] != "65535" {
        return Err(Error::Parse("not a 16-bit depth PGM".into()));
    }
    let width: u32 = tokens[1].parse().map_err(|_| Error::Parse("bad width".into()))?;
    let height: u32 = tokens[2].parse().map_err(|_| Error::Parse("bad height".into()))?;
    let body = &raw[text_end..];
    let need = (width * height) as usize * 2;
    if body.len() < need {
        return Err(Error::Parse("depth PGM truncated".into()));
    }
    let depths = body[..need]
        .chunks_exact(2)
        .map(|c| {
            let q = u16::from_be_bytes([c[0], c[1]]);
            if q == 0 {
                None
            } else {
                Some(q as Real * scale)
            }
        })
        .collect();
    Ok((width, height, depths))
}

// ---------------------------------------------------------------------------
// PLY
// ---------------------------------------------------------------------------

/// Writes lidar samples as an ASCII PLY point cloud. Each vertex carries the
/// termination point (x, y, z), the emitter origin (ox, oy, oz), the unit
/// direction (dx, dy, dz), and the termination distance z along with the ray
/// bounds, so the sample list round-trips exactly.
pub fn write_lidar_ply(path: &Path, samples: &[LidarSample]) -> Result<()> {
    let mut s = String::new();
    let _ = writeln!(s, "ply");
    let _ = writeln!(s, "format ascii 1.0");
    let _ = writeln!(s, "comment lidar sweep: per-vertex emitter origin, direction, range");
    let _ = writeln!(s, "element vertex {}", samples.len());
    for prop in [
        "x", "y", "z", "ox", "oy", "oz", "dx", "dy", "dz", "range", "t_near", "t_far",
    ] {
        let _ = writeln!(s, "property double {prop}");
    }
    let _ = writeln!(s, "end_header");
    for sample in samples {
        let p = crate::geometry::lidar_point(sample);
        let o = sample.ray.origin;
        let d = sample.ray.direction;
        let _ = writeln!(
            s,
            "{} {} {} {} {} {} {} {} {} {} {} {}",
            p[0], p[1], p[2], o[0], o[1], o[2], d[0], d[1], d[2], sample.z,
            sample.ray.t_near, sample.ray.t_far
        );
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Reads a lidar PLY written by [`write_lidar_ply`].
pub fn read_lidar_ply(path: &Path) -> Result<Vec<LidarSample>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();
    let mut count = None;
    let mut props: Vec<String> = Vec::new();
    for line in lines.by_ref() {
        let line = line?;
        let line = line.trim();
        if let Some(rest) = line.strip_prefix("element vertex ") {
            count = Some(
                rest.parse::<usize>()
                    .map_err(|_| Error::Parse("bad vertex count".into()))?,
            );
        } else if let Some(rest) = line.strip_prefix("property double ") {
            props.push(rest.to_string());
        } else if line == "end_header" {
            break;
        }
    }
    let count = count.ok_or_else(|| Error::Parse("missing vertex element".into()))?;
    let idx = |name: &str| -> Result<usize> {
        props
            .iter()
            .position(|p| p == name)
            .ok_or_else(|| Error::Parse(format!("lidar PLY missing property {name}")))
    };
    let (iox, ioy, ioz) = (idx("ox")?, idx("oy")?, idx("oz")?);
    let (idx_, idy, idz) = (idx("dx")?, idx("dy")?, idx("dz")?);
    let (irange, inear, ifar) = (idx("range")?, idx("t_near")?, idx("t_far")?);
    let mut out = Vec::with_capacity(count);
    for line in lines.take(count) {
        let line = line?;
        let vals: Vec<Real> = line
            .split_whitespace()
            .map(|t| t.parse::<Real>().map_err(|_| Error::Parse("bad PLY float".into())))
            .collect::<Result<_>>()?;
        if vals.len() != props.len() {
            return Err(Error::Parse("lidar PLY row width mismatch".into()));
        }
        // Stored directions are already unit; skip renormalization so the
        // round trip is bit exact.
        let dir = [vals[idx_], vals[idy], vals[idz]];
        if (crate::math::norm(dir) - 1.0).abs() > 1e-9 {
            return Err(Error::Parse("lidar PLY direction is not unit length".into()));
        }
        let ray = Ray {
            origin: [vals[iox], vals[ioy], vals[ioz]],
            direction: dir,
            t_near: vals[inear],
            t_far: vals[ifar],
        };
        out.push(LidarSample::new(ray, vals[irange])?);
    }
    if out.len() != count {
        return Err(Error::Parse("lidar PLY truncated".into()));
    }
    Ok(out)
}

/// An indexed triangle mesh with per-vertex colors.
#[derive(Debug, Clone, Default)]
pub struct ColoredMesh {
    pub vertices: Vec<Vec3>,
    pub colors: Vec<[Real; 3]>,
    pub triangles: Vec<[usize; 3]>,
}

/// Writes a colored triangle mesh as ASCII PLY (uchar RGB per vertex).
pub fn write_mesh_ply(path: &Path, mesh: &ColoredMesh) -> Result<()> {
    let mut s = String::new();
    let _ = writeln!(s, "ply");
    let _ = writeln!(s, "format ascii 1.0");
    let _ = writeln!(s, "element vertex {}", mesh.vertices.len());
    for prop in ["x", "y", "z"] {
        let _ = writeln!(s, "property double {prop}");
    }
    for prop in ["red", "green", "blue"] {
        let _ = writeln!(s, "property uchar {prop}");
    }
    let _ = writeln!(s, "element face {}", mesh.triangles.len());
    let _ = writeln!(s, "property list uchar int vertex_indices");
    let _ = writeln!(s, "end_header");
    for (v, c) in mesh.vertices.iter().zip(&mesh.colors) {
        let _ = writeln!(
            s,
            "{} {} {} {} {} {}",
            v[0], v[1], v[2], quantize8(c[0]), quantize8(c[1]), quantize8(c[2])
        );
    }
    for t in &mesh.triangles {
        let _ = writeln!(s, "3 {} {} {}", t[0], t[1], t[2]);
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Writes a plain point cloud as ASCII PLY.
pub fn write_points_ply(path: &Path, points: &[Vec3]) -> Result<()> {
    let mut s = String::new();
    let _ = writeln!(s, "ply");
    let _ = writeln!(s, "format ascii 1.0");
    let _ = writeln!(s, "element vertex {}", points.len());
    for prop in ["x", "y", "z"] {
        let _ = writeln!(s, "property double {prop}");
    }
    let _ = writeln!(s, "end_header");
    for p in points {
        let _ = writeln!(s, "{} {} {}", p[0], p[1], p[2]);
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// FNV-1a 64-bit content hash, hex encoded. Used for scene manifests.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}

pub fn hash_file(path: &Path) -> Result<String> {
    Ok(content_hash(&std::fs::read(path)?))
}
