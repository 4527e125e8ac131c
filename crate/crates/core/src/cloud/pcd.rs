//! PCD v0.7 reader/writer.
//!
//! Written files carry `x y z rgb` (plus `normal_x normal_y normal_z` when the
//! cloud has normals), all 4-byte floats. `rgb` is the word `0x00RRGGBB`
//! stored bit-for-bit in a float, the usual PCL convention. Binary data is
//! little-endian. Compressed data is not supported.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use super::{CloudError, PointCloud};
use crate::geometry::Vec3;

/// Color used for files without an `rgb` field.
pub const DEFAULT_GRAY: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcdEncoding {
    Ascii,
    Binary,
}

pub fn pack_rgb(c: &Vec3) -> u32 {
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u32;
    (q(c.x) << 16) | (q(c.y) << 8) | q(c.z)
}

pub fn unpack_rgb(word: u32) -> Vec3 {
    Vec3::new(
        ((word >> 16) & 0xff) as f64 / 255.0,
        ((word >> 8) & 0xff) as f64 / 255.0,
        (word & 0xff) as f64 / 255.0,
    )
}

fn header(cloud: &PointCloud, encoding: PcdEncoding) -> String {
    let normals = cloud.has_normals();
    let (fields, sizes, types, counts) = if normals {
        (
            "x y z rgb normal_x normal_y normal_z",
            "4 4 4 4 4 4 4",
            "F F F F F F F",
            "1 1 1 1 1 1 1",
        )
    } else {
        ("x y z rgb", "4 4 4 4", "F F F F", "1 1 1 1")
    };
    let n = cloud.len();
    let data = match encoding {
        PcdEncoding::Ascii => "ascii",
        PcdEncoding::Binary => "binary",
    };
    format!(
        "# .PCD v0.7 - Point Cloud Data file format\n\
         VERSION 0.7\nFIELDS {fields}\nSIZE {sizes}\nTYPE {types}\nCOUNT {counts}\n\
         WIDTH {n}\nHEIGHT 1\nVIEWPOINT 0 0 0 1 0 0 0\nPOINTS {n}\nDATA {data}\n"
    )
}

/// Serializes to bytes; positions and normals are narrowed to `f32`.
pub fn encode_pcd(cloud: &PointCloud, encoding: PcdEncoding) -> Vec<u8> {
    let mut out = header(cloud, encoding).into_bytes();
    let normals = cloud.normals();
    match encoding {
        PcdEncoding::Binary => {
            let stride = if normals.is_some() { 28 } else { 16 };
            out.reserve(stride * cloud.len());
            for (i, (p, c)) in cloud.positions().iter().zip(cloud.colors()).enumerate() {
                for v in p.iter() {
                    out.extend_from_slice(&(*v as f32).to_le_bytes());
                }
                out.extend_from_slice(&pack_rgb(c).to_le_bytes());
                if let Some(ns) = normals {
                    for v in ns[i].iter() {
                        out.extend_from_slice(&(*v as f32).to_le_bytes());
                    }
                }
            }
        }
        PcdEncoding::Ascii => {
            let mut text = String::new();
            for (i, (p, c)) in cloud.positions().iter().zip(cloud.colors()).enumerate() {
                let rgb = f32::from_bits(pack_rgb(c));
                let _ = write!(
                    text,
                    "{} {} {} {:e}",
                    p.x as f32, p.y as f32, p.z as f32, rgb
                );
                if let Some(ns) = normals {
                    let n = ns[i];
                    let _ = write!(text, " {} {} {}", n.x as f32, n.y as f32, n.z as f32);
                }
                text.push('\n');
            }
            out.extend_from_slice(text.as_bytes());
        }
    }
    out
}

pub fn write_pcd(
    cloud: &PointCloud,
    path: impl AsRef<Path>,
    encoding: PcdEncoding,
) -> Result<(), CloudError> {
    let path = path.as_ref();
    let io_err = |source| CloudError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(&encode_pcd(cloud, encoding)).map_err(io_err)?;
    Ok(())
}

pub fn read_pcd(path: impl AsRef<Path>) -> Result<PointCloud, CloudError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| CloudError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_pcd(&bytes)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Role {
    X,
    Y,
    Z,
    Rgb,
    NormalX,
    NormalY,
    NormalZ,
    /// Padding or curvature: read and discarded.
    Ignored,
}

#[derive(Debug, Clone, Copy)]
struct Field {
    role: Role,
    size: usize,
    kind: u8,
}

impl Field {
    fn read_binary(&self, b: &[u8]) -> Result<f64, CloudError> {
        Ok(match (self.kind, self.size) {
            (b'F', 4) => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            (b'F', 8) => f64::from_le_bytes(b[..8].try_into().unwrap()),
            (b'U', 1) => b[0] as f64,
            (b'U', 2) => u16::from_le_bytes(b[..2].try_into().unwrap()) as f64,
            (b'U', 4) => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            (b'I', 1) => b[0] as i8 as f64,
            (b'I', 2) => i16::from_le_bytes(b[..2].try_into().unwrap()) as f64,
            (b'I', 4) => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            (k, s) => {
                return Err(CloudError::UnsupportedPcd(format!(
                    "field type {} size {s}",
                    k as char
                )))
            }
        })
    }

    fn read_rgb_binary(&self, b: &[u8]) -> Result<u32, CloudError> {
        if self.size != 4 {
            return Err(CloudError::UnsupportedPcd(format!("rgb of size {}", self.size)));
        }
        Ok(u32::from_le_bytes(b[..4].try_into().unwrap()))
    }

    fn read_rgb_ascii(&self, tok: &str) -> Result<u32, CloudError> {
        let bad = || CloudError::UnsupportedPcd(format!("bad rgb value {tok:?}"));
        match self.kind {
            b'F' => tok.parse::<f32>().map(f32::to_bits).map_err(|_| bad()),
            b'U' => tok.parse::<u32>().map_err(|_| bad()),
            _ => tok.parse::<i32>().map(|v| v as u32).map_err(|_| bad()),
        }
    }
}

#[derive(Debug)]
struct Header {
    fields: Vec<Field>,
    points: usize,
    binary: bool,
    data_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header, CloudError> {
    let bad = |m: String| CloudError::UnsupportedPcd(m);
    let mut names: Vec<String> = Vec::new();
    let mut sizes: Vec<usize> = Vec::new();
    let mut types: Vec<u8> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    let (mut width, mut height, mut points) = (None, None, None);
    let mut offset = 0;
    loop {
        let rest = &bytes[offset..];
        let Some(end) = rest.iter().position(|&b| b == b'\n') else {
            return Err(bad("header has no DATA line".into()));
        };
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| bad("header is not UTF-8".into()))?
            .trim();
        offset += end + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let key = parts.next().unwrap_or_default().to_ascii_uppercase();
        let vals: Vec<&str> = parts.collect();
        let nums = |vals: &[&str]| -> Result<Vec<usize>, CloudError> {
            vals.iter()
                .map(|v| v.parse().map_err(|_| bad(format!("bad {key} value {v:?}"))))
                .collect()
        };
        match key.as_str() {
            "VERSION" | "VIEWPOINT" => {}
            "FIELDS" => names = vals.iter().map(|s| s.to_string()).collect(),
            "SIZE" => sizes = nums(&vals)?,
            "TYPE" => types = vals.iter().map(|s| s.as_bytes()[0].to_ascii_uppercase()).collect(),
            "COUNT" => counts = nums(&vals)?,
            "WIDTH" => width = nums(&vals)?.first().copied(),
            "HEIGHT" => height = nums(&vals)?.first().copied(),
            "POINTS" => points = nums(&vals)?.first().copied(),
            "DATA" => {
                let binary = match vals.first().copied() {
                    Some("ascii") => false,
                    Some("binary") => true,
                    other => return Err(bad(format!("DATA encoding {other:?}"))),
                };
                if counts.is_empty() {
                    counts = vec![1; names.len()];
                }
                if sizes.len() != names.len() || types.len() != names.len() || counts.len() != names.len() {
                    return Err(bad("FIELDS/SIZE/TYPE/COUNT lengths differ".into()));
                }
                let mut fields = Vec::with_capacity(names.len());
                for i in 0..names.len() {
                    if counts[i] != 1 {
                        return Err(bad(format!("field {} has COUNT {}", names[i], counts[i])));
                    }
                    let role = match names[i].as_str() {
                        "x" => Role::X,
                        "y" => Role::Y,
                        "z" => Role::Z,
                        "rgb" | "rgba" => Role::Rgb,
                        "normal_x" => Role::NormalX,
                        "normal_y" => Role::NormalY,
                        "normal_z" => Role::NormalZ,
                        "_" | "curvature" => Role::Ignored,
                        other => return Err(bad(format!("unsupported field {other:?}"))),
                    };
                    fields.push(Field {
                        role,
                        size: sizes[i],
                        kind: types[i],
                    });
                }
                let points = points
                    .or_else(|| Some(width? * height.unwrap_or(1)))
                    .ok_or_else(|| bad("missing POINTS".into()))?;
                return Ok(Header {
                    fields,
                    points,
                    binary,
                    data_offset: offset,
                });
            }
            other => return Err(bad(format!("unknown header key {other:?}"))),
        }
    }
}

pub fn decode_pcd(bytes: &[u8]) -> Result<PointCloud, CloudError> {
    let header = parse_header(bytes)?;
    let has = |r: Role| header.fields.iter().any(|f| f.role == r);
    if !(has(Role::X) && has(Role::Y) && has(Role::Z)) {
        return Err(CloudError::UnsupportedPcd("x, y and z fields are required".into()));
    }
    let normal_fields = [Role::NormalX, Role::NormalY, Role::NormalZ]
        .iter()
        .filter(|r| has(**r))
        .count();
    if normal_fields != 0 && normal_fields != 3 {
        return Err(CloudError::UnsupportedPcd("partial normal fields".into()));
    }
    let with_normals = normal_fields == 3;
    let with_rgb = has(Role::Rgb);

    let mut positions = Vec::with_capacity(header.points);
    let mut colors = Vec::with_capacity(header.points);
    let mut normals = with_normals.then(|| Vec::with_capacity(header.points));
    let data = &bytes[header.data_offset..];

    let mut push = |p: Vec3, rgb: Option<u32>, n: Vec3| {
        if !p.iter().all(|v| v.is_finite()) {
            return;
        }
        positions.push(p);
        colors.push(rgb.map_or(Vec3::repeat(DEFAULT_GRAY), unpack_rgb));
        if let Some(ns) = normals.as_mut() {
            ns.push(n);
        }
    };

    if header.binary {
        let stride: usize = header.fields.iter().map(|f| f.size).sum();
        if data.len() < stride * header.points {
            return Err(CloudError::UnsupportedPcd(format!(
                "binary payload has {} bytes, expected {}",
                data.len(),
                stride * header.points
            )));
        }
        for rec in data.chunks_exact(stride).take(header.points) {
            let (mut p, mut n, mut rgb) = (Vec3::zeros(), Vec3::zeros(), None);
            let mut at = 0;
            for f in &header.fields {
                let b = &rec[at..at + f.size];
                at += f.size;
                match f.role {
                    Role::X => p.x = f.read_binary(b)?,
                    Role::Y => p.y = f.read_binary(b)?,
                    Role::Z => p.z = f.read_binary(b)?,
                    Role::NormalX => n.x = f.read_binary(b)?,
                    Role::NormalY => n.y = f.read_binary(b)?,
                    Role::NormalZ => n.z = f.read_binary(b)?,
                    Role::Rgb => rgb = Some(f.read_rgb_binary(b)?),
                    Role::Ignored => {}
                }
            }
            push(p, rgb, n);
        }
    } else {
        let text = std::str::from_utf8(data)
            .map_err(|_| CloudError::UnsupportedPcd("ascii payload is not UTF-8".into()))?;
        let rows: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        if rows.len() != header.points {
            return Err(CloudError::UnsupportedPcd(format!(
                "header declares {} points, found {} rows",
                header.points,
                rows.len()
            )));
        }
        for row in rows {
            let toks: Vec<&str> = row.split_whitespace().collect();
            if toks.len() != header.fields.len() {
                return Err(CloudError::UnsupportedPcd(format!("row {row:?} has wrong arity")));
            }
            let (mut p, mut n, mut rgb) = (Vec3::zeros(), Vec3::zeros(), None);
            for (f, tok) in header.fields.iter().zip(toks) {
                let num = || {
                    let bad = |_| CloudError::UnsupportedPcd(format!("bad number {tok:?}"));
                    if f.kind == b'F' && f.size == 4 {
                        tok.parse::<f32>().map(f64::from).map_err(bad)
                    } else {
                        tok.parse::<f64>().map_err(bad)
                    }
                };
                match f.role {
                    Role::X => p.x = num()?,
                    Role::Y => p.y = num()?,
                    Role::Z => p.z = num()?,
                    Role::NormalX => n.x = num()?,
                    Role::NormalY => n.y = num()?,
                    Role::NormalZ => n.z = num()?,
                    Role::Rgb => rgb = Some(f.read_rgb_ascii(tok)?),
                    Role::Ignored => {}
                }
            }
            push(p, rgb, n);
        }
    }
    if !with_rgb {
        log::debug!("PCD has no rgb field; using gray");
    }
    PointCloud::from_parts(positions, colors, normals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, seed: u64, normals: bool) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let positions = (0..n)
            .map(|_| {
                Vec3::new(
                    rng.gen_range(-5.0f32..5.0) as f64,
                    rng.gen_range(-5.0f32..5.0) as f64,
                    rng.gen_range(0.0f32..5.0) as f64,
                )
            })
            .collect();
        let colors = (0..n)
            .map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen()))
            .collect();
        let normals = normals.then(|| {
            (0..n)
                .map(|_| {
                    let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 1.0);
                    v.normalize().map(|x| x as f32 as f64)
                })
                .collect()
        });
        PointCloud::from_parts(positions, colors, normals).unwrap()
    }

    #[test]
    fn ascii_rgb_bits() {
        let c = PointCloud::new(vec![Vec3::new(0.0, 0.0, 1.0)], vec![Vec3::new(1.0, 0.0, 0.0)]).unwrap();
        let bytes = encode_pcd(&c, PcdEncoding::Ascii);
        let text = String::from_utf8(bytes).unwrap();
        let row = text.lines().last().unwrap();
        let toks: Vec<&str> = row.split_whitespace().collect();
        assert_eq!(&toks[..3], &["0", "0", "1"]);
        assert_eq!(toks[3].parse::<f32>().unwrap().to_bits(), 0x00FF_0000);
        let back = decode_pcd(text.as_bytes()).unwrap();
        assert_eq!(back.colors()[0], Vec3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn header_layout() {
        let c = random_cloud(3, 1, true);
        let text = String::from_utf8(encode_pcd(&c, PcdEncoding::Ascii)).unwrap();
        let keys: Vec<&str> = text
            .lines()
            .filter(|l| !l.starts_with('#'))
            .take(10)
            .map(|l| l.split_whitespace().next().unwrap())
            .collect();
        assert_eq!(
            keys,
            ["VERSION", "FIELDS", "SIZE", "TYPE", "COUNT", "WIDTH", "HEIGHT", "VIEWPOINT", "POINTS", "DATA"]
        );
        assert!(text.contains("FIELDS x y z rgb normal_x normal_y normal_z\n"));
        assert!(text.contains("HEIGHT 1\nVIEWPOINT 0 0 0 1 0 0 0\n"));
    }

    #[test]
    fn binary_round_trip_is_bit_exact() {
        for normals in [false, true] {
            let c = random_cloud(100, 2, normals);
            let bytes = encode_pcd(&c, PcdEncoding::Binary);
            let back = decode_pcd(&bytes).unwrap();
            assert_eq!(back.positions(), c.positions());
            for (a, b) in back.colors().iter().zip(c.colors()) {
                assert!((a - b).amax() <= 1.0 / 255.0);
            }
            assert_eq!(back.normals(), c.normals());
            assert_eq!(encode_pcd(&back, PcdEncoding::Binary), bytes);
        }
    }

    #[test]
    fn ascii_round_trip_positions() {
        let c = random_cloud(50, 9, true);
        let back = decode_pcd(&encode_pcd(&c, PcdEncoding::Ascii)).unwrap();
        assert_eq!(back.positions(), c.positions());
        assert_eq!(back.normals(), c.normals());
    }

    #[test]
    fn geometry_only_file_defaults_to_gray() {
        let text = "VERSION 0.7\nFIELDS x y z\nSIZE 4 4 4\nTYPE F F F\nCOUNT 1 1 1\nWIDTH 2\nHEIGHT 1\n\
                    VIEWPOINT 0 0 0 1 0 0 0\nPOINTS 2\nDATA ascii\n1 2 3\n4 5 6\n";
        let c = decode_pcd(text.as_bytes()).unwrap();
        assert_eq!(c.len(), 2);
        assert!(c.colors().iter().all(|c| *c == Vec3::repeat(0.5)));
    }

    #[test]
    fn rejects_unsupported_inputs() {
        let base = "VERSION 0.7\nFIELDS x y z intensity\nSIZE 4 4 4 4\nTYPE F F F F\nCOUNT 1 1 1 1\n\
                    WIDTH 1\nHEIGHT 1\nPOINTS 1\nDATA ascii\n1 2 3 4\n";
        assert!(matches!(decode_pcd(base.as_bytes()), Err(CloudError::UnsupportedPcd(_))));
        let compressed = "VERSION 0.7\nFIELDS x y z\nSIZE 4 4 4\nTYPE F F F\nCOUNT 1 1 1\n\
                          WIDTH 1\nHEIGHT 1\nPOINTS 1\nDATA binary_compressed\n";
        assert!(matches!(decode_pcd(compressed.as_bytes()), Err(CloudError::UnsupportedPcd(_))));
        let short = "VERSION 0.7\nFIELDS x y z\nSIZE 4 4 4\nTYPE F F F\nCOUNT 1 1 1\n\
                     WIDTH 10\nHEIGHT 1\nPOINTS 10\nDATA ascii\n1 2 3\n";
        assert!(decode_pcd(short.as_bytes()).is_err());
        assert!(matches!(
            read_pcd("/nonexistent/file.pcd"),
            Err(CloudError::Io { .. })
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = random_cloud(20, 4, false);
        let path = dir.path().join("c.pcd");
        write_pcd(&c, &path, PcdEncoding::Binary).unwrap();
        assert_eq!(read_pcd(&path).unwrap().positions(), c.positions());
    }

    proptest! {
        #[test]
        fn rgb_pack_unpack(r in 0u32..256, g in 0u32..256, b in 0u32..256) {
            let word = (r << 16) | (g << 8) | b;
            prop_assert_eq!(pack_rgb(&unpack_rgb(word)), word);
        }
    }
}
