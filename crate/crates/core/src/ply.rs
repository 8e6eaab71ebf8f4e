//! PLY point-cloud reader and writer (ASCII and binary little-endian).
//!
//! The reader needs a `vertex` element with `x y z` (float or double) and
//! `red green blue` (uchar). `nx ny nz` are picked up when present; unknown
//! properties and extra elements are skipped. The writer emits doubles so
//! binary round trips are byte-exact.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::pointcloud::PointCloud;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(s: &str) -> Option<ScalarType> {
        Some(match s {
            "char" | "int8" => ScalarType::I8,
            "uchar" | "uint8" => ScalarType::U8,
            "short" | "int16" => ScalarType::I16,
            "ushort" | "uint16" => ScalarType::U16,
            "int" | "int32" => ScalarType::I32,
            "uint" | "uint32" => ScalarType::U32,
            "float" | "float32" => ScalarType::F32,
            "double" | "float64" => ScalarType::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            ScalarType::I8 | ScalarType::U8 => 1,
            ScalarType::I16 | ScalarType::U16 => 2,
            ScalarType::I32 | ScalarType::U32 | ScalarType::F32 => 4,
            ScalarType::F64 => 8,
        }
    }

    fn is_float(self) -> bool {
        matches!(self, ScalarType::F32 | ScalarType::F64)
    }
}

#[derive(Debug)]
struct Property {
    name: String,
    /// Count type for list properties.
    count_ty: Option<ScalarType>,
    ty: ScalarType,
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

struct Header {
    format: PlyFormat,
    elements: Vec<Element>,
    /// Byte offset of the first data byte after `end_header`.
    data_start: usize,
    /// 1-based line number of the first data line (ASCII payloads).
    data_line: usize,
}

fn parse_err(path: &Path, kind: impl Into<String>, location: String) -> Error {
    Error::PlyParse {
        path: path.to_path_buf(),
        kind: kind.into(),
        location,
    }
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<Header> {
    let mut pos = 0usize;
    let mut line_no = 0usize;
    let next_line = |pos: &mut usize, line_no: &mut usize| -> Option<String> {
        if *pos >= bytes.len() {
            return None;
        }
        let end = bytes[*pos..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|i| *pos + i)
            .unwrap_or(bytes.len());
        let line = String::from_utf8_lossy(&bytes[*pos..end])
            .trim_end_matches('\r')
            .to_string();
        *pos = (end + 1).min(bytes.len() + 1);
        *line_no += 1;
        Some(line)
    };

    let magic = next_line(&mut pos, &mut line_no)
        .ok_or_else(|| parse_err(path, "empty file", "line 1".into()))?;
    if magic.trim() != "ply" {
        return Err(parse_err(path, "missing `ply` magic", "line 1".into()));
    }

    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let line = next_line(&mut pos, &mut line_no).ok_or_else(|| {
            parse_err(path, "header ended without `end_header`", format!("line {line_no}"))
        })?;
        let loc = format!("line {line_no}");
        let mut tok = line.split_whitespace();
        match tok.next() {
            None | Some("comment") | Some("obj_info") => {}
            Some("format") => {
                format = Some(match tok.next() {
                    Some("ascii") => PlyFormat::Ascii,
                    Some("binary_little_endian") => PlyFormat::BinaryLittleEndian,
                    other => {
                        return Err(parse_err(
                            path,
                            format!("unsupported format {other:?}"),
                            loc,
                        ))
                    }
                });
            }
            Some("element") => {
                let name = tok
                    .next()
                    .ok_or_else(|| parse_err(path, "element without name", loc.clone()))?;
                let count: usize = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| parse_err(path, "element without count", loc.clone()))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            Some("property") => {
                let elem = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(path, "property before element", loc.clone()))?;
                let first = tok
                    .next()
                    .ok_or_else(|| parse_err(path, "property without type", loc.clone()))?;
                let (count_ty, ty_str) = if first == "list" {
                    let count_ty = tok
                        .next()
                        .and_then(ScalarType::parse)
                        .ok_or_else(|| parse_err(path, "bad list count type", loc.clone()))?;
                    let ty = tok
                        .next()
                        .ok_or_else(|| parse_err(path, "list without value type", loc.clone()))?;
                    (Some(count_ty), ty)
                } else {
                    (None, first)
                };
                let ty = ScalarType::parse(ty_str).ok_or_else(|| {
                    parse_err(path, format!("unknown property type `{ty_str}`"), loc.clone())
                })?;
                let name = tok
                    .next()
                    .ok_or_else(|| parse_err(path, "property without name", loc.clone()))?;
                elem.props.push(Property {
                    name: name.to_string(),
                    count_ty,
                    ty,
                });
            }
            Some("end_header") => break,
            Some(other) => {
                return Err(parse_err(path, format!("unknown header line `{other}`"), loc));
            }
        }
    }

    let format = format
        .ok_or_else(|| parse_err(path, "header missing `format` line", format!("line {line_no}")))?;
    Ok(Header {
        format,
        elements,
        data_start: pos.min(bytes.len()),
        data_line: line_no + 1,
    })
}

/// Column layout of the vertex element we care about.
struct VertexLayout {
    xyz: [usize; 3],
    rgb: [usize; 3],
    normal: Option<[usize; 3]>,
}

fn vertex_layout(path: &Path, elem: &Element) -> Result<VertexLayout> {
    let find = |name: &str| elem.props.iter().position(|p| p.name == name);
    let scalar = |name: &str, want_float: bool, want_u8: bool| -> Result<Option<usize>> {
        let Some(i) = find(name) else { return Ok(None) };
        let p = &elem.props[i];
        if p.count_ty.is_some()
            || (want_float && !p.ty.is_float())
            || (want_u8 && p.ty != ScalarType::U8)
        {
            return Err(parse_err(
                path,
                format!("vertex property `{name}` has unsupported type"),
                "header".into(),
            ));
        }
        Ok(Some(i))
    };
    let req = |name: &str, want_float: bool, want_u8: bool| -> Result<usize> {
        scalar(name, want_float, want_u8)?.ok_or_else(|| {
            parse_err(path, format!("vertex element missing `{name}`"), "header".into())
        })
    };
    let xyz = [req("x", true, false)?, req("y", true, false)?, req("z", true, false)?];
    let rgb = [
        req("red", false, true)?,
        req("green", false, true)?,
        req("blue", false, true)?,
    ];
    let n = [
        scalar("nx", true, false)?,
        scalar("ny", true, false)?,
        scalar("nz", true, false)?,
    ];
    let normal = match n {
        [Some(a), Some(b), Some(c)] => Some([a, b, c]),
        [None, None, None] => None,
        _ => {
            return Err(parse_err(
                path,
                "vertex element has an incomplete nx/ny/nz set",
                "header".into(),
            ))
        }
    };
    Ok(VertexLayout { xyz, rgb, normal })
}

fn read_binary_scalar(path: &Path, bytes: &[u8], pos: &mut usize, ty: ScalarType) -> Result<f64> {
    let size = ty.size();
    let slice = bytes.get(*pos..*pos + size).ok_or_else(|| {
        parse_err(path, "unexpected end of binary payload", format!("byte {}", *pos))
    })?;
    let v = match ty {
        ScalarType::I8 => slice[0] as i8 as f64,
        ScalarType::U8 => slice[0] as f64,
        ScalarType::I16 => i16::from_le_bytes(slice.try_into().unwrap()) as f64,
        ScalarType::U16 => u16::from_le_bytes(slice.try_into().unwrap()) as f64,
        ScalarType::I32 => i32::from_le_bytes(slice.try_into().unwrap()) as f64,
        ScalarType::U32 => u32::from_le_bytes(slice.try_into().unwrap()) as f64,
        ScalarType::F32 => f32::from_le_bytes(slice.try_into().unwrap()) as f64,
        ScalarType::F64 => f64::from_le_bytes(slice.try_into().unwrap()),
    };
    *pos += size;
    Ok(v)
}

/// Reads a point cloud from a PLY file. The grid depth is inferred as the
/// smallest depth whose grid contains every position.
pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let bytes = std::fs::read(path)?;
    let header = parse_header(path, &bytes)?;

    let mut positions: Vec<Vector3<f64>> = Vec::new();
    let mut colors: Vec<Vector3<f32>> = Vec::new();
    let mut normals: Vec<Vector3<f64>> = Vec::new();
    let mut layout_used = None;

    match header.format {
        PlyFormat::Ascii => {
            let text = String::from_utf8_lossy(&bytes[header.data_start..]);
            let mut lines = text.lines();
            let mut line_no = header.data_line - 1;
            for elem in &header.elements {
                let layout = if elem.name == "vertex" {
                    let l = vertex_layout(path, elem)?;
                    positions.reserve(elem.count);
                    colors.reserve(elem.count);
                    Some(l)
                } else {
                    None
                };
                for _ in 0..elem.count {
                    line_no += 1;
                    let line = lines.next().ok_or_else(|| {
                        parse_err(path, "unexpected end of data", format!("line {line_no}"))
                    })?;
                    let loc = || format!("line {line_no}");
                    let mut tok = line.split_whitespace();
                    let mut next_val = |what: &str| -> Result<f64> {
                        tok.next()
                            .ok_or_else(|| parse_err(path, format!("row too short, missing {what}"), loc()))?
                            .parse::<f64>()
                            .map_err(|e| parse_err(path, format!("bad {what}: {e}"), loc()))
                    };
                    let mut row = Vec::with_capacity(elem.props.len());
                    for p in &elem.props {
                        if let Some(_count_ty) = p.count_ty {
                            let n = next_val("list count")? as usize;
                            for _ in 0..n {
                                next_val("list value")?;
                            }
                            row.push(0.0);
                        } else {
                            row.push(next_val(&p.name)?);
                        }
                    }
                    if let Some(l) = &layout {
                        push_vertex(l, &row, &mut positions, &mut colors, &mut normals);
                    }
                }
                if layout.is_some() {
                    layout_used = layout;
                }
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let mut pos = header.data_start;
            for elem in &header.elements {
                let layout = if elem.name == "vertex" {
                    let l = vertex_layout(path, elem)?;
                    positions.reserve(elem.count);
                    colors.reserve(elem.count);
                    Some(l)
                } else {
                    None
                };
                let mut row = Vec::with_capacity(elem.props.len());
                for _ in 0..elem.count {
                    row.clear();
                    for p in &elem.props {
                        if let Some(count_ty) = p.count_ty {
                            let n = read_binary_scalar(path, &bytes, &mut pos, count_ty)? as usize;
                            let skip = n * p.ty.size();
                            if pos + skip > bytes.len() {
                                return Err(parse_err(
                                    path,
                                    "unexpected end of binary payload",
                                    format!("byte {pos}"),
                                ));
                            }
                            pos += skip;
                            row.push(0.0);
                        } else {
                            row.push(read_binary_scalar(path, &bytes, &mut pos, p.ty)?);
                        }
                    }
                    if let Some(l) = &layout {
                        push_vertex(l, &row, &mut positions, &mut colors, &mut normals);
                    }
                }
                if layout.is_some() {
                    layout_used = layout;
                }
            }
        }
    }

    let layout = layout_used
        .ok_or_else(|| parse_err(path, "file has no vertex element", "header".into()))?;
    let mut cloud = PointCloud::new(infer_depth(&positions));
    cloud.positions = positions;
    cloud.colors = colors;
    cloud.normals = layout.normal.map(|_| normals);
    cloud.validate()?;
    Ok(cloud)
}

fn push_vertex(
    layout: &VertexLayout,
    row: &[f64],
    positions: &mut Vec<Vector3<f64>>,
    colors: &mut Vec<Vector3<f32>>,
    normals: &mut Vec<Vector3<f64>>,
) {
    let [ix, iy, iz] = layout.xyz;
    positions.push(Vector3::new(row[ix], row[iy], row[iz]));
    let [ir, ig, ib] = layout.rgb;
    colors.push(Vector3::new(
        row[ir] as f32 / 255.0,
        row[ig] as f32 / 255.0,
        row[ib] as f32 / 255.0,
    ));
    if let Some([ia, ib, ic]) = layout.normal {
        normals.push(Vector3::new(row[ia], row[ib], row[ic]));
    }
}

fn infer_depth(positions: &[Vector3<f64>]) -> u32 {
    let mut max = 0.0f64;
    for p in positions {
        for c in p.iter() {
            max = max.max(*c);
        }
    }
    let mut depth = 1;
    while depth < 30 && (1u64 << depth) as f64 <= max {
        depth += 1;
    }
    depth
}

fn color_u8(c: f32) -> u8 {
    (c * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Writes a point cloud as PLY. Positions and normals are stored as doubles
/// so binary files round-trip bit-exactly.
pub fn write_ply(cloud: &PointCloud, path: &Path, format: PlyFormat) -> Result<()> {
    let mut header = String::new();
    header.push_str("ply\n");
    header.push_str(match format {
        PlyFormat::Ascii => "format ascii 1.0\n",
        PlyFormat::BinaryLittleEndian => "format binary_little_endian 1.0\n",
    });
    let _ = writeln!(header, "element vertex {}", cloud.len());
    for name in ["x", "y", "z"] {
        let _ = writeln!(header, "property double {name}");
    }
    if cloud.has_normals() {
        for name in ["nx", "ny", "nz"] {
            let _ = writeln!(header, "property double {name}");
        }
    }
    for name in ["red", "green", "blue"] {
        let _ = writeln!(header, "property uchar {name}");
    }
    header.push_str("end_header\n");

    let mut out: Vec<u8> = header.into_bytes();
    match format {
        PlyFormat::Ascii => {
            let mut body = String::new();
            for i in 0..cloud.len() {
                let p = cloud.positions[i];
                let _ = write!(body, "{} {} {}", p.x, p.y, p.z);
                if let Some(normals) = &cloud.normals {
                    let n = normals[i];
                    let _ = write!(body, " {} {} {}", n.x, n.y, n.z);
                }
                let c = cloud.colors[i];
                let _ = writeln!(
                    body,
                    " {} {} {}",
                    color_u8(c.x),
                    color_u8(c.y),
                    color_u8(c.z)
                );
            }
            out.extend_from_slice(body.as_bytes());
        }
        PlyFormat::BinaryLittleEndian => {
            for i in 0..cloud.len() {
                for c in cloud.positions[i].iter() {
                    out.extend_from_slice(&c.to_le_bytes());
                }
                if let Some(normals) = &cloud.normals {
                    for c in normals[i].iter() {
                        out.extend_from_slice(&c.to_le_bytes());
                    }
                }
                let c = cloud.colors[i];
                out.extend_from_slice(&[color_u8(c.x), color_u8(c.y), color_u8(c.z)]);
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}
