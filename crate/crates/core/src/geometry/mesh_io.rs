//! PLY (ASCII and binary) and OBJ mesh loading, plus an ASCII PLY writer.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use super::mesh::Mesh;
use crate::error::{OsopError, Result};

pub fn load_mesh(path: &Path) -> Result<Mesh> {
    let bytes = std::fs::read(path)?;
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .as_deref()
    {
        Some("ply") => parse_ply(&bytes),
        Some("obj") => parse_obj(&bytes),
        other => Err(OsopError::MeshParse(format!(
            "unsupported mesh extension {other:?}"
        ))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return Err(OsopError::MeshParse(format!("unknown PLY type {s}"))),
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { name: String, count: Scalar, item: Scalar },
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Encoding {
    Ascii,
    LittleEndian,
    BigEndian,
}

trait ValueSource {
    fn next(&mut self, ty: Scalar) -> Result<f64>;
}

struct AsciiSource<'a> {
    tokens: std::iter::Peekable<std::str::SplitAsciiWhitespace<'a>>,
}

impl ValueSource for AsciiSource<'_> {
    fn next(&mut self, _ty: Scalar) -> Result<f64> {
        let tok = self
            .tokens
            .next()
            .ok_or_else(|| OsopError::MeshParse("unexpected end of PLY body".into()))?;
        tok.parse::<f64>()
            .map_err(|_| OsopError::MeshParse(format!("bad PLY number {tok}")))
    }
}

struct BinarySource<'a> {
    data: &'a [u8],
    pos: usize,
    big_endian: bool,
}

impl ValueSource for BinarySource<'_> {
    fn next(&mut self, ty: Scalar) -> Result<f64> {
        let n = ty.size();
        if self.pos + n > self.data.len() {
            return Err(OsopError::MeshParse("unexpected end of PLY body".into()));
        }
        let mut buf = [0u8; 8];
        buf[..n].copy_from_slice(&self.data[self.pos..self.pos + n]);
        if self.big_endian {
            buf[..n].reverse();
        }
        self.pos += n;
        Ok(match ty {
            Scalar::I8 => buf[0] as i8 as f64,
            Scalar::U8 => buf[0] as f64,
            Scalar::I16 => i16::from_le_bytes([buf[0], buf[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([buf[0], buf[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(buf),
        })
    }
}

pub fn parse_ply(bytes: &[u8]) -> Result<Mesh> {
    let mut reader = std::io::Cursor::new(bytes);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    if line.trim() != "ply" {
        return Err(OsopError::MeshParse("missing 'ply' magic".into()));
    }
    let mut encoding = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(OsopError::MeshParse("header not terminated".into()));
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["format", fmt, _version] => {
                encoding = Some(match *fmt {
                    "ascii" => Encoding::Ascii,
                    "binary_little_endian" => Encoding::LittleEndian,
                    "binary_big_endian" => Encoding::BigEndian,
                    _ => return Err(OsopError::MeshParse(format!("unknown format {fmt}"))),
                })
            }
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| OsopError::MeshParse("bad element count".into()))?,
                props: Vec::new(),
            }),
            ["property", "list", count, item, name] => elements
                .last_mut()
                .ok_or_else(|| OsopError::MeshParse("property before element".into()))?
                .props
                .push(Property::List {
                    name: name.to_string(),
                    count: Scalar::parse(count)?,
                    item: Scalar::parse(item)?,
                }),
            ["property", ty, name] => elements
                .last_mut()
                .ok_or_else(|| OsopError::MeshParse("property before element".into()))?
                .props
                .push(Property::Scalar {
                    name: name.to_string(),
                    ty: Scalar::parse(ty)?,
                }),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            _ => return Err(OsopError::MeshParse(format!("bad header line {line:?}"))),
        }
    }
    let encoding = encoding.ok_or_else(|| OsopError::MeshParse("missing format".into()))?;
    let mut body = Vec::new();
    reader.read_to_end(&mut body)?;
    let text;
    let mut source: Box<dyn ValueSource> = match encoding {
        Encoding::Ascii => {
            text = String::from_utf8_lossy(&body).into_owned();
            Box::new(AsciiSource {
                tokens: text.split_ascii_whitespace().peekable(),
            })
        }
        e => Box::new(BinarySource {
            data: &body,
            pos: 0,
            big_endian: e == Encoding::BigEndian,
        }),
    };

    let mut vertices = Vec::new();
    let mut colors: Vec<[f64; 3]> = Vec::new();
    let mut has_colors = false;
    let mut triangles = Vec::new();
    for el in &elements {
        let is_vertex = el.name == "vertex";
        let is_face = el.name == "face";
        if is_vertex {
            has_colors = el.props.iter().any(|p| matches!(p, Property::Scalar { name, .. } if name == "red"));
        }
        for _ in 0..el.count {
            let mut pos = [0.0; 3];
            let mut rgb = [0.0; 3];
            for prop in &el.props {
                match prop {
                    Property::Scalar { name, ty } => {
                        let v = source.next(*ty)?;
                        if is_vertex {
                            let scale = match ty {
                                Scalar::U8 => 1.0 / 255.0,
                                Scalar::U16 => 1.0 / 65535.0,
                                _ => 1.0,
                            };
                            match name.as_str() {
                                "x" => pos[0] = v,
                                "y" => pos[1] = v,
                                "z" => pos[2] = v,
                                "red" => rgb[0] = v * scale,
                                "green" => rgb[1] = v * scale,
                                "blue" => rgb[2] = v * scale,
                                _ => {}
                            }
                        }
                    }
                    Property::List { name, count, item } => {
                        let n = source.next(*count)? as usize;
                        let mut idx = Vec::with_capacity(n);
                        for _ in 0..n {
                            idx.push(source.next(*item)?);
                        }
                        if is_face && (name == "vertex_indices" || name == "vertex_index") {
                            for k in 1..n.saturating_sub(1) {
                                triangles.push([idx[0] as u32, idx[k] as u32, idx[k + 1] as u32]);
                            }
                        }
                    }
                }
            }
            if is_vertex {
                vertices.push(Vector3::from(pos));
                colors.push(rgb);
            }
        }
    }
    Mesh::new(vertices, triangles, has_colors.then_some(colors))
}

pub fn parse_obj(bytes: &[u8]) -> Result<Mesh> {
    let text = String::from_utf8_lossy(bytes);
    let mut vertices = Vec::new();
    let mut colors = Vec::new();
    let mut any_color = false;
    let mut triangles = Vec::new();
    let num = |s: &str| {
        s.parse::<f64>()
            .map_err(|_| OsopError::MeshParse(format!("bad OBJ number {s}")))
    };
    for line in text.lines() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.first().copied() {
            Some("v") => {
                if toks.len() < 4 {
                    return Err(OsopError::MeshParse("short vertex line".into()));
                }
                vertices.push(Vector3::new(num(toks[1])?, num(toks[2])?, num(toks[3])?));
                if toks.len() >= 7 {
                    any_color = true;
                    colors.push([num(toks[4])?, num(toks[5])?, num(toks[6])?]);
                } else {
                    colors.push([0.0; 3]);
                }
            }
            Some("f") => {
                let mut idx = Vec::with_capacity(toks.len() - 1);
                for t in &toks[1..] {
                    let first = t.split('/').next().unwrap_or("");
                    let i: i64 = first
                        .parse()
                        .map_err(|_| OsopError::MeshParse(format!("bad face index {t}")))?;
                    let resolved = if i < 0 { vertices.len() as i64 + i } else { i - 1 };
                    if resolved < 0 {
                        return Err(OsopError::MeshParse(format!("face index {i} out of range")));
                    }
                    idx.push(resolved as u32);
                }
                for k in 1..idx.len().saturating_sub(1) {
                    triangles.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    Mesh::new(vertices, triangles, any_color.then_some(colors))
}

/// Writes an ASCII PLY with 8-bit vertex colors when present.
pub fn write_ply<W: Write>(mesh: &Mesh, mut w: W) -> Result<()> {
    writeln!(w, "ply\nformat ascii 1.0")?;
    writeln!(w, "element vertex {}", mesh.vertices().len())?;
    writeln!(w, "property double x\nproperty double y\nproperty double z")?;
    if mesh.colors().is_some() {
        writeln!(w, "property uchar red\nproperty uchar green\nproperty uchar blue")?;
    }
    writeln!(w, "element face {}", mesh.triangles().len())?;
    writeln!(w, "property list uchar int vertex_indices\nend_header")?;
    for (i, v) in mesh.vertices().iter().enumerate() {
        write!(w, "{} {} {}", v.x, v.y, v.z)?;
        if let Some(c) = mesh.colors() {
            let q = c[i].map(|x| (x.clamp(0.0, 1.0) * 255.0).round() as u8);
            write!(w, " {} {} {}", q[0], q[1], q[2])?;
        }
        writeln!(w)?;
    }
    for t in mesh.triangles() {
        writeln!(w, "3 {} {} {}", t[0], t[1], t[2])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const ASCII_PLY: &str = "ply
format ascii 1.0
comment tetra
element vertex 4
property float x
property float y
property float z
property uchar red
property uchar green
property uchar blue
element face 2
property list uchar int vertex_indices
end_header
0 0 0 255 0 0
10 0 0 0 255 0
0 10 0 0 0 255
0 0 10 255 255 255
3 0 1 2
4 0 1 3 2
";

    #[test]
    fn ascii_ply_with_colors_and_quad() {
        let m = parse_ply(ASCII_PLY.as_bytes()).unwrap();
        assert_eq!(m.vertices().len(), 4);
        assert_eq!(m.triangles().len(), 3);
        assert_eq!(m.colors().unwrap()[1], [0.0, 1.0, 0.0]);
    }

    #[test]
    fn binary_little_endian_ply() {
        let mut data = b"ply\nformat binary_little_endian 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nelement face 1\nproperty list uchar uint vertex_indices\nend_header\n".to_vec();
        for v in [[0f32, 0., 0.], [5., 0., 0.], [0., 5., 0.]] {
            for c in v {
                data.extend_from_slice(&c.to_le_bytes());
            }
        }
        data.push(3);
        for i in [0u32, 1, 2] {
            data.extend_from_slice(&i.to_le_bytes());
        }
        let m = parse_ply(&data).unwrap();
        assert_eq!(m.triangles(), &[[0, 1, 2]]);
        assert!((m.diameter() - 50f64.sqrt()).abs() < 1e-6);
        assert!(m.colors().is_none());
    }

    #[test]
    fn obj_with_negative_indices_and_colors() {
        let obj = "v 0 0 0 1 0 0\nv 1 0 0 0 1 0\nv 0 1 0 0 0 1\nv 1 1 0 1 1 1\nf 1/1 2/2 3/3\nf -3 -1 -2\n";
        let m = parse_obj(obj.as_bytes()).unwrap();
        assert_eq!(m.triangles().len(), 2);
        assert_eq!(m.triangles()[1], [1, 3, 2]);
        assert!(m.colors().is_some());
    }

    #[test]
    fn ply_writer_roundtrip() {
        let m = parse_ply(ASCII_PLY.as_bytes()).unwrap();
        let mut buf = Vec::new();
        write_ply(&m, &mut buf).unwrap();
        let back = parse_ply(&buf).unwrap();
        assert_eq!(back.vertices(), m.vertices());
        assert_eq!(back.triangles(), m.triangles());
        assert_eq!(back.colors(), m.colors());
    }

    #[test]
    fn malformed_inputs_are_errors() {
        assert!(parse_ply(b"plx\n").is_err());
        assert!(parse_ply(b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nend_header\n").is_err());
        assert!(parse_obj(b"v 0 0\n").is_err());
    }
}
