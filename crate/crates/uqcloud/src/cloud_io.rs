//! Point clouds on disk: whitespace-separated ASCII (`x y z r g b [label]`)
//! and PLY, ASCII or binary little-endian.
//!
//! PLY vertices need `x`, `y`, `z`; `red`, `green`, `blue` (0 when absent)
//! and an integer `label` are optional. Any other property or element is
//! rejected.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use uqcloud_core::datapipe::PointCloud;

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

/// Reads a cloud, sniffing PLY by its magic line.
pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    let source = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut cloud = if bytes.starts_with(b"ply\n") || bytes.starts_with(b"ply\r\n") {
        parse_ply(&bytes, path)?
    } else {
        let text = std::str::from_utf8(&bytes).map_err(|_| Error::format(path, "not UTF-8 text and not PLY"))?;
        parse_ascii(text, path)?
    };
    cloud.source = source;
    Ok(cloud)
}

/// Writes `.ply` files as binary PLY and anything else as ASCII lines.
pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    let bytes = match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("ply") => ply_bytes(cloud, PlyFormat::BinaryLittleEndian),
        _ => ascii_bytes(cloud),
    };
    write_file(path, &bytes)
}

pub fn write_ply(path: &Path, cloud: &PointCloud, format: PlyFormat) -> Result<()> {
    write_file(path, &ply_bytes(cloud, format))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path).map_err(Error::io(path))?);
    w.write_all(bytes).and_then(|_| w.flush()).map_err(Error::io(path))
}

pub fn parse_ascii(text: &str, path: &Path) -> Result<PointCloud> {
    let mut cloud = empty_cloud();
    let mut labels = Vec::new();
    let mut columns = None;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 && fields.len() != 7 {
            return Err(err(format!("expected 6 or 7 fields, found {}", fields.len())));
        }
        if *columns.get_or_insert(fields.len()) != fields.len() {
            return Err(err("label column present on some lines only".into()));
        }
        let mut xyz = [0f32; 3];
        for (v, f) in xyz.iter_mut().zip(&fields[..3]) {
            *v = f.parse().map_err(|_| err(format!("bad coordinate `{f}`")))?;
            if !v.is_finite() {
                return Err(err(format!("non-finite coordinate `{f}`")));
            }
        }
        let mut rgb = [0u8; 3];
        for (v, f) in rgb.iter_mut().zip(&fields[3..6]) {
            *v = f.parse().map_err(|_| err(format!("bad color `{f}`, expected 0-255")))?;
        }
        if let Some(f) = fields.get(6) {
            labels.push(f.parse().map_err(|_| err(format!("bad label `{f}`")))?);
        }
        cloud.xyz.push(xyz);
        cloud.rgb.push(rgb);
    }
    if columns == Some(7) {
        cloud.labels = Some(labels);
    }
    Ok(cloud)
}

pub fn ascii_bytes(cloud: &PointCloud) -> Vec<u8> {
    let mut out = String::with_capacity(cloud.len() * 40);
    for i in 0..cloud.len() {
        let [x, y, z] = cloud.xyz[i];
        let [r, g, b] = cloud.rgb[i];
        out.push_str(&format!("{x} {y} {z} {r} {g} {b}"));
        if let Some(l) = &cloud.labels {
            out.push_str(&format!(" {}", l[i]));
        }
        out.push('\n');
    }
    out.into_bytes()
}

pub fn ply_bytes(cloud: &PointCloud, format: PlyFormat) -> Vec<u8> {
    let name = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    let mut out = format!(
        "ply\nformat {name} 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\n",
        cloud.len()
    );
    if cloud.labels.is_some() {
        out.push_str("property int label\n");
    }
    out.push_str("end_header\n");
    match format {
        PlyFormat::Ascii => {
            out.push_str(std::str::from_utf8(&ascii_bytes(cloud)).expect("ascii output"));
            out.into_bytes()
        }
        PlyFormat::BinaryLittleEndian => {
            let mut bytes = out.into_bytes();
            for i in 0..cloud.len() {
                for v in cloud.xyz[i] {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
                bytes.extend_from_slice(&cloud.rgb[i]);
                if let Some(l) = &cloud.labels {
                    bytes.extend_from_slice(&(l[i] as i32).to_le_bytes());
                }
            }
            bytes
        }
    }
}

fn empty_cloud() -> PointCloud {
    PointCloud {
        source: String::new(),
        xyz: Vec::new(),
        rgb: Vec::new(),
        labels: None,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
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
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
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

    fn is_integer(self) -> bool {
        !matches!(self, Self::F32 | Self::F64)
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Field {
    X,
    Y,
    Z,
    Red,
    Green,
    Blue,
    Label,
}

struct Header {
    format: PlyFormat,
    count: usize,
    props: Vec<(Field, Scalar)>,
    /// Byte offset of the body.
    body: usize,
    /// Number of header lines, for ASCII body line numbers.
    lines: usize,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    let mut format = None;
    let mut count = None;
    let mut props: Vec<(Field, Scalar)> = Vec::new();
    let mut offset = 0;
    let mut line_no = 0;
    loop {
        let rest = &bytes[offset..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(path, "PLY header has no end_header line"))?;
        line_no += 1;
        offset += end + 1;
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg,
        };
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| err("header line is not UTF-8".into()))?
            .trim();
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["ply"] if line_no == 1 => {}
            [] | ["comment", ..] | ["obj_info", ..] => {}
            ["format", f, "1.0"] => {
                format = Some(match *f {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    other => return Err(err(format!("unsupported PLY format `{other}`"))),
                })
            }
            ["element", "vertex", n] if count.is_none() => {
                count = Some(n.parse().map_err(|_| err(format!("bad vertex count `{n}`")))?)
            }
            ["element", name, ..] => return Err(err(format!("unsupported element `{name}`"))),
            ["property", "list", ..] => return Err(err("list properties are not supported".into())),
            ["property", ty, name] => {
                let scalar = Scalar::parse(ty).ok_or_else(|| err(format!("unknown property type `{ty}`")))?;
                let field = match *name {
                    "x" => Field::X,
                    "y" => Field::Y,
                    "z" => Field::Z,
                    "red" => Field::Red,
                    "green" => Field::Green,
                    "blue" => Field::Blue,
                    "label" => Field::Label,
                    other => return Err(err(format!("unknown property `{other}`"))),
                };
                if props.iter().any(|(f, _)| *f == field) {
                    return Err(err(format!("duplicate property `{name}`")));
                }
                if matches!(field, Field::Red | Field::Green | Field::Blue | Field::Label) && !scalar.is_integer() {
                    return Err(err(format!("property `{name}` must be an integer type")));
                }
                props.push((field, scalar));
            }
            ["end_header"] => break,
            _ => return Err(err(format!("unexpected header line `{line}`"))),
        }
    }
    let format = format.ok_or_else(|| Error::format(path, "PLY header lacks a format line"))?;
    let count = count.ok_or_else(|| Error::format(path, "PLY header lacks `element vertex`"))?;
    for need in [Field::X, Field::Y, Field::Z] {
        if !props.iter().any(|(f, _)| *f == need) {
            return Err(Error::format(path, format!("PLY vertex lacks property {need:?}")));
        }
    }
    Ok(Header {
        format,
        count,
        props,
        body: offset,
        lines: line_no,
    })
}

pub fn parse_ply(bytes: &[u8], path: &Path) -> Result<PointCloud> {
    let h = parse_header(bytes, path)?;
    let has_label = h.props.iter().any(|(f, _)| *f == Field::Label);
    let mut cloud = empty_cloud();
    cloud.xyz.reserve(h.count);
    cloud.rgb.reserve(h.count);
    let mut labels = Vec::new();
    let mut values = vec![0f64; h.props.len()];
    let mut push = |values: &[f64], at: &dyn Fn(String) -> Error| -> Result<()> {
        let mut xyz = [0f32; 3];
        let mut rgb = [0u8; 3];
        for (&(field, _), &v) in h.props.iter().zip(values) {
            match field {
                Field::X | Field::Y | Field::Z => {
                    if !v.is_finite() {
                        return Err(at(format!("non-finite coordinate {v}")));
                    }
                    xyz[field as usize] = v as f32;
                }
                Field::Red | Field::Green | Field::Blue => {
                    if !(0.0..=255.0).contains(&v) {
                        return Err(at(format!("color {v} outside 0-255")));
                    }
                    rgb[field as usize - 3] = v as u8;
                }
                Field::Label => {
                    if v < 0.0 || v > u32::MAX as f64 {
                        return Err(at(format!("label {v} is not a class id")));
                    }
                    labels.push(v as u32);
                }
            }
        }
        cloud.xyz.push(xyz);
        cloud.rgb.push(rgb);
        Ok(())
    };
    match h.format {
        PlyFormat::Ascii => {
            let text =
                std::str::from_utf8(&bytes[h.body..]).map_err(|_| Error::format(path, "PLY body is not UTF-8"))?;
            let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
            for v in 0..h.count {
                let (i, line) = lines
                    .next()
                    .ok_or_else(|| Error::format(path, format!("expected {} vertices, found {v}", h.count)))?;
                let line_no = h.lines + i + 1;
                let at = |msg: String| Error::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    msg,
                };
                let words: Vec<&str> = line.split_whitespace().collect();
                if words.len() != h.props.len() {
                    return Err(at(format!("expected {} values, found {}", h.props.len(), words.len())));
                }
                for ((slot, w), &(_, ty)) in values.iter_mut().zip(&words).zip(&h.props) {
                    *slot = w.parse().map_err(|_| at(format!("bad value `{w}`")))?;
                    if ty.is_integer() && slot.fract() != 0.0 {
                        return Err(at(format!("`{w}` is not an integer")));
                    }
                }
                push(&values, &at)?;
            }
            if let Some((i, _)) = lines.next() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: h.lines + i + 1,
                    msg: "data after the last vertex".into(),
                });
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let stride: usize = h.props.iter().map(|(_, t)| t.size()).sum();
            let body = &bytes[h.body..];
            if body.len() != stride * h.count {
                return Err(Error::format(
                    path,
                    format!(
                        "binary body has {} bytes, expected {} vertices of {stride}",
                        body.len(),
                        h.count
                    ),
                ));
            }
            for (v, rec) in body.chunks_exact(stride).enumerate() {
                let mut at = 0;
                for (slot, &(_, ty)) in values.iter_mut().zip(&h.props) {
                    *slot = ty.read_le(&rec[at..]);
                    at += ty.size();
                }
                push(&values, &|msg| Error::format(path, format!("vertex {v}: {msg}")))?;
            }
        }
    }
    if has_label {
        cloud.labels = Some(labels);
    }
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(labels: bool) -> PointCloud {
        PointCloud {
            source: String::new(),
            xyz: vec![[0.5, -1.25, 3.0], [1e-3, 2.0, 0.0]],
            rgb: vec![[0, 128, 255], [7, 8, 9]],
            labels: labels.then(|| vec![4, 0]),
        }
    }

    #[test]
    fn ascii_lines() {
        let c = parse_ascii(
            "1 2 3 4 5 6 1\n\n# note\n0.5 0 0 0 0 0 2\n-1 0 0 255 0 0 0\n",
            Path::new("a.txt"),
        )
        .unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.labels, Some(vec![1, 2, 0]));
        assert_eq!(c.rgb[2], [255, 0, 0]);
        let err = parse_ascii("1 2 3 4 5 6\n1 2 3 4 5 300\n", Path::new("a.txt")).unwrap_err();
        assert!(err.to_string().starts_with("a.txt:2:"), "{err}");
        assert!(parse_ascii("1 2 3 4 5 6\n1 2 3 4 5 6 0\n", Path::new("a")).is_err());
    }

    #[test]
    fn ply_round_trips_both_encodings() {
        for labels in [false, true] {
            let c = cloud(labels);
            for f in [PlyFormat::Ascii, PlyFormat::BinaryLittleEndian] {
                let back = parse_ply(&ply_bytes(&c, f), Path::new("t.ply")).unwrap();
                assert_eq!(back, c);
            }
            assert_eq!(
                parse_ascii(std::str::from_utf8(&ascii_bytes(&c)).unwrap(), Path::new("t")).unwrap(),
                c
            );
        }
    }

    #[test]
    fn ply_header_errors() {
        let bad = b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nproperty float nx\nend_header\n0 0 0 1\n";
        let err = parse_ply(bad, Path::new("n.ply")).unwrap_err();
        assert_eq!(err.to_string(), "n.ply:7: unknown property `nx`");
        let face = b"ply\nformat ascii 1.0\nelement vertex 0\nproperty float x\nelement face 0\nend_header\n";
        assert!(parse_ply(face, Path::new("f.ply")).is_err());
        let big = b"ply\nformat binary_big_endian 1.0\nend_header\n";
        assert!(parse_ply(big, Path::new("b.ply")).is_err());
    }

    #[test]
    fn ascii_ply_body_errors_carry_line_numbers() {
        let text = b"ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n0 zero 0\n";
        let err = parse_ply(text, Path::new("l.ply")).unwrap_err();
        assert_eq!(err.to_string(), "l.ply:9: bad value `zero`");
    }

    #[test]
    fn truncated_binary_is_rejected() {
        let mut b = ply_bytes(&cloud(true), PlyFormat::BinaryLittleEndian);
        b.pop();
        assert!(parse_ply(&b, Path::new("t.ply")).is_err());
    }
}
