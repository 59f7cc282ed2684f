//! Binary little-endian 3DGS PLY reading and writing.
//!
//! Activations follow the usual 3DGS export conventions: opacity is stored as
//! a logit, scale as a log, color as the degree-0 SH coefficient. Higher-order
//! SH coefficients (`f_rest_*`) are skipped. Two optional integer properties,
//! `semantic_label` and `instance_label`, carry per-Gaussian labels.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::scene::{Gaussian, GaussianScene};

/// Degree-0 real spherical harmonic constant.
pub const SH_C0: f64 = 0.28209479177387814;

const OPACITY_EPS: f64 = 1e-7;

const REQUIRED: [&str; 14] = [
    "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
];

#[derive(Debug, Clone, Copy, PartialEq)]
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
    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "char" | "int8" => ScalarType::I8,
            "uchar" | "uint8" => ScalarType::U8,
            "short" | "int16" => ScalarType::I16,
            "ushort" | "uint16" => ScalarType::U16,
            "int" | "int32" => ScalarType::I32,
            "uint" | "uint32" => ScalarType::U32,
            "float" | "float32" => ScalarType::F32,
            "double" | "float64" => ScalarType::F64,
            _ => {
                return Err(Error::Format(format!(
                    "unsupported PLY property type '{s}'"
                )))
            }
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

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            ScalarType::I8 => b[0] as i8 as f64,
            ScalarType::U8 => b[0] as f64,
            ScalarType::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            ScalarType::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            ScalarType::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            ScalarType::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            ScalarType::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            ScalarType::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

struct Property {
    name: String,
    ty: ScalarType,
    offset: usize,
}

struct Header {
    vertex_count: usize,
    properties: Vec<Property>,
    stride: usize,
}

impl Header {
    fn find(&self, name: &str) -> Option<&Property> {
        self.properties.iter().find(|p| p.name == name)
    }
}

fn parse_header(r: &mut impl BufRead) -> Result<Header> {
    let mut line = String::new();
    let mut next_line = |line: &mut String| -> Result<()> {
        line.clear();
        let n = r
            .read_line(line)
            .map_err(|e| Error::Format(format!("unreadable PLY header: {e}")))?;
        if n == 0 {
            return Err(Error::Format("unexpected end of PLY header".into()));
        }
        Ok(())
    };
    next_line(&mut line)?;
    if line.trim_end() != "ply" {
        return Err(Error::Format("missing 'ply' magic line".into()));
    }
    let mut vertex_count = None;
    let mut in_vertex = false;
    let mut seen_element = false;
    let mut properties = Vec::new();
    let mut stride = 0;
    loop {
        next_line(&mut line)?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["end_header"] => break,
            ["format", fmt, _] => {
                if *fmt != "binary_little_endian" {
                    return Err(Error::Format(format!("unsupported PLY format '{fmt}'")));
                }
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                if *name == "vertex" {
                    if seen_element {
                        return Err(Error::Format("vertex must be the first PLY element".into()));
                    }
                    vertex_count = Some(
                        count
                            .parse::<usize>()
                            .map_err(|_| Error::Format(format!("bad vertex count '{count}'")))?,
                    );
                    in_vertex = true;
                } else {
                    in_vertex = false;
                }
                seen_element = true;
            }
            ["property", "list", ..] => {
                if in_vertex {
                    return Err(Error::Format(
                        "list properties on vertices are not supported".into(),
                    ));
                }
            }
            ["property", ty, name] => {
                if in_vertex {
                    let ty = ScalarType::parse(ty)?;
                    properties.push(Property {
                        name: name.to_string(),
                        ty,
                        offset: stride,
                    });
                    stride += ty.size();
                }
            }
            _ => {
                return Err(Error::Format(format!(
                    "unrecognized PLY header line '{}'",
                    line.trim_end()
                )))
            }
        }
    }
    let vertex_count =
        vertex_count.ok_or_else(|| Error::Format("PLY has no vertex element".into()))?;
    Ok(Header {
        vertex_count,
        properties,
        stride,
    })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(OPACITY_EPS, 1.0 - OPACITY_EPS);
    (p / (1.0 - p)).ln()
}

/// Reads a scene from any binary little-endian 3DGS PLY stream.
pub fn read_ply(r: impl Read) -> Result<GaussianScene> {
    let mut r = BufReader::new(r);
    let header = parse_header(&mut r)?;
    let mut offsets = [0usize; 14];
    let mut types = [ScalarType::F32; 14];
    for (k, name) in REQUIRED.iter().enumerate() {
        let p = header
            .find(name)
            .ok_or_else(|| Error::Format(format!("missing required field '{name}'")))?;
        offsets[k] = p.offset;
        types[k] = p.ty;
    }
    let normal = match (header.find("nx"), header.find("ny"), header.find("nz")) {
        (Some(a), Some(b), Some(c)) => Some([a, b, c]),
        _ => None,
    };
    let semantic = header.find("semantic_label");
    let instance = header.find("instance_label");

    let mut gaussians = Vec::with_capacity(header.vertex_count);
    let mut sem_labels = semantic.map(|_| Vec::with_capacity(header.vertex_count));
    let mut inst_labels = instance.map(|_| Vec::with_capacity(header.vertex_count));
    let mut row = vec![0u8; header.stride];
    for index in 0..header.vertex_count {
        r.read_exact(&mut row)
            .map_err(|_| Error::Format(format!("truncated PLY body at vertex {index}")))?;
        let mut v = [0.0f64; 14];
        for k in 0..14 {
            v[k] = types[k].decode(&row[offsets[k]..]);
            if !v[k].is_finite() {
                return Err(Error::Data {
                    index,
                    message: format!("non-finite value in field '{}'", REQUIRED[k]),
                });
            }
        }
        let q = Quaternion::new(v[10], v[11], v[12], v[13]);
        if q.norm() == 0.0 {
            return Err(Error::Data {
                index,
                message: "zero-length quaternion".into(),
            });
        }
        let normal = normal.and_then(|[a, b, c]| {
            let n = Vector3::new(
                a.ty.decode(&row[a.offset..]),
                b.ty.decode(&row[b.offset..]),
                c.ty.decode(&row[c.offset..]),
            );
            let len = n.norm();
            (len.is_finite() && len > 0.0).then(|| n / len)
        });
        let color = Vector3::new(v[3], v[4], v[5]).map(|f| (0.5 + SH_C0 * f).clamp(0.0, 1.0));
        gaussians.push(Gaussian {
            center: Vector3::new(v[0], v[1], v[2]),
            scale: Vector3::new(v[7].exp(), v[8].exp(), v[9].exp()),
            rotation: UnitQuaternion::from_quaternion(q),
            opacity: sigmoid(v[6]),
            color,
            normal,
        });
        if let (Some(p), Some(l)) = (semantic, sem_labels.as_mut()) {
            l.push(p.ty.decode(&row[p.offset..]) as u32);
        }
        if let (Some(p), Some(l)) = (instance, inst_labels.as_mut()) {
            l.push(p.ty.decode(&row[p.offset..]) as u32);
        }
    }
    Ok(GaussianScene::new(gaussians).with_labels(sem_labels, inst_labels))
}

/// Writes `scene` as a binary little-endian 3DGS PLY stream.
pub fn write_ply(scene: &GaussianScene, w: impl Write) -> std::io::Result<()> {
    let mut w = BufWriter::new(w);
    writeln!(w, "ply")?;
    writeln!(w, "format binary_little_endian 1.0")?;
    writeln!(w, "element vertex {}", scene.len())?;
    for name in [
        "x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
    ] {
        writeln!(w, "property float {name}")?;
    }
    for name in [
        "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
    ] {
        writeln!(w, "property float {name}")?;
    }
    if scene.semantic_labels.is_some() {
        writeln!(w, "property int semantic_label")?;
    }
    if scene.instance_labels.is_some() {
        writeln!(w, "property int instance_label")?;
    }
    writeln!(w, "end_header")?;
    for (i, g) in scene.gaussians.iter().enumerate() {
        let n = g.normal.unwrap_or_else(Vector3::zeros);
        let q = g.rotation.quaternion();
        let dc = g.color.map(|c| (c - 0.5) / SH_C0);
        let values = [
            g.center.x,
            g.center.y,
            g.center.z,
            n.x,
            n.y,
            n.z,
            dc.x,
            dc.y,
            dc.z,
            logit(g.opacity),
            g.scale.x.ln(),
            g.scale.y.ln(),
            g.scale.z.ln(),
            q.w,
            q.i,
            q.j,
            q.k,
        ];
        for v in values {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        if let Some(l) = &scene.semantic_labels {
            w.write_all(&(l[i] as i32).to_le_bytes())?;
        }
        if let Some(l) = &scene.instance_labels {
            w.write_all(&(l[i] as i32).to_le_bytes())?;
        }
    }
    w.flush()
}

pub fn load_ply(path: &Path) -> Result<GaussianScene> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_ply(f)
}

pub fn save_ply(scene: &GaussianScene, path: &Path) -> Result<()> {
    scene.validate()?;
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_ply(scene, f).map_err(|e| Error::io(path, e))
}
