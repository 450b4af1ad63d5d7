//! Binary little-endian PLY checkpoints.
//!
//! Written properties (all `double` except the label):
//! `x y z scale_0..2 rot_0..3 opacity color_0..2` and `uint label`.
//! Scales are log standard deviations, `rot_*` is `(w, x, y, z)`, opacity is
//! the logit. The reader also takes `float` properties, `f_dc_*` degree-0
//! spherical-harmonic colors in place of `color_*`, and files without a
//! label (all Gaussians load unlabeled).

use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use nalgebra::{Quaternion, Vector3};

use crate::error::{Error, Result};
use crate::scene::{Gaussian3D, GaussianScene, Label};

const SH_C0: f64 = 0.28209479177387814;

const FLOAT_PROPS: [&str; 14] = [
    "x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3", "opacity", "color_0",
    "color_1", "color_2",
];

pub fn encode_checkpoint(scene: &GaussianScene) -> Vec<u8> {
    let bg = scene.background;
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("comment background {:?} {:?} {:?}\n", bg.x, bg.y, bg.z));
    header.push_str(&format!("comment label_count {}\n", scene.label_count));
    header.push_str(&format!("element vertex {}\n", scene.len()));
    for p in FLOAT_PROPS {
        header.push_str(&format!("property double {p}\n"));
    }
    header.push_str("property uint label\nend_header\n");
    let mut out = header.into_bytes();
    out.reserve(scene.len() * (14 * 8 + 4));
    for g in &scene.gaussians {
        let vals = [
            g.mean.x,
            g.mean.y,
            g.mean.z,
            g.log_scale.x,
            g.log_scale.y,
            g.log_scale.z,
            g.rotation.w,
            g.rotation.i,
            g.rotation.j,
            g.rotation.k,
            g.opacity_logit,
            g.color.x,
            g.color.y,
            g.color.z,
        ];
        for v in vals {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&g.label.to_le_bytes());
    }
    out
}

pub fn save_checkpoint(scene: &GaussianScene, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(scene))?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
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
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

struct Header {
    count: usize,
    props: Vec<(String, Scalar)>,
    background: Option<Vector3<f64>>,
    label_count: Option<Label>,
}

fn parse_header<R: BufRead>(r: &mut R, path: &Path) -> Result<Header> {
    let bad = |reason: String| Error::Checkpoint { path: path.to_path_buf(), reason };
    let mut line = String::new();
    let mut next = |line: &mut String| -> Result<bool> {
        line.clear();
        Ok(r.read_line(line)? > 0)
    };
    if !next(&mut line)? || line.trim_end() != "ply" {
        return Err(bad("not a PLY file".into()));
    }
    let mut header = Header { count: 0, props: Vec::new(), background: None, label_count: None };
    let mut in_vertex = false;
    let mut seen_vertex = false;
    loop {
        if !next(&mut line)? {
            return Err(bad("header ends before end_header".into()));
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["format", fmt, _] => {
                if *fmt != "binary_little_endian" {
                    return Err(bad(format!("unsupported format {fmt}")));
                }
            }
            ["comment", "background", r, g, b] => {
                let p = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("background: {e}")));
                header.background = Some(Vector3::new(p(r)?, p(g)?, p(b)?));
            }
            ["comment", "label_count", n] => {
                header.label_count = Some(n.parse().map_err(|e| bad(format!("label_count: {e}")))?);
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, n] => {
                let n: usize = n.parse().map_err(|e| bad(format!("element count: {e}")))?;
                if *name == "vertex" {
                    in_vertex = true;
                    seen_vertex = true;
                    header.count = n;
                } else {
                    if !seen_vertex && n > 0 {
                        return Err(bad(format!("element {name} precedes vertex data")));
                    }
                    in_vertex = false;
                }
            }
            ["property", "list", ..] => {
                if in_vertex {
                    return Err(bad("list properties on vertices are not supported".into()));
                }
            }
            ["property", ty, name] => {
                if in_vertex {
                    let s = Scalar::parse(ty).ok_or_else(|| bad(format!("unknown property type {ty}")))?;
                    header.props.push((name.to_string(), s));
                }
            }
            _ => return Err(bad(format!("unrecognized header line {:?}", line.trim_end()))),
        }
    }
    if !seen_vertex {
        return Err(bad("no vertex element".into()));
    }
    Ok(header)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<GaussianScene> {
    let bad = |reason: String| Error::Checkpoint { path: path.to_path_buf(), reason };
    let mut reader = BufReader::new(bytes);
    let header = parse_header(&mut reader, path)?;
    let mut body = Vec::new();
    reader.read_to_end(&mut body)?;

    let find = |name: &str| header.props.iter().position(|(n, _)| n == name);
    let mut offsets = Vec::with_capacity(header.props.len());
    let mut stride = 0;
    for (_, s) in &header.props {
        offsets.push(stride);
        stride += s.size();
    }
    let need = |name: &str| find(name).ok_or_else(|| bad(format!("missing vertex property {name}")));
    let base: Vec<usize> = FLOAT_PROPS[..11].iter().map(|n| need(n)).collect::<Result<_>>()?;
    let (color, from_sh) = match ["color_0", "color_1", "color_2"].map(find) {
        [Some(r), Some(g), Some(b)] => ([r, g, b], false),
        _ => (
            ["f_dc_0", "f_dc_1", "f_dc_2"].iter().map(|n| need(n)).collect::<Result<Vec<_>>>()?.try_into().unwrap(),
            true,
        ),
    };
    let label = find("label");
    if label.is_none() {
        log::warn!("{}: no label property, loading all Gaussians as unlabeled", path.display());
    }
    let expected = header.count.checked_mul(stride).ok_or_else(|| bad("vertex count overflows".into()))?;
    if body.len() < expected {
        return Err(bad(format!("{} vertex bytes, expected {expected}", body.len())));
    }

    let mut gaussians = Vec::with_capacity(header.count);
    for v in 0..header.count {
        let row = &body[v * stride..(v + 1) * stride];
        let get = |i: usize| header.props[i].1.read(&row[offsets[i]..]);
        let f: Vec<f64> = base.iter().map(|&i| get(i)).collect();
        let mut c = Vector3::new(get(color[0]), get(color[1]), get(color[2]));
        if from_sh {
            c = c.map(|v| (0.5 + SH_C0 * v).clamp(0.0, 1.0));
        }
        let g = Gaussian3D {
            mean: Vector3::new(f[0], f[1], f[2]),
            log_scale: Vector3::new(f[3], f[4], f[5]),
            rotation: Quaternion::new(f[6], f[7], f[8], f[9]),
            opacity_logit: f[10],
            color: c,
            label: label.map_or(0, |i| get(i) as Label),
        };
        if !(g.mean.iter().chain(g.log_scale.iter()).all(|x| x.is_finite())
            && g.rotation.coords.iter().all(|x| x.is_finite())
            && g.rotation.norm() > 0.0
            && g.opacity_logit.is_finite()
            && g.color.iter().all(|x| x.is_finite()))
        {
            return Err(bad(format!("vertex {v} has non-finite or degenerate values")));
        }
        gaussians.push(g);
    }
    let mut scene = GaussianScene::new(gaussians, header.background.unwrap_or_else(Vector3::zeros));
    if let Some(n) = header.label_count {
        scene.label_count = scene.label_count.max(n);
    }
    Ok(scene)
}

pub fn load_checkpoint(path: &Path) -> Result<GaussianScene> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint { path: path.to_path_buf(), reason: e.to_string() })?;
    decode_checkpoint(&bytes, path)
}
