//! Binary little-endian PLY in the common 3D Gaussian splatting vertex layout.
//!
//! Every vertex carries 62 float32 properties: position, a zero normal, three
//! DC color coefficients, 45 higher-order SH coefficients (channel-major,
//! zero-padded up to degree 3), the opacity logit, three log scales and the
//! quaternion. The cloud's own SH degree is recorded in a header comment so
//! lower-degree clouds load back at their original width.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::scene::GaussianCloud;
use crate::sh::{basis_count, MAX_DEGREE};

/// Higher-order SH coefficients per channel at degree 3.
const REST_PER_CHANNEL: usize = 15;
/// Float properties per vertex.
pub const PLY_PROPERTY_COUNT: usize = 3 + 3 + 3 + 3 * REST_PER_CHANNEL + 1 + 3 + 4;

/// Property names in file order.
pub fn property_names() -> Vec<String> {
    let mut names: Vec<String> = ["x", "y", "z", "nx", "ny", "nz"].iter().map(|s| s.to_string()).collect();
    names.extend((0..3).map(|i| format!("f_dc_{i}")));
    names.extend((0..3 * REST_PER_CHANNEL).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    names
}

/// One vertex record as it appears in the file (before narrowing).
fn vertex_record(cloud: &GaussianCloud, i: usize) -> Vec<f64> {
    let mut rec = Vec::with_capacity(PLY_PROPERTY_COUNT);
    rec.extend_from_slice(&cloud.position(i));
    rec.extend_from_slice(&[0.0; 3]);
    let sh = cloud.sh(i);
    rec.extend_from_slice(&sh[..3]);
    let bases = basis_count(cloud.sh_degree());
    for c in 0..3 {
        for k in 1..=REST_PER_CHANNEL {
            rec.push(if k < bases { sh[3 * k + c] } else { 0.0 });
        }
    }
    rec.push(cloud.opacity_logits[i]);
    rec.extend_from_slice(&cloud.log_scale(i));
    rec.extend_from_slice(&cloud.rotation(i));
    rec
}

/// Writes `cloud` as PLY to any writer.
pub fn write_ply<W: Write>(cloud: &GaussianCloud, w: W) -> Result<()> {
    let mut w = BufWriter::new(w);
    writeln!(w, "ply")?;
    writeln!(w, "format binary_little_endian 1.0")?;
    writeln!(w, "comment sh_degree {}", cloud.sh_degree())?;
    writeln!(w, "element vertex {}", cloud.len())?;
    for name in property_names() {
        writeln!(w, "property float {name}")?;
    }
    writeln!(w, "end_header")?;
    for i in 0..cloud.len() {
        for v in vertex_record(cloud, i) {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_ply(cloud: &GaussianCloud, path: &Path) -> Result<()> {
    write_ply(cloud, File::create(path)?)
}

fn parse_err(msg: impl Into<String>) -> Error {
    Error::Ply(msg.into())
}

struct Header {
    vertices: usize,
    sh_degree: usize,
}

fn read_header<R: BufRead>(r: &mut R) -> Result<Header> {
    let mut line = String::new();
    let mut next = |r: &mut R| -> Result<String> {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(parse_err("unexpected end of file in header"));
        }
        Ok(line.trim_end_matches(['\n', '\r']).to_string())
    };
    if next(r)? != "ply" {
        return Err(parse_err("missing `ply` magic line"));
    }
    let mut vertices = None;
    let mut sh_degree = MAX_DEGREE;
    let mut props = Vec::new();
    let mut format_ok = false;
    loop {
        let l = next(r)?;
        let words: Vec<&str> = l.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["format", "binary_little_endian", "1.0"] => format_ok = true,
            ["format", other, ..] => return Err(parse_err(format!("unsupported format `{other}`"))),
            ["comment", "sh_degree", d] => {
                sh_degree = d
                    .parse()
                    .ok()
                    .filter(|&d| d <= MAX_DEGREE)
                    .ok_or_else(|| parse_err(format!("bad sh_degree comment `{d}`")))?;
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", "vertex", n] => {
                if vertices.is_some() {
                    return Err(parse_err("duplicate vertex element"));
                }
                vertices = Some(n.parse().map_err(|_| parse_err(format!("bad vertex count `{n}`")))?);
            }
            ["element", other, ..] => return Err(parse_err(format!("unexpected element `{other}`"))),
            ["property", "float", name] => props.push(name.to_string()),
            ["property", ty, name] => {
                return Err(parse_err(format!("property `{name}` has type `{ty}`, expected float")))
            }
            _ => return Err(parse_err(format!("unrecognized header line `{l}`"))),
        }
    }
    if !format_ok {
        return Err(parse_err("missing format line"));
    }
    let vertices = vertices.ok_or_else(|| parse_err("missing vertex element"))?;
    let expected = property_names();
    if props != expected {
        let first_bad = props
            .iter()
            .zip(&expected)
            .position(|(a, b)| a != b)
            .unwrap_or(props.len().min(expected.len()));
        return Err(parse_err(format!(
            "wrong property set: {} properties (expected {}), first difference at position {}",
            props.len(),
            expected.len(),
            first_bad
        )));
    }
    Ok(Header { vertices, sh_degree })
}

/// Reads a PLY written by [`write_ply`] (or any file with the same layout).
/// The whole body is read before any Gaussian is built, so a truncated file
/// yields an error and never a partial cloud.
pub fn read_ply<R: Read>(r: R) -> Result<GaussianCloud> {
    let mut r = BufReader::new(r);
    let header = read_header(&mut r)?;
    let bytes = header
        .vertices
        .checked_mul(PLY_PROPERTY_COUNT * 4)
        .ok_or_else(|| parse_err("vertex count overflows"))?;
    let mut body = Vec::new();
    (&mut r).take(bytes as u64).read_to_end(&mut body)?;
    if body.len() != bytes {
        return Err(parse_err(format!(
            "truncated body: {} of {} bytes for {} vertices",
            body.len(),
            bytes,
            header.vertices
        )));
    }
    let mut values = vec![0f32; header.vertices * PLY_PROPERTY_COUNT];
    (&body[..]).read_f32_into::<LittleEndian>(&mut values)?;

    let mut cloud = GaussianCloud::new(header.sh_degree);
    let bases = basis_count(header.sh_degree);
    for rec in values.chunks_exact(PLY_PROPERTY_COUNT) {
        let v = |k: usize| rec[k] as f64;
        cloud.positions.extend([v(0), v(1), v(2)]);
        let mut sh = vec![0.0; 3 * bases];
        sh[..3].copy_from_slice(&[v(6), v(7), v(8)]);
        for c in 0..3 {
            for k in 1..bases {
                sh[3 * k + c] = v(9 + c * REST_PER_CHANNEL + k - 1);
            }
        }
        cloud.sh_coeffs.extend(sh);
        let o = 9 + 3 * REST_PER_CHANNEL;
        cloud.opacity_logits.push(v(o));
        cloud.log_scales.extend([v(o + 1), v(o + 2), v(o + 3)]);
        cloud.rotations.extend([v(o + 4), v(o + 5), v(o + 6), v(o + 7)]);
        cloud.mask_params.push(1.0);
        cloud.scores.push(0.0);
    }
    Ok(cloud)
}

pub fn load_ply(path: &Path) -> Result<GaussianCloud> {
    read_ply(File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Gaussian;

    fn cloud(degree: usize, n: usize) -> GaussianCloud {
        let mut c = GaussianCloud::new(degree);
        let w = 3 * basis_count(degree);
        for i in 0..n {
            let f = i as f64 + 1.0;
            c.push(&Gaussian {
                position: [0.1 * f, -0.2 * f, 0.3],
                log_scale: [-1.0, -2.0 * f, 0.5],
                rotation: [1.0, 0.1, -0.2, 0.3 * f],
                opacity_logit: 0.7 - f,
                sh: (0..w).map(|k| 0.01 * (k as f64 + f)).collect(),
            });
        }
        c
    }

    fn to_bytes(c: &GaussianCloud) -> Vec<u8> {
        let mut buf = Vec::new();
        write_ply(c, &mut buf).unwrap();
        buf
    }

    #[test]
    fn layout_has_62_properties() {
        assert_eq!(PLY_PROPERTY_COUNT, 62);
        assert_eq!(property_names().len(), 62);
        let text = String::from_utf8_lossy(&to_bytes(&cloud(3, 1))).to_string();
        assert_eq!(text.matches("property float").count(), 62);
    }

    #[test]
    fn round_trip_all_degrees() {
        for degree in 0..=3 {
            let c = cloud(degree, 5);
            let back = read_ply(&to_bytes(&c)[..]).unwrap();
            assert_eq!(back.sh_degree(), degree);
            assert_eq!(back.len(), c.len());
            for (a, b) in [
                (&c.positions, &back.positions),
                (&c.log_scales, &back.log_scales),
                (&c.rotations, &back.rotations),
                (&c.opacity_logits, &back.opacity_logits),
                (&c.sh_coeffs, &back.sh_coeffs),
            ] {
                for (x, y) in a.iter().zip(b.iter()) {
                    assert_eq!(*x as f32 as f64, *y);
                }
            }
        }
    }

    #[test]
    fn low_degree_rest_is_zero_padded() {
        let c = cloud(1, 1);
        let rec = vertex_record(&c, 0);
        for ch in 0..3 {
            let rest = &rec[9 + ch * REST_PER_CHANNEL..9 + (ch + 1) * REST_PER_CHANNEL];
            assert!(rest[..3].iter().all(|&v| v != 0.0));
            assert!(rest[3..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = to_bytes(&cloud(2, 3));
        let err = read_ply(&bytes[..bytes.len() - 5]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn wrong_properties_are_rejected() {
        let text = String::from_utf8(to_bytes(&cloud(0, 0))).unwrap();
        let bad = text.replace("property float opacity\n", "");
        assert!(read_ply(bad.as_bytes()).unwrap_err().to_string().contains("wrong property set"));
        let bad = text.replace("property float x\n", "property double x\n");
        assert!(read_ply(bad.as_bytes()).is_err());
        let bad = text.replace("binary_little_endian", "ascii");
        assert!(read_ply(bad.as_bytes()).is_err());
        assert!(read_ply(&b"plx\n"[..]).is_err());
    }
}
