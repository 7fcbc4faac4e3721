//! ASCII PLY reading and writing.
//!
//! Only the `vertex` element is interpreted. Recognised properties are
//! `x y z`, `nx ny nz`, `red green blue` and `label`; anything else is
//! skipped. Integer colors are rescaled from `0..=255` to `[0, 1]`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::PointCloud;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scalar {
    Int,
    Float,
}

fn scalar_type(name: &str) -> Option<Scalar> {
    match name {
        "char" | "uchar" | "short" | "ushort" | "int" | "uint" | "int8" | "uint8" | "int16"
        | "uint16" | "int32" | "uint32" => Some(Scalar::Int),
        "float" | "double" | "float32" | "float64" => Some(Scalar::Float),
        _ => None,
    }
}

struct Element {
    name: String,
    count: usize,
    props: Vec<(String, Scalar)>,
    has_list: bool,
}

/// Reads an ASCII PLY file.
pub fn load_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut cloud = parse_ply(&text).map_err(|(line, msg)| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    })?;
    cloud.scene_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(cloud)
}

/// Parses PLY text. Errors carry the 1-based line number.
pub fn parse_ply(text: &str) -> std::result::Result<PointCloud, (usize, String)> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        Some((n, _)) => return Err((n, "missing 'ply' magic".into())),
        None => return Err((1, "empty file".into())),
    }
    let mut elements: Vec<Element> = Vec::new();
    let mut format_seen = false;
    let mut header_done = false;
    let mut last_line = 1;
    for (n, line) in lines.by_ref() {
        last_line = n;
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                if tok.next() != Some("ascii") {
                    return Err((n, "only 'format ascii 1.0' is supported".into()));
                }
                format_seen = true;
            }
            Some("comment") | Some("obj_info") | None => {}
            Some("element") => {
                let name = tok.next().ok_or((n, "element without name".to_string()))?;
                let count = tok
                    .next()
                    .and_then(|c| c.parse::<usize>().ok())
                    .ok_or((n, "element count is not an integer".to_string()))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                    has_list: false,
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or((n, "property before any element".to_string()))?;
                let ty = tok.next().ok_or((n, "property without type".to_string()))?;
                if ty == "list" {
                    el.has_list = true;
                    continue;
                }
                let scalar = scalar_type(ty).ok_or((n, format!("unknown property type '{ty}'")))?;
                let name = tok.next().ok_or((n, "property without name".to_string()))?;
                el.props.push((name.to_string(), scalar));
            }
            Some("end_header") => {
                header_done = true;
                break;
            }
            Some(other) => return Err((n, format!("unexpected header keyword '{other}'"))),
        }
    }
    if !header_done {
        return Err((last_line, "missing end_header".into()));
    }
    if !format_seen {
        return Err((last_line, "missing format line".into()));
    }
    let vertex_pos = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or((last_line, "no vertex element".to_string()))?;
    let vertex = &elements[vertex_pos];
    if vertex.has_list {
        return Err((last_line, "list properties on vertex are not supported".into()));
    }
    let find = |name: &str| vertex.props.iter().position(|(p, _)| p == name);
    let (ix, iy, iz) = match (find("x"), find("y"), find("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err((last_line, "vertex element lacks x, y, z".into())),
    };
    let normal_idx = match (find("nx"), find("ny"), find("nz")) {
        (Some(a), Some(b), Some(c)) => Some([a, b, c]),
        _ => None,
    };
    let color_idx = match (find("red"), find("green"), find("blue")) {
        (Some(a), Some(b), Some(c)) => Some([a, b, c]),
        _ => None,
    };
    let label_idx = find("label");
    let color_scale = match color_idx {
        Some([r, _, _]) if vertex.props[r].1 == Scalar::Int => 1.0 / 255.0,
        _ => 1.0,
    };

    // Skip rows of elements declared before the vertex element.
    let skip: usize = elements[..vertex_pos].iter().map(|e| e.count).sum();
    let mut rows = lines.filter(|(_, l)| !l.is_empty());
    for _ in 0..skip {
        if rows.next().is_none() {
            return Err((last_line, "file ends before vertex data".into()));
        }
    }

    let count = vertex.count;
    let nprops = vertex.props.len();
    let mut coords = Vec::with_capacity(count);
    let mut normals = normal_idx.map(|_| Vec::with_capacity(count));
    let mut colors = color_idx.map(|_| Vec::with_capacity(count));
    let mut labels = label_idx.map(|_| Vec::with_capacity(count));
    let mut vals = vec![0.0f64; nprops];
    for read in 0..count {
        let (n, line) = match rows.next() {
            Some(r) => r,
            None => {
                return Err((
                    last_line,
                    format!("vertex count mismatch: header declares {count}, found {read}"),
                ))
            }
        };
        last_line = n;
        let mut k = 0;
        for t in line.split_whitespace() {
            if k == nprops {
                return Err((n, format!("expected {nprops} values, found more")));
            }
            vals[k] = t
                .parse::<f64>()
                .map_err(|_| (n, format!("cannot parse '{t}' as a number")))?;
            k += 1;
        }
        if k != nprops {
            return Err((n, format!("expected {nprops} values, found {k}")));
        }
        let p = [vals[ix], vals[iy], vals[iz]];
        if !p.iter().all(|v| v.is_finite()) {
            return Err((n, "non-finite coordinate".into()));
        }
        coords.push(p);
        if let (Some(out), Some([a, b, c])) = (normals.as_mut(), normal_idx) {
            out.push([vals[a], vals[b], vals[c]]);
        }
        if let (Some(out), Some([a, b, c])) = (colors.as_mut(), color_idx) {
            let ch = |v: f64| (v * color_scale).clamp(0.0, 1.0);
            out.push([ch(vals[a]), ch(vals[b]), ch(vals[c])]);
        }
        if let (Some(out), Some(l)) = (labels.as_mut(), label_idx) {
            let v = vals[l];
            if v < 0.0 || v.fract() != 0.0 {
                return Err((n, format!("label '{v}' is not a non-negative integer")));
            }
            out.push(v as u32);
        }
    }
    // Only trailing rows of later elements may follow the vertices.
    let trailing: usize = elements[vertex_pos + 1..].iter().map(|e| e.count).sum();
    let extra = rows.count();
    if extra > trailing {
        return Err((
            last_line,
            format!("vertex count mismatch: {extra} unexpected rows after {count} vertices"),
        ));
    }
    if coords.is_empty() {
        return Err((last_line, "no vertices".into()));
    }
    Ok(PointCloud {
        coords,
        colors,
        normals,
        gt_labels: labels,
        scene_id: String::new(),
    })
}

/// Renders `cloud` as ASCII PLY text. Coordinates and normals are written at
/// full precision so a reload reproduces them exactly.
pub fn to_ply_string(cloud: &PointCloud) -> String {
    let mut s = String::with_capacity(cloud.len() * 48 + 256);
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", cloud.len());
    s.push_str("property float x\nproperty float y\nproperty float z\n");
    if cloud.normals.is_some() {
        s.push_str("property float nx\nproperty float ny\nproperty float nz\n");
    }
    if cloud.colors.is_some() {
        s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    if cloud.gt_labels.is_some() {
        s.push_str("property uchar label\n");
    }
    s.push_str("end_header\n");
    for i in 0..cloud.len() {
        let c = cloud.coords[i];
        let _ = write!(s, "{} {} {}", c[0], c[1], c[2]);
        if let Some(n) = &cloud.normals {
            let _ = write!(s, " {} {} {}", n[i][0], n[i][1], n[i][2]);
        }
        if let Some(col) = &cloud.colors {
            let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            let _ = write!(s, " {} {} {}", q(col[i][0]), q(col[i][1]), q(col[i][2]));
        }
        if let Some(l) = &cloud.gt_labels {
            let _ = write!(s, " {}", l[i]);
        }
        s.push('\n');
    }
    s
}

pub fn save_ply(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_ply_string(cloud))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const XYZ: &str = "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n1 0 0\n0 1 0.5\n";

    #[test]
    fn minimal_xyz() {
        let c = parse_ply(XYZ).unwrap();
        assert_eq!(c.len(), 3);
        assert!(c.colors.is_none() && c.normals.is_none() && c.gt_labels.is_none());
        assert_eq!(c.coords[2], [0.0, 1.0, 0.5]);
    }

    #[test]
    fn uchar_colors_rescale() {
        let t = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n0 0 0 255 0 51\n";
        let c = parse_ply(t).unwrap();
        assert_eq!(c.colors.unwrap()[0], [1.0, 0.0, 0.2]);
    }

    #[test]
    fn short_vertex_list_is_a_count_mismatch() {
        let t = "ply\nformat ascii 1.0\nelement vertex 5\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n1 0 0\n0 1 0\n1 1 1\n";
        let (_, msg) = parse_ply(t).unwrap_err();
        assert!(msg.contains("vertex count mismatch"), "{msg}");
    }

    #[test]
    fn bad_number_reports_line() {
        let t = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n1 zz 0\n";
        let (line, _) = parse_ply(t).unwrap_err();
        assert_eq!(line, 9);
    }

    #[test]
    fn non_finite_coordinate_rejected() {
        let t = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 nan 0\n";
        let (line, msg) = parse_ply(t).unwrap_err();
        assert_eq!(line, 8);
        assert!(msg.contains("non-finite"));
    }

    #[test]
    fn malformed_header_rejected() {
        assert!(parse_ply("ply\nformat binary_little_endian 1.0\nend_header\n").is_err());
        assert!(parse_ply("plx\n").is_err());
        assert!(parse_ply("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\n0\n").is_err());
    }

    #[test]
    fn load_sets_scene_id_from_stem() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("room7.ply");
        std::fs::write(&p, XYZ).unwrap();
        assert_eq!(load_ply(&p).unwrap().scene_id, "room7");
    }

    proptest! {
        #[test]
        fn roundtrip_preserves_coords_and_labels(
            pts in prop::collection::vec(
                ((-50.0f64..50.0, -50.0f64..50.0, -5.0f64..5.0), 0u32..20), 1..40)
        ) {
            let mut cloud = PointCloud::new(pts.iter().map(|((x, y, z), _)| [*x, *y, *z]).collect());
            cloud.gt_labels = Some(pts.iter().map(|(_, l)| *l).collect());
            cloud.normals = Some(vec![[0.0, 0.0, 1.0]; pts.len()]);
            let back = parse_ply(&to_ply_string(&cloud)).unwrap();
            prop_assert_eq!(&back.gt_labels, &cloud.gt_labels);
            for (a, b) in back.coords.iter().zip(&cloud.coords) {
                for k in 0..3 {
                    prop_assert!((a[k] - b[k]).abs() <= 1e-6);
                }
            }
        }
    }
}
