//! Point-cloud file formats: `x,y,z[,label]` CSV and PLY (ASCII and binary little-endian).
//!
//! Labels use the integer codes of [`SemanticLabel::code`]; 255 (or an empty
//! CSV field) means unlabeled.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cloud::{Point, PointCloud, SemanticLabel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CloudFormat {
    XyzCsv,
    PlyAscii,
    PlyBinary,
}

impl CloudFormat {
    /// Guess from the file extension: `.ply` reads either PLY flavour, anything else is CSV.
    pub fn from_path(path: &Path) -> CloudFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("ply") => CloudFormat::PlyBinary,
            _ => CloudFormat::XyzCsv,
        }
    }
}

impl FromStr for CloudFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xyz-csv" | "csv" => Ok(CloudFormat::XyzCsv),
            "ply-ascii" => Ok(CloudFormat::PlyAscii),
            "ply-binary" | "ply" => Ok(CloudFormat::PlyBinary),
            other => Err(Error::InvalidArgument(format!("unknown cloud format `{other}`"))),
        }
    }
}

impl fmt::Display for CloudFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CloudFormat::XyzCsv => "xyz-csv",
            CloudFormat::PlyAscii => "ply-ascii",
            CloudFormat::PlyBinary => "ply-binary",
        })
    }
}

pub fn load_pointcloud(path: impl AsRef<Path>, format: CloudFormat) -> Result<PointCloud> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    match format {
        CloudFormat::XyzCsv => read_csv(&mut reader, path),
        // The PLY header declares its own encoding.
        CloudFormat::PlyAscii | CloudFormat::PlyBinary => read_ply(&mut reader, path),
    }
}

/// Load, picking the format from the extension.
pub fn load_auto(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    load_pointcloud(path, CloudFormat::from_path(path))
}

pub fn save_pointcloud(cloud: &PointCloud, path: impl AsRef<Path>, format: CloudFormat) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res = match format {
        CloudFormat::XyzCsv => write_csv(cloud, &mut w),
        CloudFormat::PlyAscii => write_ply(cloud, &mut w, false),
        CloudFormat::PlyBinary => write_ply(cloud, &mut w, true),
    };
    res.and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, location: String, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        location,
        message: message.into(),
    }
}

fn read_csv(reader: &mut impl BufRead, path: &Path) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut labels: Vec<SemanticLabel> = Vec::new();
    let mut any_label = false;
    let mut line = String::new();
    let mut line_no = 0usize;
    loop {
        line.clear();
        let n = reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        line_no += 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if points.is_empty() && fields[0].parse::<f64>().is_err() {
            // header row
            if fields.len() < 3 || !fields[..3].iter().zip(["x", "y", "z"]).all(|(a, b)| a.eq_ignore_ascii_case(b)) {
                return Err(parse_err(path, format!("line {line_no}"), "expected header `x,y,z[,label]`"));
            }
            any_label |= fields.get(3).is_some_and(|f| f.eq_ignore_ascii_case("label"));
            continue;
        }
        if fields.len() < 3 || fields.len() > 4 {
            return Err(parse_err(
                path,
                format!("line {line_no}"),
                format!("expected 3 or 4 fields, found {}", fields.len()),
            ));
        }
        let mut xyz = [0.0f64; 3];
        for (a, field) in fields[..3].iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                parse_err(path, format!("line {line_no}"), format!("invalid number `{field}`"))
            })?;
            if !v.is_finite() {
                return Err(parse_err(path, format!("line {line_no}"), "non-finite coordinate"));
            }
            xyz[a] = v;
        }
        let label = match fields.get(3) {
            Some(f) if !f.is_empty() => {
                any_label = true;
                let code: i64 = f.parse().map_err(|_| {
                    parse_err(path, format!("line {line_no}"), format!("invalid label `{f}`"))
                })?;
                SemanticLabel::from_code(code)
            }
            _ => SemanticLabel::Unlabeled,
        };
        points.push(Point::new(xyz[0], xyz[1], xyz[2]));
        labels.push(label);
    }
    PointCloud::from_parts(points, any_label.then_some(labels))
}

fn write_csv(cloud: &PointCloud, w: &mut impl Write) -> std::io::Result<()> {
    // `{}` on f64 prints the shortest representation that round-trips exactly.
    match cloud.labels() {
        Some(labels) => {
            writeln!(w, "x,y,z,label")?;
            for (p, l) in cloud.points().iter().zip(labels) {
                writeln!(w, "{},{},{},{}", p.x, p.y, p.z, l.code())?;
            }
        }
        None => {
            writeln!(w, "x,y,z")?;
            for p in cloud.points() {
                writeln!(w, "{},{},{}", p.x, p.y, p.z)?;
            }
        }
    }
    Ok(())
}

fn write_ply(cloud: &PointCloud, w: &mut impl Write, binary: bool) -> std::io::Result<()> {
    let labels = cloud.labels();
    writeln!(w, "ply")?;
    writeln!(
        w,
        "format {} 1.0",
        if binary { "binary_little_endian" } else { "ascii" }
    )?;
    writeln!(w, "element vertex {}", cloud.len())?;
    writeln!(w, "property double x")?;
    writeln!(w, "property double y")?;
    writeln!(w, "property double z")?;
    if labels.is_some() {
        writeln!(w, "property uchar label")?;
    }
    writeln!(w, "end_header")?;
    for (i, p) in cloud.points().iter().enumerate() {
        if binary {
            w.write_all(&p.x.to_le_bytes())?;
            w.write_all(&p.y.to_le_bytes())?;
            w.write_all(&p.z.to_le_bytes())?;
            if let Some(labels) = labels {
                w.write_all(&[labels[i].code()])?;
            }
        } else {
            match labels {
                Some(labels) => writeln!(w, "{} {} {} {}", p.x, p.y, p.z, labels[i].code())?,
                None => writeln!(w, "{} {} {}", p.x, p.y, p.z)?,
            }
        }
    }
    Ok(())
}

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
    fn parse(s: &str) -> Option<Self> {
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

    fn decode_le(self, b: &[u8]) -> f64 {
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

struct PlyElement {
    name: String,
    count: usize,
    properties: Vec<(String, ScalarType)>,
}

fn read_ply(reader: &mut impl BufRead, path: &Path) -> Result<PointCloud> {
    let mut offset = 0usize;
    let mut line = String::new();
    let next_line = |reader: &mut dyn BufRead, line: &mut String, offset: &mut usize| -> Result<()> {
        line.clear();
        let n = reader.read_line(line).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Err(parse_err(path, format!("byte {offset}"), "unexpected end of header"));
        }
        *offset += n;
        Ok(())
    };

    next_line(reader, &mut line, &mut offset)?;
    if line.trim() != "ply" {
        return Err(parse_err(path, "byte 0".into(), "missing `ply` magic"));
    }
    let mut binary = None;
    let mut elements: Vec<PlyElement> = Vec::new();
    loop {
        let start = offset;
        next_line(reader, &mut line, &mut offset)?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => binary = Some(false),
            ["format", "binary_little_endian", _] => binary = Some(true),
            ["format", other, _] => {
                return Err(parse_err(path, format!("byte {start}"), format!("unsupported format `{other}`")))
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                let count = count.parse().map_err(|_| {
                    parse_err(path, format!("byte {start}"), format!("invalid element count `{count}`"))
                })?;
                elements.push(PlyElement {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            ["property", "list", ..] => {
                let el = elements.last().map(|e| e.name.as_str()).unwrap_or("");
                if el == "vertex" || !elements.iter().any(|e| e.name == "vertex") {
                    return Err(parse_err(
                        path,
                        format!("byte {start}"),
                        "list properties before or on the vertex element are not supported",
                    ));
                }
            }
            ["property", ty, name] => {
                let ty = ScalarType::parse(ty).ok_or_else(|| {
                    parse_err(path, format!("byte {start}"), format!("unknown property type `{ty}`"))
                })?;
                let el = elements.last_mut().ok_or_else(|| {
                    parse_err(path, format!("byte {start}"), "property before any element")
                })?;
                el.properties.push((name.to_string(), ty));
            }
            _ => {
                return Err(parse_err(path, format!("byte {start}"), format!("unrecognised header line `{}`", line.trim())))
            }
        }
    }
    let binary = binary.ok_or_else(|| parse_err(path, format!("byte {offset}"), "missing format line"))?;

    let Some(vertex_pos) = elements.iter().position(|e| e.name == "vertex") else {
        return Ok(PointCloud::default());
    };
    let vertex = &elements[vertex_pos];
    let find = |name: &str| vertex.properties.iter().position(|(n, _)| n == name);
    let (Some(ix), Some(iy), Some(iz)) = (find("x"), find("y"), find("z")) else {
        return Err(parse_err(path, format!("byte {offset}"), "vertex element lacks x/y/z"));
    };
    let ilabel = find("label");

    let mut points = Vec::with_capacity(vertex.count);
    let mut labels = ilabel.map(|_| Vec::with_capacity(vertex.count));
    let mut values = vec![0.0f64; vertex.properties.len()];

    if binary {
        // skip any fixed-size elements that precede the vertices
        for el in &elements[..vertex_pos] {
            let size: usize = el.properties.iter().map(|(_, t)| t.size()).sum();
            let mut skip = vec![0u8; size * el.count];
            reader.read_exact(&mut skip).map_err(|e| {
                parse_err(path, format!("byte {offset}"), format!("truncated element `{}`: {e}", el.name))
            })?;
            offset += skip.len();
        }
        let stride: usize = vertex.properties.iter().map(|(_, t)| t.size()).sum();
        let mut record = vec![0u8; stride];
        for i in 0..vertex.count {
            reader.read_exact(&mut record).map_err(|_| {
                parse_err(path, format!("byte {offset}"), format!("truncated vertex record {i}"))
            })?;
            let mut at = 0;
            for (k, (_, ty)) in vertex.properties.iter().enumerate() {
                values[k] = ty.decode_le(&record[at..at + ty.size()]);
                at += ty.size();
            }
            push_vertex(&values, (ix, iy, iz, ilabel), &mut points, labels.as_mut())
                .map_err(|m| parse_err(path, format!("byte {offset}"), m))?;
            offset += stride;
        }
    } else {
        let mut line_no = 0usize;
        for el in &elements[..vertex_pos] {
            for _ in 0..el.count {
                next_line(reader, &mut line, &mut offset)?;
            }
        }
        for _ in 0..vertex.count {
            let start = offset;
            line.clear();
            let n = reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
            if n == 0 {
                return Err(parse_err(path, format!("byte {start}"), "fewer vertex records than declared"));
            }
            offset += n;
            line_no += 1;
            let tokens: Vec<&str> = line.split_whitespace().collect();
            if tokens.len() != vertex.properties.len() {
                return Err(parse_err(
                    path,
                    format!("byte {start} (vertex {line_no})"),
                    format!("expected {} values, found {}", vertex.properties.len(), tokens.len()),
                ));
            }
            for (k, tok) in tokens.iter().enumerate() {
                values[k] = tok.parse().map_err(|_| {
                    parse_err(path, format!("byte {start} (vertex {line_no})"), format!("invalid number `{tok}`"))
                })?;
            }
            push_vertex(&values, (ix, iy, iz, ilabel), &mut points, labels.as_mut())
                .map_err(|m| parse_err(path, format!("byte {start}"), m))?;
        }
    }
    PointCloud::from_parts(points, labels)
}

fn push_vertex(
    values: &[f64],
    (ix, iy, iz, ilabel): (usize, usize, usize, Option<usize>),
    points: &mut Vec<Point>,
    labels: Option<&mut Vec<SemanticLabel>>,
) -> std::result::Result<(), String> {
    let p = Point::new(values[ix], values[iy], values[iz]);
    if !p.is_finite() {
        return Err("non-finite coordinate".into());
    }
    points.push(p);
    if let (Some(labels), Some(il)) = (labels, ilabel) {
        labels.push(SemanticLabel::from_code(values[il] as i64));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const FORMATS: [CloudFormat; 3] = [CloudFormat::XyzCsv, CloudFormat::PlyAscii, CloudFormat::PlyBinary];

    fn random_cloud(n: usize, seed: u64, labeled: bool) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points: Vec<Point> = (0..n)
            .map(|_| {
                Point::new(
                    rng.random_range(-1e5..1e5),
                    rng.random_range(-1e5..1e5),
                    rng.random_range(-50.0..500.0),
                )
            })
            .collect();
        let labels = labeled.then(|| {
            (0..n)
                .map(|_| SemanticLabel::from_code(rng.random_range(0..5)))
                .collect()
        });
        PointCloud::from_parts(points, labels).unwrap()
    }

    #[test]
    fn csv_rows_become_points() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        std::fs::write(&path, "0,0,0\n1,2,3\n").unwrap();
        let cloud = load_pointcloud(&path, CloudFormat::XyzCsv).unwrap();
        assert_eq!(cloud.points(), &[Point::new(0.0, 0.0, 0.0), Point::new(1.0, 2.0, 3.0)]);
        assert!(cloud.labels().is_none());
    }

    #[test]
    fn csv_header_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        std::fs::write(&path, "x,y,z,label\n0,0,0,1\n1,2,3,\n").unwrap();
        let cloud = load_pointcloud(&path, CloudFormat::XyzCsv).unwrap();
        assert_eq!(
            cloud.labels().unwrap(),
            &[SemanticLabel::LowerStem, SemanticLabel::Unlabeled]
        );
    }

    #[test]
    fn empty_file_is_empty_cloud() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        std::fs::write(&path, "").unwrap();
        assert!(load_pointcloud(&path, CloudFormat::XyzCsv).unwrap().is_empty());
    }

    #[test]
    fn empty_cloud_saves_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        for format in FORMATS {
            let path = dir.path().join(format!("e.{format}"));
            save_pointcloud(&PointCloud::default(), &path, format).unwrap();
            assert!(load_pointcloud(&path, format).unwrap().is_empty());
        }
    }

    #[test]
    fn malformed_csv_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "0,0,0\n1,abc,3\n").unwrap();
        let err = load_pointcloud(&path, CloudFormat::XyzCsv).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn non_finite_coordinate_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan.csv");
        std::fs::write(&path, "0,0,NaN\n").unwrap();
        assert!(load_pointcloud(&path, CloudFormat::XyzCsv).is_err());
        let path = dir.path().join("nan.ply");
        std::fs::write(
            &path,
            "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 inf 0\n",
        )
        .unwrap();
        assert!(load_pointcloud(&path, CloudFormat::PlyAscii).is_err());
    }

    #[test]
    fn labeled_cloud_writes_label_column() {
        let dir = tempfile::tempdir().unwrap();
        let cloud = random_cloud(3, 5, true);
        let path = dir.path().join("l.csv");
        save_pointcloud(&cloud, &path, CloudFormat::XyzCsv).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("x,y,z,label\n"));
        let path = dir.path().join("l.ply");
        save_pointcloud(&cloud, &path, CloudFormat::PlyAscii).unwrap();
        assert!(std::fs::read_to_string(&path).unwrap().contains("property uchar label"));
    }

    #[test]
    fn thousand_point_round_trip_every_format() {
        let dir = tempfile::tempdir().unwrap();
        let cloud = random_cloud(1000, 11, true);
        for format in FORMATS {
            let path = dir.path().join(format!("r.{format}"));
            save_pointcloud(&cloud, &path, format).unwrap();
            assert_eq!(load_pointcloud(&path, format).unwrap(), cloud, "{format}");
        }
    }

    #[test]
    fn binary_save_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let cloud = random_cloud(100_000, 13, true);
        let a = dir.path().join("a.ply");
        let b = dir.path().join("b.ply");
        save_pointcloud(&cloud, &a, CloudFormat::PlyBinary).unwrap();
        let reloaded = load_pointcloud(&a, CloudFormat::PlyBinary).unwrap();
        save_pointcloud(&reloaded, &b, CloudFormat::PlyBinary).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn reads_float32_ply_with_extra_properties() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.ply");
        let mut bytes = b"ply\nformat binary_little_endian 1.0\ncomment x\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nproperty ushort intensity\nend_header\n".to_vec();
        for (x, y, z) in [(1.0f32, 2.0f32, 3.0f32), (4.0, 5.0, 6.0)] {
            bytes.extend(x.to_le_bytes());
            bytes.extend(y.to_le_bytes());
            bytes.extend(z.to_le_bytes());
            bytes.extend(7u16.to_le_bytes());
        }
        std::fs::write(&path, bytes).unwrap();
        let cloud = load_pointcloud(&path, CloudFormat::PlyBinary).unwrap();
        assert_eq!(cloud.points()[1], Point::new(4.0, 5.0, 6.0));
    }

    #[test]
    fn truncated_binary_ply_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ply");
        let cloud = random_cloud(4, 1, false);
        save_pointcloud(&cloud, &path, CloudFormat::PlyBinary).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 5);
        std::fs::write(&path, bytes).unwrap();
        let err = load_pointcloud(&path, CloudFormat::PlyBinary).unwrap_err();
        assert!(err.to_string().contains("byte"), "{err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn round_trip_preserves_points_and_labels(
            pts in proptest::collection::vec((-1e6f64..1e6, -1e6f64..1e6, -1e3f64..1e3, 0i64..5), 0..60),
            fmt_idx in 0usize..3,
        ) {
            let dir = tempfile::tempdir().unwrap();
            let points = pts.iter().map(|&(x, y, z, _)| Point::new(x, y, z)).collect();
            let labels = pts.iter().map(|&(.., l)| SemanticLabel::from_code(l)).collect();
            let cloud = PointCloud::with_labels(points, labels).unwrap();
            let format = FORMATS[fmt_idx];
            let path = dir.path().join("p");
            save_pointcloud(&cloud, &path, format).unwrap();
            prop_assert_eq!(load_pointcloud(&path, format).unwrap(), cloud);
        }
    }
}
