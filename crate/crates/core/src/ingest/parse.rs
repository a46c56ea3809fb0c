use super::{ParseError, ParsedCloud, SourceKind};

type Result<T> = std::result::Result<T, ParseError>;

/// Parses one source file.
pub fn parse_source(bytes: &[u8], kind: SourceKind) -> Result<ParsedCloud> {
    if bytes.is_empty() {
        return Err(ParseError::TruncatedPayload("empty input".into()));
    }
    let cloud = match kind {
        SourceKind::PlyAscii | SourceKind::PlyBinaryLe => parse_ply(bytes, kind)?,
        SourceKind::Obj => parse_obj(bytes)?,
        SourceKind::XyzText => parse_xyz(bytes)?,
        SourceKind::KittiBin => parse_kitti(bytes)?,
        SourceKind::Npy => parse_npy(bytes)?,
    };
    if cloud.points.is_empty() {
        return Err(ParseError::TruncatedPayload("no points".into()));
    }
    Ok(cloud)
}

fn number<T: std::str::FromStr>(tok: &str) -> Result<T> {
    tok.parse()
        .map_err(|_| ParseError::InvalidValue(format!("`{tok}` is not a number")))
}

fn text(bytes: &[u8]) -> Result<&str> {
    std::str::from_utf8(bytes).map_err(|e| ParseError::InvalidValue(format!("not UTF-8: {e}")))
}

// ---------------------------------------------------------------- PLY

#[derive(Debug, Clone, Copy, PartialEq)]
enum PlyScalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PlyScalar {
    fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            other => return Err(ParseError::UnsupportedProperty(format!("type `{other}`"))),
        })
    }

    fn width(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    /// Colors stored as integers are scaled to [0, 1].
    fn color_scale(self) -> f32 {
        match self {
            Self::U8 | Self::I8 => 255.0,
            Self::U16 | Self::I16 => 65535.0,
            _ => 1.0,
        }
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

#[derive(Debug)]
struct PlyProperty {
    name: String,
    ty: PlyScalar,
    /// Count type for list properties.
    list: Option<PlyScalar>,
}

#[derive(Debug)]
struct PlyElement {
    name: String,
    count: usize,
    props: Vec<PlyProperty>,
}

struct PlyHeader {
    binary: bool,
    elements: Vec<PlyElement>,
    body: usize,
}

fn parse_ply_header(bytes: &[u8]) -> Result<PlyHeader> {
    const END: &[u8] = b"end_header";
    let mut pos = 0;
    let mut lines = Vec::new();
    let body = loop {
        let Some(nl) = bytes[pos..].iter().position(|&b| b == b'\n') else {
            return Err(ParseError::MalformedHeader("missing end_header".into()));
        };
        let line = text(&bytes[pos..pos + nl])?.trim_end_matches('\r');
        pos += nl + 1;
        if line.as_bytes() == END {
            break pos;
        }
        lines.push(line);
    };
    let mut it = lines.into_iter();
    if it.next() != Some("ply") {
        return Err(ParseError::MalformedHeader(
            "missing `ply` magic line".into(),
        ));
    }
    let mut binary = None;
    let mut elements: Vec<PlyElement> = Vec::new();
    for line in it {
        let toks: Vec<&str> = line.split_ascii_whitespace().collect();
        match toks.as_slice() {
            [] | ["comment", ..] | ["obj_info", ..] => {}
            ["format", fmt, _version] => {
                binary = Some(match *fmt {
                    "ascii" => false,
                    "binary_little_endian" => true,
                    "binary_big_endian" => {
                        return Err(ParseError::UnsupportedProperty("big-endian PLY".into()))
                    }
                    other => return Err(ParseError::MalformedHeader(format!("format `{other}`"))),
                })
            }
            ["element", name, count] => elements.push(PlyElement {
                name: (*name).to_owned(),
                count: count
                    .parse()
                    .map_err(|_| ParseError::MalformedHeader(format!("element count `{count}`")))?,
                props: Vec::new(),
            }),
            ["property", "list", count_ty, ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| ParseError::MalformedHeader("property before element".into()))?;
                el.props.push(PlyProperty {
                    name: (*name).to_owned(),
                    ty: PlyScalar::from_name(ty)?,
                    list: Some(PlyScalar::from_name(count_ty)?),
                });
            }
            ["property", ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| ParseError::MalformedHeader("property before element".into()))?;
                el.props.push(PlyProperty {
                    name: (*name).to_owned(),
                    ty: PlyScalar::from_name(ty)?,
                    list: None,
                });
            }
            _ => {
                return Err(ParseError::MalformedHeader(format!(
                    "unrecognized header line `{line}`"
                )))
            }
        }
    }
    let binary = binary.ok_or_else(|| ParseError::MalformedHeader("missing format line".into()))?;
    Ok(PlyHeader {
        binary,
        elements,
        body,
    })
}

/// Column positions of the vertex attributes we keep.
struct VertexLayout {
    xyz: [usize; 3],
    normal: Option<[usize; 3]>,
    color: Option<([usize; 3], f32)>,
    intensity: Option<usize>,
}

fn vertex_layout(el: &PlyElement) -> Result<VertexLayout> {
    if let Some(p) = el.props.iter().find(|p| p.list.is_some()) {
        return Err(ParseError::UnsupportedProperty(format!(
            "list property `{}` on vertex",
            p.name
        )));
    }
    let find = |name: &str| el.props.iter().position(|p| p.name == name);
    let triple = |names: [&str; 3]| -> Result<Option<[usize; 3]>> {
        match names.map(find) {
            [Some(a), Some(b), Some(c)] => Ok(Some([a, b, c])),
            [None, None, None] => Ok(None),
            _ => Err(ParseError::MalformedHeader(format!(
                "incomplete property set {names:?}"
            ))),
        }
    };
    let xyz = triple(["x", "y", "z"])?
        .ok_or_else(|| ParseError::MalformedHeader("vertex lacks x, y, z".into()))?;
    let normal = triple(["nx", "ny", "nz"])?;
    let color = triple(["red", "green", "blue"])?.map(|c| (c, el.props[c[0]].ty.color_scale()));
    Ok(VertexLayout {
        xyz,
        normal,
        color,
        intensity: find("intensity"),
    })
}

fn collect_vertex(layout: &VertexLayout, row: &[f64], cloud: &mut ParsedCloud) {
    let pick = |c: [usize; 3]| [row[c[0]] as f32, row[c[1]] as f32, row[c[2]] as f32];
    cloud.points.push(pick(layout.xyz));
    if let (Some(c), Some(n)) = (layout.normal, cloud.normals.as_mut()) {
        n.push(pick(c));
    }
    if let (Some((c, scale)), Some(out)) = (layout.color, cloud.colors.as_mut()) {
        out.push(pick(c).map(|v| v / scale));
    }
    if let (Some(i), Some(out)) = (layout.intensity, cloud.intensity.as_mut()) {
        out.push(row[i] as f32);
    }
}

fn parse_ply(bytes: &[u8], kind: SourceKind) -> Result<ParsedCloud> {
    let header = parse_ply_header(bytes)?;
    if header.binary != (kind == SourceKind::PlyBinaryLe) {
        return Err(ParseError::MalformedHeader(format!(
            "file format does not match {kind}"
        )));
    }
    let vertex = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| ParseError::MalformedHeader("no vertex element".into()))?;
    let layout = vertex_layout(&header.elements[vertex])?;
    let n = header.elements[vertex].count;
    let cap = n.min(bytes.len());
    let mut cloud = ParsedCloud {
        points: Vec::with_capacity(cap),
        normals: layout.normal.map(|_| Vec::with_capacity(cap)),
        colors: layout.color.map(|_| Vec::with_capacity(cap)),
        intensity: layout.intensity.map(|_| Vec::with_capacity(cap)),
        label: None,
    };
    let body = &bytes[header.body..];
    let mut row = Vec::new();
    if header.binary {
        let mut pos = 0;
        let mut take = |w: usize| -> Result<&[u8]> {
            let s = body.get(pos..pos + w).ok_or_else(|| {
                ParseError::TruncatedPayload(format!("binary body ends at byte {pos}"))
            })?;
            pos += w;
            Ok(s)
        };
        for (ei, el) in header.elements.iter().enumerate() {
            for _ in 0..el.count {
                row.clear();
                for p in &el.props {
                    match p.list {
                        None => row.push(p.ty.read_le(take(p.ty.width())?)),
                        Some(ct) => {
                            let len = ct.read_le(take(ct.width())?);
                            if !(0.0..=u32::MAX as f64).contains(&len) {
                                return Err(ParseError::InvalidValue(format!("list length {len}")));
                            }
                            take(len as usize * p.ty.width())?;
                        }
                    }
                }
                if ei == vertex {
                    collect_vertex(&layout, &row, &mut cloud);
                }
            }
        }
    } else {
        let mut toks = text(body)?.split_ascii_whitespace();
        let mut next = || -> Result<f64> {
            number(
                toks.next()
                    .ok_or_else(|| ParseError::TruncatedPayload("ascii body ended early".into()))?,
            )
        };
        for (ei, el) in header.elements.iter().enumerate() {
            for _ in 0..el.count {
                row.clear();
                for p in &el.props {
                    match p.list {
                        None => row.push(next()?),
                        Some(_) => {
                            let len = next()?;
                            if !(0.0..=u32::MAX as f64).contains(&len) || len.fract() != 0.0 {
                                return Err(ParseError::InvalidValue(format!("list length {len}")));
                            }
                            for _ in 0..len as u64 {
                                next()?;
                            }
                        }
                    }
                }
                if ei == vertex {
                    collect_vertex(&layout, &row, &mut cloud);
                }
            }
        }
    }
    Ok(cloud)
}

// ---------------------------------------------------------------- OBJ

fn parse_obj(bytes: &[u8]) -> Result<ParsedCloud> {
    let mut points = Vec::new();
    let mut colors = Vec::new();
    let mut normals = Vec::new();
    for (lineno, line) in text(bytes)?.lines().enumerate() {
        let mut toks = line.split_ascii_whitespace();
        let Some(tag) = toks.next() else { continue };
        let vals = || -> Result<Vec<f32>> { toks.clone().map(number).collect() };
        match tag {
            "v" => {
                let v = vals()?;
                match v.len() {
                    0..=2 => {
                        return Err(ParseError::TruncatedPayload(format!(
                            "line {}: vertex has {} values",
                            lineno + 1,
                            v.len()
                        )))
                    }
                    // x y z [w]
                    3 | 4 => points.push([v[0], v[1], v[2]]),
                    // x y z r g b [a]
                    6 | 7 => {
                        points.push([v[0], v[1], v[2]]);
                        colors.push([v[3], v[4], v[5]]);
                    }
                    n => {
                        return Err(ParseError::InvalidValue(format!(
                            "line {}: vertex has {n} values",
                            lineno + 1
                        )))
                    }
                }
            }
            "vn" => {
                let v = vals()?;
                if v.len() < 3 {
                    return Err(ParseError::TruncatedPayload(format!(
                        "line {}: normal has {} values",
                        lineno + 1,
                        v.len()
                    )));
                }
                normals.push([v[0], v[1], v[2]]);
            }
            "vt" => {
                return Err(ParseError::UnsupportedProperty(
                    "texture coordinates (vt)".into(),
                ))
            }
            "mtllib" | "usemtl" => return Err(ParseError::UnsupportedProperty("materials".into())),
            _ => {}
        }
    }
    if !colors.is_empty() && colors.len() != points.len() {
        return Err(ParseError::InvalidValue(
            "only some vertices carry colors".into(),
        ));
    }
    let normals = (!normals.is_empty() && normals.len() == points.len()).then_some(normals);
    Ok(ParsedCloud {
        colors: (!colors.is_empty()).then_some(colors),
        normals,
        points,
        intensity: None,
        label: None,
    })
}

// ---------------------------------------------------------------- XYZ text

fn parse_xyz(bytes: &[u8]) -> Result<ParsedCloud> {
    let mut points = Vec::new();
    let mut normals = Vec::new();
    let mut cols = None;
    let mut row = Vec::with_capacity(6);
    for (lineno, line) in text(bytes)?.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        row.clear();
        for tok in line
            .split(|c: char| c == ',' || c.is_ascii_whitespace())
            .filter(|t| !t.is_empty())
        {
            row.push(number::<f32>(tok)?);
        }
        let want = *cols.get_or_insert(row.len());
        if want != 3 && want != 6 {
            return Err(ParseError::InvalidValue(format!(
                "expected 3 or 6 columns, found {want}"
            )));
        }
        if row.len() < want {
            return Err(ParseError::TruncatedPayload(format!(
                "line {} has {} of {want} columns",
                lineno + 1,
                row.len()
            )));
        }
        if row.len() > want {
            return Err(ParseError::InvalidValue(format!(
                "line {} has {} columns, expected {want}",
                lineno + 1,
                row.len()
            )));
        }
        points.push([row[0], row[1], row[2]]);
        if want == 6 {
            normals.push([row[3], row[4], row[5]]);
        }
    }
    Ok(ParsedCloud {
        normals: (cols == Some(6)).then_some(normals),
        points,
        colors: None,
        intensity: None,
        label: None,
    })
}

// ---------------------------------------------------------------- KITTI

fn parse_kitti(bytes: &[u8]) -> Result<ParsedCloud> {
    if !bytes.len().is_multiple_of(16) {
        return Err(ParseError::TruncatedPayload(format!(
            "{} bytes is not a whole number of records",
            bytes.len()
        )));
    }
    let n = bytes.len() / 16;
    let mut points = Vec::with_capacity(n);
    let mut intensity = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(16) {
        let f = |i: usize| f32::from_le_bytes(rec[i * 4..i * 4 + 4].try_into().unwrap());
        points.push([f(0), f(1), f(2)]);
        intensity.push(f(3));
    }
    Ok(ParsedCloud {
        points,
        normals: None,
        colors: None,
        intensity: Some(intensity),
        label: None,
    })
}

// ---------------------------------------------------------------- NPY

const NPY_MAGIC: &[u8] = b"\x93NUMPY";

/// Value of `'key': <value>` inside the header dict literal.
fn dict_value<'a>(dict: &'a str, key: &str) -> Result<&'a str> {
    let pat = format!("'{key}'");
    let start = dict
        .find(&pat)
        .ok_or_else(|| ParseError::MalformedHeader(format!("npy header lacks {pat}")))?;
    let rest = dict[start + pat.len()..].trim_start();
    let rest = rest
        .strip_prefix(':')
        .ok_or_else(|| ParseError::MalformedHeader(format!("npy header: no value for {pat}")))?
        .trim_start();
    let end = if rest.starts_with('(') {
        rest.find(')').map(|i| i + 1)
    } else {
        rest.find([',', '}'])
    }
    .ok_or_else(|| ParseError::MalformedHeader(format!("npy header: unterminated {pat}")))?;
    Ok(rest[..end].trim())
}

fn parse_npy(bytes: &[u8]) -> Result<ParsedCloud> {
    if bytes.len() < 10 || &bytes[..6] != NPY_MAGIC {
        return Err(ParseError::MalformedHeader("missing NPY magic".into()));
    }
    if bytes[6..8] != [1, 0] {
        return Err(ParseError::UnsupportedProperty(format!(
            "npy version {}.{}",
            bytes[6], bytes[7]
        )));
    }
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let dict = bytes
        .get(10..10 + hlen)
        .ok_or_else(|| ParseError::MalformedHeader("npy header truncated".into()))?;
    let dict = text(dict)?;
    let descr = dict_value(dict, "descr")?.trim_matches(|c| c == '\'' || c == '"');
    let width = match descr {
        "<f4" => 4,
        "<f8" => 8,
        other => {
            return Err(ParseError::UnsupportedProperty(format!(
                "npy dtype `{other}`"
            )))
        }
    };
    if dict_value(dict, "fortran_order")? != "False" {
        return Err(ParseError::UnsupportedProperty(
            "Fortran-ordered npy".into(),
        ));
    }
    let shape: Vec<usize> = dict_value(dict, "shape")?
        .trim_matches(|c| c == '(' || c == ')')
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| ParseError::MalformedHeader(format!("npy shape entry `{s}`")))
        })
        .collect::<Result<_>>()?;
    let (n, cols) = match shape.as_slice() {
        [n, c @ (3 | 6)] => (*n, *c),
        other => {
            return Err(ParseError::UnsupportedProperty(format!(
                "npy shape {other:?}"
            )))
        }
    };
    let data = &bytes[10 + hlen..];
    let need = n
        .checked_mul(cols * width)
        .ok_or_else(|| ParseError::MalformedHeader("npy shape overflows".into()))?;
    if data.len() < need {
        return Err(ParseError::TruncatedPayload(format!(
            "npy data has {} of {need} bytes",
            data.len()
        )));
    }
    let value = |i: usize| -> f32 {
        let b = &data[i * width..(i + 1) * width];
        if width == 4 {
            f32::from_le_bytes(b.try_into().unwrap())
        } else {
            f64::from_le_bytes(b.try_into().unwrap()) as f32
        }
    };
    let mut points = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(if cols == 6 { n } else { 0 });
    for r in 0..n {
        let base = r * cols;
        points.push([value(base), value(base + 1), value(base + 2)]);
        if cols == 6 {
            normals.push([value(base + 3), value(base + 4), value(base + 5)]);
        }
    }
    Ok(ParsedCloud {
        points,
        normals: (cols == 6).then_some(normals),
        colors: None,
        intensity: None,
        label: None,
    })
}

/// Whether an NPY payload is stored as float64 (narrowed on parse).
pub(crate) fn npy_is_f64(bytes: &[u8]) -> bool {
    bytes.len() >= 10 && {
        let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        bytes
            .get(10..10 + hlen)
            .and_then(|d| std::str::from_utf8(d).ok())
            .is_some_and(|d| d.contains("<f8"))
    }
}
