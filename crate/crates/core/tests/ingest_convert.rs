use std::fs;
use std::path::Path;

use pcpipe::format::{DatasetReader, FieldKind, FieldType, Schema};
use pcpipe::index::build_index;
use pcpipe::ingest::synth::{self, shape_cloud, to_kitti_bin, to_npy, to_obj, to_ply, to_xyz_text};
use pcpipe::ingest::{
    convert, list_source_files, parse_source, sample_to_cloud, ConvertOptions, IngestError,
    ParseError, ParsedCloud, SourceKind,
};
use proptest::prelude::*;

fn xyz_schema() -> Schema {
    Schema::new()
        .with("data", FieldType::tensor(FieldKind::Bytes, vec![3]))
        .with("label", FieldType::scalar(FieldKind::Int32))
}

fn read_back(dir: &Path, schema: &Schema) -> Vec<ParsedCloud> {
    let reader = DatasetReader::open(dir).unwrap();
    let index = build_index(&reader.headers()).unwrap();
    index
        .entries()
        .iter()
        .map(|e| sample_to_cloud(&reader.read_sample(e).unwrap(), schema).unwrap())
        .collect()
}

#[test]
fn toy_tree_labels_follow_sorted_class_names() {
    let src = tempfile::tempdir().unwrap();
    // written out of order on purpose
    for class in ["table", "airplane"] {
        fs::create_dir_all(src.path().join(class)).unwrap();
        for i in [2, 0, 1] {
            fs::write(
                src.path().join(class).join(format!("{class}_{i}.txt")),
                format!("{i},0,0\n1,1,{i}\n"),
            )
            .unwrap();
        }
    }
    let out = tempfile::tempdir().unwrap();
    let conv = convert(
        src.path(),
        &xyz_schema(),
        &ConvertOptions::new(SourceKind::XyzText),
        out.path(),
    )
    .unwrap();
    assert_eq!(conv.report.files, 6);
    assert_eq!(conv.report.samples, 6);
    assert_eq!(conv.report.classes, vec!["airplane", "table"]);
    let labels: Vec<i32> = read_back(out.path(), &xyz_schema())
        .iter()
        .map(|c| c.label.unwrap())
        .collect();
    assert_eq!(labels, vec![0, 0, 0, 1, 1, 1]);

    // read-back equals parse output in sorted file order
    let files = list_source_files(src.path(), SourceKind::XyzText).unwrap();
    let back = read_back(out.path(), &xyz_schema());
    for (rel, got) in files.iter().zip(&back) {
        let mut want = parse_source(
            &fs::read(src.path().join(rel)).unwrap(),
            SourceKind::XyzText,
        )
        .unwrap();
        want.label = got.label;
        assert_eq!(&want, got);
    }
    let report: serde_json::Value = serde_json::to_value(&conv.report).unwrap();
    assert!(report["ratio"].as_f64().unwrap() > 0.0);
}

#[test]
fn empty_directory_has_no_input_files() {
    let src = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let r = convert(
        src.path(),
        &xyz_schema(),
        &ConvertOptions::new(SourceKind::XyzText),
        out.path(),
    );
    assert!(matches!(r, Err(IngestError::NoInputFiles { .. })));
}

#[test]
fn parse_failure_names_the_file() {
    let src = tempfile::tempdir().unwrap();
    fs::create_dir_all(src.path().join("a")).unwrap();
    fs::write(src.path().join("a/good.txt"), "0,0,0\n").unwrap();
    fs::write(src.path().join("a/bad.txt"), "0,0\n").unwrap();
    let out = tempfile::tempdir().unwrap();
    match convert(
        src.path(),
        &xyz_schema(),
        &ConvertOptions::new(SourceKind::XyzText),
        out.path(),
    ) {
        Err(IngestError::ParseFailure { path, .. }) => assert!(path.ends_with("a/bad.txt")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn unmapped_schema_field_is_rejected() {
    let src = tempfile::tempdir().unwrap();
    fs::create_dir_all(src.path().join("a")).unwrap();
    fs::write(src.path().join("a/x.txt"), "0,0,0\n").unwrap();
    let schema = xyz_schema().with("weight", FieldType::scalar(FieldKind::Float32));
    let out = tempfile::tempdir().unwrap();
    let r = convert(
        src.path(),
        &schema,
        &ConvertOptions::new(SourceKind::XyzText),
        out.path(),
    );
    assert!(matches!(r, Err(IngestError::SchemaMismatch(_))));
}

#[test]
fn num_points_resizes_every_cloud() {
    let src = tempfile::tempdir().unwrap();
    for (i, n) in [10usize, 100, 64].into_iter().enumerate() {
        fs::create_dir_all(src.path().join("c")).unwrap();
        fs::write(
            src.path().join(format!("c/{i}.txt")),
            to_xyz_text(&shape_cloud(i, 0, n), 6),
        )
        .unwrap();
    }
    let out = tempfile::tempdir().unwrap();
    let opts = ConvertOptions {
        num_points: Some(64),
        ..ConvertOptions::new(SourceKind::XyzText)
    };
    let schema = Schema::modelnet40();
    convert(src.path(), &schema, &opts, out.path()).unwrap();
    assert!(read_back(out.path(), &schema)
        .iter()
        .all(|c| c.len() == 64 && c.normals.as_ref().unwrap().len() == 64));
}

type Encoder = Box<dyn Fn(&ParsedCloud) -> Vec<u8>>;

#[test]
fn every_kind_converts_and_reads_back() {
    let modelnet = Schema::modelnet40();
    let kitti = Schema::new()
        .with("data", FieldType::tensor(FieldKind::Bytes, vec![3]))
        .with("intensity", FieldType::tensor(FieldKind::Bytes, vec![1]));
    let cases: Vec<(SourceKind, &str, Schema, Encoder)> = vec![
        (
            SourceKind::PlyAscii,
            "ply",
            modelnet.clone(),
            Box::new(|c| to_ply(c, false)),
        ),
        (
            SourceKind::PlyBinaryLe,
            "ply",
            modelnet.clone(),
            Box::new(|c| to_ply(c, true)),
        ),
        (
            SourceKind::Obj,
            "obj",
            modelnet.clone(),
            Box::new(|c| to_obj(c).into_bytes()),
        ),
        (
            SourceKind::Npy,
            "npy",
            modelnet.clone(),
            Box::new(|c| to_npy(c, true)),
        ),
        (
            SourceKind::XyzText,
            "txt",
            modelnet.clone(),
            Box::new(|c| to_xyz_text(c, 6).into_bytes()),
        ),
    ];
    for (kind, ext, schema, encode) in cases {
        let src = tempfile::tempdir().unwrap();
        let mut expected = Vec::new();
        for (ci, class) in ["b", "a"].iter().enumerate() {
            fs::create_dir_all(src.path().join(class)).unwrap();
            for v in 0..3u64 {
                let bytes = encode(&shape_cloud(ci, v, 40 + v as usize));
                fs::write(src.path().join(class).join(format!("{v}.{ext}")), &bytes).unwrap();
            }
        }
        for rel in list_source_files(src.path(), kind).unwrap() {
            let mut c = parse_source(&fs::read(src.path().join(&rel)).unwrap(), kind).unwrap();
            c.label = Some(i32::from(rel.starts_with("b")));
            expected.push(c);
        }
        let out = tempfile::tempdir().unwrap();
        let opts = ConvertOptions {
            slice_count: 2,
            group_size: 2,
            ..ConvertOptions::new(kind)
        };
        let conv = convert(src.path(), &schema, &opts, out.path()).unwrap();
        assert_eq!(read_back(out.path(), &schema), expected, "{kind}");
        if kind == SourceKind::Npy {
            assert_eq!(conv.report.narrowed_float64_files, 6);
        }
    }
    let src = tempfile::tempdir().unwrap();
    synth::write_kitti_corpus(src.path(), 8, 64, 30_000).unwrap();
    let out = tempfile::tempdir().unwrap();
    convert(
        src.path(),
        &kitti,
        &ConvertOptions::new(SourceKind::KittiBin),
        out.path(),
    )
    .unwrap();
    let back = read_back(out.path(), &kitti);
    assert_eq!(
        back[0],
        parse_source(
            &to_kitti_bin(&synth::lidar_scan(0, 8, 64)),
            SourceKind::KittiBin
        )
        .unwrap()
    );
}

fn truncations_rejected(bytes: &[u8], kind: SourceKind, cut: usize) -> Result<(), TestCaseError> {
    let r = parse_source(&bytes[..cut], kind);
    prop_assert!(r.is_err(), "{kind} cut at {cut} of {} parsed", bytes.len());
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, failure_persistence: None, ..ProptestConfig::default() })]

    // Binary formats declare their length, so every strict prefix must fail.
    #[test]
    fn binary_truncation_always_rejected(n in 1usize..30, cut_frac in 0.0f64..1.0, class in 0usize..4) {
        let c = shape_cloud(class, 1, n);
        let ply = to_ply(&c, true);
        truncations_rejected(&ply, SourceKind::PlyBinaryLe, (cut_frac * ply.len() as f64) as usize)?;
        let npy = to_npy(&c, false);
        truncations_rejected(&npy, SourceKind::Npy, (cut_frac * npy.len() as f64) as usize)?;
        let bin = to_kitti_bin(&c);
        let cut = (cut_frac * bin.len() as f64) as usize;
        if !cut.is_multiple_of(16) || cut == 0 {
            truncations_rejected(&bin, SourceKind::KittiBin, cut)?;
        }
    }

    // Text formats: no panic at any cut; ascii PLY must fail once a whole
    // token of the declared body is missing.
    #[test]
    fn text_truncation_never_panics(n in 1usize..20, cut_frac in 0.0f64..1.0) {
        let c = shape_cloud(1, 2, n);
        let ply = to_ply(&c, false);
        let cut = (cut_frac * ply.len() as f64) as usize;
        let last_token = ply[..ply.len() - 1].iter().rposition(|b| b.is_ascii_whitespace()).unwrap() + 1;
        if cut < last_token {
            truncations_rejected(&ply, SourceKind::PlyAscii, cut)?;
        }
        for (bytes, kind) in [(to_obj(&c).into_bytes(), SourceKind::Obj), (to_xyz_text(&c, 6).into_bytes(), SourceKind::XyzText)] {
            let cut = (cut_frac * bytes.len() as f64) as usize;
            let _ = parse_source(&bytes[..cut], kind);
        }
    }

    #[test]
    fn garbage_never_panics(bytes in proptest::collection::vec(any::<u8>(), 1..300), k in 0usize..6) {
        let _ = parse_source(&bytes, SourceKind::ALL[k]);
        let mut ply = b"ply\nformat binary_little_endian 1.0\nelement vertex 4\nproperty float x\nproperty float y\nproperty float z\nend_header\n".to_vec();
        ply.extend_from_slice(&bytes);
        let r = parse_source(&ply, SourceKind::PlyBinaryLe);
        prop_assert_eq!(r.is_ok(), bytes.len() >= 48);
    }
}

fn replace_bytes(hay: &[u8], from: &[u8], to: &[u8]) -> Vec<u8> {
    let at = hay.windows(from.len()).position(|w| w == from).unwrap();
    [&hay[..at], to, &hay[at + from.len()..]].concat()
}

#[test]
fn npy_rejections() {
    let c = shape_cloud(0, 0, 4);
    let good = to_npy(&c, false);
    let fortran = replace_bytes(&good, b"'fortran_order': False", b"'fortran_order': True ");
    assert!(matches!(
        parse_source(&fortran, SourceKind::Npy),
        Err(ParseError::UnsupportedProperty(_))
    ));
    let mut v2 = good.clone();
    v2[6] = 2;
    assert!(matches!(
        parse_source(&v2, SourceKind::Npy),
        Err(ParseError::UnsupportedProperty(_))
    ));
    let big = replace_bytes(&good, b"<f4", b">f4");
    assert!(matches!(
        parse_source(&big, SourceKind::Npy),
        Err(ParseError::UnsupportedProperty(_))
    ));
}
