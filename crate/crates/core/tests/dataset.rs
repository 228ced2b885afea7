use std::path::{Path, PathBuf};

use graphlift::synth::{generate_dataset, load_dataset, parse_dataset, project, save_dataset, GraspSpec};
use graphlift::{Error, ErrorKind};

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/one_record.jsonl")
}

#[test]
fn fixture_parses_to_known_values() {
    let records = load_dataset(&fixture()).unwrap();
    assert_eq!(records.len(), 1);
    let r = &records[0];
    assert_eq!(r.id, 42);
    assert_eq!(r.meta.object, "box");
    for i in 0..29 {
        let f = i as f64;
        assert_eq!(r.gt3d[i], [f, -f, 600.0]);
        assert_eq!(r.gt2d[i], [320.0 + f, 320.0 - f]);
    }
    // The stored 2D points are the projection of the stored 3D points.
    assert_eq!(project(&r.gt3d, &r.camera).unwrap(), r.gt2d);
}

#[test]
fn generated_dataset_round_trips_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let data = generate_dataset(25, 3, &GraspSpec::default()).unwrap();
    save_dataset(&path, &data).unwrap();
    assert_eq!(load_dataset(&path).unwrap(), data);
}

#[test]
fn malformed_lines_report_their_position() {
    let good = std::fs::read_to_string(fixture()).unwrap();
    let text = format!("{good}{{\"schema_version\": 1, \"id\": 1}}\n");
    match parse_dataset(&text, Path::new("mem")) {
        Err(e @ Error::Parse { line: 2, .. }) => assert_eq!(e.kind(), ErrorKind::Data),
        other => panic!("unexpected {other:?}"),
    }

    let future = good.replace("\"schema_version\":1", "\"schema_version\":2");
    assert!(matches!(parse_dataset(&future, Path::new("mem")), Err(Error::Schema { found: 2, .. })));

    let extra = good.replace("\"id\":42", "\"id\":42,\"weight\":1");
    assert!(matches!(parse_dataset(&extra, Path::new("mem")), Err(Error::Parse { .. })));

    let behind = good.replace("600.0]", "-600.0]");
    assert!(matches!(parse_dataset(&behind, Path::new("mem")), Err(Error::Parse { .. })));

    assert!(matches!(parse_dataset("\n\n", Path::new("mem")), Err(Error::Data(_))));
}
