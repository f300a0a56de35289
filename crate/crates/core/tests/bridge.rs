use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use pairwise_cl::data::bridge::{attach_view, parse_feature_csv, table_to_mvf, validate_export, EGEMAPS_DIM};
use pairwise_cl::data::mvf::{decode, encode};
use pairwise_cl::data::{
    load_manifest, mvf_read, mvf_write, write_manifest, Dataset, Manifest, Normalization, UtteranceRecord, ViewDecl,
};
use pairwise_cl::{Error, Tensor};

fn skeleton(ids: &[&str]) -> Manifest {
    Manifest {
        views: vec![],
        labels: vec!["neutral".into(), "angry".into()],
        records: ids
            .iter()
            .enumerate()
            .map(|(i, id)| UtteranceRecord {
                id: id.to_string(),
                session: 1 + i as u32 % 2,
                speaker: format!("spk{}", i % 2),
                label: Some(if i % 2 == 0 { "neutral" } else { "angry" }.into()),
                view_paths: BTreeMap::from([("wav".to_string(), PathBuf::from(format!("wav/{id}.wav")))]),
            })
            .collect(),
        root: PathBuf::new(),
    }
}

fn functionals_csv(ids: &[&str]) -> String {
    let mut s = String::from("name;frameTime");
    for c in 0..EGEMAPS_DIM {
        s.push_str(&format!(";F{c}_sma3"));
    }
    s.push('\n');
    for (r, id) in ids.iter().enumerate() {
        s.push_str(&format!("'{id}';0.000000"));
        for c in 0..EGEMAPS_DIM {
            s.push_str(&format!(";{:e}", (r * 100 + c) as f32 * 0.125 - 3.0));
        }
        s.push('\n');
    }
    s
}

#[test]
fn functionals_csv_to_loaded_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let ids = ["Ses01F_a01", "Ses01F_a02", "Ses02M_b01", "Ses02M_b02"];
    let table = parse_feature_csv(&functionals_csv(&ids), Some(EGEMAPS_DIM)).unwrap();
    assert_eq!(table.width(), EGEMAPS_DIM);
    assert_eq!(table.columns[0], "F0_sma3");

    let files = table_to_mvf(&table, &dir.path().join("egemaps")).unwrap();
    let mut m = skeleton(&ids);
    m.root = dir.path().to_path_buf();
    attach_view(
        &mut m,
        ViewDecl {
            name: "egemaps".into(),
            dims: vec![EGEMAPS_DIM],
        },
        &files,
    )
    .unwrap();
    assert_eq!(
        m.records[0].view_paths["egemaps"],
        PathBuf::from("egemaps/Ses01F_a01.mvf")
    );

    let path = dir.path().join("manifest.txt");
    write_manifest(&path, &m).unwrap();
    let back = load_manifest(&path).unwrap();
    assert_eq!(back.records, m.records);
    assert!(validate_export(&back).is_ok());
    assert_eq!(validate_export(&back).summary(), "OK, 4 utterances, 1 views");

    let ds = Dataset::load(back, &["egemaps".into()], Normalization::None).unwrap();
    assert_eq!(ds.views[0].data.shape(), [4, EGEMAPS_DIM]);
    for (r, id) in ids.iter().enumerate() {
        let row = &ds.views[0].data.data()[r * EGEMAPS_DIM..(r + 1) * EGEMAPS_DIM];
        assert_eq!(row, table.get(id).unwrap());
    }
}

#[test]
fn attach_view_requires_every_record() {
    let ids = ["a", "b", "c"];
    let table = parse_feature_csv(&functionals_csv(&ids[..2]), Some(EGEMAPS_DIM)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = table_to_mvf(&table, dir.path()).unwrap();
    let mut m = skeleton(&ids);
    let err = attach_view(
        &mut m,
        ViewDecl {
            name: "egemaps".into(),
            dims: vec![EGEMAPS_DIM],
        },
        &files,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Schema(_)));
    assert!(err.to_string().contains('c'));
}

#[test]
fn validate_export_collects_every_problem() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = skeleton(&["a", "b", "c"]);
    m.root = dir.path().to_path_buf();
    m.views.push(ViewDecl {
        name: "v".into(),
        dims: vec![4],
    });
    for r in &mut m.records {
        r.view_paths.insert("v".into(), PathBuf::from(format!("{}.mvf", r.id)));
    }
    mvf_write(&dir.path().join("a.mvf"), &Tensor::new(vec![4], vec![1.0; 4]).unwrap()).unwrap();
    mvf_write(&dir.path().join("b.mvf"), &Tensor::new(vec![5], vec![1.0; 5]).unwrap()).unwrap();
    let report = validate_export(&m);
    assert!(!report.is_ok());
    assert_eq!(report.problems.len(), 2, "{:?}", report.problems);
    assert!(report.problems[0].contains("b.mvf") && report.problems[0].contains("[5]"));
    assert!(report.problems[1].contains("c.mvf"));
}

#[test]
fn mvf_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let t = Tensor::new(vec![13, 5, 7], (0..455).map(|i| (i as f32).sin() * 1e3).collect()).unwrap();
    let path = dir.path().join("x.mvf");
    mvf_write(&path, &t).unwrap();
    let back = mvf_read(&path).unwrap();
    assert_eq!(back.shape(), t.shape());
    assert_eq!(back.data(), t.data());

    let bytes = encode(&t);
    for cut in [0, 3, 11, 20, bytes.len() - 1] {
        assert!(
            matches!(decode(&bytes[..cut]), Err(Error::Format { .. })),
            "cut at {cut}"
        );
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(decode(&extra).is_err());
    let mut bad = bytes;
    bad[4] = 9;
    assert!(decode(&bad).is_err());

    fs::write(&path, b"not a tensor").unwrap();
    let err = mvf_read(&path).unwrap_err();
    assert!(err.to_string().contains("x.mvf"));
    assert!(mvf_write(&path, &Tensor::new(vec![1], vec![f32::NAN]).unwrap()).is_err());
}
