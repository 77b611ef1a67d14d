mod common;

use std::fs;

use common::{cars_fixture, write_image};
use glamor::dataset::{export_cars196, fingerprint, ingest_directory, DatasetSource, Layout, PreparedDataset};
use glamor_core::datamodel::{generate_synthetic, Split};

#[test]
fn cars196_fixture_ingests_with_contiguous_ids() {
    let dir = tempfile::tempdir().unwrap();
    let root = cars_fixture(dir.path(), &["Acura RL 2012", "Audi A4 2010"], &["BMW X5 2011"], 2, 20, false);
    let view = ingest_directory(&root, Layout::Cars196, 16).unwrap();
    assert_eq!(view.len(), 6);
    assert_eq!(view.num_identities(), 3);
    assert_eq!(view.num_train_identities(), 2);
    assert_eq!(view.count(Split::Gallery), 2);
    assert_eq!(view.image_size(), (16, 16));
    assert_eq!(view.identity_labels(), ["Acura RL 2012", "Audi A4 2010", "BMW X5 2011"]);
    let brands: Vec<u32> = view.samples().iter().map(|s| s.brand_id.unwrap()).collect();
    assert_eq!(brands, [0, 0, 1, 1, 2, 2]);
    for s in view.samples() {
        assert!(s.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn veri776_names_give_identities_and_cameras() {
    let dir = tempfile::tempdir().unwrap();
    let r = dir.path();
    for (split, name) in [
        ("image_train", "0001_c001_00010.jpg"),
        ("image_train", "0001_c002_00011.jpg"),
        ("image_train", "0003_c001_00012.jpg"),
        ("image_query", "0005_c003_00001.jpg"),
        ("image_test", "0005_c004_00002.jpg"),
        ("image_test", "0005_c003_00003.jpg"),
    ] {
        write_image(&r.join(split).join(name), 24, [90, 120, 30], name.len() as u32);
    }
    let view = ingest_directory(r, Layout::Veri776, 16).unwrap();
    assert_eq!(view.len(), 6);
    assert_eq!(view.num_train_identities(), 2);
    assert_eq!(view.count(Split::Query), 1);
    let q = &view.samples()[view.indices(Split::Query)[0]];
    assert_eq!(q.camera_id, Some(3));
    assert_eq!(view.identity_labels()[q.identity_id as usize], "0005");
    assert!(view.samples().iter().all(|s| s.brand_id.is_none()));
}

#[test]
fn ingestion_errors_are_specific() {
    let dir = tempfile::tempdir().unwrap();
    let r = dir.path();
    let e = ingest_directory(&r.join("absent"), Layout::Cars196, 16).unwrap_err().to_string();
    assert!(e.contains("does not exist"), "{e}");

    fs::create_dir_all(r.join("train")).unwrap();
    let e = ingest_directory(r, Layout::Cars196, 16).unwrap_err().to_string();
    assert!(e.contains("`test`"), "{e}");

    fs::create_dir_all(r.join("test")).unwrap();
    let e = ingest_directory(r, Layout::Cars196, 16).unwrap_err().to_string();
    assert!(e.contains("no samples found"), "{e}");

    write_image(&r.join("train/a/x.png"), 8, [1, 2, 3], 0);
    write_image(&r.join("test/b/x.png"), 8, [1, 2, 3], 1);
    let e = ingest_directory(r, Layout::Cars196, 16).unwrap_err().to_string();
    assert!(
        e.contains("duplicate image name `x.png`") && e.contains("train/a/x.png") && e.contains("test/b/x.png"),
        "{e}"
    );

    fs::write(r.join("test/b/x.png"), b"not an image").unwrap();
    fs::rename(r.join("test/b/x.png"), r.join("test/b/y.png")).unwrap();
    let e = ingest_directory(r, Layout::Cars196, 16).unwrap_err().to_string();
    assert!(e.contains("y.png"), "{e}");
}

#[test]
fn exported_synthetic_data_reingests() {
    let view = generate_synthetic(2, 3, 3, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(export_cars196(&view, dir.path()).unwrap(), view.len());
    let back = ingest_directory(dir.path(), Layout::Cars196, view.image_size().0).unwrap();
    assert_eq!(back.len(), view.len());
    assert_eq!(back.num_identities(), view.num_identities());
    assert_eq!(back.count(Split::Train), view.count(Split::Train));
    // The same identity keeps the same images up to 8-bit rounding.
    let label = &view.identity_labels()[0];
    let id = back.identity_labels().iter().position(|l| l == label).unwrap() as u32;
    let a = &view.samples()[view.identity_indices(0)[0]].image.data;
    let b = &back.samples()[back.identity_indices(id)[0]].image.data;
    assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 0.5 / 255.0 + 1e-6));
}

#[test]
fn prepared_dataset_detects_changed_files() {
    let dir = tempfile::tempdir().unwrap();
    let root = cars_fixture(&dir.path().join("data"), &["a", "b"], &["c"], 2, 16, false);
    let source = DatasetSource::Directory { layout: Layout::Cars196, root: root.clone(), resolution: 16 };
    let view = source.load().unwrap();
    let prepared = PreparedDataset { fingerprint: fingerprint(&view), source };
    let out = dir.path().join("prepared");
    fs::create_dir_all(&out).unwrap();
    prepared.write(&out).unwrap();
    let (again, reloaded) = PreparedDataset::load(&out).unwrap();
    assert_eq!(again, prepared);
    assert_eq!(fingerprint(&reloaded), prepared.fingerprint);

    let victim = fs::read_dir(root.join("train/a")).unwrap().next().unwrap().unwrap().path();
    write_image(&victim, 16, [255, 0, 0], 7);
    let e = PreparedDataset::load(&out).unwrap_err().to_string();
    assert!(e.contains("changed since it was prepared"), "{e}");
}
