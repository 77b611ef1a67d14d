mod common;

use std::fs;
use std::path::Path;

use common::{cars_fixture, glamor, ok, p, stderr};
use glamor::checkpoint::{read_gate, store_model, write_gate, write_model};
use glamor::dataset::PreparedDataset;
use glamor_core::datamodel::{Attribute, Sample, Split};
use glamor_core::math::squared_distance;
use glamor_core::metrics::{
    evaluate_reid, evaluate_zsl, map_cmc_from_distances, Protocol, RetrievalMeta, ZSL_RECALL_KS,
};
use glamor_core::model::EmbeddingModel;
use glamor_core::teaming::{AttributePredictor, ProxyGate};
use glamor_core::training::Recipe;
use serde_json::Value;

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn keys(v: &Value) -> Vec<String> {
    v.as_object().unwrap().keys().cloned().collect()
}

fn prepare_synthetic(out: &Path, spec: &str) {
    ok(&["prepare", "--synthetic", spec, "--out", p(out)]);
}

fn desk_model(seed: u64) -> EmbeddingModel {
    EmbeddingModel::new(Recipe::ReidTriplet.desk_descriptor(), seed).unwrap()
}

#[test]
fn prepare_synthetic_writes_stats_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let o = ok(&["prepare", "--synthetic", "brands=4 ids=5 views=8 seed=7", "--out", p(&out)]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("manifest.json"));
    let stats = json(&out.join("stats.json"));
    assert_eq!(stats["samples"], 160);
    assert_eq!(stats["identities"], 20);
    let manifest = json(&out.join("manifest.json"));
    assert_eq!(manifest["command"], "prepare");
    assert_eq!(manifest["artifact_paths"].as_array().unwrap().len(), 3);
    let (prepared, view) = PreparedDataset::load(&out).unwrap();
    assert_eq!(manifest["dataset_fingerprint"], prepared.fingerprint.as_str());
    assert_eq!(view.len(), 160);
}

#[test]
fn prepare_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = glamor(&["prepare", "--layout", "cars196", "--root", p(&dir.path().join("nowhere")), "--out", p(&out)]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("does not exist"), "{}", stderr(&o));
    assert!(!out.join("manifest.json").exists());

    let o = glamor(&["prepare", "--layout", "market", "--root", p(dir.path()), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown layout"));

    let o = glamor(&["prepare", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));

    let o = glamor(&["--ci", "prepare", "--synthetic", "brands=2 ids=3 views=2", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--seed"));
    ok(&["--ci", "--seed", "4", "prepare", "--synthetic", "brands=2 ids=3 views=2", "--out", p(&out)]);
}

#[test]
fn train_smoke_is_reproducible_and_respects_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    prepare_synthetic(&data, "brands=4 ids=5 views=8 seed=7");
    let config = dir.path().join("train.cfg");
    fs::write(&config, "# short run\ntotal_epochs = 9\nwarmup_epochs = 1\nsteps_per_epoch = 2\n").unwrap();
    let run = |out: &Path| {
        ok(&[
            "--ci",
            "--seed",
            "3",
            "train",
            "--data",
            p(&data),
            "--out",
            p(out),
            "--config",
            p(&config),
            "--epochs",
            "3",
        ]);
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run(&a);
    run(&b);

    let manifest = json(&a.join("manifest.json"));
    let artifacts: Vec<&str> =
        manifest["artifact_paths"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert!(artifacts.iter().filter(|x| x.ends_with(".ckpt") && x.contains("checkpoints")).count() >= 1);
    assert!(artifacts.iter().all(|x| Path::new(x).exists()));
    assert!(a.join("gate.ckpt").exists());
    assert_eq!(read_gate(&a.join("gate.ckpt")).unwrap().labels, vec![0, 1, 2, 3]);

    let resolved = fs::read_to_string(a.join("config.resolved")).unwrap();
    assert!(resolved.contains("total_epochs = 3\n"), "{resolved}");
    assert!(resolved.contains("warmup_epochs = 1\n"));
    assert!(resolved.contains("seed = 3\n"));

    let loss_a = fs::read(a.join("loss.csv")).unwrap();
    assert_eq!(loss_a, fs::read(b.join("loss.csv")).unwrap());
    assert_eq!(String::from_utf8(loss_a).unwrap().lines().count(), 1 + 3 * 2);
    assert_eq!(manifest["config_hash"], json(&b.join("manifest.json"))["config_hash"]);
}

#[test]
fn train_reports_config_and_preflight_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    prepare_synthetic(&data, "brands=2 ids=3 views=2 seed=1");
    let config = dir.path().join("bad.cfg");
    fs::write(&config, "base_lr = fast\ncolour = red\nwarmup_epochs = 40\n").unwrap();
    let out = dir.path().join("out");
    let o = glamor(&["--seed", "1", "train", "--data", p(&data), "--out", p(&out), "--config", p(&config)]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("base_lr") && err.contains("colour: unknown key") && err.contains("warmup_epochs"), "{err}");
    assert!(!out.join("manifest.json").exists());

    let root = cars_fixture(&dir.path().join("cars"), &["Solo car"], &["Other car"], 3, 64, false);
    let one = dir.path().join("one");
    ok(&["prepare", "--layout", "cars196", "--root", p(&root), "--out", p(&one)]);
    let o = glamor(&["--seed", "1", "train", "--data", p(&one), "--out", p(&out), "--recipe", "reid_triplet"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("needs at least 2 distinct `identity` classes"), "{}", stderr(&o));
}

#[test]
fn eval_on_duplicates_retrieves_them() {
    let dir = tempfile::tempdir().unwrap();
    let root = cars_fixture(&dir.path().join("cars"), &["A one", "B two", "C three"], &["D four"], 2, 48, true);
    let data = dir.path().join("data");
    ok(&["prepare", "--layout", "cars196", "--root", p(&root), "--out", p(&data), "--resolution", "64"]);
    let ckpt = dir.path().join("m.ckpt");
    write_model(&desk_model(5), &ckpt).unwrap();
    let out = dir.path().join("eval");
    ok(&[
        "--seed",
        "2",
        "eval",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&data),
        "--out",
        p(&out),
        "--split",
        "train",
        "--rankings",
        "--plots",
    ]);
    let report = json(&out.join("report.json"));
    assert_eq!(keys(&report), ["nmi", "protocol", "recall_at.1", "recall_at.2", "recall_at.4", "recall_at.8"]);
    assert_eq!(report["recall_at.1"], 1.0);
    let rankings = fs::read_to_string(out.join("rankings.csv")).unwrap();
    assert!(rankings.starts_with("query_id,rank,gallery_id,distance,relevant\n"));
    assert!(rankings.lines().skip(1).filter(|l| l.split(',').nth(1) == Some("1")).all(|l| l.ends_with(",true")));
    assert!(out.join("metrics.svg").exists());

    let o = glamor(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&out), "--protocol", "veri776"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("does not match"), "{}", stderr(&o));
    assert!(!out.join("manifest.json").exists());
}

fn samples(view: &glamor_core::datamodel::DatasetView, split: Split) -> Vec<Sample> {
    view.samples().iter().filter(|s| s.split == split).cloned().collect()
}

fn meta(s: &[Sample]) -> Vec<RetrievalMeta> {
    s.iter().map(|x| RetrievalMeta { identity: x.identity_id, camera: x.camera_id }).collect()
}

#[test]
fn eval_matches_library_calls() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    prepare_synthetic(&data, "brands=3 ids=4 views=4 seed=9");
    let (_, view) = PreparedDataset::load(&data).unwrap();
    let model = desk_model(8);
    let ckpt = dir.path().join("m.ckpt");
    write_model(&model, &ckpt).unwrap();

    let zsl = dir.path().join("zsl");
    ok(&["--seed", "6", "eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&zsl)]);
    let report = json(&zsl.join("report.json"));
    let test: Vec<Sample> = view.samples().iter().filter(|s| s.split != Split::Train).cloned().collect();
    let emb: Vec<Vec<f64>> = model.embed(&test, true).unwrap().iter().map(|e| e.to_f64()).collect();
    let labels: Vec<u32> = test.iter().map(|s| s.identity_id).collect();
    let lib = evaluate_zsl(&emb, &labels, &ZSL_RECALL_KS, 6).unwrap();
    assert_eq!(report["nmi"].as_f64(), lib.nmi);
    for k in ZSL_RECALL_KS {
        assert_eq!(report[format!("recall_at.{k}")].as_f64(), Some(lib.recall_at[&k]));
    }

    let reid = dir.path().join("reid");
    ok(&[
        "--seed",
        "6",
        "eval",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&data),
        "--out",
        p(&reid),
        "--protocol",
        "veri776",
        "--plots",
    ]);
    let report = json(&reid.join("report.json"));
    assert_eq!(keys(&report), ["cmc.1", "cmc.5", "map", "protocol", "queries_without_relevant"]);
    let (q, g) = (samples(&view, Split::Query), samples(&view, Split::Gallery));
    let e = |s: &[Sample]| -> Vec<Vec<f64>> { model.embed(s, true).unwrap().iter().map(|e| e.to_f64()).collect() };
    let (lib, _) = evaluate_reid(&e(&q), &e(&g), &meta(&q), &meta(&g), Protocol::Veri776).unwrap();
    assert_eq!(report["map"].as_f64(), lib.map);
    assert_eq!(report["cmc.1"].as_f64(), Some(lib.cmc[0]));
    assert_eq!(report["cmc.5"].as_f64(), Some(lib.cmc[4]));
    assert!(reid.join("cmc.svg").exists());

    let summary = dir.path().join("summary");
    ok(&["report", "--run", p(&zsl), "--run", p(&reid), "--out", p(&summary)]);
    let csv = fs::read_to_string(summary.join("summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().next().unwrap().contains("recall_at.1"));
    assert!(summary.join("nmi.svg").exists());
}

#[test]
fn single_universal_expert_takes_every_input() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    prepare_synthetic(&data, "brands=2 ids=3 views=3 seed=2");
    let ckpt = dir.path().join("solo.ckpt");
    write_model(&desk_model(1), &ckpt).unwrap();
    let team = dir.path().join("team");
    ok(&["team", "assemble", "--out", p(&team), "--expert", &format!("solo:any:{}", p(&ckpt))]);
    let routes = dir.path().join("routes");
    ok(&["team", "route", "--team", p(&team), "--data", p(&data), "--out", p(&routes), "--split", "all"]);
    let text = fs::read_to_string(routes.join("routes.tsv")).unwrap();
    let lines: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(lines.len(), 18);
    for l in lines {
        let f: Vec<&str> = l.split('\t').collect();
        assert_eq!((f[2], f[3], f[4]), ("solo", "solo=1", "true"), "{l}");
    }

    let o = glamor(&["team", "add-expert", "--team", p(&team), "--expert", &format!("again:any:{}", p(&ckpt))]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("again") && err.contains("solo") && err.contains("overlaps"), "{err}");
    let o = glamor(&["team", "add-expert", "--team", p(&team), "--expert", &format!("b0:brand=0:{}", p(&ckpt))]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("needs a brand gate"), "{}", stderr(&o));
    assert!(
        fs::read_to_string(team.join("team.manifest")).unwrap().lines().filter(|l| !l.starts_with(['#', '@'])).count()
            == 1
    );
}

#[test]
fn identify_equals_manual_route_embed_rank() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    prepare_synthetic(&data, "brands=4 ids=5 views=4 seed=7");
    let (_, view) = PreparedDataset::load(&data).unwrap();
    let store = dir.path().join("models");
    let gate = ProxyGate::from_prototypes(desk_model(1), &view, Attribute::Brand, 50.0).unwrap();
    let gate_path = dir.path().join("gate.ckpt");
    write_gate(&gate, &gate_path).unwrap();
    let mut args = vec!["team".to_string(), "assemble".into(), "--out".into(), p(&dir.path().join("team")).into()];
    args.extend(["--gate".into(), p(&gate_path).into()]);
    let mut experts = Vec::new();
    for (id, pred, seed) in [
        ("default", "any", 100),
        ("b0", "brand=0", 10),
        ("b1", "brand=1", 11),
        ("b2", "brand=2", 12),
        ("b3", "brand=3", 13),
    ] {
        let model = desk_model(seed);
        let (_, path) = store_model(&model, &store).unwrap();
        args.extend(["--expert".into(), format!("{id}:{pred}:{}", p(&path))]);
        experts.push((id, pred, model));
    }
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    let out = dir.path().join("identify");
    let team = dir.path().join("team");
    ok(&["team", "identify", "--team", p(&team), "--data", p(&data), "--out", p(&out), "--rankings"]);

    // Manual chain: gate prediction, the matching expert, restricted distances.
    let (q, g) = (samples(&view, Split::Query), samples(&view, Split::Gallery));
    let route =
        |s: &[Sample]| -> Vec<usize> { gate.predict(s).unwrap().iter().map(|pr| 1 + pr.label as usize).collect() };
    let embed = |s: &[Sample], r: &[usize]| -> Vec<Vec<f64>> {
        s.iter().zip(r).map(|(x, &e)| experts[e].2.embed(std::slice::from_ref(x), true).unwrap()[0].to_f64()).collect()
    };
    let (qr, gr) = (route(&q), route(&g));
    let (qe, ge) = (embed(&q, &qr), embed(&g, &gr));
    let dist: Vec<Vec<f64>> = qe
        .iter()
        .zip(&qr)
        .map(|(a, ra)| {
            ge.iter().zip(&gr).map(|(b, rb)| if ra == rb { squared_distance(a, b) } else { f64::INFINITY }).collect()
        })
        .collect();
    let manual = map_cmc_from_distances(&dist, &meta(&q), &meta(&g), Protocol::Cars196Zsl).unwrap();

    let text = fs::read_to_string(out.join("queries.tsv")).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), q.len());
    for ((row, r), &e) in rows.iter().zip(&manual.rankings).zip(&qr) {
        assert_eq!(row[1], experts[e].0);
        assert_eq!(row[2], r.first_hit().map_or("-".into(), |h| (h + 1).to_string()));
        let ap: Option<f64> = row[3].parse().ok();
        assert_eq!(ap, r.average_precision());
    }
    let report = json(&out.join("report.json"));
    assert_eq!(report["map"].as_f64(), Some(manual.map));
    assert_eq!(report["cmc.1"].as_f64(), Some(manual.cmc_at(1)));
}
