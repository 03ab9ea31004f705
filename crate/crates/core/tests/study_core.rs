use std::fs;
use std::path::Path;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use tower::ServiceExt;

use vesselforge::octa::VARIANTS;
use vesselforge::raster::{write_dump, write_png, ByteImage, Image2D};
use vesselforge::study::{
    self, server, GradeRecord, GradeSubmission, Next, PositionGrades, StdKind, Study, ORDERINGS,
};
use vesselforge::Error;

fn write_cases(dir: &Path, n: usize) {
    for c in 0..n {
        let case = dir.join(format!("case_{c:02}"));
        fs::create_dir_all(&case).unwrap();
        for (k, v) in VARIANTS.iter().enumerate() {
            let data: Vec<f64> = (0..64).map(|i| (i * (k + 1) + c) as f64 / 100.0).collect();
            let img = Image2D::new(8, 8, data).unwrap();
            write_dump(&case.join(format!("{v}.vfr")), &img).unwrap();
            let bytes = (0..64).map(|i| (i * 4 + k) as u8).collect();
            write_png(&case.join(format!("{v}.png")), &ByteImage::gray(8, 8, bytes)).unwrap();
        }
    }
}

fn study_with(n: usize) -> (tempfile::TempDir, Study) {
    let dir = tempfile::tempdir().unwrap();
    write_cases(&dir.path().join("cases"), n);
    let s = Study::build(&dir.path().join("cases"), &dir.path().join("study"), 42).unwrap();
    (dir, s)
}

fn presentation(s: &Study, rater: &str) -> vesselforge::study::Presentation {
    match s.next_presentation(rater).unwrap() {
        Next::Presentation(p) => p,
        other => panic!("expected a presentation, got {other:?}"),
    }
}

fn submission(rater: &str, pres: &str, grades: [[f64; 3]; 3]) -> GradeSubmission {
    GradeSubmission {
        rater: rater.into(),
        presentation: pres.into(),
        grades: grades
            .iter()
            .enumerate()
            .map(|(p, g)| PositionGrades {
                position: p as f64,
                iq: g[0],
                vc: g[1],
                dq: g[2],
            })
            .collect(),
    }
}

fn record(rater: &str, case: usize, variant: &str, g: u8) -> GradeRecord {
    GradeRecord {
        case_id: format!("case_{case}"),
        rater_id: rater.into(),
        position: 0,
        variant: variant.into(),
        iq: g,
        vc: g,
        dq: g,
        timestamp: 0,
    }
}

/// Five integer grades in 1..=5 summing to `sum`.
fn grades_summing(sum: u8) -> [u8; 5] {
    let mut g = [sum / 5; 5];
    for slot in g.iter_mut().take((sum % 5) as usize) {
        *slot += 1;
    }
    g
}

/// Five raters x five cases whose per-rater averages reproduce the IQ row
/// 3.0±0.8 / 2.2±0.6 / 2.2±0.3.
fn table_fixture() -> Vec<GradeRecord> {
    let sums: [(&str, [u8; 5]); 3] = [
        ("raw", [9, 13, 15, 17, 21]),
        ("blend", [7, 9, 11, 13, 15]),
        ("output", [9, 10, 11, 12, 13]),
    ];
    let mut out = Vec::new();
    for (variant, per_rater) in sums {
        for (r, &s) in per_rater.iter().enumerate() {
            for (c, g) in grades_summing(s).into_iter().enumerate() {
                out.push(record(&format!("expert{r}"), c, variant, g));
            }
        }
    }
    out
}

#[test]
fn build_counts_cases_and_is_idempotent() {
    let (dir, s) = study_with(5);
    assert_eq!(s.case_count(), 5);
    let manifest = fs::read(dir.path().join("study/study.json")).unwrap();
    Study::build(&dir.path().join("cases"), &dir.path().join("study"), 42).unwrap();
    assert_eq!(fs::read(dir.path().join("study/study.json")).unwrap(), manifest);
    assert!(dir.path().join("study/cases/case_03/blend.png").is_file());
}

#[test]
fn missing_variant_names_case_and_key() {
    let dir = tempfile::tempdir().unwrap();
    write_cases(&dir.path().join("cases"), 2);
    fs::remove_file(dir.path().join("cases/case_01/blend.vfr")).unwrap();
    let err = Study::build(&dir.path().join("cases"), &dir.path().join("study"), 1).unwrap_err().to_string();
    assert!(err.contains("case_01") && err.contains("'blend'"), "{err}");
}

#[test]
fn rebuild_with_grades_refuses_new_case_list() {
    let (dir, mut s) = study_with(2);
    let p = presentation(&s, "ann");
    s.submit(&submission("ann", &p.id, [[1.0; 3]; 3])).unwrap();
    write_cases(&dir.path().join("cases"), 3);
    assert!(Study::build(&dir.path().join("cases"), &dir.path().join("study"), 42).is_err());
}

#[test]
fn presentation_deterministic_and_blinded() {
    let (_dir, s) = study_with(3);
    let a = presentation(&s, "rater-1");
    let b = presentation(&s, "rater-1");
    assert_eq!(a, b);
    assert_eq!(a.images.len(), 3);
    let json = serde_json::to_string(&s.next_presentation("rater-1").unwrap()).unwrap();
    for v in VARIANTS {
        assert!(!json.contains(v), "{json}");
    }
    for img in &a.images {
        assert!(img.handle.chars().all(|c| c.is_ascii_hexdigit()));
        assert!(s.image_path(&img.handle).is_some());
    }
    assert_eq!(study::ordering(42, "rater-1", 0), study::ordering(42, "rater-1", 0));
    assert!(s.next_presentation("bad rater!").is_err());
}

#[test]
fn orderings_are_uniform() {
    let mut counts = [0f64; 6];
    for r in 0..10_000 {
        let o = study::ordering(7, &format!("r{r}"), r % 5);
        counts[ORDERINGS.iter().position(|x| *x == o).unwrap()] += 1.0;
    }
    let expected = 10_000.0 / 6.0;
    let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new(5.0).unwrap().cdf(chi2);
    assert!(p > 0.01, "chi2 {chi2}, p {p}, counts {counts:?}");
}

#[test]
fn submission_validation() {
    let (dir, mut s) = study_with(2);
    let p = presentation(&s, "ann");
    let grades = dir.path().join("study/grades.jsonl");

    let mut bad = submission("ann", &p.id, [[2.0; 3]; 3]);
    bad.grades[1].vc = 0.0;
    let err = s.submit(&bad).unwrap_err();
    assert!(matches!(err, Error::Rejected(_)));
    assert!(err.to_string().contains("grades[1].vc"), "{err}");
    bad.grades[1].vc = 2.5;
    assert!(s.submit(&bad).unwrap_err().to_string().contains("grades[1].vc"));
    bad.grades[1].vc = 6.0;
    assert!(s.submit(&bad).is_err());
    let mut twice = submission("ann", &p.id, [[2.0; 3]; 3]);
    twice.grades[2].position = 0.0;
    assert!(s.submit(&twice).unwrap_err().to_string().contains("position"));
    assert!(s.submit(&submission("ann", "feedbeef", [[2.0; 3]; 3])).unwrap_err().to_string().contains("unknown presentation"));
    assert!(s.submit(&submission("bob", &p.id, [[2.0; 3]; 3])).is_err());
    assert!(!grades.exists());

    let stored = s.submit(&submission("ann", &p.id, [[1.0, 2.0, 3.0], [4.0, 5.0, 1.0], [2.0, 2.0, 2.0]])).unwrap();
    assert_eq!(stored.len(), 3);
    assert_eq!(fs::read_to_string(&grades).unwrap().lines().count(), 3);
    let order = study::ordering(42, "ann", 0);
    for r in &stored {
        assert_eq!(r.variant, VARIANTS[order[r.position as usize]]);
    }
    let dup = s.submit(&submission("ann", &p.id, [[1.0; 3]; 3])).unwrap_err().to_string();
    assert!(dup.contains("duplicate"), "{dup}");
    assert_eq!(fs::read_to_string(&grades).unwrap().lines().count(), 3);

    let p2 = presentation(&s, "ann");
    assert_eq!(p2.case_id, "case_01");
    s.submit(&submission("ann", &p2.id, [[3.0; 3]; 3])).unwrap();
    assert_eq!(s.next_presentation("ann").unwrap(), Next::Complete { graded: 2, total: 2 });

    let reopened = Study::open(&dir.path().join("study")).unwrap();
    assert_eq!(reopened.records(), s.records());
    assert_eq!(reopened.next_presentation("ann").unwrap(), Next::Complete { graded: 2, total: 2 });

    let csv = dir.path().join("grades.csv");
    assert_eq!(s.export_csv(&csv).unwrap(), 6);
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("case_id,rater_id,position,variant,iq,vc,dq,timestamp\n"));
    assert_eq!(text.lines().count(), 7);
}

#[test]
fn report_constant_raters() {
    let recs: Vec<_> = (0..5).map(|r| record(&format!("r{r}"), 0, "raw", 3)).collect();
    let rep = study::report(&recs, 1, StdKind::Population);
    let c = rep.cell("raw", "IQ").unwrap();
    assert_eq!((c.mean, c.std, c.raters), (3.0, 0.0, 5));
    assert_eq!(c.display(), "3.0±0.0");
    assert!(rep.cell("blend", "IQ").is_none());
}

#[test]
fn report_population_std() {
    let recs: Vec<_> = [1, 2, 3].iter().enumerate().map(|(r, &g)| record(&format!("r{r}"), 0, "output", g)).collect();
    let c = *study::report(&recs, 1, StdKind::Population).cell("output", "VC").unwrap();
    assert!((c.mean - 2.0).abs() < 1e-15);
    assert!((c.std - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
    assert_eq!(format!("{:.3}", c.std), "0.816");
    let s = *study::report(&recs, 1, StdKind::Sample).cell("output", "VC").unwrap();
    assert!((s.std - 1.0).abs() < 1e-15);
}

#[test]
fn report_averages_per_rater_first() {
    // rater a grades two cases (1 and 5), rater b one case (4): per-rater
    // averages 3 and 4, not the pooled mean 10/3
    let recs = vec![record("a", 0, "raw", 1), record("a", 1, "raw", 5), record("b", 0, "raw", 4)];
    let c = *study::report(&recs, 2, StdKind::Population).cell("raw", "DQ").unwrap();
    assert_eq!((c.mean, c.std), (3.5, 0.5));
}

#[test]
fn report_reproduces_table_layout() {
    let recs = table_fixture();
    let rep = study::report(&recs, 5, StdKind::Population);
    let iq = |v| rep.cell(v, "IQ").unwrap().display();
    assert_eq!((iq("raw"), iq("blend"), iq("output")), ("3.0±0.8".into(), "2.2±0.6".into(), "2.2±0.3".into()));
    let first = rep.latex_rows().lines().next().unwrap().to_string();
    assert_eq!(first, r"IQ & $3.0\pm0.8$ & $2.2\pm0.6$ & $2.2\pm0.3$ \\");
    let text = rep.render_text();
    assert!(text.contains("3.0±0.8") && text.contains("raw input"), "{text}");
    assert!(rep.raters.iter().all(|r| r.cases_graded == 5));
    for row in rep.cells.values() {
        for c in row.values() {
            assert!((1.0..=5.0).contains(&c.mean) && c.std >= 0.0);
        }
    }

    let mut shuffled = recs.clone();
    shuffled.reverse();
    shuffled.rotate_left(17);
    assert_eq!(study::report(&shuffled, 5, StdKind::Population), rep);
}

#[test]
fn empty_report_is_flagged() {
    let rep = study::report(&[], 3, StdKind::Population);
    assert!(rep.empty);
    assert!(rep.cells.is_empty());
    assert_eq!(rep.render_text(), "no grades recorded\n");
}

async fn call(app: &axum::Router, req: Request<Body>) -> (StatusCode, Vec<u8>, Option<String>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let ctype = resp.headers().get("content-type").map(|v| v.to_str().unwrap().to_string());
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, body, ctype)
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn post_json(uri: &str, body: String) -> Request<Body> {
    Request::post(uri).header("content-type", "application/json").body(Body::from(body)).unwrap()
}

#[tokio::test(flavor = "current_thread")]
async fn http_api_round_trip() {
    let (_dir, s) = study_with(2);
    let app = server::router(std::sync::Arc::new(std::sync::RwLock::new(s)));
    let blind = |body: &[u8]| {
        let t = String::from_utf8_lossy(body);
        assert!(VARIANTS.iter().all(|v| !t.contains(v)), "{t}");
    };

    let (st, body, _) = call(&app, get("/api/study")).await;
    assert_eq!(st, StatusCode::OK);
    blind(&body);
    assert_eq!(serde_json::from_slice::<serde_json::Value>(&body).unwrap()["cases"], 2);

    for case in 0..2 {
        let (st, body, _) = call(&app, get("/api/study/next?rater=eve")).await;
        assert_eq!(st, StatusCode::OK);
        blind(&body);
        let next: serde_json::Value = serde_json::from_slice(&body).unwrap();
        assert_eq!(next["status"], "presentation");
        assert_eq!(next["case_id"], format!("case_{case:02}"));
        for img in next["images"].as_array().unwrap() {
            let (st, png, ctype) = call(&app, get(img["url"].as_str().unwrap())).await;
            assert_eq!(st, StatusCode::OK);
            assert_eq!(ctype.as_deref(), Some("image/png"));
            assert_eq!(&png[1..4], b"PNG");
        }
        let pres = next["id"].as_str().unwrap();
        let zero = format!(
            r#"{{"rater":"eve","presentation":"{pres}","grades":[{{"position":0,"iq":0,"vc":1,"dq":1}},{{"position":1,"iq":1,"vc":1,"dq":1}},{{"position":2,"iq":1,"vc":1,"dq":1}}]}}"#
        );
        let (st, body, _) = call(&app, post_json("/api/study/grades", zero.clone())).await;
        assert_eq!(st, StatusCode::BAD_REQUEST);
        assert!(String::from_utf8_lossy(&body).contains("grades[0].iq"));
        let ok = zero.replace(r#""iq":0"#, r#""iq":2"#);
        let (st, body, _) = call(&app, post_json("/api/study/grades", ok.clone())).await;
        assert_eq!(st, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
        assert_eq!(serde_json::from_slice::<serde_json::Value>(&body).unwrap()["stored"], 3);
        let (st, body, _) = call(&app, post_json("/api/study/grades", ok)).await;
        assert_eq!(st, StatusCode::BAD_REQUEST);
        assert!(String::from_utf8_lossy(&body).contains("duplicate"));
    }

    let (_, body, _) = call(&app, get("/api/study/next?rater=eve")).await;
    let done: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!((done["status"].as_str(), done["graded"].as_u64()), (Some("complete"), Some(2)));

    let (st, body, _) = call(&app, get("/api/study/report")).await;
    assert_eq!(st, StatusCode::OK);
    let rep: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(rep["report"]["raters"][0]["cases_graded"], 2);
    let mut iq_sum = 0.0;
    for v in VARIANTS {
        iq_sum += rep["report"]["cells"][v]["IQ"]["mean"].as_f64().unwrap();
    }
    assert_eq!(iq_sum, 4.0);

    let (st, _, _) = call(&app, get("/img/0123")).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let (st, _, _) = call(&app, get("/api/study/next")).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    let (st, _, _) = call(&app, post_json("/api/study/grades", "{not json".into())).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
}
