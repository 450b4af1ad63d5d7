use std::collections::BTreeSet;
use std::sync::OnceLock;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use labelgs_core::io::bundle::encode_rgb_png;
use labelgs_core::io::synth::{make_synthetic_scene, SynthSpec, SyntheticScene};
use labelgs_core::lifting::extract;
use labelgs_core::render::render;
use labelgs_server::{router, serve, AppState, ExtractResponse, Health, PickResponse, PickedLabel};
use serde_json::{json, Value};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tower::ServiceExt;

fn synth() -> &'static SyntheticScene {
    static S: OnceLock<SyntheticScene> = OnceLock::new();
    S.get_or_init(|| {
        make_synthetic_scene(&SynthSpec {
            objects: 2,
            train_views: 3,
            test_views: 1,
            width: 48,
            height: 40,
            focal: 60.0,
            gaussians_per_object: 40,
            ..SynthSpec::default()
        })
        .unwrap()
    })
}

fn state() -> AppState {
    let s = synth();
    AppState::new(s.scene.clone(), &s.bundle)
}

struct Reply {
    status: StatusCode,
    content_type: Option<String>,
    body: Vec<u8>,
}

impl Reply {
    fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap()
    }

    fn error_code(&self) -> String {
        self.json()["error"]["code"].as_str().unwrap().to_string()
    }
}

async fn call(app: &axum::Router, req: Request<Body>) -> Reply {
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let content_type = res.headers().get("content-type").map(|v| v.to_str().unwrap().to_string());
    let body = res.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply { status, content_type, body }
}

async fn get(app: &axum::Router, uri: &str) -> Reply {
    call(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn post(app: &axum::Router, uri: &str, body: &str) -> Reply {
    let req = Request::post(uri).header("content-type", "application/json").body(Body::from(body.to_string())).unwrap();
    call(app, req).await
}

fn first_view() -> &'static labelgs_core::ViewRecord {
    &synth().bundle.views[0].view
}

#[tokio::test]
async fn views_lists_cameras() {
    let app = router(state());
    let r = get(&app, "/views").await;
    assert_eq!(r.status, StatusCode::OK);
    let v = r.json();
    let list = v["views"].as_array().unwrap();
    assert_eq!(list.len(), 4);
    let cam = &first_view().camera;
    assert_eq!(list[0]["id"], first_view().id.as_str());
    assert_eq!(list[0]["width"], 48);
    assert_eq!(list[0]["fx"].as_f64().unwrap(), cam.fx);
    assert_eq!(list[0]["rotation"].as_array().unwrap().len(), 9);
    let test: Vec<&Value> = list.iter().filter(|v| v["split"] == "test").collect();
    assert_eq!(test.len(), 1);
}

#[tokio::test]
async fn render_returns_the_offline_png() {
    let app = router(state());
    let v = first_view();
    let r = get(&app, &format!("/render?view={}", v.id)).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.content_type.as_deref(), Some("image/png"));
    let expected = encode_rgb_png(&render(&synth().scene, &v.camera, None).image).unwrap();
    assert_eq!(r.body, expected);
    let decoded = image::load_from_memory(&r.body).unwrap();
    assert_eq!((decoded.width(), decoded.height()), (48, 40));
}

#[tokio::test]
async fn render_with_every_label_equals_full_render() {
    let app = router(state());
    let v = first_view();
    let full = get(&app, &format!("/render?view={}", v.id)).await;
    let all = get(&app, &format!("/render?view={}&labels=1,2", v.id)).await;
    assert_eq!(all.status, StatusCode::OK);
    assert_eq!(full.body, all.body);
    let one = get(&app, &format!("/render?view={}&labels=1", v.id)).await;
    let sub = BTreeSet::from([1]);
    assert_eq!(one.body, encode_rgb_png(&render(&synth().scene, &v.camera, Some(&sub)).image).unwrap());
    assert_ne!(one.body, full.body);
}

#[tokio::test]
async fn render_errors() {
    let app = router(state());
    let r = get(&app, "/render?view=nope").await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    assert_eq!(r.error_code(), "unknown_view");
    let r = get(&app, &format!("/render?view={}&labels=9", first_view().id)).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    assert_eq!(r.error_code(), "unknown_label");
    let r = get(&app, &format!("/render?view={}&labels=one", first_view().id)).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert_eq!(r.error_code(), "bad_request");
    let r = get(&app, "/render").await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn labelmap_is_sixteen_bit_render() {
    let app = router(state());
    let v = first_view();
    let r = get(&app, &format!("/labelmap?view={}", v.id)).await;
    assert_eq!(r.status, StatusCode::OK);
    let img = image::load_from_memory(&r.body).unwrap();
    let luma = match img {
        image::DynamicImage::ImageLuma16(b) => b,
        other => panic!("expected 16-bit gray, got {:?}", other.color()),
    };
    let expected = render(&synth().scene, &v.camera, None).labels;
    let got: Vec<u32> = luma.into_raw().into_iter().map(u32::from).collect();
    assert_eq!(got, expected.ids);
    assert_eq!(get(&app, "/labelmap?view=x").await.status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn pick_by_pixels_and_polygon() {
    let app = router(state());
    let v = first_view();
    let labels = render(&synth().scene, &v.camera, None).labels;
    let (w, h) = labels.dims();
    let ones: Vec<[usize; 2]> = (0..w * h).filter(|&p| labels.ids[p] == 1).map(|p| [p % w, p / w]).collect();
    assert!(!ones.is_empty());
    let r = post(&app, "/pick", &json!({ "view": v.id, "pixels": ones }).to_string()).await;
    assert_eq!(r.status, StatusCode::OK);
    let picked: PickResponse = serde_json::from_slice(&r.body).unwrap();
    assert_eq!(picked.labels, vec![PickedLabel { id: 1, pixel_count: ones.len() }]);

    // whole-image polygon: every visible label, largest first
    let poly = json!([[0.0, 0.0], [w as f64, 0.0], [w as f64, h as f64], [0.0, h as f64]]);
    let r = post(&app, "/pick", &json!({ "view": v.id, "polygon": poly }).to_string()).await;
    let picked: PickResponse = serde_json::from_slice(&r.body).unwrap();
    let mut expected: Vec<PickedLabel> = [1u32, 2]
        .iter()
        .map(|&k| PickedLabel { id: k, pixel_count: labels.ids.iter().filter(|&&l| l == k).count() })
        .filter(|p| p.pixel_count > 0)
        .collect();
    expected.sort_by_key(|p| std::cmp::Reverse(p.pixel_count));
    assert_eq!(picked.labels, expected);

    // background click picks nothing
    let bg = (0..w * h).find(|&p| labels.ids[p] == 0).unwrap();
    let r = post(&app, "/pick", &json!({ "view": v.id, "pixels": [[bg % w, bg / w]] }).to_string()).await;
    let picked: PickResponse = serde_json::from_slice(&r.body).unwrap();
    assert!(picked.labels.is_empty());
}

#[tokio::test]
async fn pick_errors() {
    let app = router(state());
    let id = &first_view().id;
    for body in [
        "{not json".to_string(),
        json!({ "view": id }).to_string(),
        json!({ "view": id, "pixels": [[0, 0]], "polygon": [[0, 0], [1, 0], [0, 1]] }).to_string(),
        json!({ "view": id, "polygon": [[0, 0], [1, 1]] }).to_string(),
        json!({ "view": id, "pixels": [[0, -1]] }).to_string(),
        json!({ "view": id, "pixels": [], "extra": 1 }).to_string(),
    ] {
        let r = post(&app, "/pick", &body).await;
        assert_eq!(r.status, StatusCode::BAD_REQUEST, "{body}");
        assert_eq!(r.error_code(), "bad_request");
    }
    let r = post(&app, "/pick", &json!({ "view": "missing", "pixels": [] }).to_string()).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    assert_eq!(r.error_code(), "unknown_view");
}

#[tokio::test]
async fn extract_then_render_from_view_and_pose() {
    let app = router(state());
    let v = first_view();
    let r = post(&app, "/extract", r#"{"labels":[2]}"#).await;
    assert_eq!(r.status, StatusCode::OK);
    let ex: ExtractResponse = serde_json::from_slice(&r.body).unwrap();
    let sub = extract(&synth().scene, &BTreeSet::from([2]));
    assert_eq!(ex, ExtractResponse { object_id: 0, labels: vec![2], gaussians: sub.len() });
    let expected = encode_rgb_png(&render(&sub, &v.camera, None).image).unwrap();
    let r = get(&app, &format!("/render_extracted?object_id=0&view={}", v.id)).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.body, expected);

    // the same pose spelled out explicitly
    let c = &v.camera;
    let rot: Vec<String> = (0..9).map(|i| format!("{:?}", c.rotation[(i / 3, i % 3)])).collect();
    let tr: Vec<String> = c.translation.iter().map(|x| format!("{x:?}")).collect();
    let uri = format!("/render_extracted?object_id=0&rotation={}&translation={}", rot.join(","), tr.join(","));
    let r = get(&app, &uri).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.body, expected);

    // a second extraction gets the next id
    let r = post(&app, "/extract", r#"{"labels":[1,2]}"#).await;
    assert_eq!(serde_json::from_slice::<ExtractResponse>(&r.body).unwrap().object_id, 1);
}

#[tokio::test]
async fn extraction_errors() {
    let app = router(state());
    let r = post(&app, "/extract", r#"{"labels":[7]}"#).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    assert_eq!(r.error_code(), "unknown_label");
    for body in [r#"{"labels":[]}"#, r#"{"labels":"1"}"#, "[]"] {
        assert_eq!(post(&app, "/extract", body).await.status, StatusCode::BAD_REQUEST, "{body}");
    }
    let r = get(&app, "/render_extracted?object_id=3&view=view_000").await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    assert_eq!(r.error_code(), "unknown_object");
    post(&app, "/extract", r#"{"labels":[1]}"#).await;
    for uri in [
        "/render_extracted?object_id=0",
        "/render_extracted?object_id=0&rotation=1,0,0,0,1,0,0,0,1",
        "/render_extracted?object_id=0&rotation=1,0,0&translation=0,0,0",
        "/render_extracted?object_id=0&rotation=2,0,0,0,1,0,0,0,1&translation=0,0,0",
        "/render_extracted?object_id=zero&view=view_000",
    ] {
        let r = get(&app, uri).await;
        assert_eq!(r.status, StatusCode::BAD_REQUEST, "{uri}");
    }
    let r = get(&app, "/render_extracted?object_id=0&view=nope").await;
    assert_eq!(r.error_code(), "unknown_view");
}

#[tokio::test]
async fn health_and_unknown_routes() {
    let app = router(state());
    let r = get(&app, "/health").await;
    assert_eq!(r.status, StatusCode::OK);
    let h: Health = serde_json::from_slice(&r.body).unwrap();
    assert_eq!(h.status, "ok");
    assert_eq!(h.gaussians, synth().scene.len());
    assert_eq!(h.labels, vec![1, 2]);
    assert_eq!(h.views, 4);
    assert_eq!(h.extractions, 0);
    let r = get(&app, "/nothing").await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    assert_eq!(r.error_code(), "not_found");
}

#[tokio::test]
async fn replay_against_fresh_state_is_identical() {
    async fn session() -> Vec<Vec<u8>> {
        let app = router(state());
        let id = &first_view().id;
        vec![
            post(&app, "/extract", r#"{"labels":[1]}"#).await.body,
            post(&app, "/extract", r#"{"labels":[2]}"#).await.body,
            get(&app, &format!("/render_extracted?object_id=1&view={id}")).await.body,
            get(&app, &format!("/render?view={id}&labels=2")).await.body,
        ]
    }
    assert_eq!(session().await, session().await);
}

#[tokio::test]
async fn serves_over_tcp() {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(serve(state(), listener));
    let mut stream = tokio::net::TcpStream::connect(addr).await.unwrap();
    stream.write_all(b"GET /health HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").await.unwrap();
    let mut reply = String::new();
    stream.read_to_string(&mut reply).await.unwrap();
    assert!(reply.starts_with("HTTP/1.1 200"), "{reply}");
    assert!(reply.contains("\"status\":\"ok\""));
}
