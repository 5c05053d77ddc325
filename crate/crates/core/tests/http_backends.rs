use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use image::{Rgb, RgbImage};
use serde_json::{json, Value};

use negmine_core::backends::http::{HttpAugmenter, HttpClient, HttpInpainter, HttpMatcher, HttpSegmenter, HttpTagger};
use negmine_core::backends::{
    AugmenterBackend, BackendError, InpainterBackend, MatcherBackend, SegmenterBackend, TaggerBackend,
};
use negmine_core::config::BackendConfig;
use negmine_core::mask::{self, Bitmap, SegmentMask};
use negmine_core::model::ObjectTag;
use negmine_core::raster;

type Handler = dyn Fn(usize, &str, &Value) -> (u16, Value) + Send + Sync;

/// One-thread HTTP/1.1 server answering each request through `handler`,
/// given the zero-based request count, path and JSON body.
struct MockServer {
    url: String,
    hits: Arc<AtomicUsize>,
}

fn serve(handler: Box<Handler>) -> MockServer {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            if reader.read_line(&mut request_line).is_err() {
                continue;
            }
            let path = request_line.split_whitespace().nth(1).unwrap_or("/").to_string();
            let mut length = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                if let Some((name, value)) = line.split_once(':') {
                    if name.eq_ignore_ascii_case("content-length") {
                        length = value.trim().parse().unwrap();
                    }
                }
            }
            let mut body = vec![0; length];
            reader.read_exact(&mut body).unwrap();
            let body: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
            let n = counter.fetch_add(1, Ordering::SeqCst);
            let (status, reply) = handler(n, &path, &body);
            let text = reply.to_string();
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{text}",
                text.len()
            );
        }
    });
    MockServer { url, hits }
}

fn config(retries: u32) -> BackendConfig {
    BackendConfig {
        retries,
        backoff_ms: 1,
        timeout_secs: 5,
        ..BackendConfig::default()
    }
}

fn client(url: &str, retries: u32) -> HttpClient {
    HttpClient::new(url, &config(retries)).unwrap().with_cache_dir(None)
}

fn png_b64(img: &RgbImage) -> String {
    B64.encode(raster::encode_png(img).unwrap())
}

fn decode_image(v: &Value) -> RgbImage {
    raster::decode_png(&B64.decode(v.as_str().unwrap()).unwrap()).unwrap()
}

#[test]
fn tagger_round_trip_dedups_tags() {
    let server = serve(Box::new(|_, _, body| {
        let img = decode_image(&body["image_png_base64"]);
        assert_eq!(img.dimensions(), (4, 3));
        (200, json!({"tags": ["dog", "Dog", "grass"], "caption": "a dog on grass"}))
    }));
    let tagger = HttpTagger::new(client(&server.url, 0));
    let t = tagger.tag(&RgbImage::new(4, 3)).unwrap();
    let labels: Vec<_> = t.tags.iter().map(|t| t.label.as_str()).collect();
    assert_eq!(labels, ["dog", "grass"]);
    assert_eq!(t.caption, "a dog on grass");
}

#[test]
fn transient_failure_is_retried() {
    let server = serve(Box::new(|n, _, body| {
        if n == 0 {
            (503, json!({"error": "warming up"}))
        } else {
            (200, json!({"text": format!("echo {}", body["prompt"].as_str().unwrap())}))
        }
    }));
    let aug = HttpAugmenter::new(client(&server.url, 2), 64, 1);
    assert_eq!(aug.complete("hello").unwrap(), "echo hello");
    assert_eq!(server.hits.load(Ordering::SeqCst), 2);
}

#[test]
fn exhausted_retries_report_attempts() {
    let server = serve(Box::new(|_, _, _| (500, json!({}))));
    let aug = HttpAugmenter::new(client(&server.url, 1), 64, 1);
    match aug.complete("hello") {
        Err(BackendError::Http { message, .. }) => assert!(message.contains("after 2 attempts"), "{message}"),
        other => panic!("expected http error, got {other:?}"),
    }
    assert_eq!(server.hits.load(Ordering::SeqCst), 2);
}

#[test]
fn matcher_routes_and_payloads() {
    let server = serve(Box::new(|_, path, body| match path {
        "/itm" => (200, json!({"score": if body["text"] == "a red square" { 1.5 } else { -0.5 }})),
        "/embed_text" => (200, json!({"embedding": [1.0, 0.0]})),
        "/embed_image" => (200, json!({"embedding": [0.0, 2.0]})),
        _ => (404, json!({})),
    }));
    let m = HttpMatcher::new(client(&server.url, 0));
    let img = RgbImage::from_pixel(2, 2, Rgb([255, 0, 0]));
    assert_eq!(m.itm_score(&img, "a red square").unwrap(), 1.5);
    assert_eq!(m.itm_score(&img, "a blue circle").unwrap(), -0.5);
    assert_eq!(m.embed_text("x").unwrap().0, vec![1.0, 0.0]);
    assert_eq!(m.embed_image(&img).unwrap().0, vec![0.0, 2.0]);
}

#[test]
fn segmenter_and_inpainter_check_dimensions() {
    let good_mask = Bitmap::from_fn(4, 4, |x, _| x < 2);
    let mask_b64 = B64.encode(mask::encode_png(&good_mask).unwrap());
    let server = serve(Box::new(move |_, _, body| {
        if body.get("tag").is_some() {
            (200, json!({"mask_png_base64": mask_b64}))
        } else {
            (200, json!({"image_png_base64": png_b64(&RgbImage::new(3, 3))}))
        }
    }));
    let img = RgbImage::new(4, 4);
    let seg = HttpSegmenter::new(client(&server.url, 0));
    let m = seg.segment("i", &img, &ObjectTag::detected("dog")).unwrap();
    assert_eq!(m.bitmap, good_mask);
    let inp = HttpInpainter::new(client(&server.url, 0));
    let err = inp.inpaint(&img, &SegmentMask::new("i", ObjectTag::detected("dog"), good_mask), "a cat", 3);
    assert!(matches!(err, Err(BackendError::Dimensions { .. })), "{err:?}");
}

#[test]
fn repeated_requests_hit_the_cache() {
    let cache = tempfile::tempdir().unwrap();
    let server = serve(Box::new(|_, _, _| (200, json!({"text": "cached answer"}))));
    let make = |url: &str| {
        HttpAugmenter::new(
            HttpClient::new(url, &config(0)).unwrap().with_cache_dir(Some(cache.path().to_path_buf())),
            64,
            1,
        )
    };
    assert_eq!(make(&server.url).complete("q").unwrap(), "cached answer");
    assert_eq!(make(&server.url).complete("q").unwrap(), "cached answer");
    assert_eq!(server.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn rejects_non_http_urls() {
    assert!(HttpClient::new("ftp://example", &config(0)).is_err());
}
