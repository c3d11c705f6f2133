use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use mer_mce::cause::{
    generate_all, GenerationError, GenerationRequest, GenerativeClient, HttpClient, Prompt,
};
use mer_mce::corpus::UtteranceKey;

/// Reads one HTTP request and returns its path and body.
fn read_request(stream: &mut TcpStream) -> (String, String) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut request_line = String::new();
    reader.read_line(&mut request_line).unwrap();
    let path = request_line
        .split_whitespace()
        .nth(1)
        .unwrap_or("")
        .to_string();
    let mut length = 0;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        if line == "\r\n" || line.is_empty() {
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
    (path, String::from_utf8(body).unwrap())
}

fn respond(stream: &mut TcpStream, status: &str, body: &str) {
    let _ = write!(
        stream,
        "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
}

/// Serves requests with `handler` until the client side is dropped. Returns
/// the base URL and a channel of `(path, body)` for every request seen.
fn serve<F>(handler: F) -> (String, mpsc::Receiver<(String, String)>)
where
    F: Fn(&str) -> Option<(String, String)> + Send + 'static,
{
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { break };
            let (path, body) = read_request(&mut stream);
            let reply = handler(&body);
            if tx.send((path, body)).is_err() {
                break;
            }
            if let Some((status, body)) = reply {
                respond(&mut stream, &status, &body);
            } else {
                // Hold the connection open past the client's timeout.
                thread::sleep(Duration::from_millis(800));
            }
        }
    });
    (url, rx)
}

fn request<'a>(
    key: &'a UtteranceKey,
    prompt: &'a str,
    image_ref: Option<&'a str>,
) -> GenerationRequest<'a> {
    GenerationRequest {
        target: key,
        prompt,
        image_ref,
    }
}

#[test]
fn posts_prompt_and_reads_text() {
    let (url, seen) = serve(|_| {
        Some((
            "200 OK".into(),
            r#"{"text": "Yes! You are so smart!"}"#.into(),
        ))
    });
    let client = HttpClient::new(&format!("{url}/"), Duration::from_secs(5));
    let key = UtteranceKey::new("c1", 6);
    let text = client
        .complete(&request(&key, "the prompt", Some("frame.jpg")))
        .unwrap();
    assert_eq!(text, "Yes! You are so smart!");

    let (path, body) = seen.recv().unwrap();
    assert_eq!(path, "/generate");
    let body: serde_json::Value = serde_json::from_str(&body).unwrap();
    assert_eq!(
        body,
        serde_json::json!({"prompt": "the prompt", "image_ref": "frame.jpg"})
    );
}

#[test]
fn omits_absent_image_ref() {
    let (url, seen) = serve(|_| Some(("200 OK".into(), r#"{"text": "none"}"#.into())));
    let client = HttpClient::new(&url, Duration::from_secs(5));
    let key = UtteranceKey::new("c1", 2);
    assert_eq!(client.complete(&request(&key, "p", None)).unwrap(), "none");
    let (_, body) = seen.recv().unwrap();
    assert_eq!(
        serde_json::from_str::<serde_json::Value>(&body).unwrap(),
        serde_json::json!({"prompt": "p"})
    );
}

#[test]
fn malformed_reply_and_error_status_are_reported() {
    let (url, _seen) = serve(|body| {
        if body.contains("bad-json") {
            Some(("200 OK".into(), r#"{"reply": 1}"#.into()))
        } else {
            Some(("500 Internal Server Error".into(), "{}".into()))
        }
    });
    let client = HttpClient::new(&url, Duration::from_secs(5));
    let key = UtteranceKey::new("c1", 1);
    assert!(matches!(
        client.complete(&request(&key, "bad-json", None)),
        Err(GenerationError::Malformed(_))
    ));
    assert!(matches!(
        client.complete(&request(&key, "other", None)),
        Err(GenerationError::Transport(_))
    ));
}

#[test]
fn slow_server_times_out() {
    let (url, _seen) = serve(|_| None);
    let client = HttpClient::new(&url, Duration::from_millis(200));
    let key = UtteranceKey::new("c1", 1);
    assert!(matches!(
        client.complete(&request(&key, "p", None)),
        Err(GenerationError::Timeout)
    ));
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let client = HttpClient::new(&format!("http://127.0.0.1:{port}"), Duration::from_secs(2));
    let key = UtteranceKey::new("c1", 1);
    assert!(matches!(
        client.complete(&request(&key, "p", None)),
        Err(GenerationError::Transport(_))
    ));
}

#[test]
fn concurrent_generation_keeps_prompt_order() {
    let (url, _seen) = serve(|body| {
        let v: serde_json::Value = serde_json::from_str(body).unwrap();
        let prompt = v["prompt"].as_str().unwrap().to_string();
        Some((
            "200 OK".into(),
            serde_json::json!({ "text": format!("echo {prompt}") }).to_string(),
        ))
    });
    let client = HttpClient::new(&url, Duration::from_secs(5));
    let prompts: Vec<Prompt> = (1..=12)
        .map(|i| Prompt {
            text: format!("p{i}"),
            image_ref: None,
            target: UtteranceKey::new("c", i),
            candidates: vec![i],
        })
        .collect();
    let out = generate_all(&client, &prompts, 4);
    let texts: Vec<String> = out.into_iter().map(|r| r.unwrap().text).collect();
    let expected: Vec<String> = (1..=12).map(|i| format!("echo p{i}")).collect();
    assert_eq!(texts, expected);
}
