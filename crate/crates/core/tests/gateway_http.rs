use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use matkg_core::gateway::{
    ChatBackend, ChatMessage, ChatRequest, GatewayError, HttpBackend, ProviderConfig, Sleeper, UreqTransport,
};

#[derive(Default)]
struct Recorded(Mutex<Vec<Duration>>);

impl Sleeper for Recorded {
    fn sleep(&self, delay: Duration) {
        self.0.lock().unwrap().push(delay);
    }
}

struct Seen {
    authorization: Option<String>,
    body: String,
}

fn read_request(stream: &mut TcpStream) -> Seen {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut length = 0;
    let mut authorization = None;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            match k.to_ascii_lowercase().as_str() {
                "content-length" => length = v.trim().parse().unwrap(),
                "authorization" => authorization = Some(v.trim().to_string()),
                _ => {}
            }
        }
    }
    let mut body = vec![0; length];
    reader.read_exact(&mut body).unwrap();
    Seen { authorization, body: String::from_utf8(body).unwrap() }
}

fn respond(stream: &mut TcpStream, status: &str, body: &str) {
    let head = format!(
        "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        body.len()
    );
    stream.write_all(head.as_bytes()).unwrap();
    stream.write_all(body.as_bytes()).unwrap();
}

fn backend(sleeper: Arc<Recorded>) -> HttpBackend {
    HttpBackend::new(Arc::new(UreqTransport), sleeper)
        .with_key_lookup(|var| (var == "MATKG_LOCAL_KEY").then(|| "sk-local-test".to_string()))
}

fn config(addr: std::net::SocketAddr) -> ProviderConfig {
    ProviderConfig {
        endpoint_url: format!("http://{addr}/v1/chat/completions"),
        api_key_env: "MATKG_LOCAL_KEY".into(),
        timeout_seconds: 5,
        ..ProviderConfig::openai("gpt-3.5-turbo-1106")
    }
}

#[test]
fn rate_limit_then_success_over_real_sockets() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server = thread::spawn(move || {
        let mut seen = Vec::new();
        for (i, stream) in listener.incoming().take(2).enumerate() {
            let mut stream = stream.unwrap();
            seen.push(read_request(&mut stream));
            if i == 0 {
                respond(&mut stream, "429 Too Many Requests", r#"{"error": {"message": "slow down"}}"#);
            } else {
                respond(
                    &mut stream,
                    "200 OK",
                    r#"{"choices": [{"message": {"role": "assistant", "content": "| A | B |"}}],
                        "usage": {"prompt_tokens": 7, "completion_tokens": 3}}"#,
                );
            }
        }
        seen
    });

    let sleeper = Arc::new(Recorded::default());
    let request = ChatRequest::new(config(addr), vec![ChatMessage::user("tabulate this")]).unwrap();
    let reply = backend(sleeper.clone()).send(&request).unwrap();
    assert_eq!(reply.response.content, "| A | B |");
    assert_eq!((reply.response.prompt_tokens, reply.response.completion_tokens), (7, 3));
    assert_eq!(*sleeper.0.lock().unwrap(), [Duration::from_secs(1)]);

    let seen = server.join().unwrap();
    assert_eq!(seen.len(), 2);
    for s in &seen {
        assert_eq!(s.authorization.as_deref(), Some("Bearer sk-local-test"));
        let body: serde_json::Value = serde_json::from_str(&s.body).unwrap();
        assert_eq!(body["model"], "gpt-3.5-turbo-1106");
        assert_eq!(body["messages"][0]["content"], "tabulate this");
        assert!(!s.body.contains("sk-local-test"));
    }
}

#[test]
fn client_errors_are_not_retried() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server = thread::spawn(move || {
        let mut stream = listener.incoming().next().unwrap().unwrap();
        read_request(&mut stream);
        respond(&mut stream, "401 Unauthorized", r#"{"error": "bad key"}"#);
    });
    let sleeper = Arc::new(Recorded::default());
    let request = ChatRequest::new(config(addr), vec![ChatMessage::user("x")]).unwrap();
    let err = backend(sleeper.clone()).send(&request).unwrap_err();
    server.join().unwrap();
    assert!(matches!(err, GatewayError::ProviderError { status: 401, .. }), "{err:?}");
    assert!(sleeper.0.lock().unwrap().is_empty());
    assert!(!format!("{err} {err:?}").contains("sk-local-test"));
}

#[test]
fn silent_server_times_out() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server = thread::spawn(move || {
        let mut stream = listener.incoming().next().unwrap().unwrap();
        read_request(&mut stream);
        thread::sleep(Duration::from_millis(2500));
    });
    let mut provider = config(addr);
    provider.timeout_seconds = 1;
    provider.max_retries = 0;
    let request = ChatRequest::new(provider, vec![ChatMessage::user("x")]).unwrap();
    let err = backend(Arc::new(Recorded::default())).send(&request).unwrap_err();
    assert!(matches!(err, GatewayError::Timeout { attempts: 1 }), "{err:?}");
    server.join().unwrap();
}
