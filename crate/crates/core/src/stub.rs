//! A local stand-in for a completions endpoint, for tests and offline runs.
//!
//! [`StubServer`] speaks just enough HTTP/1.1 for one request per
//! connection. [`fake_completion`] answers the two prompt families with
//! well-formed bracketed sentences built from the prompt's sample slot.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use crate::promptkit::{Template, SENTINEL};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StubReply {
    pub status: u16,
    pub body: String,
    pub retry_after: Option<u64>,
}

impl StubReply {
    pub fn ok(body: impl Into<String>) -> Self {
        StubReply {
            status: 200,
            body: body.into(),
            retry_after: None,
        }
    }

    /// A 200 reply in the completions schema carrying `text`.
    pub fn completion(text: &str) -> Self {
        StubReply::ok(serde_json::json!({ "choices": [{ "text": text, "index": 0 }] }).to_string())
    }
}

type Handler = dyn Fn(&str) -> StubReply + Send + Sync;

pub struct StubServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl StubServer {
    /// Binds to an ephemeral localhost port and serves until dropped.
    pub fn start<F>(handler: F) -> std::io::Result<Self>
    where
        F: Fn(&str) -> StubReply + Send + Sync + 'static,
    {
        StubServer::bind("127.0.0.1:0", handler)
    }

    pub fn bind<F>(addr: &str, handler: F) -> std::io::Result<Self>
    where
        F: Fn(&str) -> StubReply + Send + Sync + 'static,
    {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let handler: Arc<Handler> = Arc::new(handler);
        let flag = stop.clone();
        let accept = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let handler = handler.clone();
                std::thread::spawn(move || {
                    let _ = serve_one(stream, handler.as_ref());
                });
            }
        });
        Ok(StubServer {
            addr,
            stop,
            accept: Some(accept),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}/v1/completions", self.addr)
    }

    /// Blocks until the server is dropped from another thread or the
    /// process exits.
    pub fn join(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

fn serve_one(stream: TcpStream, handler: &Handler) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut content_length = 0usize;
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Ok(());
        }
        let l = line.trim_end();
        if l.is_empty() {
            break;
        }
        if let Some((name, value)) = l.split_once(':') {
            if name.eq_ignore_ascii_case("content-length") {
                content_length = value.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;
    let reply = handler(&String::from_utf8_lossy(&body));
    let mut out = stream;
    let mut head = format!(
        "HTTP/1.1 {} Stub\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n",
        reply.status,
        reply.body.len()
    );
    if let Some(s) = reply.retry_after {
        head.push_str(&format!("Retry-After: {s}\r\n"));
    }
    head.push_str("\r\n");
    out.write_all(head.as_bytes())?;
    out.write_all(reply.body.as_bytes())?;
    out.flush()
}

/// Prompt text from a completions request body.
pub fn request_prompt(body: &str) -> Option<String> {
    let v: serde_json::Value = serde_json::from_str(body).ok()?;
    v.get("prompt")?.as_str().map(String::from)
}

/// Deterministic completion for a paraphrase or generate prompt; `None` for
/// prompts of neither family.
pub fn fake_completion(prompt: &str) -> Option<String> {
    if let Some(sentence) = Template::paraphrase().extract(prompt) {
        return Some(format!("'In other words, {sentence}'"));
    }
    let input = Template::generate().extract(prompt)?;
    let value = PyValue::parse(input)?;
    let entities = value.get("entities")?.as_list()?;
    let surfaces: Vec<&str> = entities
        .iter()
        .filter_map(|e| e.as_list()?.first()?.as_str())
        .collect();
    if surfaces.is_empty() {
        return Some(SENTINEL.to_string());
    }
    let bracketed: Vec<String> = surfaces.iter().map(|s| format!("[{s}]")).collect();
    let text = match bracketed.as_slice() {
        [one] => format!("We present a study of {one}."),
        [first, rest @ ..] => format!("We show how {first} relates to {}.", rest.join(" and ")),
        [] => unreachable!(),
    };
    Some(format!("'{text}'"))
}

/// Handler serving [`fake_completion`] answers.
pub fn fake_llm_handler(body: &str) -> StubReply {
    match request_prompt(body).as_deref().and_then(fake_completion) {
        Some(text) => StubReply::completion(&text),
        None => StubReply {
            status: 400,
            body: r#"{"error":"unrecognised prompt"}"#.into(),
            retry_after: None,
        },
    }
}

/// The subset of Python literals used in generate prompt inputs.
#[derive(Debug, Clone, PartialEq)]
enum PyValue {
    Str(String),
    List(Vec<PyValue>),
    Dict(Vec<(String, PyValue)>),
}

impl PyValue {
    fn parse(s: &str) -> Option<PyValue> {
        let chars: Vec<char> = s.chars().collect();
        let mut pos = 0;
        let v = parse_value(&chars, &mut pos)?;
        skip_ws(&chars, &mut pos);
        (pos == chars.len()).then_some(v)
    }

    fn get(&self, key: &str) -> Option<&PyValue> {
        match self {
            PyValue::Dict(items) => items.iter().find(|(k, _)| k == key).map(|(_, v)| v),
            _ => None,
        }
    }

    fn as_list(&self) -> Option<&[PyValue]> {
        match self {
            PyValue::List(v) => Some(v),
            _ => None,
        }
    }

    fn as_str(&self) -> Option<&str> {
        match self {
            PyValue::Str(s) => Some(s),
            _ => None,
        }
    }
}

fn skip_ws(c: &[char], pos: &mut usize) {
    while *pos < c.len() && c[*pos].is_whitespace() {
        *pos += 1;
    }
}

fn parse_value(c: &[char], pos: &mut usize) -> Option<PyValue> {
    skip_ws(c, pos);
    match *c.get(*pos)? {
        q @ ('\'' | '"') => {
            *pos += 1;
            let mut s = String::new();
            loop {
                let ch = *c.get(*pos)?;
                *pos += 1;
                match ch {
                    '\\' => {
                        let esc = *c.get(*pos)?;
                        *pos += 1;
                        s.push(if esc == 'n' { '\n' } else { esc });
                    }
                    ch if ch == q => break,
                    ch => s.push(ch),
                }
            }
            Some(PyValue::Str(s))
        }
        '[' => {
            *pos += 1;
            let mut items = Vec::new();
            loop {
                skip_ws(c, pos);
                if *c.get(*pos)? == ']' {
                    *pos += 1;
                    break;
                }
                items.push(parse_value(c, pos)?);
                skip_ws(c, pos);
                match *c.get(*pos)? {
                    ',' => *pos += 1,
                    ']' => {}
                    _ => return None,
                }
            }
            Some(PyValue::List(items))
        }
        '{' => {
            *pos += 1;
            let mut items = Vec::new();
            loop {
                skip_ws(c, pos);
                if *c.get(*pos)? == '}' {
                    *pos += 1;
                    break;
                }
                let PyValue::Str(key) = parse_value(c, pos)? else {
                    return None;
                };
                skip_ws(c, pos);
                if *c.get(*pos)? != ':' {
                    return None;
                }
                *pos += 1;
                items.push((key, parse_value(c, pos)?));
                skip_ws(c, pos);
                match *c.get(*pos)? {
                    ',' => *pos += 1,
                    '}' => {}
                    _ => return None,
                }
            }
            Some(PyValue::Dict(items))
        }
        _ => None,
    }
}
