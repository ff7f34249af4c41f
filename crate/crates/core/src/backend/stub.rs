//! Minimal HTTP/1.1 server speaking the streaming protocol, for tests.
//!
//! It wraps any [`Backend`] and can inject faults: dropped connections,
//! malformed event lines, 5xx responses and cap overruns.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use super::http::{WireEvent, WireRequest};
use super::{Backend, ContinuationRequest, SamplingParams};

/// Faults applied by the stub. Counted faults affect the first N requests.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StubFaults {
    /// Close the connection after this many token lines, without a stop line.
    pub drop_after_tokens: Option<usize>,
    /// How many requests the drop applies to.
    pub drop_requests: usize,
    /// Answer this many requests with HTTP 503 before serving.
    pub unavailable_requests: usize,
    /// Ask the wrapped backend for `max_tokens + extra_tokens` and stream them all.
    pub extra_tokens: usize,
    /// Emit a non-JSON line after the first token.
    pub malformed_line: bool,
}

pub struct StubServer {
    addr: SocketAddr,
    requests: Arc<AtomicUsize>,
    shutdown: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl StubServer {
    pub fn spawn<B: Backend + 'static>(backend: B, faults: StubFaults) -> io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let requests = Arc::new(AtomicUsize::new(0));
        let shutdown = Arc::new(AtomicBool::new(false));
        let backend = Arc::new(backend);
        let faults = Arc::new(faults);

        let handle = {
            let requests = Arc::clone(&requests);
            let shutdown = Arc::clone(&shutdown);
            std::thread::spawn(move || {
                for stream in listener.incoming() {
                    if shutdown.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    let n = requests.fetch_add(1, Ordering::SeqCst);
                    let backend = Arc::clone(&backend);
                    let faults = Arc::clone(&faults);
                    std::thread::spawn(move || {
                        let _ = serve(stream, backend.as_ref(), &faults, n);
                    });
                }
            })
        };

        Ok(StubServer {
            addr,
            requests,
            shutdown,
            handle: Some(handle),
        })
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Connections accepted so far.
    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn read_request(reader: &mut BufReader<&TcpStream>) -> io::Result<Vec<u8>> {
    let mut content_length = None;
    let mut chunked = false;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "headers"));
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((name, value)) = line.split_once(':') {
            let name = name.trim().to_ascii_lowercase();
            let value = value.trim();
            if name == "content-length" {
                content_length = value.parse::<usize>().ok();
            } else if name == "transfer-encoding" && value.eq_ignore_ascii_case("chunked") {
                chunked = true;
            }
        }
    }
    let mut body = Vec::new();
    if chunked {
        loop {
            let mut size = String::new();
            reader.read_line(&mut size)?;
            let size = usize::from_str_radix(size.trim(), 16)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
            let mut chunk = vec![0; size + 2];
            reader.read_exact(&mut chunk)?;
            if size == 0 {
                break;
            }
            body.extend_from_slice(&chunk[..size]);
        }
    } else if let Some(len) = content_length {
        body.resize(len, 0);
        reader.read_exact(&mut body)?;
    }
    Ok(body)
}

fn serve(stream: TcpStream, backend: &dyn Backend, faults: &StubFaults, n: usize) -> io::Result<()> {
    let mut reader = BufReader::new(&stream);
    let body = read_request(&mut reader)?;
    let mut out = &stream;

    if n < faults.unavailable_requests {
        out.write_all(b"HTTP/1.1 503 Service Unavailable\r\nContent-Length: 0\r\nConnection: close\r\n\r\n")?;
        return Ok(());
    }
    let wire: WireRequest = match serde_json::from_slice(&body) {
        Ok(w) => w,
        Err(e) => {
            let msg = e.to_string();
            write!(
                out,
                "HTTP/1.1 400 Bad Request\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{msg}",
                msg.len()
            )?;
            return Ok(());
        }
    };

    let request = ContinuationRequest {
        context: wire.context,
        max_tokens: wire.max_tokens + faults.extra_tokens,
        stop_markers: wire.stop,
        sampling: SamplingParams {
            temperature: wire.temperature,
            top_p: wire.top_p,
            seed: wire.seed,
        },
    };
    let response = backend.continue_from(&request);

    out.write_all(b"HTTP/1.1 200 OK\r\nContent-Type: application/x-ndjson\r\nConnection: close\r\n\r\n")?;
    let drop_at = faults.drop_after_tokens.filter(|_| n < faults.drop_requests);
    for (i, tok) in response.tokens.iter().enumerate() {
        if drop_at == Some(i) {
            out.flush()?;
            return stream.shutdown(std::net::Shutdown::Both);
        }
        let line = serde_json::to_string(&WireEvent::Token {
            token: tok.text().to_string(),
        })?;
        writeln!(out, "{line}")?;
        if faults.malformed_line && i == 0 {
            writeln!(out, "{{not json")?;
        }
        out.flush()?;
    }
    if drop_at.is_some_and(|d| d >= response.tokens.len()) {
        out.flush()?;
        return stream.shutdown(std::net::Shutdown::Both);
    }
    let stop = serde_json::to_string(&WireEvent::Stop {
        stop: response.stop_reason,
        message: response.diagnostic,
    })?;
    writeln!(out, "{stop}")?;
    out.flush()?;
    stream.shutdown(std::net::Shutdown::Write)
}
