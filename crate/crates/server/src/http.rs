use std::io::{self, Read};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use log::warn;
use modelserve_core::executor;

use crate::service::Service;

const MAX_BODY_BYTES: u64 = 64 << 20;
const POLL: Duration = Duration::from_millis(50);

/// A fixed pool of inference-tagged threads pulling requests off one
/// listening socket.
pub struct HttpFrontend {
    addr: SocketAddr,
    stopping: Arc<AtomicBool>,
    workers: Vec<JoinHandle<()>>,
}

impl HttpFrontend {
    pub fn bind(port: u16, threads: usize, service: Arc<Service>) -> io::Result<Self> {
        let server = tiny_http::Server::http(("0.0.0.0", port))
            .map_err(|e| io::Error::new(io::ErrorKind::AddrInUse, e.to_string()))?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| io::Error::new(io::ErrorKind::Other, "not an IP listener"))?;
        let server = Arc::new(server);
        let stopping = Arc::new(AtomicBool::new(false));
        let workers = (0..threads)
            .map(|i| {
                let server = Arc::clone(&server);
                let service = Arc::clone(&service);
                let stopping = Arc::clone(&stopping);
                thread::Builder::new()
                    .name(format!("http-{i}"))
                    .spawn(move || {
                        executor::set_current_tag(executor::INFERENCE);
                        while !stopping.load(Ordering::Acquire) {
                            match server.recv_timeout(POLL) {
                                Ok(Some(rq)) => serve(&service, rq),
                                Ok(None) => {}
                                Err(e) => warn!("http accept: {e}"),
                            }
                        }
                    })
            })
            .collect::<io::Result<Vec<_>>>()?;
        Ok(Self {
            addr,
            stopping,
            workers,
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting and waits for in-progress requests to finish.
    pub fn stop(&mut self) {
        self.stopping.store(true, Ordering::Release);
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for HttpFrontend {
    fn drop(&mut self) {
        self.stop();
    }
}

fn serve(service: &Service, mut rq: tiny_http::Request) {
    let mut body = Vec::new();
    let response = match rq.as_reader().take(MAX_BODY_BYTES + 1).read_to_end(&mut body) {
        Ok(n) if n as u64 > MAX_BODY_BYTES => crate::service::Response {
            status: 413,
            content_type: "application/json",
            body: r#"{"error":"request body too large","code":"InvalidArgument"}"#.into(),
        },
        Ok(_) => service.handle(rq.method().as_str(), rq.url(), &body),
        Err(e) => crate::service::Response {
            status: 400,
            content_type: "application/json",
            body: serde_json::json!({"error": format!("reading body: {e}"), "code": "InvalidArgument"})
                .to_string(),
        },
    };
    let header = tiny_http::Header::from_bytes(&b"Content-Type"[..], response.content_type.as_bytes())
        .expect("static header");
    let reply = tiny_http::Response::from_string(response.body)
        .with_status_code(response.status)
        .with_header(header);
    if let Err(e) = rq.respond(reply) {
        log::debug!("writing response: {e}");
    }
}
