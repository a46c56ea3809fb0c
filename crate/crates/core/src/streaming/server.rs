use std::collections::HashMap;
use std::fs::File;
use std::io::Read;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use tiny_http::{Header, Method, Request, Response, Server, StatusCode};

use super::store::{crc32_of, LocalDirStore, ObjectStore, CRC32_HEADER};
use super::StreamError;

#[derive(Debug, Default)]
struct Faults {
    /// Object name -> number of GETs still to corrupt.
    corrupt: HashMap<String, usize>,
    offline: bool,
}

/// Mock object-store server over a local directory.
pub struct StoreServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    faults: Arc<Mutex<Faults>>,
    gets: Arc<AtomicU64>,
    thread: Option<JoinHandle<()>>,
}

impl StoreServer {
    /// Serves `root` on `addr` (use port 0 for an ephemeral port).
    pub fn start(root: &Path, addr: &str) -> Result<Self, StreamError> {
        let server = Server::http(addr).map_err(|e| StreamError::unreachable(addr, e))?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| StreamError::unreachable(addr, "not an IP listener"))?;
        let stop = Arc::new(AtomicBool::new(false));
        let faults = Arc::new(Mutex::new(Faults::default()));
        let gets = Arc::new(AtomicU64::new(0));
        let ctx = Ctx {
            store: LocalDirStore::new(root),
            faults: faults.clone(),
            gets: gets.clone(),
        };
        let flag = stop.clone();
        let thread = thread::Builder::new()
            .name("store-server".into())
            .spawn(move || {
                while !flag.load(Ordering::Relaxed) {
                    match server.recv_timeout(Duration::from_millis(20)) {
                        Ok(Some(req)) => ctx.handle(req),
                        Ok(None) => {}
                        Err(e) => {
                            log::warn!("store server: {e}");
                            break;
                        }
                    }
                }
            })
            .map_err(|e| StreamError::unreachable("store-server", e))?;
        Ok(Self {
            addr,
            stop,
            faults,
            gets,
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Flips one byte in the next `times` GET responses for `name`.
    pub fn corrupt(&self, name: &str, times: usize) {
        self.faults
            .lock()
            .unwrap()
            .corrupt
            .insert(name.to_owned(), times);
    }

    /// While offline every request is answered with 503.
    pub fn set_offline(&self, offline: bool) {
        self.faults.lock().unwrap().offline = offline;
    }

    /// Object GETs served so far.
    pub fn get_count(&self) -> u64 {
        self.gets.load(Ordering::Relaxed)
    }

    /// Blocks until the server thread exits.
    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop_and_join();
    }

    fn stop_and_join(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for StoreServer {
    fn drop(&mut self) {
        self.stop_and_join();
    }
}

struct Ctx {
    store: LocalDirStore,
    faults: Arc<Mutex<Faults>>,
    gets: Arc<AtomicU64>,
}

fn status(code: u16) -> Response<std::io::Empty> {
    Response::empty(StatusCode(code))
}

impl Ctx {
    fn handle(&self, req: Request) {
        let _ = match self.route(&req) {
            Ok(resp) => req.respond(resp),
            Err(code) => req.respond(status(code).boxed()),
        };
    }

    fn path(&self, name: &str) -> Result<PathBuf, u16> {
        let names = self.store.list().map_err(|_| 500u16)?;
        if names.iter().any(|n| n == name) {
            Ok(self.store.root().join(name))
        } else {
            Err(404)
        }
    }

    fn route(&self, req: &Request) -> Result<Response<Box<dyn Read + Send>>, u16> {
        if self.faults.lock().unwrap().offline {
            return Err(503);
        }
        let url = req.url().split('?').next().unwrap_or_default();
        let method = req.method().clone();
        if url == "/objects" || url == "/objects/" {
            if method != Method::Get {
                return Err(405);
            }
            let names = self.store.list().map_err(|_| 500u16)?;
            let body = serde_json::to_vec(&names).map_err(|_| 500u16)?;
            return Ok(Response::from_data(body).boxed());
        }
        let name = url.strip_prefix("/objects/").ok_or(404u16)?;
        let path = self.path(name)?;
        match method {
            Method::Head => {
                let (size, crc) =
                    crc32_of(File::open(&path).map_err(|_| 404u16)?).map_err(|_| 500u16)?;
                let header =
                    Header::from_bytes(CRC32_HEADER.as_bytes(), format!("{crc:08x}").as_bytes())
                        .map_err(|_| 500u16)?;
                let body: Box<dyn Read + Send> = Box::new(std::io::empty());
                Ok(Response::new(
                    StatusCode(200),
                    vec![header],
                    body,
                    Some(size as usize),
                    None,
                ))
            }
            Method::Get => {
                self.gets.fetch_add(1, Ordering::Relaxed);
                let corrupt = {
                    let mut f = self.faults.lock().unwrap();
                    match f.corrupt.get_mut(name) {
                        Some(n) if *n > 0 => {
                            *n -= 1;
                            true
                        }
                        _ => false,
                    }
                };
                if corrupt {
                    let mut data = std::fs::read(&path).map_err(|_| 500u16)?;
                    if let Some(b) = data.last_mut() {
                        *b ^= 0xff;
                    }
                    Ok(Response::from_data(data).boxed())
                } else {
                    Ok(Response::from_file(File::open(&path).map_err(|_| 404u16)?).boxed())
                }
            }
            _ => Err(405),
        }
    }
}
