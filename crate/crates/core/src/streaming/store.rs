use std::fs::{self, File};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use super::StreamError;

/// Size and checksum of a stored object.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObjectInfo {
    pub size: u64,
    pub crc32: Option<u32>,
}

/// Flat namespace of named objects.
pub trait ObjectStore: Send + Sync + 'static {
    /// Human-readable location, used in diagnostics.
    fn describe(&self) -> String;

    fn list(&self) -> Result<Vec<String>, StreamError>;

    fn head(&self, name: &str) -> Result<ObjectInfo, StreamError>;

    /// Streams the object into `out`, returning the byte count.
    fn get_into(&self, name: &str, out: &mut dyn Write) -> Result<u64, StreamError>;

    fn get(&self, name: &str) -> Result<Vec<u8>, StreamError> {
        let mut buf = Vec::new();
        self.get_into(name, &mut buf)?;
        Ok(buf)
    }
}

pub(crate) fn crc32_of(mut reader: impl Read) -> io::Result<(u64, u32)> {
    let mut hasher = crc32fast::Hasher::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut total = 0u64;
    loop {
        let n = reader.read(&mut buf)?;
        if n == 0 {
            return Ok((total, hasher.finalize()));
        }
        hasher.update(&buf[..n]);
        total += n as u64;
    }
}

fn valid_name(name: &str) -> bool {
    !name.is_empty() && !name.starts_with('.') && !name.contains(['/', '\\'])
}

/// Objects are the regular files of one directory.
#[derive(Debug, Clone)]
pub struct LocalDirStore {
    root: PathBuf,
}

impl LocalDirStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&self, name: &str) -> Result<PathBuf, StreamError> {
        if !valid_name(name) {
            return Err(StreamError::NotFound(name.to_owned()));
        }
        Ok(self.root.join(name))
    }

    fn open(&self, name: &str) -> Result<File, StreamError> {
        File::open(self.path(name)?).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => StreamError::NotFound(name.to_owned()),
            _ => StreamError::unreachable(name, e),
        })
    }
}

impl ObjectStore for LocalDirStore {
    fn describe(&self) -> String {
        self.root.display().to_string()
    }

    fn list(&self) -> Result<Vec<String>, StreamError> {
        let entries =
            fs::read_dir(&self.root).map_err(|e| StreamError::unreachable(self.describe(), e))?;
        let mut names = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| StreamError::unreachable(self.describe(), e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if entry.file_type().is_ok_and(|t| t.is_file()) && valid_name(&name) {
                names.push(name);
            }
        }
        names.sort();
        Ok(names)
    }

    fn head(&self, name: &str) -> Result<ObjectInfo, StreamError> {
        let (size, crc) =
            crc32_of(self.open(name)?).map_err(|e| StreamError::unreachable(name, e))?;
        Ok(ObjectInfo {
            size,
            crc32: Some(crc),
        })
    }

    fn get_into(&self, name: &str, out: &mut dyn Write) -> Result<u64, StreamError> {
        let mut file = self.open(name)?;
        io::copy(&mut file, out).map_err(|e| StreamError::unreachable(name, e))
    }
}

/// Plain HTTP: `GET /objects` lists, `GET|HEAD /objects/<name>` fetch.
#[derive(Debug, Clone)]
pub struct HttpStore {
    base: String,
    agent: ureq::Agent,
}

pub const CRC32_HEADER: &str = "X-Crc32";

impl HttpStore {
    pub fn new(base_url: &str) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout_connect(Duration::from_secs(2))
            .timeout(Duration::from_secs(60))
            .build();
        Self {
            base: base_url.trim_end_matches('/').to_owned(),
            agent,
        }
    }

    fn call(&self, method: &str, path: &str, target: &str) -> Result<ureq::Response, StreamError> {
        let url = format!("{}{}", self.base, path);
        match self.agent.request(method, &url).call() {
            Ok(r) => Ok(r),
            Err(ureq::Error::Status(404, _)) => Err(StreamError::NotFound(target.to_owned())),
            Err(ureq::Error::Status(code, r)) => Err(StreamError::unreachable(
                target,
                format!("HTTP {code} {}", r.status_text()),
            )),
            Err(e) => Err(StreamError::unreachable(target, e)),
        }
    }
}

impl ObjectStore for HttpStore {
    fn describe(&self) -> String {
        self.base.clone()
    }

    fn list(&self) -> Result<Vec<String>, StreamError> {
        let resp = self.call("GET", "/objects", &self.base)?;
        let text = resp
            .into_string()
            .map_err(|e| StreamError::unreachable(&self.base, e))?;
        serde_json::from_str(&text)
            .map_err(|e| StreamError::BadMetaIndex(format!("object listing: {e}")))
    }

    fn head(&self, name: &str) -> Result<ObjectInfo, StreamError> {
        let resp = self.call("HEAD", &format!("/objects/{name}"), name)?;
        let size = resp
            .header("Content-Length")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| StreamError::unreachable(name, "missing Content-Length"))?;
        let crc32 = resp
            .header(CRC32_HEADER)
            .and_then(|v| u32::from_str_radix(v, 16).ok());
        Ok(ObjectInfo { size, crc32 })
    }

    fn get_into(&self, name: &str, out: &mut dyn Write) -> Result<u64, StreamError> {
        let resp = self.call("GET", &format!("/objects/{name}"), name)?;
        io::copy(&mut resp.into_reader(), out).map_err(|e| StreamError::unreachable(name, e))
    }
}

/// `http://...` selects the HTTP backend, anything else is a directory.
pub fn open_store(location: &str) -> Box<dyn ObjectStore> {
    if location.starts_with("http://") || location.starts_with("https://") {
        Box::new(HttpStore::new(location))
    } else {
        Box::new(LocalDirStore::new(
            location.strip_prefix("file://").unwrap_or(location),
        ))
    }
}
