//! Client for an out-of-process VLM embedding service.
//!
//! Protocol (HTTP/1.1, JSON bodies):
//!
//! ```text
//! POST /embed/text   {"texts": ["..", ..]}           -> {"dim": d, "vectors": [[..], ..]}
//! POST /embed/image  {"images": ["<base64 PNG>", ..]} -> {"dim": d, "vectors": [[..], ..]}
//! ```

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{EmbeddingProvider, EmbeddingVector, ProviderDescriptor};
use crate::error::{Error, Result};
use crate::image::Image;

const TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Serialize, Deserialize)]
pub struct TextRequest {
    pub texts: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ImageRequest {
    pub images: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub dim: usize,
    pub vectors: Vec<Vec<f32>>,
}

pub struct RemoteProvider {
    desc: ProviderDescriptor,
    host: String,
    port: u16,
    base_path: String,
}

impl RemoteProvider {
    pub fn new(desc: ProviderDescriptor) -> Result<Self> {
        let endpoint =
            desc.endpoint.clone().ok_or_else(|| Error::validation("vlm-remote provider needs an endpoint"))?;
        let rest = endpoint
            .strip_prefix("http://")
            .ok_or_else(|| Error::validation(format!("unsupported endpoint '{endpoint}' (http:// only)")))?;
        let (authority, path) = match rest.find('/') {
            Some(i) => (&rest[..i], rest[i..].trim_end_matches('/')),
            None => (rest, ""),
        };
        let (host, port) = match authority.rsplit_once(':') {
            Some((h, p)) => (
                h.to_string(),
                p.parse::<u16>().map_err(|_| Error::validation(format!("bad port in endpoint '{endpoint}'")))?,
            ),
            None => (authority.to_string(), 80),
        };
        Ok(Self { desc, host, port, base_path: path.to_string() })
    }

    fn post(&self, route: &str, body: &[u8]) -> Result<Vec<u8>> {
        let unreachable =
            |e: std::io::Error| Error::Provider(format!("endpoint {}:{} unreachable: {e}", self.host, self.port));
        let addr = (self.host.as_str(), self.port)
            .to_socket_addrs()
            .map_err(unreachable)?
            .next()
            .ok_or_else(|| Error::Provider(format!("cannot resolve {}", self.host)))?;
        let mut stream = TcpStream::connect_timeout(&addr, TIMEOUT).map_err(unreachable)?;
        stream.set_read_timeout(Some(TIMEOUT))?;
        stream.set_write_timeout(Some(TIMEOUT))?;
        let head = format!(
            "POST {}{} HTTP/1.1\r\nHost: {}:{}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
            self.base_path,
            route,
            self.host,
            self.port,
            body.len()
        );
        stream.write_all(head.as_bytes()).map_err(unreachable)?;
        stream.write_all(body).map_err(unreachable)?;
        stream.flush()?;
        read_http_response(stream)
    }

    fn call(&self, route: &str, body: &[u8], expected: usize) -> Result<Vec<EmbeddingVector>> {
        let raw = self.post(route, body)?;
        let resp: EmbedResponse = serde_json::from_slice(&raw)
            .map_err(|e| Error::Provider(format!("malformed response from {route}: {e}")))?;
        if resp.dim != self.desc.dim {
            return Err(Error::DimMismatch { expected: self.desc.dim, actual: resp.dim });
        }
        if resp.vectors.len() != expected {
            return Err(Error::Provider(format!(
                "{route} returned {} vectors for {expected} inputs",
                resp.vectors.len()
            )));
        }
        resp.vectors
            .into_iter()
            .map(|v| {
                if v.len() != resp.dim {
                    return Err(Error::DimMismatch { expected: resp.dim, actual: v.len() });
                }
                EmbeddingVector::new(v)?.normalized()
            })
            .collect()
    }
}

fn read_http_response(stream: TcpStream) -> Result<Vec<u8>> {
    let mut reader = BufReader::new(stream);
    let mut status = String::new();
    reader.read_line(&mut status)?;
    let code: u16 = status
        .split_whitespace()
        .nth(1)
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| Error::Provider(format!("bad HTTP status line '{}'", status.trim())))?;
    let mut content_length = None;
    let mut chunked = false;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            break;
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            let (k, v) = (k.trim().to_ascii_lowercase(), v.trim());
            if k == "content-length" {
                content_length = v.parse::<usize>().ok();
            } else if k == "transfer-encoding" && v.eq_ignore_ascii_case("chunked") {
                chunked = true;
            }
        }
    }
    let mut body = Vec::new();
    if chunked {
        loop {
            let mut size_line = String::new();
            reader.read_line(&mut size_line)?;
            let size = usize::from_str_radix(size_line.trim().split(';').next().unwrap_or(""), 16)
                .map_err(|_| Error::Provider("bad chunk size".into()))?;
            if size == 0 {
                break;
            }
            let mut chunk = vec![0; size];
            reader.read_exact(&mut chunk)?;
            body.extend(chunk);
            let mut crlf = [0u8; 2];
            reader.read_exact(&mut crlf)?;
        }
    } else if let Some(n) = content_length {
        body.resize(n, 0);
        reader.read_exact(&mut body)?;
    } else {
        reader.read_to_end(&mut body)?;
    }
    if !(200..300).contains(&code) {
        return Err(Error::Provider(format!("HTTP {code}: {}", String::from_utf8_lossy(&body))));
    }
    Ok(body)
}

pub fn encode_png_base64(img: &Image) -> Result<String> {
    let mut buf = std::io::Cursor::new(Vec::new());
    let mut rgb = image::RgbImage::new(img.width as u32, img.height as u32);
    for y in 0..img.height {
        for x in 0..img.width {
            let px = [0, 1, 2].map(|c| (img.get(c.min(img.channels - 1), y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            rgb.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    rgb.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(base64::engine::general_purpose::STANDARD.encode(buf.into_inner()))
}

impl EmbeddingProvider for RemoteProvider {
    fn descriptor(&self) -> &ProviderDescriptor {
        &self.desc
    }

    fn encode_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let body = serde_json::to_vec(&TextRequest { texts: texts.to_vec() })?;
        self.call("/embed/text", &body, texts.len())
    }

    fn supports_images(&self) -> bool {
        true
    }

    fn embed_images(&self, images: &[Image]) -> Result<Vec<EmbeddingVector>> {
        let images = images.iter().map(encode_png_base64).collect::<Result<Vec<_>>>()?;
        let n = images.len();
        let body = serde_json::to_vec(&ImageRequest { images })?;
        self.call("/embed/image", &body, n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::ProviderKind;

    #[test]
    fn endpoint_parsing() {
        let mut d = ProviderDescriptor::synthetic(4, 0);
        d.kind = ProviderKind::VlmRemote;
        d.endpoint = Some("http://localhost:8080/api/".into());
        let p = RemoteProvider::new(d.clone()).unwrap();
        assert_eq!((p.host.as_str(), p.port, p.base_path.as_str()), ("localhost", 8080, "/api"));
        d.endpoint = Some("https://x".into());
        assert!(RemoteProvider::new(d).is_err());
    }

    #[test]
    fn unreachable_endpoint_is_reported() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let port = listener.local_addr().unwrap().port();
        drop(listener);
        let mut d = ProviderDescriptor::synthetic(4, 0);
        d.kind = ProviderKind::VlmRemote;
        d.endpoint = Some(format!("http://127.0.0.1:{port}"));
        let err = RemoteProvider::new(d).unwrap().encode_texts(&["x".into()]).unwrap_err();
        assert!(err.to_string().contains("unreachable"), "{err}");
    }
}
