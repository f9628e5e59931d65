//! Client for an external segmentor speaking the bridge protocol, plus a
//! small echo server used as a test double.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::Mutex;
use std::time::Duration;

use crate::mask::{Image, SoftMask};
use crate::scalar::{sigmoid, Real};
use crate::select::{Polarity, PromptSet};

use super::wire::{Hello, HelloReply, PredictReply, PredictRequest, RasterPayload};
use super::{require_positive, Capabilities, PromptableSegmentor, SegmentorError};

const READ_TIMEOUT: Duration = Duration::from_secs(300);

struct Connection {
    reader: Box<dyn BufRead + Send>,
    writer: Box<dyn Write + Send>,
    child: Option<Child>,
    next_id: u64,
}

impl Connection {
    fn send_line(&mut self, msg: &impl serde::Serialize) -> Result<(), SegmentorError> {
        let mut line =
            serde_json::to_vec(msg).map_err(|e| SegmentorError::Protocol(e.to_string()))?;
        line.push(b'\n');
        self.writer.write_all(&line)?;
        self.writer.flush()?;
        Ok(())
    }

    fn read_line<R: serde::de::DeserializeOwned>(&mut self) -> Result<R, SegmentorError> {
        let mut line = String::new();
        if self.reader.read_line(&mut line)? == 0 {
            return Err(SegmentorError::Transport(std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                "bridge closed the connection",
            )));
        }
        serde_json::from_str(line.trim_end())
            .map_err(|e| SegmentorError::Protocol(format!("{e}: {}", line.trim_end())))
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Some(child) = self.child.as_mut() {
            // closing stdin lets a well-behaved server exit on its own
            self.writer = Box::new(std::io::sink());
            for _ in 0..50 {
                if let Ok(Some(_)) = child.try_wait() {
                    return;
                }
                std::thread::sleep(Duration::from_millis(20));
            }
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// Remote segmentor. Requests on one instance are serialized.
pub struct BridgeSegmentor {
    backend: String,
    version: String,
    conn: Mutex<Connection>,
}

impl std::fmt::Debug for BridgeSegmentor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BridgeSegmentor")
            .field("backend", &self.backend)
            .field("version", &self.version)
            .finish()
    }
}

impl BridgeSegmentor {
    /// `stdio:CMD ARGS...` spawns a process; anything else is a TCP address.
    pub fn connect(addr: &str) -> Result<Self, SegmentorError> {
        if let Some(cmd) = addr.strip_prefix("stdio:") {
            Self::spawn(cmd)
        } else {
            Self::tcp(addr)
        }
    }

    pub fn tcp(addr: &str) -> Result<Self, SegmentorError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_read_timeout(Some(READ_TIMEOUT))?;
        stream.set_nodelay(true)?;
        let reader = BufReader::new(stream.try_clone()?);
        Self::handshake(Connection {
            reader: Box::new(reader),
            writer: Box::new(stream),
            child: None,
            next_id: 1,
        })
    }

    pub fn spawn(cmdline: &str) -> Result<Self, SegmentorError> {
        let mut parts = cmdline.split_whitespace();
        let program = parts
            .next()
            .ok_or_else(|| SegmentorError::Protocol("empty stdio command".into()))?;
        let mut child = Command::new(program)
            .args(parts)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Self::handshake(Connection {
            reader: Box::new(BufReader::new(stdout)),
            writer: Box::new(stdin),
            child: Some(child),
            next_id: 1,
        })
    }

    fn handshake(mut conn: Connection) -> Result<Self, SegmentorError> {
        conn.send_line(&Hello { op: "hello".into() })?;
        let reply: HelloReply = conn.read_line()?;
        Ok(Self {
            backend: reply.backend,
            version: reply.version,
            conn: Mutex::new(conn),
        })
    }

    pub fn backend(&self) -> &str {
        &self.backend
    }

    pub fn version(&self) -> &str {
        &self.version
    }
}

impl<T: Real> PromptableSegmentor<T> for BridgeSegmentor {
    fn name(&self) -> String {
        format!("bridge:{}@{}", self.backend, self.version)
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            analytic_gradient: false,
        }
    }

    fn predict(
        &self,
        image: &Image<T>,
        prompts: &PromptSet<T>,
    ) -> Result<SoftMask<T>, SegmentorError> {
        require_positive(prompts)?;
        let (w, h) = image.dims();
        let pixels: Vec<f32> = image
            .intensity()
            .iter()
            .map(|v| v.as_f64() as f32)
            .collect();
        let mut conn = self
            .conn
            .lock()
            .map_err(|_| SegmentorError::Protocol("bridge connection poisoned".into()))?;
        let id = conn.next_id;
        conn.next_id += 1;
        conn.send_line(&PredictRequest {
            id,
            op: "predict".into(),
            image: RasterPayload::from_f32(w, h, &pixels),
            points: prompts.to_records(),
        })?;
        let reply: PredictReply = conn.read_line()?;
        drop(conn);
        if reply.id != id {
            return Err(SegmentorError::Protocol(format!(
                "response id {} does not match request {id}",
                reply.id
            )));
        }
        if !reply.ok {
            return Err(SegmentorError::Backend(
                reply.error.unwrap_or_else(|| "unspecified error".into()),
            ));
        }
        let mask = reply
            .mask
            .ok_or_else(|| SegmentorError::Protocol("ok response without mask".into()))?;
        if (mask.w as usize, mask.h as usize) != (w, h) {
            return Err(SegmentorError::Protocol(format!(
                "mask is {}x{}, image is {w}x{h}",
                mask.w, mask.h
            )));
        }
        let values = mask.to_f32().map_err(SegmentorError::Protocol)?;
        Ok(SoftMask::new(
            w,
            h,
            values.into_iter().map(|v| T::lit(v as f64)).collect(),
        )?)
    }
}

/// Echo backend: `sigmoid(4 * G)` with an isotropic Gaussian of radius 12 px
/// around the first positive point. Serves until the input closes.
pub fn serve_echo<R: BufRead, W: Write>(reader: R, mut writer: W) -> std::io::Result<()> {
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(e) => {
                writeln!(
                    writer,
                    "{}",
                    serde_json::json!({"id": 0, "ok": false, "error": e.to_string()})
                )?;
                writer.flush()?;
                continue;
            }
        };
        let reply = match value.get("op").and_then(|o| o.as_str()) {
            Some("hello") => serde_json::to_value(HelloReply {
                backend: "echo".into(),
                version: env!("CARGO_PKG_VERSION").into(),
            })
            .expect("serializable"),
            Some("predict") => match serde_json::from_value::<PredictRequest>(value.clone()) {
                Ok(req) => serde_json::to_value(echo_predict(&req)).expect("serializable"),
                Err(e) => serde_json::json!({
                    "id": value.get("id").and_then(|v| v.as_u64()).unwrap_or(0),
                    "ok": false,
                    "error": e.to_string(),
                }),
            },
            other => serde_json::json!({
                "id": value.get("id").and_then(|v| v.as_u64()).unwrap_or(0),
                "ok": false,
                "error": format!("unknown op {other:?}"),
            }),
        };
        writeln!(writer, "{reply}")?;
        writer.flush()?;
    }
    Ok(())
}

fn echo_predict(req: &PredictRequest) -> PredictReply {
    let fail = |msg: String| PredictReply {
        id: req.id,
        ok: false,
        mask: None,
        error: Some(msg),
    };
    if let Err(e) = req.image.to_f32() {
        return fail(e);
    }
    let Some(p) = req
        .points
        .iter()
        .find(|r| Polarity::from_label(r.label) == Some(Polarity::Positive))
    else {
        return fail("no positive point".into());
    };
    let (w, h) = (req.image.w as usize, req.image.h as usize);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - p.x;
            let dy = y as f64 - p.y;
            let g = (-(dx * dx + dy * dy) / (2.0 * 144.0)).exp();
            out.push(sigmoid(4.0 * g) as f32);
        }
    }
    PredictReply {
        id: req.id,
        ok: true,
        mask: Some(RasterPayload::from_f32(w, h, &out)),
        error: None,
    }
}
