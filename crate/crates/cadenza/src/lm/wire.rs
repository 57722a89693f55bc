//! Byte protocol for driving a [`LanguageModel`] in another process.
//!
//! Every message is one frame: a little-endian `u32` byte length followed by
//! the payload. Requests start with an opcode byte; responses start with a
//! status byte (0 ok, 1 error + UTF-8 message). Tensors travel as
//! `u32 rows, u32 cols` then row-major little-endian `f32` entries, so
//! gradients and prefixes cross the boundary at `f32` precision.
//!
//! [`serve_frame`] is the server side; [`PipeLm`] is the client side over
//! any [`Transport`]. The loopback pair in the tests exercises both.

use std::io::{Read, Write};
use std::sync::Mutex;

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::lm::{CaptionTarget, LanguageModel, QueryText};
use crate::projector::{TokenBlock, TokenKind};

const MAX_FRAME: usize = 1 << 26;

const OP_HELLO: u8 = 0;
const OP_EMBED_QUERY: u8 = 1;
const OP_CAPTION_NLL: u8 = 2;
const OP_GENERATE: u8 = 3;
const OP_DIGEST: u8 = 4;
const OP_ENCODE: u8 = 5;
const OP_DECODE: u8 = 6;

const STATUS_OK: u8 = 0;
const STATUS_ERR: u8 = 1;

pub fn write_frame(w: &mut impl Write, payload: &[u8]) -> Result<()> {
    if payload.len() > MAX_FRAME {
        return Err(Error::Parse(format!("frame of {} bytes exceeds cap", payload.len())));
    }
    w.write_all(&(payload.len() as u32).to_le_bytes())?;
    w.write_all(payload)?;
    w.flush()?;
    Ok(())
}

pub fn read_frame(r: &mut impl Read) -> Result<Vec<u8>> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(Error::Parse(format!("incoming frame of {len} bytes exceeds cap")));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    Ok(payload)
}

/// Sequential reader over a frame payload.
struct FrameReader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> FrameReader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, at: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(Error::Parse("truncated frame".into()));
        }
        let out = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn text(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|e| Error::Parse(format!("frame text is not UTF-8: {e}")))
    }

    fn ids(&mut self) -> Result<Vec<usize>> {
        let n = self.u32()? as usize;
        (0..n).map(|_| Ok(self.u32()? as usize)).collect()
    }

    fn mat(&mut self) -> Result<Mat> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let need = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Parse("tensor header overflows".into()))?;
        let bytes = self.take(need)?;
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        Mat::from_shape_vec((rows, cols), data)
            .map_err(|e| Error::Parse(format!("tensor shape: {e}")))
    }

    fn done(&self) -> Result<()> {
        if self.at != self.buf.len() {
            return Err(Error::Parse("trailing bytes in frame".into()));
        }
        Ok(())
    }
}

fn put_text(out: &mut Vec<u8>, text: &str) {
    out.extend((text.len() as u32).to_le_bytes());
    out.extend(text.as_bytes());
}

fn put_ids(out: &mut Vec<u8>, ids: &[usize]) {
    out.extend((ids.len() as u32).to_le_bytes());
    for &id in ids {
        out.extend((id as u32).to_le_bytes());
    }
}

fn put_mat(out: &mut Vec<u8>, m: &Mat) {
    out.extend((m.nrows() as u32).to_le_bytes());
    out.extend((m.ncols() as u32).to_le_bytes());
    for v in m.iter() {
        out.extend((*v as f32).to_le_bytes());
    }
}

fn ok_frame(body: impl FnOnce(&mut Vec<u8>)) -> Vec<u8> {
    let mut out = vec![STATUS_OK];
    body(&mut out);
    out
}

fn err_frame(e: &Error) -> Vec<u8> {
    let mut out = vec![STATUS_ERR];
    put_text(&mut out, &e.to_string());
    out
}

/// Server-side dispatch of one request frame against a model.
pub fn serve_frame(lm: &dyn LanguageModel, request: &[u8]) -> Vec<u8> {
    match dispatch(lm, request) {
        Ok(frame) => frame,
        Err(e) => err_frame(&e),
    }
}

fn dispatch(lm: &dyn LanguageModel, request: &[u8]) -> Result<Vec<u8>> {
    let mut r = FrameReader::new(request);
    let op = r.u8()?;
    match op {
        OP_HELLO => {
            r.done()?;
            Ok(ok_frame(|out| {
                out.extend((lm.embedding_dim() as u32).to_le_bytes());
                out.extend((lm.vocab_size() as u32).to_le_bytes());
            }))
        }
        OP_EMBED_QUERY => {
            let text = r.text()?;
            r.done()?;
            let block = lm.embed_query(&QueryText::new(text)?)?;
            Ok(ok_frame(|out| put_mat(out, &block.vectors)))
        }
        OP_CAPTION_NLL => {
            let prefix = r.mat()?;
            let text = r.text()?;
            let want_grad = r.u8()? != 0;
            r.done()?;
            let target = lm.caption_target(&text)?;
            if want_grad {
                let (loss, grad) = lm.caption_nll_with_grad(&prefix, &target)?;
                Ok(ok_frame(|out| {
                    out.extend(loss.to_le_bytes());
                    put_mat(out, &grad);
                }))
            } else {
                let loss = lm.caption_nll(&prefix, &target)?;
                Ok(ok_frame(|out| out.extend(loss.to_le_bytes())))
            }
        }
        OP_GENERATE => {
            let prefix = r.mat()?;
            let max_tokens = r.u32()? as usize;
            r.done()?;
            let caption = lm.generate(&prefix, max_tokens)?;
            Ok(ok_frame(|out| put_text(out, &caption)))
        }
        OP_DIGEST => {
            r.done()?;
            Ok(ok_frame(|out| put_text(out, &lm.digest())))
        }
        OP_ENCODE => {
            let text = r.text()?;
            r.done()?;
            Ok(ok_frame(|out| put_ids(out, &lm.encode(&text))))
        }
        OP_DECODE => {
            let ids = r.ids()?;
            r.done()?;
            Ok(ok_frame(|out| put_text(out, &lm.decode(&ids))))
        }
        other => Err(Error::Parse(format!("unknown opcode {other}"))),
    }
}

/// Blocking request/response channel to the remote model.
pub trait Transport: Send {
    fn round_trip(&mut self, request: &[u8]) -> Result<Vec<u8>>;
}

/// Transport over any byte stream pair (e.g. a child process's stdio).
pub struct StreamTransport<W: Write + Send, R: Read + Send> {
    writer: W,
    reader: R,
}

impl<W: Write + Send, R: Read + Send> StreamTransport<W, R> {
    pub fn new(writer: W, reader: R) -> Self {
        Self { writer, reader }
    }
}

impl<W: Write + Send, R: Read + Send> Transport for StreamTransport<W, R> {
    fn round_trip(&mut self, request: &[u8]) -> Result<Vec<u8>> {
        write_frame(&mut self.writer, request)?;
        read_frame(&mut self.reader)
    }
}

/// [`LanguageModel`] backed by a remote runtime over a [`Transport`].
///
/// The handshake pins the embedding dimension at construction; tensor
/// payloads are `f32`, so prefixes and gradients round to `f32` precision.
pub struct PipeLm<T: Transport> {
    transport: Mutex<T>,
    dim: usize,
    vocab: usize,
}

impl<T: Transport> PipeLm<T> {
    pub fn connect(transport: T) -> Result<Self> {
        let mut lm = Self { transport: Mutex::new(transport), dim: 0, vocab: 0 };
        let mut r = lm.call(&[OP_HELLO])?;
        lm.dim = r.u32()? as usize;
        lm.vocab = r.u32()? as usize;
        Ok(lm)
    }

    fn call(&self, request: &[u8]) -> Result<OwnedReader> {
        let mut t = self
            .transport
            .lock()
            .map_err(|_| Error::Io(std::io::Error::other("LM transport poisoned")))?;
        let response = t.round_trip(request)?;
        drop(t);
        OwnedReader::new(response)
    }
}

/// Owns a response frame; exposes the same cursor as [`FrameReader`] after
/// checking the status byte.
struct OwnedReader {
    buf: Vec<u8>,
    at: usize,
}

impl OwnedReader {
    fn new(buf: Vec<u8>) -> Result<Self> {
        let mut r = Self { buf, at: 0 };
        match r.u8()? {
            STATUS_OK => Ok(r),
            STATUS_ERR => {
                let msg = r.text()?;
                Err(Error::Io(std::io::Error::other(format!("remote LM error: {msg}"))))
            }
            other => Err(Error::Parse(format!("unknown response status {other}"))),
        }
    }

    fn reader(&mut self) -> FrameReader<'_> {
        FrameReader { buf: &self.buf, at: self.at }
    }

    fn u8(&mut self) -> Result<u8> {
        let mut r = self.reader();
        let v = r.u8()?;
        self.at = r.at;
        Ok(v)
    }

    fn u32(&mut self) -> Result<u32> {
        let mut r = self.reader();
        let v = r.u32()?;
        self.at = r.at;
        Ok(v)
    }

    fn f64(&mut self) -> Result<f64> {
        let mut r = self.reader();
        let v = r.f64()?;
        self.at = r.at;
        Ok(v)
    }

    fn text(&mut self) -> Result<String> {
        let mut r = self.reader();
        let v = r.text()?;
        self.at = r.at;
        Ok(v)
    }

    fn ids(&mut self) -> Result<Vec<usize>> {
        let mut r = self.reader();
        let v = r.ids()?;
        self.at = r.at;
        Ok(v)
    }

    fn mat(&mut self) -> Result<Mat> {
        let mut r = self.reader();
        let v = r.mat()?;
        self.at = r.at;
        Ok(v)
    }
}

impl<T: Transport> LanguageModel for PipeLm<T>
where
    T: 'static,
{
    fn embedding_dim(&self) -> usize {
        self.dim
    }

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn encode(&self, text: &str) -> Vec<usize> {
        let mut req = vec![OP_ENCODE];
        put_text(&mut req, text);
        self.call(&req).and_then(|mut r| r.ids()).unwrap_or_default()
    }

    fn decode(&self, ids: &[usize]) -> String {
        let mut req = vec![OP_DECODE];
        put_ids(&mut req, ids);
        self.call(&req).and_then(|mut r| r.text()).unwrap_or_default()
    }

    fn embed_query(&self, q: &QueryText) -> Result<TokenBlock> {
        let mut req = vec![OP_EMBED_QUERY];
        put_text(&mut req, q.text());
        let vectors = self.call(&req)?.mat()?;
        TokenBlock::new(vectors, TokenKind::Query)
    }

    fn caption_nll(&self, prefix: &Mat, target: &CaptionTarget) -> Result<f64> {
        let mut req = vec![OP_CAPTION_NLL];
        put_mat(&mut req, prefix);
        put_text(&mut req, &target.text);
        req.push(0);
        self.call(&req)?.f64()
    }

    fn caption_nll_with_grad(&self, prefix: &Mat, target: &CaptionTarget) -> Result<(f64, Mat)> {
        let mut req = vec![OP_CAPTION_NLL];
        put_mat(&mut req, prefix);
        put_text(&mut req, &target.text);
        req.push(1);
        let mut r = self.call(&req)?;
        let loss = r.f64()?;
        let grad = r.mat()?;
        Ok((loss, grad))
    }

    fn generate(&self, prefix: &Mat, max_tokens: usize) -> Result<String> {
        let mut req = vec![OP_GENERATE];
        put_mat(&mut req, prefix);
        req.extend((max_tokens as u32).to_le_bytes());
        self.call(&req)?.text()
    }

    fn digest(&self) -> String {
        self.call(&[OP_DIGEST]).and_then(|mut r| r.text()).unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{ToyLm, ToyLmConfig};
    use ndarray::array;

    /// In-process transport: serves each request against a local model.
    struct Loopback {
        lm: ToyLm,
    }

    impl Transport for Loopback {
        fn round_trip(&mut self, request: &[u8]) -> Result<Vec<u8>> {
            Ok(serve_frame(&self.lm, request))
        }
    }

    fn pipe() -> PipeLm<Loopback> {
        PipeLm::connect(Loopback { lm: ToyLm::new(ToyLmConfig::default()).unwrap() }).unwrap()
    }

    /// Prefix whose entries are exact in f32, so the wire adds no rounding.
    fn f32_exact_prefix() -> Mat {
        array![
            [
                0.5, -0.25, 0.125, 1.0, -1.5, 0.75, 0.0, 2.0, -0.5, 0.25, 1.25, -2.0, 0.375, 0.625,
                -0.125, 0.875
            ],
            [
                1.5, 0.0, -0.75, 0.5, 0.25, -1.0, 0.125, 0.625, -0.375, 1.75, 0.5, -0.25, 0.0, 1.0,
                -0.625, 0.25
            ],
        ]
    }

    #[test]
    fn frames_round_trip_over_streams() {
        let mut buf = Vec::new();
        write_frame(&mut buf, b"hello frames").unwrap();
        write_frame(&mut buf, b"").unwrap();
        let mut r = buf.as_slice();
        assert_eq!(read_frame(&mut r).unwrap(), b"hello frames");
        assert_eq!(read_frame(&mut r).unwrap(), b"");
        assert!(read_frame(&mut r).is_err());
    }

    #[test]
    fn tensors_round_trip_at_f32_precision() {
        let m = array![[0.5, -2.25], [8.0, 0.0078125]];
        let mut bytes = Vec::new();
        put_mat(&mut bytes, &m);
        let mut r = FrameReader::new(&bytes);
        assert_eq!(r.mat().unwrap(), m);
        assert!(r.done().is_ok());
    }

    #[test]
    fn truncated_tensor_is_a_parse_error() {
        let m = array![[1.0, 2.0]];
        let mut bytes = Vec::new();
        put_mat(&mut bytes, &m);
        bytes.pop();
        let mut r = FrameReader::new(&bytes);
        assert!(matches!(r.mat(), Err(Error::Parse(_))));
    }

    #[test]
    fn handshake_discovers_geometry() {
        let direct = ToyLm::new(ToyLmConfig::default()).unwrap();
        let remote = pipe();
        assert_eq!(remote.embedding_dim(), direct.embedding_dim());
        assert_eq!(remote.vocab_size(), direct.vocab_size());
        assert_eq!(remote.digest(), direct.digest());
    }

    #[test]
    fn remote_matches_direct_on_f32_exact_inputs() {
        let direct = ToyLm::new(ToyLmConfig::default()).unwrap();
        let remote = pipe();
        let prefix = f32_exact_prefix();

        let q = QueryText::new("describe this piece of music").unwrap();
        assert_eq!(
            remote.embed_query(&q).unwrap().vectors.mapv(|v| v as f32),
            direct.embed_query(&q).unwrap().vectors.mapv(|v| v as f32)
        );

        let target = direct.caption_target("calm piano melody").unwrap();
        let direct_loss = direct.caption_nll(&prefix, &target).unwrap();
        let remote_loss = remote.caption_nll(&prefix, &target).unwrap();
        assert_eq!(direct_loss, remote_loss);

        let (_, dg) = direct.caption_nll_with_grad(&prefix, &target).unwrap();
        let (rl, rg) = remote.caption_nll_with_grad(&prefix, &target).unwrap();
        assert_eq!(rl, direct_loss);
        for (a, b) in dg.iter().zip(rg.iter()) {
            assert!((a - b).abs() <= 1e-7, "grad differs beyond f32: {a} vs {b}");
        }

        assert_eq!(remote.generate(&prefix, 6).unwrap(), direct.generate(&prefix, 6).unwrap());
    }

    #[test]
    fn remote_errors_surface_with_message() {
        let remote = pipe();
        let prefix = f32_exact_prefix();
        let bogus = CaptionTarget { text: "???".into(), token_ids: vec![] };
        let err = remote.caption_nll(&prefix, &bogus).unwrap_err();
        assert!(err.to_string().contains("remote LM error"), "got: {err}");
    }

    #[test]
    fn unknown_opcode_is_rejected() {
        let lm = ToyLm::new(ToyLmConfig::default()).unwrap();
        let response = serve_frame(&lm, &[250]);
        assert_eq!(response[0], STATUS_ERR);
    }
}
