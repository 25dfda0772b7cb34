//! Newline-delimited JSON oracle protocol over TCP.
//!
//! ```text
//! -> {"op":"extend","tokens":[1,2]}   <- {"ok":true,"predictions":[2,3]}
//! -> {"op":"reset"}                   <- {"ok":true}
//! -> {"op":"info"}                    <- {"ok":true,"vocab_size":64,"eos":63}
//! failures                            <- {"ok":false,"error":"..."}
//! ```
//!
//! One request is in flight per connection and every connection owns its own
//! oracle instance.

use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::oracle::{ModelOracle, OracleError};
use crate::TokenId;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Request {
    Extend { tokens: Vec<TokenId> },
    Reset,
    Info,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Response {
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predictions: Option<Vec<TokenId>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eos: Option<TokenId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Response {
    fn ok() -> Self {
        Self {
            ok: true,
            ..Self::default()
        }
    }

    fn error(msg: impl Into<String>) -> Self {
        Self {
            ok: false,
            error: Some(msg.into()),
            ..Self::default()
        }
    }
}

/// Client side of the protocol, usable anywhere a [`ModelOracle`] is.
#[derive(Debug)]
pub struct ExternalOracle {
    endpoint: String,
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    consumed: usize,
    vocab_size: usize,
    eos: Option<TokenId>,
}

impl ExternalOracle {
    pub fn connect(endpoint: &str) -> Result<Self, OracleError> {
        Self::connect_with_timeout(endpoint, Some(DEFAULT_TIMEOUT))
    }

    pub fn connect_with_timeout(endpoint: &str, timeout: Option<Duration>) -> Result<Self, OracleError> {
        let timeout = timeout.unwrap_or(DEFAULT_TIMEOUT);
        let connect_err = |source| OracleError::Connect {
            endpoint: endpoint.to_string(),
            source,
        };
        let addrs: Vec<SocketAddr> = endpoint.to_socket_addrs().map_err(connect_err)?.collect();
        let mut last = io::Error::new(io::ErrorKind::NotFound, "no addresses resolved");
        let mut stream = None;
        for addr in addrs {
            match TcpStream::connect_timeout(&addr, timeout) {
                Ok(s) => {
                    stream = Some(s);
                    break;
                }
                Err(e) => last = e,
            }
        }
        let stream = stream.ok_or_else(|| connect_err(last))?;
        stream.set_read_timeout(Some(timeout)).map_err(connect_err)?;
        stream.set_write_timeout(Some(timeout)).map_err(connect_err)?;
        stream.set_nodelay(true).map_err(connect_err)?;
        let reader = BufReader::new(stream.try_clone().map_err(connect_err)?);
        let mut oracle = Self {
            endpoint: endpoint.to_string(),
            reader,
            writer: BufWriter::new(stream),
            consumed: 0,
            vocab_size: 0,
            eos: None,
        };
        let info = oracle.call(&Request::Info)?;
        oracle.vocab_size = info
            .vocab_size
            .ok_or_else(|| OracleError::Protocol("info reply without vocab_size".into()))?;
        oracle.eos = info.eos;
        Ok(oracle)
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn io_error(&self, e: io::Error) -> OracleError {
        match e.kind() {
            io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => OracleError::Timeout {
                consumed: self.consumed,
            },
            _ => OracleError::Transport {
                consumed: self.consumed,
                message: e.to_string(),
            },
        }
    }

    fn call(&mut self, req: &Request) -> Result<Response, OracleError> {
        let line = serde_json::to_string(req).expect("request serializes");
        let sent = self
            .writer
            .write_all(line.as_bytes())
            .and_then(|_| self.writer.write_all(b"\n"))
            .and_then(|_| self.writer.flush());
        sent.map_err(|e| self.io_error(e))?;

        let mut reply = String::new();
        let n = self.reader.read_line(&mut reply).map_err(|e| self.io_error(e))?;
        if n == 0 {
            return Err(OracleError::Transport {
                consumed: self.consumed,
                message: "server closed the connection".into(),
            });
        }
        let resp: Response = serde_json::from_str(reply.trim_end())
            .map_err(|e| OracleError::Protocol(format!("malformed reply {:?}: {e}", reply.trim_end())))?;
        if !resp.ok {
            return Err(OracleError::Remote(
                resp.error.unwrap_or_else(|| "unspecified error".into()),
            ));
        }
        Ok(resp)
    }
}

impl ModelOracle for ExternalOracle {
    fn extend(&mut self, tokens: &[TokenId]) -> Result<Vec<TokenId>, OracleError> {
        if tokens.is_empty() {
            return Err(OracleError::EmptyBatch);
        }
        let resp = self.call(&Request::Extend {
            tokens: tokens.to_vec(),
        })?;
        let preds = resp
            .predictions
            .ok_or_else(|| OracleError::Protocol("extend reply without predictions".into()))?;
        if preds.len() != tokens.len() {
            return Err(OracleError::Protocol(format!(
                "sent {} tokens but received {} predictions",
                tokens.len(),
                preds.len()
            )));
        }
        self.consumed += tokens.len();
        Ok(preds)
    }

    fn reset(&mut self) -> Result<(), OracleError> {
        self.call(&Request::Reset)?;
        self.consumed = 0;
        Ok(())
    }

    fn consumed_len(&self) -> usize {
        self.consumed
    }

    fn eos(&self) -> Option<TokenId> {
        self.eos
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }
}

pub type OracleFactory =
    Arc<dyn Fn() -> Result<Box<dyn ModelOracle + Send>, OracleError> + Send + Sync>;

/// Serves the protocol, one thread and one fresh oracle per connection.
pub struct OracleServer {
    listener: TcpListener,
    factory: OracleFactory,
    stop: Arc<AtomicBool>,
    log_connections: bool,
}

impl OracleServer {
    pub fn bind(addr: impl ToSocketAddrs, factory: OracleFactory) -> io::Result<Self> {
        Ok(Self {
            listener: TcpListener::bind(addr)?,
            factory,
            stop: Arc::new(AtomicBool::new(false)),
            log_connections: false,
        })
    }

    pub fn log_connections(mut self, on: bool) -> Self {
        self.log_connections = on;
        self
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Accepts connections until stopped through a [`ServerHandle`].
    pub fn serve(self) -> io::Result<()> {
        for conn in self.listener.incoming() {
            if self.stop.load(Ordering::SeqCst) {
                break;
            }
            let stream = match conn {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("serve-oracle: accept failed: {e}");
                    continue;
                }
            };
            let factory = Arc::clone(&self.factory);
            let log = self.log_connections;
            thread::spawn(move || {
                let peer = stream
                    .peer_addr()
                    .map_or_else(|_| "unknown".to_string(), |a| a.to_string());
                let result = handle_connection(stream, &factory);
                if log {
                    match result {
                        Ok(n) => eprintln!("serve-oracle: {peer} closed after {n} requests"),
                        Err(e) => eprintln!("serve-oracle: {peer} dropped: {e}"),
                    }
                }
            });
        }
        Ok(())
    }

    pub fn spawn(self) -> io::Result<ServerHandle> {
        let addr = self.local_addr()?;
        let stop = Arc::clone(&self.stop);
        let thread = thread::spawn(move || self.serve());
        Ok(ServerHandle {
            addr,
            stop,
            thread: Some(thread),
        })
    }
}

pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<io::Result<()>>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop_and_join();
    }

    fn stop_and_join(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // wake the blocking accept
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_and_join();
    }
}

fn handle_connection(stream: TcpStream, factory: &OracleFactory) -> io::Result<usize> {
    let mut oracle = factory().map_err(|e| io::Error::other(e.to_string()))?;
    let reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    let mut served = 0;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = match serde_json::from_str::<Request>(&line) {
            Err(e) => Response::error(format!("bad request: {e}")),
            Ok(req) => dispatch(oracle.as_mut(), req),
        };
        serde_json::to_writer(&mut writer, &resp)?;
        writer.write_all(b"\n")?;
        writer.flush()?;
        served += 1;
    }
    let _ = writer.get_ref().shutdown(Shutdown::Both);
    Ok(served)
}

fn dispatch(oracle: &mut dyn ModelOracle, req: Request) -> Response {
    match req {
        Request::Extend { tokens } => match oracle.extend(&tokens) {
            Ok(p) => Response {
                predictions: Some(p),
                ..Response::ok()
            },
            Err(e) => Response::error(e.to_string()),
        },
        Request::Reset => match oracle.reset() {
            Ok(()) => Response::ok(),
            Err(e) => Response::error(e.to_string()),
        },
        Request::Info => Response {
            vocab_size: Some(oracle.vocab_size()),
            eos: oracle.eos(),
            ..Response::ok()
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::MarkovOracle;
    use std::io::Read;

    fn markov_factory() -> OracleFactory {
        Arc::new(|| {
            Ok(Box::new(
                MarkovOracle::new(&[1, 2, 3, 1, 2, 4, 1, 2, 3], 2, 5)?.with_eos(Some(9)),
            ) as Box<dyn ModelOracle + Send>)
        })
    }

    fn spawn_markov() -> ServerHandle {
        OracleServer::bind("127.0.0.1:0", markov_factory())
            .unwrap()
            .spawn()
            .unwrap()
    }

    #[test]
    fn request_wire_format() {
        assert_eq!(
            serde_json::to_string(&Request::Extend { tokens: vec![1, 2] }).unwrap(),
            r#"{"op":"extend","tokens":[1,2]}"#
        );
        assert_eq!(serde_json::to_string(&Request::Reset).unwrap(), r#"{"op":"reset"}"#);
        assert_eq!(serde_json::to_string(&Response::ok()).unwrap(), r#"{"ok":true}"#);
    }

    #[test]
    fn info_extend_reset_round_trip() {
        let server = spawn_markov();
        let mut remote = ExternalOracle::connect(&server.addr().to_string()).unwrap();
        assert_eq!(remote.vocab_size(), 10);
        assert_eq!(remote.eos(), Some(9));

        let mut local = (markov_factory())().unwrap();
        let stream = [1, 2, 3, 7, 1, 2];
        assert_eq!(remote.extend(&stream[..2]).unwrap(), local.extend(&stream[..2]).unwrap());
        assert_eq!(remote.extend(&stream[2..]).unwrap(), local.extend(&stream[2..]).unwrap());
        assert_eq!(remote.consumed_len(), 6);
        remote.reset().unwrap();
        local.reset().unwrap();
        assert_eq!(remote.consumed_len(), 0);
        assert_eq!(remote.extend(&[2, 4]).unwrap(), local.extend(&[2, 4]).unwrap());
        server.shutdown();
    }

    #[test]
    fn malformed_request_keeps_connection_open() {
        let server = spawn_markov();
        let mut s = TcpStream::connect(server.addr()).unwrap();
        let mut r = BufReader::new(s.try_clone().unwrap());
        let mut line = String::new();
        s.write_all(b"{not json\n").unwrap();
        r.read_line(&mut line).unwrap();
        let resp: Response = serde_json::from_str(&line).unwrap();
        assert!(!resp.ok && resp.error.is_some());

        line.clear();
        s.write_all(b"{\"op\":\"extend\",\"tokens\":[]}\n").unwrap();
        r.read_line(&mut line).unwrap();
        assert!(!serde_json::from_str::<Response>(&line).unwrap().ok);

        line.clear();
        s.write_all(b"{\"op\":\"info\"}\n").unwrap();
        r.read_line(&mut line).unwrap();
        assert_eq!(line.trim(), r#"{"ok":true,"vocab_size":10,"eos":9}"#);
    }

    /// A fake server that answers `info` correctly and then misbehaves.
    fn fake_server(after_info: &'static [u8]) -> SocketAddr {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        thread::spawn(move || {
            let (mut s, _) = listener.accept().unwrap();
            let mut r = BufReader::new(s.try_clone().unwrap());
            let mut line = String::new();
            r.read_line(&mut line).unwrap();
            s.write_all(b"{\"ok\":true,\"vocab_size\":4,\"eos\":null}\n").unwrap();
            line.clear();
            r.read_line(&mut line).unwrap();
            s.write_all(after_info).unwrap();
            // hold the socket until the client gives up
            let mut sink = Vec::new();
            let _ = s.read_to_end(&mut sink);
        });
        addr
    }

    #[test]
    fn malformed_reply_is_protocol_violation() {
        let addr = fake_server(b"this is not json\n");
        let mut o = ExternalOracle::connect(&addr.to_string()).unwrap();
        assert_eq!(o.eos(), None);
        assert!(matches!(o.extend(&[1]), Err(OracleError::Protocol(_))));
    }

    #[test]
    fn wrong_prediction_count_is_protocol_violation() {
        let addr = fake_server(b"{\"ok\":true,\"predictions\":[1,2,3]}\n");
        let mut o = ExternalOracle::connect(&addr.to_string()).unwrap();
        assert!(matches!(o.extend(&[1]), Err(OracleError::Protocol(_))));
    }

    #[test]
    fn server_closing_mid_stream_is_transport_error() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        thread::spawn(move || {
            let (mut s, _) = listener.accept().unwrap();
            let mut r = BufReader::new(s.try_clone().unwrap());
            let mut line = String::new();
            r.read_line(&mut line).unwrap();
            s.write_all(b"{\"ok\":true,\"vocab_size\":4,\"eos\":3}\n").unwrap();
            line.clear();
            r.read_line(&mut line).unwrap();
            s.write_all(b"{\"ok\":true,\"predictions\":[1]}\n").unwrap();
            line.clear();
            r.read_line(&mut line).unwrap();
            // drop without answering
        });
        let mut o = ExternalOracle::connect(&addr.to_string()).unwrap();
        o.extend(&[1]).unwrap();
        match o.extend(&[2]) {
            Err(OracleError::Transport { consumed, .. }) => assert_eq!(consumed, 1),
            other => panic!("expected transport error, got {other:?}"),
        }
    }

    #[test]
    fn silent_server_times_out() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hold = thread::spawn(move || {
            let (s, _) = listener.accept().unwrap();
            thread::sleep(Duration::from_millis(500));
            drop(s);
        });
        let err = ExternalOracle::connect_with_timeout(&addr.to_string(), Some(Duration::from_millis(100)))
            .unwrap_err();
        assert!(matches!(err, OracleError::Timeout { consumed: 0 }), "{err:?}");
        hold.join().unwrap();
    }

    #[test]
    fn refused_connection_is_connect_error() {
        let addr = {
            let l = TcpListener::bind("127.0.0.1:0").unwrap();
            l.local_addr().unwrap()
        };
        let err = ExternalOracle::connect(&addr.to_string()).unwrap_err();
        assert!(matches!(err, OracleError::Connect { .. }));
    }
}
