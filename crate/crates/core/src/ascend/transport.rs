use std::io::{BufReader, BufWriter};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};

use crossbeam_channel::{unbounded, Receiver, Sender};

use super::envelope::Envelope;
use super::AscendError;

pub trait FrameTx: Send {
    fn send(&mut self, env: &Envelope) -> Result<(), AscendError>;
}

pub trait FrameRx: Send {
    /// Blocks for the next frame; `Disconnected` once the peer is gone.
    fn recv(&mut self) -> Result<Envelope, AscendError>;
}

/// Both directions of a connection to one peer.
pub struct Link {
    pub tx: Box<dyn FrameTx>,
    pub rx: Box<dyn FrameRx>,
}

struct ChanTx(Sender<Vec<u8>>);
struct ChanRx(Receiver<Vec<u8>>);

impl FrameTx for ChanTx {
    fn send(&mut self, env: &Envelope) -> Result<(), AscendError> {
        self.0.send(env.encode()).map_err(|_| AscendError::Disconnected)
    }
}

impl FrameRx for ChanRx {
    fn recv(&mut self) -> Result<Envelope, AscendError> {
        let bytes = self.0.recv().map_err(|_| AscendError::Disconnected)?;
        Envelope::decode(&bytes)
    }
}

/// Two connected in-process endpoints. Frames cross as encoded bytes so the
/// wire format is exercised exactly as over a socket.
pub fn inproc_pair() -> (Link, Link) {
    let (a_tx, a_rx) = unbounded();
    let (b_tx, b_rx) = unbounded();
    (
        Link { tx: Box::new(ChanTx(a_tx)), rx: Box::new(ChanRx(b_rx)) },
        Link { tx: Box::new(ChanTx(b_tx)), rx: Box::new(ChanRx(a_rx)) },
    )
}

struct TcpTx(BufWriter<TcpStream>);
struct TcpRx(BufReader<TcpStream>);

impl FrameTx for TcpTx {
    fn send(&mut self, env: &Envelope) -> Result<(), AscendError> {
        env.write_to(&mut self.0)
    }
}

impl FrameRx for TcpRx {
    fn recv(&mut self) -> Result<Envelope, AscendError> {
        Envelope::read_from(&mut self.0)
    }
}

impl Drop for TcpTx {
    fn drop(&mut self) {
        let _ = self.0.get_ref().shutdown(std::net::Shutdown::Write);
    }
}

impl Link {
    pub fn tcp(stream: TcpStream) -> Result<Link, AscendError> {
        stream.set_nodelay(true)?;
        let read = stream.try_clone()?;
        Ok(Link { tx: Box::new(TcpTx(BufWriter::new(stream))), rx: Box::new(TcpRx(BufReader::new(read))) })
    }

    pub fn connect(addr: impl ToSocketAddrs) -> Result<Link, AscendError> {
        Link::tcp(TcpStream::connect(addr)?)
    }

    /// Waits for one inbound connection.
    pub fn accept(listener: &TcpListener) -> Result<Link, AscendError> {
        let (stream, _) = listener.accept()?;
        Link::tcp(stream)
    }
}

/// Listen address: `ASCEND_BIND` if set, else `default`.
pub fn bind_address(default: &str) -> String {
    std::env::var("ASCEND_BIND").ok().filter(|s| !s.is_empty()).unwrap_or_else(|| default.to_string())
}
