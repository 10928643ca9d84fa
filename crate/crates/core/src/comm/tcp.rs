//! Full-mesh TCP transport. Rank `r` dials every higher rank and accepts
//! every lower one. Each frame is `[u8 op][u64 seq][u32 len][bytes]`.

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::time::{Duration, Instant};

use super::{Endpoint, Op, Transport, DEFAULT_TIMEOUT};
use crate::error::{Result, TransportError};

const MAGIC: [u8; 4] = *b"SMPT";
const VERSION: u16 = 1;
const MAX_FRAME: u32 = 1 << 31;

#[derive(Debug, Clone, Copy)]
pub struct TcpOptions {
    /// Per-collective receive timeout.
    pub timeout: Duration,
    /// How long to keep retrying connections while peers start up.
    pub connect_timeout: Duration,
}

impl Default for TcpOptions {
    fn default() -> Self {
        TcpOptions {
            timeout: DEFAULT_TIMEOUT,
            connect_timeout: DEFAULT_TIMEOUT,
        }
    }
}

fn resolve(addr: &str) -> Result<SocketAddr, TransportError> {
    addr.to_socket_addrs()
        .map_err(|e| TransportError::Setup(format!("cannot resolve {addr}: {e}")))?
        .next()
        .ok_or_else(|| TransportError::Setup(format!("{addr} resolves to no address")))
}

fn hello(rank: usize, n: usize) -> [u8; 14] {
    let mut b = [0u8; 14];
    b[..4].copy_from_slice(&MAGIC);
    b[4..6].copy_from_slice(&VERSION.to_le_bytes());
    b[6..10].copy_from_slice(&(rank as u32).to_le_bytes());
    b[10..14].copy_from_slice(&(n as u32).to_le_bytes());
    b
}

/// Reads a peer's hello and returns its rank.
fn read_hello(s: &mut TcpStream, n: usize) -> Result<usize, TransportError> {
    let mut b = [0u8; 14];
    s.read_exact(&mut b)
        .map_err(|e| TransportError::Setup(format!("handshake read failed: {e}")))?;
    if b[..4] != MAGIC {
        return Err(TransportError::Setup("peer sent bad handshake magic".into()));
    }
    let version = u16::from_le_bytes([b[4], b[5]]);
    if version != VERSION {
        return Err(TransportError::Setup(format!(
            "peer speaks protocol version {version}, expected {VERSION}"
        )));
    }
    let rank = u32::from_le_bytes(b[6..10].try_into().expect("4 bytes")) as usize;
    let peer_n = u32::from_le_bytes(b[10..14].try_into().expect("4 bytes")) as usize;
    if peer_n != n || rank >= n {
        return Err(TransportError::Setup(format!(
            "peer claims rank {rank} of {peer_n}, cluster has {n} nodes"
        )));
    }
    Ok(rank)
}

/// Opens the mesh for `rank` given every node's listen address, in rank
/// order. Blocks until all peers are connected.
pub fn connect_tcp(rank: usize, peers: &[String], opts: TcpOptions) -> Result<Endpoint> {
    let n = peers.len();
    if rank >= n {
        return Err(TransportError::Setup(format!("rank {rank} outside cluster of {n}")).into());
    }
    let listener = TcpListener::bind(resolve(&peers[rank])?)
        .map_err(|e| TransportError::Setup(format!("cannot listen on {}: {e}", peers[rank])))?;
    let deadline = Instant::now() + opts.connect_timeout;
    let mut streams: Vec<Option<TcpStream>> = (0..n).map(|_| None).collect();

    for (q, addr) in peers.iter().enumerate().skip(rank + 1) {
        let addr = resolve(addr)?;
        let mut s = loop {
            match TcpStream::connect_timeout(&addr, Duration::from_millis(500)) {
                Ok(s) => break s,
                Err(_) if Instant::now() < deadline => {
                    std::thread::sleep(Duration::from_millis(50));
                }
                Err(_) => {
                    return Err(TransportError::Timeout {
                        op: "connect",
                        secs: opts.connect_timeout.as_secs_f64(),
                        missing: vec![q],
                    }
                    .into())
                }
            }
        };
        s.set_read_timeout(Some(opts.connect_timeout)).map_err(setup)?;
        s.write_all(&hello(rank, n)).map_err(setup)?;
        let got = read_hello(&mut s, n)?;
        if got != q {
            return Err(TransportError::Setup(format!(
                "dialed rank {q} at {addr} but rank {got} answered"
            ))
            .into());
        }
        streams[q] = Some(s);
    }

    listener.set_nonblocking(true).map_err(setup)?;
    let mut pending = rank;
    while pending > 0 {
        match listener.accept() {
            Ok((mut s, _)) => {
                s.set_nonblocking(false).map_err(setup)?;
                s.set_read_timeout(Some(opts.connect_timeout)).map_err(setup)?;
                let p = read_hello(&mut s, n)?;
                if p >= rank || streams[p].is_some() {
                    return Err(TransportError::Setup(format!(
                        "unexpected connection from rank {p}"
                    ))
                    .into());
                }
                s.write_all(&hello(rank, n)).map_err(setup)?;
                streams[p] = Some(s);
                pending -= 1;
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    let missing = (0..rank).filter(|&p| streams[p].is_none()).collect();
                    return Err(TransportError::Timeout {
                        op: "accept",
                        secs: opts.connect_timeout.as_secs_f64(),
                        missing,
                    }
                    .into());
                }
                std::thread::sleep(Duration::from_millis(10));
            }
            Err(e) => return Err(setup(e).into()),
        }
    }

    let mut readers = Vec::with_capacity(n);
    let mut writers = Vec::with_capacity(n);
    for s in streams {
        match s {
            Some(s) => {
                s.set_nodelay(true).map_err(setup)?;
                s.set_read_timeout(Some(opts.timeout)).map_err(setup)?;
                s.set_write_timeout(Some(opts.timeout)).map_err(setup)?;
                let w = s.try_clone().map_err(setup)?;
                readers.push(Some(BufReader::new(s)));
                writers.push(Some(BufWriter::new(w)));
            }
            None => {
                readers.push(None);
                writers.push(None);
            }
        }
    }
    Ok(Endpoint::new(Box::new(TcpTransport {
        rank,
        n,
        readers,
        writers,
        timeout: opts.timeout,
    })))
}

fn setup(e: io::Error) -> TransportError {
    TransportError::Setup(e.to_string())
}

struct TcpTransport {
    rank: usize,
    n: usize,
    readers: Vec<Option<BufReader<TcpStream>>>,
    writers: Vec<Option<BufWriter<TcpStream>>>,
    timeout: Duration,
}

fn io_error(e: io::Error, op: Op, peer: usize, timeout: Duration) -> TransportError {
    match e.kind() {
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => TransportError::Timeout {
            op: op.name(),
            secs: timeout.as_secs_f64(),
            missing: vec![peer],
        },
        _ => TransportError::Disconnected {
            rank: peer,
            detail: e.to_string(),
        },
    }
}

fn write_frame(
    w: &mut BufWriter<TcpStream>,
    op: Op,
    seq: u64,
    data: &[u8],
    peer: usize,
    timeout: Duration,
) -> Result<(), TransportError> {
    let mut head = [0u8; 13];
    head[0] = op as u8;
    head[1..9].copy_from_slice(&seq.to_le_bytes());
    head[9..13].copy_from_slice(&(data.len() as u32).to_le_bytes());
    w.write_all(&head)
        .and_then(|_| w.write_all(data))
        .and_then(|_| w.flush())
        .map_err(|e| io_error(e, op, peer, timeout))
}

fn read_frame(
    r: &mut BufReader<TcpStream>,
    op: Op,
    seq: u64,
    peer: usize,
    timeout: Duration,
) -> Result<Vec<u8>, TransportError> {
    let mut head = [0u8; 13];
    r.read_exact(&mut head)
        .map_err(|e| io_error(e, op, peer, timeout))?;
    let got_op = Op::from_u8(head[0]);
    let got_seq = u64::from_le_bytes(head[1..9].try_into().expect("8 bytes"));
    let len = u32::from_le_bytes(head[9..13].try_into().expect("4 bytes"));
    if got_op != Some(op) || got_seq != seq {
        return Err(TransportError::Protocol {
            rank: peer,
            detail: format!(
                "expected {op:?} call {seq}, received op {} call {got_seq}",
                head[0]
            ),
        });
    }
    if len > MAX_FRAME {
        return Err(TransportError::Protocol {
            rank: peer,
            detail: format!("frame of {len} bytes exceeds limit"),
        });
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf)
        .map_err(|e| io_error(e, op, peer, timeout))?;
    Ok(buf)
}

impl Transport for TcpTransport {
    fn rank(&self) -> usize {
        self.rank
    }

    fn size(&self) -> usize {
        self.n
    }

    fn all_gather(&mut self, seq: u64, op: Op, data: &[u8]) -> Result<Vec<Vec<u8>>, TransportError> {
        let (rank, timeout) = (self.rank, self.timeout);
        let writers = &mut self.writers;
        let readers = &mut self.readers;
        std::thread::scope(|s| {
            let sender = s.spawn(move || -> Result<(), TransportError> {
                for (q, w) in writers.iter_mut().enumerate() {
                    if let Some(w) = w {
                        write_frame(w, op, seq, data, q, timeout)?;
                    }
                }
                Ok(())
            });
            let mut out = Vec::with_capacity(readers.len());
            let mut failure = None;
            for (q, r) in readers.iter_mut().enumerate() {
                match r {
                    None => out.push(if q == rank { data.to_vec() } else { Vec::new() }),
                    Some(r) => match read_frame(r, op, seq, q, timeout) {
                        Ok(b) => out.push(b),
                        Err(e) => {
                            failure = Some(e);
                            break;
                        }
                    },
                }
            }
            let sent = sender.join().expect("sender thread panicked");
            match failure {
                Some(e) => Err(e),
                None => sent.map(|_| out),
            }
        })
    }

    fn gather_root(&mut self, seq: u64, data: &[u8]) -> Result<Option<Vec<Vec<u8>>>, TransportError> {
        let op = Op::ReduceGather;
        if self.rank != 0 {
            let w = self.writers[0].as_mut().expect("link to rank 0");
            write_frame(w, op, seq, data, 0, self.timeout)?;
            return Ok(None);
        }
        let mut out = vec![data.to_vec()];
        for q in 1..self.n {
            let r = self.readers[q].as_mut().expect("link to peer");
            out.push(read_frame(r, op, seq, q, self.timeout)?);
        }
        Ok(Some(out))
    }

    fn broadcast_root(&mut self, seq: u64, data: Option<&[u8]>) -> Result<Vec<u8>, TransportError> {
        let op = Op::Broadcast;
        if self.rank == 0 {
            let data = data.expect("root supplies broadcast data");
            for q in 1..self.n {
                let w = self.writers[q].as_mut().expect("link to peer");
                write_frame(w, op, seq, data, q, self.timeout)?;
            }
            return Ok(data.to_vec());
        }
        let r = self.readers[0].as_mut().expect("link to rank 0");
        read_frame(r, op, seq, 0, self.timeout)
    }
}
