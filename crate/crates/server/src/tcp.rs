//! Stream transport: one reader and one writer thread per connection.

use std::io::{BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crate::protocol::{parse_payload, read_frame, write_frame, ProtocolError, WireMessage};
use crate::session::{ClientQueue, SessionHandle};

const POLL: Duration = Duration::from_millis(20);

pub struct TcpServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl TcpServer {
    pub fn spawn(addr: &str, session: SessionHandle, queue_capacity: usize) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let thread = {
            let stop = stop.clone();
            thread::Builder::new().name("accept".into()).spawn(move || {
                while !stop.load(Ordering::Relaxed) {
                    match listener.accept() {
                        Ok((stream, _)) => {
                            let _ = connect(stream, session.clone(), queue_capacity, stop.clone());
                        }
                        Err(_) => thread::sleep(POLL),
                    }
                }
            })?
        };
        Ok(Self {
            addr,
            stop,
            thread: Some(thread),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }
}

impl Drop for TcpServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn connect(
    stream: TcpStream,
    session: SessionHandle,
    capacity: usize,
    stop: Arc<AtomicBool>,
) -> std::io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    let queue = session.subscribe(capacity);
    for e in session.greeting() {
        queue.push(Arc::new(e));
    }
    let write_half = stream.try_clone()?;
    {
        let queue = queue.clone();
        thread::Builder::new()
            .name("client-writer".into())
            .spawn(move || write_loop(write_half, &queue, &stop))?;
    }
    thread::Builder::new()
        .name("client-reader".into())
        .spawn(move || {
            read_loop(stream, &session, &queue);
            queue.close();
        })?;
    Ok(())
}

fn write_loop(stream: TcpStream, queue: &ClientQueue, stop: &AtomicBool) {
    let mut w = BufWriter::new(stream.try_clone().expect("clone socket"));
    loop {
        match queue.pop(Duration::from_millis(200)) {
            Some(e) => {
                if write_frame(&mut w, &e).is_err() {
                    break;
                }
            }
            None if queue.is_closed() || stop.load(Ordering::Relaxed) => break,
            None => {}
        }
    }
    queue.close();
    let _ = stream.shutdown(std::net::Shutdown::Both);
}

fn read_loop(stream: TcpStream, session: &SessionHandle, queue: &ClientQueue) {
    let mut r = BufReader::new(stream);
    let reply_error = |e: &ProtocolError| {
        let code = match e {
            ProtocolError::FrameTooLarge(_) => "frame_too_large",
            ProtocolError::UnknownType(_) => "unknown_type",
            ProtocolError::UnsupportedVersion(_) => "unsupported_version",
            _ => "parse_error",
        };
        queue.push(Arc::new(session.control(WireMessage::error(code, e.to_string(), None))));
    };
    loop {
        match read_frame(&mut r) {
            Ok(None) | Err(_) => return,
            Ok(Some(Ok(payload))) => match parse_payload(&payload) {
                Ok(envelope) => session.handle(envelope, queue),
                Err(e) => reply_error(&e),
            },
            Ok(Some(Err(e))) => {
                // the stream position is lost; report and hang up
                reply_error(&e);
                return;
            }
        }
    }
}
