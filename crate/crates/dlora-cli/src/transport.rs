//! Frame transports backed by the standard library.
//!
//! A frame is self-delimiting (10-byte header carrying the payload length),
//! so TCP framing is: read the header, read the payload, hand the whole
//! buffer to the codec. Corrupt headers surface as transport errors here
//! and as protocol errors once decoded; either way the session aborts
//! instead of desynchronizing.

use dlora_core::protocol::{FrameTransport, TransportError, HEADER_LEN, MAX_PAYLOAD};
use std::io::{Read, Write};
use std::net::TcpStream;

pub struct TcpTransport {
    stream: TcpStream,
}

impl TcpTransport {
    pub fn new(stream: TcpStream) -> std::io::Result<Self> {
        stream.set_nodelay(true)?;
        Ok(TcpTransport { stream })
    }

    pub fn connect(addr: &str) -> std::io::Result<Self> {
        TcpTransport::new(TcpStream::connect(addr)?)
    }
}

impl FrameTransport for TcpTransport {
    fn send(&mut self, frame: &[u8]) -> Result<(), TransportError> {
        self.stream
            .write_all(frame)
            .map_err(|e| TransportError::Failed(e.to_string()))
    }

    fn recv(&mut self) -> Result<Vec<u8>, TransportError> {
        let mut header = [0u8; HEADER_LEN];
        let mut got = 0;
        while got < HEADER_LEN {
            match self.stream.read(&mut header[got..]) {
                Ok(0) if got == 0 => return Err(TransportError::Closed),
                Ok(0) => {
                    return Err(TransportError::Failed(String::from(
                        "connection closed mid-frame",
                    )))
                }
                Ok(n) => got += n,
                Err(e) => return Err(TransportError::Failed(e.to_string())),
            }
        }
        let len = u32::from_le_bytes(header[6..10].try_into().unwrap()) as usize;
        if len > MAX_PAYLOAD as usize {
            return Err(TransportError::Failed(format!(
                "declared payload of {len} bytes exceeds the frame limit"
            )));
        }
        let mut frame = vec![0u8; HEADER_LEN + len];
        frame[..HEADER_LEN].copy_from_slice(&header);
        self.stream
            .read_exact(&mut frame[HEADER_LEN..])
            .map_err(|e| TransportError::Failed(e.to_string()))?;
        Ok(frame)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dlora_core::protocol::{decode_frame, encode_frame, QuantBits, WireMessage};
    use std::net::TcpListener;

    #[test]
    fn frames_roundtrip_over_loopback() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut t = TcpTransport::new(stream).unwrap();
            // Echo two frames, then observe the close.
            for _ in 0..2 {
                let f = t.recv().unwrap();
                t.send(&f).unwrap();
            }
            assert!(matches!(t.recv(), Err(TransportError::Closed)));
        });

        let mut client = TcpTransport::connect(&addr.to_string()).unwrap();
        let msgs = [
            WireMessage::<f32>::Shutdown,
            WireMessage::<f32>::NormReport {
                norms: vec![1.0, 2.5, -0.0],
            },
        ];
        for msg in &msgs {
            let frame = encode_frame(msg, QuantBits::Bits32);
            client.send(&frame).unwrap();
            let back = client.recv().unwrap();
            assert_eq!(back, frame);
            assert_eq!(decode_frame::<f32>(&back).unwrap(), *msg);
        }
        drop(client);
        server.join().unwrap();
    }

    #[test]
    fn oversized_length_field_is_rejected_without_allocation() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut t = TcpTransport::new(stream).unwrap();
            t.recv()
        });
        let mut stream = TcpStream::connect(addr).unwrap();
        let mut bogus = Vec::new();
        bogus.extend_from_slice(b"DLOR");
        bogus.push(1);
        bogus.push(10);
        bogus.extend_from_slice(&u32::MAX.to_le_bytes());
        stream.write_all(&bogus).unwrap();
        let r = server.join().unwrap();
        assert!(matches!(r, Err(TransportError::Failed(_))));
    }
}
