//! Classical side channel between applications: each message is a 4-byte
//! big-endian length followed by the payload.

use std::net::SocketAddr;

use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};

/// Messages above this size are refused.
pub const MAX_MESSAGE: u32 = 1 << 20;

pub struct ClassicalChannel {
    stream: TcpStream,
}

impl ClassicalChannel {
    pub async fn connect(addr: SocketAddr) -> std::io::Result<Self> {
        let stream = TcpStream::connect(addr).await?;
        stream.set_nodelay(true)?;
        Ok(ClassicalChannel { stream })
    }

    /// Waits for one peer on `listener`.
    pub async fn accept(listener: &TcpListener) -> std::io::Result<Self> {
        let (stream, _) = listener.accept().await?;
        stream.set_nodelay(true)?;
        Ok(ClassicalChannel { stream })
    }

    /// Both ends of a fresh loopback connection.
    pub async fn pair() -> std::io::Result<(Self, Self)> {
        let listener = TcpListener::bind("127.0.0.1:0").await?;
        let a = Self::connect(listener.local_addr()?).await?;
        let b = Self::accept(&listener).await?;
        Ok((a, b))
    }

    pub async fn send(&mut self, payload: &[u8]) -> std::io::Result<()> {
        let len = u32::try_from(payload.len())
            .ok()
            .filter(|l| *l <= MAX_MESSAGE)
            .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidInput, "classical message too large"))?;
        let mut frame = Vec::with_capacity(4 + payload.len());
        frame.extend_from_slice(&len.to_be_bytes());
        frame.extend_from_slice(payload);
        self.stream.write_all(&frame).await
    }

    pub async fn recv(&mut self) -> std::io::Result<Vec<u8>> {
        let len = self.stream.read_u32().await?;
        if len > MAX_MESSAGE {
            return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "classical message too large"));
        }
        let mut buf = vec![0u8; len as usize];
        self.stream.read_exact(&mut buf).await?;
        Ok(buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[tokio::test]
    async fn frames_round_trip() {
        let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        let server = tokio::spawn(async move {
            let mut ch = ClassicalChannel::accept(&listener).await.unwrap();
            let a = ch.recv().await.unwrap();
            let b = ch.recv().await.unwrap();
            ch.send(&[a, b].concat()).await.unwrap();
        });
        let mut ch = ClassicalChannel::connect(addr).await.unwrap();
        ch.send(b"01").await.unwrap();
        ch.send(b"").await.unwrap();
        assert_eq!(ch.recv().await.unwrap(), b"01");
        server.await.unwrap();
    }

    #[tokio::test]
    async fn pair_is_bidirectional() {
        let (mut a, mut b) = ClassicalChannel::pair().await.unwrap();
        a.send(b"ping").await.unwrap();
        assert_eq!(b.recv().await.unwrap(), b"ping");
        b.send(b"pong").await.unwrap();
        assert_eq!(a.recv().await.unwrap(), b"pong");
    }

    #[tokio::test]
    async fn wire_format_is_length_prefixed() {
        let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        let server = tokio::spawn(async move {
            let (mut s, _) = listener.accept().await.unwrap();
            let mut raw = [0u8; 7];
            s.read_exact(&mut raw).await.unwrap();
            raw
        });
        let mut ch = ClassicalChannel::connect(addr).await.unwrap();
        ch.send(&[9, 8, 7]).await.unwrap();
        assert_eq!(server.await.unwrap(), [0, 0, 0, 3, 9, 8, 7]);
    }
}
