//! Length-prefixed binary protocol for running the store out of process.
//!
//! Every frame is `len u32 | body`, where `len` counts body bytes. Bodies start with
//! `version u8 | tag u8`; all integers and reals are little-endian.
//!
//! | tag | message    | payload                                              |
//! |-----|------------|------------------------------------------------------|
//! | 1   | FETCH      | `n u32`, then `n` keys as `table u32, row u64`       |
//! | 2   | FETCH_RESP | `n u32, dim u32`, then `n * dim` values `f32`        |
//! | 3   | WRITE      | `n u32, dim u32`, then `n` of `table u32, row u64, dim * f32` |
//! | 4   | ACK        | `n u32` rows written                                  |
//! | 5   | ERROR      | `len u32`, then UTF-8 message                         |

use std::io::{self, Read, Write};

use super::ShardedStore;
use crate::error::{Error, Result};
use crate::trace::EmbeddingKey;

pub const PROTOCOL_VERSION: u8 = 1;
/// Upper bound on a frame body; larger lengths are rejected before allocating.
pub const MAX_FRAME: u32 = 1 << 30;

const TAG_FETCH: u8 = 1;
const TAG_FETCH_RESP: u8 = 2;
const TAG_WRITE: u8 = 3;
const TAG_ACK: u8 = 4;
const TAG_ERROR: u8 = 5;

#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    Fetch(Vec<EmbeddingKey>),
    FetchResp { dim: u32, values: Vec<Vec<f32>> },
    Write { dim: u32, entries: Vec<(EmbeddingKey, Vec<f32>)> },
    Ack(u32),
    Error(String),
}

fn put_key(buf: &mut Vec<u8>, k: EmbeddingKey) {
    buf.extend_from_slice(&k.table.to_le_bytes());
    buf.extend_from_slice(&k.row.to_le_bytes());
}

impl Message {
    /// Full frame including the length prefix.
    pub fn encode(&self) -> Vec<u8> {
        let mut body = vec![PROTOCOL_VERSION];
        match self {
            Message::Fetch(keys) => {
                body.push(TAG_FETCH);
                body.extend_from_slice(&(keys.len() as u32).to_le_bytes());
                keys.iter().for_each(|k| put_key(&mut body, *k));
            }
            Message::FetchResp { dim, values } => {
                body.push(TAG_FETCH_RESP);
                body.extend_from_slice(&(values.len() as u32).to_le_bytes());
                body.extend_from_slice(&dim.to_le_bytes());
                values.iter().flatten().for_each(|v| body.extend_from_slice(&v.to_le_bytes()));
            }
            Message::Write { dim, entries } => {
                body.push(TAG_WRITE);
                body.extend_from_slice(&(entries.len() as u32).to_le_bytes());
                body.extend_from_slice(&dim.to_le_bytes());
                for (k, v) in entries {
                    put_key(&mut body, *k);
                    v.iter().for_each(|x| body.extend_from_slice(&x.to_le_bytes()));
                }
            }
            Message::Ack(n) => {
                body.push(TAG_ACK);
                body.extend_from_slice(&n.to_le_bytes());
            }
            Message::Error(msg) => {
                body.push(TAG_ERROR);
                body.extend_from_slice(&(msg.len() as u32).to_le_bytes());
                body.extend_from_slice(msg.as_bytes());
            }
        }
        let mut frame = (body.len() as u32).to_le_bytes().to_vec();
        frame.extend_from_slice(&body);
        frame
    }

    pub fn decode(body: &[u8]) -> Result<Self> {
        let mut cur = Cursor { buf: body, pos: 0 };
        let version = cur.u8()?;
        if version != PROTOCOL_VERSION {
            return Err(Error::Protocol(format!("unsupported version {version}")));
        }
        let msg = match cur.u8()? {
            TAG_FETCH => {
                let n = cur.u32()?;
                cur.expect_remaining(n as usize * 12)?;
                Message::Fetch((0..n).map(|_| cur.key()).collect::<Result<_>>()?)
            }
            TAG_FETCH_RESP => {
                let n = cur.u32()?;
                let dim = cur.u32()?;
                cur.expect_remaining(n as usize * dim as usize * 4)?;
                let values = (0..n).map(|_| cur.f32s(dim)).collect::<Result<_>>()?;
                Message::FetchResp { dim, values }
            }
            TAG_WRITE => {
                let n = cur.u32()?;
                let dim = cur.u32()?;
                cur.expect_remaining(n as usize * (12 + dim as usize * 4))?;
                let entries = (0..n).map(|_| Ok((cur.key()?, cur.f32s(dim)?))).collect::<Result<_>>()?;
                Message::Write { dim, entries }
            }
            TAG_ACK => Message::Ack(cur.u32()?),
            TAG_ERROR => {
                let n = cur.u32()? as usize;
                let bytes = cur.take(n)?;
                Message::Error(String::from_utf8(bytes.to_vec()).map_err(|_| Error::Protocol("error text is not UTF-8".into()))?)
            }
            tag => return Err(Error::Protocol(format!("unknown tag {tag}"))),
        };
        if cur.pos != body.len() {
            return Err(Error::Protocol("trailing bytes".into()));
        }
        Ok(msg)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::Protocol("truncated body".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn expect_remaining(&self, n: usize) -> Result<()> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Protocol("truncated body".into()));
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn key(&mut self) -> Result<EmbeddingKey> {
        let table = self.u32()?;
        let row = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        Ok(EmbeddingKey::new(table, row))
    }

    fn f32s(&mut self, dim: u32) -> Result<Vec<f32>> {
        (0..dim).map(|_| Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))).collect()
    }
}

/// Reads one frame; `None` on clean end of stream.
pub fn read_message(r: &mut impl Read) -> Result<Option<Message>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_le_bytes(len);
    if len > MAX_FRAME {
        return Err(Error::Protocol(format!("frame of {len} bytes exceeds limit")));
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body)?;
    Message::decode(&body).map(Some)
}

pub fn write_message(w: &mut impl Write, msg: &Message) -> Result<()> {
    w.write_all(&msg.encode())?;
    w.flush()?;
    Ok(())
}

/// Answers requests on one connection until the peer closes it.
pub fn serve(store: &ShardedStore, mut conn: impl Read + Write) -> Result<()> {
    let dim = store.schema().emb_dim as u32;
    while let Some(msg) = read_message(&mut conn)? {
        let reply = match msg {
            Message::Fetch(keys) => match store.fetch(&keys) {
                Ok(values) => Message::FetchResp { dim, values },
                Err(e) => Message::Error(e.to_string()),
            },
            Message::Write { entries, .. } => match store.write_back(&entries) {
                Ok(()) => Message::Ack(entries.len() as u32),
                Err(e) => Message::Error(e.to_string()),
            },
            other => Message::Error(format!("unexpected request {other:?}")),
        };
        write_message(&mut conn, &reply)?;
    }
    Ok(())
}

/// Client side of [`serve`].
pub struct StoreClient<S> {
    conn: S,
}

impl<S: Read + Write> StoreClient<S> {
    pub fn new(conn: S) -> Self {
        Self { conn }
    }

    fn call(&mut self, msg: &Message) -> Result<Message> {
        write_message(&mut self.conn, msg)?;
        match read_message(&mut self.conn)? {
            Some(Message::Error(e)) => Err(Error::Protocol(format!("server error: {e}"))),
            Some(m) => Ok(m),
            None => Err(Error::Protocol("connection closed".into())),
        }
    }

    pub fn fetch(&mut self, keys: &[EmbeddingKey]) -> Result<Vec<Vec<f32>>> {
        match self.call(&Message::Fetch(keys.to_vec()))? {
            Message::FetchResp { values, .. } if values.len() == keys.len() => Ok(values),
            other => Err(Error::Protocol(format!("unexpected reply {other:?}"))),
        }
    }

    pub fn write_back(&mut self, entries: &[(EmbeddingKey, Vec<f32>)]) -> Result<()> {
        let dim = entries.first().map_or(0, |(_, v)| v.len() as u32);
        match self.call(&Message::Write { dim, entries: entries.to_vec() })? {
            Message::Ack(n) if n as usize == entries.len() => Ok(()),
            other => Err(Error::Protocol(format!("unexpected reply {other:?}"))),
        }
    }

    pub fn into_inner(self) -> S {
        self.conn
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::Schema;
    use proptest::prelude::*;

    #[test]
    fn fetch_frame_layout() {
        let frame = Message::Fetch(vec![EmbeddingKey::new(2, 7)]).encode();
        let expected: Vec<u8> = [
            &18u32.to_le_bytes()[..],
            &[1, 1],
            &1u32.to_le_bytes(),
            &2u32.to_le_bytes(),
            &7u64.to_le_bytes(),
        ]
        .concat();
        assert_eq!(frame, expected);
    }

    proptest! {
        #[test]
        fn write_messages_round_trip(
            rows in proptest::collection::vec((any::<u32>(), any::<u64>(), any::<[u32; 3]>()), 0..20)
        ) {
            let entries: Vec<_> = rows
                .iter()
                .map(|(t, r, v)| (EmbeddingKey::new(*t, *r), v.iter().map(|b| f32::from_bits(*b)).collect::<Vec<_>>()))
                .collect();
            let msg = Message::Write { dim: 3, entries };
            let frame = msg.encode();
            let back = read_message(&mut &frame[..]).unwrap().unwrap();
            // compare bitwise (NaN payloads included)
            prop_assert_eq!(back.encode(), frame);
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(Message::decode(&[2, TAG_ACK, 0, 0, 0, 0]).is_err(), "version");
        assert!(Message::decode(&[1, 99]).is_err(), "tag");
        assert!(Message::decode(&[1, TAG_FETCH, 5, 0, 0, 0]).is_err(), "truncated");
        assert!(Message::decode(&[1, TAG_ACK, 0, 0, 0, 0, 9]).is_err(), "trailing");
        let huge = (MAX_FRAME + 1).to_le_bytes();
        assert!(read_message(&mut &huge[..]).is_err());
        assert!(read_message(&mut &[][..]).unwrap().is_none());
    }

    #[test]
    fn client_server_over_socket_pair() {
        use std::os::unix::net::UnixStream;
        let store = ShardedStore::new(Schema::new(vec![100], 0, 3).unwrap(), 2, 5).unwrap();
        let (client_end, server_end) = UnixStream::pair().unwrap();
        std::thread::scope(|s| {
            s.spawn(|| serve(&store, server_end).unwrap());
            let mut client = StoreClient::new(client_end);
            let keys = [EmbeddingKey::new(0, 4), EmbeddingKey::new(0, 9)];
            assert_eq!(client.fetch(&keys).unwrap(), store.fetch(&keys).unwrap());
            client.write_back(&[(keys[0], vec![1.0, 2.0, 3.0])]).unwrap();
            assert_eq!(client.fetch(&keys[..1]).unwrap()[0], vec![1.0, 2.0, 3.0]);
            assert!(client.fetch(&[EmbeddingKey::new(0, 100)]).is_err());
            drop(client);
        });
        assert_eq!(store.fetch(&[EmbeddingKey::new(0, 4)]).unwrap()[0], vec![1.0, 2.0, 3.0]);
    }
}
