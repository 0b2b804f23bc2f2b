//! Ordered point-to-point channels between simulated workers.

use std::sync::mpsc::{channel, Receiver, Sender};

use crate::error::{Error, Result};
use crate::math::DenseMatrix;
use crate::sparsify::SparseGradient;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageKind {
    AllGather,
    AllReduce,
    RingPass,
    ScalarReduce,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Dense(DenseMatrix),
    Sparse(SparseGradient),
    Scalars(Vec<f32>),
}

impl Payload {
    /// Bytes this payload would occupy on the wire.
    pub fn wire_bytes(&self) -> u64 {
        match self {
            Payload::Dense(m) => 4 * m.as_slice().len() as u64,
            Payload::Sparse(s) => s.wire_len() as u64,
            Payload::Scalars(v) => 4 * v.len() as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollectiveMessage {
    pub kind: MessageKind,
    /// Rank the payload originated from.
    pub origin: usize,
    pub payload: Payload,
    /// Strictly increasing per channel.
    pub step_tag: u64,
}

pub struct OrderedSender {
    tx: Sender<CollectiveMessage>,
    next_tag: u64,
}

pub struct OrderedReceiver {
    rx: Receiver<CollectiveMessage>,
    last_tag: Option<u64>,
}

pub fn ordered_channel() -> (OrderedSender, OrderedReceiver) {
    let (tx, rx) = channel();
    (
        OrderedSender { tx, next_tag: 0 },
        OrderedReceiver { rx, last_tag: None },
    )
}

impl OrderedSender {
    pub fn send(&mut self, kind: MessageKind, origin: usize, payload: Payload) -> Result<()> {
        let msg = CollectiveMessage {
            kind,
            origin,
            payload,
            step_tag: self.next_tag,
        };
        self.next_tag += 1;
        self.tx
            .send(msg)
            .map_err(|_| Error::Io("peer hung up".into()))
    }
}

impl OrderedReceiver {
    /// Blocks for the next message; fails if tags arrive out of order.
    pub fn recv(&mut self) -> Result<CollectiveMessage> {
        let msg = self
            .rx
            .recv()
            .map_err(|_| Error::Io("peer hung up".into()))?;
        if let Some(last) = self.last_tag {
            if msg.step_tag <= last {
                return Err(Error::Format(format!(
                    "message tag {} arrived after {last}",
                    msg.step_tag
                )));
            }
        }
        self.last_tag = Some(msg.step_tag);
        Ok(msg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_increase_per_channel() {
        let (mut tx, mut rx) = ordered_channel();
        for i in 0..3 {
            tx.send(MessageKind::ScalarReduce, 0, Payload::Scalars(vec![i as f32]))
                .unwrap();
        }
        let tags: Vec<u64> = (0..3).map(|_| rx.recv().unwrap().step_tag).collect();
        assert_eq!(tags, vec![0, 1, 2]);
    }

    #[test]
    fn hung_up_peer_is_an_error() {
        let (tx, mut rx) = ordered_channel();
        drop(tx);
        assert!(rx.recv().is_err());
    }
}
