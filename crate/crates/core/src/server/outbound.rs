//! Per-device outbound command queue.

use std::collections::{HashSet, VecDeque};
use std::sync::Mutex;

use tokio::sync::Notify;

use crate::protocol::ServerCommand;

pub const OUTBOUND_CAPACITY: usize = 1024;

/// Identity of a coalescable command: later commands with the same key
/// supersede earlier ones.
#[derive(Debug, PartialEq, Eq, Hash)]
enum CoalesceKey {
    Highlight(u32),
    LineLocal(u32, u32),
    LineToPoint(u32, u64, u64),
}

fn coalesce_key(cmd: &ServerCommand) -> Option<CoalesceKey> {
    match *cmd {
        ServerCommand::Highlight { resource_id, .. } => Some(CoalesceKey::Highlight(resource_id)),
        ServerCommand::LineLocal { from_resource, to_resource, .. } => {
            Some(CoalesceKey::LineLocal(from_resource, to_resource))
        }
        ServerCommand::LineToPoint { resource_id, x_px, y_px, .. } => {
            Some(CoalesceKey::LineToPoint(resource_id, x_px.to_bits(), y_px.to_bits()))
        }
        _ => None,
    }
}

#[derive(Debug, Default)]
struct Inner {
    queue: VecDeque<ServerCommand>,
    closed: bool,
    coalesced: u64,
}

/// FIFO of commands for one session. Once it holds `capacity` commands,
/// superseded highlight and line commands are dropped; show, hide and
/// definitions are always kept.
#[derive(Debug)]
pub struct OutboundQueue {
    inner: Mutex<Inner>,
    capacity: usize,
    notify: Notify,
}

impl Default for OutboundQueue {
    fn default() -> Self {
        Self::new(OUTBOUND_CAPACITY)
    }
}

impl OutboundQueue {
    pub fn new(capacity: usize) -> Self {
        Self { inner: Mutex::new(Inner::default()), capacity, notify: Notify::new() }
    }

    pub fn push(&self, cmd: ServerCommand) {
        let mut g = self.inner.lock().expect("outbound queue poisoned");
        if g.closed {
            return;
        }
        if g.queue.len() >= self.capacity {
            let before = g.queue.len();
            coalesce(&mut g.queue);
            g.coalesced += (before - g.queue.len()) as u64;
        }
        g.queue.push_back(cmd);
        drop(g);
        self.notify.notify_one();
    }

    /// Stops accepting commands; whatever is queued still drains.
    pub fn close(&self) {
        self.inner.lock().expect("outbound queue poisoned").closed = true;
        self.notify.notify_one();
    }

    /// Everything queued so far, or `None` once closed and empty.
    pub async fn next_batch(&self) -> Option<Vec<ServerCommand>> {
        loop {
            {
                let mut g = self.inner.lock().expect("outbound queue poisoned");
                if !g.queue.is_empty() {
                    return Some(g.queue.drain(..).collect());
                }
                if g.closed {
                    return None;
                }
            }
            self.notify.notified().await;
        }
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("outbound queue poisoned").queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn coalesced(&self) -> u64 {
        self.inner.lock().expect("outbound queue poisoned").coalesced
    }

    pub fn snapshot(&self) -> Vec<ServerCommand> {
        self.inner.lock().expect("outbound queue poisoned").queue.iter().cloned().collect()
    }
}

/// Keeps only the newest command per coalesce key, preserving order.
fn coalesce(queue: &mut VecDeque<ServerCommand>) {
    let mut seen = HashSet::new();
    let mut keep = vec![true; queue.len()];
    for (i, cmd) in queue.iter().enumerate().rev() {
        if let Some(k) = coalesce_key(cmd) {
            if !seen.insert(k) {
                keep[i] = false;
            }
        }
    }
    let mut i = 0;
    queue.retain(|_| {
        let k = keep[i];
        i += 1;
        k
    });
}
