//! Actor-style message bus.
//!
//! Topics follow the same segment grammar as store keys. A topic may have
//! any number of consumer groups and broadcast subscribers:
//!
//! - every group receives each publish exactly once, handed to its members
//!   round-robin in join order;
//! - every broadcast subscriber receives its own copy;
//! - with no subscriber at all, the envelope waits in a bounded per-topic
//!   backlog and is replayed to the next subscriber.
//!
//! Delivery is at-most-once and FIFO per topic. Consumers run on a single
//! dispatch loop, so no two deliveries to one consumer ever overlap.

mod envelope;
pub mod transport;

use std::cell::Cell;
use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;

use log::{debug, warn};
use parking_lot::{Condvar, Mutex};
use thiserror::Error;

use crate::clock::{Clock, Tick};
use crate::store::{KeyError, StateKey};

pub use envelope::{Envelope, MessageId, MessageKind};

/// Self-describing payload tree.
pub type Document = serde_json::Value;
/// Topic names share the key grammar.
pub type Topic = StateKey;

pub const MAX_PAYLOAD_LEN: usize = 1 << 20;
pub const BACKLOG_CAPACITY: usize = 1024;

#[derive(Debug, Error)]
pub enum BusError {
    #[error("payload of {len} bytes exceeds the {MAX_PAYLOAD_LEN} byte limit")]
    PayloadTooLarge { len: usize },
    #[error("bus is closed")]
    BusClosed,
    #[error("invalid envelope: {0}")]
    InvalidEnvelope(String),
    #[error("message id {0} was already published")]
    DuplicateMessageId(MessageId),
    #[error("consumer {consumer_id} is already subscribed to {topic}")]
    DuplicateConsumer { consumer_id: String, topic: Topic },
    #[error("request timed out at tick {at}")]
    Timeout { at: Tick },
    #[error("timeout must be positive")]
    InvalidTimeout,
    #[error("request() cannot be called from inside a consumer callback")]
    NestedRequest,
    #[error("unknown subscription")]
    UnknownSubscription,
    #[error(transparent)]
    Topic(#[from] KeyError),
}

/// Receives envelopes from the bus. Calls for one consumer never overlap.
pub trait Consumer: Send + Sync {
    fn deliver(&self, bus: &MessageBus, envelope: Envelope);
}

impl<F> Consumer for F
where
    F: Fn(&MessageBus, Envelope) + Send + Sync,
{
    fn deliver(&self, bus: &MessageBus, envelope: Envelope) {
        self(bus, envelope)
    }
}

/// Pull-style consumer backed by a channel.
pub struct Mailbox {
    tx: Mutex<Sender<Envelope>>,
}

impl Mailbox {
    pub fn new() -> (Arc<Self>, Receiver<Envelope>) {
        let (tx, rx) = mpsc::channel();
        (Arc::new(Self { tx: Mutex::new(tx) }), rx)
    }
}

impl Consumer for Mailbox {
    fn deliver(&self, _bus: &MessageBus, envelope: Envelope) {
        // A dropped receiver just means nobody is reading any more.
        let _ = self.tx.lock().send(envelope);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DeliveryReceipt {
    /// Consumer groups that received the envelope.
    pub groups: usize,
    /// Broadcast subscribers that received the envelope.
    pub broadcast: usize,
    pub backlogged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SubscriptionId(u64);

#[derive(Clone)]
struct Member {
    sub: u64,
    consumer_id: String,
    consumer: Arc<dyn Consumer>,
}

struct Group {
    id: String,
    members: Vec<Member>,
    cursor: usize,
}

impl Group {
    fn next(&mut self) -> &Member {
        let idx = self.cursor % self.members.len();
        self.cursor = (idx + 1) % self.members.len();
        &self.members[idx]
    }
}

#[derive(Default)]
struct TopicState {
    groups: Vec<Group>,
    broadcast: Vec<Member>,
    backlog: VecDeque<Envelope>,
}

impl TopicState {
    fn has_consumer(&self, consumer_id: &str) -> bool {
        self.broadcast.iter().any(|m| m.consumer_id == consumer_id)
            || self
                .groups
                .iter()
                .flat_map(|g| &g.members)
                .any(|m| m.consumer_id == consumer_id)
    }
}

struct Delivery {
    consumer: Arc<dyn Consumer>,
    envelope: Envelope,
}

#[derive(Default)]
struct BusState {
    topics: HashMap<Topic, TopicState>,
    run_queue: VecDeque<Delivery>,
    pumping: bool,
    next_seq: u64,
    next_sub: u64,
    published: HashSet<MessageId>,
    /// Outstanding requests; the slot holds the first matching reply.
    pending: HashMap<MessageId, Option<Envelope>>,
    closed: bool,
}

struct Shared {
    state: Mutex<BusState>,
    idle: Condvar,
    clock: Clock,
    nonce: u64,
}

thread_local! {
    static IN_DISPATCH: Cell<bool> = const { Cell::new(false) };
}

/// Cheaply clonable handle to one bus.
#[derive(Clone)]
pub struct MessageBus {
    shared: Arc<Shared>,
}

impl Default for MessageBus {
    fn default() -> Self {
        Self::new(Clock::new(), 1)
    }
}

impl MessageBus {
    /// `nonce` fills the upper 64 bits of every message id so ids from
    /// different buses do not collide.
    pub fn new(clock: Clock, nonce: u64) -> Self {
        Self {
            shared: Arc::new(Shared {
                state: Mutex::new(BusState::default()),
                idle: Condvar::new(),
                clock,
                nonce,
            }),
        }
    }

    pub fn clock(&self) -> &Clock {
        &self.shared.clock
    }

    pub fn next_message_id(&self) -> MessageId {
        let mut st = self.shared.state.lock();
        st.next_seq += 1;
        MessageId(((self.shared.nonce as u128) << 64) | st.next_seq as u128)
    }

    pub fn envelope(
        &self,
        topic: Topic,
        sender_id: &str,
        kind: MessageKind,
        payload: Document,
    ) -> Envelope {
        Envelope::new(self.next_message_id(), topic, sender_id, kind, payload)
    }

    /// Builds the reply to `request`.
    pub fn reply_to(&self, request: &Envelope, sender_id: &str, payload: Document) -> Envelope {
        let mut env = self.envelope(request.topic.clone(), sender_id, MessageKind::Reply, payload);
        env.correlation_id = Some(request.message_id);
        env
    }

    pub fn publish_event(
        &self,
        topic: &str,
        sender_id: &str,
        payload: Document,
    ) -> Result<DeliveryReceipt, BusError> {
        let topic = Topic::parse(topic)?;
        let env = self.envelope(topic, sender_id, MessageKind::Event, payload);
        self.publish(env)
    }

    pub fn publish(&self, envelope: Envelope) -> Result<DeliveryReceipt, BusError> {
        envelope.validate()?;
        let len = transport::encode_document(&envelope.payload).len();
        if len > MAX_PAYLOAD_LEN {
            return Err(BusError::PayloadTooLarge { len });
        }
        let receipt = {
            let mut st = self.shared.state.lock();
            if st.closed {
                return Err(BusError::BusClosed);
            }
            if !st.published.insert(envelope.message_id) {
                return Err(BusError::DuplicateMessageId(envelope.message_id));
            }
            if envelope.kind == MessageKind::Reply {
                // Replies go straight back to the requester.
                let corr = envelope.correlation_id.expect("validated");
                match st.pending.get_mut(&corr) {
                    Some(slot @ None) => {
                        *slot = Some(envelope);
                        self.shared.idle.notify_all();
                    }
                    _ => debug!("discarding late or unsolicited reply to {corr}"),
                }
                return Ok(DeliveryReceipt::default());
            }
            Self::route(&mut st, envelope)
        };
        self.pump();
        Ok(receipt)
    }

    fn route(st: &mut BusState, envelope: Envelope) -> DeliveryReceipt {
        let BusState {
            topics, run_queue, ..
        } = st;
        let ts = topics.entry(envelope.topic.clone()).or_default();
        let mut receipt = DeliveryReceipt::default();
        for group in ts.groups.iter_mut().filter(|g| !g.members.is_empty()) {
            let member = group.next();
            run_queue.push_back(Delivery {
                consumer: member.consumer.clone(),
                envelope: envelope.clone(),
            });
            receipt.groups += 1;
        }
        for member in &ts.broadcast {
            run_queue.push_back(Delivery {
                consumer: member.consumer.clone(),
                envelope: envelope.clone(),
            });
            receipt.broadcast += 1;
        }
        if receipt.groups == 0 && receipt.broadcast == 0 {
            if ts.backlog.len() >= BACKLOG_CAPACITY {
                if let Some(dropped) = ts.backlog.pop_front() {
                    warn!(
                        "backlog for {} full, dropping message {}",
                        dropped.topic, dropped.message_id
                    );
                }
            }
            ts.backlog.push_back(envelope);
            receipt.backlogged = true;
        }
        receipt
    }

    /// Joins `consumer` to `topic`, either in consumer group `group` or as a
    /// broadcast subscriber. Any backlog for the topic is handed to the new
    /// subscriber in publish order.
    pub fn subscribe(
        &self,
        topic: &str,
        group: Option<&str>,
        consumer_id: &str,
        consumer: Arc<dyn Consumer>,
    ) -> Result<SubscriptionId, BusError> {
        let topic = Topic::parse(topic)?;
        let id = {
            let mut st = self.shared.state.lock();
            if st.closed {
                return Err(BusError::BusClosed);
            }
            st.next_sub += 1;
            let sub = st.next_sub;
            let BusState {
                topics, run_queue, ..
            } = &mut *st;
            let ts = topics.entry(topic.clone()).or_default();
            if ts.has_consumer(consumer_id) {
                return Err(BusError::DuplicateConsumer {
                    consumer_id: consumer_id.to_string(),
                    topic,
                });
            }
            let member = Member {
                sub,
                consumer_id: consumer_id.to_string(),
                consumer: consumer.clone(),
            };
            match group {
                Some(gid) => match ts.groups.iter_mut().find(|g| g.id == gid) {
                    Some(g) => g.members.push(member),
                    None => ts.groups.push(Group {
                        id: gid.to_string(),
                        members: vec![member],
                        cursor: 0,
                    }),
                },
                None => ts.broadcast.push(member),
            }
            for envelope in ts.backlog.drain(..) {
                run_queue.push_back(Delivery {
                    consumer: consumer.clone(),
                    envelope,
                });
            }
            SubscriptionId(sub)
        };
        self.pump();
        Ok(id)
    }

    pub fn unsubscribe(&self, id: SubscriptionId) -> Result<(), BusError> {
        let mut st = self.shared.state.lock();
        for ts in st.topics.values_mut() {
            if let Some(pos) = ts.broadcast.iter().position(|m| m.sub == id.0) {
                ts.broadcast.remove(pos);
                return Ok(());
            }
            for g in &mut ts.groups {
                if let Some(pos) = g.members.iter().position(|m| m.sub == id.0) {
                    g.members.remove(pos);
                    if pos < g.cursor {
                        g.cursor -= 1;
                    }
                    if g.members.is_empty() {
                        g.cursor = 0;
                    } else {
                        g.cursor %= g.members.len();
                    }
                    return Ok(());
                }
            }
        }
        Err(BusError::UnknownSubscription)
    }

    /// Publishes a REQUEST and returns the first REPLY correlated with it.
    ///
    /// Replies must be produced while the bus dispatches the request (by a
    /// consumer callback). If the bus goes idle without one, the logical
    /// clock is moved to the deadline and the call times out.
    pub fn request(
        &self,
        topic: &str,
        sender_id: &str,
        payload: Document,
        timeout: Tick,
    ) -> Result<Envelope, BusError> {
        if timeout == 0 {
            return Err(BusError::InvalidTimeout);
        }
        if IN_DISPATCH.with(Cell::get) {
            return Err(BusError::NestedRequest);
        }
        let topic = Topic::parse(topic)?;
        let deadline = self.shared.clock.now().saturating_add(timeout);
        let env = self.envelope(topic, sender_id, MessageKind::Request, payload);
        let id = env.message_id;
        self.shared.state.lock().pending.insert(id, None);
        if let Err(e) = self.publish(env) {
            self.shared.state.lock().pending.remove(&id);
            return Err(e);
        }
        let mut st = self.shared.state.lock();
        loop {
            if let Some(Some(_)) = st.pending.get(&id) {
                let reply = st.pending.remove(&id).flatten().expect("checked");
                return Ok(reply);
            }
            if st.closed {
                st.pending.remove(&id);
                return Err(BusError::BusClosed);
            }
            if !st.pumping && st.run_queue.is_empty() {
                break;
            }
            self.shared.idle.wait(&mut st);
        }
        st.pending.remove(&id);
        drop(st);
        self.shared.clock.advance_to(deadline);
        Err(BusError::Timeout { at: deadline })
    }

    pub fn backlog_len(&self, topic: &str) -> usize {
        let Ok(topic) = Topic::parse(topic) else {
            return 0;
        };
        let st = self.shared.state.lock();
        st.topics.get(&topic).map_or(0, |t| t.backlog.len())
    }

    pub fn close(&self) {
        let mut st = self.shared.state.lock();
        st.closed = true;
        st.run_queue.clear();
        self.shared.idle.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.shared.state.lock().closed
    }

    /// Runs queued deliveries until the queue is empty. Only one thread
    /// dispatches at a time; others return immediately and leave their work
    /// to it.
    fn pump(&self) {
        {
            let mut st = self.shared.state.lock();
            if st.pumping {
                return;
            }
            st.pumping = true;
        }
        let _guard = PumpGuard::new(self);
        loop {
            let next = self.shared.state.lock().run_queue.pop_front();
            match next {
                Some(d) => d.consumer.deliver(self, d.envelope),
                None => break,
            }
        }
    }
}

struct PumpGuard<'a> {
    bus: &'a MessageBus,
}

impl<'a> PumpGuard<'a> {
    fn new(bus: &'a MessageBus) -> Self {
        IN_DISPATCH.with(|f| f.set(true));
        Self { bus }
    }
}

impl Drop for PumpGuard<'_> {
    fn drop(&mut self) {
        IN_DISPATCH.with(|f| f.set(false));
        let mut st = self.bus.shared.state.lock();
        st.pumping = false;
        self.bus.shared.idle.notify_all();
    }
}
