//! The collaborative training session: one shared server model, one local
//! model per client, and the six-message round
//!
//! 1. server → client `TriggerDiffusion`
//! 2. client samples one training pair per image and routes it by owner
//! 3. client → server `NoisedBatch` with the server-owned pairs
//! 4. server trains the shared model and replies `ServerTrainAck`
//! 5. server → client `PartialDenoised` (boundary estimates, measurement only)
//! 6. client trains its local model on the client-owned pairs, replies `ClientDone`
//!
//! Server and client are explicit state machines; a message arriving in
//! the wrong state is rejected and leaves the state untouched.

use std::cell::RefCell;
use std::collections::VecDeque;
use std::net::{TcpListener, ToSocketAddrs};
use std::rc::Rc;
use std::sync::{mpsc, Arc};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::cut::CutConfig;
use super::transport::{TcpTransport, Transport, TransportError};
use super::wire::{decode, encode, read_frame, Envelope, Message, WireError};
use crate::derive_seed;
use crate::diffusion::{project_to, NoiseSample, VarianceSchedule};
use crate::metrics::EnergyProxy;
use crate::net::{Model, NetConfig, NetError};
use crate::tensor::{ImageTensor, Tensor};
use crate::training::{batches_per_epoch, sample_pairs, EpochPlan, PairBatch};

#[derive(Debug, Clone, PartialEq)]
pub struct SessionConfig {
    pub session_id: u64,
    pub cut: CutConfig,
    pub schedule: VarianceSchedule,
    pub net: NetConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
}

/// Seeds for every model and random stream of a session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionSeeds {
    pub shared_model: u64,
    pub local_models: Vec<u64>,
    pub client_streams: Vec<u64>,
}

impl SessionSeeds {
    pub fn derive(root: u64, n_clients: usize) -> Self {
        Self {
            shared_model: derive_seed(root, "shared-model", 0),
            local_models: (0..n_clients as u64).map(|k| derive_seed(root, "local-model", k)).collect(),
            client_streams: (0..n_clients as u64).map(|k| derive_seed(root, "client-stream", k)).collect(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ServerError {
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("unknown link {0}")]
    UnknownLink(usize),
    #[error("session id {got} does not match {expected}")]
    WrongSession { expected: u64, got: u64 },
    #[error("link {link}: {message} (round {round}) not accepted in state {state:?}")]
    OutOfOrder {
        link: usize,
        state: PeerState,
        message: &'static str,
        round: u64,
    },
    #[error("malformed request: {0}")]
    Malformed(String),
    #[error("protocol violation on link {link}: {reason}")]
    Violation { link: usize, reason: String },
    #[error("shared model training failed: {0}")]
    Training(String),
}

impl ServerError {
    /// Violations and training failures abort the peer's session; every
    /// other error is a plain rejection.
    pub fn aborts(&self) -> bool {
        matches!(self, ServerError::Violation { .. } | ServerError::Training(_))
    }

    pub fn code(&self) -> u16 {
        match self {
            ServerError::Wire(w) => w.code(),
            ServerError::UnknownLink(_) => 100,
            ServerError::WrongSession { .. } => 101,
            ServerError::OutOfOrder { .. } => 102,
            ServerError::Malformed(_) => 103,
            ServerError::Violation { .. } => 104,
            ServerError::Training(_) => 105,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeerState {
    AwaitHello,
    Ready,
    Triggered,
    AwaitDone,
    Finished,
    Aborted,
}

/// Server-side view of one connected client.
#[derive(Debug, Clone, PartialEq)]
pub struct Peer {
    pub client_id: Option<u32>,
    pub state: PeerState,
    pub round: u64,
    pub rounds_total: u64,
    /// Server compute spent on this client's batches.
    pub energy: EnergyProxy,
    pub last_client_loss: Option<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerTrainRecord {
    pub link: usize,
    pub client_id: u32,
    pub round: u64,
    pub pairs: usize,
    pub loss: f32,
}

/// The shared server: owns the shared model and one state machine per link.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerNode {
    config: SessionConfig,
    model: Model,
    peers: Vec<Peer>,
    energy: EnergyProxy,
    log: Vec<ServerTrainRecord>,
}

impl ServerNode {
    pub fn new(config: SessionConfig, model: Model, n_links: usize) -> Self {
        let peer = Peer {
            client_id: None,
            state: PeerState::AwaitHello,
            round: 0,
            rounds_total: 0,
            energy: EnergyProxy::default(),
            last_client_loss: None,
        };
        Self {
            config,
            model,
            peers: vec![peer; n_links],
            energy: EnergyProxy::default(),
            log: Vec::new(),
        }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn peers(&self) -> &[Peer] {
        &self.peers
    }

    pub fn energy(&self) -> EnergyProxy {
        self.energy
    }

    pub fn log(&self) -> &[ServerTrainRecord] {
        &self.log
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    fn envelope(&self, round: u64, message: Message) -> Envelope {
        Envelope {
            session: self.config.session_id,
            round,
            message,
        }
    }

    /// Start the next round for `link`, or repeat the pending trigger if
    /// the client has not answered it yet.
    pub fn trigger(&mut self, link: usize) -> Result<Envelope, ServerError> {
        let peer = self.peers.get_mut(link).ok_or(ServerError::UnknownLink(link))?;
        match peer.state {
            PeerState::Ready if peer.round < peer.rounds_total => {
                peer.round += 1;
                peer.state = PeerState::Triggered;
            }
            PeerState::Triggered => {}
            state => {
                return Err(ServerError::OutOfOrder {
                    link,
                    state,
                    message: "TriggerDiffusion",
                    round: peer.round + 1,
                })
            }
        }
        let round = peer.round;
        Ok(self.envelope(
            round,
            Message::TriggerDiffusion {
                batch_size: self.config.batch_size as u32,
            },
        ))
    }

    pub fn abort_envelope(&self, link: usize, err: &ServerError) -> Envelope {
        let round = self.peers.get(link).map_or(0, |p| p.round);
        self.envelope(
            round,
            Message::Abort {
                code: err.code(),
                reason: err.to_string(),
            },
        )
    }

    /// Process one frame from `link`; returns the replies in send order.
    pub fn handle(&mut self, link: usize, frame: &[u8]) -> Result<Vec<Envelope>, ServerError> {
        let env = decode(frame)?;
        let peer = self.peers.get(link).ok_or(ServerError::UnknownLink(link))?;
        if env.session != self.config.session_id {
            return Err(ServerError::WrongSession {
                expected: self.config.session_id,
                got: env.session,
            });
        }
        let out_of_order = ServerError::OutOfOrder {
            link,
            state: peer.state,
            message: env.message.name(),
            round: env.round,
        };
        match (peer.state, env.message) {
            (PeerState::AwaitHello, Message::Hello { client_id, n_images }) if env.round == 0 => {
                if n_images == 0 {
                    return Err(ServerError::Malformed("client announced an empty shard".into()));
                }
                if self.peers.iter().any(|p| p.client_id == Some(client_id)) {
                    return Err(ServerError::Malformed(format!("duplicate client id {client_id}")));
                }
                let rounds = (self.config.epochs * batches_per_epoch(n_images as usize, self.config.batch_size)) as u64;
                let peer = &mut self.peers[link];
                peer.client_id = Some(client_id);
                peer.rounds_total = rounds;
                peer.state = if rounds == 0 { PeerState::Finished } else { PeerState::Ready };
                Ok(vec![self.envelope(
                    0,
                    Message::HelloAck {
                        client_id,
                        total_steps: self.config.cut.steps() as u32,
                        t_split: self.config.cut.t_split() as u32,
                        rounds: rounds as u32,
                    },
                )])
            }
            (
                PeerState::Triggered,
                Message::NoisedBatch {
                    client_id,
                    timesteps,
                    x_t,
                    epsilon,
                },
            ) if env.round == peer.round && Some(client_id) == peer.client_id => {
                self.train_on(link, client_id, env.round, &timesteps, x_t, epsilon)
            }
            (PeerState::AwaitDone, Message::ClientDone { client_id, client_loss })
                if env.round == peer.round && Some(client_id) == peer.client_id =>
            {
                let peer = &mut self.peers[link];
                peer.last_client_loss = client_loss;
                peer.state = if peer.round >= peer.rounds_total {
                    PeerState::Finished
                } else {
                    PeerState::Ready
                };
                Ok(vec![])
            }
            (PeerState::Finished | PeerState::Aborted, _) => Err(out_of_order),
            (_, Message::Abort { .. }) => {
                self.peers[link].state = PeerState::Aborted;
                Ok(vec![])
            }
            _ => Err(out_of_order),
        }
    }

    fn train_on(
        &mut self,
        link: usize,
        client_id: u32,
        round: u64,
        timesteps: &[u32],
        x_t: Tensor<f32>,
        epsilon: Tensor<f32>,
    ) -> Result<Vec<Envelope>, ServerError> {
        let net = self.config.net;
        let count = timesteps.len();
        if count > self.config.batch_size {
            return Err(ServerError::Malformed(format!(
                "{count} pairs exceed batch size {}",
                self.config.batch_size
            )));
        }
        if x_t.shape()[1..] != net.image_shape(0)[1..] {
            return Err(ServerError::Malformed(format!(
                "images shaped {:?}, expected {:?}",
                x_t.shape(),
                net.image_shape(count)
            )));
        }
        let cut = self.config.cut;
        if let Some(&bad) = timesteps.iter().find(|&&t| !cut.is_server_step(t as usize)) {
            self.peers[link].state = PeerState::Aborted;
            return Err(ServerError::Violation {
                link,
                reason: format!(
                    "timestep {bad} is not server-owned (server owns {}..={})",
                    cut.t_split() + 1,
                    cut.steps()
                ),
            });
        }
        let boundary_t = cut.t_split();
        let (server_loss, boundary) = if count == 0 {
            (None, Tensor::zeros(&net.image_shape(0)))
        } else {
            let ts: Vec<usize> = timesteps.iter().map(|&t| t as usize).collect();
            let outcome = match self.model.train_step(&x_t, &ts, &epsilon, self.config.lr) {
                Ok(o) => o,
                Err(e) => {
                    self.peers[link].state = PeerState::Aborted;
                    return Err(ServerError::Training(e.to_string()));
                }
            };
            let sched = &self.config.schedule;
            let items: Vec<ImageTensor> = ts
                .iter()
                .enumerate()
                .map(|(i, &t)| {
                    project_to(&x_t.select(&[i]), t, &outcome.prediction.select(&[i]), boundary_t, sched)
                        .expect("server-owned t is in range")
                })
                .collect();
            let refs: Vec<&ImageTensor> = items.iter().collect();
            let boundary = Tensor::stack(&refs, &net.image_shape(0)[1..]).expect("uniform item shape");
            self.energy.record_training(&net, count);
            self.peers[link].energy.record_training(&net, count);
            self.log.push(ServerTrainRecord {
                link,
                client_id,
                round,
                pairs: count,
                loss: outcome.loss,
            });
            (Some(outcome.loss), boundary)
        };
        self.peers[link].state = PeerState::AwaitDone;
        Ok(vec![
            self.envelope(round, Message::ServerTrainAck { server_loss }),
            self.envelope(
                round,
                Message::PartialDenoised {
                    client_id,
                    boundary_t: boundary_t as u32,
                    images: boundary,
                },
            ),
        ])
    }
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("expected {expected} in round {round}, got {got}")]
    Unexpected {
        expected: &'static str,
        got: &'static str,
        round: u64,
    },
    #[error("peer aborted the session (code {code}): {reason}")]
    Aborted { code: u16, reason: String },
    #[error("handshake failed: {0}")]
    Handshake(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error("invalid session setup: {0}")]
    Config(String),
}

impl SessionError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, SessionError::Transport(e) if e.is_retryable())
    }
}

/// A session error tagged with the client and round it occurred in.
#[derive(Debug, Error)]
#[error("client {client_id}, round {round}: {error}")]
pub struct SessionFailure {
    pub client_id: u32,
    pub round: u64,
    #[source]
    pub error: SessionError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientState {
    Idle,
    Triggered,
    SentNoised,
    GotPartial,
    Done,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: u64,
    pub client_pairs: usize,
    pub server_pairs: usize,
    pub client_loss: Option<f32>,
    pub server_loss: Option<f32>,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub client_flops: u64,
}

/// One client: its shard, its local model and its random stream.
#[derive(Debug, Clone)]
pub struct ClientNode {
    id: u32,
    session: u64,
    cut: CutConfig,
    sched: VarianceSchedule,
    lr: f32,
    model: Model,
    shard: Arc<ImageTensor>,
    rng: ChaCha8Rng,
    plan: EpochPlan,
    state: ClientState,
    round: u64,
    rounds_total: Option<u64>,
    energy: EnergyProxy,
    reports: Vec<RoundReport>,
    boundary_received: usize,
}

impl ClientNode {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: u32,
        session: u64,
        cut: CutConfig,
        sched: VarianceSchedule,
        lr: f32,
        model: Model,
        shard: Arc<ImageTensor>,
        stream_seed: u64,
    ) -> Self {
        Self {
            id,
            session,
            cut,
            sched,
            lr,
            model,
            shard,
            rng: ChaCha8Rng::seed_from_u64(stream_seed),
            plan: EpochPlan::new(),
            state: ClientState::Idle,
            round: 0,
            rounds_total: None,
            energy: EnergyProxy::default(),
            reports: Vec::new(),
            boundary_received: 0,
        }
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn state(&self) -> ClientState {
        self.state
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn rounds_total(&self) -> Option<u64> {
        self.rounds_total
    }

    pub fn energy(&self) -> EnergyProxy {
        self.energy
    }

    pub fn reports(&self) -> &[RoundReport] {
        &self.reports
    }

    pub fn boundary_received(&self) -> usize {
        self.boundary_received
    }

    pub fn shard(&self) -> &ImageTensor {
        &self.shard
    }

    fn send(&mut self, t: &mut impl Transport, round: u64, message: Message) -> Result<(), SessionError> {
        let frame = encode(&Envelope {
            session: self.session,
            round,
            message,
        });
        t.send(&frame)?;
        self.energy.bytes_sent += frame.len() as u64;
        Ok(())
    }

    fn recv(&mut self, t: &mut impl Transport) -> Result<Envelope, SessionError> {
        let frame = t.recv()?;
        self.energy.bytes_received += frame.len() as u64;
        let env = decode(&frame)?;
        if env.session != self.session {
            return Err(SessionError::Handshake(format!(
                "frame for session {} on session {}",
                env.session, self.session
            )));
        }
        if let Message::Abort { code, reason } = env.message {
            return Err(SessionError::Aborted { code, reason });
        }
        Ok(env)
    }

    /// Announce the shard size and learn the round count.
    pub fn hello(&mut self, t: &mut impl Transport) -> Result<u64, SessionError> {
        let n_images = self.shard.batch() as u32;
        self.send(t, 0, Message::Hello {
            client_id: self.id,
            n_images,
        })?;
        let env = self.recv(t)?;
        match env.message {
            Message::HelloAck {
                client_id,
                total_steps,
                t_split,
                rounds,
            } => {
                if client_id != self.id
                    || total_steps as usize != self.cut.steps()
                    || t_split as usize != self.cut.t_split()
                {
                    return Err(SessionError::Handshake(format!(
                        "server split {t_split}/{total_steps} for client {client_id} does not match local {}/{} for client {}",
                        self.cut.t_split(),
                        self.cut.steps(),
                        self.id
                    )));
                }
                self.rounds_total = Some(rounds as u64);
                Ok(rounds as u64)
            }
            other => Err(SessionError::Unexpected {
                expected: "HelloAck",
                got: other.name(),
                round: env.round,
            }),
        }
    }

    /// Run one full round from the client side. On any error the client is
    /// rolled back to its state at the start of the round, so a retryable
    /// failure can simply be retried after the server re-sends its trigger.
    pub fn client_training_round(&mut self, t: &mut impl Transport) -> Result<RoundReport, SessionError> {
        let snapshot = self.clone();
        let result = self.round_inner(t);
        if result.is_err() {
            *self = snapshot;
        }
        result
    }

    fn round_inner(&mut self, t: &mut impl Transport) -> Result<RoundReport, SessionError> {
        if !matches!(self.state, ClientState::Idle | ClientState::Done) {
            return Err(SessionError::Config(format!("round started in state {:?}", self.state)));
        }
        let bytes_before = self.energy;
        let env = self.recv(t)?;
        let batch_size = match env.message {
            Message::TriggerDiffusion { batch_size } if env.round == self.round + 1 => batch_size as usize,
            other => {
                return Err(SessionError::Unexpected {
                    expected: "TriggerDiffusion",
                    got: other.name(),
                    round: env.round,
                })
            }
        };
        let round = env.round;
        self.round = round;
        self.state = ClientState::Triggered;

        // (2) diffusion on local data
        let n = self.shard.batch();
        let indices = self.plan.next_batch(n, batch_size, &mut self.rng);
        let pairs = sample_pairs(&self.shard, &indices, &self.sched, &mut self.rng);
        let (server_pairs, client_pairs): (Vec<&NoiseSample>, Vec<&NoiseSample>) =
            pairs.iter().partition(|p| self.cut.is_server_step(p.t));
        let item_shape = self.shard.shape()[1..].to_vec();
        let to_server = PairBatch::from_pairs(&server_pairs, &item_shape);
        let local = PairBatch::from_pairs(&client_pairs, &item_shape);

        // (3) server-owned pairs leave the client
        self.send(
            t,
            round,
            Message::NoisedBatch {
                client_id: self.id,
                timesteps: to_server.timesteps.iter().map(|&v| v as u32).collect(),
                x_t: to_server.x_t,
                epsilon: to_server.epsilon,
            },
        )?;
        self.state = ClientState::SentNoised;

        // (4) server trained
        let env = self.recv(t)?;
        let server_loss = match env.message {
            Message::ServerTrainAck { server_loss } if env.round == round => server_loss,
            other => {
                return Err(SessionError::Unexpected {
                    expected: "ServerTrainAck",
                    got: other.name(),
                    round: env.round,
                })
            }
        };

        // (5) boundary estimates come back
        let env = self.recv(t)?;
        match env.message {
            Message::PartialDenoised { client_id, images, .. } if env.round == round && client_id == self.id => {
                self.boundary_received += images.batch();
            }
            other => {
                return Err(SessionError::Unexpected {
                    expected: "PartialDenoised",
                    got: other.name(),
                    round: env.round,
                })
            }
        }
        self.state = ClientState::GotPartial;

        // (6) local denoising steps
        let client_loss = if local.is_empty() {
            None
        } else {
            let out = self.model.train_step(&local.x_t, &local.timesteps, &local.epsilon, self.lr)?;
            self.energy.record_training(self.model.config(), local.len());
            Some(out.loss)
        };
        self.send(t, round, Message::ClientDone {
            client_id: self.id,
            client_loss,
        })?;
        self.state = ClientState::Done;

        let delta = self.energy.since(&bytes_before);
        let report = RoundReport {
            round,
            client_pairs: local.len(),
            server_pairs: server_pairs.len(),
            client_loss,
            server_loss,
            bytes_sent: delta.bytes_sent,
            bytes_received: delta.bytes_received,
            client_flops: delta.total_flops(),
        };
        self.reports.push(report.clone());
        Ok(report)
    }
}

/// One captured frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficRecord {
    pub link: usize,
    pub to_server: bool,
    pub frame: Vec<u8>,
}

/// Synchronous in-process transport: frames sent by a client are handled
/// by the server immediately and the replies queued for that client.
#[derive(Debug)]
pub struct InProcessHub {
    server: ServerNode,
    inboxes: Vec<VecDeque<Vec<u8>>>,
    traffic: Option<Vec<TrafficRecord>>,
    rejections: Vec<(usize, ServerError)>,
}

impl InProcessHub {
    pub fn new(server: ServerNode) -> Rc<RefCell<Self>> {
        let n = server.peers.len();
        Rc::new(RefCell::new(Self {
            server,
            inboxes: vec![VecDeque::new(); n],
            traffic: None,
            rejections: Vec::new(),
        }))
    }

    pub fn endpoint(hub: &Rc<RefCell<Self>>, link: usize) -> HubEndpoint {
        HubEndpoint {
            hub: Rc::clone(hub),
            link,
        }
    }

    pub fn server(&self) -> &ServerNode {
        &self.server
    }

    pub fn record_traffic(&mut self, on: bool) {
        if on {
            self.traffic.get_or_insert_with(Vec::new);
        } else {
            self.traffic = None;
        }
    }

    pub fn traffic(&self) -> &[TrafficRecord] {
        self.traffic.as_deref().unwrap_or(&[])
    }

    pub fn rejections(&self) -> &[(usize, ServerError)] {
        &self.rejections
    }

    fn deliver(&mut self, link: usize, env: &Envelope) {
        let frame = encode(env);
        if let Some(log) = self.traffic.as_mut() {
            log.push(TrafficRecord {
                link,
                to_server: false,
                frame: frame.clone(),
            });
        }
        self.inboxes[link].push_back(frame);
    }

    pub fn trigger(&mut self, link: usize) -> Result<(), ServerError> {
        let env = self.server.trigger(link)?;
        self.deliver(link, &env);
        Ok(())
    }
}

#[derive(Debug)]
pub struct HubEndpoint {
    hub: Rc<RefCell<InProcessHub>>,
    link: usize,
}

impl Transport for HubEndpoint {
    fn send(&mut self, frame: &[u8]) -> Result<(), TransportError> {
        let mut hub = self.hub.borrow_mut();
        if let Some(log) = hub.traffic.as_mut() {
            log.push(TrafficRecord {
                link: self.link,
                to_server: true,
                frame: frame.to_vec(),
            });
        }
        match hub.server.handle(self.link, frame) {
            Ok(replies) => {
                for env in &replies {
                    hub.deliver(self.link, env);
                }
            }
            Err(e) => {
                if e.aborts() {
                    let env = hub.server.abort_envelope(self.link, &e);
                    hub.deliver(self.link, &env);
                }
                hub.rejections.push((self.link, e));
            }
        }
        Ok(())
    }

    fn recv(&mut self) -> Result<Vec<u8>, TransportError> {
        self.hub.borrow_mut().inboxes[self.link]
            .pop_front()
            .ok_or(TransportError::Empty)
    }
}

/// Per-entity totals over one epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EntityEpoch {
    pub pairs: usize,
    /// Pair-weighted mean training loss; `None` if the entity did not train.
    pub mean_loss: Option<f64>,
    pub energy: EnergyProxy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub clients: Vec<EntityEpoch>,
    pub server: EntityEpoch,
    /// Server compute spent on each client's batches.
    pub server_per_client: Vec<EnergyProxy>,
}

fn weighted_mean(items: impl Iterator<Item = (usize, f32)>) -> (usize, Option<f64>) {
    let (mut n, mut sum) = (0usize, 0.0f64);
    for (pairs, loss) in items {
        n += pairs;
        sum += pairs as f64 * loss as f64;
    }
    (n, (n > 0).then(|| sum / n as f64))
}

/// Everything a finished session leaves behind.
#[derive(Debug, Clone)]
pub struct TrainedSystem {
    pub shared: Model,
    pub locals: Vec<Model>,
    pub client_energy: Vec<EnergyProxy>,
    pub server_energy: EnergyProxy,
    pub epochs: Vec<EpochStats>,
}

/// Deterministic in-process session driver. Within an epoch the server
/// serves clients batch by batch in registration order.
#[derive(Debug)]
pub struct Session {
    config: SessionConfig,
    hub: Rc<RefCell<InProcessHub>>,
    clients: Vec<ClientNode>,
    endpoints: Vec<HubEndpoint>,
    history: Vec<EpochStats>,
}

impl Session {
    pub fn new(config: SessionConfig, shards: Vec<ImageTensor>, seeds: &SessionSeeds) -> Result<Self, SessionFailure> {
        let fail = |client_id: u32, error: SessionError| SessionFailure {
            client_id,
            round: 0,
            error,
        };
        if shards.is_empty() || shards.iter().any(|s| s.batch() == 0) {
            return Err(fail(0, SessionError::Config("every client needs a non-empty shard".into())));
        }
        if seeds.local_models.len() < shards.len() || seeds.client_streams.len() < shards.len() {
            return Err(fail(0, SessionError::Config("not enough seeds for every client".into())));
        }
        if config.batch_size == 0 {
            return Err(fail(0, SessionError::Config("batch size must be positive".into())));
        }
        let shared = Model::new(config.net, seeds.shared_model).map_err(|e| fail(0, e.into()))?;
        let hub = InProcessHub::new(ServerNode::new(config.clone(), shared, shards.len()));
        let mut clients = Vec::new();
        let mut endpoints = Vec::new();
        for (k, shard) in shards.into_iter().enumerate() {
            let id = k as u32;
            let model = Model::new(config.net, seeds.local_models[k]).map_err(|e| fail(id, e.into()))?;
            let mut client = ClientNode::new(
                id,
                config.session_id,
                config.cut,
                config.schedule.clone(),
                config.lr,
                model,
                Arc::new(shard),
                seeds.client_streams[k],
            );
            let mut ep = InProcessHub::endpoint(&hub, k);
            client.hello(&mut ep).map_err(|e| fail(id, e))?;
            clients.push(client);
            endpoints.push(ep);
        }
        Ok(Self {
            config,
            hub,
            clients,
            endpoints,
            history: Vec::new(),
        })
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn record_traffic(&mut self, on: bool) {
        self.hub.borrow_mut().record_traffic(on);
    }

    pub fn traffic(&self) -> Vec<TrafficRecord> {
        self.hub.borrow().traffic().to_vec()
    }

    pub fn clients(&self) -> &[ClientNode] {
        &self.clients
    }

    pub fn shared_model(&self) -> Model {
        self.hub.borrow().server.model.clone()
    }

    pub fn server_energy(&self) -> EnergyProxy {
        self.hub.borrow().server.energy
    }

    pub fn history(&self) -> &[EpochStats] {
        &self.history
    }

    pub fn run_epoch(&mut self) -> Result<EpochStats, SessionFailure> {
        let epoch = self.history.len() + 1;
        let bs = self.config.batch_size;
        let before: Vec<(EnergyProxy, usize)> = self.clients.iter().map(|c| (c.energy, c.reports.len())).collect();
        let (server_energy_before, log_before, peers_before) = {
            let hub = self.hub.borrow();
            let peers: Vec<EnergyProxy> = hub.server.peers.iter().map(|p| p.energy).collect();
            (hub.server.energy, hub.server.log.len(), peers)
        };
        let per_client: Vec<usize> = self.clients.iter().map(|c| batches_per_epoch(c.shard.batch(), bs)).collect();
        let max_batches = per_client.iter().copied().max().unwrap_or(0);
        for b in 0..max_batches {
            for k in 0..self.clients.len() {
                if b >= per_client[k] {
                    continue;
                }
                let client = &mut self.clients[k];
                let fail = |error: SessionError| SessionFailure {
                    client_id: client.id,
                    round: client.round + 1,
                    error,
                };
                self.hub.borrow_mut().trigger(k).map_err(|e| fail(e.into()))?;
                let result = client.client_training_round(&mut self.endpoints[k]);
                if let Err(error) = result {
                    let rejected = self.hub.borrow().rejections.last().cloned();
                    let error = match (error, rejected) {
                        (SessionError::Transport(TransportError::Empty), Some((_, server_err))) => server_err.into(),
                        (e, _) => e,
                    };
                    return Err(SessionFailure {
                        client_id: client.id,
                        round: client.round + 1,
                        error,
                    });
                }
            }
        }

        let clients: Vec<EntityEpoch> = self
            .clients
            .iter()
            .zip(&before)
            .map(|(c, (energy, n_reports))| {
                let (pairs, mean_loss) = weighted_mean(
                    c.reports[*n_reports..]
                        .iter()
                        .filter_map(|r| r.client_loss.map(|l| (r.client_pairs, l))),
                );
                EntityEpoch {
                    pairs,
                    mean_loss,
                    energy: c.energy.since(energy),
                }
            })
            .collect();
        let hub = self.hub.borrow();
        let (pairs, mean_loss) = weighted_mean(hub.server.log[log_before..].iter().map(|r| (r.pairs, r.loss)));
        let mut energy = hub.server.energy.since(&server_energy_before);
        for c in &clients {
            energy.bytes_sent += c.energy.bytes_received;
            energy.bytes_received += c.energy.bytes_sent;
        }
        let server_per_client = hub
            .server
            .peers
            .iter()
            .zip(&peers_before)
            .map(|(p, before)| p.energy.since(before))
            .collect();
        let stats = EpochStats {
            epoch,
            server_per_client,
            clients,
            server: EntityEpoch {
                pairs,
                mean_loss,
                energy,
            },
        };
        drop(hub);
        self.history.push(stats.clone());
        Ok(stats)
    }

    pub fn finish(self) -> TrainedSystem {
        let server_bytes = self.clients.iter().fold(EnergyProxy::default(), |mut acc, c| {
            acc.bytes_sent += c.energy.bytes_received;
            acc.bytes_received += c.energy.bytes_sent;
            acc
        });
        let mut server_energy = self.hub.borrow().server.energy;
        server_energy.bytes_sent = server_bytes.bytes_sent;
        server_energy.bytes_received = server_bytes.bytes_received;
        let shared = self.shared_model();
        TrainedSystem {
            shared,
            client_energy: self.clients.iter().map(|c| c.energy).collect(),
            locals: self.clients.into_iter().map(ClientNode::into_model).collect(),
            server_energy,
            epochs: self.history,
        }
    }
}

/// Run every epoch of a session over the in-process transport.
pub fn run_simulated_session(
    config: SessionConfig,
    shards: Vec<ImageTensor>,
    seeds: &SessionSeeds,
) -> Result<TrainedSystem, SessionFailure> {
    let epochs = config.epochs;
    let mut session = Session::new(config, shards, seeds)?;
    for _ in 0..epochs {
        session.run_epoch()?;
    }
    Ok(session.finish())
}

/// Serve `server` over TCP until every peer has finished or aborted. Links
/// are numbered in accept order. Messages from all links are handled one
/// at a time.
pub fn serve_tcp(listener: &TcpListener, mut server: ServerNode) -> Result<ServerNode, SessionError> {
    let n = server.peers.len();
    let (tx, rx) = mpsc::channel::<(usize, Option<Vec<u8>>)>();
    let mut writers = Vec::with_capacity(n);
    for link in 0..n {
        let (stream, _) = listener.accept().map_err(|e| TransportError::Io(e.to_string()))?;
        let mut reader = stream.try_clone().map_err(|e| TransportError::Io(e.to_string()))?;
        let tx = tx.clone();
        std::thread::spawn(move || loop {
            match read_frame(&mut reader) {
                Ok(Some(frame)) => {
                    if tx.send((link, Some(frame))).is_err() {
                        break;
                    }
                }
                _ => {
                    let _ = tx.send((link, None));
                    break;
                }
            }
        });
        writers.push(TcpTransport::new(stream));
    }
    drop(tx);
    let mut open = vec![true; n];
    let done = |s: &ServerNode| {
        s.peers
            .iter()
            .all(|p| matches!(p.state, PeerState::Finished | PeerState::Aborted))
    };
    while !done(&server) && open.iter().any(|&o| o) {
        let Ok((link, frame)) = rx.recv() else { break };
        let Some(frame) = frame else {
            open[link] = false;
            continue;
        };
        let replies = match server.handle(link, &frame) {
            Ok(r) => r,
            Err(e) if e.aborts() => vec![server.abort_envelope(link, &e)],
            Err(_) => continue,
        };
        for env in &replies {
            writers[link].send(&encode(env))?;
        }
        if server.peers[link].state == PeerState::Ready {
            let env = server.trigger(link)?;
            writers[link].send(&encode(&env))?;
        }
    }
    Ok(server)
}

/// Connect to a server and run all of this client's rounds.
pub fn run_tcp_client(addr: impl ToSocketAddrs, mut client: ClientNode) -> Result<ClientNode, SessionFailure> {
    let fail = |c: &ClientNode, error: SessionError| SessionFailure {
        client_id: c.id,
        round: c.round + 1,
        error,
    };
    let mut transport = match TcpTransport::connect(addr) {
        Ok(t) => t,
        Err(e) => return Err(fail(&client, e.into())),
    };
    let rounds = match client.hello(&mut transport) {
        Ok(r) => r,
        Err(e) => return Err(fail(&client, e)),
    };
    for _ in 0..rounds {
        if let Err(e) = client.client_training_round(&mut transport) {
            return Err(fail(&client, e));
        }
    }
    Ok(client)
}
