#![allow(dead_code)]

pub mod gradcheck;

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use splitdiff::data::{make_shards, PhantomConfig};
use splitdiff::diffusion::{make_schedule, ScheduleKind, VarianceSchedule};
use splitdiff::net::{Model, NetConfig};
use splitdiff::protocol::session::Peer;
use splitdiff::protocol::{decode, CutConfig, Message, ServerNode, Session, SessionConfig, SessionSeeds};
use splitdiff::tensor::ImageTensor;

pub fn tiny_net(image_size: usize) -> NetConfig {
    NetConfig {
        base_channels: 2,
        depth: 1,
        timestep_embed_dim: 4,
        image_channels: 1,
        image_size,
    }
}

pub fn schedule(steps: usize) -> VarianceSchedule {
    make_schedule(ScheduleKind::Cosine, steps, 0.008).unwrap()
}

pub fn session_config(c: f64, steps: usize, net: NetConfig, epochs: usize, batch_size: usize) -> SessionConfig {
    SessionConfig {
        session_id: 7,
        cut: CutConfig::new(steps, c).unwrap(),
        schedule: schedule(steps),
        net,
        epochs,
        batch_size,
        lr: 1e-3,
    }
}

pub fn phantom_shards(n_clients: usize, per_client: usize, image_size: usize, seed: u64) -> Vec<ImageTensor> {
    let cfg = PhantomConfig {
        image_size,
        ..PhantomConfig::default()
    };
    make_shards(&cfg, n_clients, per_client, 2, seed)
        .shards
        .into_iter()
        .map(|s| s.images)
        .collect()
}

/// One step of an adversarial schedule against a server.
#[derive(Debug, Clone)]
pub enum Action {
    Frame(Vec<u8>),
    Trigger,
}

/// Client-to-server frames of link 0 from an honest single-client session,
/// with a server trigger before every round.
pub fn honest_transcript(config: &SessionConfig, shard: ImageTensor, seeds: &SessionSeeds) -> Vec<Action> {
    let mut session = Session::new(config.clone(), vec![shard], seeds).unwrap();
    session.record_traffic(true);
    // the hello happened before recording started
    let hello = splitdiff::protocol::encode(&splitdiff::protocol::Envelope {
        session: config.session_id,
        round: 0,
        message: Message::Hello {
            client_id: 0,
            n_images: session.clients()[0].shard().batch() as u32,
        },
    });
    for _ in 0..config.epochs {
        session.run_epoch().unwrap();
    }
    let mut actions = vec![Action::Frame(hello)];
    for rec in session.traffic().into_iter().filter(|r| r.to_server) {
        if matches!(decode(&rec.frame).unwrap().message, Message::NoisedBatch { .. }) {
            actions.push(Action::Trigger);
        }
        actions.push(Action::Frame(rec.frame));
    }
    actions
}

/// Randomly reorder, duplicate, drop, truncate or corrupt an honest schedule.
pub fn mutate(actions: &[Action], rng: &mut ChaCha8Rng) -> Vec<Action> {
    let mut out = actions.to_vec();
    let edits = rng.random_range(1..=6);
    for _ in 0..edits {
        if out.is_empty() {
            break;
        }
        let i = rng.random_range(0..out.len());
        match rng.random_range(0..7) {
            0 => {
                let j = rng.random_range(0..out.len());
                out.swap(i, j);
            }
            1 => {
                let a = out[i].clone();
                out.insert(rng.random_range(0..=out.len()), a);
            }
            2 => {
                out.remove(i);
            }
            3 => {
                if let Action::Frame(f) = &mut out[i] {
                    let len = rng.random_range(0..f.len().max(1));
                    f.truncate(len);
                }
            }
            4 => {
                if let Action::Frame(f) = &mut out[i] {
                    if !f.is_empty() {
                        let at = rng.random_range(0..f.len());
                        f[at] = rng.random();
                    }
                }
            }
            5 => {
                // rewrite the round counter
                if let Action::Frame(f) = &mut out[i] {
                    if f.len() >= 24 {
                        let round: u64 = rng.random_range(0..6);
                        f[16..24].copy_from_slice(&round.to_le_bytes());
                    }
                }
            }
            _ => {
                let n = rng.random_range(0..64);
                out.insert(i, Action::Frame((0..n).map(|_| rng.random()).collect()));
            }
        }
    }
    out
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct FuzzTally {
    pub iterations: usize,
    pub actions: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub trained: usize,
}

/// Replay `actions` against a fresh server, checking after every action
/// that rejected input left the server untouched and that the shared model
/// only ever trained on a batch for the peer's current, triggered round.
pub fn replay_checked(config: &SessionConfig, model: &Model, actions: &[Action], tally: &mut FuzzTally) -> ServerNode {
    let mut server = ServerNode::new(config.clone(), model.clone(), 1);
    for action in actions {
        tally.actions += 1;
        let peers_before: Vec<Peer> = server.peers().to_vec();
        let params_before = server.model().params().clone();
        match action {
            Action::Trigger => {
                if server.trigger(0).is_ok() {
                    tally.accepted += 1;
                } else {
                    tally.rejected += 1;
                    assert_eq!(server.peers(), &peers_before[..], "rejected trigger changed peer state");
                }
            }
            Action::Frame(frame) => match server.handle(0, frame) {
                Ok(_) => {
                    tally.accepted += 1;
                    if server.model().params() != &params_before {
                        tally.trained += 1;
                        let env = decode(frame).expect("accepted frames decode");
                        assert!(matches!(env.message, Message::NoisedBatch { .. }), "model changed on {:?}", env.message.name());
                        assert_eq!(peers_before[0].state, splitdiff::protocol::PeerState::Triggered);
                        assert_eq!(env.round, peers_before[0].round, "trained on a batch from another round");
                    }
                }
                Err(e) => {
                    tally.rejected += 1;
                    assert_eq!(server.model().params(), &params_before, "rejected frame changed the model: {e}");
                    if e.aborts() {
                        assert_eq!(server.peers()[0].state, splitdiff::protocol::PeerState::Aborted);
                    } else {
                        assert_eq!(server.peers(), &peers_before[..], "rejected frame changed peer state: {e}");
                    }
                }
            },
        }
        assert!(server.model().params().tensors().all(|t| t.all_finite()));
    }
    tally.iterations += 1;
    server
}

pub fn fuzz_server(iterations: usize, seed: u64) -> FuzzTally {
    let net = tiny_net(8);
    let config = session_config(0.6, 10, net, 2, 4);
    let shard = phantom_shards(1, 8, 8, 3).remove(0);
    let seeds = SessionSeeds::derive(5, 1);
    let honest = honest_transcript(&config, shard, &seeds);
    let model = Model::new(net, seeds.shared_model).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = FuzzTally::default();
    for _ in 0..iterations {
        let actions = mutate(&honest, &mut rng);
        replay_checked(&config, &model, &actions, &mut tally);
    }
    tally
}

/// Byte windows of every non-constant image row, as stored in f32 LE.
fn row_windows(images: &ImageTensor) -> (usize, HashSet<Vec<u8>>) {
    let (_, _, _, w) = images.dims4().unwrap();
    let mut set = HashSet::new();
    for row in images.data().chunks(w) {
        if row.iter().any(|&v| v != row[0]) {
            set.insert(row.iter().flat_map(|v| v.to_le_bytes()).collect());
        }
    }
    (w * 4, set)
}

/// First `(frame index, byte offset)` where any non-constant row of any
/// clean image appears verbatim.
pub fn find_clean_rows(frames: &[Vec<u8>], images: &[&ImageTensor]) -> Option<(usize, usize)> {
    for imgs in images {
        let (width, rows) = row_windows(imgs);
        for (k, f) in frames.iter().enumerate() {
            if f.len() < width {
                continue;
            }
            for at in 0..=f.len() - width {
                if rows.contains(&f[at..at + width]) {
                    return Some((k, at));
                }
            }
        }
    }
    None
}
