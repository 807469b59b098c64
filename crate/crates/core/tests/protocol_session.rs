mod common;

use std::net::TcpListener;
use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;
use splitdiff::diffusion::standard_normal;
use splitdiff::metrics::training_flops;
use splitdiff::net::Model;
use splitdiff::protocol::{
    decode, encode, run_simulated_session, run_tcp_client, sample_monolithic, serve_tcp, split_inference,
    split_inference_traced, ClientNode, CutConfig, Envelope, Message, PeerState, ServerError, ServerNode, Session,
    SessionError, SessionSeeds,
};
use splitdiff::tensor::Tensor;
use splitdiff::training::{train_central_plain, train_local_plain};

#[test]
fn fully_local_cut_equals_plain_local_training() {
    let net = tiny_net(8);
    let config = session_config(1.0, 20, net, 3, 4);
    let shard = phantom_shards(1, 10, 8, 1).remove(0);
    let seeds = SessionSeeds::derive(11, 1);
    let system = run_simulated_session(config.clone(), vec![shard.clone()], &seeds).unwrap();

    let mut plain = Model::new(net, seeds.local_models[0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.client_streams[0]);
    train_local_plain(&mut plain, &shard, &config.schedule, 3, 4, config.lr, &mut rng).unwrap();

    assert_eq!(system.locals[0].params().to_bytes(), plain.params().to_bytes());
    let untouched = Model::new(net, seeds.shared_model).unwrap();
    assert_eq!(system.shared.params(), untouched.params());
    assert_eq!(system.server_energy.total_flops(), 0);
}

#[test]
fn fully_shared_cut_equals_plain_central_training() {
    let net = tiny_net(8);
    let config = session_config(0.0, 20, net, 3, 4);
    for n_clients in [1, 3] {
        let shards = phantom_shards(n_clients, 10, 8, 2);
        let seeds = SessionSeeds::derive(12, n_clients);
        let system = run_simulated_session(config.clone(), shards.clone(), &seeds).unwrap();

        let mut plain = Model::new(net, seeds.shared_model).unwrap();
        let mut rngs: Vec<ChaCha8Rng> = seeds.client_streams.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
        train_central_plain(&mut plain, &shards, &config.schedule, 3, 4, config.lr, &mut rngs).unwrap();

        assert_eq!(system.shared.params().to_bytes(), plain.params().to_bytes(), "{n_clients} clients");
        for (k, local) in system.locals.iter().enumerate() {
            assert_eq!(local.params(), Model::new(net, seeds.local_models[k]).unwrap().params());
            assert_eq!(system.client_energy[k].total_flops(), 0);
        }
    }
}

#[test]
fn two_client_sessions_are_bit_reproducible() {
    let net = tiny_net(8);
    let config = session_config(0.4, 20, net, 2, 4);
    let shards = phantom_shards(2, 8, 8, 3);
    let seeds = SessionSeeds::derive(13, 2);
    let a = run_simulated_session(config.clone(), shards.clone(), &seeds).unwrap();
    let b = run_simulated_session(config, shards, &seeds).unwrap();
    assert_eq!(a.shared.params().to_bytes(), b.shared.params().to_bytes());
    for (x, y) in a.locals.iter().zip(&b.locals) {
        assert_eq!(x.params().to_bytes(), y.params().to_bytes());
    }
    assert_eq!(a.epochs, b.epochs);
    assert_ne!(a.shared.params(), Model::new(net, seeds.shared_model).unwrap().params());
}

#[test]
fn routing_at_the_extremes() {
    let net = tiny_net(8);
    let shard = phantom_shards(1, 8, 8, 4).remove(0);
    let seeds = SessionSeeds::derive(14, 1);

    let mut local_only = Session::new(session_config(1.0, 20, net, 1, 8), vec![shard.clone()], &seeds).unwrap();
    local_only.record_traffic(true);
    local_only.run_epoch().unwrap();
    let report = &local_only.clients()[0].reports()[0];
    assert_eq!(report.server_pairs, 0);
    assert_eq!(report.client_pairs, 8);
    assert_eq!(report.server_loss, None);
    for rec in local_only.traffic() {
        if let Message::NoisedBatch { timesteps, x_t, epsilon, .. } = decode(&rec.frame).unwrap().message {
            assert!(timesteps.is_empty());
            assert!(x_t.is_empty() && epsilon.is_empty());
        }
    }
    assert_eq!(local_only.server_energy().total_flops(), 0);

    let mut shared_only = Session::new(session_config(0.0, 20, net, 1, 8), vec![shard], &seeds).unwrap();
    shared_only.run_epoch().unwrap();
    let client = &shared_only.clients()[0];
    let report = &client.reports()[0];
    assert_eq!(report.client_pairs, 0);
    assert_eq!(report.server_pairs, 8);
    assert_eq!(report.client_loss, None);
    assert_eq!(client.energy().total_flops(), 0);
    assert_eq!(client.model().params(), Model::new(net, seeds.local_models[0]).unwrap().params());
}

#[test]
fn server_owned_share_follows_the_binomial() {
    let net = tiny_net(4);
    let shard = phantom_shards(1, 1000, 4, 5).remove(0);
    let seeds = SessionSeeds::derive(15, 1);
    let mut session = Session::new(session_config(0.8, 50, net, 1, 1000), vec![shard], &seeds).unwrap();
    session.run_epoch().unwrap();
    let report = &session.clients()[0].reports()[0];
    assert_eq!(report.server_pairs + report.client_pairs, 1000);
    let sigma = (1000.0f64 * 0.2 * 0.8).sqrt();
    assert!(
        (report.server_pairs as f64 - 200.0).abs() < 3.0 * sigma,
        "{} server-owned pairs",
        report.server_pairs
    );
}

#[test]
fn client_flops_track_client_owned_pairs() {
    let net = tiny_net(8);
    let shard = phantom_shards(1, 12, 8, 6).remove(0);
    let seeds = SessionSeeds::derive(16, 1);
    let mut session = Session::new(session_config(0.5, 20, net, 1, 4), vec![shard], &seeds).unwrap();
    let stats = session.run_epoch().unwrap();
    let client = &session.clients()[0];
    let expected: u64 = client
        .reports()
        .iter()
        .filter(|r| r.client_pairs > 0)
        .map(|r| training_flops(&net, r.client_pairs))
        .sum();
    assert_eq!(stats.clients[0].energy.total_flops(), expected);
    let server_expected: u64 = client
        .reports()
        .iter()
        .filter(|r| r.server_pairs > 0)
        .map(|r| training_flops(&net, r.server_pairs))
        .sum();
    assert_eq!(stats.server.energy.total_flops(), server_expected);
    assert_eq!(stats.server_per_client[0].total_flops(), server_expected);
    let pairs: usize = client.reports().iter().map(|r| r.client_pairs).sum();
    assert_eq!(stats.clients[0].pairs, pairs);
}

fn bare_server(c: f64, batch_size: usize) -> (ServerNode, Model) {
    let net = tiny_net(8);
    let config = session_config(c, 20, net, 1, batch_size);
    let model = Model::new(net, 3).unwrap();
    // train once so the output layer is no longer zero
    let mut warm = model.clone();
    let x = Tensor::from_fn(&[2, 1, 8, 8], |i| ((i * 13) % 7) as f32 / 4.0 - 0.8);
    warm.train_step(&x, &[15, 18], &x.map(|v| -v), 1e-2).unwrap();
    let fresh = Model::from_params(net, warm.into_params()).unwrap();
    (ServerNode::new(config, fresh.clone(), 1), fresh)
}

fn frame(round: u64, message: Message) -> Vec<u8> {
    encode(&Envelope {
        session: 7,
        round,
        message,
    })
}

fn hello(server: &mut ServerNode, n_images: u32) {
    let replies = server.handle(0, &frame(0, Message::Hello { client_id: 0, n_images })).unwrap();
    assert!(matches!(replies[0].message, Message::HelloAck { t_split: 10, total_steps: 20, .. }));
}

#[test]
fn self_target_batch_gives_zero_loss() {
    let (mut server, model) = bare_server(0.5, 4);
    hello(&mut server, 4);
    server.trigger(0).unwrap();
    let x = Tensor::from_fn(&[2, 1, 8, 8], |i| (i as f32 / 64.0).cos());
    let ts = [12usize, 19];
    let eps = model.predict_noise(&x, &ts).unwrap();
    let replies = server
        .handle(
            0,
            &frame(
                1,
                Message::NoisedBatch {
                    client_id: 0,
                    timesteps: vec![12, 19],
                    x_t: x,
                    epsilon: eps,
                },
            ),
        )
        .unwrap();
    assert_eq!(replies[0].message, Message::ServerTrainAck { server_loss: Some(0.0) });
    assert!(matches!(replies[1].message, Message::PartialDenoised { boundary_t: 10, .. }));
    assert_eq!(server.model().params(), model.params());
    assert_eq!(server.peers()[0].state, PeerState::AwaitDone);
}

#[test]
fn empty_batch_is_an_explicit_no_op() {
    let (mut server, model) = bare_server(1.0, 4);
    let replies = server.handle(0, &frame(0, Message::Hello { client_id: 0, n_images: 4 })).unwrap();
    assert!(matches!(replies[0].message, Message::HelloAck { t_split: 20, .. }));
    server.trigger(0).unwrap();
    let empty = Tensor::zeros(&[0, 1, 8, 8]);
    let replies = server
        .handle(
            0,
            &frame(
                1,
                Message::NoisedBatch {
                    client_id: 0,
                    timesteps: vec![],
                    x_t: empty.clone(),
                    epsilon: empty,
                },
            ),
        )
        .unwrap();
    assert_eq!(replies[0].message, Message::ServerTrainAck { server_loss: None });
    assert_eq!(server.model().params(), model.params());
    assert!(server.log().is_empty());
    // the no-op is flagged on the wire, not just a NaN
    let bytes = encode(&replies[0]);
    assert_eq!(bytes[28], 1);
}

#[test]
fn client_owned_timestep_aborts_the_peer() {
    let (mut server, model) = bare_server(0.5, 4);
    hello(&mut server, 4);
    server.trigger(0).unwrap();
    let x = Tensor::zeros(&[1, 1, 8, 8]);
    let err = server
        .handle(
            0,
            &frame(
                1,
                Message::NoisedBatch {
                    client_id: 0,
                    timesteps: vec![10],
                    x_t: x.clone(),
                    epsilon: x,
                },
            ),
        )
        .unwrap_err();
    assert!(matches!(err, ServerError::Violation { .. }));
    assert!(err.aborts());
    assert!(err.to_string().contains("timestep 10"));
    assert_eq!(server.peers()[0].state, PeerState::Aborted);
    assert_eq!(server.model().params(), model.params());
    let abort = server.abort_envelope(0, &err);
    assert!(matches!(abort.message, Message::Abort { code: 104, .. }));
}

#[test]
fn out_of_order_and_foreign_frames_leave_state_unchanged() {
    let (mut server, model) = bare_server(0.5, 4);
    hello(&mut server, 8);
    let before = server.peers().to_vec();
    let x = Tensor::zeros(&[1, 1, 8, 8]);
    let batch = |round, client_id| {
        frame(
            round,
            Message::NoisedBatch {
                client_id,
                timesteps: vec![15],
                x_t: x.clone(),
                epsilon: x.clone(),
            },
        )
    };
    // not triggered yet
    assert!(matches!(server.handle(0, &batch(1, 0)), Err(ServerError::OutOfOrder { .. })));
    assert_eq!(server.peers(), &before[..]);
    server.trigger(0).unwrap();
    let triggered = server.peers().to_vec();
    for bad in [
        batch(2, 0),
        batch(0, 0),
        batch(1, 9),
        frame(1, Message::ClientDone { client_id: 0, client_loss: None }),
        frame(0, Message::Hello { client_id: 0, n_images: 8 }),
    ] {
        assert!(matches!(server.handle(0, &bad), Err(ServerError::OutOfOrder { .. })));
        assert_eq!(server.peers(), &triggered[..]);
    }
    let mut foreign = batch(1, 0);
    foreign[8] = 99;
    assert!(matches!(server.handle(0, &foreign), Err(ServerError::WrongSession { .. })));
    assert!(matches!(server.handle(3, &batch(1, 0)), Err(ServerError::UnknownLink(3))));
    assert!(matches!(server.handle(0, &batch(1, 0)[..40]), Err(ServerError::Wire(_))));
    assert_eq!(server.peers(), &triggered[..]);
    assert_eq!(server.model().params(), model.params());

    // oversize batch is malformed, not a violation
    let big = Tensor::zeros(&[5, 1, 8, 8]);
    let oversize = frame(
        1,
        Message::NoisedBatch {
            client_id: 0,
            timesteps: vec![15; 5],
            x_t: big.clone(),
            epsilon: big,
        },
    );
    assert!(matches!(server.handle(0, &oversize), Err(ServerError::Malformed(_))));
    assert_eq!(server.peers(), &triggered[..]);

    // the honest batch still goes through afterwards
    let replies = server.handle(0, &batch(1, 0)).unwrap();
    assert_eq!(replies.len(), 2);
    assert_eq!(server.peers()[0].state, PeerState::AwaitDone);
    // and a duplicate of it is rejected
    assert!(matches!(server.handle(0, &batch(1, 0)), Err(ServerError::OutOfOrder { .. })));
    server
        .handle(0, &frame(1, Message::ClientDone { client_id: 0, client_loss: Some(0.5) }))
        .unwrap();
    assert_eq!(server.peers()[0].state, PeerState::Ready);
    assert_eq!(server.peers()[0].last_client_loss, Some(0.5));
}

#[test]
fn honest_transcript_replays_to_the_session_result() {
    let net = tiny_net(8);
    let config = session_config(0.6, 10, net, 2, 4);
    let shard = phantom_shards(1, 8, 8, 3).remove(0);
    let seeds = SessionSeeds::derive(5, 1);
    let actions = honest_transcript(&config, shard.clone(), &seeds);
    let model = Model::new(net, seeds.shared_model).unwrap();
    let mut tally = FuzzTally::default();
    let server = replay_checked(&config, &model, &actions, &mut tally);
    assert_eq!(tally.rejected, 0);
    assert_eq!(server.peers()[0].state, PeerState::Finished);
    let direct = run_simulated_session(config, vec![shard], &seeds).unwrap();
    assert_eq!(server.model().params().to_bytes(), direct.shared.params().to_bytes());
}

#[test]
fn adversarial_schedules_are_rejected_cleanly() {
    let tally = fuzz_server(300, 1);
    assert_eq!(tally.iterations, 300);
    assert!(tally.rejected > 0 && tally.trained > 0, "{tally:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_reorderings_never_corrupt_the_server(seed in any::<u64>()) {
        let tally = fuzz_server(3, seed);
        prop_assert_eq!(tally.iterations, 3);
    }
}

#[test]
fn split_sampling_equals_monolithic_for_identical_models() {
    let net = tiny_net(8);
    let mut model = Model::new(net, 21).unwrap();
    let x = Tensor::from_fn(&[4, 1, 8, 8], |i| ((i * 7) % 11) as f32 / 5.0 - 1.0);
    for k in 0..3 {
        model.train_step(&x, &[3 + k, 8, 12, 20], &x.map(|v| v * 0.5), 1e-2).unwrap();
    }
    let sched = schedule(20);
    let reference = sample_monolithic(&model, &sched, 3, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert!(reference.all_finite());
    for c in [0.0, 0.2, 0.4, 0.6, 0.8, 1.0] {
        let cut = CutConfig::new(20, c).unwrap();
        let twin = model.clone();
        let (images, _) = split_inference(&model, &twin, &cut, &sched, 3, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(images, reference, "c = {c}");
    }
}

#[test]
fn boundary_snapshot_at_the_extremes() {
    let net = tiny_net(8);
    let shared = Model::new(net, 1).unwrap();
    let mut local = Model::new(net, 2).unwrap();
    let x = Tensor::from_fn(&[2, 1, 8, 8], |i| (i as f32 / 10.0).sin());
    local.train_step(&x, &[2, 9], &x, 1e-2).unwrap();
    let sched = schedule(20);

    let cut = CutConfig::new(20, 1.0).unwrap();
    let (_, boundary) = split_inference(&shared, &local, &cut, &sched, 2, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let noise = standard_normal(&[2, 1, 8, 8], &mut ChaCha8Rng::seed_from_u64(6));
    assert_eq!(boundary, noise);

    let cut = CutConfig::new(20, 0.0).unwrap();
    let (images, boundary) = split_inference(&shared, &local, &cut, &sched, 2, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    assert_eq!(images, boundary);

    let cut = CutConfig::new(20, 0.5).unwrap();
    let traced = split_inference_traced(&shared, &local, &cut, &sched, 2, &[20, 10, 0], &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let ts: Vec<usize> = traced.trace.iter().map(|(t, _)| *t).collect();
    assert_eq!(ts, vec![20, 10, 0]);
    assert_eq!(traced.trace[1].1, traced.boundary);
    assert_eq!(traced.trace[2].1, traced.images);
    assert!(traced.images.data().iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn clean_images_never_cross_the_wire() {
    let net = tiny_net(8);
    let shards = phantom_shards(3, 8, 8, 8);
    for c in [0.0, 0.6] {
        let seeds = SessionSeeds::derive(17, 3);
        let mut session = Session::new(session_config(c, 20, net, 2, 4), shards.clone(), &seeds).unwrap();
        session.record_traffic(true);
        session.run_epoch().unwrap();
        session.run_epoch().unwrap();
        let frames: Vec<Vec<u8>> = session.traffic().into_iter().map(|r| r.frame).collect();
        assert!(!frames.is_empty());
        let refs: Vec<_> = shards.iter().collect();
        assert_eq!(find_clean_rows(&frames, &refs), None, "c = {c}");
    }
    // the scan does find a clean image when one is sent
    let leak = frame(
        1,
        Message::PartialDenoised {
            client_id: 0,
            boundary_t: 3,
            images: shards[1].select(&[5]),
        },
    );
    assert!(find_clean_rows(&[leak], &[&shards[1]]).is_some());
}

#[test]
fn tcp_session_matches_the_in_process_session() {
    let net = tiny_net(8);
    let config = session_config(0.5, 20, net, 2, 4);
    let shard = phantom_shards(1, 8, 8, 9).remove(0);
    let seeds = SessionSeeds::derive(18, 1);

    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server = ServerNode::new(config.clone(), Model::new(net, seeds.shared_model).unwrap(), 1);
    let handle = std::thread::spawn(move || serve_tcp(&listener, server));
    let client = ClientNode::new(
        0,
        config.session_id,
        config.cut,
        config.schedule.clone(),
        config.lr,
        Model::new(net, seeds.local_models[0]).unwrap(),
        Arc::new(shard.clone()),
        seeds.client_streams[0],
    );
    let client = run_tcp_client(addr, client).unwrap();
    let server = handle.join().unwrap().unwrap();

    let direct = run_simulated_session(config, vec![shard], &seeds).unwrap();
    assert_eq!(server.peers()[0].state, PeerState::Finished);
    assert_eq!(server.model().params().to_bytes(), direct.shared.params().to_bytes());
    assert_eq!(client.model().params().to_bytes(), direct.locals[0].params().to_bytes());
}

#[test]
fn tcp_session_serves_several_clients() {
    let net = tiny_net(8);
    let config = session_config(0.4, 20, net, 1, 4);
    let shards = phantom_shards(2, 8, 8, 10);
    let seeds = SessionSeeds::derive(19, 2);
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server = ServerNode::new(config.clone(), Model::new(net, seeds.shared_model).unwrap(), 2);
    let handle = std::thread::spawn(move || serve_tcp(&listener, server));
    let clients: Vec<_> = shards
        .into_iter()
        .enumerate()
        .map(|(k, shard)| {
            let client = ClientNode::new(
                k as u32,
                config.session_id,
                config.cut,
                config.schedule.clone(),
                config.lr,
                Model::new(net, seeds.local_models[k]).unwrap(),
                Arc::new(shard),
                seeds.client_streams[k],
            );
            std::thread::spawn(move || run_tcp_client(addr, client))
        })
        .collect();
    for c in clients {
        let c = c.join().unwrap().unwrap();
        assert_eq!(c.reports().len(), 2);
    }
    let server = handle.join().unwrap().unwrap();
    assert!(server.peers().iter().all(|p| p.state == PeerState::Finished));
    assert_eq!(server.peers().iter().map(|p| p.round).sum::<u64>(), 4);
}

#[test]
fn mismatched_split_fails_the_handshake() {
    let net = tiny_net(8);
    let config = session_config(0.5, 20, net, 1, 4);
    let seeds = SessionSeeds::derive(20, 1);
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server = ServerNode::new(config.clone(), Model::new(net, seeds.shared_model).unwrap(), 1);
    let handle = std::thread::spawn(move || serve_tcp(&listener, server));
    let client = ClientNode::new(
        0,
        config.session_id,
        CutConfig::new(20, 0.8).unwrap(),
        config.schedule.clone(),
        config.lr,
        Model::new(net, 1).unwrap(),
        Arc::new(phantom_shards(1, 4, 8, 1).remove(0)),
        1,
    );
    let err = run_tcp_client(addr, client).unwrap_err();
    assert!(matches!(err.error, SessionError::Handshake(_)), "{err}");
    drop(handle);
}

#[test]
fn session_rejects_bad_setup() {
    let net = tiny_net(8);
    let seeds = SessionSeeds::derive(1, 2);
    let config = session_config(0.5, 20, net, 1, 4);
    assert!(Session::new(config.clone(), vec![], &seeds).is_err());
    assert!(Session::new(config.clone(), vec![Tensor::zeros(&[0, 1, 8, 8])], &seeds).is_err());
    let few = SessionSeeds::derive(1, 1);
    assert!(Session::new(config, phantom_shards(2, 4, 8, 1), &few).is_err());
}
