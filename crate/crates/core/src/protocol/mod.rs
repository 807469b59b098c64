//! Timestep ownership, wire format, transports, the training session and
//! split sampling.

pub mod cut;
pub mod sampling;
pub mod session;
pub mod transport;
pub mod wire;

pub use cut::{CutConfig, CutError, Ownership};
pub use sampling::{sample_monolithic, split_inference, split_inference_traced, SplitSample};
pub use session::{
    run_simulated_session, run_tcp_client, serve_tcp, ClientNode, ClientState, EntityEpoch, EpochStats,
    InProcessHub, PeerState, RoundReport, ServerError, ServerNode, Session, SessionConfig, SessionError,
    SessionFailure, SessionSeeds, TrainedSystem,
};
pub use transport::{TcpTransport, Transport, TransportError};
pub use wire::{decode, encode, Envelope, Message, WireError};
