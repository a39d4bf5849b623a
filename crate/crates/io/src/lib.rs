//! Robot-side I/O: binary wire protocol, simulated arm+hand server and its
//! client, WebSocket bridge, tracking streams, episode recording, session
//! configuration and the teleoperation pipeline.

pub mod client;
pub mod config;
pub mod episode;
pub mod latency;
pub mod openxr;
pub mod pipeline;
pub mod plant;
pub mod protocol;
pub mod server;
pub mod stream;
pub mod synth;
pub mod ws;

pub use client::{Client, ClientError, ClientOptions, Inbound};
pub use config::{Session, SessionConfig};
pub use pipeline::{replay_episode, run_teleop, Outcome, ReplayReport, SessionReport, TeleopOptions};
pub use protocol::{Message, Role, StateMsg};
pub use server::{Mode, Server, ServerConfig};
pub use stream::{StreamReader, TrackedFrame};
