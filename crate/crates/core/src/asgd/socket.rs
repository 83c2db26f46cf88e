//! Local TCP transport speaking the framed wire protocol. The server keeps
//! the single authoritative state behind a mutex so applies stay
//! serialized; each accepted connection is one shard, identified by its
//! accept order. Gradient frames do not carry the minibatch loss, so the
//! server records zero for it; the in-process channel transport is the one
//! the experiment driver uses.

use std::io::BufReader;
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::model::ModelParams;

use super::wire::{
    encode_fetch, encode_gradient, encode_snapshot, params_from_blocks, read_frame, write_frame,
    WireMessage,
};
use super::{GradMessage, ParamSnapshot, ServerHandle, ServerState};

/// Serves exactly `connections` shards, then returns once they all hang
/// up. Applies go through the shared `ServerState` one at a time.
pub fn serve_shards(
    listener: TcpListener,
    state: Arc<Mutex<ServerState>>,
    connections: usize,
) -> Result<()> {
    let mut workers = Vec::with_capacity(connections);
    for shard_id in 0..connections {
        let (stream, _) = listener.accept()?;
        let state = Arc::clone(&state);
        workers.push(std::thread::spawn(move || -> Result<()> {
            handle_connection(stream, state, shard_id)
        }));
    }
    for worker in workers {
        worker
            .join()
            .map_err(|_| Error::Protocol("connection handler panicked".to_string()))??;
    }
    Ok(())
}

fn handle_connection(
    stream: TcpStream,
    state: Arc<Mutex<ServerState>>,
    shard_id: usize,
) -> Result<()> {
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    while let Some(message) = read_frame(&mut reader)? {
        match message {
            WireMessage::Fetch => {
                let snapshot = state.lock().expect("server mutex").snapshot();
                let frame = encode_snapshot(snapshot.version, &snapshot.params);
                write_frame(&mut writer, &frame)?;
            }
            WireMessage::Gradient { step_stamp, blocks } => {
                let mut state = state.lock().expect("server mutex");
                let template = state.params().zeros_like();
                let grads = params_from_blocks(&template, &blocks)?;
                state.receive(GradMessage {
                    shard_id,
                    step_stamp,
                    grads,
                    // the wire format does not carry the loss
                    minibatch_loss: 0.0,
                });
            }
            WireMessage::Snapshot { .. } => {
                return Err(Error::Protocol(
                    "shards do not send snapshot frames".to_string(),
                ));
            }
        }
    }
    Ok(())
}

/// Shard-side transport over one TCP connection.
pub struct SocketHandle {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    template: ModelParams<f32>,
    lr_hint: f32,
}

impl SocketHandle {
    pub fn connect(addr: std::net::SocketAddr, template: ModelParams<f32>) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        let writer = stream.try_clone()?;
        Ok(Self {
            reader: BufReader::new(stream),
            writer,
            template,
            lr_hint: 0.0,
        })
    }
}

impl ServerHandle for SocketHandle {
    fn fetch(&mut self) -> Result<ParamSnapshot> {
        write_frame(&mut self.writer, &encode_fetch())?;
        match read_frame(&mut self.reader)? {
            Some(WireMessage::Snapshot { version, blocks }) => Ok(ParamSnapshot {
                version,
                params: params_from_blocks(&self.template, &blocks)?,
                current_lr: self.lr_hint,
            }),
            Some(other) => Err(Error::Protocol(format!(
                "expected snapshot frame, got {other:?}"
            ))),
            None => Err(Error::Protocol(
                "server closed the connection mid-fetch".to_string(),
            )),
        }
    }

    fn push(&mut self, msg: GradMessage) -> Result<()> {
        write_frame(&mut self.writer, &encode_gradient(msg.step_stamp, &msg.grads))
    }
}
