//! Node-protocol listener.

use std::sync::Arc;
use std::time::Duration;

use asa_core::protocol::{self, error_code, ErrorMsg, FrameReader, Message};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc;

use crate::service::Manager;

pub async fn serve_nodes(manager: Arc<Manager>, listener: TcpListener) {
    loop {
        match listener.accept().await {
            Ok((stream, peer)) => {
                let _ = stream.set_nodelay(true);
                tokio::spawn(handle(manager.clone(), stream, peer.to_string()));
            }
            Err(e) => {
                tracing::warn!(error = %e, "accept failed");
                tokio::time::sleep(Duration::from_millis(100)).await;
            }
        }
    }
}

/// Advances heartbeat timeouts four times per interval.
pub async fn watch_liveness(manager: Arc<Manager>) {
    let every = Duration::from_millis((manager.config.liveness.interval_ms / 4).max(10));
    let mut tick = tokio::time::interval(every);
    loop {
        tick.tick().await;
        manager.with_cluster(|c, now| c.tick(now));
    }
}

fn error(code: &str, text: impl Into<String>) -> Vec<u8> {
    protocol::encode(&Message::Error(ErrorMsg { code: code.into(), text: text.into() }))
}

async fn handle(manager: Arc<Manager>, stream: TcpStream, peer: String) {
    let (mut reader, mut writer) = stream.into_split();
    let (tx, mut rx) = mpsc::unbounded_channel::<Vec<u8>>();
    let write_task = tokio::spawn(async move {
        while let Some(frame) = rx.recv().await {
            if writer.write_all(&frame).await.is_err() {
                break;
            }
        }
    });
    let conn_id = manager.next_conn_id();
    let mut node: Option<String> = None;
    let mut frames = FrameReader::new();
    let mut buf = vec![0u8; 256 * 1024];
    'conn: loop {
        let n = match reader.read(&mut buf).await {
            Ok(0) | Err(_) => break,
            Ok(n) => n,
        };
        for decoded in frames.feed(&buf[..n]) {
            let msg = match decoded {
                Ok(m) => m,
                Err(e) => {
                    tracing::warn!(%peer, error = %e, "bad frame from node");
                    let _ = tx.send(error(error_code::BAD_FRAME, e.to_string()));
                    continue;
                }
            };
            if let Message::Hello(h) = &msg {
                tracing::info!(node_id = %h.node_id, %peer, capacity = h.capacity, "node hello");
                manager.register_link(&h.node_id, conn_id, tx.clone());
                node = Some(h.node_id.clone());
                let (id, cap) = (h.node_id.clone(), h.capacity);
                manager.with_cluster(|c, now| c.hello(&id, &peer, cap, now));
                continue;
            }
            let Some(node_id) = node.as_deref() else {
                let _ = tx.send(error(error_code::BAD_FRAME, "expected Hello first"));
                continue;
            };
            if !matches!(msg, Message::Heartbeat(_)) {
                manager.with_cluster(|c, now| c.seen(node_id, now));
            }
            match msg {
                Message::Heartbeat(hb) => manager.with_cluster(|c, now| c.heartbeat(node_id, &hb.running_run_ids, now)),
                Message::AssignAck(a) => manager
                    .with_cluster(|c, now| c.assign_ack(node_id, &a.run_id, a.accepted, a.reason.as_deref(), now)),
                Message::RunStateChange(s) => {
                    manager.with_cluster(|c, now| c.state_change(node_id, &s.run_id, s.state, s.detail, now))
                }
                Message::RecordBatch(b) => {
                    let reply = manager.ingest(node_id, b);
                    let _ = tx.send(protocol::encode(&reply));
                }
                Message::Bye(_) => {
                    tracing::info!(node_id, "node said bye");
                    manager.with_cluster(|c, now| c.bye(node_id, now));
                    break 'conn;
                }
                Message::Error(e) => {
                    tracing::warn!(node_id, code = %e.code, text = %e.text, "node reported error");
                    manager.rejected(e.text);
                }
                other => {
                    let _ =
                        tx.send(error(error_code::BAD_FRAME, format!("unexpected message type {}", other.msg_type())));
                }
            }
        }
    }
    if let Some(node_id) = node {
        tracing::info!(%node_id, "node link closed");
        manager.unregister_link(&node_id, conn_id);
    }
    drop(tx);
    let _ = write_task.await;
}
