//! WebSocket relay for browser clients.
//!
//! Browsers cannot open raw TCP, so this relays the line protocols over
//! WebSocket, one text message per line. `/device` pipes to the device
//! listener verbatim; `/tracking` accepts streamed `frame` messages and
//! feeds them to the model like any other tracking source.

use std::net::SocketAddr;
use std::sync::Arc;

use futures_util::{SinkExt, StreamExt};
use log::{debug, warn};
use tokio::io::AsyncWriteExt;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::watch;
use tokio_tungstenite::tungstenite::handshake::server::{Request, Response};
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::WebSocketStream;

use crate::protocol::{decode, LineReader, TrackingMessage};
use crate::tracking::FrameQueue;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Route {
    Device,
    Tracking,
    Unknown,
}

fn route(path: &str) -> Route {
    match path.trim_end_matches('/') {
        "/device" => Route::Device,
        "/tracking" => Route::Tracking,
        _ => Route::Unknown,
    }
}

pub async fn serve_bridge(
    listener: TcpListener,
    device_addr: SocketAddr,
    frames: Arc<FrameQueue>,
    mut shutdown: watch::Receiver<bool>,
) {
    loop {
        let accepted = tokio::select! {
            _ = shutdown.changed() => return,
            a = listener.accept() => a,
        };
        let Ok((stream, peer)) = accepted else { continue };
        let frames = frames.clone();
        tokio::spawn(async move {
            if let Err(e) = handle(stream, device_addr, frames).await {
                debug!("bridge client {peer}: {e}");
            }
        });
    }
}

async fn handle(
    stream: TcpStream,
    device_addr: SocketAddr,
    frames: Arc<FrameQueue>,
) -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
    let mut target = Route::Unknown;
    let ws = tokio_tungstenite::accept_hdr_async(stream, |req: &Request, resp: Response| {
        target = route(req.uri().path());
        Ok(resp)
    })
    .await?;
    match target {
        Route::Device => relay_device(ws, device_addr).await,
        Route::Tracking => relay_tracking(ws, &frames).await,
        Route::Unknown => {
            let (mut tx, _) = ws.split();
            tx.send(Message::Close(None)).await?;
            Ok(())
        }
    }
}

async fn relay_device(
    ws: WebSocketStream<TcpStream>,
    device_addr: SocketAddr,
) -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
    let tcp = TcpStream::connect(device_addr).await?;
    tcp.set_nodelay(true).ok();
    let (rd, mut wr) = tcp.into_split();
    let (mut ws_tx, mut ws_rx) = ws.split();

    let upstream = async {
        while let Some(msg) = ws_rx.next().await {
            match msg? {
                Message::Text(text) => {
                    let mut line = text.as_str().as_bytes().to_vec();
                    if line.last() != Some(&b'\n') {
                        line.push(b'\n');
                    }
                    wr.write_all(&line).await?;
                }
                Message::Close(_) => break,
                _ => {}
            }
        }
        let _ = wr.shutdown().await;
        Ok::<_, Box<dyn std::error::Error + Send + Sync>>(())
    };
    let downstream = async {
        let mut reader = LineReader::new(rd);
        while let Some(line) = reader.next_line().await? {
            ws_tx.send(Message::text(String::from_utf8_lossy(&line).into_owned())).await?;
        }
        let _ = ws_tx.send(Message::Close(None)).await;
        Ok::<_, Box<dyn std::error::Error + Send + Sync>>(())
    };
    tokio::select! {
        r = upstream => r,
        r = downstream => r,
    }
}

async fn relay_tracking(
    ws: WebSocketStream<TcpStream>,
    frames: &FrameQueue,
) -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
    let (_, mut rx) = ws.split();
    while let Some(msg) = rx.next().await {
        match msg? {
            Message::Text(text) => match decode::<TrackingMessage>(text.as_str().as_bytes()) {
                Ok(TrackingMessage::Frame(f)) => frames.push(f),
                Ok(TrackingMessage::Poll) => {}
                Err(e) => warn!("bridge: bad tracking message: {e}"),
            },
            Message::Close(_) => break,
            _ => {}
        }
    }
    Ok(())
}
