//! Manager/worker messages and their length-delimited framing.
//!
//! Each frame is a 4-byte big-endian payload length followed by one JSON
//! object tagged by `type`.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};

use crate::trainer::TrainingTask;

pub const MAX_FRAME: usize = 16 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WorkerMsg {
    Hello {
        worker_id: String,
        slots: usize,
    },
    Request {
        worker_id: String,
    },
    Progress {
        task_id: String,
        epoch: u32,
        metric: f64,
    },
    Done {
        task_id: String,
        metric: f64,
        checkpoint_ref: String,
        #[serde(default)]
        epochs_completed: u32,
    },
    Failed {
        task_id: String,
        message: String,
    },
    Heartbeat {
        worker_id: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ManagerMsg {
    Assign { task: TrainingTask },
    Wait {},
    Shutdown {},
}

pub fn write_frame<W: Write, T: Serialize>(w: &mut W, msg: &T) -> io::Result<()> {
    let payload = serde_json::to_vec(msg).map_err(io::Error::other)?;
    if payload.len() > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "frame too large"));
    }
    let mut buf = Vec::with_capacity(4 + payload.len());
    buf.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    buf.extend_from_slice(&payload);
    w.write_all(&buf)?;
    w.flush()
}

/// Reads one frame; `Ok(None)` on a clean end of stream between frames.
pub fn read_frame<R: Read, T: for<'de> Deserialize<'de>>(r: &mut R) -> io::Result<Option<T>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "frame too large"));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    serde_json::from_slice(&payload)
        .map(Some)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn wire_shape() {
        let json = serde_json::to_string(&WorkerMsg::Request { worker_id: "w1".into() }).unwrap();
        assert_eq!(json, r#"{"type":"request","worker_id":"w1"}"#);
        assert_eq!(serde_json::to_string(&ManagerMsg::Wait {}).unwrap(), r#"{"type":"wait"}"#);
    }

    #[test]
    fn truncated_frame_is_an_error() {
        let mut buf = Vec::new();
        write_frame(&mut buf, &ManagerMsg::Shutdown {}).unwrap();
        buf.pop();
        assert!(read_frame::<_, ManagerMsg>(&mut buf.as_slice()).is_err());
        assert!(read_frame::<_, ManagerMsg>(&mut [].as_slice()).unwrap().is_none());
        let huge = (MAX_FRAME as u32 + 1).to_be_bytes();
        assert!(read_frame::<_, ManagerMsg>(&mut huge.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn frames_round_trip(id in "[a-z0-9/]{1,20}", epoch in 0u32..1000, metric in 0.0f64..=1.0) {
            let msgs = vec![
                WorkerMsg::Progress { task_id: id.clone(), epoch, metric },
                WorkerMsg::Done { task_id: id.clone(), metric, checkpoint_ref: id.clone(), epochs_completed: epoch },
                WorkerMsg::Failed { task_id: id, message: "boom".into() },
            ];
            let mut buf = Vec::new();
            for m in &msgs {
                write_frame(&mut buf, m).unwrap();
            }
            let mut r = buf.as_slice();
            for m in &msgs {
                let got = read_frame::<_, WorkerMsg>(&mut r).unwrap();
                prop_assert_eq!(got.as_ref(), Some(m));
            }
            prop_assert!(read_frame::<_, WorkerMsg>(&mut r).unwrap().is_none());
        }
    }
}
